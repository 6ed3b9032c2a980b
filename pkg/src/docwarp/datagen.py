"""Synthetic document corpus generation.

Documents are pseudo-pages: horizontal text-line bands filled with solid
rectangular glyph blocks separated by random gaps, plus occasional rule
lines.  Ink is 1.0 on a 0.0 background, so warping introduces background
at the borders rather than ink.

A corpus pairs clean target images with warped, noise-corrupted query
images and records the warp parameters per query in a manifest.  The same
corpus drives matching (query vs target retrieval) and registration
(recover the warp from the image pair; the recorded parameters are for
evaluation only).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import uniform_filter

from . import rng as rngmod
from .rng import seeded_rng
from .tensor import DataError
from .warp import Affine, warp

INK_FRACTION_RANGE = (0.05, 0.4)
MANIFEST_NAME = "manifest.tsv"
META_NAME = "corpus.json"
MANIFEST_COLUMNS = (
    "query_path", "target_path", "content_id", "noise_level",
    "theta_a", "theta_b", "theta_tx", "theta_c", "theta_d", "theta_ty",
)


# -- documents ----------------------------------------------------------------


def gen_document(seed, extent: int) -> np.ndarray:
    """Deterministic pseudo-document of shape (1, extent, extent) in {0, 1}.

    Layout parameters are redrawn until the ink fraction lands inside
    INK_FRACTION_RANGE.  `seed` may be an int or a tuple of ints.
    """
    if extent < 2 or extent & (extent - 1):
        raise DataError(f"document extent must be a power of two, got {extent}")
    entropy = seed if isinstance(seed, tuple) else (seed,)
    rng = seeded_rng(rngmod.DOCUMENT, *entropy)
    scale = extent / 64.0
    lo, hi = INK_FRACTION_RANGE
    for _ in range(32):
        img = _draw_page(rng, extent, scale)
        ink = img.mean()
        if lo <= ink <= hi:
            return img[None, :, :]
    raise DataError(f"could not reach ink fraction {INK_FRACTION_RANGE} at extent {extent}")


def _draw_page(rng: np.random.Generator, extent: int, scale: float) -> np.ndarray:
    img = np.zeros((extent, extent), dtype=np.float64)
    margin = max(1, int(round(rng.uniform(2, 5) * scale)))
    y = margin + int(rng.integers(0, max(1, int(3 * scale) + 1)))
    while y < extent - margin:
        line_h = max(2, int(round(rng.uniform(5, 9) * scale)))
        glyph_h = max(1, line_h - max(1, int(round(rng.uniform(1.5, 3) * scale))))
        if y + glyph_h > extent - margin:
            break
        if rng.random() < 0.12:
            # paragraph break
            y += line_h
            continue
        if rng.random() < 0.1:
            img[y + glyph_h // 2, margin:extent - margin] = 1.0
            y += line_h
            continue
        x = margin + int(rng.integers(0, max(1, int(6 * scale) + 1)))
        right = extent - margin
        while x < right - 1:
            word_w = max(1, int(round(rng.uniform(2, 11) * scale)))
            word_w = min(word_w, right - x)
            img[y:y + glyph_h, x:x + word_w] = 1.0
            x += word_w + max(1, int(round(rng.uniform(1, 4) * scale)))
        y += line_h
    return img


# -- warps ----------------------------------------------------------------------


@dataclass(frozen=True)
class WarpBounds:
    """Uniform sampling ranges for synthetic transforms.

    rotation_deg bounds |rotation|; translation bounds |tx|,|ty| in
    normalized units; scale s means factors in [1-s, 1+s]; shear bounds
    the x-shear coefficient.
    """

    rotation_deg: float = 5.0
    translation: float = 0.05
    scale: float = 0.05
    shear: float = 0.05

    def validate(self) -> None:
        if not 0.0 <= self.scale < 1.0:
            raise DataError(
                f"scale bound {self.scale} admits non-invertible maps (needs 0 <= s < 1)"
            )
        if self.rotation_deg < 0 or self.translation < 0 or self.shear < 0:
            raise DataError("warp bounds must be non-negative")
        if self.rotation_deg >= 90:
            raise DataError(f"rotation bound {self.rotation_deg} deg is out of range")


def random_theta(bounds: WarpBounds, rng: np.random.Generator) -> Affine:
    """Uniform draw inside the bounds, composed as scale*rotation*shear
    plus translation."""
    bounds.validate()
    rot = np.deg2rad(rng.uniform(-bounds.rotation_deg, bounds.rotation_deg))
    sc = rng.uniform(1.0 - bounds.scale, 1.0 + bounds.scale)
    sh = rng.uniform(-bounds.shear, bounds.shear)
    t = rng.uniform(-bounds.translation, bounds.translation, size=2)
    return Affine.from_components(rotation=rot, scale=sc, shear=sh, translation=t)


def apply_warp(image: np.ndarray, theta: Affine) -> np.ndarray:
    """Warp a (1,H,W) or (H,W) image array; plain-array convenience."""
    return warp(image, theta).data


# -- noise ladder ----------------------------------------------------------------


def box_blur(image: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return image
    size = [1] * (image.ndim - 2) + [2 * radius + 1, 2 * radius + 1]
    return uniform_filter(image, size=size, mode="nearest")


def apply_noise(image: np.ndarray, level: int, seed) -> np.ndarray:
    """Corrupt an image at one of 10 severities.

    Level 0 returns the input bit-exact.  Level L applies, in order:
    box blur of radius L//3, additive Gaussian noise (sigma 0.03*L),
    salt-and-pepper impulses (density 0.005*L), and for L >= 5 one
    occluding rectangle erasing 2L percent of the area; the result is
    clamped to [0, 1].  `seed` may be an int, a tuple or a Generator.
    """
    if not 0 <= int(level) <= 9 or int(level) != level:
        raise DataError(f"noise level must be an integer in 0..9, got {level}")
    level = int(level)
    if level == 0:
        return image.copy()
    if isinstance(seed, np.random.Generator):
        rng = seed
    else:
        entropy = seed if isinstance(seed, tuple) else (seed,)
        rng = seeded_rng(rngmod.QUERY, *entropy)
    out = box_blur(image.astype(np.float64, copy=True), level // 3)
    out = out + rng.normal(0.0, 0.03 * level, size=out.shape)
    density = 0.005 * level
    u = rng.random(out.shape)
    out[u < density / 2.0] = 1.0
    out[u > 1.0 - density / 2.0] = 0.0
    if level >= 5:
        h, w = out.shape[-2], out.shape[-1]
        frac = 0.02 * level
        aspect = rng.uniform(0.5, 2.0)
        rw = min(w, max(1, int(round(w * np.sqrt(frac * aspect)))))
        rh = min(h, max(1, int(round(h * np.sqrt(frac / aspect)))))
        x0 = int(rng.integers(0, w - rw + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        out[..., y0:y0 + rh, x0:x0 + rw] = 0.0
    return np.clip(out, 0.0, 1.0)


# -- image and manifest I/O --------------------------------------------------------


def save_image(path, image: np.ndarray) -> None:
    """Write a (1,H,W) or (H,W) float image in [0,1] as 8-bit grayscale PNG."""
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[0]
    quant = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quant, mode="L").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """Read a grayscale PNG back to a (1,H,W) float64 image in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return arr[None, :, :]


@dataclass
class ManifestRow:
    query_path: str
    target_path: str
    content_id: int
    noise_level: int
    theta_raw: tuple[str, ...]

    def theta(self) -> Affine:
        """Parse the recorded warp; only evaluation paths call this."""
        try:
            vals = [float(v) for v in self.theta_raw]
        except ValueError as exc:
            raise DataError(f"unparsable warp parameters {self.theta_raw}") from exc
        return Affine(np.array(vals).reshape(2, 3))


def write_manifest(path, rows: list[ManifestRow]) -> None:
    lines = ["# " + "\t".join(MANIFEST_COLUMNS)]
    for r in rows:
        lines.append("\t".join([
            r.query_path, r.target_path, str(r.content_id), str(r.noise_level),
            *r.theta_raw,
        ]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list[ManifestRow]:
    rows = []
    text = Path(path).read_text(encoding="utf-8")
    for i, line in enumerate(text.splitlines(), start=1):
        if not line or line.startswith("#"):
            continue
        cells = line.split("\t")
        if len(cells) != len(MANIFEST_COLUMNS):
            raise DataError(
                f"manifest row {i}: expected {len(MANIFEST_COLUMNS)} columns, got {len(cells)}"
            )
        try:
            content_id = int(cells[2])
            noise_level = int(cells[3])
        except ValueError as exc:
            raise DataError(f"manifest row {i}: {exc}") from exc
        rows.append(ManifestRow(
            query_path=cells[0], target_path=cells[1], content_id=content_id,
            noise_level=noise_level, theta_raw=tuple(cells[4:10]),
        ))
    return rows


# -- corpus ------------------------------------------------------------------------


@dataclass
class Corpus:
    root: Path
    meta: dict
    rows: list[ManifestRow]

    @property
    def extent(self) -> int:
        return int(self.meta["extent"])

    @property
    def n_docs(self) -> int:
        return int(self.meta["n_docs"])

    def image(self, relpath: str) -> np.ndarray:
        return load_image(self.root / relpath)

    def target_path(self, content_id: int) -> str:
        return f"targets/t{content_id:04d}.png"


def build_corpus(out_dir, n_docs: int, extent: int,
                 bounds: WarpBounds | None = None,
                 noise_levels=tuple(range(10)), seed: int = 0,
                 smooth: int = 0) -> Path:
    """Generate a corpus on disk and return the manifest path.

    Writes one clean target per document and one warped+noised query per
    (document, noise level).  Fully deterministic under (seed, arguments):
    regeneration produces byte-identical files.
    """
    if n_docs < 2:
        raise DataError(f"corpus needs at least 2 documents, got {n_docs}")
    bounds = bounds or WarpBounds()
    bounds.validate()
    levels = sorted({int(l) for l in noise_levels})
    if levels and (levels[0] < 0 or levels[-1] > 9):
        raise DataError(f"noise levels must lie in 0..9, got {levels}")

    root = Path(out_dir)
    try:
        (root / "targets").mkdir(parents=True, exist_ok=True)
        for lv in levels:
            (root / "queries" / f"l{lv}").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create corpus directory under {root}: {exc}") from exc

    rows: list[ManifestRow] = []
    for i in range(n_docs):
        doc = gen_document((seed, i), extent)
        if smooth:
            doc = box_blur(doc, smooth)
        tpath = f"targets/t{i:04d}.png"
        save_image(root / tpath, doc)
        for lv in levels:
            qrng = seeded_rng(rngmod.QUERY, seed, i, lv)
            theta = random_theta(bounds, qrng)
            q = apply_warp(doc, theta)
            q = apply_noise(q, lv, qrng)
            qpath = f"queries/l{lv}/q{i:04d}.png"
            save_image(root / qpath, q)
            rows.append(ManifestRow(
                query_path=qpath, target_path=tpath, content_id=i,
                noise_level=lv, theta_raw=tuple(repr(v) for v in theta.params()),
            ))

    write_manifest(root / MANIFEST_NAME, rows)
    meta = {
        "n_docs": n_docs,
        "extent": extent,
        "noise_levels": levels,
        "seed": seed,
        "smooth": smooth,
        "warp_bounds": asdict(bounds),
    }
    (root / META_NAME).write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return root / MANIFEST_NAME


def open_corpus(path) -> Corpus:
    root = Path(path)
    meta_path = root / META_NAME
    manifest_path = root / MANIFEST_NAME
    if not meta_path.exists() or not manifest_path.exists():
        raise DataError(f"{root} is not a corpus directory (missing {META_NAME} or {MANIFEST_NAME})")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    rows = read_manifest(manifest_path)
    return Corpus(root=root, meta=meta, rows=rows)
