"""Differentiable affine warping of images.

Conventions used throughout the package:

- Coordinates are normalized to [-1, 1] on both axes; pixel centers sit at
  -1 + (2k+1)/extent (so the identity map reproduces an image exactly).
- A 2x3 parameter matrix [[a, b, tx], [c, d, ty]] maps an OUTPUT pixel's
  normalized coordinate (x, y, 1) to the SOURCE location it reads from
  (backward warping).
- Sampling outside [-1, 1] reads zero (zero-padding border policy).

``warp`` composes grid generation with bilinear sampling and is
differentiable with respect to both the image and the parameters; the
sampler itself owns no learned state.
"""

from __future__ import annotations

import numpy as np

from .tensor import NumericError, ShapeError, Tensor, affine_grid, bilinear_sample

IDENTITY = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


class Affine:
    """A 2x3 affine map on normalized coordinates."""

    def __init__(self, mat):
        m = np.asarray(mat, dtype=np.float64)
        if m.shape == (6,):
            m = m.reshape(2, 3)
        if m.shape != (2, 3):
            raise ShapeError(f"affine parameters must be 2x3 or 6 values, got {m.shape}")
        self.mat = m.copy()

    @classmethod
    def identity(cls) -> "Affine":
        return cls(IDENTITY)

    @classmethod
    def from_components(cls, rotation: float = 0.0, scale: float = 1.0,
                        shear: float = 0.0, translation=(0.0, 0.0)) -> "Affine":
        """Compose scale * rotation * shear plus a translation.

        rotation is in radians; shear is the off-diagonal x-shear factor.
        """
        cos, sin = np.cos(rotation), np.sin(rotation)
        rot = np.array([[cos, -sin], [sin, cos]])
        shr = np.array([[1.0, shear], [0.0, 1.0]])
        lin = scale * rot @ shr
        mat = np.zeros((2, 3))
        mat[:, :2] = lin
        mat[:, 2] = translation
        return cls(mat)

    def matrix3(self) -> np.ndarray:
        h = np.eye(3)
        h[:2, :] = self.mat
        return h

    def compose(self, other: "Affine") -> "Affine":
        """The map p -> self(other(p))."""
        return Affine((self.matrix3() @ other.matrix3())[:2, :])

    def inverse(self) -> "Affine":
        det = np.linalg.det(self.mat[:, :2])
        if abs(det) < 1e-12:
            raise NumericError("affine map is not invertible")
        return Affine(np.linalg.inv(self.matrix3())[:2, :])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points of shape (..., 2) through this transform."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.mat[:, :2].T + self.mat[:, 2]

    def params(self) -> np.ndarray:
        return self.mat.reshape(6).copy()

    def __repr__(self) -> str:
        return f"Affine({self.mat.tolist()})"


def _theta_tensor(theta, batch: int, dtype) -> Tensor:
    """Coerce an Affine, array or Tensor into a (N,2,3) parameter tensor."""
    if isinstance(theta, Affine):
        arr = theta.mat[None, :, :]
    elif isinstance(theta, Tensor):
        t = theta
        if t.ndim == 2:
            t = t.reshape((1, 2, 3))
        if t.shape[1:] != (2, 3):
            raise ShapeError(f"theta tensor must be (N,2,3), got {theta.shape}")
        if t.shape[0] == 1 and batch > 1:
            raise ShapeError(
                f"theta batch 1 cannot drive a batch of {batch} images; tile it explicitly"
            )
        return t
    else:
        arr = np.asarray(theta, dtype=np.float64)
        if arr.shape == (6,):
            arr = arr.reshape(1, 2, 3)
        elif arr.shape == (2, 3):
            arr = arr[None, :, :]
        elif arr.ndim != 3 or arr.shape[1:] != (2, 3):
            raise ShapeError(f"theta must be (2,3), (6,) or (N,2,3), got {arr.shape}")
    if arr.shape[0] == 1 and batch > 1:
        arr = np.broadcast_to(arr, (batch, 2, 3))
    return Tensor(np.ascontiguousarray(arr.astype(dtype, copy=False)))


def warp(image, theta) -> Tensor:
    """Warp an image (or batch) by an affine map; returns the same rank.

    Accepts images of shape (H,W), (C,H,W) or (N,C,H,W) as arrays or
    Tensors, and theta as Affine, array or Tensor.
    """
    img = image if isinstance(image, Tensor) else Tensor(image)
    squeeze = 0
    while img.ndim < 4:
        img = img.reshape((1,) + img.shape)
        squeeze += 1
    if img.ndim != 4:
        raise ShapeError(f"warp expects rank <= 4 images, got {image.shape}")
    n, _, h, w = img.shape
    th = _theta_tensor(theta, n, img.dtype)
    grid = affine_grid(th, h, w)
    out = bilinear_sample(img, grid)
    for _ in range(squeeze):
        out = out.reshape(out.shape[1:])
    return out


_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]])


def corner_errors(theta_pred, theta_true, extent: int) -> np.ndarray:
    """Mean corner displacement in pixels for each pair in a batch.

    Maps the four normalized image corners through both parameter sets and
    averages the Euclidean distances, scaled to pixels by extent/2.
    """
    a = _as_batch(theta_pred)
    b = _as_batch(theta_true)
    if a.shape != b.shape:
        raise ShapeError(f"theta batches differ: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise NumericError("corner error requires finite parameters")
    pa = np.einsum("nkm,cm->nck", a[:, :, :2], _CORNERS) + a[:, None, :, 2]
    pb = np.einsum("nkm,cm->nck", b[:, :, :2], _CORNERS) + b[:, None, :, 2]
    disp = (pa - pb) * (extent / 2.0)
    return np.linalg.norm(disp, axis=-1).mean(axis=-1)


def corner_error(theta_pred, theta_true, extent: int) -> float:
    return float(corner_errors(theta_pred, theta_true, extent)[0])


def _as_batch(theta) -> np.ndarray:
    if isinstance(theta, Affine):
        return theta.mat[None, :, :]
    if isinstance(theta, Tensor):
        theta = theta.data
    arr = np.asarray(theta, dtype=np.float64)
    if arr.shape == (6,):
        return arr.reshape(1, 2, 3)
    if arr.shape == (2, 3):
        return arr[None, :, :]
    if arr.ndim == 3 and arr.shape[1:] == (2, 3):
        return arr
    raise ShapeError(f"theta must be (2,3), (6,) or (N,2,3), got {arr.shape}")
