"""Siamese document matcher: a shared convolutional feature extractor and a
fully connected similarity head scoring concatenated feature pairs in [0, 1].

Pair scoring is made order-invariant by averaging the head's output over
both concatenation orders, and training minimizes cross entropy over both
orders jointly.  The extractor has no objective of its own; it learns only
from gradients that arrive through the similarity head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .metrics import roc_auc
from .nn import ConvFeatures, Linear, Module
from .optim import MomentumSGD, TrainState
from .rng import seeded_rng
from .tensor import DataError, NumericError, ShapeError, Tensor


@dataclass(frozen=True)
class MatcherTopology:
    extent: int = 128
    stages: int = 7
    base_channels: int = 16
    feature_dim: int = 1024
    head_widths: tuple[int, ...] = (1024, 512, 256)

    def validate(self) -> None:
        if self.extent != 1 << self.stages:
            raise ShapeError(
                f"matcher input extent must be 2**stages; got extent {self.extent} "
                f"with {self.stages} stages"
            )

    def descriptor(self) -> dict:
        d = asdict(self)
        d["head_widths"] = list(self.head_widths)
        d["kind"] = "matcher"
        return d

    @classmethod
    def from_descriptor(cls, desc: dict) -> "MatcherTopology":
        return cls(
            extent=int(desc["extent"]), stages=int(desc["stages"]),
            base_channels=int(desc["base_channels"]),
            feature_dim=int(desc["feature_dim"]),
            head_widths=tuple(int(w) for w in desc["head_widths"]),
        )


MATCHER_PRESETS = {
    "paper": MatcherTopology(),
    "desk": MatcherTopology(extent=64, stages=6),
}


class SimilarityHead(Module):
    """Fully connected scorer on a concatenated feature pair.

    Hidden layers use tanh; the output head squashes to [0, 1] with a
    sigmoid.
    """

    def __init__(self, feature_dim: int, widths: tuple[int, ...],
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.feature_dim = feature_dim
        self.hidden: list[Linear] = []
        fan = 2 * feature_dim
        for w in widths:
            self.hidden.append(Linear(fan, w, rng, dtype=dtype))
            fan = w
        self.out = Linear(fan, 1, rng, dtype=dtype)

    def forward(self, pair_features: Tensor) -> Tensor:
        x = pair_features
        for lin in self.hidden:
            x = T.tanh(lin(x))
        return T.sigmoid(self.out(x))


class DocumentMatcher(Module):
    def __init__(self, topology: MatcherTopology, seed: int = 0, dtype=np.float64):
        super().__init__()
        topology.validate()
        self.topology = topology
        init_rng = seeded_rng(rngmod.INIT, seed)
        self.features = ConvFeatures(
            topology.extent, topology.stages, topology.base_channels,
            topology.feature_dim, init_rng, dtype=dtype,
        )
        self.head = SimilarityHead(topology.feature_dim, topology.head_widths,
                                   init_rng, dtype=dtype)
        self.dtype = np.dtype(dtype)

    # -- forward paths ------------------------------------------------------

    def _as_images(self, x) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if t.ndim == 3:
            t = t.reshape((1,) + t.shape)
        if t.ndim != 4 or t.shape[1] != 1:
            raise ShapeError(f"expected grayscale images (N,1,H,W), got {t.shape}")
        return t

    def embed(self, images) -> Tensor:
        """Feature vectors in (-1, 1), one row per image."""
        return self.features(self._as_images(images))

    def score(self, fa: Tensor, fb: Tensor) -> Tensor:
        """Similarity of feature rows in one concatenation order."""
        fd = self.topology.feature_dim
        if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fd or fb.shape[1] != fd:
            raise ShapeError(
                f"score expects features of width {fd}, got {fa.shape} and {fb.shape}"
            )
        return self.head(T.concat([fa, fb], axis=1))

    def symmetric_score(self, a, b) -> Tensor:
        """Order-invariant pair score: the two concatenation orders averaged."""
        fa = self.embed(a)
        fb = self.embed(b)
        return (self.score(fa, fb) + self.score(fb, fa)) * 0.5

    def pair_loss(self, queries, targets, labels) -> Tensor:
        """Cross entropy averaged over both concatenation orders."""
        y = np.asarray(labels, dtype=self.dtype).reshape(-1, 1)
        fq = self.embed(queries)
        ft = self.embed(targets)
        if fq.shape[0] != y.shape[0]:
            raise ShapeError(
                f"{fq.shape[0]} pairs but {y.shape[0]} labels"
            )
        both = T.concat([
            T.concat([fq, ft], axis=1),
            T.concat([ft, fq], axis=1),
        ], axis=0)
        preds = self.head(both)
        return T.bce_loss(preds, np.concatenate([y, y], axis=0))

    # -- bulk scoring ---------------------------------------------------------

    def score_pairs(self, queries: np.ndarray, targets: np.ndarray,
                    batch: int = 64) -> np.ndarray:
        """Symmetric scores for aligned query/target arrays, inference mode."""
        was_training = self.training
        self.eval()
        out = np.empty(len(queries), dtype=np.float64)
        with T.no_grad():
            for lo in range(0, len(queries), batch):
                hi = min(lo + batch, len(queries))
                s = self.symmetric_score(queries[lo:hi], targets[lo:hi])
                out[lo:hi] = s.data[:, 0]
        self.train(was_training)
        return out

    def score_matrix(self, queries: np.ndarray, targets: np.ndarray,
                     embed_batch: int = 64, query_block: int = 8) -> np.ndarray:
        """All query-by-target symmetric scores, inference mode."""
        was_training = self.training
        self.eval()
        with T.no_grad():
            ft = self._embed_all(targets, embed_batch)
            fq = self._embed_all(queries, embed_batch)
            nq, nt = len(fq), len(ft)
            scores = np.empty((nq, nt), dtype=np.float64)
            for lo in range(0, nq, query_block):
                hi = min(lo + query_block, nq)
                block = fq[lo:hi]
                a = np.repeat(block, nt, axis=0)
                b = np.tile(ft, (hi - lo, 1))
                fwd = self.head(Tensor(np.concatenate([a, b], axis=1))).data
                rev = self.head(Tensor(np.concatenate([b, a], axis=1))).data
                scores[lo:hi] = (0.5 * (fwd + rev)).reshape(hi - lo, nt)
        self.train(was_training)
        return scores

    def _embed_all(self, images: np.ndarray, batch: int) -> np.ndarray:
        chunks = []
        for lo in range(0, len(images), batch):
            chunks.append(self.embed(images[lo:lo + batch]).data)
        return np.concatenate(chunks, axis=0)


# -- training -------------------------------------------------------------------


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-2
    momentum: float = 0.9
    lr_decay: float = 0.1
    plateau_patience: int = 5
    min_lr: float = 1e-6


class RetrievalPairs:
    """Balanced pair stream over a retrieval corpus slice.

    Each epoch yields one positive pair per query plus one freshly sampled
    negative (a uniformly drawn target with a different content id), so the
    label mix is exactly 1:1.
    """

    def __init__(self, queries: np.ndarray, targets: np.ndarray,
                 query_target_idx: np.ndarray, seed: int = 0,
                 resample: bool = True):
        if len(queries) == 0:
            raise DataError("empty pair dataset")
        if len(targets) < 2:
            raise DataError("need at least 2 targets to sample negatives")
        self.queries = queries
        self.targets = targets
        self.idx = np.asarray(query_target_idx, dtype=np.int64)
        self.seed = seed
        self.resample = resample

    def pairs_for_epoch(self, epoch: int):
        rng = seeded_rng(rngmod.NEGATIVES, self.seed, epoch if self.resample else 0)
        nt = len(self.targets)
        neg = rng.integers(0, nt - 1, size=len(self.idx))
        neg = np.where(neg >= self.idx, neg + 1, neg)  # skip the true target
        q = np.concatenate([self.queries, self.queries], axis=0)
        t = np.concatenate([self.targets[self.idx], self.targets[neg]], axis=0)
        y = np.concatenate([np.ones(len(self.idx)), np.zeros(len(self.idx))])
        return q, t, y


class LabeledPairs:
    """A fixed list of (query, target, label) pairs."""

    def __init__(self, queries: np.ndarray, targets: np.ndarray, labels: np.ndarray):
        if not (len(queries) == len(targets) == len(labels)):
            raise DataError("pair arrays must have equal length")
        if len(queries) == 0:
            raise DataError("empty pair dataset")
        self.queries = queries
        self.targets = targets
        self.labels = np.asarray(labels, dtype=np.float64)

    def pairs_for_epoch(self, epoch: int):
        return self.queries, self.targets, self.labels


def train_matcher(matcher: DocumentMatcher, dataset, cfg: TrainConfig,
                  val_pairs=None, optimizer: MomentumSGD | None = None,
                  start_epoch: int = 0, state: TrainState | None = None,
                  log=None) -> tuple[list[dict], MomentumSGD, TrainState]:
    """Mini-batch training; returns per-epoch metrics, optimizer and state.

    Deterministic under (cfg, seed): batch order, negative sampling and all
    arithmetic are derived from the config seed and the epoch index.
    """
    opt = optimizer or MomentumSGD(matcher.named_parameters(), cfg.lr, cfg.momentum)
    st = state or TrainState(lr=opt.lr)
    opt.lr = st.lr
    history: list[dict] = []
    for epoch in range(start_epoch, cfg.epochs):
        q, t, y = dataset.pairs_for_epoch(epoch)
        if epoch == start_epoch and (not np.any(y == 0) or not np.any(y == 1)):
            raise DataError("training pairs must contain both labels")
        order = seeded_rng(rngmod.BATCH, cfg.seed, epoch).permutation(len(y))
        matcher.train()
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss = matcher.pair_loss(q[idx], t[idx], y[idx])
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite training loss at epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        mean_loss = float(np.mean(losses))

        if val_pairs is not None:
            vq, vt, vy = val_pairs
        else:
            vq, vt, vy = q, t, y
        auc = roc_auc(matcher.score_pairs(vq, vt), vy).auc

        if mean_loss < st.best_loss * 0.99:
            st.best_loss = mean_loss
            st.stall = 0
        else:
            st.stall += 1
            if st.stall >= cfg.plateau_patience:
                opt.lr = max(opt.lr * cfg.lr_decay, cfg.min_lr)
                st.stall = 0
        st.lr = opt.lr

        record = {"epoch": epoch + 1, "loss": mean_loss, "auc": auc, "lr": opt.lr}
        history.append(record)
        if log:
            log(record)
    return history, opt, st
