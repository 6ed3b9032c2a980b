"""One-shot affine registration.

A shared convolutional extractor embeds the source and target images; a
small fully connected inferencer maps the concatenated features to the six
affine coefficients.  Training is unsupervised: the predicted coefficients
drive a differentiable warp of the source, and the loss is the mean squared
intensity difference against the target.  Gradients reach the network only
through the sampler; no ground-truth parameters are ever read.

The final inferencer layer starts at zero weights with an identity bias, so
an untrained network predicts the identity map for every input.  That keeps
early warps inside the sampling range, where the photometric gradient is
informative.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .nn import ConvFeatures, Linear, Module
from .optim import MomentumSGD, TrainState
from .rng import seeded_rng
from .tensor import DataError, NumericError, ShapeError, Tensor
from .warp import IDENTITY, _theta_tensor

IDENTITY6 = IDENTITY.reshape(6)


@dataclass(frozen=True)
class RegistrationTopology:
    extent: int = 64
    stages: int = 5
    base_channels: int = 8
    feature_dim: int = 256
    inferencer_widths: tuple[int, ...] = (128,)

    def validate(self) -> None:
        if self.extent % (1 << self.stages):
            raise ShapeError(
                f"extent {self.extent} cannot be halved {self.stages} times"
            )

    def descriptor(self) -> dict:
        d = asdict(self)
        d["inferencer_widths"] = list(self.inferencer_widths)
        d["kind"] = "registration"
        return d

    @classmethod
    def from_descriptor(cls, desc: dict) -> "RegistrationTopology":
        return cls(
            extent=int(desc["extent"]), stages=int(desc["stages"]),
            base_channels=int(desc["base_channels"]),
            feature_dim=int(desc["feature_dim"]),
            inferencer_widths=tuple(int(w) for w in desc["inferencer_widths"]),
        )


REGISTRATION_PRESETS = {
    "reg-desk": RegistrationTopology(),
    "reg-wide": RegistrationTopology(base_channels=16),
}


class RegistrationNet(Module):
    def __init__(self, topology: RegistrationTopology, seed: int = 0, dtype=np.float64):
        super().__init__()
        topology.validate()
        self.topology = topology
        init_rng = seeded_rng(rngmod.INIT, seed)
        self.features = ConvFeatures(
            topology.extent, topology.stages, topology.base_channels,
            topology.feature_dim, init_rng, dtype=dtype,
        )
        self.hidden: list[Linear] = []
        fan = 2 * topology.feature_dim
        for w in topology.inferencer_widths:
            self.hidden.append(Linear(fan, w, rng=init_rng, dtype=dtype))
            fan = w
        self.out = Linear(fan, 6, rng=init_rng, dtype=dtype)
        self.out.weight.data[...] = 0.0
        self.out.bias.data[...] = IDENTITY6.astype(dtype)
        self.dtype = np.dtype(dtype)

    def _as_images(self, x) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if t.ndim == 3:
            t = t.reshape((1,) + t.shape)
        if t.ndim != 4 or t.shape[1] != 1:
            raise ShapeError(f"expected grayscale images (N,1,H,W), got {t.shape}")
        return t

    def theta_params(self, source, target) -> Tensor:
        """Predicted affine coefficients, shape (N, 6), linear output."""
        s = self._as_images(source)
        t = self._as_images(target)
        if s.shape != t.shape:
            raise ShapeError(f"source/target shapes differ: {s.shape} vs {t.shape}")
        h = T.concat([self.features(s), self.features(t)], axis=1)
        for lin in self.hidden:
            h = T.tanh(lin(h))
        return self.out(h)

    def infer(self, source, target) -> np.ndarray:
        """One-shot inference: a single forward pass, no gradient graph.

        Returns (N, 2, 3) parameter matrices.
        """
        was_training = self.training
        self.eval()
        with T.no_grad():
            theta = self.theta_params(source, target).data
        self.train(was_training)
        return theta.reshape(-1, 2, 3).astype(np.float64)


def photometric_loss(source, target, theta) -> Tensor:
    """Mean squared intensity difference between warp(source, theta) and target."""
    src = source if isinstance(source, Tensor) else Tensor(source)
    dst = target if isinstance(target, Tensor) else Tensor(target)
    if src.ndim == 3:
        src = src.reshape((1,) + src.shape)
    if dst.ndim == 3:
        dst = dst.reshape((1,) + dst.shape)
    if src.shape != dst.shape:
        raise ShapeError(f"source/target shapes differ: {src.shape} vs {dst.shape}")
    n, _, h, w = src.shape
    if isinstance(theta, Tensor):
        th = theta if theta.ndim == 3 else theta.reshape((theta.shape[0], 2, 3))
    else:
        th = _theta_tensor(theta, n, src.dtype)
    if not np.all(np.isfinite(th.data)):
        raise NumericError("photometric loss requires finite warp parameters")
    grid = T.affine_grid(th, h, w)
    warped = T.bilinear_sample(src, grid)
    diff = warped - dst
    return (diff * diff).mean()


# -- training ---------------------------------------------------------------------


@dataclass
class RegTrainConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-2
    momentum: float = 0.9
    lr_decay: float = 0.1
    plateau_patience: int = 5
    min_lr: float = 1e-6
    swap_augment: bool = True


class RegistrationPairs:
    """(source, target) pair stream; optionally swaps pair roles at random
    each epoch so the network also learns inverse alignments."""

    def __init__(self, sources: np.ndarray, targets: np.ndarray, seed: int = 0,
                 swap_augment: bool = True):
        if len(sources) != len(targets):
            raise DataError("source/target counts differ")
        if len(sources) == 0:
            raise DataError("empty registration dataset")
        self.sources = sources
        self.targets = targets
        self.seed = seed
        self.swap_augment = swap_augment

    def pairs_for_epoch(self, epoch: int):
        if not self.swap_augment:
            return self.sources, self.targets
        rng = seeded_rng(rngmod.SWAP, self.seed, epoch)
        flip = rng.random(len(self.sources)) < 0.5
        src = np.where(flip[:, None, None, None], self.targets, self.sources)
        dst = np.where(flip[:, None, None, None], self.sources, self.targets)
        return src, dst


from .matcher import TrainState  # shared optimizer-side resume scalars


def train_registrar(net: RegistrationNet, dataset, cfg: RegTrainConfig,
                    optimizer: MomentumSGD | None = None, start_epoch: int = 0,
                    state: TrainState | None = None, log=None
                    ) -> tuple[list[dict], MomentumSGD, TrainState]:
    """Unsupervised photometric training; ground-truth warps are never read."""
    opt = optimizer or MomentumSGD(net.named_parameters(), cfg.lr, cfg.momentum)
    st = state or TrainState(lr=opt.lr)
    opt.lr = st.lr
    history: list[dict] = []
    for epoch in range(start_epoch, cfg.epochs):
        src, dst = dataset.pairs_for_epoch(epoch)
        order = seeded_rng(rngmod.BATCH, cfg.seed, epoch).permutation(len(src))
        net.train()
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            theta = net.theta_params(src[idx], dst[idx])
            loss = photometric_loss(src[idx], dst[idx], theta)
            if not np.isfinite(loss.item()):
                raise NumericError(
                    f"non-finite photometric loss at epoch {epoch + 1}; "
                    f"lr {opt.lr} may be too high"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        mean_loss = float(np.mean(losses))

        if mean_loss < st.best_loss * 0.99:
            st.best_loss = mean_loss
            st.stall = 0
        else:
            st.stall += 1
            if st.stall >= cfg.plateau_patience:
                opt.lr = max(opt.lr * cfg.lr_decay, cfg.min_lr)
                st.stall = 0
        st.lr = opt.lr

        record = {"epoch": epoch + 1, "loss": mean_loss, "lr": opt.lr}
        history.append(record)
        if log:
            log(record)
    return history, opt, st
