"""Measurement-domain losses: INR consistency, latent prior and self-supervision.

K-space is passed as complex (n_c, H, W) arrays with a boolean (H, W) mask of
the entries a loss may read.  Nothing outside the mask is ever touched, so
unmeasured or held-out entries cannot leak into a gradient.  L1 distances
sum absolute real and imaginary parts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .mri import SensitivitySet, acs_columns, apply_A, select_entries

__all__ = [
    "LossWeights",
    "PRESETS",
    "KSplit",
    "inr_consistency",
    "latent_reg",
    "fine_loss",
    "normalized_l1",
    "make_ssdu_split",
    "ssdu_loss",
    "n2n_degrade",
    "n2n_loss",
]

ModelEval = Callable[[np.ndarray, np.ndarray], ad.Tensor]


@dataclass(frozen=True)
class LossWeights:
    inr: float = 1.0
    self_: float = 1.0
    reg: float = 1e-4

    def __post_init__(self):
        for name in ("inr", "self_", "reg"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


PRESETS = {
    "unet": LossWeights(inr=1.0, self_=1.0, reg=1e-4),
    "varnet": LossWeights(inr=1e-3, self_=1.0, reg=1e-4),
}


def _planes(y: np.ndarray) -> np.ndarray:
    return np.stack([y.real, y.imag], axis=1)


def _check_mask(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("loss mask selects no k-space entries")
    return m


def inr_consistency(x_inr: ad.Tensor, y: np.ndarray, sens: SensitivitySet, mask) -> ad.Tensor:
    """Mean absolute k-space residual of the INR image over masked entries."""
    m = _check_mask(mask)
    pred = select_entries(apply_A(x_inr, sens, m), m)
    target = ad.Tensor(_planes(y)[..., m])
    return ad.mean(ad.abs_(ad.sub(pred, target)))


def latent_reg(z, sigma: float) -> ad.Tensor:
    if sigma <= 0:
        raise ValueError(f"prior scale must be positive, got {sigma}")
    z = getattr(z, "tensor", z)
    return ad.scale(ad.sum_(ad.mul(z, z)), 1.0 / sigma**2)


def normalized_l1(kspace: ad.Tensor, y: np.ndarray, mask) -> ad.Tensor:
    """``|k - y|_1 / |y|_1`` over masked entries of a (n_c, 2, H, W) tensor."""
    m = _check_mask(mask)
    target = _planes(y)[..., m]
    norm = np.abs(target).sum()
    if norm == 0:
        raise ValueError("normaliser |y|_1 vanishes on the loss mask")
    resid = ad.sub(select_entries(kspace, m), ad.Tensor(target))
    return ad.scale(ad.sum_(ad.abs_(resid)), 1.0 / norm)


def fine_loss(x_net: ad.Tensor, y: np.ndarray, sens: SensitivitySet, mask) -> ad.Tensor:
    """Fidelity loss ``|y - A x|_1 / |y|_1`` on the masked entries."""
    m = _check_mask(mask)
    return normalized_l1(apply_A(x_net, sens, m), y, m)


@dataclass(frozen=True)
class KSplit:
    train: np.ndarray  # (H, W) bool, entries fed to the model
    loss: np.ndarray  # (H, W) bool, held-out entries the loss reads
    ratio: float
    seed: int


def make_ssdu_split(
    mask: np.ndarray,
    acs_frac: float,
    ratio: float = 0.4,
    seed: int = 0,
    std_scale: float = 4.0,
) -> KSplit:
    """Column-wise split of sampled k-space into model-input and loss sets.

    ``round(ratio * n_sampled)`` non-ACS columns go to the loss set, drawn
    without replacement with a Gaussian preference for the k-space centre.
    ACS columns always stay in the input set.
    """
    mask = np.asarray(mask, dtype=bool)
    width = mask.shape[1]
    sampled = np.flatnonzero(mask.any(axis=0))
    acs = np.intersect1d(acs_columns(width, acs_frac), sampled)
    pool = np.setdiff1d(sampled, acs)
    n_loss = min(int(math.floor(ratio * len(sampled) + 0.5)), len(pool))
    if n_loss == 0:
        raise ValueError("SSDU split leaves the loss set empty")
    centre = width / 2
    weights = np.exp(-((pool - centre) ** 2) / (2 * ((width - 1) / std_scale) ** 2))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(pool, size=n_loss, replace=False, p=weights / weights.sum())
    loss_cols = np.zeros(width, dtype=bool)
    loss_cols[chosen] = True
    loss = mask & loss_cols[None, :]
    return KSplit(mask & ~loss, loss, ratio, seed)


def ssdu_loss(model_eval: ModelEval, y: np.ndarray, sens: SensitivitySet, split: KSplit) -> ad.Tensor:
    """Reconstruct from the input set, score the re-measured loss set."""
    if not split.loss.any():
        raise ValueError("SSDU loss set is empty")
    x = model_eval(np.where(split.train[None], y, 0), split.train)
    return normalized_l1(apply_A(x, sens, split.loss), y, split.loss)


def n2n_degrade(
    y: np.ndarray,
    mask: np.ndarray,
    acs_frac: float,
    seed: int,
    noise_sd: float = 0.01,
    extra_accel: float = 2.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Further undersample (keeping ACS) and add noise; returns (degraded y, its mask)."""
    if noise_sd < 0:
        raise ValueError(f"noise_sd must be non-negative, got {noise_sd}")
    mask = np.asarray(mask, dtype=bool)
    width = mask.shape[1]
    sampled = np.flatnonzero(mask.any(axis=0))
    acs = np.intersect1d(acs_columns(width, acs_frac), sampled)
    pool = np.setdiff1d(sampled, acs)
    rng = np.random.default_rng(seed)
    keep = rng.choice(pool, size=int(round(len(pool) / extra_accel)), replace=False)
    cols = np.zeros(width, dtype=bool)
    cols[acs] = True
    cols[keep] = True
    mask2 = mask & cols[None, :]
    noisy = y.copy()
    if noise_sd > 0:
        eps = rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
        noisy = noisy + (noise_sd / math.sqrt(2)) * eps
    return np.where(mask2[None], noisy, 0), mask2


def n2n_loss(
    model_eval: ModelEval,
    y: np.ndarray,
    sens: SensitivitySet,
    mask: np.ndarray,
    acs_frac: float,
    seed: int,
    noise_sd: float = 0.01,
    extra_accel: float = 2.0,
) -> ad.Tensor:
    """Reconstruct from doubly degraded data, score against all originally sampled entries."""
    y2, mask2 = n2n_degrade(y, mask, acs_frac, seed, noise_sd, extra_accel)
    x = model_eval(y2, mask2)
    return normalized_l1(apply_A(x, sens, mask), y, mask)
