"""Learnable anisotropic diffusion on feature maps.

Five 3x3 difference convolutions estimate the feature gradient.  Each one is a
linear function of its weights, so all five fold into one vanilla kernel and
the gradient costs a single convolution.  The gradient then drives one explicit
diffusion step::

    u <- u + dt * restore(laplacian(g(|grad u|) * grad u)),   g(s) = 1 / (1 + s^2 / k^2)

Difference-convolution conventions (weight ``w`` at 3x3 offset ``(r, c)``):

* VC   plain correlation.
* CDC  ``sum_p w_p (x_p - x_centre)``.
* HDC  ``w (x[r, c] - x[r, c'])`` with ``c' = c - 1`` for ``c > 0`` and the
  left boundary column paired with the centre column.
* VDC  the same along rows.
* ADC  ``w (x_p - x_next)`` where ``next`` is the clockwise neighbour of ``p``
  on the 3x3 ring; the centre weight acts as a plain tap.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .io import load_tensor, save_tensor

__all__ = [
    "KINDS",
    "RING",
    "LAPLACIAN",
    "DiffConvBank",
    "transform_matrix",
    "transform_kernel",
    "merge_kernels",
    "merged_gradient",
    "diffusion_coefficient",
    "ad_update",
]

KINDS = ("VC", "CDC", "ADC", "HDC", "VDC")

# clockwise walk around the border of a 3x3 window
RING = ((0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (2, 1), (2, 0), (1, 0))

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def _partner(i: int) -> int:
    return i - 1 if i > 0 else 1


def transform_matrix(kind: str) -> np.ndarray:
    """9x9 matrix ``T`` with ``vanilla.ravel() = T @ difference.ravel()``."""
    T = np.zeros((9, 9))
    if kind == "VC":
        return np.eye(9)
    if kind == "CDC":
        T = np.eye(9)
        T[4, :] -= 1.0
        return T
    if kind == "HDC":
        for r in range(3):
            for c in range(3):
                T[3 * r + c, 3 * r + c] += 1.0
                T[3 * r + _partner(c), 3 * r + c] -= 1.0
        return T
    if kind == "VDC":
        for r in range(3):
            for c in range(3):
                T[3 * r + c, 3 * r + c] += 1.0
                T[3 * _partner(r) + c, 3 * r + c] -= 1.0
        return T
    if kind == "ADC":
        T[4, 4] = 1.0
        for i, (r, c) in enumerate(RING):
            nr, nc = RING[(i + 1) % len(RING)]
            T[3 * r + c, 3 * r + c] += 1.0
            T[3 * nr + nc, 3 * r + c] -= 1.0
        return T
    raise ValueError(f"unknown difference-convolution kind {kind!r}; expected one of {KINDS}")


_MATRICES = {kind: transform_matrix(kind) for kind in KINDS}


def transform_kernel(kind: str, K: np.ndarray) -> np.ndarray:
    """Vanilla kernel equivalent to difference convolution ``kind`` with weights ``K``."""
    K = np.asarray(K, dtype=np.float64)
    if K.shape[-2:] != (3, 3):
        raise ValueError(f"difference kernels must be 3x3, got {K.shape}")
    T = transform_matrix(kind)
    return (K.reshape(-1, 9) @ T.T).reshape(K.shape)


def _transform_taped(kind: str, K: ad.Tensor) -> ad.Tensor:
    if kind == "VC":
        return K
    flat = ad.reshape(K, (-1, 9))
    return ad.reshape(ad.matmul(flat, ad.Tensor(_MATRICES[kind].T)), K.shape)


@dataclass
class DiffConvBank:
    """Five difference kernels (C/4 x C x 3 x 3), log edge threshold and 1x1 restore."""

    kernels: dict[str, ad.Tensor]
    log_k: ad.Tensor
    restore: ad.Tensor  # (C, C/4)
    dt: float = 1.0

    @classmethod
    def create(cls, channels: int, seed: int = 0, k: float = 0.1, init_scale: float = 0.1) -> "DiffConvBank":
        """Random difference kernels with a zero restore, so the module starts as the identity."""
        if channels % 4:
            raise ValueError(f"channel count must be divisible by 4, got {channels}")
        if k <= 0:
            raise ValueError(f"edge threshold k must be positive, got {k}")
        rng = np.random.default_rng(seed)
        c4 = channels // 4
        std = init_scale / np.sqrt(9 * channels)
        kernels = {
            kind: ad.Tensor(rng.normal(0.0, std, (c4, channels, 3, 3)), True, f"ad.{kind}") for kind in KINDS
        }
        return cls(
            kernels,
            ad.Tensor(np.array(np.log(k)), True, "ad.log_k"),
            ad.Tensor(np.zeros((channels, c4)), True, "ad.restore"),
        )

    @property
    def channels(self) -> int:
        return self.restore.shape[0]

    @property
    def k(self) -> float:
        return float(np.exp(self.log_k.data))

    def parameters(self) -> list[ad.Tensor]:
        return [self.kernels[kind] for kind in KINDS] + [self.log_k, self.restore]

    def merged_kernel(self) -> ad.Tensor:
        """Taped ``K_cvt``: the sum of the five transformed kernels."""
        total = None
        for kind in KINDS:
            term = _transform_taped(kind, self.kernels[kind])
            total = term if total is None else ad.add(total, term)
        return total

    def copy(self) -> "DiffConvBank":
        return DiffConvBank(
            {kind: ad.Tensor(t.data.copy(), t.requires_grad, t.name) for kind, t in self.kernels.items()},
            ad.Tensor(self.log_k.data.copy(), self.log_k.requires_grad, self.log_k.name),
            ad.Tensor(self.restore.data.copy(), self.restore.requires_grad, self.restore.name),
            self.dt,
        )

    def save(self, directory) -> None:
        directory = Path(directory)
        for kind, t in self.kernels.items():
            save_tensor(directory / f"ad_{kind}.d2t", t.data)
        save_tensor(directory / "ad_log_k.d2t", self.log_k.data.reshape(1))
        save_tensor(directory / "ad_restore.d2t", self.restore.data)

    @classmethod
    def load(cls, directory) -> "DiffConvBank":
        directory = Path(directory)
        kernels = {kind: ad.Tensor(load_tensor(directory / f"ad_{kind}.d2t"), True, f"ad.{kind}") for kind in KINDS}
        log_k = ad.Tensor(load_tensor(directory / "ad_log_k.d2t").reshape(()), True, "ad.log_k")
        restore = ad.Tensor(load_tensor(directory / "ad_restore.d2t"), True, "ad.restore")
        return cls(kernels, log_k, restore)


def merge_kernels(kernels: dict[str, np.ndarray]) -> np.ndarray:
    return sum(transform_kernel(kind, kernels[kind]) for kind in KINDS)


def merged_gradient(features: ad.Tensor, bank: DiffConvBank) -> ad.Tensor:
    """Feature gradient with C/4 channels from one convolution with ``K_cvt``."""
    if features.shape[1] != bank.channels:
        raise ValueError(f"features have {features.shape[1]} channels, bank expects {bank.channels}")
    return ad.conv2d(features, bank.merged_kernel())


def diffusion_coefficient(grad_mag, k):
    """Edge-stopping coefficient ``1 / (1 + |grad|^2 / k^2)``, in (0, 1]."""
    if isinstance(grad_mag, ad.Tensor) or isinstance(k, ad.Tensor):
        if not isinstance(k, ad.Tensor) and k <= 0:
            raise ValueError(f"edge threshold k must be positive, got {k}")
        sq = ad.mul(grad_mag, grad_mag)
        kk = ad.mul(k, k) if isinstance(k, ad.Tensor) else float(k) ** 2
        return ad.div(1.0, ad.add(ad.div(sq, kk), 1.0))
    if k <= 0:
        raise ValueError(f"edge threshold k must be positive, got {k}")
    s = np.asarray(grad_mag, dtype=np.float64)
    return 1.0 / (1.0 + (s / k) ** 2)


def ad_update(u: ad.Tensor, bank: DiffConvBank, steps: int = 1) -> ad.Tensor:
    """``steps`` explicit diffusion updates of (N, C, H, W) features."""
    c4 = bank.channels // 4
    lap = np.zeros((c4, c4, 3, 3))
    lap[np.arange(c4), np.arange(c4)] = LAPLACIAN
    lap = ad.Tensor(lap)
    k = ad.exp(bank.log_k)
    for _ in range(steps):
        grad = merged_gradient(u, bank)
        # squared magnitude across gradient channels feeds g directly
        sq = ad.sum_(ad.mul(grad, grad), axis=1, keepdims=True)
        g = ad.div(1.0, ad.add(ad.div(sq, ad.mul(k, k)), 1.0))
        flux = ad.mul(ad.broadcast_to(g, grad.shape), grad)
        div = ad.conv2d(flux, lap)
        u = ad.add(u, ad.scale(ad.conv2d_1x1(div, bank.restore), bank.dt))
    return u
