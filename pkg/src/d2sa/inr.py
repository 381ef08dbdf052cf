"""MR-INR branch: Fourier coordinate features, per-slice latents and a SIREN.

The SIREN emits ``2 + 2C`` channels per pixel: the real and imaginary parts
of the INR image, then ``C`` scale maps and ``C`` shift maps that modulate the
reconstructor's penultimate features.  Scale maps are emitted as offsets from
one, so a freshly initialised branch starts close to the identity modulation.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .io import load_manifest, load_tensor, save_manifest, save_tensor
from .mri import pixel_grid

__all__ = [
    "InrConfig",
    "LatentCode",
    "SirenParams",
    "AffineMaps",
    "MRINR",
    "fourier_matrix",
    "coordinate_grid",
    "fourier_features",
    "embed",
    "init_siren",
    "sample_latents",
    "siren_forward",
]


@dataclass(frozen=True)
class InrConfig:
    latent_dim: int = 128
    sigma: float = 0.01
    n_features: int = 64
    fourier_scale: float = 10.0
    hidden: int = 256
    n_hidden_layers: int = 4
    omega0: float = 30.0
    channels: int = 16

    @property
    def in_dim(self) -> int:
        return self.latent_dim + 2 * self.n_features

    @property
    def out_dim(self) -> int:
        return 2 + 2 * self.channels


class LatentCode:
    """Per-slice latent vector; ``frozen`` toggles whether it is optimised."""

    def __init__(self, value: np.ndarray, sigma: float = 0.01):
        self.tensor = ad.Tensor(np.array(value, dtype=np.float64), requires_grad=True, name="latent")
        self.sigma = sigma

    @property
    def frozen(self) -> bool:
        return not self.tensor.requires_grad

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self.tensor.requires_grad = not value

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data


@dataclass
class SirenParams:
    weights: list[ad.Tensor]
    biases: list[ad.Tensor]
    omega0: float

    def tensors(self) -> list[ad.Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]


@dataclass
class AffineMaps:
    alpha: ad.Tensor  # (C, H, W)
    beta: ad.Tensor  # (C, H, W)


def fourier_matrix(n_features: int, scale: float, seed: int) -> np.ndarray:
    """Gaussian projection matrix with entries ~ N(0, scale^2), shape (m, 2)."""
    return np.random.default_rng(seed).normal(0.0, scale, size=(n_features, 2))


def coordinate_grid(height: int, width: int) -> np.ndarray:
    rows, cols = pixel_grid(height, width)
    return np.stack([rows, cols], axis=-1)


def fourier_features(coords: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``[cos(2 pi B phi), sin(2 pi B phi)]`` per pixel, shape (H*W, 2m)."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[-1] != 2:
        raise ValueError(f"coordinates must end in a length-2 axis, got {coords.shape}")
    if np.any(np.abs(coords) > 1.0):
        raise ValueError("coordinates must lie in [-1, 1]^2")
    proj = 2 * np.pi * coords.reshape(-1, 2) @ B.T
    return np.concatenate([np.cos(proj), np.sin(proj)], axis=1)


def embed(coords: np.ndarray, z, B: np.ndarray) -> ad.Tensor:
    """Per-pixel input ``[z, cos(2 pi B phi), sin(2 pi B phi)]``, shape (H*W, dim(z) + 2m).

    ``z`` is a :class:`LatentCode` or a 1D tensor; it is repeated across every
    pixel of the slice.
    """
    feats = fourier_features(coords, B)
    zt = z.tensor if isinstance(z, LatentCode) else z
    zt = zt if isinstance(zt, ad.Tensor) else ad.Tensor(zt)
    if zt.data.ndim != 1:
        raise ValueError(f"latent must be 1D, got shape {zt.shape}")
    n_pix = feats.shape[0]
    zb = ad.broadcast_to(ad.reshape(zt, (1, zt.size)), (n_pix, zt.size))
    return ad.concat([zb, ad.Tensor(feats)], axis=1)


def init_siren(seed: int, cfg: InrConfig = InrConfig()) -> SirenParams:
    """SIREN initialisation: first layer U(+-1/fan_in), later U(+-sqrt(6/fan_in)/omega0)."""
    rng = np.random.default_rng(seed)
    dims = [cfg.in_dim] + [cfg.hidden] * cfg.n_hidden_layers + [cfg.out_dim]
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / fan_in if i == 0 else np.sqrt(6.0 / fan_in) / cfg.omega0
        weights.append(ad.Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), True, f"siren.W{i}"))
        b_bound = 1.0 / np.sqrt(fan_in)
        biases.append(ad.Tensor(rng.uniform(-b_bound, b_bound, fan_out), True, f"siren.b{i}"))
    return SirenParams(weights, biases, cfg.omega0)


def sample_latents(n_slices: int, seed: int, dim: int = 128, sigma: float = 0.01) -> list[LatentCode]:
    rng = np.random.default_rng(seed)
    return [LatentCode(rng.normal(0.0, sigma, dim), sigma) for _ in range(n_slices)]


def _dense(h: ad.Tensor, W: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    out = ad.matmul(h, W)
    return ad.add(out, ad.broadcast_to(ad.reshape(b, (1, b.size)), out.shape))


def siren_forward(gamma: ad.Tensor, params: SirenParams, height: int, width: int, return_hidden: bool = False):
    """Run the SIREN over every pixel and split its heads.

    Returns ``(x_hat, maps)`` with ``x_hat`` of shape (2, H, W) and
    :class:`AffineMaps` of shape (C, H, W) each; with ``return_hidden`` the
    list of hidden activations is appended.
    """
    n_pix = height * width
    if gamma.shape[0] != n_pix or gamma.shape[1] != params.weights[0].shape[0]:
        raise ValueError(
            f"embedding {gamma.shape} does not match grid {height}x{width} "
            f"and input width {params.weights[0].shape[0]}"
        )
    h = gamma
    hidden = []
    for W, b in zip(params.weights[:-1], params.biases[:-1]):
        h = ad.sine(ad.scale(_dense(h, W, b), params.omega0))
        hidden.append(h)
    out = _dense(h, params.weights[-1], params.biases[-1])
    n_out = out.shape[1]
    if (n_out - 2) % 2:
        raise ValueError(f"output width {n_out} is not 2 + 2C")
    C = (n_out - 2) // 2
    grid = ad.reshape(ad.transpose(out), (n_out, height, width))
    x_hat = grid[0:2]
    alpha = ad.add(grid[2 : 2 + C], 1.0)
    beta = grid[2 + C :]
    maps = AffineMaps(alpha, beta)
    if return_hidden:
        return x_hat, maps, hidden
    return x_hat, maps


class MRINR:
    """Fourier embedding, SIREN weights and one latent per slice of a patient."""

    def __init__(self, n_slices: int, height: int, width: int, cfg: InrConfig = InrConfig(), seed: int = 0):
        seeds = np.random.SeedSequence(seed).generate_state(3)
        self.cfg = cfg
        self.height, self.width = height, width
        self.seed = seed
        self.B = fourier_matrix(cfg.n_features, cfg.fourier_scale, int(seeds[0]))
        self.params = init_siren(int(seeds[1]), cfg)
        self.latents = sample_latents(n_slices, int(seeds[2]), cfg.latent_dim, cfg.sigma)
        self._features = ad.Tensor(fourier_features(coordinate_grid(height, width), self.B))

    @property
    def channels(self) -> int:
        return self.cfg.channels

    def weights(self) -> list[ad.Tensor]:
        return self.params.tensors()

    def latent_tensors(self) -> list[ad.Tensor]:
        return [z.tensor for z in self.latents]

    def latent_for(self, index: int) -> LatentCode:
        """Latent of slice ``index``; unseen indices reuse the nearest stored one."""
        return self.latents[min(max(index, 0), len(self.latents) - 1)]

    def embedding(self, index: int) -> ad.Tensor:
        z = self.latent_for(index).tensor
        n_pix = self.height * self.width
        zb = ad.broadcast_to(ad.reshape(z, (1, z.size)), (n_pix, z.size))
        return ad.concat([zb, self._features], axis=1)

    def __call__(self, index: int):
        return siren_forward(self.embedding(index), self.params, self.height, self.width)

    def freeze_latents(self, frozen: bool = True) -> None:
        for z in self.latents:
            z.frozen = frozen

    def copy(self) -> "MRINR":
        return copy.deepcopy(self)

    def save(self, directory) -> None:
        directory = Path(directory)
        for i, (W, b) in enumerate(zip(self.params.weights, self.params.biases)):
            save_tensor(directory / f"siren_W{i}.d2t", W.data)
            save_tensor(directory / f"siren_b{i}.d2t", b.data)
        save_tensor(directory / "latents.d2t", np.stack([z.value for z in self.latents]))
        save_tensor(directory / "fourier_B.d2t", self.B)
        save_manifest(
            directory / "inr_manifest.json",
            {
                "config": asdict(self.cfg),
                "seed": self.seed,
                "height": self.height,
                "width": self.width,
                "n_slices": len(self.latents),
                "layers": [list(W.shape) for W in self.params.weights],
            },
        )

    @classmethod
    def load(cls, directory) -> "MRINR":
        directory = Path(directory)
        meta = load_manifest(directory / "inr_manifest.json")
        inr = cls(meta["n_slices"], meta["height"], meta["width"], InrConfig(**meta["config"]), meta["seed"])
        for i, (W, b) in enumerate(zip(inr.params.weights, inr.params.biases)):
            W.data = load_tensor(directory / f"siren_W{i}.d2t")
            b.data = load_tensor(directory / f"siren_b{i}.d2t")
        for z, v in zip(inr.latents, load_tensor(directory / "latents.d2t")):
            z.tensor.data = v.copy()
        inr.B = load_tensor(directory / "fourier_B.d2t")
        inr._features = ad.Tensor(fourier_features(coordinate_grid(inr.height, inr.width), inr.B))
        return inr
