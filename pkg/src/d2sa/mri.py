"""Simulated multi-coil Cartesian acquisition.

Images live in the centred, unitary Fourier convention: ``fft2c`` shifts the
DC sample to the middle of k-space and scales by ``1/sqrt(H*W)``, so the
forward operator and its adjoint are exact transposes and Parseval holds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad

__all__ = [
    "ComplexImage",
    "Contrast",
    "SamplingMask",
    "SensitivitySet",
    "KSpaceSet",
    "AcquisitionConfig",
    "ScenarioConfig",
    "Slice",
    "PHANTOM_FAMILIES",
    "MASK_KINDS",
    "SCENARIOS",
    "fft2c",
    "ifft2c",
    "pixel_grid",
    "make_phantom",
    "make_sensitivities",
    "make_cartesian_mask",
    "forward_A",
    "adjoint_A",
    "zero_filled",
    "make_shift_scenario",
    "simulate_patient",
    "simulate_dataset",
    "apply_A",
    "apply_AH",
    "select_entries",
]

PHANTOM_FAMILIES = ("ellipse-phantom", "ring-phantom", "blob-phantom")
MASK_KINDS = ("random-1D", "uniform-1D")
SCENARIOS = ("anatomy", "dataset", "modality", "acceleration", "sampling")


# ---------------------------------------------------------------- data types


@dataclass(frozen=True)
class ComplexImage:
    """H x W complex image held as a (2, H, W) array of real/imaginary planes."""

    planes: np.ndarray

    def __post_init__(self):
        planes = np.asarray(self.planes, dtype=np.float64)
        if planes.ndim != 3 or planes.shape[0] != 2:
            raise ValueError(f"expected (2, H, W) planes, got {planes.shape}")
        if not np.all(np.isfinite(planes)):
            raise ValueError("complex image contains non-finite values")
        object.__setattr__(self, "planes", planes)

    @classmethod
    def from_complex(cls, z: np.ndarray) -> "ComplexImage":
        z = np.asarray(z)
        return cls(np.stack([z.real, z.imag]))

    @property
    def real(self) -> np.ndarray:
        return self.planes[0]

    @property
    def imag(self) -> np.ndarray:
        return self.planes[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.planes.shape[1:]

    def to_complex(self) -> np.ndarray:
        return self.planes[0] + 1j * self.planes[1]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.planes[0], self.planes[1])


@dataclass(frozen=True)
class Contrast:
    """Monotone intensity remap applied to a [0, 1] magnitude image."""

    kind: str = "identity"
    gamma: float = 1.0

    def __call__(self, t: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return t
        if self.kind == "invert":
            return 1.0 - t
        if self.kind == "gamma":
            if self.gamma <= 0:
                raise ValueError(f"gamma must be positive, got {self.gamma}")
            return np.power(t, self.gamma)
        raise ValueError(f"unknown contrast kind {self.kind!r}")


@dataclass(frozen=True)
class SamplingMask:
    mask: np.ndarray
    accel: float
    acs_frac: float
    kind: str
    seed: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def columns(self) -> np.ndarray:
        return np.flatnonzero(self.mask[0])

    @property
    def acs_columns(self) -> np.ndarray:
        return acs_columns(self.mask.shape[1], self.acs_frac)


@dataclass(frozen=True)
class SensitivitySet:
    maps: np.ndarray  # complex, (n_c, H, W)

    @property
    def n_coils(self) -> int:
        return self.maps.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.maps.shape[1:]


@dataclass(frozen=True)
class KSpaceSet:
    data: np.ndarray  # complex, (n_c, H, W); zero off-mask
    mask: SamplingMask
    noise_sd: float = 0.0

    @property
    def n_coils(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1:]


# ---------------------------------------------------------------- Fourier


def fft2c(x: np.ndarray) -> np.ndarray:
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x, axes=axes), norm="ortho"), axes=axes)


def ifft2c(k: np.ndarray) -> np.ndarray:
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k, axes=axes), norm="ortho"), axes=axes)


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre coordinates normalised to (-1, 1); returns (rows, cols)."""
    ys = (2 * np.arange(height) + 1) / height - 1
    xs = (2 * np.arange(width) + 1) / width - 1
    return np.meshgrid(ys, xs, indexing="ij")


# ---------------------------------------------------------------- phantoms

# Modified Shepp-Logan: intensity, semi-axis a (x), semi-axis b (y), x0, y0, angle (deg)
_SHEPP_LOGAN = np.array(
    [
        [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
        [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
        [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
        [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
        [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
        [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
        [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
        [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
        [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
        [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
    ]
)


def _inside_ellipse(x, y, a, b, x0, y0, angle):
    c, s = math.cos(angle), math.sin(angle)
    xr = (x - x0) * c + (y - y0) * s
    yr = -(x - x0) * s + (y - y0) * c
    return (xr / a) ** 2 + (yr / b) ** 2 <= 1.0


def _ellipse_magnitude(x, y, rng, slice_pos):
    params = _SHEPP_LOGAN.copy()
    params[:, 1:3] *= rng.uniform(0.9, 1.1, size=(len(params), 2))
    params[2:, 3:5] += rng.uniform(-0.03, 0.03, size=(len(params) - 2, 2))
    params[2:, 0] *= rng.uniform(0.7, 1.3, size=len(params) - 2)
    params[2:, 5] += rng.uniform(-10, 10, size=len(params) - 2)
    # slices further from the centre of the volume are smaller
    params[:, 1:3] *= math.sqrt(max(1.0 - 0.4 * slice_pos**2, 0.2))
    img = np.zeros_like(x)
    for val, a, b, x0, y0, deg in params:
        img += val * _inside_ellipse(x, y, a, b, x0, y0, math.radians(deg))
    return img


def _ring_magnitude(x, y, rng, slice_pos):
    squash = rng.uniform(0.8, 1.0)
    cx, cy = rng.uniform(-0.05, 0.05, size=2)
    r = np.sqrt(((x - cx) / squash) ** 2 + (y - cy) ** 2)
    outer = 0.85 * math.sqrt(max(1.0 - 0.4 * slice_pos**2, 0.2))
    radii = np.sort(rng.uniform(0.15, 1.0, size=4))[::-1] * outer
    img = np.zeros_like(x)
    level = 0.0
    for i, rad in enumerate(radii):
        level = rng.uniform(0.3, 1.0) if i % 2 == 0 else rng.uniform(0.05, 0.3)
        img = np.where(r <= rad, level, img)
    return img


def _blob_magnitude(x, y, rng, slice_pos):
    extent = 0.8 * math.sqrt(max(1.0 - 0.4 * slice_pos**2, 0.2))
    support = (x / extent) ** 2 + (y / (1.1 * extent)) ** 2 <= 1.0
    img = 0.2 * support.astype(float)
    for _ in range(6):
        cx, cy = rng.uniform(-0.5, 0.5, size=2) * extent
        width = rng.uniform(0.08, 0.25)
        img += rng.uniform(0.3, 1.0) * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * width**2))
    return img * support


_FAMILIES = {
    "ellipse-phantom": _ellipse_magnitude,
    "ring-phantom": _ring_magnitude,
    "blob-phantom": _blob_magnitude,
}


def make_phantom(
    family: str,
    height: int,
    width: int,
    contrast: Contrast | None = None,
    seed: int = 0,
    slice_pos: float = 0.0,
) -> ComplexImage:
    """Seeded phantom with magnitude in [0, 1] and a smooth random phase.

    ``slice_pos`` in [-1, 1] places the slice within a notional volume; the
    anatomy shrinks away from the centre so slices of one patient are related
    but distinct.
    """
    if family not in _FAMILIES:
        raise ValueError(f"unknown phantom family {family!r}; expected one of {PHANTOM_FAMILIES}")
    if height < 16 or width < 16:
        raise ValueError(f"phantom needs H, W >= 16, got {height}x{width}")
    rng = np.random.default_rng(seed)
    y, x = pixel_grid(height, width)
    mag = _FAMILIES[family](x, y, rng, slice_pos)
    mag = np.clip(mag, 0.0, None)
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    mag = np.clip((contrast or Contrast())(mag), 0.0, 1.0)
    coeffs = rng.uniform(-0.5, 0.5, size=4)
    phase = coeffs[0] + coeffs[1] * x + coeffs[2] * y + coeffs[3] * x * y
    return ComplexImage.from_complex(mag * np.exp(1j * phase))


# ---------------------------------------------------------------- coils


def make_sensitivities(height: int, width: int, n_coils: int, seed: int = 0) -> SensitivitySet:
    """Gaussian-lobe coil profiles centred on the image border, RSS-normalised."""
    if n_coils < 1:
        raise ValueError(f"need at least one coil, got {n_coils}")
    rng = np.random.default_rng(seed)
    y, x = pixel_grid(height, width)
    maps = np.empty((n_coils, height, width), dtype=np.complex128)
    for k in range(n_coils):
        theta = math.pi / 4 + 2 * math.pi * k / n_coils + rng.uniform(-0.1, 0.1)
        # push the centre out to the border of [-1, 1]^2
        reach = 1.0 / max(abs(math.cos(theta)), abs(math.sin(theta)))
        cx, cy = reach * math.cos(theta), reach * math.sin(theta)
        w = 0.9 * rng.uniform(0.9, 1.1)
        lobe = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * w**2))
        phase = theta + 0.4 * (math.cos(theta) * x + math.sin(theta) * y)
        maps[k] = lobe * np.exp(1j * phase)
    rss = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return SensitivitySet(maps / rss)


# ---------------------------------------------------------------- masks


def acs_columns(width: int, acs_frac: float) -> np.ndarray:
    n_acs = math.ceil(acs_frac * width - 1e-9)
    start = width // 2 - n_acs // 2
    return np.arange(start, start + n_acs)


def make_cartesian_mask(
    height: int, width: int, accel: float, acs_frac: float, kind: str, seed: int = 0
) -> SamplingMask:
    """Column-wise Cartesian mask with ``round(W/accel)`` sampled columns.

    The central ACS block is always included; the rest are drawn uniformly at
    random (``random-1D``) or spread equispaced with a seeded offset
    (``uniform-1D``) over the non-ACS columns.
    """
    if accel < 1:
        raise ValueError(f"acceleration must be >= 1, got {accel}")
    if not 0 <= acs_frac < 1:
        raise ValueError(f"ACS fraction must be in [0, 1), got {acs_frac}")
    if kind not in MASK_KINDS:
        raise ValueError(f"unknown mask kind {kind!r}; expected one of {MASK_KINDS}")
    n_total = int(math.floor(width / accel + 0.5))
    acs = acs_columns(width, acs_frac)
    if n_total < len(acs):
        raise ValueError(f"ACS block of {len(acs)} columns exceeds budget of {n_total} columns")
    candidates = np.setdiff1d(np.arange(width), acs)
    n_rest = n_total - len(acs)
    rng = np.random.default_rng(seed)
    if kind == "random-1D":
        chosen = rng.choice(candidates, size=n_rest, replace=False)
    elif n_rest > 0:
        step = len(candidates) / n_rest
        offset = rng.uniform(0, step)
        chosen = candidates[np.floor(offset + step * np.arange(n_rest)).astype(int)]
    else:
        chosen = np.array([], dtype=int)
    cols = np.zeros(width, dtype=bool)
    cols[acs] = True
    cols[chosen] = True
    mask = np.broadcast_to(cols, (height, width)).copy()
    return SamplingMask(mask, accel, acs_frac, kind, seed)


# ---------------------------------------------------------------- operator


def _check_shapes(image_shape, sens: SensitivitySet, mask_shape=None):
    if tuple(image_shape) != sens.shape or (mask_shape is not None and tuple(mask_shape) != sens.shape):
        raise ValueError(
            f"shape mismatch: image {tuple(image_shape)}, sensitivities {sens.shape}, mask {mask_shape}"
        )


def forward_A(
    x: ComplexImage,
    sens: SensitivitySet,
    mask: SamplingMask,
    noise_sd: float = 0.0,
    seed: int | None = None,
) -> KSpaceSet:
    """``y_i = M F(S_i x) + M eps`` with complex Gaussian ``eps``, ``E|eps|^2 = noise_sd^2``."""
    _check_shapes(x.shape, sens, mask.shape)
    m = mask.mask.astype(bool)
    y = fft2c(sens.maps * x.to_complex()[None])
    if noise_sd > 0:
        rng = np.random.default_rng(seed)
        eps = rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
        y = y + (noise_sd / math.sqrt(2)) * eps
    return KSpaceSet(np.where(m[None], y, 0), mask, noise_sd)


def adjoint_A(y: KSpaceSet, sens: SensitivitySet) -> ComplexImage:
    _check_shapes(y.shape, sens)
    if y.n_coils != sens.n_coils:
        raise ValueError(f"coil count mismatch: k-space {y.n_coils}, sensitivities {sens.n_coils}")
    m = y.mask.mask.astype(bool)
    coil_images = ifft2c(np.where(m[None], y.data, 0))
    return ComplexImage.from_complex(np.sum(np.conj(sens.maps) * coil_images, axis=0))


def zero_filled(y: KSpaceSet) -> tuple[np.ndarray, np.ndarray]:
    """Per-coil inverse FFTs (complex, n_c x H x W) and their root-sum-of-squares."""
    coil_images = ifft2c(y.data)
    rss = np.sqrt(np.sum(np.abs(coil_images) ** 2, axis=0))
    return coil_images, rss


# ---------------------------------------------------------------- differentiable operator


def _to_complex(planes: np.ndarray) -> np.ndarray:
    return planes[..., 0, :, :] + 1j * planes[..., 1, :, :]


def _to_planes(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-3)


def apply_A(x: ad.Tensor, sens: SensitivitySet, mask: np.ndarray) -> ad.Tensor:
    """Taped ``M F S x`` for a (2, H, W) or (1, 2, H, W) image; returns (n_c, 2, H, W)."""
    m = np.asarray(mask, dtype=bool)
    shape = x.shape
    if shape[-3:] != (2, *sens.shape) or m.shape != sens.shape:
        raise ValueError(f"shape mismatch: image {shape}, sensitivities {sens.shape}, mask {m.shape}")
    if len(shape) == 4 and shape[0] != 1:
        raise ValueError(f"apply_A takes one image at a time, got batch {shape[0]}")

    def forward(a):
        return _to_planes(np.where(m, fft2c(sens.maps * _to_complex(a.reshape(2, *sens.shape))), 0))

    def adjoint(g):
        z = np.sum(np.conj(sens.maps) * ifft2c(np.where(m, _to_complex(g), 0)), axis=0)
        return _to_planes(z).reshape(shape)

    return ad.linear(x, forward, adjoint)


def apply_AH(y: ad.Tensor, sens: SensitivitySet, mask: np.ndarray) -> ad.Tensor:
    """Taped adjoint of :func:`apply_A`; (n_c, 2, H, W) -> (2, H, W)."""
    m = np.asarray(mask, dtype=bool)

    def forward(g):
        return _to_planes(np.sum(np.conj(sens.maps) * ifft2c(np.where(m, _to_complex(g), 0)), axis=0))

    def adjoint(a):
        return _to_planes(np.where(m, fft2c(sens.maps * _to_complex(a)), 0))

    return ad.linear(y, forward, adjoint)


def select_entries(k: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
    """Gather the (n_c, 2, n_selected) entries of a (n_c, 2, H, W) k-space tensor.

    Only entries under ``mask`` are ever read, so values elsewhere cannot leak
    into a loss.
    """
    m = np.asarray(mask, dtype=bool)
    shape = k.shape

    def forward(a):
        return a[..., m]

    def adjoint(g):
        full = np.zeros(shape)
        full[..., m] = g
        return full

    return ad.linear(k, forward, adjoint)


# ---------------------------------------------------------------- scenarios


@dataclass(frozen=True)
class AcquisitionConfig:
    family: str = "ellipse-phantom"
    contrast: Contrast = field(default_factory=Contrast)
    noise_sd: float = 0.01
    accel: float = 4.0
    acs_frac: float = 0.08
    mask_kind: str = "random-1D"
    mask_seed: int = 0
    coil_seed: int = 0
    height: int = 64
    width: int = 64
    n_coils: int = 4

    def mask(self) -> SamplingMask:
        return make_cartesian_mask(
            self.height, self.width, self.accel, self.acs_frac, self.mask_kind, self.mask_seed
        )

    def sensitivities(self) -> SensitivitySet:
        return make_sensitivities(self.height, self.width, self.n_coils, self.coil_seed)


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    source: AcquisitionConfig
    target: AcquisitionConfig


def make_shift_scenario(name: str, seed: int = 0, **base) -> ScenarioConfig:
    """Source/target configs differing only in the factor named by ``name``.

    Extra keyword arguments override fields of the shared base config (for
    instance ``height=32`` for a smaller run).
    """
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; expected one of {SCENARIOS}")
    common = AcquisitionConfig(mask_seed=seed, coil_seed=seed, **base)
    if name == "anatomy":
        src, tgt = replace(common, family="ellipse-phantom"), replace(common, family="ring-phantom")
    elif name == "dataset":
        src, tgt = replace(common, noise_sd=0.005), replace(common, noise_sd=0.03)
    elif name == "modality":
        src, tgt = common, replace(common, contrast=Contrast("gamma", 0.5))
    elif name == "acceleration":
        src, tgt = replace(common, accel=2.0), replace(common, accel=4.0)
    else:
        src, tgt = replace(common, mask_kind="random-1D"), replace(common, mask_kind="uniform-1D")
    return ScenarioConfig(name, src, tgt)


@dataclass(frozen=True)
class Slice:
    image: ComplexImage
    kspace: KSpaceSet
    sens: SensitivitySet
    index: int = 0


def simulate_patient(cfg: AcquisitionConfig, n_slices: int, seed: int) -> list[Slice]:
    """Acquire ``n_slices`` neighbouring slices of one seeded patient."""
    sens = cfg.sensitivities()
    mask = cfg.mask()
    positions = np.linspace(-0.6, 0.6, n_slices) if n_slices > 1 else np.zeros(1)
    slices = []
    for i, pos in enumerate(positions):
        # anatomy is shared across the patient; only the slice position varies
        img = make_phantom(cfg.family, cfg.height, cfg.width, cfg.contrast, seed, float(pos))
        noise_seed = np.random.SeedSequence([seed, i, 1]).generate_state(1)[0]
        y = forward_A(img, sens, mask, cfg.noise_sd, int(noise_seed))
        slices.append(Slice(img, y, sens, i))
    return slices


def simulate_dataset(cfg: AcquisitionConfig, n_patients: int, slices_per_patient: int, seed: int) -> list[Slice]:
    seeds = np.random.SeedSequence(seed).generate_state(n_patients)
    out = []
    for s in seeds:
        out.extend(simulate_patient(cfg, slices_per_patient, int(s)))
    return out
