"""Small convolutional reconstructor with an affine hook on its penultimate features."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .inr import AffineMaps
from .io import load_manifest, load_tensor, save_manifest, save_tensor
from .mri import ComplexImage, SensitivitySet, Slice, ifft2c
from .optim import AdamState, adam_step

__all__ = [
    "ReconConfig",
    "ReconNet",
    "STAGES",
    "adjoint_input",
    "recon_forward",
    "apply_freeze_policy",
    "pretrain_source",
]

STAGES = ("stage1", "stage2")


@dataclass(frozen=True)
class ReconConfig:
    depth: int = 4
    channels: int = 16
    kernel: int = 3
    slope: float = 0.2


class ReconNet:
    """``depth`` 3x3 conv layers mapping a 2-channel image to a 2-channel image.

    Every layer but the last is followed by a leaky ReLU; the activations
    entering the last layer are the penultimate features that the affine hook
    and the diffusion module act on.
    """

    def __init__(self, cfg: ReconConfig = ReconConfig(), seed: int = 0):
        if cfg.depth < 2:
            raise ValueError(f"need at least 2 layers, got depth {cfg.depth}")
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        widths = [2] + [cfg.channels] * (cfg.depth - 1) + [2]
        k = cfg.kernel
        self.weights: list[ad.Tensor] = []
        self.biases: list[ad.Tensor] = []
        for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
            fan_in = cin * k * k
            gain = np.sqrt(2.0 / (1 + cfg.slope**2)) if i < cfg.depth - 1 else 1.0
            bound = gain * np.sqrt(3.0 / fan_in)
            self.weights.append(ad.Tensor(rng.uniform(-bound, bound, (cout, cin, k, k)), True, f"conv{i}.weight"))
            self.biases.append(ad.Tensor(np.zeros(cout), True, f"conv{i}.bias"))

    @property
    def channels(self) -> int:
        return self.cfg.channels

    def parameters(self) -> list[ad.Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def final_parameters(self) -> list[ad.Tensor]:
        return [self.weights[-1], self.biases[-1]]

    def trainable_flags(self) -> dict[str, bool]:
        return {p.name: p.requires_grad for p in self.parameters()}

    def features(self, x: ad.Tensor) -> ad.Tensor:
        h = x
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = ad.leaky_relu(ad.conv2d(h, W, b), self.cfg.slope)
        return h

    def head(self, features: ad.Tensor) -> ad.Tensor:
        return ad.conv2d(features, self.weights[-1], self.biases[-1])

    def copy(self) -> "ReconNet":
        return copy.deepcopy(self)

    def save(self, directory) -> None:
        directory = Path(directory)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            save_tensor(directory / f"conv{i}_weight.d2t", W.data)
            save_tensor(directory / f"conv{i}_bias.d2t", b.data)
        save_manifest(
            directory / "recon_manifest.json",
            {
                "config": asdict(self.cfg),
                "seed": self.seed,
                "layers": [list(W.shape) for W in self.weights],
                "trainable": self.trainable_flags(),
            },
        )

    @classmethod
    def load(cls, directory) -> "ReconNet":
        directory = Path(directory)
        meta = load_manifest(directory / "recon_manifest.json")
        net = cls(ReconConfig(**meta["config"]), meta["seed"])
        for i, (W, b) in enumerate(zip(net.weights, net.biases)):
            W.data = load_tensor(directory / f"conv{i}_weight.d2t")
            b.data = load_tensor(directory / f"conv{i}_bias.d2t")
            W.requires_grad = meta["trainable"][W.name]
            b.requires_grad = meta["trainable"][b.name]
        return net


def adjoint_input(kspace: np.ndarray, sens: SensitivitySet, mask: np.ndarray) -> ad.Tensor:
    """Coil-combined zero-filled image ``A^H y`` as a constant (1, 2, H, W) tensor."""
    m = np.asarray(mask, dtype=bool)
    z = np.sum(np.conj(sens.maps) * ifft2c(np.where(m, kspace, 0)), axis=0)
    return ad.Tensor(np.stack([z.real, z.imag])[None])


def recon_forward(
    x_in,
    net: ReconNet,
    maps: AffineMaps | None = None,
    refine: Callable[[ad.Tensor], ad.Tensor] | None = None,
) -> ad.Tensor:
    """Run ``net`` on a (1, 2, H, W) input, optionally refining and modulating features.

    The order before the final layer is: ``refine`` (the diffusion module, if
    any), then ``alpha * features + beta``.
    """
    if isinstance(x_in, ComplexImage):
        x_in = ad.Tensor(x_in.planes[None])
    elif not isinstance(x_in, ad.Tensor):
        x_in = ad.Tensor(x_in)
    if x_in.data.ndim == 3:
        x_in = ad.reshape(x_in, (1, *x_in.shape))
    if x_in.shape[1] != 2:
        raise ValueError(f"reconstructor expects 2 input channels, got {x_in.shape}")
    f = net.features(x_in)
    if refine is not None:
        f = refine(f)
    if maps is not None:
        want = f.shape[1:]
        if maps.alpha.shape != want or maps.beta.shape != want:
            raise ValueError(f"affine maps {maps.alpha.shape}/{maps.beta.shape} do not match features {want}")
        f = ad.add(ad.mul(f, ad.reshape(maps.alpha, f.shape)), ad.reshape(maps.beta, f.shape))
    return net.head(f)


def apply_freeze_policy(net: ReconNet, stage: str) -> dict[str, bool]:
    """Stage 1 trains every layer; stage 2 trains only the final layer."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    final = {id(p) for p in net.final_parameters()}
    for p in net.parameters():
        p.requires_grad = stage == "stage1" or id(p) in final
    return net.trainable_flags()


def pretrain_source(
    net: ReconNet,
    dataset: Sequence[Slice],
    epochs: int,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 2,
) -> list[float]:
    """Supervised L1 training on (zero-filled, ground truth) pairs; returns epoch-mean losses."""
    if not dataset:
        raise ValueError("source dataset is empty")
    rng = np.random.default_rng(seed)
    inputs = [adjoint_input(s.kspace.data, s.sens, s.kspace.mask.mask) for s in dataset]
    targets = [ad.Tensor(s.image.planes[None]) for s in dataset]
    params = net.parameters()
    state = AdamState(lr=lr)
    trace = []
    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            with ad.Tape():
                loss = None
                for j in batch:
                    term = ad.mean(ad.abs_(ad.sub(recon_forward(inputs[j], net), targets[j])))
                    loss = term if loss is None else ad.add(loss, term)
                loss = ad.scale(loss, 1.0 / len(batch))
                ad.backward(loss, params)
            adam_step(params, state)
            losses.append(loss.item())
        trace.append(float(np.mean(losses)))
    return trace
