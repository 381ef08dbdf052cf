"""Two-stage test-time adaptation.

Stage 1 adapts the pretrained reconstructor to a whole patient at once while
the MR-INR branch fits the slices and supplies the affine maps.  Stage 2
refines each slice on its own: latents and all but the last conv layer are
frozen, and the diffusion module is spliced in before the affine hook.
Stage 2 stops early on held-out k-space.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .diffusion import DiffConvBank, ad_update
from .inr import InrConfig, MRINR
from .io import save_tensor
from .losses import (
    LossWeights,
    fine_loss,
    inr_consistency,
    latent_reg,
    make_ssdu_split,
    n2n_loss,
    ssdu_loss,
)
from .metrics import evaluate
from .mri import ScenarioConfig, Slice, acs_columns, fft2c, simulate_dataset, simulate_patient, zero_filled
from .optim import AdamState, adam_step
from .recon import ReconConfig, ReconNet, adjoint_input, apply_freeze_policy, pretrain_source, recon_forward

__all__ = [
    "SSL_KINDS",
    "NumericalAbort",
    "Stage1Config",
    "Stage2Config",
    "ExperimentConfig",
    "Method",
    "Stage1Result",
    "Stage2Result",
    "AdaptationResult",
    "ExperimentReport",
    "stage1_adapt",
    "stage2_refine",
    "validation_split",
    "predict",
    "method_grid",
    "run_experiment",
    "REPORT_COLUMNS",
]

SSL_KINDS = ("fine", "ssdu", "n2n")
REPORT_COLUMNS = ("scenario", "method", "slice", "psnr_db", "ssim", "stop_step", "seconds")


class NumericalAbort(RuntimeError):
    def __init__(self, where: str, step: int, value: float):
        super().__init__(f"{where}: non-finite loss {value} at step {step}")
        self.step = step


@dataclass(frozen=True)
class Stage1Config:
    batch_size: int = 2
    epochs: int = 25
    lr_weights: float = 1e-4
    lr_latent: float = 1e-3
    weights: LossWeights = LossWeights()
    ssl: str = "fine"
    use_inr: bool = True
    ssdu_ratio: float = 0.4
    n2n_noise_sd: float = 0.01
    n2n_extra_accel: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.ssl not in SSL_KINDS:
            raise ValueError(f"unknown SSL loss {self.ssl!r}; expected one of {SSL_KINDS}")
        if min(self.batch_size, self.epochs + 1, self.lr_weights, self.lr_latent) <= 0:
            raise ValueError("stage-1 batch size and learning rates must be positive")


@dataclass(frozen=True)
class Stage2Config:
    lr: float = 1e-4
    max_steps: int = 1000
    val_frac: float = 0.05
    window: int = 30
    weights: LossWeights = LossWeights(inr=1.0, self_=1.0, reg=0.0)
    use_inr: bool = True
    ad_k: float = 0.1
    ad_init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"early-stopping window must be >= 1, got {self.window}")
        if not 0 < self.val_frac < 1:
            raise ValueError(f"validation fraction must be in (0, 1), got {self.val_frac}")


@dataclass
class Stage1Result:
    net: ReconNet
    inr: MRINR | None
    recons: list[np.ndarray]
    loss_trace: list[dict]
    epoch_loss: list[float]
    seconds: float


@dataclass
class Stage2Result:
    recon: np.ndarray
    train_trace: list[float]
    val_trace: list[float]
    stop_step: int
    best_step: int
    seconds: float
    net: ReconNet
    inr: MRINR | None
    bank: DiffConvBank


@dataclass
class AdaptationResult:
    stage1: Stage1Result
    stage2: list[Stage2Result] = field(default_factory=list)

    @property
    def recons(self) -> list[np.ndarray]:
        if self.stage2:
            return [r.recon for r in self.stage2]
        return self.stage1.recons

    @property
    def seconds(self) -> float:
        return self.stage1.seconds + sum(r.seconds for r in self.stage2)


def _to_complex(t: ad.Tensor) -> np.ndarray:
    a = t.data.reshape(2, *t.shape[-2:])
    return a[0] + 1j * a[1]


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def predict(s: Slice, net: ReconNet, inr: MRINR | None = None, index: int | None = None, bank=None) -> np.ndarray:
    """Untaped reconstruction of a slice from all of its measurements (complex H x W)."""
    maps = inr(s.index if index is None else index)[1] if inr is not None else None
    refine = (lambda f: ad_update(f, bank)) if bank is not None else None
    x_in = adjoint_input(s.kspace.data, s.sens, s.kspace.mask.mask)
    return _to_complex(recon_forward(x_in, net, maps, refine))


# ---------------------------------------------------------------- stage 1


def _ssl_term(cfg: Stage1Config, s: Slice, net: ReconNet, maps, epoch: int) -> ad.Tensor:
    mask = s.kspace.mask.mask
    y = s.kspace.data

    def model_eval(kdata, m):
        return recon_forward(adjoint_input(kdata, s.sens, m), net, maps)

    if cfg.ssl == "fine":
        return fine_loss(model_eval(y, mask), y, s.sens, mask)
    seed = _seed(cfg.seed, s.index, epoch)
    if cfg.ssl == "ssdu":
        split = make_ssdu_split(mask, s.kspace.mask.acs_frac, cfg.ssdu_ratio, seed)
        return ssdu_loss(model_eval, y, s.sens, split)
    return n2n_loss(
        model_eval, y, s.sens, mask, s.kspace.mask.acs_frac, seed, cfg.n2n_noise_sd, cfg.n2n_extra_accel
    )


def stage1_adapt(slices: Sequence[Slice], net: ReconNet, inr: MRINR | None, cfg: Stage1Config) -> Stage1Result:
    """Patient-wise joint adaptation of the reconstructor, SIREN and latents.

    ``net`` and ``inr`` are updated in place.  The loss trace holds one entry
    per optimisation step with the weighted total and its three parts.
    """
    if not slices:
        raise ValueError("stage 1 needs at least one slice")
    if cfg.use_inr and inr is None:
        raise ValueError("use_inr is set but no MR-INR branch was given")
    inr = inr if cfg.use_inr else None
    t0 = time.perf_counter()
    apply_freeze_policy(net, "stage1")
    weights = net.parameters() + (inr.weights() if inr else [])
    latents = inr.latent_tensors() if inr else []
    w_state = AdamState(lr=cfg.lr_weights)
    z_states = [AdamState(lr=cfg.lr_latent) for _ in latents]
    lam = cfg.weights
    rng = np.random.default_rng(cfg.seed)
    trace: list[dict] = []
    epoch_loss: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(slices))
        totals = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [slices[j] for j in order[start : start + cfg.batch_size]]
            parts = {"inr": 0.0, "reg": 0.0, "ssl": 0.0}
            with ad.Tape():
                terms = []
                for s in batch:
                    maps = None
                    if inr is not None:
                        x_inr, maps = inr(s.index)
                        if lam.inr:
                            cons = inr_consistency(x_inr, s.kspace.data, s.sens, s.kspace.mask.mask)
                            parts["inr"] += cons.item()
                            terms.append(ad.scale(cons, lam.inr))
                        if lam.reg:
                            z = inr.latent_for(s.index)
                            reg = latent_reg(z, z.sigma)
                            parts["reg"] += reg.item()
                            terms.append(ad.scale(reg, lam.reg))
                    ssl = _ssl_term(cfg, s, net, maps, epoch)
                    parts["ssl"] += ssl.item()
                    terms.append(ad.scale(ssl, lam.self_))
                loss = terms[0]
                for term in terms[1:]:
                    loss = ad.add(loss, term)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericalAbort("stage 1", len(trace), value)
                ad.backward(loss, weights + latents)
            adam_step(weights, w_state)
            if inr is not None:
                for s in batch:
                    z = inr.latent_for(s.index).tensor
                    adam_step([z], z_states[inr.latents.index(inr.latent_for(s.index))])
                for z in latents:
                    z.grad = None
            trace.append({"epoch": epoch, "total": value, **parts})
            totals.append(value)
        epoch_loss.append(float(np.mean(totals)))
    recons = [predict(s, net, inr) for s in slices]
    return Stage1Result(net, inr, recons, trace, epoch_loss, time.perf_counter() - t0)


# ---------------------------------------------------------------- stage 2


def validation_split(mask: np.ndarray, acs_frac: float, frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Hold out ``frac`` of the sampled non-ACS k-space points; returns (train, val) masks."""
    mask = np.asarray(mask, dtype=bool)
    acs = np.zeros(mask.shape[1], dtype=bool)
    acs[acs_columns(mask.shape[1], acs_frac)] = True
    pool = np.flatnonzero((mask & ~acs[None, :]).ravel())
    n_val = int(round(frac * mask.sum()))
    if n_val == 0 or len(pool) == 0:
        raise ValueError("validation split is empty")
    chosen = np.random.default_rng(seed).choice(pool, size=min(n_val, len(pool)), replace=False)
    val = np.zeros(mask.size, dtype=bool)
    val[chosen] = True
    val = val.reshape(mask.shape)
    return mask & ~val, val


def _val_loss(x: np.ndarray, s: Slice, val: np.ndarray) -> float:
    k = fft2c(s.sens.maps * x[None])[:, val]
    y = s.kspace.data[:, val]
    resid = np.abs(k.real - y.real).sum() + np.abs(k.imag - y.imag).sum()
    return float(resid / (np.abs(y.real).sum() + np.abs(y.imag).sum()))


def stage2_refine(
    s: Slice,
    net: ReconNet,
    inr: MRINR | None,
    cfg: Stage2Config,
    bank: DiffConvBank | None = None,
    index: int | None = None,
) -> Stage2Result:
    """Single-slice refinement on private copies of the stage-1 state.

    Only the final conv layer, the SIREN weights and the diffusion module
    train.  Held-out k-space never enters the network input or the training
    loss.  The returned image is the one produced at the step with the
    lowest validation loss, and the trainable parameters are rolled back to
    that step.
    """
    t0 = time.perf_counter()
    index = s.index if index is None else index
    net = net.copy()
    apply_freeze_policy(net, "stage2")
    inr = inr.copy() if (inr is not None and cfg.use_inr) else None
    if inr is not None:
        inr.freeze_latents()
    bank = bank.copy() if bank is not None else DiffConvBank.create(
        net.channels, _seed(cfg.seed, index, 7), cfg.ad_k, cfg.ad_init_scale
    )
    mask = s.kspace.mask.mask.astype(bool)
    train, val = validation_split(mask, s.kspace.mask.acs_frac, cfg.val_frac, _seed(cfg.seed, index, 11))
    y_train = np.where(train[None], s.kspace.data, 0)
    x_in = adjoint_input(y_train, s.sens, train)
    trainable = net.final_parameters() + bank.parameters() + (inr.weights() if inr else [])
    state = AdamState(lr=cfg.lr)
    lam = cfg.weights

    def refine(f):
        return ad_update(f, bank)

    train_trace, val_trace = [], []
    best_val, best_step, best_params, best_x = np.inf, 0, None, None
    ma_best, since_ma_best = np.inf, 0
    step = 0
    for step in range(cfg.max_steps):
        with ad.Tape():
            maps = None
            loss = None
            if inr is not None:
                x_inr, maps = inr(index)
                if lam.inr:
                    loss = ad.scale(inr_consistency(x_inr, s.kspace.data, s.sens, train), lam.inr)
            x = recon_forward(x_in, net, maps, refine)
            self_term = ad.scale(fine_loss(x, s.kspace.data, s.sens, train), lam.self_)
            loss = self_term if loss is None else ad.add(loss, self_term)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalAbort(f"stage 2 slice {index}", step, value)
            ad.backward(loss, trainable)
        x_now = _to_complex(x)
        v = _val_loss(x_now, s, val)
        train_trace.append(value)
        val_trace.append(v)
        if v < best_val:
            best_val, best_step, best_x = v, step, x_now
            best_params = [p.data.copy() for p in trainable]
        ma = float(np.mean(val_trace[-cfg.window :]))
        if ma < ma_best:
            ma_best, since_ma_best = ma, 0
        else:
            since_ma_best += 1
        if since_ma_best >= cfg.window:
            break
        adam_step(trainable, state)
    for p, data in zip(trainable, best_params):
        p.data = data
        p.grad = None
    return Stage2Result(
        best_x, train_trace, val_trace, step + 1, best_step, time.perf_counter() - t0, net, inr, bank
    )


# ---------------------------------------------------------------- experiments


@dataclass(frozen=True)
class Method:
    ssl: str
    inr: bool
    sst: bool

    @property
    def name(self) -> str:
        return self.ssl + ("+mr-inr" if self.inr else "") + ("+sst" if self.sst else "")

    @classmethod
    def parse(cls, name: str) -> "Method":
        parts = name.strip().lower().split("+")
        ssl, flags = parts[0], set(parts[1:])
        if ssl not in SSL_KINDS or not flags <= {"mr-inr", "sst"} or len(flags) != len(parts) - 1:
            raise ValueError(f"unknown method {name!r}")
        return cls(ssl, "mr-inr" in flags, "sst" in flags)


def method_grid() -> list[Method]:
    return [Method(ssl, inr, sst) for ssl in SSL_KINDS for inr in (False, True) for sst in (False, True)]


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "sampling"
    n_source_patients: int = 4
    source_slices_per_patient: int = 6
    n_target_slices: int = 10
    pretrain_epochs: int = 60
    pretrain_lr: float = 1e-3
    recon: ReconConfig = ReconConfig()
    inr: InrConfig = InrConfig()
    stage1: Stage1Config = Stage1Config()
    stage2: Stage2Config = Stage2Config()
    workers: int = 1
    seed: int = 0


@dataclass
class ExperimentReport:
    scenario: str
    rows: list[dict]
    references: np.ndarray  # (n_slices, H, W) complex ground truth
    recons: dict[str, np.ndarray]  # method -> (n_slices, H, W) complex
    results: dict[str, AdaptationResult]

    def summary(self, method: str) -> dict:
        return next(r for r in self.rows if r["method"] == method and r["slice"] == "summary")

    def per_slice(self, method: str) -> list[dict]:
        return [r for r in self.rows if r["method"] == method and r["slice"] != "summary"]

    def median_psnr(self, method: str) -> float:
        return float(np.median([r["psnr_db"] for r in self.per_slice(method)]))

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row[k] for k in REPORT_COLUMNS})
        return path

    def save(self, directory) -> None:
        directory = Path(directory)
        self.write_csv(directory / "report.csv")
        save_tensor(directory / "reference.d2t", self.references)
        for name, arr in self.recons.items():
            save_tensor(directory / f"recon_{name}.d2t", arr)


def _rows(scenario: str, method: str, recons, refs, stop_steps, seconds, total_seconds) -> list[dict]:
    rows = []
    for i, (x, ref) in enumerate(zip(recons, refs)):
        p, q = evaluate(np.abs(x), ref)
        rows.append(
            {"scenario": scenario, "method": method, "slice": i, "psnr_db": p, "ssim": q,
             "stop_step": stop_steps[i], "seconds": seconds[i]}
        )
    rows.append(
        {
            "scenario": scenario,
            "method": method,
            "slice": "summary",
            "psnr_db": float(np.median([r["psnr_db"] for r in rows])),
            "ssim": float(np.median([r["ssim"] for r in rows])),
            "stop_step": int(np.max(stop_steps)) if len(stop_steps) else 0,
            "seconds": total_seconds,
        }
    )
    return rows


def run_experiment(
    scenario: ScenarioConfig,
    methods: Sequence[Method | str],
    cfg: ExperimentConfig = ExperimentConfig(),
    pretrained: ReconNet | None = None,
) -> ExperimentReport:
    """Pretrain on the source domain, adapt to one target patient, score every method.

    Reference rows ``zero-filled`` and ``pretrained`` are always included.
    Stage-1 results are shared between a method and its ``+sst`` variant.
    """
    methods = [m if isinstance(m, Method) else Method.parse(m) for m in methods]
    seeds = np.random.SeedSequence(cfg.seed).generate_state(5)
    if pretrained is None:
        source = simulate_dataset(
            scenario.source, cfg.n_source_patients, cfg.source_slices_per_patient, int(seeds[0])
        )
        pretrained = ReconNet(cfg.recon, int(seeds[1]))
        pretrain_source(pretrained, source, cfg.pretrain_epochs, cfg.pretrain_lr, int(seeds[2]))
    target = simulate_patient(scenario.target, cfg.n_target_slices, int(seeds[3]))
    refs = [s.image.magnitude() for s in target]
    n = len(target)
    zeros = [0] * n
    rows: list[dict] = []
    recons: dict[str, np.ndarray] = {}

    zf = [zero_filled(s.kspace)[1] for s in target]
    recons["zero-filled"] = np.stack(zf).astype(np.complex128)
    rows += _rows(scenario.name, "zero-filled", zf, refs, zeros, [0.0] * n, 0.0)
    base = [predict(s, pretrained) for s in target]
    recons["pretrained"] = np.stack(base)
    rows += _rows(scenario.name, "pretrained", base, refs, zeros, [0.0] * n, 0.0)

    stage1_cache: dict[tuple[str, bool], Stage1Result] = {}
    results: dict[str, AdaptationResult] = {}
    for m in methods:
        key = (m.ssl, m.inr)
        if key not in stage1_cache:
            inr = MRINR(n, scenario.target.height, scenario.target.width, cfg.inr, int(seeds[4])) if m.inr else None
            s1cfg = replace(cfg.stage1, ssl=m.ssl, use_inr=m.inr)
            stage1_cache[key] = stage1_adapt(target, pretrained.copy(), inr, s1cfg)
        s1 = stage1_cache[key]
        result = AdaptationResult(s1)
        if m.sst:
            s2cfg = replace(cfg.stage2, use_inr=m.inr)

            def refine_one(s):
                return stage2_refine(s, s1.net, s1.inr, s2cfg)

            if cfg.workers > 1:
                with ThreadPoolExecutor(cfg.workers) as pool:
                    result.stage2 = list(pool.map(refine_one, target))
            else:
                result.stage2 = [refine_one(s) for s in target]
            stops = [r.stop_step for r in result.stage2]
            secs = [r.seconds for r in result.stage2]
        else:
            stops, secs = zeros, [0.0] * n
        results[m.name] = result
        recons[m.name] = np.stack(result.recons)
        rows += _rows(scenario.name, m.name, result.recons, refs, stops, secs, result.seconds)
    complex_refs = np.stack([s.image.to_complex() for s in target])
    return ExperimentReport(scenario.name, rows, complex_refs, recons, results)
