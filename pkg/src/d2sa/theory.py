"""Affine test-time adaptation in the linear-Gaussian model.

Observations follow ``y = U c + mu + z`` with ``c ~ N(0, I_d)``,
``z ~ N(0, s^2 I_n)`` and orthonormal ``U``.  The estimator
``x_hat = alpha U U^T y + beta`` is scored by the self-supervised loss::

    L(alpha, beta) = E|y - alpha P y - beta|^2 + 2 alpha d / (n - d) * E|(I - P) y|^2,   P = U U^T

Three evaluations of ``L`` are provided:

* :func:`lss_closed_form` is the simplified closed form
  ``s^2 n + (1 - alpha)^2 d + alpha^2 s^2 d + |beta - mu|^2``.
* :func:`lss_expected` is the exact expectation.  For ``mu`` in span(U) it
  differs from the closed form only in the shift term, which reads
  ``|beta - (1 - alpha) mu|^2``.
* :func:`lss_monte_carlo` averages the loss over samples.

The closed form and its gradients agree with each other and put the optimum at
``alpha = 1/(1 + s^2)``, ``beta = mu``.  The sampled loss converges to
:func:`lss_expected`, whose optimum has the same ``alpha`` but
``beta = (1 - alpha) mu``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

__all__ = [
    "LinearModel",
    "FitResult",
    "DivergenceError",
    "make_linear_model",
    "sample_Q",
    "lss_closed_form",
    "lss_expected",
    "lss_monte_carlo",
    "lss_gradients",
    "optimal_affine",
    "expected_optimum",
    "fit_affine",
    "write_fit_csv",
]


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float, initial: float):
        super().__init__(f"fit diverged at step {step}: loss {loss:.6g} exceeds 10x initial {initial:.6g}")
        self.step = step


@dataclass(frozen=True)
class LinearModel:
    U: np.ndarray  # (n, d), orthonormal columns
    mu: np.ndarray  # (n,)
    s: float

    def __post_init__(self):
        U = np.asarray(self.U, dtype=np.float64)
        n, d = U.shape
        if d >= n:
            raise ValueError(f"subspace dimension d={d} must be below n={n}")
        if d and not np.allclose(U.T @ U, np.eye(d), atol=1e-10):
            raise ValueError("U must have orthonormal columns")
        if self.mu.shape != (n,):
            raise ValueError(f"mean shift has shape {self.mu.shape}, expected ({n},)")
        if self.s < 0:
            raise ValueError(f"noise scale must be non-negative, got {self.s}")

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def d(self) -> int:
        return self.U.shape[1]

    @property
    def s2(self) -> float:
        return self.s**2

    @property
    def projector(self) -> np.ndarray:
        return self.U @ self.U.T


def make_linear_model(n: int, d: int, s2: float, seed: int = 0, mu_norm: float = 1.0, in_span: bool = True) -> LinearModel:
    """Seeded model; ``mu`` lies in span(U) unless ``in_span`` is false."""
    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.standard_normal((n, d))) if d else (np.zeros((n, 0)), None)
    if in_span and d:
        v = rng.standard_normal(d)
        mu = U @ v
    else:
        mu = rng.standard_normal(n)
        if not in_span and d:
            mu = mu - U @ (U.T @ mu)
    norm = np.linalg.norm(mu)
    mu = mu * (mu_norm / norm) if norm > 0 else mu
    return LinearModel(U, mu, float(np.sqrt(s2)))


def sample_Q(model: LinearModel, n_samples: int, seed: int = 0) -> np.ndarray:
    """(n_samples, n) draws of ``U c + mu + z``."""
    if n_samples < 1:
        raise ValueError(f"need at least one sample, got {n_samples}")
    rng = np.random.default_rng(seed)
    c = rng.standard_normal((n_samples, model.d))
    z = rng.standard_normal((n_samples, model.n)) * model.s
    return c @ model.U.T + model.mu + z


def lss_closed_form(alpha: float, beta: np.ndarray, model: LinearModel) -> float:
    n, d, s2 = model.n, model.d, model.s2
    return float(s2 * n + (1 - alpha) ** 2 * d + alpha**2 * s2 * d + np.sum((beta - model.mu) ** 2))


def lss_expected(alpha: float, beta: np.ndarray, model: LinearModel) -> float:
    n, d, s2 = model.n, model.d, model.s2
    P = model.projector
    mean_resid = model.mu - alpha * (P @ model.mu) - beta
    off_span = model.mu - P @ model.mu
    return float(
        s2 * n
        + (1 - alpha) ** 2 * d
        + alpha**2 * s2 * d
        + mean_resid @ mean_resid
        + 2 * alpha * d / (n - d) * (off_span @ off_span)
    )


def lss_monte_carlo(alpha: float, beta: np.ndarray, model: LinearModel, n_samples: int, seed: int = 0) -> float:
    """Sample average of both loss terms, from one shared sample set."""
    y = sample_Q(model, n_samples, seed)
    Py = (y @ model.U) @ model.U.T
    fit = np.sum((y - alpha * Py - beta) ** 2, axis=1).mean()
    off = np.sum((y - Py) ** 2, axis=1).mean()
    return float(fit + 2 * alpha * model.d / (model.n - model.d) * off)


def lss_gradients(alpha: float, beta: np.ndarray, model: LinearModel) -> tuple[float, np.ndarray]:
    d, s2 = model.d, model.s2
    # -2d(1 - alpha) + 2 alpha d s^2, factored so it vanishes exactly at 1/(1 + s^2)
    return 2 * d * (alpha * (1 + s2) - 1), 2 * (np.asarray(beta) - model.mu)


def optimal_affine(model: LinearModel) -> tuple[float, np.ndarray]:
    return 1.0 / (1.0 + model.s2), model.mu.copy()


def expected_optimum(model: LinearModel) -> tuple[float, np.ndarray]:
    """Exact minimiser of :func:`lss_expected`."""
    P = model.projector
    off_span = model.mu - P @ model.mu
    alpha = (1.0 - off_span @ off_span / (model.n - model.d)) / (1.0 + model.s2)
    return float(alpha), model.mu - alpha * (P @ model.mu)


# ---------------------------------------------------------------- fitting


@dataclass
class FitResult:
    alpha: float
    beta: np.ndarray
    steps: int
    converged: bool
    trace: list[dict] = field(default_factory=list)


class _SampleStats:
    """Sufficient statistics making the sampled loss an exact quadratic in (alpha, beta)."""

    def __init__(self, model: LinearModel, y: np.ndarray):
        proj = y @ model.U
        self.mean_y = y.mean(axis=0)
        self.mean_Py = model.U @ proj.mean(axis=0)
        self.q = np.mean(np.sum(y * y, axis=1))
        self.qP = np.mean(np.sum(proj * proj, axis=1))
        self.factor = 2 * model.d / (model.n - model.d)

    def loss(self, alpha: ad.Tensor, beta: ad.Tensor) -> ad.Tensor:
        a2 = ad.mul(alpha, alpha)
        fit = ad.add(ad.scale(a2, self.qP), ad.scale(alpha, -2 * self.qP))
        cross = ad.sum_(ad.mul(beta, ad.Tensor(self.mean_y)))
        coupled = ad.mul(alpha, ad.sum_(ad.mul(beta, ad.Tensor(self.mean_Py))))
        total = ad.add(fit, ad.add(ad.scale(cross, -2.0), ad.scale(coupled, 2.0)))
        total = ad.add(total, ad.sum_(ad.mul(beta, beta)))
        total = ad.add(total, ad.scale(alpha, self.factor * (self.q - self.qP)))
        return ad.add(total, self.q)


def _closed_form_taped(alpha: ad.Tensor, beta: ad.Tensor, model: LinearModel) -> ad.Tensor:
    d, s2 = model.d, model.s2
    one_minus = ad.sub(1.0, alpha)
    diff = ad.sub(beta, ad.Tensor(model.mu))
    total = ad.add(ad.scale(ad.mul(one_minus, one_minus), d), ad.scale(ad.mul(alpha, alpha), s2 * d))
    return ad.add(ad.add(total, ad.sum_(ad.mul(diff, diff))), s2 * model.n)


def fit_affine(
    model: LinearModel,
    n_samples: int = 200_000,
    seed: int = 0,
    lr: float = 0.05,
    max_steps: int = 10_000,
    tol: float = 1e-6,
    objective: str = "monte-carlo",
) -> FitResult:
    """Gradient descent on the self-supervised loss from ``alpha=0.5, beta=0``.

    ``objective`` is ``"monte-carlo"`` (sampled loss) or ``"closed-form"``.
    Stops once the gradient norm drops below ``tol``; raises
    :class:`DivergenceError` if the loss exceeds ten times its initial value.
    """
    if objective == "monte-carlo":
        stats = _SampleStats(model, sample_Q(model, n_samples, seed))
        objective_fn = stats.loss
    elif objective == "closed-form":
        stats = None
        objective_fn = lambda a, b: _closed_form_taped(a, b, model)  # noqa: E731
    else:
        raise ValueError(f"unknown objective {objective!r}")
    alpha = ad.Tensor(np.array(0.5), True, "alpha")
    beta = ad.Tensor(np.zeros(model.n), True, "beta")
    trace = []
    initial = None
    converged = False
    step = 0
    for step in range(max_steps + 1):
        with ad.Tape():
            loss = objective_fn(alpha, beta)
            ad.backward(loss, [alpha, beta])
        value = loss.item()
        if initial is None:
            initial = value
        elif value > 10 * abs(initial):
            raise DivergenceError(step, value, initial)
        g_alpha = float(alpha.grad)
        g_beta = beta.grad.copy()
        grad_norm = float(np.sqrt(g_alpha**2 + g_beta @ g_beta))
        a, b = float(alpha.data), beta.data.copy()
        mc = value if stats is not None else float("nan")
        trace.append(
            {
                "step": step,
                "alpha": a,
                "beta_dist": float(np.linalg.norm(b - model.mu)),
                "loss_closed": lss_closed_form(a, b, model),
                "loss_mc": mc,
                "grad_alpha": abs(g_alpha),
                "grad_beta_norm": float(np.linalg.norm(g_beta)),
            }
        )
        if grad_norm < tol:
            converged = True
            break
        if step == max_steps:
            break
        alpha.data = alpha.data - lr * g_alpha
        beta.data = beta.data - lr * g_beta
    return FitResult(float(alpha.data), beta.data.copy(), step, converged, trace)


FIT_COLUMNS = ("step", "alpha", "beta_dist", "loss_closed", "loss_mc", "grad_alpha", "grad_beta_norm")


def write_fit_csv(path, result: FitResult) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=FIT_COLUMNS)
        writer.writeheader()
        for row in result.trace:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path
