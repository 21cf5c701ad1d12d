"""Well-calibrated statistical model built from GP posteriors.

The model is the set of functions within ``beta * sigma_n`` of ``mu_n`` in every
output dimension. ``beta`` follows a fixed value or the kernelized-bandit
schedule; the optional norm-bounded projection replaces the posterior weights by
the closest function (in the data-dependent RKHS norm) whose RKHS norm is at
most ``B``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .gp import (
    Dataset,
    GPPosterior,
    KernelSpec,
    NumericalError,
    _as_batch,
    gp_fit,
    kernel_matrix,
)


class BetaMode(str, enum.Enum):
    FIXED = "fixed"
    THEORY = "theory"


@dataclass(frozen=True)
class BetaSchedule:
    mode: BetaMode = BetaMode.FIXED
    value: float = 2.0
    rkhs_bound: float = 1.0
    noise_std: float = 0.1
    delta: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "mode", BetaMode(self.mode))
        if self.mode is BetaMode.FIXED and not self.value > 0:
            raise ValueError("fixed beta must be positive")
        if self.mode is BetaMode.THEORY:
            if not (self.rkhs_bound > 0 and self.noise_std > 0):
                raise ValueError("theory beta needs positive B and noise std")
            if not 0 < self.delta <= 1:
                raise ValueError("delta must lie in (0, 1]")

    @classmethod
    def fixed(cls, value: float) -> "BetaSchedule":
        return cls(BetaMode.FIXED, value=value)

    @classmethod
    def theory(cls, rkhs_bound: float, noise_std: float, delta: float) -> "BetaSchedule":
        return cls(BetaMode.THEORY, rkhs_bound=rkhs_bound, noise_std=noise_std, delta=delta)


def beta_schedule(schedule: BetaSchedule, n: int, gamma_n: float) -> float:
    """Confidence width for episode ``n`` given the information gain so far.

    Theory mode: ``B + sigma * sqrt(2 * (gamma_n + ln(1/delta)))``.
    """
    if n < 0 or gamma_n < 0:
        raise ValueError("n and gamma_n must be non-negative")
    if schedule.mode is BetaMode.FIXED:
        return float(schedule.value)
    s = schedule
    return float(s.rkhs_bound + s.noise_std * math.sqrt(2.0 * (gamma_n + math.log(1.0 / s.delta))))


@dataclass(frozen=True, eq=False)
class CalibratedModel:
    posterior: GPPosterior
    data: Dataset
    beta: float
    n: int = 0
    schedule: BetaSchedule = field(default_factory=BetaSchedule)
    max_points: int | None = 2000
    qp_bound: float | None = None
    projected_weights: np.ndarray | None = None

    @property
    def delta(self) -> float:
        return self.schedule.delta

    @property
    def kernels(self) -> tuple[KernelSpec, ...]:
        return self.posterior.kernels

    @property
    def input_dim(self) -> int:
        return self.posterior.input_dim

    @property
    def output_dim(self) -> int:
        return self.posterior.output_dim

    @classmethod
    def create(cls, data: Dataset, kernels, schedule: BetaSchedule | None = None, *,
               max_points: int | None = 2000, qp_bound: float | None = None, n: int = 0) -> "CalibratedModel":
        schedule = schedule or BetaSchedule()
        if max_points is not None and len(data) > max_points:
            data = Dataset(data.inputs[-max_points:], data.targets[-max_points:], data.noise_variance)
        post = gp_fit(data, kernels)
        beta = beta_schedule(schedule, n, float(post.information_gain().max()))
        return cls(post, data, beta, n, schedule, max_points, qp_bound, _projection(post, qp_bound))

    def predict(self, z) -> tuple[np.ndarray, np.ndarray]:
        mean, std = self.posterior.predict(z)
        if self.projected_weights is None:
            return mean, std
        return self._projected_mean(z), std

    def predict_mean(self, z) -> np.ndarray:
        if self.projected_weights is None:
            return self.posterior.predict_mean(z)
        return self._projected_mean(z)

    def _projected_mean(self, z) -> np.ndarray:
        single = np.ndim(z) == 1
        zb = _as_batch(z, self.input_dim)
        proj = np.column_stack([kernel_matrix(spec, zb, self.posterior.inputs) @ self.projected_weights[:, j]
                                for j, spec in enumerate(self.kernels)])
        return proj[0] if single else proj

    def with_kernels(self, kernels) -> "CalibratedModel":
        """Same data and episode index, new hyperparameters."""
        post = gp_fit(self.data, kernels)
        beta = beta_schedule(self.schedule, self.n, float(post.information_gain().max()))
        if self.schedule.mode is BetaMode.THEORY:
            beta = max(beta, self.beta)
        return replace(self, posterior=post, beta=beta,
                       projected_weights=_projection(post, self.qp_bound))


def predict_confidence(model: CalibratedModel, z) -> tuple[np.ndarray, np.ndarray, float]:
    """Mean, epistemic std and width: the interval is ``mu -+ beta * sigma``."""
    mu, sigma = model.predict(z)
    return mu, sigma, model.beta


def update_model(model: CalibratedModel, new: Dataset, kernels=None) -> CalibratedModel:
    """Append transitions, refit the posterior and advance the episode counter."""
    data = model.data.extend(new, model.max_points)
    post = gp_fit(data, kernels if kernels is not None else model.kernels)
    n = model.n + 1
    beta = beta_schedule(model.schedule, n, float(post.information_gain().max()))
    if model.schedule.mode is BetaMode.THEORY:
        beta = max(beta, model.beta)
    return replace(model, posterior=post, data=data, beta=beta, n=n,
                   projected_weights=_projection(post, model.qp_bound))


@dataclass(frozen=True)
class QPSolution:
    alpha: np.ndarray
    multiplier: float
    kkt_residual: float
    iterations: int


def solve_norm_bounded_qp(gram: np.ndarray, alpha_n: np.ndarray, noise_variance: float, bound: float,
                          max_iter: int = 100, tol: float = 1e-10) -> QPSolution:
    """Minimize ``(a - a_n)^T K (I + K / s2) (a - a_n)`` subject to ``a^T K a <= B^2``.

    Both quadratic forms share the eigenbasis of ``K``, so for a fixed
    multiplier ``nu`` the stationarity condition
    ``(A + nu K) a = A a_n`` is solved coordinate-wise; ``nu`` is found by
    bisection on the (monotone) constraint value.
    """
    gram = 0.5 * (np.asarray(gram, float) + np.asarray(gram, float).T)
    alpha_n = np.asarray(alpha_n, float)
    if bound < 0:
        raise ValueError("bound must be non-negative")
    obj = gram + gram @ gram / noise_variance

    def residual(alpha, nu):
        r = obj @ (alpha - alpha_n) + nu * (gram @ alpha)
        scale = max(1.0, float(np.abs(obj @ alpha_n).max(initial=0.0)))
        return float(np.abs(r).max(initial=0.0)) / scale

    if float(alpha_n @ gram @ alpha_n) <= bound * bound * (1.0 + 1e-12):
        return QPSolution(alpha_n.copy(), 0.0, 0.0, 0)
    if bound == 0.0:
        zero = np.zeros_like(alpha_n)
        return QPSolution(zero, math.inf, 0.0, 0)

    s, u = np.linalg.eigh(gram)
    s = np.clip(s, 0.0, None)
    c0 = u.T @ alpha_n
    w = 1.0 + s / noise_variance

    def coeffs(nu):
        return c0 * w / (w + nu)

    def norm_sq(nu):
        c = coeffs(nu)
        return float(np.sum(s * c * c))

    target = bound * bound
    lo, hi = 0.0, 1.0
    for _ in range(2000):
        if norm_sq(hi) <= target:
            break
        lo, hi = hi, hi * 2.0
    else:
        raise NumericalError("could not bracket the Lagrange multiplier")
    it = 0
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        if norm_sq(mid) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    alpha = u @ coeffs(hi)
    res = residual(alpha, hi)
    if hi - lo > tol * max(1.0, hi) or res > 1e-6:
        raise NumericalError(f"norm-bounded QP did not converge: bracket {hi - lo:.3e}, "
                             f"KKT residual {res:.3e} after {it} iterations")
    return QPSolution(alpha, hi, res, it)


def lipschitz_project(post: GPPosterior, bound: float) -> np.ndarray:
    """Weights ``(n, d_out)`` of the closest norm-bounded function to the mean."""
    if post.n == 0:
        raise ValueError("projection needs at least one training point")
    if not bound >= 0:
        raise ValueError("bound must be non-negative")
    out = np.empty_like(post.weights)
    for j, spec in enumerate(post.kernels):
        gram = kernel_matrix(spec, post.inputs, post.inputs)
        out[:, j] = solve_norm_bounded_qp(gram, post.weights[:, j], post.noise_variance[j], bound).alpha
    return out


def _projection(post: GPPosterior, bound: float | None) -> np.ndarray | None:
    if bound is None or post.n == 0:
        return None
    return lipschitz_project(post, bound)
