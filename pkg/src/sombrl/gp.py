"""Exact Gaussian-process regression, one independent GP per output dimension.

Every output dimension ``j`` owns a :class:`KernelSpec` (shared family, its own
lengthscales and signal variance) and a known homoscedastic noise variance.
Posteriors are immutable; appending data means building a new posterior.
"""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

logger = logging.getLogger(__name__)

JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class NumericalError(RuntimeError):
    """Raised when a factorization or solver cannot produce a usable result."""


class HyperparameterFitWarning(UserWarning):
    pass


class KernelFamily(str, enum.Enum):
    RBF = "rbf"
    LINEAR = "linear"
    MATERN52 = "matern52"


@dataclass(frozen=True)
class KernelSpec:
    family: KernelFamily
    lengthscale: tuple[float, ...]
    signal_variance: float
    input_dim: int

    def __post_init__(self):
        family = KernelFamily(self.family)
        ls = np.broadcast_to(np.asarray(self.lengthscale, dtype=float), (self.input_dim,))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if np.any(~np.isfinite(ls)) or np.any(ls <= 0):
            raise ValueError(f"lengthscales must be positive, got {ls}")
        if not (math.isfinite(self.signal_variance) and self.signal_variance > 0):
            raise ValueError(f"signal_variance must be positive, got {self.signal_variance}")
        object.__setattr__(self, "family", family)
        object.__setattr__(self, "lengthscale", tuple(float(v) for v in ls))
        object.__setattr__(self, "signal_variance", float(self.signal_variance))

    @classmethod
    def rbf(cls, input_dim: int, lengthscale=1.0, signal_variance=1.0) -> "KernelSpec":
        return cls(KernelFamily.RBF, lengthscale, signal_variance, input_dim)

    @property
    def scales(self) -> np.ndarray:
        return np.asarray(self.lengthscale)

    def with_params(self, lengthscale, signal_variance) -> "KernelSpec":
        return replace(self, lengthscale=tuple(np.broadcast_to(lengthscale, (self.input_dim,))),
                       signal_variance=float(signal_variance))


def _as_batch(z, input_dim: int) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[None, :]
    if z.ndim != 2 or z.shape[1] != input_dim:
        raise ValueError(f"expected inputs with {input_dim} columns, got shape {z.shape}")
    return z


def kernel_matrix(spec: KernelSpec, a, b) -> np.ndarray:
    """Cross-covariance matrix ``k(a_i, b_l)`` of shape ``(len(a), len(b))``."""
    a = _as_batch(a, spec.input_dim) / spec.scales
    b = _as_batch(b, spec.input_dim) / spec.scales
    return _scaled_kernel(spec, a, b.T, (b * b).sum(1))


def _scaled_kernel(spec: KernelSpec, a: np.ndarray, bt: np.ndarray, bsq: np.ndarray) -> np.ndarray:
    # a, b already divided by the lengthscales; bt = b.T, bsq = squared row norms of b
    ab = a @ bt
    if spec.family is KernelFamily.LINEAR:
        return spec.signal_variance * ab
    sq = (a * a).sum(1)[:, None] + bsq[None, :] - 2.0 * ab
    np.maximum(sq, 0.0, out=sq)
    if spec.family is KernelFamily.RBF:
        return spec.signal_variance * np.exp(-0.5 * sq)
    r = np.sqrt(5.0 * sq)
    return spec.signal_variance * (1.0 + r + r * r / 3.0) * np.exp(-r)


def kernel_diag(spec: KernelSpec, a) -> np.ndarray:
    a = _as_batch(a, spec.input_dim)
    if spec.family is KernelFamily.LINEAR:
        s = a / spec.scales
        return spec.signal_variance * (s * s).sum(1)
    return np.full(len(a), spec.signal_variance)


def kernel_eval(spec: KernelSpec, z1, z2) -> float:
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    if z1.shape != (spec.input_dim,) or z2.shape != (spec.input_dim,):
        raise ValueError(f"kernel expects vectors of length {spec.input_dim}, got {z1.shape} and {z2.shape}")
    if spec.family is KernelFamily.LINEAR:
        return float(spec.signal_variance * np.dot(z1 / spec.scales, z2 / spec.scales))
    d = (z1 - z2) / spec.scales
    sq = float(np.dot(d, d))
    if spec.family is KernelFamily.RBF:
        return spec.signal_variance * math.exp(-0.5 * sq)
    r = math.sqrt(5.0 * sq)
    return spec.signal_variance * (1.0 + r + r * r / 3.0) * math.exp(-r)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Training set ``D_{1:n}``: inputs ``z``, targets ``y`` and the noise variance per output."""

    inputs: np.ndarray
    targets: np.ndarray
    noise_variance: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        y = np.asarray(self.targets, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"inputs ({x.shape[0]}) and targets ({y.shape[0]}) differ in length")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite values")
        nv = np.broadcast_to(np.asarray(self.noise_variance, dtype=float), (y.shape[1],)).copy()
        if np.any(nv <= 0):
            raise ValueError("noise variance must be positive")
        x.setflags(write=False)
        y.setflags(write=False)
        nv.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "noise_variance", nv)

    @classmethod
    def empty(cls, input_dim: int, output_dim: int, noise_variance) -> "Dataset":
        return cls(np.zeros((0, input_dim)), np.zeros((0, output_dim)), noise_variance)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def output_dim(self) -> int:
        return self.targets.shape[1]

    def append(self, inputs, targets, max_points: int | None = None) -> "Dataset":
        """Concatenate new rows; keep only the ``max_points`` most recent ones."""
        inputs = np.asarray(inputs, dtype=float).reshape(-1, self.input_dim)
        targets = np.asarray(targets, dtype=float).reshape(-1, self.output_dim)
        x = np.concatenate([self.inputs, inputs])
        y = np.concatenate([self.targets, targets])
        if max_points is not None and len(x) > max_points:
            x, y = x[-max_points:], y[-max_points:]
        return Dataset(x, y, self.noise_variance)

    def extend(self, other: "Dataset", max_points: int | None = None) -> "Dataset":
        return self.append(other.inputs, other.targets, max_points)


def _per_output(kernels, output_dim: int) -> tuple[KernelSpec, ...]:
    if isinstance(kernels, KernelSpec):
        return (kernels,) * output_dim
    kernels = tuple(kernels)
    if len(kernels) != output_dim:
        raise ValueError(f"need {output_dim} kernels, got {len(kernels)}")
    return kernels


def _stable_cholesky(k: np.ndarray, noise_var: float) -> tuple[np.ndarray, float]:
    n = k.shape[0]
    eye = np.eye(n)
    for jitter in JITTER_LADDER:
        try:
            return np.linalg.cholesky(k + (noise_var + jitter) * eye), jitter
        except np.linalg.LinAlgError:
            continue
    cond = np.linalg.cond(k + noise_var * eye)
    raise NumericalError(
        f"kernel matrix not positive definite after jitter {JITTER_LADDER[-1]:g} "
        f"(n={n}, noise variance={noise_var:g}, condition number={cond:.3e})"
    )


@dataclass(frozen=True, eq=False)
class GPPosterior:
    """Closed-form posterior ``mu_{n,j}``, ``sigma_{n,j}`` for every output dimension."""

    kernels: tuple[KernelSpec, ...]
    noise_variance: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray
    cholesky: tuple[np.ndarray, ...]
    weights: np.ndarray
    jitter: tuple[float, ...]

    @property
    def input_dim(self) -> int:
        return self.kernels[0].input_dim

    @property
    def output_dim(self) -> int:
        return len(self.kernels)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def predict(self, z) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation.

        ``z`` may be a single vector (returns ``(d_out,)`` arrays) or a batch
        ``(m, d_in)`` (returns ``(m, d_out)`` arrays).
        """
        single = np.ndim(z) == 1
        zb = _as_batch(z, self.input_dim)
        if not np.all(np.isfinite(zb)):
            raise ValueError("query contains non-finite values")
        mean = np.zeros((len(zb), self.output_dim))
        var = np.empty((len(zb), self.output_dim))
        for j, spec in enumerate(self.kernels):
            prior = kernel_diag(spec, zb)
            if self.n == 0:
                var[:, j] = prior
                continue
            vm = self._cross_kernel(j, zb) @ self._predictors[j]
            mean[:, j] = vm[:, -1]
            v = vm[:, :-1]
            var[:, j] = np.clip(prior - np.einsum("ij,ij->i", v, v), 0.0, prior)
        std = np.sqrt(var)
        if single:
            return mean[0], std[0]
        return mean, std

    @cached_property
    def _predictors(self) -> tuple[np.ndarray, ...]:
        # [L^{-T} | weights] per output: one matrix product yields variance terms and mean
        eye = np.eye(self.n)
        return tuple(np.ascontiguousarray(np.column_stack(
            [solve_triangular(c, eye, lower=True, check_finite=False).T, self.weights[:, j]]))
            for j, c in enumerate(self.cholesky))

    @cached_property
    def _scaled_inputs(self) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
        out = []
        for spec in self.kernels:
            b = self.inputs / spec.scales
            out.append((np.ascontiguousarray(b.T), (b * b).sum(1)))
        return tuple(out)

    def _cross_kernel(self, j: int, zb: np.ndarray) -> np.ndarray:
        bt, bsq = self._scaled_inputs[j]
        return _scaled_kernel(self.kernels[j], zb / self.kernels[j].scales, bt, bsq)

    def predict_mean(self, z) -> np.ndarray:
        """Posterior mean only; skips the variance solve."""
        single = np.ndim(z) == 1
        zb = _as_batch(z, self.input_dim)
        mean = np.zeros((len(zb), self.output_dim))
        if self.n:
            for j in range(self.output_dim):
                mean[:, j] = self._cross_kernel(j, zb) @ self.weights[:, j]
        return mean[0] if single else mean

    def covariance(self, z) -> np.ndarray:
        """Joint posterior covariance of a batch, shape ``(d_out, m, m)``."""
        zb = _as_batch(z, self.input_dim)
        out = np.empty((self.output_dim, len(zb), len(zb)))
        for j, spec in enumerate(self.kernels):
            kzz = kernel_matrix(spec, zb, zb)
            if self.n:
                v = solve_triangular(self.cholesky[j], kernel_matrix(spec, self.inputs, zb), lower=True)
                kzz = kzz - v.T @ v
            out[j] = 0.5 * (kzz + kzz.T)
        return out

    def information_gain(self) -> np.ndarray:
        """Per-dimension ``1/2 log det(I + K_n / noise)`` of the training inputs."""
        if self.n == 0:
            return np.zeros(self.output_dim)
        out = np.empty(self.output_dim)
        for j, chol in enumerate(self.cholesky):
            logdet = 2.0 * np.log(np.diag(chol)).sum()
            out[j] = 0.5 * (logdet - self.n * math.log(self.noise_variance[j]))
        return np.maximum(out, 0.0)


def gp_fit(data: Dataset, kernels) -> GPPosterior:
    """Factorize ``K_n + noise * I`` per output and solve for the weight vectors."""
    kernels = _per_output(kernels, data.output_dim)
    for spec in kernels:
        if spec.input_dim != data.input_dim:
            raise ValueError(f"kernel input_dim {spec.input_dim} != data input_dim {data.input_dim}")
    n = len(data)
    chols, jitters = [], []
    weights = np.zeros((n, data.output_dim))
    for j, spec in enumerate(kernels):
        if n == 0:
            chols.append(np.zeros((0, 0)))
            jitters.append(0.0)
            continue
        k = kernel_matrix(spec, data.inputs, data.inputs)
        chol, jitter = _stable_cholesky(k, data.noise_variance[j])
        if jitter:
            logger.debug("output %d needed jitter %g", j, jitter)
        chols.append(chol)
        jitters.append(jitter)
        weights[:, j] = cho_solve((chol, True), data.targets[:, j])
    return GPPosterior(kernels, data.noise_variance, data.inputs, data.targets,
                       tuple(chols), weights, tuple(jitters))


def _lml_single(spec: KernelSpec, x: np.ndarray, y: np.ndarray, noise_var: float) -> float:
    n = len(y)
    k = kernel_matrix(spec, x, x)
    chol, _ = _stable_cholesky(k, noise_var)
    alpha = cho_solve((chol, True), y)
    return float(-0.5 * y @ alpha - np.log(np.diag(chol)).sum() - 0.5 * n * math.log(2.0 * math.pi))


def log_marginal_likelihood(data: Dataset, kernels) -> float:
    """``log p(y | X)`` summed over the independent output dimensions."""
    if len(data) == 0:
        raise ValueError("log marginal likelihood needs at least one data point")
    kernels = _per_output(kernels, data.output_dim)
    return sum(_lml_single(spec, data.inputs, data.targets[:, j], data.noise_variance[j])
               for j, spec in enumerate(kernels))


@dataclass(frozen=True)
class HyperparameterBounds:
    """Box for the search, in natural units (the search itself runs in log space)."""

    lengthscale: tuple[float, float] = (0.05, 20.0)
    signal_variance: tuple[float, float] = (1e-8, 1e2)

    def __post_init__(self):
        for name in ("lengthscale", "signal_variance"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"invalid {name} bounds ({lo}, {hi})")


_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_max(f, lo: float, hi: float, tol: float = 1e-3, max_iter: int = 60) -> tuple[float, float]:
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a < tol:
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    return (c, fc) if fc >= fd else (d, fd)


def _fit_one(spec: KernelSpec, x, y, noise_var, bounds: HyperparameterBounds,
             restarts: int, sweeps: int, rng: np.random.Generator) -> tuple[KernelSpec, bool]:
    d = spec.input_dim
    lo = np.log(np.r_[np.full(d, bounds.lengthscale[0]), bounds.signal_variance[0]])
    hi = np.log(np.r_[np.full(d, bounds.lengthscale[1]), bounds.signal_variance[1]])

    def objective(theta):
        try:
            return _lml_single(spec.with_params(np.exp(theta[:d]), math.exp(theta[d])), x, y, noise_var)
        except (NumericalError, ValueError, FloatingPointError):
            return -math.inf

    start = np.clip(np.log(np.r_[spec.scales, spec.signal_variance]), lo, hi)
    best_theta, best_val = start, objective(start)
    for r in range(restarts):
        theta = start.copy() if r == 0 else rng.uniform(lo, hi)
        val = objective(theta)
        for _ in range(sweeps):
            for i in range(d + 1):
                if hi[i] == lo[i]:
                    continue

                def along(t, i=i, theta=theta):
                    trial = theta.copy()
                    trial[i] = t
                    return objective(trial)

                t, v = _golden_max(along, lo[i], hi[i])
                if v > val:
                    theta[i], val = t, v
        if val > best_val:
            best_theta, best_val = theta, val
    ok = math.isfinite(best_val)
    return spec.with_params(np.exp(best_theta[:d]), math.exp(best_theta[d])), ok


def fit_hyperparameters(data: Dataset, init, bounds: HyperparameterBounds | None = None, *,
                        restarts: int = 5, sweeps: int = 2, max_points: int | None = None,
                        rng: np.random.Generator | None = None) -> tuple[KernelSpec, ...]:
    """Maximize the marginal likelihood per output dimension.

    Multi-start coordinate-wise golden-section search over log lengthscales and
    log signal variance; the noise variance stays at its configured value.
    With fewer than five points the initial kernels are returned untouched.
    ``max_points`` caps the rows used during the search (evenly thinned); the
    final choice is always checked against ``init`` on the full data so the
    likelihood never decreases.
    """
    bounds = bounds or HyperparameterBounds()
    init = _per_output(init, data.output_dim)
    if len(data) < 5:
        return init
    rng = rng if rng is not None else np.random.default_rng(0)
    x, y = data.inputs, data.targets
    if max_points is not None and len(data) > max_points:
        idx = np.linspace(0, len(data) - 1, max_points).round().astype(int)
        x, y = x[idx], y[idx]
    fitted = []
    for j, spec in enumerate(init):
        nv = data.noise_variance[j]
        new, ok = _fit_one(spec, x, y[:, j], nv, bounds, restarts, sweeps, rng)
        if not ok:
            warnings.warn(f"hyperparameter fit failed for output {j}; keeping initial kernel",
                          HyperparameterFitWarning, stacklevel=2)
            fitted.append(spec)
            continue
        init_in_bounds = (all(bounds.lengthscale[0] <= v <= bounds.lengthscale[1] for v in spec.lengthscale)
                          and bounds.signal_variance[0] <= spec.signal_variance <= bounds.signal_variance[1])
        if init_in_bounds:
            full_y = data.targets[:, j]
            try:
                keep_init = _lml_single(new, data.inputs, full_y, nv) < _lml_single(spec, data.inputs, full_y, nv)
            except NumericalError:
                keep_init = True
            if keep_init:
                new = spec
        fitted.append(new)
    return tuple(fitted)


def information_gain(spec: KernelSpec, inputs, noise_variance: float) -> float:
    """``1/2 log det(I + K / noise)`` for the given input set."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, spec.input_dim)
    if len(inputs) == 0:
        return 0.0
    m = np.eye(len(inputs)) + kernel_matrix(spec, inputs, inputs) / noise_variance
    chol = np.linalg.cholesky(0.5 * (m + m.T))
    return float(max(np.log(np.diag(chol)).sum(), 0.0))


def information_gain_increment(post: GPPosterior, new_inputs) -> np.ndarray:
    """Per-dimension gain from adding ``new_inputs`` to the posterior's data.

    Equals ``Gamma(old + new) - Gamma(old)`` for fixed kernels; always >= 0.
    """
    new_inputs = np.asarray(new_inputs, dtype=float).reshape(-1, post.input_dim)
    if len(new_inputs) == 0:
        return np.zeros(post.output_dim)
    cov = post.covariance(new_inputs)
    out = np.empty(post.output_dim)
    eye = np.eye(len(new_inputs))
    for j in range(post.output_dim):
        sign, logdet = np.linalg.slogdet(eye + cov[j] / post.noise_variance[j])
        out[j] = 0.5 * logdet if sign > 0 else 0.0
    return np.maximum(out, 0.0)


def select_informative(post: GPPosterior, new_inputs, min_gain: float) -> np.ndarray:
    """Greedy data thinning: indices of ``new_inputs`` worth adding to ``post``.

    Points are visited in order; a point is kept when
    ``sum_j log(1 + var_j / noise_j) >= min_gain``, with ``var_j`` its
    posterior variance given the old data and the points already kept.
    """
    new_inputs = np.asarray(new_inputs, dtype=float).reshape(-1, post.input_dim)
    m = len(new_inputs)
    if m == 0 or min_gain <= 0:
        return np.arange(m)
    cov = post.covariance(new_inputs)
    noise = post.noise_variance
    # one growing Cholesky factor per output for the kept points (plus noise)
    chols = [np.zeros((m, m)) for _ in range(post.output_dim)]
    kept: list[int] = []
    for i in range(m):
        k = len(kept)
        var = np.empty(post.output_dim)
        rows = []
        for j in range(post.output_dim):
            c = cov[j][i, kept]
            row = solve_triangular(chols[j][:k, :k], c, lower=True, check_finite=False) if k else c
            rows.append(row)
            var[j] = max(cov[j][i, i] - float(row @ row), 0.0)
        if float(np.sum(np.log1p(var / noise))) < min_gain:
            continue
        for j in range(post.output_dim):
            chols[j][k, :k] = rows[j]
            chols[j][k, k] = math.sqrt(var[j] + noise[j])
        kept.append(i)
    return np.array(kept, dtype=int)
