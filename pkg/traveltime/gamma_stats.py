"""
Numerical kernel for Gamma travel-time distributions.

- log-density of a single Gamma and of a sum of independent Gammas
  (Moschopoulos' single-Gamma series expansion),
- the density of independent Gammas conditioned on the hyperplane
  alpha^T z = d, and a sampler for it (normalized Gamma draws),
- weighted maximum-likelihood fitting of a Gamma distribution.

Shapes are called `k` and scales `theta` throughout. All densities are
returned in log space.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence, Tuple

import numpy as np
from scipy import optimize, special

from traveltime.errors import (
    ConfigError,
    DegenerateSampleError,
    FitError,
    MissingParametersError,
    SamplingError,
    SeriesConvergenceError,
)

logger = logging.getLogger(__name__)

# Rescale the series coefficients once they pass this magnitude.
_DELTA_RESCALE = 1e280
_LOG_DELTA_RESCALE = math.log(_DELTA_RESCALE)

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 100
SHAPE_BRACKET = (1e-8, 1e8)


@dataclass(frozen=True)
class GammaParams:
    """Gamma distribution with shape `k` and scale `theta`."""

    k: float
    theta: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.k) and self.k > 0):
            raise ValueError(f"Gamma shape must be finite and > 0, got {self.k}")
        if not (math.isfinite(self.theta) and self.theta > 0):
            raise ValueError(f"Gamma scale must be finite and > 0, got {self.theta}")

    @property
    def mean(self) -> float:
        return self.k * self.theta

    @property
    def stddev(self) -> float:
        return math.sqrt(self.k) * self.theta


@dataclass(frozen=True)
class SeriesConfig:
    """Truncation policy of the Gamma-sum series."""

    rel_tol: float = 1e-12
    max_terms: int = 100_000

    def __post_init__(self) -> None:
        if not (0.0 < self.rel_tol < 1.0):
            raise ConfigError("must lie in (0, 1)", "series.rel_tol")
        if self.max_terms < 1:
            raise ConfigError("must be >= 1", "series.max_terms")


@dataclass(frozen=True)
class SimplexPoint:
    """A point z of the simplex {z > 0 : alpha^T z = d}."""

    z: Tuple[float, ...]
    alpha: Tuple[float, ...]
    d: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "z", tuple(float(v) for v in self.z))
        object.__setattr__(self, "alpha", tuple(float(v) for v in self.alpha))
        if len(self.z) != len(self.alpha):
            raise ValueError("z and alpha differ in length")
        if not self.d > 0:
            raise ValueError("d must be > 0")
        if any(v <= 0 for v in self.z) or any(a <= 0 for a in self.alpha):
            raise ValueError("simplex coordinates and alpha must be > 0")
        total = math.fsum(a * v for a, v in zip(self.alpha, self.z))
        if abs(total - self.d) > 1e-9 * self.d:
            raise ValueError(f"point violates alpha^T z = d ({total} != {self.d})")


def _shapes_scales(params: Sequence[GammaParams]) -> Tuple[np.ndarray, np.ndarray]:
    k = np.fromiter((p.k for p in params), dtype=float, count=len(params))
    theta = np.fromiter((p.theta for p in params), dtype=float, count=len(params))
    return k, theta


def gamma_logpdf_array(x: np.ndarray, k: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Elementwise Gamma log-density; x must be positive."""
    return -special.gammaln(k) - k * np.log(theta) + (k - 1.0) * np.log(x) - x / theta


def gamma_log_pdf(x: float, p: GammaParams) -> float:
    if not x > 0:
        raise ValueError(f"Gamma density requires x > 0, got {x}")
    return float(-special.gammaln(p.k) - p.k * math.log(p.theta) + (p.k - 1.0) * math.log(x) - x / p.theta)


def _power_sums(k: np.ndarray, r: np.ndarray, n: int) -> np.ndarray:
    """sum_j k_j r_j^l for l < n, with entry 0 set to zero."""
    out = (k[None, :] * r[None, :] ** np.arange(n, dtype=float)[:, None]).sum(axis=1)
    out[0] = 0.0
    return out


def _log_add(a: float, b: float) -> float:
    if a < b:
        a, b = b, a
    if b == -math.inf:
        return a
    return a + math.log1p(math.exp(b - a))


def sum_gamma_log_density(y: float, params: Sequence[GammaParams], cfg: SeriesConfig = SeriesConfig()) -> float:
    """Log-density at `y` of the sum of independent Gamma(k_j, theta_j).

    Uses Moschopoulos' expansion: with theta_1 = min theta_j the density is a
    mixture of Gamma(rho + l, theta_1), rho = sum k_j, with weights
    C * delta_l where C = prod (theta_1/theta_j)^k_j, delta_0 = 1 and

        delta_{l+1} = 1/(l+1) * sum_{i=1}^{l+1} i * g_i * delta_{l+1-i},
        g_i = sum_j k_j (1 - theta_1/theta_j)^i / i.

    The series stops once a term falls below `rel_tol` times the running sum
    while decreasing.

    Raises:
        ValueError: empty `params` or y <= 0.
        SeriesConvergenceError: `max_terms` reached first.
    """
    if not params:
        raise ValueError("at least one Gamma component is required")
    if not y > 0:
        raise ValueError(f"density requires y > 0, got {y}")
    if len(params) == 1:
        return gamma_log_pdf(y, params[0])

    k, theta = _shapes_scales(params)
    theta1 = float(theta.min())
    rho = float(k.sum())
    ratio = 1.0 - theta1 / theta
    log_c = float(np.sum(k * np.log(theta1 / theta)))
    log_base = gamma_log_pdf(y, GammaParams(rho, theta1))

    active = ratio > 0.0
    if not active.any():
        # Equal scales collapse to a single Gamma.
        return log_base
    k_a = k[active]
    r_a = ratio[active]

    max_terms = cfg.max_terms
    log_tol = math.log(cfg.rel_tol)
    log_y_over_theta = math.log(y / theta1)

    # i * g_i and the delta coefficients, grown on demand.
    capacity = min(max_terms + 1, 256)
    igam = _power_sums(k_a, r_a, capacity)
    delta = np.zeros(capacity)
    delta[0] = 1.0
    log_scale = 0.0

    log_pdf_l = log_base
    log_sum = log_c + log_base
    prev_term = log_sum
    for l in range(1, max_terms + 1):
        if l >= capacity:
            capacity = min(2 * capacity, max_terms + 1)
            igam = _power_sums(k_a, r_a, capacity)
            delta = np.resize(delta, capacity)
        value = float(np.dot(igam[1:l + 1], delta[l - 1::-1])) / l
        delta[l] = value
        if value > _DELTA_RESCALE:
            delta[: l + 1] /= _DELTA_RESCALE
            log_scale += _LOG_DELTA_RESCALE
            value = delta[l]

        log_pdf_l += log_y_over_theta - math.log(rho + l - 1.0)
        if value > 0.0:
            term = log_c + log_scale + math.log(value) + log_pdf_l
        else:
            term = -math.inf
        log_sum = _log_add(log_sum, term)
        if term < log_sum + log_tol and term <= prev_term:
            return log_sum
        prev_term = term

    logger.warning(f"Gamma-sum series stopped after {max_terms} terms at y={y}")
    raise SeriesConvergenceError(log_sum, max_terms)


def log_kappa(params: Sequence[GammaParams], cfg: SeriesConfig = SeriesConfig()) -> float:
    """log of the normalization constant: density of the Gamma sum at 1."""
    return sum_gamma_log_density(1.0, params, cfg)


def kappa(params: Sequence[GammaParams], cfg: SeriesConfig = SeriesConfig()) -> float:
    return math.exp(log_kappa(params, cfg))


def _simplex_measure_log_jacobian(alpha: np.ndarray, d: float) -> float:
    # Converts a density over the normalized coordinates y = alpha*z/d (first
    # n-1 free) into one over surface measure on {alpha^T z = d}.
    n = alpha.size
    return float(np.sum(np.log(alpha)) - (n - 1) * math.log(d) - 0.5 * math.log(float(np.dot(alpha, alpha))))


def conditional_log_density(pt: SimplexPoint, params: Sequence[GammaParams], cfg: SeriesConfig = SeriesConfig()) -> float:
    """Log-density of independent Gammas conditioned on alpha^T z = d.

    The density is taken with respect to surface measure on the hyperplane,
    so it integrates to one over the simplex:

        f(z) = prod(alpha) / (d^(n-1) |alpha| kappa(k, theta_hat))
               * prod f_Gamma(alpha_i z_i / d; k_i, theta_hat_i),
        theta_hat_i = alpha_i theta_i / d.

    Raises:
        ValueError: n == 1 (the conditional law is a point mass) or
            mismatched dimensions.
    """
    n = len(pt.z)
    if n != len(params):
        raise ValueError(f"point has {n} coordinates but {len(params)} Gamma components were given")
    if n == 1:
        raise ValueError("conditional density is degenerate for a single component")
    z = np.asarray(pt.z)
    alpha = np.asarray(pt.alpha)
    k, theta = _shapes_scales(params)
    theta_hat = alpha * theta / pt.d
    y = alpha * z / pt.d
    log_k = log_kappa([GammaParams(float(a), float(b)) for a, b in zip(k, theta_hat)], cfg)
    return float(np.sum(gamma_logpdf_array(y, k, theta_hat))) - log_k + _simplex_measure_log_jacobian(alpha, pt.d)


def sample_conditional_batch(
    alpha: Sequence[float],
    d: float,
    params: Sequence[GammaParams],
    size: int,
    rng: np.random.Generator,
    max_retries: int = 100,
) -> Tuple[np.ndarray, np.ndarray]:
    """Draw `size` points of the hyperplane alpha^T z = d by normalized Gammas.

    a_i ~ Gamma(k_i, alpha_i theta_i / d), z_i = d / alpha_i * a_i / sum(a).

    Returns:
        (z, proposal_log_density): an array of shape (size, n) whose rows
        satisfy the constraint after renormalization, and the log-density of
        each row under this construction (surface measure, as in
        `conditional_log_density`).

    Raises:
        SamplingError: draws kept underflowing after `max_retries` attempts.
    """
    alpha_arr = np.asarray(alpha, dtype=float)
    n = alpha_arr.size
    if n != len(params):
        raise ValueError(f"{n} activation weights but {len(params)} Gamma components")
    if n == 0 or np.any(alpha_arr <= 0) or not d > 0:
        raise ValueError("alpha must be non-empty and positive, d must be > 0")
    if n == 1:
        return np.full((size, 1), d / alpha_arr[0]), np.zeros(size)

    k, theta = _shapes_scales(params)
    scale = alpha_arr * theta / d
    a = rng.gamma(k, scale, size=(size, n))
    bad = ~np.all(a > 0, axis=1)
    retries = 0
    while bad.any():
        if retries >= max_retries:
            raise SamplingError(f"Gamma draws underflowed {retries} times (shapes {k.tolist()})")
        a[bad] = rng.gamma(k, scale, size=(int(bad.sum()), n))
        bad = ~np.all(a > 0, axis=1)
        retries += 1

    y = a / a.sum(axis=1, keepdims=True)
    z = d * y / alpha_arr
    z *= (d / (z @ alpha_arr))[:, None]
    y = alpha_arr * z / d

    big_k = float(k.sum())
    log_dirichlet = (
        special.gammaln(big_k)
        - np.sum(special.gammaln(k))
        + np.sum((k - 1.0) * np.log(y), axis=1)
        - np.sum(k * np.log(scale))
        - big_k * np.log(np.sum(y / scale, axis=1))
    )
    return z, log_dirichlet + _simplex_measure_log_jacobian(alpha_arr, d)


def sample_conditional(
    alpha: Sequence[float],
    d: float,
    params: Sequence[GammaParams],
    rng: np.random.Generator,
) -> Tuple[SimplexPoint, float]:
    """Single draw of `sample_conditional_batch` as a SimplexPoint."""
    z, log_q = sample_conditional_batch(alpha, d, params, 1, rng)
    return SimplexPoint(z=tuple(z[0]), alpha=tuple(alpha), d=d), float(log_q[0])


def importance_log_weights(z: np.ndarray, params: Sequence[GammaParams]) -> np.ndarray:
    """log(target / proposal) for rows drawn by `sample_conditional_batch`.

    The ratio of the conditional density to the normalized-Gamma proposal
    reduces to K log t - t with K = sum k_i and t = sum z_i / theta_i, up to
    a constant shared by all rows of one observation.
    """
    k, theta = _shapes_scales(params)
    t = np.asarray(z) @ (1.0 / theta)
    return k.sum() * np.log(t) - t


def joint_log_likelihood(z: np.ndarray, params: Sequence[GammaParams]) -> np.ndarray:
    """sum_i log f_Gamma(z_i; k_i, theta_i) for each row of z."""
    k, theta = _shapes_scales(params)
    return np.sum(gamma_logpdf_array(np.asarray(z), k, theta), axis=1)


def effective_sample_size(weights: np.ndarray) -> float:
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    sq = np.dot(w, w)
    return float(total * total / sq) if sq > 0 else 0.0


def fit_gamma_weighted(
    samples: Sequence[float],
    weights: Sequence[float],
    min_effective_samples: float = 3.0,
) -> GammaParams:
    """Weighted maximum-likelihood Gamma fit.

    theta = mean / k where k solves log k - digamma(k) = log(mean) - mean(log x),
    found by Newton iteration from the moment estimate mean^2 / var, with a
    bracketed root search if Newton leaves the positive axis.

    Raises:
        ValueError: mismatched lengths, non-positive samples or negative weights.
        DegenerateSampleError: too few effective samples or zero variance.
        FitError: the shape equation has no finite solution.
    """
    x = np.asarray(samples, dtype=float)
    w = np.asarray(weights, dtype=float)
    if x.shape != w.shape or x.ndim != 1:
        raise ValueError("samples and weights must be 1-d arrays of the same length")
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite and > 0")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and >= 0")
    if np.count_nonzero(w) < 2:
        raise DegenerateSampleError("degenerate sample set: fewer than 2 positively weighted samples")
    ess = effective_sample_size(w)
    if ess < min_effective_samples:
        raise DegenerateSampleError(f"degenerate sample set: effective sample size {ess:.3g} < {min_effective_samples}")

    w = w / w.sum()
    mean = float(np.dot(w, x))
    var = float(np.dot(w, (x - mean) ** 2))
    s = math.log(mean) - float(np.dot(w, np.log(x)))
    if var <= 0 or s <= 0:
        raise DegenerateSampleError("degenerate sample set: zero weighted variance")

    def f(shape: float) -> float:
        return math.log(shape) - float(special.digamma(shape)) - s

    lo, hi = SHAPE_BRACKET
    k = min(max(mean * mean / var, lo), hi)
    for _ in range(NEWTON_MAX_ITER):
        slope = 1.0 / k - float(special.polygamma(1, k))
        k_new = k - f(k) / slope
        if not (math.isfinite(k_new) and k_new > 0):
            k = _bracketed_shape(f, lo, hi)
            break
        done = abs(k_new - k) / k_new < NEWTON_TOL
        k = k_new
        if done:
            break
    if not math.isfinite(k):
        raise FitError(f"shape equation did not converge (mean {mean:.6g}, log-gap {s:.6g})")
    k = min(max(k, lo), hi)
    return GammaParams(k=k, theta=mean / k)


def _bracketed_shape(f, lo: float, hi: float) -> float:
    if f(hi) > 0:
        return hi
    if f(lo) < 0:
        return lo
    return float(optimize.brentq(f, lo, hi, xtol=1e-14, rtol=1e-12))


def prior_pseudo_samples(mean_s: float, stddev_s: float, n_nodes: int = 12) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic weighted points with the given mean and stddev.

    Generalized Gauss-Laguerre nodes of the Gamma with these moments; weights
    sum to one. The first two moments are reproduced exactly.
    """
    if not (mean_s > 0 and stddev_s > 0):
        raise ValueError("prior mean and stddev must be > 0")
    k = (mean_s / stddev_s) ** 2
    theta = stddev_s ** 2 / mean_s
    nodes, weights = special.roots_genlaguerre(n_nodes, k - 1.0)
    keep = (nodes > 0) & (weights > 0)
    nodes, weights = nodes[keep], weights[keep]
    return theta * nodes, weights / weights.sum()


def path_log_likelihood(obs, params: Mapping[int, GammaParams], cfg: SeriesConfig = SeriesConfig()) -> float:
    """Log-density of the observed duration of `obs` under per-link Gammas.

    The duration is sum_l alpha_l X_l with X_l ~ Gamma(k_l, theta_l), i.e. a
    sum of Gamma(k_l, alpha_l theta_l).

    Raises:
        MissingParametersError: a link of the observation has no parameters.
    """
    comps = []
    for link, a in zip(obs.links, obs.alpha):
        p = params.get(link)
        if p is None:
            raise MissingParametersError(link)
        comps.append(GammaParams(p.k, a * p.theta))
    return sum_gamma_log_density(obs.duration_s, comps, cfg)

