"""Densities, samplers and circular summaries for the noise models.

Three families are used by the filter: von Mises on joint angles, Bingham
on unit quaternions (xyzw) and multivariate Gaussian on positions.  All
functions are pure; samplers take an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, linalg, special

from .errors import (
    CircularMeanUndefined,
    DomainError,
    NumericalError,
    ParameterError,
)

TWO_PI = 2.0 * np.pi
LOG_2PI = math.log(TWO_PI)

# Series below this concentration, asymptotic expansion above.
_BESSEL_SWITCH = 15.0
_UNIT_TOL = 1e-6


def wrap_angle(x):
    """Wrap angles to [-pi, pi); an input of exactly pi maps to -pi."""
    x = np.asarray(x, dtype=float)
    out = np.mod(x + np.pi, TWO_PI) - np.pi
    # np.mod can return 2*pi for tiny negative inputs
    out = np.where(out >= np.pi, out - TWO_PI, out)
    # in-range values pass through bit-exact
    out = np.where((x >= -np.pi) & (x < np.pi), x, out)
    if out.ndim == 0:
        return float(out)
    return out


def _log_bessel_series(order, x):
    # sum_k (x/2)^(2k+order) / (k! (k+order)!)
    q = 0.25 * x * x
    term = 1.0 / math.factorial(order)
    total = term
    k = 0
    while True:
        k += 1
        term *= q / (k * (k + order))
        total += term
        if term < 1e-17 * total:
            break
    if order == 0:
        return math.log(total)
    return order * math.log(0.5 * x) + math.log(total)


def _log_bessel_asymptotic(order, x):
    # e^x / sqrt(2 pi x) * sum_k (-1)^k a_k(order) / x^k, truncated at the
    # smallest term (the series is divergent).
    mu = 4.0 * order * order
    term = 1.0
    total = 1.0
    k = 0
    while True:
        k += 1
        nxt = -term * (mu - (2 * k - 1) ** 2) / (8.0 * k * x)
        if abs(nxt) >= abs(term) or abs(nxt) < 1e-17 * abs(total):
            if abs(nxt) < abs(term):
                total += nxt
            break
        term = nxt
        total += term
    return x - 0.5 * math.log(TWO_PI * x) + math.log(total)


def log_bessel_i(order, kappa):
    """log I_order(kappa) for order 0 or 1, stable for large kappa."""
    if order not in (0, 1):
        raise ParameterError("only orders 0 and 1 are supported")
    kappa = float(kappa)
    if kappa < 0 or not math.isfinite(kappa):
        raise ParameterError(f"kappa must be finite and >= 0, got {kappa}")
    if kappa == 0.0:
        return 0.0 if order == 0 else -math.inf
    if kappa < _BESSEL_SWITCH:
        return _log_bessel_series(order, kappa)
    return _log_bessel_asymptotic(order, kappa)


def log_bessel_i0(kappa):
    return log_bessel_i(0, kappa)


# ---------------------------------------------------------------------------
# von Mises
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VonMisesParams:
    """Concentration ``kappa`` and mode ``theta0`` of a von Mises law."""

    kappa: float
    theta0: float = 0.0

    def __post_init__(self):
        if not (self.kappa >= 0) or not math.isfinite(self.kappa):
            raise ParameterError(f"kappa must be finite and >= 0, got {self.kappa}")
        object.__setattr__(self, "theta0", wrap_angle(self.theta0))

    @property
    def log_normalizer(self):
        """ln(2 pi I0(kappa))."""
        return LOG_2PI + log_bessel_i0(self.kappa)


def vm_log_density(x, p: VonMisesParams):
    """kappa*cos(x - theta0) - ln(2 pi I0(kappa)), elementwise over ``x``."""
    x = wrap_angle(x)
    return p.kappa * np.cos(x - p.theta0) - p.log_normalizer


def vm_circular_variance(kappa):
    """1 - I1(kappa)/I0(kappa)."""
    if kappa == 0:
        return 1.0
    return 1.0 - math.exp(log_bessel_i(1, kappa) - log_bessel_i0(kappa))


def vm_sample(p: VonMisesParams, rng: np.random.Generator, size=None):
    """Draw from VM(kappa, theta0) with the Best-Fisher rejection sampler.

    Returns a float when ``size`` is None, otherwise an array of that shape.
    Output is wrapped to [-pi, pi).
    """
    shape = () if size is None else (size if isinstance(size, tuple) else (size,))
    n = int(np.prod(shape, dtype=int))
    kappa = p.kappa
    if kappa == 0.0:
        out = rng.uniform(-np.pi, np.pi, size=n)
    else:
        if kappa < 1e-5:
            r = 1.0 / kappa + kappa
        else:
            tau = 1.0 + math.sqrt(1.0 + 4.0 * kappa * kappa)
            rho = (tau - math.sqrt(2.0 * tau)) / (2.0 * kappa)
            r = (1.0 + rho * rho) / (2.0 * rho)
        out = np.empty(n)
        todo = np.arange(n)
        while todo.size:
            k = todo.size
            u1, u2, u3 = rng.random(k), rng.random(k), rng.random(k)
            z = np.cos(np.pi * u1)
            f = (1.0 + r * z) / (r + z)
            c = kappa * (r - f)
            with np.errstate(divide="ignore", invalid="ignore"):
                accept = (c * (2.0 - c) - u2 > 0) | (np.log(c / u2) + 1.0 - c >= 0)
            idx = todo[accept]
            theta = np.sign(u3[accept] - 0.5) * np.arccos(np.clip(f[accept], -1.0, 1.0))
            out[idx] = theta
            todo = todo[~accept]
        out = out + p.theta0
    out = wrap_angle(out)
    if size is None:
        return float(np.asarray(out).reshape(-1)[0])
    return np.asarray(out).reshape(shape)


def circular_mean(angles, weights=None, axis=0):
    """Mean direction atan2(sum w sin, sum w cos), wrapped to [-pi, pi).

    Raises CircularMeanUndefined when both weighted sums fall below
    1e-9 times the total weight.
    """
    angles = np.asarray(angles, dtype=float)
    if angles.size == 0:
        raise ValueError("circular_mean of an empty sequence")
    if weights is None:
        s = np.sum(np.sin(angles), axis=axis)
        c = np.sum(np.cos(angles), axis=axis)
        total = angles.shape[axis] if angles.ndim else 1
    else:
        w = np.asarray(weights, dtype=float)
        if angles.ndim > 1 and w.ndim == 1:
            w = np.expand_dims(w, tuple(i for i in range(angles.ndim) if i != axis))
        s = np.sum(w * np.sin(angles), axis=axis)
        c = np.sum(w * np.cos(angles), axis=axis)
        total = float(np.sum(weights))
    tol = 1e-9 * total
    if np.any((np.abs(s) < tol) & (np.abs(c) < tol)):
        raise CircularMeanUndefined("sine and cosine sums both vanish")
    return wrap_angle(np.arctan2(s, c))


def circular_rmse(estimate, truth, axis=0):
    """Root-mean-square of wrapped differences."""
    d = wrap_angle(np.asarray(estimate) - np.asarray(truth))
    return np.sqrt(np.mean(np.square(d), axis=axis))


# ---------------------------------------------------------------------------
# Bingham
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BinghamParams:
    """Orthogonal ``D`` and concentration eigenvalues ``lam``.

    Use :meth:`canonical` to obtain the sorted, zero-max representation.
    """

    D: np.ndarray = field(default_factory=lambda: np.eye(4))
    lam: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        D = np.array(self.D, dtype=float)
        lam = np.array(self.lam, dtype=float).reshape(-1)
        if D.shape != (4, 4) or lam.shape != (4,):
            raise ParameterError("Bingham parameters need a 4x4 D and 4 eigenvalues")
        if not np.allclose(D.T @ D, np.eye(4), atol=1e-8):
            raise ParameterError("D must be orthogonal")
        if not np.all(np.isfinite(lam)):
            raise ParameterError("lambda must be finite")
        D.flags.writeable = False
        lam.flags.writeable = False
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "lam", lam)

    def canonical(self) -> "BinghamParams":
        order = np.argsort(self.lam, kind="stable")
        lam = self.lam[order]
        return BinghamParams(self.D[:, order], lam - lam[-1])

    @property
    def is_canonical(self):
        lam = self.lam
        return bool(np.all(np.diff(lam) >= 0) and lam[-1] == 0.0)

    @property
    def matrix(self):
        """D diag(lam) D^T."""
        return (self.D * self.lam) @ self.D.T


def _check_unit(x, name="x"):
    n = np.linalg.norm(x, axis=-1)
    if np.any(np.abs(n - 1.0) > _UNIT_TOL):
        raise DomainError(f"{name} must be unit-norm (got norm {np.max(np.abs(n - 1.0)) + 1:.6g})")


def bingham_unnorm_log_density(x, p: BinghamParams):
    """x^T D diag(lam) D^T x for unit quaternions ``x`` of shape (..., 4)."""
    x = np.asarray(x, dtype=float)
    _check_unit(x)
    # explicit accumulation keeps results independent of batch size
    y = sum(x[..., i, None] * p.D[i] for i in range(4))
    return np.sum(p.lam * y * y, axis=-1)


def bingham_log_normalizer(lam, epsrel=1e-10):
    """ln C(lam), C(lam) = integral over S^3 of exp(sum lam_i x_i^2).

    The azimuth over the last two coordinates is integrated in closed form
    (a Bessel I0 term); the two remaining polar coordinates use nested
    adaptive quadrature.
    """
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if lam.shape != (4,) or not np.all(np.isfinite(lam)):
        raise ParameterError("lambda must be 4 finite values")
    shift = float(lam.max())
    l1, l2, l3, l4 = np.sort(lam - shift)

    def azimuth(r):
        # int_0^{2pi} exp(r (l3 cos^2 + l4 sin^2)) dphi
        return TWO_PI * math.exp(r * l4) * special.i0e(0.5 * r * (l4 - l3))

    errs = []

    def inner(s2):
        # int_{-1}^{1} exp(s2 l2 u^2) azimuth(s2 (1-u^2)) du, even in u
        val, err = integrate.quad(
            lambda u: math.exp(s2 * l2 * u * u) * azimuth(s2 * (1.0 - u * u)),
            0.0, 1.0, epsabs=0.0, epsrel=epsrel, limit=200,
        )
        errs.append(err / max(val, 1e-300))
        return 2.0 * val

    def outer(t):
        s2 = 1.0 - t * t
        return math.sqrt(s2) * math.exp(l1 * t * t) * inner(s2)

    val, err = integrate.quad(outer, 0.0, 1.0, epsabs=0.0, epsrel=epsrel, limit=200)
    val *= 2.0
    if not (val > 0 and math.isfinite(val)):
        raise NumericalError(f"Bingham normalizer quadrature returned {val}")
    rel = 2.0 * err / val + max(errs, default=0.0)
    if rel > 1e-6:
        raise NumericalError(f"Bingham normalizer quadrature did not converge (rel err {rel:.2e})")
    return math.log(val) + shift


# ---------------------------------------------------------------------------
# Gaussian
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianParams:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.array(self.mu, dtype=float))
        sigma = np.atleast_2d(np.array(self.sigma, dtype=float))
        m = mu.shape[0]
        if mu.ndim != 1 or sigma.shape != (m, m):
            raise ParameterError(f"sigma must be {m}x{m} to match mu")
        if not np.allclose(sigma, sigma.T):
            raise ParameterError("sigma must be symmetric")
        try:
            chol = np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError as exc:
            raise ParameterError("sigma is not positive definite") from exc
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_chol_inv", linalg.solve_triangular(chol, np.eye(m), lower=True))
        log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
        object.__setattr__(self, "_log_norm", -0.5 * (m * LOG_2PI + log_det))

    @property
    def dim(self):
        return self.mu.shape[0]

    @property
    def log_mode_density(self):
        return self._log_norm


def gaussian_log_density(x, p: GaussianParams):
    """Multivariate normal log-density; ``x`` has shape (..., m)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != p.dim:
        raise ParameterError(f"x has dimension {x.shape[-1]}, expected {p.dim}")
    d = x - p.mu
    # whitened residual L^{-1} d, accumulated column by column (no BLAS)
    z = sum(d[..., j, None] * p._chol_inv[:, j] for j in range(p.dim))
    out = p._log_norm - 0.5 * np.sum(z * z, axis=-1)
    return out if x.ndim > 1 else float(out)
