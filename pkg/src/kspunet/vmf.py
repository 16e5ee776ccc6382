"""von Mises-Fisher distributions on the unit sphere S^{d-1}.

Densities are evaluated in log space. The modified Bessel function of the
first kind is computed from its power series (log-sum-exp) for moderate
concentration and from the exponentially scaled Hankel expansion above
``SERIES_SWITCH``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import DimensionMismatch, OutOfRange, SamplerStall

KAPPA_MIN = 1e-3
KAPPA_MAX = 1e4
SERIES_SWITCH = 50.0
MAX_REJECTIONS = 1000


@dataclass(frozen=True)
class VmfParams:
    """Mean direction ``mu`` (unit vector of length d) and concentration ``kappa``."""

    mu: np.ndarray
    kappa: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).ravel()
        if mu.size < 2:
            raise DimensionMismatch("vMF needs dimension d >= 2")
        if abs(np.linalg.norm(mu) - 1.0) > 1e-10:
            raise ValueError(f"mean direction must be a unit vector (norm {np.linalg.norm(mu)!r})")
        _check_kappa(self.kappa)
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "kappa", float(self.kappa))

    @property
    def dim(self) -> int:
        return self.mu.size


def _check_kappa(kappa) -> None:
    k = np.asarray(kappa, dtype=np.float64)
    if not np.all(np.isfinite(k)) or np.any(k < KAPPA_MIN) or np.any(k > KAPPA_MAX):
        raise OutOfRange(f"kappa={kappa!r} outside [{KAPPA_MIN}, {KAPPA_MAX}]")


def _log_iv_series(nu: float, z: float) -> float:
    """log I_nu(z) from the power series, summed in log space."""
    n_terms = int(z / 2 + 12 * np.sqrt(z) + 40)
    m = np.arange(n_terms, dtype=np.float64)
    terms = (2 * m + nu) * np.log(z / 2) - gammaln(m + 1) - gammaln(m + nu + 1)
    return float(logsumexp(terms))


def _log_iv_asymptotic(nu: float, z: float) -> float | None:
    """log I_nu(z) from the large-argument expansion, or None if it does not converge."""
    mu4 = 4.0 * nu * nu
    total, term = 1.0, 1.0
    for k in range(1, 80):
        nxt = -term * (mu4 - (2 * k - 1) ** 2) / (8.0 * k * z)
        if nxt == 0.0:
            break
        if abs(nxt) > abs(term):
            return None  # divergent tail before reaching full precision
        total += nxt
        term = nxt
        if abs(term) < 1e-17 * abs(total):
            break
    else:
        return None
    return z - 0.5 * np.log(2 * np.pi * z) + float(np.log(total))


def log_bessel_iv(nu: float, z: float) -> float:
    if z <= SERIES_SWITCH:
        return _log_iv_series(nu, z)
    value = _log_iv_asymptotic(nu, z)
    # the expansion needs z large relative to nu^2; high orders fall back to the series
    return _log_iv_series(nu, z) if value is None else value


def log_normalizer(d: int, kappa: float) -> float:
    """log of kappa^{d/2-1} / ((2 pi)^{d/2} I_{d/2-1}(kappa))."""
    if d < 2:
        raise DimensionMismatch(f"dimension must be >= 2, got {d}")
    _check_kappa(kappa)
    nu = d / 2.0 - 1.0
    return nu * np.log(kappa) - (d / 2.0) * np.log(2 * np.pi) - log_bessel_iv(nu, kappa)


def log_density(params: VmfParams, x) -> np.ndarray | float:
    """Log density at ``x``; accepts a single vector or an ``(n, d)`` array."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.dim:
        raise DimensionMismatch(f"point has dimension {x.shape[-1]}, distribution {params.dim}")
    out = log_normalizer(params.dim, params.kappa) + params.kappa * (x @ params.mu)
    return float(out) if np.ndim(out) == 0 else out


def mean_resultant_length(d: int, kappa: float) -> float:
    """A_d(kappa) = I_{d/2}(kappa) / I_{d/2-1}(kappa), the mean of mu^T x."""
    _check_kappa(kappa)
    nu = d / 2.0 - 1.0
    return float(np.exp(log_bessel_iv(nu + 1, kappa) - log_bessel_iv(nu, kappa)))


def sample_axial(d: int, kappa: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw the coordinate w = mu^T x by Wood's rejection scheme."""
    dm1 = d - 1.0
    b = dm1 / (2.0 * kappa + np.sqrt(4.0 * kappa * kappa + dm1 * dm1))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + dm1 * np.log(1.0 - x0 * x0)
    out = np.empty(n)
    pending = np.arange(n)
    for _ in range(MAX_REJECTIONS):
        z = rng.beta(dm1 / 2.0, dm1 / 2.0, size=pending.size)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=pending.size)
        accept = kappa * w + dm1 * np.log(1.0 - x0 * w) - c >= np.log(u)
        out[pending[accept]] = w[accept]
        pending = pending[~accept]
        if pending.size == 0:
            return out
    raise SamplerStall(f"{pending.size} draws rejected {MAX_REJECTIONS} times (d={d}, kappa={kappa})")


def sample_tangent(d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform unit directions in R^{d-1} (the plane orthogonal to the pole)."""
    v = rng.standard_normal((n, d - 1))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def align_to_mean(mu: np.ndarray, w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Assemble ``(w, sqrt(1-w^2) v)`` around the north pole and reflect the pole onto ``mu``."""
    w = np.asarray(w)[:, None]
    x = np.concatenate([w, np.sqrt(np.clip(1.0 - w * w, 0.0, None)) * v], axis=1)
    u = -np.asarray(mu, dtype=np.float64).copy()
    u[0] += 1.0
    nu = np.linalg.norm(u)
    if nu > 1e-12:
        u /= nu
        x = x - 2.0 * np.outer(x @ u, u)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def sample(params: VmfParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` unit vectors from vMF(mu, kappa); returns an ``(n, d)`` array."""
    if n < 1:
        raise ValueError("n must be >= 1")
    d = params.dim
    w = sample_axial(d, params.kappa, n, rng)
    v = sample_tangent(d, n, rng)
    return align_to_mean(params.mu, w, v)


def kl_upper_bound(q: VmfParams, p: VmfParams) -> float:
    """Closed-form bound on KL(q || p) for two vMF distributions.

    Even dimensions are handled by appending a null coordinate to both means,
    which leaves mu_p^T mu_q unchanged and moves the computation to d + 1.
    """
    if q.dim != p.dim:
        raise DimensionMismatch(f"dimensions differ: {q.dim} vs {p.dim}")
    d = q.dim if q.dim % 2 == 1 else q.dim + 1
    k0, k1 = q.kappa, p.kappa
    cos = float(p.mu @ q.mu)
    half = (d - 1) // 2
    lower = half - 1
    i = np.arange(lower + 1, dtype=np.float64)
    partial_exp = float(np.exp(logsumexp(i * np.log(k0) - gammaln(i + 1))))
    xlogx = half * lower * np.log(lower) if lower > 0 else 0.0
    return (
        k0
        - k1 * cos
        + half * np.log(k0)
        + partial_exp
        - half * np.log(k1)
        + xlogx
        - lower**2
        + 1.0
    )


def kl_monte_carlo(q: VmfParams, p: VmfParams, n: int, rng: np.random.Generator, return_stderr: bool = False):
    """Sample estimate of KL(q || p) from ``n`` draws of ``q``.

    With ``return_stderr`` the standard error of the estimate is returned too.
    """
    if q.dim != p.dim:
        raise DimensionMismatch(f"dimensions differ: {q.dim} vs {p.dim}")
    x = sample(q, n, rng)
    diff = log_density(q, x) - log_density(p, x)
    est = float(diff.mean())
    if return_stderr:
        return est, float(diff.std(ddof=1) / np.sqrt(n))
    return est
