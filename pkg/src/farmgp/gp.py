"""Squared-exponential GP machinery over the distance axis.

The log infection rate ``g`` gets a zero-mean GP prior.  Only its values on a
small pseudo grid are sampled; values at the pairwise farm distances are the
conditional mean given the grid values (a linear map, the *projector*).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import mpmath
import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular

log = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_MAX = 1e-4
JITTER_FACTOR = 10.0

_LOG_2PI = math.log(2.0 * math.pi)


class FactorizationError(LinAlgError):
    """Cholesky failed even at the largest allowed jitter."""

    def __init__(self, jitters):
        self.jitters = list(jitters)
        super().__init__(f"covariance not positive definite; tried jitter {self.jitters}")


@dataclass(frozen=True)
class KernelParams:
    alpha: float
    length: float

    def __post_init__(self):
        if not self.alpha > 0 or not self.length > 0:
            raise ValueError(f"kernel needs alpha > 0 and length > 0, got {self.alpha}, {self.length}")


def sq_exp_kernel(d_i, d_j, params: KernelParams):
    """``alpha^2 exp(-(d_i - d_j)^2 / l^2)``, broadcasting over array inputs."""
    diff = np.subtract(d_i, d_j)
    return params.alpha ** 2 * np.exp(-(diff * diff) / params.length ** 2)


def kernel_matrix(x, y, params: KernelParams):
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    return sq_exp_kernel(x[:, None], y[None, :], params)


@dataclass(frozen=True)
class CovarianceMatrix:
    """Kernel matrix over ``points`` with its stabilised lower Cholesky factor.

    ``chol @ chol.T == matrix + jitter * I``.  All densities and draws use the
    jittered matrix.
    """

    points: np.ndarray
    params: KernelParams
    matrix: np.ndarray
    chol: np.ndarray
    jitter: float
    attempts: tuple = field(default=())
    log_det: float = field(default=math.nan, repr=False)

    @property
    def n(self):
        return len(self.points)

    def solve(self, b):
        return cho_solve((self.chol, True), b)

    def logdet(self):
        if math.isnan(self.log_det):
            return 2.0 * float(np.sum(np.log(np.diag(self.chol))))
        return self.log_det


def build_covariance(points, params: KernelParams, jitter_start=JITTER_START,
                     jitter_max=JITTER_MAX, factor=JITTER_FACTOR) -> CovarianceMatrix:
    """Factorise the kernel matrix over ``points``.

    Jitter starts at ``jitter_start * alpha^2`` on the diagonal and grows by
    ``factor`` until the Cholesky factorisation succeeds; past
    ``jitter_max * alpha^2`` a :class:`FactorizationError` carries the
    sequence that was tried.
    """
    points = np.asarray(points, dtype=float).ravel()
    if not np.all(np.isfinite(points)):
        raise ValueError("covariance points must be finite")
    K = kernel_matrix(points, points, params)
    scale = params.alpha ** 2
    eye = np.eye(len(points))
    tried = []
    rel = jitter_start
    while rel <= jitter_max * (1 + 1e-12):
        jitter = rel * scale
        tried.append(jitter)
        try:
            L = cholesky(K + jitter * eye, lower=True, check_finite=False)
        except LinAlgError:
            rel *= factor
            continue
        logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        return CovarianceMatrix(points, params, K, L, jitter, tuple(tried), logdet)
    raise FactorizationError(tried)


def sample_prior(cov: CovarianceMatrix, rng, size=None):
    """Zero-mean draw(s) with covariance ``cov``; shape ``(n,)`` or ``(size, n)``."""
    if size is None:
        return cov.chol @ rng.standard_normal(cov.n)
    z = rng.standard_normal((size, cov.n))
    return z @ cov.chol.T


def log_density(values, cov: CovarianceMatrix) -> float:
    values = np.asarray(values, dtype=float)
    if values.shape != (cov.n,):
        raise ValueError(f"expected {cov.n} values, got shape {values.shape}")
    w = solve_triangular(cov.chol, values, lower=True, check_finite=False)
    return -0.5 * (cov.n * _LOG_2PI + cov.logdet() + float(w @ w))


def build_projector(d, d_bar, params: KernelParams, cov: CovarianceMatrix | None = None):
    """Matrix ``Sigma(d, d_bar) Sigma(d_bar)^-1`` mapping grid values to ``d``.

    Rows for distances that coincide with a knot are that knot's unit vector:
    the stabilising jitter is treated as a nugget shared by identical inputs,
    so the grid value is reproduced exactly there.  The map does not depend
    on ``alpha`` (it cancels), so one projector serves any ``alpha`` at a
    given length scale.

    Parameters
    ----------
    d : array_like
        Target distances, any shape; rows of the result follow ``d.ravel()``.
    d_bar : array_like
        Pseudo grid.
    cov : CovarianceMatrix, optional
        Factorisation of the grid covariance, reused when given.
    """
    d = np.asarray(d, dtype=float).ravel()
    d_bar = np.asarray(d_bar, dtype=float).ravel()
    if cov is None:
        cov = build_covariance(d_bar, params)
    cross = kernel_matrix(d, d_bar, params)
    P = cov.solve(cross.T).T
    hit = np.searchsorted(d_bar, d)
    hit = np.minimum(hit, len(d_bar) - 1)
    exact = d_bar[hit] == d
    if np.any(exact):
        rows = np.flatnonzero(exact)
        P[rows] = 0.0
        P[rows, hit[rows]] = 1.0
    return P


def project(projector, g_bar):
    return projector @ g_bar


@dataclass
class GpField:
    """Log-rate values on the pseudo grid and at the projected distances."""

    g_bar: np.ndarray
    projector: np.ndarray

    @property
    def g(self):
        return project(self.projector, self.g_bar)

    @property
    def beta(self):
        return np.exp(self.g)


def underrelaxed_propose(g_bar, delta, cov: CovarianceMatrix, rng):
    """Block proposal ``sqrt(1 - delta^2) g + delta nu`` with ``nu`` a prior draw."""
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    nu = sample_prior(cov, rng)
    return math.sqrt(1.0 - delta * delta) * np.asarray(g_bar) + delta * nu


def _proposal_logpdf(x, given, delta, cov, digits=40):
    # density of x under N(sqrt(1 - delta^2) given, delta^2 (L L^T)), evaluated in
    # extended precision: the covariance can be close to singular and the
    # quadratic form is divided by delta^2, so double rounding would swamp
    # the comparison with the prior-density route
    with mpmath.workdps(digits):
        d = mpmath.mpf(delta)
        c = mpmath.sqrt(1 - d * d)
        L = cov.chol
        n = cov.n
        w = []
        for i in range(n):
            acc = mpmath.mpf(x[i]) - c * mpmath.mpf(given[i])
            for k in range(i):
                acc -= mpmath.mpf(L[i, k]) * w[k]
            w.append(acc / mpmath.mpf(L[i, i]))
        quad = mpmath.fsum(v * v for v in w)
        logdet = 2 * mpmath.fsum(mpmath.log(mpmath.mpf(L[i, i])) for i in range(n))
        return -(n * mpmath.log(2 * mpmath.pi) + logdet + 2 * n * mpmath.log(d) + quad / (d * d)) / 2


def proposal_log_ratio_identity(g, g_prime, delta, cov: CovarianceMatrix):
    """Both sides of the proposal/prior cancellation for the block update.

    Returns ``(lhs, rhs)`` with ``lhs = log q(g | g') - log q(g' | g)`` from the
    Gaussian proposal densities and ``rhs = log N(g; 0, S) - log N(g'; 0, S)``.
    The two agree for every ``delta``, which is why the block update can be
    accepted on the likelihood ratio alone.
    """
    g = np.asarray(g, dtype=float)
    g_prime = np.asarray(g_prime, dtype=float)
    if g.shape != g_prime.shape or g.shape != (cov.n,):
        raise ValueError("g, g_prime and the covariance must have matching length")
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    lhs = float(_proposal_logpdf(g, g_prime, delta, cov) - _proposal_logpdf(g_prime, g, delta, cov))
    rhs = log_density(g, cov) - log_density(g_prime, cov)
    return lhs, rhs
