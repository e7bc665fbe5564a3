"""Latent conditional distributions used as mixture components.

Three kinds are supported:

``gaussian``
    normal linear regression, ``y ~ N(x'beta, sigma2)``
``poisson``
    log-linear Poisson regression with exposure, ``y ~ Po(a * exp(x'beta))``
``zeromass``
    point mass at zero (zero-inflation component), no parameters

Each family evaluates its log-density and fits itself by weighted maximum
likelihood. The fitting routines work on *segments*: contiguous row blocks
that are fit independently in one vectorized pass, so that per-cluster
mixtures can be estimated for all clusters at once. A single fit is just one
segment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import ClassVar, Sequence

import numpy as np
from scipy.special import gammaln

GAUSSIAN = "gaussian"
POISSON = "poisson"
ZEROMASS = "zeromass"
KINDS = (GAUSSIAN, POISSON, ZEROMASS)

SIGMA2_FLOOR = 1e-8
# a component whose total weight is below this fraction of the rows is "dying"
WEIGHT_MASS_FLOOR = 1e-6

IRLS_MAX_ITER = 100
IRLS_SCORE_TOL = 1e-8
IRLS_DEVIANCE_RTOL = 1e-10
_MAX_HALVINGS = 40


class FamilyError(ArithmeticError):
    """Base class for fitting failures of a single component."""


class DegenerateComponent(FamilyError):
    """Total weight on a component is below the weight-mass floor."""


class RankError(FamilyError):
    """The weighted design matrix is singular."""


class ConvergenceError(FamilyError):
    """IRLS did not converge; ``family`` holds the best iterate found."""

    def __init__(self, msg: str, family: ComponentFamily | None = None):
        super().__init__(msg)
        self.family = family


# --------------------------------------------------------------------------- #
# Family types
# --------------------------------------------------------------------------- #


class ComponentFamily:
    kind: ClassVar[str]

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def logpdf(self, y, X, offset=None) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Gaussian(ComponentFamily):
    beta: np.ndarray
    sigma2: float
    kind: ClassVar[str] = GAUSSIAN

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).reshape(-1))
        object.__setattr__(self, "sigma2", float(self.sigma2))
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    @property
    def dim(self) -> int:
        return self.beta.shape[0] + 1

    def logpdf(self, y, X, offset=None) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        r = y - X @ self.beta
        return -0.5 * np.log(2 * np.pi * self.sigma2) - 0.5 * r * r / self.sigma2

    def to_dict(self) -> dict:
        return {"kind": self.kind, "beta": self.beta.tolist(), "sigma2": self.sigma2}

    def __eq__(self, other):
        return (isinstance(other, Gaussian) and np.array_equal(self.beta, other.beta)
                and self.sigma2 == other.sigma2)


@dataclass(frozen=True, eq=False)
class Poisson(ComponentFamily):
    beta: np.ndarray
    kind: ClassVar[str] = POISSON

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).reshape(-1))

    @property
    def dim(self) -> int:
        return self.beta.shape[0]

    def logpdf(self, y, X, offset=None) -> np.ndarray:
        y = _check_counts(y)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        log_a = 0.0 if offset is None else np.log(np.asarray(offset, dtype=float))
        eta = X @ self.beta + log_a
        return y * eta - np.exp(eta) - gammaln(y + 1)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "beta": self.beta.tolist()}

    def __eq__(self, other):
        return isinstance(other, Poisson) and np.array_equal(self.beta, other.beta)


@dataclass(frozen=True)
class ZeroMass(ComponentFamily):
    kind: ClassVar[str] = ZEROMASS

    @property
    def dim(self) -> int:
        return 0

    def logpdf(self, y, X=None, offset=None) -> np.ndarray:
        y = _check_counts(y)
        return np.where(y == 0, 0.0, -np.inf)

    def to_dict(self) -> dict:
        return {"kind": self.kind}


def _check_counts(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise TypeError("count families need nonnegative integer responses")
    return y


def from_dict(d: dict) -> ComponentFamily:
    kind = d["kind"]
    if kind == GAUSSIAN:
        return Gaussian(np.asarray(d["beta"]), d["sigma2"])
    if kind == POISSON:
        return Poisson(np.asarray(d["beta"]))
    if kind == ZEROMASS:
        return ZeroMass()
    raise ValueError(f"unknown family kind {kind!r}")


def log_density(family: ComponentFamily, y, x, offset=1.0):
    """Log-density (or log-mass) of ``family`` at ``y`` given covariates ``x``.

    Scalar inputs give a scalar; arrays are evaluated row-wise.
    """
    scalar = np.ndim(y) == 0
    out = family.logpdf(np.atleast_1d(y), np.atleast_2d(x), np.atleast_1d(offset))
    return float(out[0]) if scalar else out


def param_dim(family: ComponentFamily) -> int:
    return family.dim


def parse_families(spec: str) -> list[str]:
    """Parse ``"zeromass+poisson+poisson"`` into a list of kinds."""
    kinds = [k.strip().lower() for k in spec.split("+") if k.strip()]
    aliases = {"normal": GAUSSIAN, "zero": ZEROMASS, "zero-mass": ZEROMASS}
    kinds = [aliases.get(k, k) for k in kinds]
    for k in kinds:
        if k not in KINDS:
            raise ValueError(f"unknown family kind {k!r}; expected one of {KINDS}")
    if not kinds:
        raise ValueError("empty family specification")
    if kinds.count(ZEROMASS) > 1:
        raise ValueError("at most one zero-mass component is allowed")
    return kinds


def expand_kinds(spec: str | Sequence[str], L: int) -> list[str]:
    """Component kinds for an ``L``-component model built from ``spec``.

    A homogeneous spec (``gaussian``) is repeated ``L`` times. A spec with a
    leading zero-mass component keeps it pinned first and fills the remaining
    ``L - 1`` slots with the last listed kind. A spec that already has ``L``
    entries is returned as is.
    """
    kinds = parse_families(spec) if isinstance(spec, str) else list(spec)
    if len(kinds) == L:
        return kinds
    if kinds[0] == ZEROMASS and len(kinds) > 1:
        if L < 1:
            raise ValueError("L must be positive")
        if L == 1:
            return [ZEROMASS]
        return [ZEROMASS] + [kinds[-1]] * (L - 1)
    if len(set(kinds)) == 1:
        return [kinds[0]] * L
    raise ValueError(f"cannot expand mixed family spec {kinds} to L={L}")


def unfitted(kind: str, p: int) -> ComponentFamily:
    """A placeholder family of ``kind`` (zero coefficients, unit variance)."""
    if kind == GAUSSIAN:
        return Gaussian(np.zeros(p), 1.0)
    if kind == POISSON:
        return Poisson(np.zeros(p))
    return ZeroMass()


# --------------------------------------------------------------------------- #
# Row-wise log densities with per-row parameters (used by batched EM)
# --------------------------------------------------------------------------- #


def logpdf_rows(kind, y, X, log_offset, beta_rows=None, sigma2_rows=None, lgy=None):
    """Log-density where every row carries its own parameters."""
    if kind == ZEROMASS:
        return np.where(y == 0, 0.0, -np.inf)
    eta = np.einsum("np,np->n", X, beta_rows)
    if kind == GAUSSIAN:
        r = y - eta
        return -0.5 * np.log(2 * np.pi * sigma2_rows) - 0.5 * r * r / sigma2_rows
    eta = eta + log_offset
    if lgy is None:
        lgy = gammaln(y + 1)
    with np.errstate(over="ignore"):
        return y * eta - np.exp(eta) - lgy


# --------------------------------------------------------------------------- #
# Segment-wise weighted fitting
# --------------------------------------------------------------------------- #

# status codes returned by the segment solvers
OK, RANK_DEFICIENT, NOT_CONVERGED = 0, 1, 2


def _segment_ids(starts: np.ndarray, n: int) -> np.ndarray:
    sizes = np.diff(np.append(starts, n))
    return np.repeat(np.arange(len(starts)), sizes)


def _singular(H: np.ndarray) -> np.ndarray:
    ev = np.linalg.eigvalsh(H)
    top = np.abs(ev).max(axis=-1)
    return ~(ev.min(axis=-1) > 1e-12 * top) | ~np.isfinite(top) | (top == 0)


def gaussian_fit_segments(y, X, w, starts, seg=None, xx=None):
    """Weighted least squares per segment through the normal equations.

    ``xx`` optionally holds the precomputed row outer products ``X_r X_r'``.
    Returns ``(beta, sigma2, status)`` with shapes (S, p), (S,), (S,).
    """
    n, p = X.shape
    if seg is None:
        seg = _segment_ids(starts, n)
    if xx is None:
        xx = X[:, :, None] * X[:, None, :]
    wx = X * w[:, None]
    XtWX = np.add.reduceat(w[:, None, None] * xx, starts, axis=0)
    XtWy = np.add.reduceat(wx * y[:, None], starts, axis=0)
    sw = np.add.reduceat(w, starts)
    status = np.where(_singular(XtWX), RANK_DEFICIENT, OK)
    beta = np.zeros((len(starts), p))
    ok = status == OK
    if ok.any():
        beta[ok] = np.linalg.solve(XtWX[ok], XtWy[ok][..., None])[..., 0]
    r = y - np.einsum("np,np->n", X, beta[seg])
    with np.errstate(invalid="ignore", divide="ignore"):
        sigma2 = np.add.reduceat(w * r * r, starts) / sw
    sigma2 = np.maximum(np.nan_to_num(sigma2, nan=SIGMA2_FLOOR), SIGMA2_FLOOR)
    return beta, sigma2, status


def _poisson_ll(y, X, log_a, w, beta, seg, starts):
    eta = np.einsum("np,np->n", X, beta[seg]) + log_a
    with np.errstate(over="ignore", invalid="ignore"):
        mu = np.exp(eta)
        ll = np.add.reduceat(w * (y * eta - mu), starts)
    ll = np.where(np.isfinite(ll), ll, -np.inf)
    return ll, mu


def _poisson_deviance(y, mu, w, starts):
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        t = np.where(y > 0, y * np.log(y / mu), 0.0) - (y - mu)
        return 2.0 * np.add.reduceat(np.where(w > 0, w * t, 0.0), starts)


def poisson_start(y, X, log_a, w, starts):
    """Crude per-segment starting values from a weighted LS fit of log rates."""
    z = np.log(y + 0.5) - log_a
    beta, _, status = gaussian_fit_segments(z, X, w + 1e-12, starts)
    return beta


def poisson_fit_segments(y, X, log_a, w, starts, beta0=None, seg=None,
                         max_iter=IRLS_MAX_ITER, xx=None):
    """Weighted Poisson maximum likelihood per segment by damped Newton (IRLS).

    Every iteration takes a full Newton step and halves it until the weighted
    log-likelihood does not decrease, so the iterates are monotone from the
    starting value. A segment stops when its weighted score has max-norm below
    ``IRLS_SCORE_TOL`` or its relative deviance change drops below
    ``IRLS_DEVIANCE_RTOL``.

    Returns ``(beta, status)``.
    """
    n, p = X.shape
    S = len(starts)
    if seg is None:
        seg = _segment_ids(starts, n)
    beta = poisson_start(y, X, log_a, w, starts) if beta0 is None else np.array(beta0, dtype=float)
    status = np.full(S, NOT_CONVERGED)
    ll, mu = _poisson_ll(y, X, log_a, w, beta, seg, starts)
    if not np.all(np.isfinite(ll)):
        # warm start overflowed; fall back to the crude start for those segments
        bad = ~np.isfinite(ll)
        beta[bad] = poisson_start(y, X, log_a, w, starts)[bad]
        ll, mu = _poisson_ll(y, X, log_a, w, beta, seg, starts)
    dev = _poisson_deviance(y, mu, w, starts)
    if xx is None:
        xx = X[:, :, None] * X[:, None, :]
    active = np.ones(S, dtype=bool)
    for _ in range(max_iter):
        wmu = w * mu
        score = np.add.reduceat((w * (y - mu))[:, None] * X, starts, axis=0)
        conv = np.abs(score).max(axis=1) < IRLS_SCORE_TOL
        status[active & conv] = OK
        active &= ~conv
        if not active.any():
            break
        H = np.add.reduceat(wmu[:, None, None] * xx, starts, axis=0)
        sing = active & _singular(H)
        status[sing] = RANK_DEFICIENT
        active &= ~sing
        if not active.any():
            break
        step = np.zeros_like(beta)
        step[active] = np.linalg.solve(H[active], score[active][..., None])[..., 0]
        t = np.ones(S)
        pending = active.copy()
        new_beta = beta.copy()
        new_ll = ll.copy()
        new_mu = mu
        for _h in range(_MAX_HALVINGS):
            trial = beta + t[:, None] * step
            tll, tmu = _poisson_ll(y, X, log_a, w, trial, seg, starts)
            accept = pending & (tll >= ll)
            new_beta[accept] = trial[accept]
            new_ll[accept] = tll[accept]
            if accept.any():
                rows = accept[seg]
                new_mu = np.where(rows, tmu, new_mu)
            pending &= ~accept
            if not pending.any():
                break
            t[pending] *= 0.5
        # segments where no step improved are at a numerical optimum
        stuck = pending
        status[stuck] = OK
        active &= ~stuck
        beta, ll, mu = new_beta, new_ll, new_mu
        new_dev = _poisson_deviance(y, mu, w, starts)
        with np.errstate(invalid="ignore"):
            # a non-finite deviance (rates underflowing to zero) is never "small"
            small = np.abs(new_dev - dev) <= IRLS_DEVIANCE_RTOL * (np.abs(new_dev) + 1e-300)
        status[active & small] = OK
        active &= ~small
        dev = new_dev
        if not active.any():
            break
    return beta, status


# --------------------------------------------------------------------------- #
# Single-problem fitting
# --------------------------------------------------------------------------- #


def weighted_fit(kind: str, y, X, offset, w, warm_start: ComponentFamily | None = None,
                 mass_floor: float | None = None) -> ComponentFamily:
    """Maximize ``sum(w * log h(y | X))`` over the parameters of ``kind``.

    Raises
    ------
    DegenerateComponent
        if ``sum(w)`` is below ``mass_floor`` (default
        ``WEIGHT_MASS_FLOOR * len(y)``).
    RankError
        if the weighted design matrix is singular.
    ConvergenceError
        if IRLS does not meet its tolerances within ``IRLS_MAX_ITER``
        iterations; the exception carries the best iterate.
    """
    y = np.asarray(y, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    w = np.asarray(w, dtype=float)
    if w.shape != y.shape or X.shape[0] != y.shape[0]:
        raise ValueError("y, X and w must have matching row counts")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    if kind == ZEROMASS:
        return ZeroMass()
    floor = WEIGHT_MASS_FLOOR * len(y) if mass_floor is None else mass_floor
    total = w.sum()
    if not total > 0 or total < floor:
        raise DegenerateComponent(f"component weight mass {total:.3g} below floor {floor:.3g}")

    if kind == GAUSSIAN:
        sw = np.sqrt(w)
        beta, _, rank, _ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
        if rank < X.shape[1]:
            raise RankError("weighted design matrix is rank deficient")
        r = y - X @ beta
        sigma2 = max(float(np.sum(w * r * r) / total), SIGMA2_FLOOR)
        return Gaussian(beta, sigma2)

    if kind == POISSON:
        _check_counts(y)
        if np.linalg.matrix_rank(X[w > 0]) < X.shape[1]:
            raise RankError("weighted design matrix is rank deficient")
        log_a = np.zeros_like(y) if offset is None else np.log(np.broadcast_to(offset, y.shape))
        beta0 = None
        if isinstance(warm_start, Poisson):
            beta0 = warm_start.beta[None, :]
        starts = np.zeros(1, dtype=np.intp)
        beta, status = poisson_fit_segments(y, X, log_a, w, starts, beta0=beta0)
        if status[0] == RANK_DEFICIENT:
            raise RankError("weighted design matrix is singular")
        if status[0] == NOT_CONVERGED:
            raise ConvergenceError("IRLS did not converge", Poisson(beta[0]))
        return Poisson(beta[0])

    raise ValueError(f"unknown family kind {kind!r}")
