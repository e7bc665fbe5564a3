"""Generalized EM estimation of grouped heterogeneous mixture models.

The model for cluster ``i`` is

    f_i(y | x) = sum_k pi[g_i, k] * h_k(y | x; phi_k)

with shared components ``h_k``, a ``G x L`` matrix of group mixing
proportions ``pi`` and a group label ``g_i`` per cluster. One GEM iteration
computes responsibilities (E-step), refits every component by weighted
maximum likelihood, recomputes ``pi`` from the current labels, and finally
moves every cluster to its best group given the new ``pi``. With a
similarity matrix and ``xi > 0`` the label update also rewards agreement with
similar clusters' previous labels.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from . import families as fam
from .data import ClusteredDataset, SimilarityMatrix
from .families import (
    GAUSSIAN,
    POISSON,
    ZEROMASS,
    ComponentFamily,
    ConvergenceError,
    DegenerateComponent,
    RankError,
)
from .selection import information_criterion

log = logging.getLogger(__name__)

PI_FLOOR = 1e-8

# Responsibilities are an (N, L) array aligned with the dataset rows.
Responsibilities = np.ndarray


class ImpossibleObservation(ArithmeticError):
    """Every component assigns zero density to some observation."""

    def __init__(self, i: int, j: int):
        super().__init__(f"observation {j} of cluster {i} has zero density under every component")
        self.i, self.j = i, j


class InitializationError(RuntimeError):
    pass


# --------------------------------------------------------------------------- #
# Types
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class GhmParams:
    """Group labels ``gamma`` (m,), proportions ``pi`` (G, L) and components ``phi``."""

    gamma: np.ndarray
    pi: np.ndarray
    phi: tuple[ComponentFamily, ...]

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=np.intp).reshape(-1)
        pi = np.atleast_2d(np.asarray(self.pi, dtype=float))
        phi = tuple(self.phi)
        if len(phi) != pi.shape[1]:
            raise ValueError("phi length must equal the number of columns of pi")
        if gamma.size and (gamma.min() < 0 or gamma.max() >= pi.shape[0]):
            raise ValueError("group label out of range")
        if np.any(pi < 0) or not np.allclose(pi.sum(axis=1), 1.0, atol=1e-10, rtol=0):
            raise ValueError("rows of pi must be probability vectors")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "phi", phi)

    @property
    def G(self) -> int:
        return self.pi.shape[0]

    @property
    def L(self) -> int:
        return self.pi.shape[1]

    @property
    def kinds(self) -> list[str]:
        return [f.kind for f in self.phi]

    def cluster_pi(self) -> np.ndarray:
        """Mixing proportions of every cluster, shape (m, L)."""
        return self.pi[self.gamma]

    def permute_components(self, order: Sequence[int]) -> GhmParams:
        order = list(order)
        return GhmParams(self.gamma, self.pi[:, order], tuple(self.phi[k] for k in order))


@dataclass(frozen=True)
class FitConfig:
    G: int
    L: int
    xi: float = 0.0
    tol: float = 1e-6
    max_iter: int = 500
    seed: int = 0
    n_init_restarts: int = 10
    # update labels one cluster at a time using the freshest neighbour labels
    sequential_gamma: bool = False
    local_starts: int = 3

    def __post_init__(self):
        if self.G < 1 or self.L < 1:
            raise ValueError("G and L must be positive")
        if self.xi < 0:
            raise ValueError("xi must be nonnegative")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("tol must be positive and max_iter at least 1")


@dataclass
class FitResult:
    params: GhmParams
    loglik: float
    penalized_objective: float
    penalty: float
    ic: float
    trace: np.ndarray
    loglik_trace: np.ndarray
    responsibilities: Responsibilities
    n_iter: int
    converged: bool
    config: FitConfig
    kinds: list[str]
    m: int
    N: int
    cluster_ids: tuple[str, ...] = ()
    covariate_names: tuple[str, ...] = ()

    @property
    def G(self) -> int:
        return self.params.G

    @property
    def L(self) -> int:
        return self.params.L

    @property
    def dims(self) -> list[int]:
        return [f.dim for f in self.params.phi]

    def to_dict(self) -> dict:
        p = self.params
        return {
            "schema": "ghm-fit/1",
            "G": p.G,
            "L": p.L,
            "families": "+".join(self.kinds),
            "m": self.m,
            "N": self.N,
            "xi": self.config.xi,
            "seed": self.config.seed,
            "tol": self.config.tol,
            "max_iter": self.config.max_iter,
            "restarts": self.config.n_init_restarts,
            "cluster_ids": list(self.cluster_ids),
            "groups": {cid: int(g) for cid, g in zip(self.cluster_ids, p.gamma)},
            "gamma": p.gamma.tolist(),
            "pi": p.pi.tolist(),
            "components": [f.to_dict() for f in p.phi],
            "covariate_names": list(self.covariate_names),
            "loglik": self.loglik,
            "penalty": self.penalty,
            "penalized_objective": self.penalized_objective,
            "ic": self.ic,
            "trace": np.asarray(self.trace).tolist(),
            "n_iter": self.n_iter,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, d: dict) -> FitResult:
        if d.get("schema") != "ghm-fit/1":
            raise ValueError(f"unsupported fit schema {d.get('schema')!r}")
        params = GhmParams(
            np.asarray(d["gamma"], dtype=np.intp),
            np.asarray(d["pi"], dtype=float),
            tuple(fam.from_dict(c) for c in d["components"]),
        )
        config = FitConfig(G=d["G"], L=d["L"], xi=d["xi"], tol=d["tol"],
                           max_iter=d["max_iter"], seed=d["seed"],
                           n_init_restarts=d["restarts"])
        trace = np.asarray(d["trace"], dtype=float)
        return cls(
            params=params, loglik=d["loglik"], penalized_objective=d["penalized_objective"],
            penalty=d["penalty"], ic=d["ic"], trace=trace, loglik_trace=trace,
            responsibilities=np.empty((0, params.L)), n_iter=d["n_iter"],
            converged=d["converged"], config=config, kinds=fam.parse_families(d["families"]),
            m=d["m"], N=d["N"], cluster_ids=tuple(d["cluster_ids"]),
            covariate_names=tuple(d.get("covariate_names", ())),
        )


@dataclass(frozen=True)
class LocalFit:
    """A standard finite mixture fitted to one cluster."""

    pi: np.ndarray
    phi: tuple[ComponentFamily, ...]
    loglik: float
    n_iter: int
    converged: bool
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def aligned(self) -> LocalFit:
        """Components reordered for cross-cluster comparison.

        Within each kind, components are sorted by their first coefficient
        (the intercept when the design has one); a zero-mass component goes
        first.
        """
        if not self.ok:
            return self
        order = alignment_order(self.phi)
        return replace(self, pi=self.pi[order], phi=tuple(self.phi[k] for k in order))


def alignment_order(phi: Sequence[ComponentFamily]) -> list[int]:
    kinds = [f.kind for f in phi]
    slots = sorted(range(len(phi)), key=lambda k: (kinds[k] != ZEROMASS, k))
    # sort within each kind, keeping the slots each kind occupies
    order = list(slots)
    for kind in set(kinds) - {ZEROMASS}:
        pos = [s for s in range(len(slots)) if kinds[slots[s]] == kind]
        members = sorted((slots[s] for s in pos), key=lambda k: (phi[k].beta[0], k))
        for s, k in zip(pos, members):
            order[s] = k
    return order


# --------------------------------------------------------------------------- #
# E-step
# --------------------------------------------------------------------------- #


def component_log_densities(phi: Sequence[ComponentFamily], data: ClusteredDataset) -> np.ndarray:
    """``log h_k(y_ij | x_ij)`` for every row and component, shape (N, L)."""
    return np.column_stack([f.logpdf(data.y, data.X, data.offset) for f in phi])


def _floor_rows(pi: np.ndarray, floor: float = PI_FLOOR) -> np.ndarray:
    """Raise entries to ``floor`` and rescale the rest so rows sum to one."""
    pi = np.array(pi, dtype=float, copy=True)
    L = pi.shape[-1]
    if L == 1:
        return np.ones_like(pi)
    flat = pi.reshape(-1, L)
    for r in np.flatnonzero((flat < floor).any(axis=1)):
        row = flat[r]
        low = np.zeros(L, dtype=bool)
        for _ in range(L):
            new_low = low | (row < floor)
            free = ~new_low
            budget = 1.0 - floor * new_low.sum()
            s = row[free].sum()
            if s > 0:
                row[free] *= budget / s
            else:
                row[free] = budget / free.sum()
            row[new_low] = floor
            if np.array_equal(new_low, low):
                break
            low = new_low
    return pi


def _estep_from_logh(log_pi_rows: np.ndarray, logh: np.ndarray, data: ClusteredDataset):
    lw = log_pi_rows + logh
    mx = lw.max(axis=1)
    bad = ~np.isfinite(mx)
    if bad.any():
        r = int(np.flatnonzero(bad)[0])
        i = int(data.cluster[r])
        raise ImpossibleObservation(i, r - int(data.starts[i]))
    w = np.exp(lw - mx[:, None])
    s = w.sum(axis=1)
    w /= s[:, None]
    return w, mx + np.log(s)


def e_step(params: GhmParams, data: ClusteredDataset) -> Responsibilities:
    """Posterior component probabilities ``w[r, k]`` for every row ``r``."""
    logh = component_log_densities(params.phi, data)
    w, _ = _estep_from_logh(np.log(params.cluster_pi())[data.cluster], logh, data)
    return w


def loglik(params: GhmParams, data: ClusteredDataset) -> float:
    """Observed-data log-likelihood ``Q(Theta)``."""
    logh = component_log_densities(params.phi, data)
    _, row_ll = _estep_from_logh(np.log(params.cluster_pi())[data.cluster], logh, data)
    return float(row_ll.sum())


# --------------------------------------------------------------------------- #
# M-steps
# --------------------------------------------------------------------------- #


def m_step_phi(resp: Responsibilities, data: ClusteredDataset, kinds: Sequence[str],
               warm: GhmParams | Sequence[ComponentFamily] | None = None) -> list[ComponentFamily]:
    """Refit every component on all rows weighted by its responsibilities.

    A component whose total weight is below the mass floor, or whose weighted
    design is singular, keeps its ``warm`` value. If IRLS stops short of its
    tolerances the best (monotonically improved) iterate is used.
    """
    warm_phi = warm.phi if isinstance(warm, GhmParams) else warm
    floor = fam.WEIGHT_MASS_FLOOR * data.N
    out = []
    for k, kind in enumerate(kinds):
        prev = warm_phi[k] if warm_phi is not None else None
        try:
            f = fam.weighted_fit(kind, data.y, data.X, data.offset, resp[:, k],
                                 warm_start=prev, mass_floor=floor)
        except (DegenerateComponent, RankError):
            if prev is None:
                raise
            f = prev
        except ConvergenceError as e:
            f = e.family
        out.append(f)
    return out


def m_step_pi(resp: Responsibilities, gamma: np.ndarray, data: ClusteredDataset,
              G: int, L: int, floor: bool = True) -> np.ndarray:
    """Group proportions: summed responsibilities over group members / their rows.

    Groups with no members get the uniform row. With ``floor`` the rows are
    floored at ``PI_FLOOR`` and renormalized.
    """
    S = data.cluster_sums(resp)
    pi = np.full((G, L), 1.0 / L)
    gamma = np.asarray(gamma)
    for g in range(G):
        members = gamma == g
        if members.any():
            pi[g] = S[members].sum(axis=0) / data.sizes[members].sum()
    return _floor_rows(pi) if floor else pi


def penalty(gamma: np.ndarray, similarity: SimilarityMatrix | None) -> float:
    """``sum_{i<i'} s_ii' * 1{g_i == g_i'}``."""
    if similarity is None:
        return 0.0
    gamma = np.asarray(gamma)
    same = gamma[:, None] == gamma[None, :]
    return float(0.5 * np.sum(similarity.s * same))


def gamma_scores(resp: Responsibilities, pi: np.ndarray, data: ClusteredDataset,
                 similarity: SimilarityMatrix | None = None, xi: float = 0.0,
                 gamma_prev: np.ndarray | None = None) -> np.ndarray:
    """Label-update objective for every (cluster, group), shape (m, G)."""
    S = data.cluster_sums(resp)
    score = S @ np.log(pi).T
    if xi > 0:
        if similarity is None or gamma_prev is None:
            raise ValueError("penalized label update needs a similarity matrix and previous labels")
        onehot = np.eye(pi.shape[0])[np.asarray(gamma_prev)]
        score = score + xi * (similarity.s @ onehot)
    return score


def m_step_gamma(resp: Responsibilities, pi: np.ndarray, data: ClusteredDataset,
                 similarity: SimilarityMatrix | None = None, xi: float = 0.0,
                 gamma_prev: np.ndarray | None = None, sequential: bool = False) -> np.ndarray:
    """Move each cluster to its highest-scoring group; ties go to the smaller label.

    Neighbour labels in the penalty are the previous labels of all clusters
    (simultaneous update) unless ``sequential`` is set, in which case clusters
    are visited in index order and see already-updated labels.
    """
    if xi > 0 and sequential:
        S = data.cluster_sums(resp)
        base = S @ np.log(pi).T
        cur = np.array(gamma_prev, dtype=np.intp, copy=True)
        G = pi.shape[0]
        for i in range(data.m):
            agree = np.bincount(cur, weights=similarity.s[i], minlength=G)
            cur[i] = int(np.argmax(base[i] + xi * agree))
        return cur
    score = gamma_scores(resp, pi, data, similarity, xi, gamma_prev)
    return np.argmax(score, axis=1).astype(np.intp)


# --------------------------------------------------------------------------- #
# Local (per-cluster) finite mixtures
# --------------------------------------------------------------------------- #


def _min_rows(kinds: Sequence[str], p: int) -> int:
    dims = [0 if k == ZEROMASS else (p + 1 if k == GAUSSIAN else p) for k in kinds]
    return len(kinds) * (max(dims) + 1)


def _start_partition(data, kinds, rng=None):
    """Initial responsibilities from within-cluster regression residual ranks.

    Rows are binned by the rank of their residual from a single regression
    per cluster. With ``rng`` the residuals are jittered first, which gives a
    different but still informative starting partition.
    """
    y, X = data.y, data.X
    nz = [k for k, kind in enumerate(kinds) if kind != ZEROMASS]
    L = len(kinds)
    resp = np.zeros((data.N, L))
    zk = kinds.index(ZEROMASS) if ZEROMASS in kinds else None
    if not nz:
        resp[:, zk] = 1.0
        return resp
    count = POISSON in kinds
    z = np.log(y + 0.5) - np.log(data.offset) if count else y
    beta, _, status = fam.gaussian_fit_segments(z, X, np.ones(data.N), data.starts, data.cluster)
    r = z - np.einsum("np,np->n", X, beta[data.cluster])
    if rng is not None:
        sd = np.sqrt(data.cluster_sums(r * r) / data.sizes)[data.cluster]
        r = r + rng.normal(0.0, 1.0, size=r.shape) * sd
    bins = np.empty(data.N, dtype=np.intp)
    for i in range(data.m):
        sl = data.rows(i)
        rank = np.argsort(np.argsort(r[sl], kind="stable"), kind="stable")
        bins[sl] = rank * len(nz) // int(data.sizes[i])
    resp[np.arange(data.N), np.asarray(nz)[bins]] = 1.0
    if zk is not None:
        zero = y == 0
        resp[zero] *= 0.5
        resp[zero, zk] = 0.5
    return resp


def _local_em(data: ClusteredDataset, kinds: Sequence[str], resp: np.ndarray,
              max_iter: int, tol: float):
    """Standard mixture EM run independently in every cluster, vectorized.

    Clusters that have converged or failed are dropped from the working set
    as they finish; segment sums are per cluster, so this does not change any
    cluster's iterates.

    Returns per-cluster ``(pi, beta, sigma2, loglik, n_iter, converged, error)``
    arrays.
    """
    m, p, L = data.m, data.p, len(kinds)
    beta = np.zeros((m, L, p))
    sigma2 = np.ones((m, L))
    error = np.array([None] * m, dtype=object)
    ll = np.full(m, -np.inf)
    conv = np.zeros(m, dtype=bool)
    n_iter = np.zeros(m, dtype=int)
    pi = np.full((m, L), 1.0 / L)

    # working set, compacted as clusters finish
    work = np.arange(m)
    y, X, sizes = data.y, data.X, data.sizes
    log_a = np.log(data.offset)
    lgy = gammaln(y + 1) if POISSON in kinds else None
    xx = X[:, :, None] * X[:, None, :]

    def layout(sizes):
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.intp)
        return starts, np.repeat(np.arange(sizes.size), sizes)

    starts, seg = layout(sizes)

    for it in range(max_iter):
        ones = np.ones(y.size)
        # M-step
        for k, kind in enumerate(kinds):
            if kind == ZEROMASS:
                continue
            w = resp[:, k]
            dying = np.add.reduceat(w, starts) < fam.WEIGHT_MASS_FLOOR * sizes
            if kind == GAUSSIAN:
                b, s2, st = fam.gaussian_fit_segments(y, X, w, starts, seg, xx)
                upd = (st == fam.OK) & ~dying
                if it == 0 and not upd.all():
                    b1, s21, st1 = fam.gaussian_fit_segments(y, X, ones, starts, seg, xx)
                    b[~upd], s2[~upd], st[~upd] = b1[~upd], s21[~upd], st1[~upd]
                    upd = st == fam.OK
                sigma2[work[upd], k] = s2[upd]
            else:
                b0 = beta[work, k] if it > 0 else None
                b, st = fam.poisson_fit_segments(y, X, log_a, w, starts, beta0=b0, seg=seg, xx=xx)
                upd = (st != fam.RANK_DEFICIENT) & ~dying
                if it == 0 and not upd.all():
                    b1, st1 = fam.poisson_fit_segments(y, X, log_a, ones, starts, seg=seg, xx=xx)
                    b[~upd], st[~upd] = b1[~upd], st1[~upd]
                    upd = st != fam.RANK_DEFICIENT
            beta[work[upd], k] = b[upd]
            if it == 0:
                for i in work[~upd]:
                    if error[i] is None:
                        error[i] = "singular design matrix"
        wpi = _floor_rows(np.add.reduceat(resp, starts, axis=0) / sizes[:, None])
        pi[work] = wpi

        # E-step
        bw, s2w = beta[work], sigma2[work]
        logh = np.empty((y.size, L))
        for k, kind in enumerate(kinds):
            logh[:, k] = fam.logpdf_rows(kind, y, X, log_a, bw[seg, k], s2w[seg, k], lgy)
        lw = np.log(wpi)[seg] + logh
        mx = lw.max(axis=1)
        bad = ~np.isfinite(mx)
        if bad.any():
            for i in work[np.unique(seg[bad])]:
                if error[i] is None:
                    error[i] = "impossible observation"
            lw[bad] = 0.0
            mx[bad] = 0.0
        resp = np.exp(lw - mx[:, None])
        tot = resp.sum(axis=1)
        resp /= tot[:, None]
        ll_new = np.add.reduceat(mx + np.log(tot), starts)
        live = ~conv[work]
        n_iter[work[live]] = it + 1
        with np.errstate(invalid="ignore"):
            conv[work] |= np.abs(ll_new - ll[work]) / (np.abs(ll[work]) + 1.0) < tol
        ll[work] = ll_new
        keep = ~conv[work] & np.array([error[i] is None for i in work], dtype=bool)
        if not keep.any():
            break
        if keep.sum() <= 0.75 * keep.size:
            rows = keep[seg]
            work, sizes = work[keep], sizes[keep]
            y, X, xx, log_a, resp = y[rows], X[rows], xx[rows], log_a[rows], resp[rows]
            if lgy is not None:
                lgy = lgy[rows]
            starts, seg = layout(sizes)
    return pi, beta, sigma2, ll, n_iter, conv, error


def _families_from_arrays(kinds, beta_i, sigma2_i):
    out = []
    for k, kind in enumerate(kinds):
        if kind == GAUSSIAN:
            out.append(fam.Gaussian(beta_i[k].copy(), float(sigma2_i[k])))
        elif kind == POISSON:
            out.append(fam.Poisson(beta_i[k].copy()))
        else:
            out.append(fam.ZeroMass())
    return tuple(out)


def fit_local_mixtures(data: ClusteredDataset, L: int, kinds: Sequence[str] | str,
                       seed: int | np.random.Generator | None = 0, n_starts: int = 3,
                       max_iter: int = 500, tol: float = 1e-6) -> list[LocalFit]:
    """Fit an ``L``-component mixture separately in every cluster.

    Each cluster runs standard EM from ``n_starts`` starting partitions (one
    deterministic, the rest randomly jittered) and keeps the start with the
    highest log-likelihood. Clusters with too few rows, a singular design or
    an observation no component can explain come back with ``error`` set.
    """
    kinds = fam.expand_kinds(kinds, L)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    m = data.m
    too_small = data.sizes < _min_rows(kinds, data.p)
    best = None
    for s in range(max(1, n_starts)):
        resp0 = _start_partition(data, kinds, None if s == 0 else rng)
        res = _local_em(data, kinds, resp0, max_iter, tol)
        if best is None:
            best = list(res)
            continue
        for i in range(m):
            new_ok = res[6][i] is None
            best_ok = best[6][i] is None
            if new_ok and (not best_ok or res[3][i] > best[3][i]):
                for a in range(len(best)):
                    best[a][i] = res[a][i]
    pi, beta, sigma2, ll, n_iter, conv, error = best
    fits = []
    for i in range(m):
        err = "too few rows" if too_small[i] else error[i]
        fits.append(LocalFit(pi=pi[i].copy(), phi=_families_from_arrays(kinds, beta[i], sigma2[i]),
                             loglik=float(ll[i]), n_iter=int(n_iter[i]),
                             converged=bool(conv[i]), error=err))
    return fits


# --------------------------------------------------------------------------- #
# Initialization
# --------------------------------------------------------------------------- #


def _kmeans(points: np.ndarray, k: int, restarts: int, seed: int):
    from sklearn.cluster import KMeans
    from sklearn.exceptions import ConvergenceWarning

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        km = KMeans(n_clusters=k, init="k-means++", n_init=restarts, random_state=seed)
        labels = km.fit_predict(points)
    return labels.astype(np.intp), km.cluster_centers_


def _median_phi(kinds, fits: Sequence[LocalFit]) -> tuple[ComponentFamily, ...]:
    out = []
    for k, kind in enumerate(kinds):
        if kind == ZEROMASS:
            out.append(fam.ZeroMass())
            continue
        betas = np.array([f.phi[k].beta for f in fits])
        b = np.median(betas, axis=0)
        if kind == GAUSSIAN:
            s2 = float(np.median([f.phi[k].sigma2 for f in fits]))
            out.append(fam.Gaussian(b, max(s2, fam.SIGMA2_FLOOR)))
        else:
            out.append(fam.Poisson(b))
    return tuple(out)


@dataclass(frozen=True)
class InitialEstimates:
    """Per-cluster proportions and shared components that seed every G.

    ``props[i]`` is cluster ``i``'s proportion vector under the shared
    components ``phi``; ``ok[i]`` is False when the cluster's local mixture
    failed.
    """

    props: np.ndarray
    phi: tuple[ComponentFamily, ...]
    ok: np.ndarray
    local_fits: tuple[LocalFit, ...]


def _shared_refinement(data: ClusteredDataset, kinds, props: np.ndarray, phi, max_iter: int,
                       tol: float):
    """EM for per-cluster proportions with components shared by all clusters.

    This is the model with one group per cluster. Started from the median
    components it pools all rows into the component fits, which makes the
    proportion vectors far less noisy than those of separate local mixtures.
    """
    gamma = np.arange(data.m)
    params = GhmParams(gamma, _floor_rows(props), tuple(phi))
    logh = component_log_densities(params.phi, data)
    resp, row_ll = _estep_from_logh(np.log(params.pi)[data.cluster], logh, data)
    prev = float(row_ll.sum())
    for _ in range(max_iter):
        phi = m_step_phi(resp, data, kinds, params)
        pi = _floor_rows(data.cluster_sums(resp) / data.sizes[:, None])
        params = GhmParams(gamma, pi, tuple(phi))
        logh = component_log_densities(params.phi, data)
        resp, row_ll = _estep_from_logh(np.log(pi)[data.cluster], logh, data)
        cur = float(row_ll.sum())
        if abs(cur - prev) / (abs(prev) + 1.0) < tol:
            break
        prev = cur
    return params.pi, params.phi


def initial_estimates(data: ClusteredDataset, L: int, kinds: Sequence[str] | str,
                      seed: int | np.random.Generator | None = 0, n_starts: int = 3,
                      max_iter: int = 500, tol: float = 1e-6,
                      local_fits: Sequence[LocalFit] | None = None) -> InitialEstimates:
    """The G-independent part of initialization.

    1. Fit an ``L``-component mixture in every cluster (unless ``local_fits``
       is given) and align components across clusters.
    2. Take element-wise medians of the aligned component parameters over
       the clusters whose fit succeeded.
    3. Starting from the local proportions and the median components, run
       EM with shared components and free per-cluster proportions.
    """
    kinds = fam.expand_kinds(kinds, L)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if local_fits is None:
        local_fits = fit_local_mixtures(data, L, kinds, seed=rng, n_starts=n_starts,
                                        max_iter=max_iter, tol=tol)
    fits = [f.aligned() for f in local_fits]
    ok = np.array([f.ok for f in fits], dtype=bool)
    if not ok.any():
        log.warning("every local mixture failed; initializing from a pooled mixture")
        pooled = fit_local_mixtures(data.pooled(), L, kinds, seed=rng, n_starts=n_starts)[0]
        if not pooled.ok:
            raise InitializationError(f"pooled mixture failed: {pooled.error}")
        phi = pooled.aligned().phi
    else:
        phi = _median_phi(kinds, [f for f in fits if f.ok])
    props = np.full((data.m, L), 1.0 / L)
    for i in np.flatnonzero(ok):
        props[i] = fits[i].pi
    if L > 1:
        props, phi = _shared_refinement(data, kinds, props, phi, max_iter, tol)
    else:
        props = np.ones((data.m, 1))
        phi = tuple(m_step_phi(np.ones((data.N, 1)), data, kinds, phi))
    return InitialEstimates(props=np.asarray(props), phi=tuple(phi), ok=ok,
                            local_fits=tuple(local_fits))


def initialize(data: ClusteredDataset, config: FitConfig, kinds: Sequence[str] | str,
               local_fits: Sequence[LocalFit] | None = None,
               rng: np.random.Generator | None = None,
               estimates: InitialEstimates | None = None) -> GhmParams:
    """Starting values: initial estimates, then k-means on the proportions.

    k-means with ``G`` centres (k-means++ seeding, ``config.n_init_restarts``
    restarts) runs on the first ``L - 1`` proportions of the clusters whose
    local fit succeeded; labels become ``gamma`` and the completed centroids
    the rows of ``pi``. Clusters whose local fit failed join the nearest
    centroid afterwards.
    """
    G, L = config.G, config.L
    kinds = fam.expand_kinds(kinds, L)
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if estimates is None:
        estimates = initial_estimates(data, L, kinds, seed=rng, n_starts=config.local_starts,
                                      max_iter=config.max_iter, tol=config.tol,
                                      local_fits=local_fits)
    km_seed = int(rng.integers(2**31 - 1))
    phi, props = estimates.phi, estimates.props

    gamma = np.zeros(data.m, dtype=np.intp)
    pi = np.full((G, L), 1.0 / L)
    if L == 1:
        return GhmParams(gamma, np.ones((G, 1)), phi)
    ok = np.flatnonzero(estimates.ok)
    basis = ok if ok.size else np.arange(data.m)
    missing = np.setdiff1d(np.arange(data.m), basis)
    k = min(G, basis.size)
    labels, centers = _kmeans(props[basis, : L - 1], k, config.n_init_restarts, km_seed)
    gamma[basis] = labels
    pi[:k] = np.column_stack([centers, 1.0 - centers.sum(axis=1)])
    pi = _floor_rows(np.clip(pi, 0.0, None))
    if missing.size:
        d = ((props[missing, None, : L - 1] - centers[None, :, :]) ** 2).sum(axis=2)
        gamma[missing] = np.argmin(d, axis=1)
    return GhmParams(gamma, pi, phi)


# --------------------------------------------------------------------------- #
# Driver
# --------------------------------------------------------------------------- #


def _check_inputs(data, config, kinds, similarity):
    if config.G > data.m:
        raise ValueError(f"G={config.G} exceeds the number of clusters m={data.m}")
    if len(kinds) != config.L:
        raise ValueError("number of family kinds must equal L")
    if POISSON in kinds or ZEROMASS in kinds:
        fam._check_counts(data.y)
    if similarity is not None and similarity.m != data.m:
        raise ValueError("similarity matrix dimension does not match the number of clusters")
    if config.xi > 0 and similarity is None:
        raise ValueError("xi > 0 requires a similarity matrix")


def fit(data: ClusteredDataset, config: FitConfig, kinds: Sequence[str] | str,
        similarity: SimilarityMatrix | None = None,
        local_fits: Sequence[LocalFit] | None = None,
        init: GhmParams | None = None,
        estimates: InitialEstimates | None = None) -> FitResult:
    """Fit a GHM model by generalized EM.

    Iterates E-step, component refit, proportion update and label update
    until the relative change of the (penalized) objective falls below
    ``config.tol``. Hitting ``max_iter`` returns a result with
    ``converged=False``.
    """
    kinds = fam.expand_kinds(kinds, config.L)
    _check_inputs(data, config, kinds, similarity)
    if init is None:
        init = initialize(data, config, kinds, local_fits=local_fits, estimates=estimates)
    params = init
    xi = config.xi

    def objective(p, row_ll):
        q = float(row_ll.sum())
        pen = penalty(p.gamma, similarity)
        return q, pen, (q + xi * pen if xi > 0 else q)

    logh = component_log_densities(params.phi, data)
    resp, row_ll = _estep_from_logh(np.log(params.cluster_pi())[data.cluster], logh, data)
    q, pen, obj = objective(params, row_ll)
    trace, ll_trace = [obj], [q]
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        phi = m_step_phi(resp, data, kinds, params)
        pi = m_step_pi(resp, params.gamma, data, config.G, config.L)
        gamma = m_step_gamma(resp, pi, data, similarity, xi, params.gamma,
                             sequential=config.sequential_gamma)
        params = GhmParams(gamma, pi, tuple(phi))
        logh = component_log_densities(params.phi, data)
        resp, row_ll = _estep_from_logh(np.log(params.cluster_pi())[data.cluster], logh, data)
        q, pen, new_obj = objective(params, row_ll)
        trace.append(new_obj)
        ll_trace.append(q)
        if abs(new_obj - obj) / (abs(obj) + 1.0) < config.tol:
            converged = True
            obj = new_obj
            break
        obj = new_obj

    dims = [f.dim for f in params.phi]
    return FitResult(
        params=params,
        loglik=q,
        penalized_objective=obj,
        penalty=pen,
        ic=information_criterion(q, data.N, config.G, config.L, data.m, dims),
        trace=np.asarray(trace),
        loglik_trace=np.asarray(ll_trace),
        responsibilities=resp,
        n_iter=it,
        converged=converged,
        config=config,
        kinds=list(kinds),
        m=data.m,
        N=data.N,
        cluster_ids=data.cluster_ids,
        covariate_names=data.covariate_names,
    )


def fit_global_mixture(data: ClusteredDataset, L: int, kinds: Sequence[str] | str,
                       seed: int = 0, **config_kw) -> FitResult:
    """Single finite mixture on all rows, ignoring the cluster structure."""
    pooled = data.pooled()
    return fit(pooled, FitConfig(G=1, L=L, seed=seed, **config_kw), kinds)


def rand_index(a: Sequence[int], b: Sequence[int]) -> float:
    """Rand index between two partitions given as label vectors."""
    a, b = np.asarray(a), np.asarray(b)
    n = a.shape[0]
    if n < 2:
        return 1.0
    sa = a[:, None] == a[None, :]
    sb = b[:, None] == b[None, :]
    iu = np.triu_indices(n, 1)
    return float(np.mean(sa[iu] == sb[iu]))
