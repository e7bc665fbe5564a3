"""Simulation scenarios, true densities, MISE and the replication harness.

Covariates are ``x1 ~ U(-0.2, 0.8)`` and ``x2 ~ Bernoulli(0.5)``; every
cluster's conditional law is a two-component regression mixture

    f_i(y | x1, x2) = pi_i h(y; b_i1 . (1, x1, x2)) + (1 - pi_i) h(y; b_i2 . (1, x1, x2))

with normal (``gaussian``) or log-linear Poisson (``poisson``) components.
Scenarios differ in how ``pi_i`` and the coefficients vary over clusters:

===== =============================== =====================================
 I    pi_i ~ Beta(2, 1)               shared coefficients
 II   pi_i in {0.1, 0.9} equally      shared coefficients
 III  II plus U(-0.1, 0.1) jitter     shared coefficients
 IV   pi_i ~ Beta(2, 1)               coefficients drawn per cluster
 V    pi_i = 1                        one regression drawn per cluster
===== =============================== =====================================
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln

from . import em
from .data import INTERCEPT, ClusteredDataset
from .em import FitConfig, FitResult, LocalFit
from .families import GAUSSIAN, POISSON
from .selection import SelectionGrid, information_criterion, select

log = logging.getLogger(__name__)

SCENARIOS = ("I", "II", "III", "IV", "V")
RESPONSE_KINDS = (GAUSSIAN, POISSON)

# (intercept, x1, x2) for the first and second component in scenarios I-III
FIXED_COEF = {
    GAUSSIAN: (np.array([-0.5, 1.0, -0.5]), np.array([0.5, -1.0, 0.5])),
    POISSON: (np.array([-0.25, 0.5, -0.25]), np.array([0.25, -0.5, 0.25])),
}
SIGMA = (0.2, 0.5)
SIGMA_V = 0.3
COEF_SD = 0.3
COEF_SD_V = 0.5
PI_CLIP = (0.01, 0.99)

X1_RANGE = (-0.2, 0.8)
B_X1 = 0.02
B_Y = 0.1
X1_GRID = np.linspace(-0.2, 0.8, 51)
Y_GRID = {GAUSSIAN: np.linspace(-5.0, 5.0, 101), POISSON: np.arange(16.0)}
Y_WEIGHT = {GAUSSIAN: B_Y, POISSON: 1.0}
REPORT_SCALE = {GAUSSIAN: 10.0, POISSON: 100.0}


@dataclass(frozen=True)
class ScenarioSpec:
    response_kind: str
    scenario: str
    m: int
    n: int
    seed: int = 0

    def __post_init__(self):
        if self.response_kind not in RESPONSE_KINDS:
            raise ValueError(f"response_kind must be one of {RESPONSE_KINDS}")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be positive")


@dataclass(frozen=True, eq=False)
class TrueModel:
    """Per-cluster two-component truth; ``beta1``/``beta2`` have shape (m, 3)."""

    kind: str
    pi: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray
    sigma: tuple[float, float] = SIGMA
    scenario: str = ""
    cluster_ids: tuple[str, ...] = ()

    @property
    def m(self) -> int:
        return len(self.pi)

    def density(self, i: int, y, X) -> np.ndarray:
        """Mixture density of cluster ``i`` at rows ``y`` / ``X = (1, x1, x2)``."""
        y = np.asarray(y, dtype=float)
        X = np.atleast_2d(X)
        p = self.pi[i]
        h1 = _component_density(self.kind, y, X @ self.beta1[i], self.sigma[0])
        if p == 1.0:
            return h1
        h2 = _component_density(self.kind, y, X @ self.beta2[i], self.sigma[1])
        return p * h1 + (1.0 - p) * h2

    def to_dict(self) -> dict:
        return {
            "schema": "ghm-truth/1",
            "kind": self.kind,
            "scenario": self.scenario,
            "cluster_ids": list(self.cluster_ids),
            "pi": self.pi.tolist(),
            "beta1": self.beta1.tolist(),
            "beta2": self.beta2.tolist(),
            "sigma": list(self.sigma),
        }

    @classmethod
    def from_dict(cls, d: dict) -> TrueModel:
        if d.get("schema") != "ghm-truth/1":
            raise ValueError(f"unsupported truth schema {d.get('schema')!r}")
        return cls(d["kind"], np.asarray(d["pi"], dtype=float), np.asarray(d["beta1"], dtype=float),
                   np.asarray(d["beta2"], dtype=float), tuple(d["sigma"]), d.get("scenario", ""),
                   tuple(d.get("cluster_ids", ())))


def _component_density(kind, y, lin, sd):
    if kind == GAUSSIAN:
        z = (y - lin) / sd
        return np.exp(-0.5 * z * z) / (sd * math.sqrt(2 * math.pi))
    return np.exp(y * lin - np.exp(lin) - gammaln(y + 1))


def true_density(model: TrueModel, i: int, y, x1, x2):
    y, x1, x2 = np.broadcast_arrays(np.asarray(y, float), np.asarray(x1, float), np.asarray(x2, float))
    X = np.stack([np.ones(y.size), x1.ravel(), x2.ravel()], axis=1)
    out = model.density(i, y.ravel(), X).reshape(y.shape)
    return float(out) if out.ndim == 0 else out


def _draw_truth(spec: ScenarioSpec, rng: np.random.Generator) -> TrueModel:
    m, kind, sc = spec.m, spec.response_kind, spec.scenario
    b1, b2 = FIXED_COEF[kind]
    beta1 = np.tile(b1, (m, 1))
    beta2 = np.tile(b2, (m, 1))
    sigma = SIGMA
    if sc == "I":
        pi = rng.beta(2.0, 1.0, size=m)
    elif sc == "II":
        pi = rng.choice([0.1, 0.9], size=m)
    elif sc == "III":
        pi = np.clip(rng.choice([0.1, 0.9], size=m) + rng.uniform(-0.1, 0.1, size=m), *PI_CLIP)
    elif sc == "IV":
        beta1 = b1 + COEF_SD * rng.standard_normal((m, 3))
        beta2 = b2 + COEF_SD * rng.standard_normal((m, 3))
        pi = rng.beta(2.0, 1.0, size=m)
    else:
        beta1 = COEF_SD_V * rng.standard_normal((m, 3))
        beta2 = beta1.copy()
        pi = np.ones(m)
        sigma = (SIGMA_V, SIGMA_V)
    ids = tuple(f"c{i}" for i in range(m))
    return TrueModel(kind, pi, beta1, beta2, sigma, sc, ids)


def generate(spec: ScenarioSpec) -> tuple[ClusteredDataset, TrueModel]:
    """Draw a dataset and its truth; identical for identical ``spec``.

    Separate random streams drive the truth, the covariates and the
    responses.
    """
    s_truth, s_cov, s_y = np.random.SeedSequence(spec.seed).spawn(3)
    truth = _draw_truth(spec, np.random.default_rng(s_truth))
    m, n = spec.m, spec.n
    rc = np.random.default_rng(s_cov)
    x1 = rc.uniform(*X1_RANGE, size=m * n)
    x2 = rc.binomial(1, 0.5, size=m * n).astype(float)
    X = np.column_stack([np.ones(m * n), x1, x2])
    cluster = np.repeat(np.arange(m), n)
    ry = np.random.default_rng(s_y)
    first = ry.random(m * n) < truth.pi[cluster]
    lin1 = np.einsum("np,np->n", X, truth.beta1[cluster])
    lin2 = np.einsum("np,np->n", X, truth.beta2[cluster])
    if spec.response_kind == GAUSSIAN:
        e = ry.standard_normal(m * n)
        y = np.where(first, lin1 + truth.sigma[0] * e, lin2 + truth.sigma[1] * e)
    else:
        y = ry.poisson(np.exp(np.where(first, lin1, lin2))).astype(float)
    data = ClusteredDataset(y, X, np.ones(m * n), cluster, truth.cluster_ids,
                            (INTERCEPT, "x1", "x2"))
    return data, truth


def planted_groups(truth: TrueModel) -> np.ndarray:
    """Cluster labels induced by distinct mixing proportions."""
    _, labels = np.unique(np.round(truth.pi, 12), return_inverse=True)
    return labels


# --------------------------------------------------------------------------- #
# Zero-inflated counts with planted groups
# --------------------------------------------------------------------------- #

# component order: zero mass, low-rate Poisson, high-rate Poisson
ZIP_PI = ((0.3, 0.5, 0.2), (0.1, 0.2, 0.7))
ZIP_BETA = ((0.0, 0.5, -0.25), (1.5, -0.5, 0.25))
ZIP_OFFSET_RANGE = (0.5, 2.0)


@dataclass(frozen=True)
class ZipSpec:
    """Zero mass plus two Poisson regressions, two planted groups of clusters.

    Each cluster joins group 0 or 1 with equal probability; exposures are
    uniform on ``ZIP_OFFSET_RANGE``.
    """

    m: int = 20
    n: int = 120
    seed: int = 0
    pi: tuple = ZIP_PI
    beta: tuple = ZIP_BETA


@dataclass(frozen=True, eq=False)
class ZipTruth:
    gamma: np.ndarray
    pi: np.ndarray
    beta: np.ndarray
    cluster_ids: tuple[str, ...]

    @property
    def m(self) -> int:
        return len(self.gamma)

    def params(self) -> em.GhmParams:
        from .families import Poisson, ZeroMass

        return em.GhmParams(self.gamma, self.pi, (ZeroMass(), Poisson(self.beta[0]),
                                                  Poisson(self.beta[1])))


def generate_zip(spec: ZipSpec) -> tuple[ClusteredDataset, ZipTruth]:
    s_truth, s_cov, s_y = np.random.SeedSequence(spec.seed).spawn(3)
    m, n = spec.m, spec.n
    gamma = np.random.default_rng(s_truth).integers(0, 2, size=m)
    pi = np.asarray(spec.pi, dtype=float)
    beta = np.asarray(spec.beta, dtype=float)
    rc = np.random.default_rng(s_cov)
    x1 = rc.uniform(*X1_RANGE, size=m * n)
    x2 = rc.binomial(1, 0.5, size=m * n).astype(float)
    a = rc.uniform(*ZIP_OFFSET_RANGE, size=m * n)
    X = np.column_stack([np.ones(m * n), x1, x2])
    cluster = np.repeat(np.arange(m), n)
    ry = np.random.default_rng(s_y)
    u = ry.random(m * n)
    comp = (u[:, None] > np.cumsum(pi[gamma[cluster]], axis=1)).sum(axis=1)
    rate = a * np.exp(np.einsum("np,np->n", X, beta[np.maximum(comp - 1, 0)]))
    y = np.where(comp == 0, 0.0, ry.poisson(rate).astype(float))
    ids = tuple(f"c{i}" for i in range(m))
    data = ClusteredDataset(y, X, a, cluster, ids, (INTERCEPT, "x1", "x2"))
    return data, ZipTruth(gamma, pi, beta, ids)


# --------------------------------------------------------------------------- #
# Estimators of the cluster-wise densities
# --------------------------------------------------------------------------- #


class MixtureDensity:
    """Cluster-wise densities ``sum_k pi[i, k] h_k`` with per-cluster components."""

    def __init__(self, pi: np.ndarray, phi: Sequence[Sequence]):
        self.pi = np.asarray(pi, dtype=float)
        self.phi = [tuple(p) for p in phi]

    @classmethod
    def from_fit(cls, result: FitResult | em.GhmParams) -> MixtureDensity:
        params = result.params if isinstance(result, FitResult) else result
        cpi = params.cluster_pi()
        return cls(cpi, [params.phi] * len(cpi))

    @classmethod
    def from_local(cls, fits: Sequence[LocalFit]) -> MixtureDensity:
        L = max(len(f.phi) for f in fits)
        pi = np.zeros((len(fits), L))
        for i, f in enumerate(fits):
            pi[i, : len(f.pi)] = f.pi
        return cls(pi, [f.phi for f in fits])

    @classmethod
    def broadcast(cls, result: FitResult, m: int) -> MixtureDensity:
        """A single (pooled) mixture used for all ``m`` clusters."""
        pi = np.repeat(result.params.pi[:1], m, axis=0)
        return cls(pi, [result.params.phi] * m)

    def density(self, i: int, y, X) -> np.ndarray:
        out = np.zeros(np.shape(y))
        for k, f in enumerate(self.phi[i]):
            if self.pi[i, k] > 0:
                out += self.pi[i, k] * np.exp(f.logpdf(y, X, None))
        return out


class EvaluationError(ArithmeticError):
    pass


def _grid(kind: str):
    y = Y_GRID[kind]
    x1 = np.repeat(X1_GRID, y.size)
    yy = np.tile(y, X1_GRID.size)
    rows = []
    for x2 in (0.0, 1.0):
        rows.append(np.column_stack([np.ones(x1.size), x1, np.full(x1.size, x2)]))
    X = np.vstack(rows)
    return np.tile(yy, 2), X


def mise(fitted, truth, kind: str | None = None) -> float:
    """Grid approximation of the mean integrated squared error.

    ``fitted`` and ``truth`` are anything with ``density(i, y, X)`` (or plain
    callables with that signature). The x1 grid has spacing 0.02 on
    [-0.2, 0.8]; y runs over [-5, 5] in steps of 0.1 for continuous responses
    and over {0, ..., 15} with unit weight for counts. Both grids include
    their endpoints.
    """
    if kind is None:
        kind = truth.kind
    f_hat = fitted.density if hasattr(fitted, "density") else fitted
    f_true = truth.density if hasattr(truth, "density") else truth
    m = truth.m if hasattr(truth, "m") else fitted.m
    y, X = _grid(kind)
    total = 0.0
    for i in range(m):
        a = np.asarray(f_hat(i, y, X), dtype=float)
        b = np.asarray(f_true(i, y, X), dtype=float)
        for v in (a, b):
            if not np.all(np.isfinite(v)):
                r = int(np.flatnonzero(~np.isfinite(v))[0])
                raise EvaluationError(
                    f"non-finite density for cluster {i} at y={y[r]}, x1={X[r, 1]}, x2={X[r, 2]}")
        d = a - b
        total += float(np.sum(d * d))
    return total * B_X1 * Y_WEIGHT[kind] / m


# --------------------------------------------------------------------------- #
# Methods and replication
# --------------------------------------------------------------------------- #

METHODS = ("GHM", "fGHM", "GM", "LM")


@dataclass(frozen=True)
class StudySpec:
    response_kind: str
    scenario: str
    m: int
    n: int
    R: int
    seed: int = 0
    methods: tuple[str, ...] = ("GHM", "fGHM", "GM", "LM")
    G_max: int = 10
    L_candidates: tuple[int, ...] = (1, 2, 3, 4)
    fixed_G: int = 10
    fixed_L: int = 2
    tol: float = 1e-6
    max_iter: int = 500

    def __post_init__(self):
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        if self.R < 1:
            raise ValueError("R must be positive")
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "L_candidates", tuple(self.L_candidates))


def replication_seed(seed: int, r: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(r)]).generate_state(1)[0])


def fit_ghm_selected(data, kind, seed, G_max=10, L_candidates=(1, 2, 3, 4), **cfg) -> SelectionGrid:
    grid = SelectionGrid(list(range(1, min(G_max, data.m) + 1)), list(L_candidates))
    return select(data, grid, FitConfig(G=1, L=1, seed=seed, **cfg), kind)


def fit_gm_selected(data, kind, seed, L_candidates=(1, 2, 3, 4), **cfg) -> FitResult:
    """Pooled mixture with the number of components chosen by the IC."""
    grid = SelectionGrid([1], list(L_candidates))
    return select(data.pooled(), grid, FitConfig(G=1, L=1, seed=seed, **cfg), kind).best_result


def fit_lm_selected(data, kind, seed, L_candidates=(1, 2, 3, 4), **cfg) -> list[LocalFit]:
    """Per-cluster mixtures, each with its own number of components chosen by BIC."""
    best: list[LocalFit | None] = [None] * data.m
    best_bic = np.full(data.m, np.inf)
    for L in L_candidates:
        fits = em.fit_local_mixtures(data, L, kind, seed=int(seed) ^ L,
                                     max_iter=cfg.get("max_iter", 500), tol=cfg.get("tol", 1e-6))
        for i, f in enumerate(fits):
            if not f.ok:
                continue
            bic = information_criterion(f.loglik, int(data.sizes[i]), 1, L, 0,
                                        [c.dim for c in f.phi])
            if bic < best_bic[i]:
                best[i], best_bic[i] = f, bic
    missing = [i for i, f in enumerate(best) if f is None]
    if missing:
        raise RuntimeError(f"local mixtures failed for clusters {missing}")
    return best  # type: ignore[return-value]


def run_replication(study: StudySpec, r: int) -> dict:
    """One replication: generate, fit every method, evaluate MISE."""
    seed = replication_seed(study.seed, r)
    data, truth = generate(ScenarioSpec(study.response_kind, study.scenario, study.m, study.n, seed))
    kind = study.response_kind
    cfg = dict(tol=study.tol, max_iter=study.max_iter)
    rec: dict = {"replication": r, "seed": seed, "mise": {}, "errors": {}}
    grid = None
    for method in study.methods:
        t0 = time.perf_counter()
        try:
            if method == "GHM":
                grid = fit_ghm_selected(data, kind, seed, study.G_max, study.L_candidates, **cfg)
                est = MixtureDensity.from_fit(grid.best_result)
                rec["G"], rec["L"] = grid.best
                rec["unconverged_cells"] = len(grid.unconverged())
            elif method == "fGHM":
                G = min(study.fixed_G, data.m)
                cell = (G, study.fixed_L)
                if grid is not None and cell in grid.results:
                    res = grid.results[cell]
                else:
                    res = em.fit(data, FitConfig(G=G, L=study.fixed_L,
                                                 seed=_fixed_seed(seed, G, study.fixed_L), **cfg), kind)
                est = MixtureDensity.from_fit(res)
            elif method == "GM":
                res = fit_gm_selected(data, kind, seed, study.L_candidates, **cfg)
                est = MixtureDensity.broadcast(res, data.m)
                rec["GM_L"] = res.L
            else:
                est = MixtureDensity.from_local(fit_lm_selected(data, kind, seed,
                                                                study.L_candidates, **cfg))
            rec["mise"][method] = mise(est, truth, kind)
        except Exception as e:  # recorded per replication, excluded from means
            log.warning("replication %d: %s failed: %s", r, method, e)
            rec["errors"][method] = f"{type(e).__name__}: {e}"
        rec.setdefault("seconds", {})[method] = time.perf_counter() - t0
    return rec


def _fixed_seed(seed, G, L):
    from .selection import cell_seed

    return cell_seed(seed, G, L)


def _run_one(args):
    return run_replication(*args)


@dataclass
class StudyResult:
    study: StudySpec
    records: list[dict] = field(default_factory=list)

    def values(self, method: str) -> np.ndarray:
        return np.array([r["mise"][method] for r in self.records if method in r["mise"]])

    def mean_sqrt_mise(self, method: str, scaled: bool = True) -> float:
        """Mean over replications of the per-replication root MISE."""
        v = np.sqrt(self.values(method))
        s = REPORT_SCALE[self.study.response_kind] if scaled else 1.0
        return float(np.mean(v) * s) if v.size else math.nan

    def sqrt_mean_mise(self, method: str, scaled: bool = True) -> float:
        """Root of the MISE averaged over replications."""
        v = self.values(method)
        s = REPORT_SCALE[self.study.response_kind] if scaled else 1.0
        return float(np.sqrt(np.mean(v)) * s) if v.size else math.nan

    def failures(self, method: str) -> int:
        return sum(method in r["errors"] for r in self.records)

    def mean_selected(self) -> tuple[float, float]:
        G = [r["G"] for r in self.records if "G" in r]
        L = [r["L"] for r in self.records if "L" in r]
        return (float(np.mean(G)) if G else math.nan, float(np.mean(L)) if L else math.nan)

    def summary(self) -> dict:
        s = self.study
        out = {
            "scenario": s.scenario,
            "response_kind": s.response_kind,
            "m": s.m,
            "n": s.n,
            "R": s.R,
            "scale": REPORT_SCALE[s.response_kind],
            "mean_sqrt_mise": {k: self.mean_sqrt_mise(k) for k in s.methods},
            "sqrt_mean_mise": {k: self.sqrt_mean_mise(k) for k in s.methods},
            "failures": {k: self.failures(k) for k in s.methods},
        }
        if "GHM" in s.methods:
            out["mean_G"], out["mean_L"] = self.mean_selected()
        return out

    def to_csv(self) -> str:
        s = self.study
        cols = ["scenario", "m", "n", *s.methods]
        if "GHM" in s.methods:
            cols += ["G", "L"]
        row = [s.scenario, str(s.m), str(s.n)] + [f"{self.mean_sqrt_mise(k):.4f}" for k in s.methods]
        if "GHM" in s.methods:
            G, L = self.mean_selected()
            row += [f"{G:.3f}", f"{L:.3f}"]
        return ",".join(cols) + "\n" + ",".join(row) + "\n"

    def manifest(self) -> dict:
        return {
            "study": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.study).items()},
            "replication_seeds": [r["seed"] for r in self.records],
            "summary": self.summary(),
            "records": self.records,
        }


def replicate(study: StudySpec, jobs: int = 1,
              progress: Callable[[dict], None] | None = None) -> StudyResult:
    """Run ``study.R`` independent replications; records kept in replication order."""
    args = [(study, r) for r in range(study.R)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            records = list(ex.map(_run_one, args))
    else:
        records = []
        for a in args:
            rec = _run_one(a)
            if progress is not None:
                progress(rec)
            records.append(rec)
    return StudyResult(study, records)


def truth_as_fit_params(truth: TrueModel) -> em.GhmParams:
    """Express a shared-component truth (scenarios I-III) as GHM parameters.

    Every distinct ``pi_i`` becomes a group.
    """
    from .families import Gaussian, Poisson

    if not (np.allclose(truth.beta1, truth.beta1[0]) and np.allclose(truth.beta2, truth.beta2[0])):
        raise ValueError("truth has cluster-specific components")
    vals, gamma = np.unique(truth.pi, return_inverse=True)
    pi = np.column_stack([vals, 1.0 - vals])
    if truth.kind == GAUSSIAN:
        phi = (Gaussian(truth.beta1[0], truth.sigma[0] ** 2), Gaussian(truth.beta2[0], truth.sigma[1] ** 2))
    else:
        phi = (Poisson(truth.beta1[0]), Poisson(truth.beta2[0]))
    return em.GhmParams(gamma, pi, phi)


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))
