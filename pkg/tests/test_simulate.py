from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from ghm import em
from ghm.em import FitConfig
from ghm.simulate import (
    B_X1,
    REPORT_SCALE,
    X1_GRID,
    Y_GRID,
    EvaluationError,
    MixtureDensity,
    ScenarioSpec,
    StudyResult,
    StudySpec,
    TrueModel,
    ZipSpec,
    generate,
    generate_zip,
    mise,
    planted_groups,
    replicate,
    run_replication,
    true_density,
    truth_as_fit_params,
)


def test_grid_sizes():
    assert X1_GRID.size == 51
    assert Y_GRID["gaussian"].size == 101
    assert np.isclose(X1_GRID[0], -0.2) and np.isclose(X1_GRID[-1], 0.8)
    assert np.allclose(np.diff(X1_GRID), 0.02)
    assert np.allclose(np.diff(Y_GRID["gaussian"]), 0.1)
    assert np.array_equal(Y_GRID["poisson"], np.arange(16))


def test_scenario_II_two_point_proportions():
    _, truth = generate(ScenarioSpec("gaussian", "II", 40, 10, seed=1))
    assert set(np.unique(truth.pi)) <= {0.1, 0.9}


def test_scenario_III_clipped_near_two_points():
    _, truth = generate(ScenarioSpec("gaussian", "III", 200, 2, seed=2))
    assert np.all((truth.pi >= 0.0) & (truth.pi <= 0.2) | (truth.pi >= 0.8) & (truth.pi <= 1.0))


def test_scenario_V_single_regression():
    data, truth = generate(ScenarioSpec("gaussian", "V", 5, 2000, seed=3))
    assert np.all(truth.pi == 1.0)
    assert truth.sigma == (0.3, 0.3)
    for i in range(5):
        sl = data.rows(i)
        beta, *_ = np.linalg.lstsq(data.X[sl], data.y[sl], rcond=None)
        r = data.y[sl] - data.X[sl] @ beta
        assert np.allclose(beta, truth.beta1[i], atol=0.05)
        assert abs(r.std() - 0.3) < 0.02


def test_scenario_IV_coefficients_vary():
    _, truth = generate(ScenarioSpec("gaussian", "IV", 300, 1, seed=4))
    assert np.allclose(truth.beta1.mean(axis=0), [-0.5, 1, -0.5], atol=0.06)
    assert np.allclose(truth.beta1.std(axis=0), 0.3, atol=0.04)
    assert np.allclose(truth.beta2.mean(axis=0), [0.5, -1, 0.5], atol=0.06)


def test_fixed_coefficients():
    _, tg = generate(ScenarioSpec("gaussian", "I", 3, 1, seed=0))
    assert np.allclose(tg.beta1, [-0.5, 1, -0.5]) and np.allclose(tg.beta2, [0.5, -1, 0.5])
    assert tg.sigma == (0.2, 0.5)
    _, tp = generate(ScenarioSpec("poisson", "II", 3, 1, seed=0))
    assert np.allclose(tp.beta1, [-0.25, 0.5, -0.25]) and np.allclose(tp.beta2, [0.25, -0.5, 0.25])


def test_generate_deterministic_bytes(tmp_path):
    from ghm.data import save_dataset

    a, _ = generate(ScenarioSpec("gaussian", "II", 20, 80, seed=7))
    b, _ = generate(ScenarioSpec("gaussian", "II", 20, 80, seed=7))
    save_dataset(a, tmp_path / "a.csv")
    save_dataset(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    c, _ = generate(ScenarioSpec("gaussian", "II", 20, 80, seed=8))
    assert not np.array_equal(a.y, c.y)


def test_component_draw_frequency_scenario_I():
    n = 10_000
    spec = ScenarioSpec("gaussian", "I", 5, n, seed=5)
    data, truth = generate(spec)
    # identify component-1 draws by replaying the response stream
    _, _, s_y = np.random.SeedSequence(spec.seed).spawn(3)
    first = np.random.default_rng(s_y).random(5 * n) < truth.pi[data.cluster]
    freq = data.cluster_sums(first.astype(float)) / n
    assert np.all(np.abs(freq - truth.pi) < 4 / math.sqrt(n))


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["I", "II", "III", "IV", "V"]), st.sampled_from(["gaussian", "poisson"]),
       st.integers(0, 2**32 - 1))
def test_covariate_support(scenario, kind, seed):
    data, truth = generate(ScenarioSpec(kind, scenario, 4, 50, seed=seed))
    assert np.all((data.X[:, 1] > -0.2) & (data.X[:, 1] < 0.8))
    assert set(np.unique(data.X[:, 2])) <= {0.0, 1.0}
    assert np.all((truth.pi >= 0) & (truth.pi <= 1))
    if kind == "poisson":
        assert np.all(data.y == np.floor(data.y)) and np.all(data.y >= 0)


# --------------------------------------------------------------------------- #
# true densities
# --------------------------------------------------------------------------- #


def _single(kind, pi, b1, b2, sigma=(0.2, 0.5)):
    return TrueModel(kind, np.array([pi]), np.array([b1], float), np.array([b2], float), sigma)


def test_true_density_pi_one_is_component_one():
    t = _single("gaussian", 1.0, [0.1, 0.2, 0.3], [5, 5, 5])
    y = np.linspace(-2, 2, 9)
    assert np.allclose(true_density(t, 0, y, 0.5, 1.0), stats.norm.pdf(y, 0.1 + 0.1 + 0.3, 0.2))


def test_true_density_identical_components():
    t = _single("gaussian", 0.5, [0.1, 0.2, 0.3], [0.1, 0.2, 0.3], sigma=(0.4, 0.4))
    y = np.linspace(-2, 2, 9)
    assert np.allclose(true_density(t, 0, y, 0.3, 0.0), stats.norm.pdf(y, 0.16, 0.4))


def test_true_density_poisson_hand_value():
    t = _single("poisson", 0.3, [0.0, 0.0, 0.0], [math.log(2), 0.0, 0.0])
    v = true_density(t, 0, 0, 0.1, 1.0)
    assert math.isclose(v, 0.3 * math.exp(-1) + 0.7 * math.exp(-2), rel_tol=1e-12)
    assert math.isclose(v, 0.20511, abs_tol=1e-4)


def test_truth_json_roundtrip():
    _, truth = generate(ScenarioSpec("poisson", "IV", 4, 5, seed=9))
    back = TrueModel.from_dict(truth.to_dict())
    assert np.array_equal(back.beta1, truth.beta1) and np.array_equal(back.pi, truth.pi)


# --------------------------------------------------------------------------- #
# MISE
# --------------------------------------------------------------------------- #


def test_mise_zero_for_identical():
    _, truth = generate(ScenarioSpec("gaussian", "I", 5, 2, seed=10))
    assert mise(truth, truth) == 0.0


def test_mise_mean_shift_closed_form():
    delta = 0.1
    f = _single("gaussian", 1.0, [0, 0, 0], [0, 0, 0], sigma=(1.0, 1.0))
    g = _single("gaussian", 1.0, [delta, 0, 0], [delta, 0, 0], sigma=(1.0, 1.0))
    overlap = integrate.quad(lambda y: (stats.norm.pdf(y) - stats.norm.pdf(y - delta)) ** 2,
                             -np.inf, np.inf)[0]
    # closed form 2 (1 - exp(-delta^2 / 4)) / (2 sqrt(pi)) for the overlap integral
    assert math.isclose(overlap, (1 - math.exp(-delta ** 2 / 4)) / math.sqrt(math.pi), rel_tol=1e-8)
    x_range = 1.0 + B_X1  # 51 grid points at spacing 0.02
    expected = 2 * overlap * x_range
    assert abs(mise(g, f, "gaussian") - expected) < 1e-3
    assert math.isclose(expected, 0.0028176, rel_tol=0.05)


def test_mise_symmetric():
    _, a = generate(ScenarioSpec("poisson", "I", 4, 2, seed=11))
    _, b = generate(ScenarioSpec("poisson", "I", 4, 2, seed=12))
    assert math.isclose(mise(a, b), mise(b, a), rel_tol=1e-14)
    assert mise(a, b) > 0


def test_mise_reports_bad_grid_point():
    _, truth = generate(ScenarioSpec("gaussian", "II", 2, 2, seed=13))

    def broken(i, y, X):
        out = truth.density(i, y, X)
        out[(y > 1.0)] = np.nan
        return out

    with pytest.raises(EvaluationError, match="cluster 0"):
        mise(broken, truth, "gaussian")


def test_truth_as_fit_params_has_zero_mise():
    data, truth = generate(ScenarioSpec("gaussian", "II", 6, 20, seed=14))
    est = MixtureDensity.from_fit(truth_as_fit_params(truth))
    assert mise(est, truth) < 1e-25


def test_planted_groups():
    _, truth = generate(ScenarioSpec("gaussian", "II", 10, 2, seed=15))
    g = planted_groups(truth)
    assert np.array_equal(g, (truth.pi > 0.5).astype(int))


# --------------------------------------------------------------------------- #
# zero-inflated generator
# --------------------------------------------------------------------------- #


def test_zip_generator():
    data, truth = generate_zip(ZipSpec(m=6, n=3000, seed=1))
    assert data.has_offset
    zero_share = data.cluster_sums((data.y == 0).astype(float)) / data.sizes
    # zero mass share plus Poisson zeros, at least the structural zeros
    assert np.all(zero_share > truth.pi[truth.gamma, 0] - 0.03)
    ll = em.loglik(truth.params(), data)
    assert np.isfinite(ll)
    a, _ = generate_zip(ZipSpec(m=6, n=30, seed=1))
    b, _ = generate_zip(ZipSpec(m=6, n=30, seed=1))
    assert a == b


# --------------------------------------------------------------------------- #
# replication harness
# --------------------------------------------------------------------------- #


def test_fghm_forces_G10_L2():
    study = StudySpec("gaussian", "II", 10, 30, R=1, seed=1, methods=("fGHM",))
    rec = run_replication(study, 0)
    assert "fGHM" in rec["mise"]
    assert "G" not in rec


def test_replicate_single_replication_table():
    study = StudySpec("gaussian", "II", 6, 40, R=1, seed=3, methods=("GHM", "GM", "LM"),
                      G_max=3, L_candidates=(1, 2))
    res = replicate(study)
    rec = res.records[0]
    for k in ("GHM", "GM", "LM"):
        assert math.isclose(res.mean_sqrt_mise(k), math.sqrt(rec["mise"][k]) * REPORT_SCALE["gaussian"])
        assert math.isclose(res.sqrt_mean_mise(k), res.mean_sqrt_mise(k))
    assert res.mean_selected() == (rec["G"], rec["L"])
    header = res.to_csv().splitlines()[0].split(",")
    assert header == ["scenario", "m", "n", "GHM", "GM", "LM", "G", "L"]
    man = res.manifest()
    assert man["replication_seeds"] == [rec["seed"]]


def test_replication_failures_are_counted():
    res = StudyResult(StudySpec("gaussian", "II", 4, 10, R=2, methods=("GM",)),
                      [{"mise": {"GM": 0.04}, "errors": {}, "seed": 1},
                       {"mise": {}, "errors": {"GM": "boom"}, "seed": 2}])
    assert res.failures("GM") == 1
    assert math.isclose(res.mean_sqrt_mise("GM"), 2.0)


def test_study_spec_validation():
    with pytest.raises(ValueError):
        StudySpec("gaussian", "II", 4, 10, R=1, methods=("RC",))
    with pytest.raises(ValueError):
        StudySpec("gaussian", "II", 4, 10, R=0)


def test_gm_estimator_broadcasts_pooled_fit():
    data, truth = generate(ScenarioSpec("gaussian", "II", 5, 60, seed=16))
    gm = em.fit_global_mixture(data, 2, "gaussian")
    est = MixtureDensity.broadcast(gm, data.m)
    y = np.linspace(-1, 1, 5)
    X = np.tile([1.0, 0.3, 1.0], (5, 1))
    assert np.allclose(est.density(0, y, X), est.density(4, y, X))


def test_ghm_beats_global_mixture_on_scenario_II():
    data, truth = generate(ScenarioSpec("gaussian", "II", 20, 80, seed=17))
    ghm = em.fit(data, FitConfig(G=2, L=2, seed=0), "gaussian")
    gm = em.fit_global_mixture(data, 2, "gaussian")
    assert mise(MixtureDensity.from_fit(ghm), truth) < mise(MixtureDensity.broadcast(gm, 20), truth)
