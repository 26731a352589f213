from __future__ import annotations

import numpy as np
import pytest
from scipy.interpolate import make_smoothing_spline

from clothswitch import learner, metrics, oracle
from clothswitch.config import EnvConfig, NetConfig
from clothswitch.metrics import SIM_REWARD, UNCERTAINTY, MetricSeries

CFG = EnvConfig()


class _Fixed:
    """Ensemble stand-in returning preset predictions."""

    def __init__(self, preds):
        self.preds = np.asarray(preds, dtype=float)

    def __len__(self):
        return len(self.preds)

    def predict_batch(self, X):
        return self.preds


def _holdout(n: int, d: int = 4) -> metrics.HoldoutSet:
    return metrics.HoldoutSet(np.zeros((n, d)), np.zeros((n, 4)), list(range(n)))


def brute_force_uncertainty(preds: np.ndarray) -> float:
    E, n, M = preds.shape
    total = 0.0
    for s in range(n):
        acc = 0.0
        for j in range(M):
            mean = sum(preds[i, s, j] for i in range(E)) / E
            acc += sum((preds[i, s, j] - mean) ** 2 for i in range(E)) / E
        total += acc / M
    return total / n


def _series(ys, kind=SIM_REWARD, start=1) -> MetricSeries:
    return MetricSeries(kind, list(range(start, start + len(ys))), list(ys))


# --- series ---------------------------------------------------------------


def test_series_validation():
    with pytest.raises(ValueError):
        MetricSeries(SIM_REWARD, [1, 1], [0.0, 0.0])
    with pytest.raises(ValueError):
        MetricSeries(SIM_REWARD, [1], [np.nan])
    s = _series([0.1])
    with pytest.raises(ValueError):
        s.append(1, 0.2)


# --- uncertainty ----------------------------------------------------------


def test_identical_members_have_zero_uncertainty():
    p = learner.init_policy(4, NetConfig(hidden_sizes=(3,)), 0)
    ens = learner.Ensemble([p, p.copy()], [1, 2])
    assert metrics.epistemic_uncertainty(ens, _holdout(5)) == 0.0


def test_uncertainty_hand_example():
    preds = np.zeros((2, 1, 4))
    preds[1, 0, 0] = 2.0
    assert metrics.epistemic_uncertainty(_Fixed(preds), _holdout(1)) == pytest.approx(0.25)


def test_uncertainty_invariant_under_duplication():
    rng = np.random.default_rng(0)
    preds = rng.normal(size=(3, 6, 4))
    a = metrics.epistemic_uncertainty(_Fixed(preds), _holdout(6))
    b = metrics.epistemic_uncertainty(_Fixed(np.concatenate([preds, preds], axis=1)), _holdout(12))
    assert a == pytest.approx(b, abs=1e-15)


def test_uncertainty_matches_brute_force_on_fixtures():
    rng = np.random.default_rng(42)
    for _ in range(50):
        E, n = int(rng.integers(2, 7)), int(rng.integers(1, 9))
        preds = rng.uniform(-1, 1, size=(E, n, 4))
        got = metrics.epistemic_uncertainty(_Fixed(preds), _holdout(n))
        assert abs(got - brute_force_uncertainty(preds)) <= 1e-12


def test_uncertainty_rejects_small_inputs():
    with pytest.raises(ValueError):
        metrics.epistemic_uncertainty(_Fixed(np.zeros((1, 2, 4))), _holdout(2))
    with pytest.raises(ValueError):
        metrics.epistemic_uncertainty(_Fixed(np.zeros((2, 0, 4))), _holdout(0))


def test_uncertainty_leaves_inputs_unmodified():
    p = learner.init_policy(4, NetConfig(hidden_sizes=(3,)), 0)
    q = learner.init_policy(4, NetConfig(hidden_sizes=(3,)), 1)
    h = metrics.HoldoutSet(np.random.default_rng(0).normal(size=(5, 4)), np.zeros((5, 4)), [0])
    X = h.X.copy()
    metrics.epistemic_uncertainty(learner.Ensemble([p, q], [0, 1]), h)
    assert np.array_equal(X, h.X)


# --- spline ---------------------------------------------------------------


def test_zero_smoothing_interpolates():
    x = np.array([0.0, 1.0, 2.5, 3.0, 7.0])
    y = np.array([1.0, -2.0, 0.5, 4.0, 3.0])
    fit = metrics.smoothing_spline(x, y, 0.0)
    assert np.max(np.abs(fit(x) - y)) <= 1e-9


@pytest.mark.parametrize("lam", [0.1, 1.0, 10.0, 1e4])
def test_linear_data_reproduced(lam):
    x = np.arange(1, 13, dtype=float)
    y = 2.0 * x - 3.0
    fit = metrics.smoothing_spline(x, y, lam)
    assert np.max(np.abs(fit(x) - y)) <= 1e-9


def test_large_smoothing_approaches_least_squares_line():
    rng = np.random.default_rng(0)
    x = np.arange(1, 31, dtype=float)
    y = 0.5 * x + rng.normal(0, 1, size=x.size)
    line = np.polyval(np.polyfit(x, y, 1), x)
    fit = metrics.smoothing_spline(x, y, 1e12)
    assert np.max(np.abs(fit(x) - line)) < 1e-3


@pytest.mark.parametrize("lam", [0.5, 5.0, 50.0])
def test_spline_agrees_with_scipy(lam):
    rng = np.random.default_rng(3)
    x = np.sort(rng.uniform(0, 20, size=15))
    y = np.sin(x / 3) + rng.normal(0, 0.1, size=x.size)
    ours = metrics.smoothing_spline(x, y, lam)
    ref = make_smoothing_spline(x, y, lam=lam)
    grid = np.linspace(x[0], x[-1], 200)
    assert np.max(np.abs(ours(grid) - ref(grid))) < 1e-8


def test_spline_is_c2_and_natural():
    rng = np.random.default_rng(1)
    x = np.arange(10, dtype=float)
    fit = metrics.smoothing_spline(x, rng.normal(size=10), 2.0)
    a, b, c, d = fit.coeffs.T
    h = np.diff(fit.knots)
    # value, slope and curvature agree across interior knots
    assert np.allclose(a[:-1] + b[:-1] * h[:-1] + c[:-1] * h[:-1] ** 2 + d[:-1] * h[:-1] ** 3, a[1:])
    assert np.allclose(b[:-1] + 2 * c[:-1] * h[:-1] + 3 * d[:-1] * h[:-1] ** 2, b[1:])
    assert np.allclose(2 * c[:-1] + 6 * d[:-1] * h[:-1], 2 * c[1:])
    assert abs(c[0]) < 1e-12 and abs(2 * c[-1] + 6 * d[-1] * h[-1]) < 1e-10


def test_regularization_path_is_monotone():
    rng = np.random.default_rng(5)
    x = np.arange(1, 26, dtype=float)
    y = np.log(x) + rng.normal(0, 0.2, size=x.size)
    res = [np.sum((metrics.smoothing_spline(x, y, lam)(x) - y) ** 2) for lam in (1000, 100, 10, 1, 0.1)]
    assert all(b <= a + 1e-12 for a, b in zip(res, res[1:]))


def test_fit_spline_uses_only_earlier_points():
    s = _series([1, 2, 3, 4, 5, 100.0])
    fit = metrics.fit_spline(s, 6, 0.0)
    assert fit.knots.tolist() == [1, 2, 3, 4, 5]
    with pytest.raises(ValueError):
        metrics.fit_spline(s, 4, 1.0)


def test_eval_spline_examples():
    x = np.arange(1, 9, dtype=float)
    fit = metrics.smoothing_spline(x, 2 * x, 3.0)
    assert metrics.eval_spline(fit, 10.0) == pytest.approx(20.0, abs=1e-6)
    assert metrics.eval_spline(fit, 9.0) == pytest.approx(18.0, abs=1e-6)
    assert metrics.eval_spline(fit, 0.0) == pytest.approx(0.0, abs=1e-6)
    # continuity at a knot
    k = fit.knots[3]
    assert metrics.eval_spline(fit, k) == pytest.approx(metrics.eval_spline(fit, k - 1e-12), abs=1e-9)


def test_spline_gradient_examples():
    x = np.arange(1, 9, dtype=float)
    assert metrics.spline_gradient(metrics.smoothing_spline(x, 2 * x, 1.0), 6.0, 1.0) == pytest.approx(2.0, abs=1e-6)
    assert abs(metrics.spline_gradient(metrics.smoothing_spline(x, np.full(8, 0.3), 1.0), 20.0, 1.0)) <= 1e-9
    fit = metrics.smoothing_spline(x, x**2, 0.0)
    assert metrics.spline_gradient(fit, 5.0, 1.0) == pytest.approx(9.0, abs=1e-9)
    with pytest.raises(ValueError):
        metrics.spline_gradient(fit, 5.0, 0.0)


def test_spline_leaves_inputs_unmodified():
    x = np.arange(6, dtype=float)
    y = np.array([0.0, 1, 0, 1, 0, 1])
    xc, yc = x.copy(), y.copy()
    metrics.smoothing_spline(x, y, 1.0)
    assert np.array_equal(x, xc) and np.array_equal(y, yc)


# --- sim reward -----------------------------------------------------------


def test_default_rollout_count_is_five():
    import inspect

    assert inspect.signature(metrics.sim_reward).parameters["L"].default == 5


def test_oracle_policy_sim_reward():
    assert metrics.sim_reward(oracle.oracle_policy(CFG), CFG, L=5, seed=0) >= 0.85


def test_zero_policy_sim_reward_matches_initial():
    policy = learner.zero_policy(CFG.obs_size**2, NetConfig())
    trs = metrics.sim_reward_details(policy, CFG, 5, seed=1)
    init = np.mean([t.initial_coverage for t in trs])
    assert abs(metrics.sim_reward(policy, CFG, 5, seed=1) - init) <= 0.1


def test_sim_reward_reproducible_and_se_shrinks():
    policy = learner.init_policy(CFG.obs_size**2, NetConfig(hidden_sizes=(8,)), 0)
    a = metrics.sim_reward(policy, CFG, 5, seed=2)
    assert a == metrics.sim_reward(policy, CFG, 5, seed=2)
    se = {}
    for L in (5, 20):
        f = [t.final_coverage for t in metrics.sim_reward_details(policy, CFG, L, seed=2)]
        se[L] = np.std(f, ddof=1) / np.sqrt(L)
    assert se[20] < se[5]
    with pytest.raises(ValueError):
        metrics.sim_reward(policy, CFG, 0)


def test_cross_val_record_series():
    rec = metrics.CrossValRecord(_series([0.1, 0.2]), _series([0.3, 0.4], UNCERTAINTY))
    assert rec.series(UNCERTAINTY).values == [0.3, 0.4]
