"""Switching metrics and the smoothing spline used to read them.

Two metrics are tracked per training iteration: the mean final coverage of L
rollouts in the source simulator, and the ensemble disagreement over a
holdout demonstration set.  Both are noisy, so decisions are made on a
penalized natural cubic smoothing spline fitted to the history.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cloth, oracle
from .config import EnvConfig
from .learner import Ensemble, PolicyNet

SIM_REWARD = "sim_reward"
UNCERTAINTY = "epistemic_uncertainty"
METRIC_KINDS = (SIM_REWARD, UNCERTAINTY)


@dataclass
class MetricSeries:
    kind: str
    iterations: list[int] = field(default_factory=list)
    values: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric kind {self.kind!r}")
        self.iterations = [int(i) for i in self.iterations]
        self.values = [float(v) for v in self.values]
        if any(b <= a for a, b in zip(self.iterations, self.iterations[1:])):
            raise ValueError("iterations must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("metric values must be finite")
        if len(self.iterations) != len(self.values):
            raise ValueError("iterations and values differ in length")

    def append(self, iteration: int, value: float) -> None:
        if self.iterations and iteration <= self.iterations[-1]:
            raise ValueError(f"iteration {iteration} does not follow {self.iterations[-1]}")
        if not np.isfinite(value):
            raise ValueError(f"non-finite {self.kind} value at iteration {iteration}")
        self.iterations.append(int(iteration))
        self.values.append(float(value))

    def prefix(self, n: int) -> "MetricSeries":
        return MetricSeries(self.kind, self.iterations[:n], self.values[:n])

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class HoldoutSet:
    X: np.ndarray  # (n, obs_size**2)
    Y: np.ndarray  # (n, 4)
    origin: list[int]  # demo seeds

    @classmethod
    def from_trajectories(cls, trajectories) -> "HoldoutSet":
        X = np.stack([np.asarray(o, dtype=float).ravel() for tr in trajectories for o in tr.observations])
        Y = np.stack([a.to_array() for tr in trajectories for a in tr.actions])
        return cls(X, Y, [tr.seed for tr in trajectories])

    def __len__(self) -> int:
        return len(self.X)


@dataclass
class CrossValRecord:
    """Metric curves of an offline reference run, used only for tuning thresholds."""

    reward: MetricSeries
    uncertainty: MetricSeries
    rollout_seeds: list[list[int]] = field(default_factory=list)

    def series(self, kind: str) -> MetricSeries:
        return self.reward if kind == SIM_REWARD else self.uncertainty


# ---------------------------------------------------------------------------
# metrics


def rollout_seeds(L: int, seed: int) -> list[int]:
    return [int(s) for s in np.random.default_rng(seed).integers(0, 2**31, size=L)]


def evaluate_episodes(policy, config: EnvConfig, seeds) -> list[oracle.Trajectory]:
    """Roll a policy out on the given start seeds; observation noise is seeded per episode."""
    return [oracle.rollout(policy, config, s, obs_seed=s + 1) for s in seeds]


def sim_reward_details(policy, config: EnvConfig, L: int, seed: int) -> list[oracle.Trajectory]:
    if L < 1:
        raise ValueError("L must be >= 1")
    return evaluate_episodes(policy, config, rollout_seeds(L, seed))


def sim_reward(policy, config: EnvConfig, L: int = 5, seed: int = 0) -> float:
    """Mean final coverage over L seeded source-environment episodes."""
    return float(np.mean([t.final_coverage for t in sim_reward_details(policy, config, L, seed)]))


def epistemic_uncertainty(ensemble: Ensemble, holdout: HoldoutSet) -> float:
    """Holdout mean of the per-component population variance across members, averaged over components."""
    if len(ensemble) < 2:
        raise ValueError("need at least two ensemble members")
    if len(holdout) == 0:
        raise ValueError("holdout set is empty")
    preds = ensemble.predict_batch(holdout.X)  # (E, n, M)
    return float(np.mean(np.var(preds, axis=0)))


# ---------------------------------------------------------------------------
# smoothing spline


@dataclass(frozen=True)
class SplineFit:
    knots: np.ndarray  # (n,)
    coeffs: np.ndarray  # (n-1, 4): a + b t + c t^2 + d t^3 with t = x - knot
    smoothing: float

    def __call__(self, x):
        return eval_spline(self, x)

    def derivative_at_end(self) -> float:
        h = self.knots[-1] - self.knots[-2]
        _, b, c, d = self.coeffs[-1]
        return float(b + 2 * c * h + 3 * d * h * h)

    def value_at_end(self) -> float:
        h = self.knots[-1] - self.knots[-2]
        a, b, c, d = self.coeffs[-1]
        return float(a + h * (b + h * (c + h * d)))


def smoothing_spline(x, y, lam: float) -> SplineFit:
    """Natural cubic spline minimizing sum (y - f(x))^2 + lam * integral f''(x)^2 dx."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if n < 3:
        raise ValueError("smoothing spline needs at least 3 points")
    if np.any(np.diff(x) <= 0):
        raise ValueError("abscissae must be strictly increasing")
    if lam < 0:
        raise ValueError("smoothing parameter must be >= 0")
    h = np.diff(x)
    Q = np.zeros((n, n - 2))
    R = np.zeros((n - 2, n - 2))
    for j in range(n - 2):
        Q[j, j] = 1.0 / h[j]
        Q[j + 1, j] = -1.0 / h[j] - 1.0 / h[j + 1]
        Q[j + 2, j] = 1.0 / h[j + 1]
        R[j, j] = (h[j] + h[j + 1]) / 3.0
        if j + 1 < n - 2:
            R[j, j + 1] = R[j + 1, j] = h[j + 1] / 6.0
    gamma_in = np.linalg.solve(R + lam * (Q.T @ Q), Q.T @ y)
    g = y - lam * (Q @ gamma_in)
    gamma = np.concatenate([[0.0], gamma_in, [0.0]])
    coeffs = np.empty((n - 1, 4))
    coeffs[:, 0] = g[:-1]
    coeffs[:, 1] = (g[1:] - g[:-1]) / h - h * (2 * gamma[:-1] + gamma[1:]) / 6.0
    coeffs[:, 2] = gamma[:-1] / 2.0
    coeffs[:, 3] = (gamma[1:] - gamma[:-1]) / (6.0 * h)
    return SplineFit(x, coeffs, float(lam))


def fit_spline(series: MetricSeries, upto: int, lam: float) -> SplineFit:
    """Smoothing spline through the points of `series` whose iteration is below `upto`."""
    xs = [i for i in series.iterations if i < upto]
    if len(xs) < 4:
        raise ValueError(f"need at least 4 points before iteration {upto}, have {len(xs)}")
    return smoothing_spline(xs, series.values[: len(xs)], lam)


def eval_spline(fit: SplineFit, x):
    """Piecewise-cubic value; linear continuation with the boundary slope outside the knots."""
    xa = np.asarray(x, dtype=float)
    k = fit.knots
    seg = np.clip(np.searchsorted(k, xa, side="right") - 1, 0, len(k) - 2)
    t = xa - k[seg]
    a, b, c, d = fit.coeffs[seg].T
    out = a + t * (b + t * (c + t * d))
    left = xa < k[0]
    right = xa > k[-1]
    out = np.where(left, fit.coeffs[0, 0] + fit.coeffs[0, 1] * (xa - k[0]), out)
    out = np.where(right, fit.value_at_end() + fit.derivative_at_end() * (xa - k[-1]), out)
    return float(out) if out.ndim == 0 else out


def spline_gradient(fit: SplineFit, x: float, delta: float = 1.0) -> float:
    """Backward finite difference of the spline at x."""
    if delta <= 0:
        raise ValueError("finite-difference gap must be positive")
    return (eval_spline(fit, x) - eval_spline(fit, x - delta)) / delta


def sample_spline(fit: SplineFit, xs) -> np.ndarray:
    return np.asarray(eval_spline(fit, np.asarray(xs, dtype=float)), dtype=float)
