"""Value- and gradient-based stopping conditions and the four switching criteria.

A criterion pairs one metric series with one stopping condition.  Every
decision at iteration i looks only at a spline fitted to the points before i,
evaluated (or differenced) at i.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .config import SplineConfig, StoppingConfig
from .metrics import SIM_REWARD, UNCERTAINTY, CrossValRecord, MetricSeries, eval_spline, fit_spline, spline_gradient

VALUE = "value"
GRADIENT = "gradient"
AT_LEAST = "at_least"
AT_MOST = "at_most"

NOT_FIRED = "not_fired"
VALUE_THRESHOLD = "value_threshold"
CONSEC_COUNTER = "consec_counter"
TOTAL_COUNTER = "total_counter"

# Table-style names, in display order
CRITERIA = (
    ("reward_value", SIM_REWARD, VALUE),
    ("reward_gradient", SIM_REWARD, GRADIENT),
    ("uncertainty_value", UNCERTAINTY, VALUE),
    ("uncertainty_gradient", UNCERTAINTY, GRADIENT),
)
SPLINE_MIN_POINTS = 4


@dataclass(frozen=True)
class ValueStopConfig:
    threshold: float
    direction: str
    min_history: int = 10

    def __post_init__(self) -> None:
        if self.direction not in (AT_LEAST, AT_MOST):
            raise ValueError(f"unknown direction {self.direction!r}")
        if not np.isfinite(self.threshold):
            raise ValueError("threshold must be finite")
        if self.min_history < 4:
            raise ValueError("min_history must be >= 4")


@dataclass(frozen=True)
class GradientStopConfig:
    epsilon: float
    U: int
    V: int
    min_history: int = 10

    def __post_init__(self) -> None:
        if not self.epsilon > 0 or not np.isfinite(self.epsilon):
            raise ValueError("epsilon must be a positive finite number")
        if self.U < 1 or self.V < 1:
            raise ValueError("U and V must be >= 1")
        if self.min_history < 4:
            raise ValueError("min_history must be >= 4")


@dataclass(frozen=True)
class GradientStopState:
    w_consec: int = 0
    w_total: int = 0
    last_decision_iteration: int = 0


@dataclass(frozen=True)
class StopDecision:
    fired: bool
    iteration: int
    reason: str = NOT_FIRED
    diagnostic: float | None = None

    def __post_init__(self) -> None:
        if self.fired == (self.reason == NOT_FIRED):
            raise ValueError("fired decisions need a reason, unfired ones must not have one")

    def to_dict(self) -> dict:
        return {"fired": self.fired, "iteration": self.iteration, "reason": self.reason, "diagnostic": self.diagnostic}


def _ready(series: MetricSeries, min_history: int) -> bool:
    if len(series) == 0:
        raise ValueError("series is empty")
    # the spline is fitted on the points before the current one
    return len(series) >= min_history and len(series) - 1 >= SPLINE_MIN_POINTS


def value_stop_update(cfg: ValueStopConfig, series: MetricSeries, lam: float) -> StopDecision:
    """Fire when the spline over earlier points, evaluated at the current iteration, crosses A."""
    i = series.iterations[-1]
    if not _ready(series, cfg.min_history):
        return StopDecision(False, i)
    f = float(eval_spline(fit_spline(series, i, lam), i))
    hit = f >= cfg.threshold if cfg.direction == AT_LEAST else f <= cfg.threshold
    return StopDecision(bool(hit), i, VALUE_THRESHOLD if hit else NOT_FIRED, f)


def current_gradient(series: MetricSeries, lam: float, gap: float = 1.0) -> float:
    i = series.iterations[-1]
    return float(spline_gradient(fit_spline(series, i, lam), i, gap))


def gradient_stop_update(
    cfg: GradientStopConfig, state: GradientStopState, series: MetricSeries, lam: float, gap: float = 1.0
) -> tuple[GradientStopState, StopDecision]:
    """Advance the low-gradient counters by one check and decide."""
    i = series.iterations[-1]
    if not _ready(series, cfg.min_history):
        return state, StopDecision(False, i)
    g = current_gradient(series, lam, gap)
    if abs(g) <= cfg.epsilon:
        state = GradientStopState(state.w_consec + 1, state.w_total + 1, i)
    else:
        state = GradientStopState(0, state.w_total, i)
    if state.w_consec > cfg.U:
        return state, StopDecision(True, i, CONSEC_COUNTER, g)
    if state.w_total > cfg.V:
        return state, StopDecision(True, i, TOTAL_COUNTER, g)
    return state, StopDecision(False, i, NOT_FIRED, g)


# ---------------------------------------------------------------------------
# criteria


@dataclass
class Criterion:
    """One switching criterion; latches its first firing."""

    name: str
    metric: str
    condition: str
    smoothing: float
    value: ValueStopConfig | None = None
    gradient: GradientStopConfig | None = None
    gap: float = 1.0
    state: GradientStopState = field(default_factory=GradientStopState)
    first_fire: StopDecision | None = None
    last: StopDecision | None = None

    def update(self, series: MetricSeries) -> StopDecision:
        if series.kind != self.metric:
            raise ValueError(f"{self.name} reads {self.metric}, got {series.kind}")
        if self.condition == VALUE:
            d = value_stop_update(self.value, series, self.smoothing)
        else:
            self.state, d = gradient_stop_update(self.gradient, self.state, series, self.smoothing, self.gap)
        self.last = d
        if d.fired and self.first_fire is None:
            self.first_fire = d
        return d

    @property
    def fired_iteration(self) -> int | None:
        return None if self.first_fire is None else self.first_fire.iteration

    def reset(self) -> "Criterion":
        return replace(self, state=GradientStopState(), first_fire=None, last=None)

    def params(self) -> dict:
        out = {"name": self.name, "metric": self.metric, "condition": self.condition, "smoothing": self.smoothing}
        if self.value is not None:
            out.update(threshold=self.value.threshold, direction=self.value.direction, min_history=self.value.min_history)
        if self.gradient is not None:
            g = self.gradient
            out.update(epsilon=g.epsilon, U=g.U, V=g.V, min_history=g.min_history, gap=self.gap)
        return out


def criterion_from_params(d: dict) -> Criterion:
    if d["condition"] == VALUE:
        vc = ValueStopConfig(float(d["threshold"]), d["direction"], int(d["min_history"]))
        return Criterion(d["name"], d["metric"], VALUE, float(d["smoothing"]), value=vc)
    gc = GradientStopConfig(float(d["epsilon"]), int(d["U"]), int(d["V"]), int(d["min_history"]))
    return Criterion(d["name"], d["metric"], GRADIENT, float(d["smoothing"]), gradient=gc, gap=float(d.get("gap", 1.0)))


def scan(criterion: Criterion, series: MetricSeries) -> StopDecision:
    """Replay a criterion over every prefix of `series`; returns the first firing or the last check."""
    c = criterion.reset()
    last = None
    for n in range(1, len(series) + 1):
        last = c.update(series.prefix(n))
        if last.fired:
            return last
    return last


# ---------------------------------------------------------------------------
# tuning from a reference run


def _smoothed(series: MetricSeries, lam: float) -> np.ndarray:
    fit = fit_spline(series, series.iterations[-1] + 1, lam)
    return np.asarray(eval_spline(fit, np.asarray(series.iterations, dtype=float)))


def live_gradients(series: MetricSeries, lam: float, min_history: int, gap: float = 1.0) -> dict[int, float]:
    """The gradient each check would see on this series, keyed by iteration."""
    out = {}
    for n in range(max(min_history, SPLINE_MIN_POINTS + 1), len(series) + 1):
        out[series.iterations[n - 1]] = current_gradient(series.prefix(n), lam, gap)
    return out


def tune_epsilon(series: MetricSeries, stopping: StoppingConfig, lam: float, gap: float = 1.0) -> float:
    """Largest epsilon that labels at most `early_quantile` of the early checks as flat."""
    grads = live_gradients(series, lam, stopping.min_history, gap)
    cutoff = series.iterations[0] + stopping.early_fraction * (series.iterations[-1] - series.iterations[0])
    early = sorted(abs(g) for i, g in grads.items() if i <= max(cutoff, min(grads)))
    allowed = int(np.floor(stopping.early_quantile * len(early)))
    # any epsilon strictly below the (allowed+1)-th smallest magnitude keeps the count <= allowed
    return float(np.nextafter(early[allowed], 0.0)) if early[allowed] > 0 else float(np.finfo(float).tiny)


def acceptable_iteration(series: MetricSeries, stopping: StoppingConfig, lam: float) -> int:
    """First iteration at which the smoothed reference curve is within reach of its plateau."""
    s = _smoothed(series, lam)
    if series.kind == SIM_REWARD:
        lo = s[0]
        ok = s >= lo + stopping.acceptable_fraction * (s.max() - lo)
    else:
        hi = s[0]
        ok = s <= hi - stopping.acceptable_fraction * (hi - s.min())
    return int(np.asarray(series.iterations)[np.argmax(ok)])


def tune_counters(
    series: MetricSeries, epsilon: float, stopping: StoppingConfig, lam: float, gap: float = 1.0
) -> tuple[int, int]:
    """Smallest (U, V) whose firing on the reference run is not before the acceptable iteration.

    Among admissible pairs the earliest firing wins; remaining ties go to the larger
    (more conservative) U and then V.
    """
    floor_it = acceptable_iteration(series, stopping, lam)
    grads = live_gradients(series, lam, stopping.min_history, gap)
    flat = [(i, abs(g) <= epsilon) for i, g in grads.items()]
    best = None
    for U, V in itertools.product(range(1, stopping.max_U + 1), range(1, stopping.max_V + 1)):
        fire = _counter_fire(flat, U, V)
        if fire is None or fire < floor_it:
            continue
        key = (fire, -U, -V)
        if best is None or key < best[0]:
            best = (key, U, V)
    if best is None:
        # nothing admissible fires on the reference run; fall back to the most permissive pair
        return stopping.max_U, stopping.max_V
    return best[1], best[2]


def _counter_fire(flat, U: int, V: int) -> int | None:
    c = t = 0
    for i, low in flat:
        if low:
            c += 1
            t += 1
        else:
            c = 0
        if c > U or t > V:
            return i
    return None


def make_criterion(
    metric_kind: str,
    condition_kind: str,
    tuning: CrossValRecord,
    stopping: StoppingConfig | None = None,
    spline: SplineConfig | None = None,
) -> Criterion:
    """Build one of the four criteria with thresholds derived from a reference run."""
    stopping = stopping or StoppingConfig()
    spline = spline or SplineConfig()
    if metric_kind not in (SIM_REWARD, UNCERTAINTY) or condition_kind not in (VALUE, GRADIENT):
        raise ValueError(f"unknown criterion {metric_kind}/{condition_kind}")
    series = tuning.series(metric_kind)
    if len(series) < stopping.min_history:
        raise ValueError(f"tuning series has {len(series)} points, need at least {stopping.min_history}")
    lam = spline.smoothing
    name = [n for n, m, c in CRITERIA if m == metric_kind and c == condition_kind][0]
    if condition_kind == VALUE:
        s = _smoothed(series, lam)
        if metric_kind == SIM_REWARD:
            vc = ValueStopConfig(float(s.max()) * (1.0 - stopping.reward_slack), AT_LEAST, stopping.min_history)
        else:
            vc = ValueStopConfig(float(s.min()) * (1.0 + stopping.uncertainty_margin), AT_MOST, stopping.min_history)
        return Criterion(name, metric_kind, VALUE, lam, value=vc)
    eps = tune_epsilon(series, stopping, lam, spline.gradient_gap)
    U, V = tune_counters(series, eps, stopping, lam, spline.gradient_gap)
    gc = GradientStopConfig(eps, U, V, stopping.min_history)
    return Criterion(name, metric_kind, GRADIENT, lam, gradient=gc, gap=spline.gradient_gap)


def make_criteria(tuning: CrossValRecord, stopping: StoppingConfig, spline: SplineConfig) -> list[Criterion]:
    return [make_criterion(m, c, tuning, stopping, spline) for _, m, c in CRITERIA]
