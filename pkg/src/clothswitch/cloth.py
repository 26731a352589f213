"""Desk-scale mass-spring cloth with pick-and-place actions.

The cloth is a square grid of unit-mass points joined by structural and shear
springs.  An action picks the cloth point nearest to an image location, drags
it (lifted) along a displacement, releases it, and lets the cloth relax under
gravity, ground friction and spring damping.

There is no self-collision.  Layering is tracked with a tiny per-point stack
height stored in the z coordinate: points lifted during an action land on top
of everything else, everything else keeps its relative order.  Rendering and
pick projection use that height to decide which layer is visible.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .config import ConfigError, EnvConfig, ShiftSpec

GRAVITY = 9.81
LAYER_THICKNESS = 1e-4
DONE_TARGET = "target_reached"
DONE_LIMIT = "action_limit"
DONE_OUT = "out_of_bounds"


class EpisodeOver(RuntimeError):
    """Raised when stepping an episode that already used its action budget."""


@dataclass(frozen=True)
class Action:
    """Pick point in normalized image coordinates plus a normalized displacement."""

    pick_x: float
    pick_y: float
    delta_x: float
    delta_y: float

    def __post_init__(self) -> None:
        vals = [self.pick_x, self.pick_y, self.delta_x, self.delta_y]
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"action components must be finite, got {vals}")
        vals = [float(v) for v in vals]
        object.__setattr__(self, "pick_x", min(max(vals[0], 0.0), 1.0))
        object.__setattr__(self, "pick_y", min(max(vals[1], 0.0), 1.0))
        object.__setattr__(self, "delta_x", min(max(vals[2], -1.0), 1.0))
        object.__setattr__(self, "delta_y", min(max(vals[3], -1.0), 1.0))

    @classmethod
    def from_array(cls, a) -> "Action":
        a = np.asarray(a, dtype=float).ravel()
        return cls(a[0], a[1], a[2], a[3])

    def to_array(self) -> np.ndarray:
        return np.array([self.pick_x, self.pick_y, self.delta_x, self.delta_y])


@dataclass
class ClothState:
    positions: np.ndarray  # (n*n, 3)
    velocities: np.ndarray  # (n*n, 3)
    rest_length: float
    step_index: int = 0

    def copy(self) -> "ClothState":
        return ClothState(self.positions.copy(), self.velocities.copy(), self.rest_length, self.step_index)

    @property
    def grid_size(self) -> int:
        return int(round(np.sqrt(len(self.positions))))


@dataclass
class StepResult:
    next_state: ClothState
    coverage: float
    done: bool
    done_reason: str | None
    kinetic_energy: tuple[float, float] = (0.0, 0.0)  # first / last relaxation step


# ---------------------------------------------------------------------------
# geometry helpers


@lru_cache(maxsize=8)
def _springs(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Spring endpoint indices, rest-length multipliers, and the signed incidence matrix."""
    idx = np.arange(n * n).reshape(n, n)
    pairs, mult = [], []
    for a, b, m in (
        (idx[:, :-1], idx[:, 1:], 1.0),
        (idx[:-1, :], idx[1:, :], 1.0),
        (idx[:-1, :-1], idx[1:, 1:], np.sqrt(2.0)),
        (idx[:-1, 1:], idx[1:, :-1], np.sqrt(2.0)),
    ):
        pairs.append(np.stack([a.ravel(), b.ravel()], axis=1))
        mult.append(np.full(a.size, m))
    ij = np.concatenate(pairs)
    incidence = np.zeros((n * n, len(ij)))
    incidence[ij[:, 0], np.arange(len(ij))] = 1.0
    incidence[ij[:, 1], np.arange(len(ij))] = -1.0
    return ij, np.concatenate(mult), incidence


@lru_cache(maxsize=8)
def _triangles(n: int) -> np.ndarray:
    """Two counter-clockwise triangles per grid quad, shape (2*(n-1)^2, 3)."""
    idx = np.arange(n * n).reshape(n, n)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
    # rows run along +y, columns along +x, so (a, b, c) is counter-clockwise
    return np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])


def corner_indices(n: int) -> np.ndarray:
    return np.array([0, n - 1, n * (n - 1), n * n - 1])


def flat_positions(config: EnvConfig) -> np.ndarray:
    n = config.grid_size
    s = np.linspace(-config.cloth_side / 2, config.cloth_side / 2, n)
    xx, yy = np.meshgrid(s, s)  # row index -> y, column index -> x
    return np.stack([xx.ravel(), yy.ravel(), np.zeros(n * n)], axis=1)


def flat_state(config: EnvConfig) -> ClothState:
    pos = flat_positions(config)
    return ClothState(pos, np.zeros_like(pos), config.rest_length, 0)


def image_origin(config: EnvConfig) -> float:
    return -config.image_extent / 2


def image_to_world(config: EnvConfig, u: float, v: float) -> np.ndarray:
    e = config.image_extent
    return np.array([image_origin(config) + u * e, image_origin(config) + v * e])


def world_to_image(config: EnvConfig, xy: np.ndarray) -> np.ndarray:
    return (np.asarray(xy)[..., :2] - image_origin(config)) / config.image_extent


def _raster_tris(xy: np.ndarray, tris: np.ndarray, lo: float, cell: float, res: int, order=None):
    """Yield (triangle index, row slice, col slice, inside-mask) for cells whose centers fall in a triangle."""
    p = xy[tris]  # (T, 3, 2)
    seq = range(len(tris)) if order is None else order
    for t in seq:
        tri = p[t]
        x0, y0 = tri[0]
        x1, y1 = tri[1]
        x2, y2 = tri[2]
        area2 = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area2) < 1e-14:
            continue
        c0 = max(int(np.ceil((tri[:, 0].min() - lo) / cell - 0.5)), 0)
        c1 = min(int(np.floor((tri[:, 0].max() - lo) / cell - 0.5)), res - 1)
        r0 = max(int(np.ceil((tri[:, 1].min() - lo) / cell - 0.5)), 0)
        r1 = min(int(np.floor((tri[:, 1].max() - lo) / cell - 0.5)), res - 1)
        if c1 < c0 or r1 < r0:
            continue
        cx = lo + (np.arange(c0, c1 + 1) + 0.5) * cell
        cy = lo + (np.arange(r0, r1 + 1) + 0.5) * cell
        X, Y = np.meshgrid(cx, cy)
        # edge functions, normalized by orientation so inside is >= 0
        w0 = ((x1 - X) * (y2 - Y) - (x2 - X) * (y1 - Y)) / area2
        w1 = ((x2 - X) * (y0 - Y) - (x0 - X) * (y2 - Y)) / area2
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-12) & (w1 >= -1e-12) & (w2 >= -1e-12)
        yield t, slice(r0, r1 + 1), slice(c0, c1 + 1), inside, area2


def footprint_mask(state: ClothState, config: EnvConfig, resolution: int | None = None) -> np.ndarray:
    """Boolean occupancy of the workspace square on a grid with `resolution` cells per cloth side."""
    res_side = config.coverage_resolution if resolution is None else resolution
    half = config.workspace_margin * config.cloth_side
    cell = config.cloth_side / res_side
    res = int(round(2 * half / cell))
    mask = np.zeros((res, res), dtype=bool)
    xy = state.positions[:, :2]
    for _, rs, cs, inside, _ in _raster_tris(xy, _triangles(state.grid_size), -half, cell, res):
        mask[rs, cs] |= inside
    return mask


def coverage(state: ClothState, config: EnvConfig, resolution: int | None = None) -> float:
    """Covered workspace area divided by the flat cloth area."""
    res_side = config.coverage_resolution if resolution is None else resolution
    mask = footprint_mask(state, config, res_side)
    return float(mask.sum()) / float(res_side * res_side)


def render(state: ClothState, config: EnvConfig, seed: int | None = 0, supersample: int = 2) -> np.ndarray:
    """Top-down grayscale image in [0, 1], shape (obs_size, obs_size); row index follows +y."""
    n_px = config.obs_size * supersample
    cell = config.image_extent / n_px
    img = np.full((n_px, n_px), config.background_brightness)
    tris = _triangles(state.grid_size)
    depth = state.positions[tris, 2].mean(axis=1)
    order = np.argsort(depth, kind="stable")
    for _, rs, cs, inside, area2 in _raster_tris(
        state.positions[:, :2], tris, image_origin(config), cell, n_px, order
    ):
        shade = config.face_brightness_top if area2 > 0 else config.face_brightness_bottom
        img[rs, cs] = np.where(inside, shade, img[rs, cs])
    if supersample > 1:
        img = img.reshape(config.obs_size, supersample, config.obs_size, supersample).mean(axis=(1, 3))
    if config.obs_noise_std > 0 and seed is not None:
        rng = np.random.default_rng(seed)
        img = img + rng.normal(0.0, config.obs_noise_std, img.shape)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# dynamics


def _forces(x: np.ndarray, v: np.ndarray, config: EnvConfig, rest: np.ndarray, ij, incidence) -> np.ndarray:
    d = x[ij[:, 1]] - x[ij[:, 0]]
    length = np.linalg.norm(d, axis=1)
    u = d / np.maximum(length, 1e-12)[:, None]
    dv = v[ij[:, 1]] - v[ij[:, 0]]
    mag = config.spring_stiffness * (length - rest) + config.spring_damping * np.einsum("ij,ij->i", dv, u)
    f = incidence @ (mag[:, None] * u)  # force on i along +u, on j along -u
    f[:, 2] -= GRAVITY
    return f


def _integrate(x, v, config: EnvConfig, rest, ij, incidence, pinned: int | None = None, target=None):
    dt = config.integration_dt
    a = _forces(x, v, config, rest, ij, incidence)
    v = v + dt * a
    if pinned is not None:
        v[pinned] = (target - x[pinned]) / dt
    x = x + dt * v
    on_ground = x[:, 2] <= 0.0
    x[on_ground, 2] = 0.0
    v[on_ground, 2] = np.maximum(v[on_ground, 2], 0.0)
    v[on_ground, :2] *= np.exp(-config.ground_friction * dt)
    if pinned is not None:
        x[pinned] = target
    return x, v


def project_pick(state: ClothState, config: EnvConfig, pick_xy: np.ndarray) -> int | None:
    """Cloth point grasped at a pick location, or None when nothing is within the pick radius.

    A pick within `pinch_radius_px` of a point grasps that point.  Otherwise a cloth corner
    within `corner_grasp_radius_px` is caught (the nearest one), since a free corner slides
    into the closing jaws.  Otherwise the gripper takes the top layer: among points within
    the radius, only those on the highest stack level are candidates, and the nearest of
    them wins (then lower index).
    """
    radius = config.pick_radius_px * config.image_extent / config.obs_size
    dist = np.linalg.norm(state.positions[:, :2] - pick_xy, axis=1)
    near = np.flatnonzero(dist <= radius)
    if len(near) == 0:
        return None
    pinch = config.pinch_radius_px * config.image_extent / config.obs_size
    if dist[near].min() <= pinch:
        # a pick placed right on a point pinches that point, whatever its layer
        return int(near[np.argmin(dist[near])])
    corners = corner_indices(config.grid_size)
    catch = config.corner_grasp_radius_px * config.image_extent / config.obs_size
    if dist[corners].min() <= catch:
        return int(corners[np.argmin(dist[corners])])
    level = np.round(state.positions[near, 2] / LAYER_THICKNESS)
    top = near[level == level.max()]
    return int(top[np.argmin(dist[top])])


def _restack(z_before: np.ndarray, lifted: np.ndarray) -> np.ndarray:
    """New stack heights: lifted points go above everything, the rest keep their relative order."""
    level = np.round(z_before / LAYER_THICKNESS)
    if lifted.any():
        level = np.where(lifted, level.max() + 1, level)
    ranks = np.unique(level, return_inverse=True)[1]
    return ranks.astype(float) * LAYER_THICKNESS


def drag(state: ClothState, config: EnvConfig, index: int, place_xy: np.ndarray):
    """Lift point `index`, carry it to `place_xy`, release, relax.  Returns (state, (ke_first, ke_last))."""
    n = state.grid_size
    ij, mult, incidence = _springs(n)
    rest = mult * state.rest_length
    z_before = state.positions[:, 2].copy()
    x = state.positions.copy()
    x[:, 2] = 0.0
    v = state.velocities.copy()
    v[:, 2] = 0.0
    start = x[index].copy()
    end = np.array([place_xy[0], place_xy[1], 0.0])
    max_z = np.zeros(len(x))
    dist = float(np.linalg.norm(end[:2] - start[:2]))
    steps = max(config.drag_steps, int(np.ceil(dist / (config.drag_speed * config.integration_dt))))
    for k in range(1, steps + 1):
        t = k / steps
        s = t * t * (3.0 - 2.0 * t)  # eased carry: zero speed at pick and at release
        target = start + s * (end - start)
        target[2] = config.lift_height * min(1.0, 5.0 * t, 5.0 * (1.0 - t))
        x, v = _integrate(x, v, config, rest, ij, incidence, index, target)
        np.maximum(max_z, x[:, 2], out=max_z)
    ke_first = ke_last = 0.0
    for k in range(config.relaxation_steps):
        x, v = _integrate(x, v, config, rest, ij, incidence)
        ke = 0.5 * float(np.sum(v * v))
        if k == 0:
            ke_first = ke
        ke_last = ke
    lifted = max_z > 0.25 * config.lift_height
    x[:, 2] = _restack(z_before, lifted)
    v[:, 2] = 0.0
    return ClothState(x, v, state.rest_length, state.step_index), (ke_first, ke_last)


def out_of_bounds(state: ClothState, config: EnvConfig) -> bool:
    half = config.workspace_margin * config.cloth_side
    return bool(np.any(np.abs(state.positions[:, :2]) > half))


def apply_action(state: ClothState, action: Action, config: EnvConfig):
    """Physics of one pick-and-place without episode bookkeeping.  Returns (state, kinetic energies)."""
    pick = image_to_world(config, action.pick_x, action.pick_y)
    index = project_pick(state, config, pick)
    if index is None or (action.delta_x == 0.0 and action.delta_y == 0.0):
        # a missed grasp, or a grasp released where it was taken, leaves the cloth alone
        return state.copy(), (0.0, 0.0)
    # place points are projected into the camera's view of the workspace
    half = config.image_extent / 2
    place = state.positions[index, :2] + np.array([action.delta_x, action.delta_y]) * config.image_extent
    place = np.clip(place, -half, half)
    return drag(state, config, index, place)


def step(state: ClothState, action: Action, config: EnvConfig) -> StepResult:
    if state.step_index >= config.max_actions:
        raise EpisodeOver(f"episode already used {state.step_index} of {config.max_actions} actions")
    nxt, ke = apply_action(state, action, config)
    nxt.step_index = state.step_index + 1
    if not (np.all(np.isfinite(nxt.positions)) and np.all(np.isfinite(nxt.velocities))):
        raise FloatingPointError("cloth simulation produced non-finite coordinates")
    cov = coverage(nxt, config)
    if out_of_bounds(nxt, config):
        reason = DONE_OUT
    elif cov >= config.coverage_target:
        reason = DONE_TARGET
    elif nxt.step_index >= config.max_actions:
        reason = DONE_LIMIT
    else:
        reason = None
    return StepResult(nxt, cov, reason is not None, reason, ke)


def crumple_action(state: ClothState, config: EnvConfig, corner: int, reach: float, rng: np.random.Generator) -> Action:
    """Fold `corner` toward the cloth centroid; reach 1 lands it on the centroid, more carries it past."""
    i = int(corner_indices(config.grid_size)[corner])
    centroid = state.positions[:, :2].mean(axis=0)
    place = state.positions[i, :2] + reach * (centroid - state.positions[i, :2])
    place += rng.normal(0.0, config.crumple_jitter * config.cloth_side, size=2)
    place = np.clip(place, -0.45 * config.cloth_side, 0.45 * config.cloth_side)
    u, v = world_to_image(config, state.positions[i])
    du, dv = (place - state.positions[i, :2]) / config.image_extent
    return Action(u, v, du, dv)


def reset(config: EnvConfig, seed: int) -> ClothState:
    """Flat cloth crumpled by seeded corner folds.

    Folds use distinct corners (cycling after four) and get deeper one after another,
    so the last and deepest fold lies on top.
    """
    rng = np.random.default_rng(seed)
    state = flat_state(config)
    n = config.crumple_actions
    order = rng.permutation(4)
    lo, hi = config.crumple_reach
    width = (hi - lo) / max(n, 1)
    for k in range(n):
        reach = rng.uniform(lo + k * width, lo + (k + 0.8) * width)
        state, _ = apply_action(state, crumple_action(state, config, int(order[k % 4]), reach, rng), config)
    state.step_index = 0
    return state


def make_target_env(source: EnvConfig, shift: ShiftSpec) -> EnvConfig:
    """Twin environment with scaled dynamics and offset rendering."""
    fields = dict(
        spring_stiffness=source.spring_stiffness * shift.stiffness_scale,
        spring_damping=source.spring_damping * shift.damping_scale,
        ground_friction=source.ground_friction * shift.friction_scale,
        face_brightness_top=source.face_brightness_top + shift.top_brightness_offset,
        face_brightness_bottom=source.face_brightness_bottom + shift.bottom_brightness_offset,
        background_brightness=source.background_brightness + shift.background_offset,
        obs_noise_std=source.obs_noise_std + shift.noise_offset,
    )
    for name in ("face_brightness_top", "face_brightness_bottom", "background_brightness"):
        if not 0.0 <= fields[name] <= 1.0:
            raise ConfigError(f"shifted {name}={fields[name]:.3f} leaves [0, 1]")
    if abs(fields["face_brightness_top"] - fields["face_brightness_bottom"]) < 0.2 - 1e-12:
        raise ConfigError("shifted face contrast drops below 0.2")
    if fields["obs_noise_std"] < 0:
        raise ConfigError("shifted obs_noise_std is negative")
    return dataclasses.replace(source, **fields)
