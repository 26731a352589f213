"""Privileged corner-pulling demonstrator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cloth
from .cloth import Action, ClothState
from .config import EnvConfig


@dataclass
class Trajectory:
    observations: list[np.ndarray]
    actions: list[Action]
    coverages: list[float]  # coverage before the first action, then after each action
    seed: int
    done_reason: str | None = None
    states: list[ClothState] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def initial_coverage(self) -> float:
        return self.coverages[0]

    @property
    def final_coverage(self) -> float:
        return self.coverages[-1]

    def pairs(self):
        return list(zip(self.observations, self.actions))


def corner_displacements(state: ClothState, config: EnvConfig) -> np.ndarray:
    corners = cloth.corner_indices(config.grid_size)
    target = cloth.flat_positions(config)[corners, :2]
    return np.linalg.norm(state.positions[corners, :2] - target, axis=1)


def demo_action(state: ClothState, config: EnvConfig) -> Action:
    """Pull the most displaced corner back to its flat location.

    Ties go to the lowest corner index (order: (row 0, col 0), (0, n-1), (n-1, 0), (n-1, n-1)).
    """
    corners = cloth.corner_indices(config.grid_size)
    disp = corner_displacements(state, config)
    k = int(np.argmax(disp))  # first maximum wins ties
    pos = state.positions[corners[k], :2]
    goal = cloth.flat_positions(config)[corners[k], :2]
    u, v = cloth.world_to_image(config, pos)
    du, dv = (goal - pos) / config.image_extent
    return Action(u, v, du, dv)


def rollout(policy, config: EnvConfig, seed: int, obs_seed: int | None = None, keep_states: bool = False) -> Trajectory:
    """Run one episode.  `policy(state, obs) -> Action`.

    Observations are rendered with noise seeded from `obs_seed` (no noise when None).
    """
    state = cloth.reset(config, seed)
    covs = [cloth.coverage(state, config)]
    observations, actions, states = [], [], [state] if keep_states else []
    obs_rng = None if obs_seed is None else np.random.default_rng(obs_seed)
    reason = None
    while True:
        render_seed = None if obs_rng is None else int(obs_rng.integers(2**31))
        obs = cloth.render(state, config, render_seed)
        action = policy(state, obs)
        res = cloth.step(state, action, config)
        observations.append(obs)
        actions.append(action)
        covs.append(res.coverage)
        state = res.next_state
        if keep_states:
            states.append(state)
        if res.done:
            reason = res.done_reason
            break
    return Trajectory(observations, actions, covs, seed, reason, states)


def oracle_policy(config: EnvConfig):
    return lambda state, obs: demo_action(state, config)


def demo_seeds(count: int, seed: int, exclude=()) -> list[int]:
    """`count` distinct episode seeds from a seeded stream, skipping any in `exclude`."""
    rng = np.random.default_rng(seed)
    skip = set(int(e) for e in exclude)
    out: list[int] = []
    while len(out) < count:
        s = int(rng.integers(0, 2**31))
        if s not in skip:
            skip.add(s)
            out.append(s)
    return out


def generate_demos(config: EnvConfig, count: int, seed: int, exclude=(), noisy: bool = False) -> list[Trajectory]:
    """`count` oracle episodes on seeded crumpled starts.

    Observations are rendered noise-free for clean supervision; with `noisy` they carry the
    camera noise of `config`, seeded per episode.
    Episode seeds listed in `exclude` are never used, which keeps holdout sets disjoint.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    policy = oracle_policy(config)
    return [rollout(policy, config, s, obs_seed=s + 1 if noisy else None) for s in demo_seeds(count, seed, exclude)]
