"""Behavior-cloning MLP policy, Adam training, and bootstrapped ensembles.

The network maps a flattened grayscale observation to four outputs.  The first
two go through a sigmoid (pick point in [0, 1]) and the last two through tanh
(displacement in [-1, 1]), so predictions are always valid actions and the
whole map stays differentiable.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import NetConfig, OptimizerConfig

N_ACTION = 4
CHECKPOINT_VERSION = 1


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])

    def copy(self) -> "AdamState":
        return AdamState(self.step, [a.copy() for a in self.m], [a.copy() for a in self.v])


@dataclass
class PolicyNet:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"
    adam: AdamState | None = field(default=None, repr=False, compare=False)

    @property
    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def copy(self) -> "PolicyNet":
        return PolicyNet(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            None if self.adam is None else self.adam.copy(),
        )

    def with_params(self, params: list[np.ndarray]) -> "PolicyNet":
        k = len(self.weights)
        return PolicyNet(list(self.layer_sizes), list(params[:k]), list(params[k:]), self.activation, self.adam)

    def same_params(self, other: "PolicyNet") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.params, other.params))

    def __call__(self, state, obs):
        from .cloth import Action

        return Action.from_array(predict(self, obs))


def init_policy(input_size: int, net: NetConfig, seed: int) -> PolicyNet:
    sizes = [input_size, *net.hidden_sizes, N_ACTION]
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = np.sqrt(1.0 / fan_in) if i < len(sizes) - 2 else 0.1 * np.sqrt(1.0 / fan_in)
        weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return PolicyNet(sizes, weights, biases, net.activation)


def zero_policy(input_size: int, net: NetConfig) -> PolicyNet:
    p = init_policy(input_size, net, 0)
    return p.with_params([np.zeros_like(a) for a in p.params])


def _act(x, kind):
    return np.tanh(x) if kind == "tanh" else np.maximum(x, 0.0)


def _act_grad(h, kind):
    # derivative expressed through the activation output
    return 1.0 - h * h if kind == "tanh" else (h > 0).astype(h.dtype)


def _squash(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    out[..., :2] = 1.0 / (1.0 + np.exp(-z[..., :2]))
    out[..., 2:] = np.tanh(z[..., 2:])
    return out


def _squash_grad(y: np.ndarray) -> np.ndarray:
    g = np.empty_like(y)
    g[..., :2] = y[..., :2] * (1.0 - y[..., :2])
    g[..., 2:] = 1.0 - y[..., 2:] ** 2
    return g


def _as_batch(policy: PolicyNet, obs) -> np.ndarray:
    x = np.asarray(obs, dtype=float)
    x = x.reshape(1, -1) if x.ndim <= 2 and x.size == policy.layer_sizes[0] else x.reshape(len(x), -1)
    if x.shape[1] != policy.layer_sizes[0]:
        raise ValueError(f"observation has {x.shape[1]} values, network expects {policy.layer_sizes[0]}")
    return x


def forward(policy: PolicyNet, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    hs = [x]
    h = x
    last = len(policy.weights) - 1
    for i, (w, b) in enumerate(zip(policy.weights, policy.biases)):
        z = h @ w + b
        h = _squash(z) if i == last else _act(z, policy.activation)
        hs.append(h)
    return h, hs


def predict_batch(policy: PolicyNet, obs) -> np.ndarray:
    return forward(policy, _as_batch(policy, obs))[0]


def predict(policy: PolicyNet, obs) -> np.ndarray:
    """Action 4-vector for a single observation."""
    return predict_batch(policy, obs)[0]


def bc_loss_arrays(policy: PolicyNet, X: np.ndarray, Y: np.ndarray) -> float:
    if len(X) == 0:
        raise ValueError("bc_loss needs a nonempty batch")
    pred = predict_batch(policy, X)
    return float(np.mean((pred - Y) ** 2))


def bc_loss(policy: PolicyNet, batch) -> float:
    """Mean over the batch of the per-component mean squared action error."""
    if len(batch) == 0:
        raise ValueError("bc_loss needs a nonempty batch")
    X = np.stack([np.asarray(o, dtype=float).ravel() for o, _ in batch])
    Y = np.stack([_action_vec(a) for _, a in batch])
    return bc_loss_arrays(policy, X, Y)


def _action_vec(a) -> np.ndarray:
    return a.to_array() if hasattr(a, "to_array") else np.asarray(a, dtype=float).ravel()


def loss_and_grads(policy: PolicyNet, X: np.ndarray, Y: np.ndarray, l2: float = 0.0):
    """BC loss (+ 0.5 * l2 * |params|^2) and its gradient w.r.t. [weights..., biases...]."""
    out, hs = forward(policy, X)
    n = len(X)
    diff = out - Y
    loss = float(np.mean(diff**2))
    delta = (2.0 / (n * N_ACTION)) * diff * _squash_grad(out)
    gw, gb = [None] * len(policy.weights), [None] * len(policy.weights)
    for i in range(len(policy.weights) - 1, -1, -1):
        gw[i] = hs[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ policy.weights[i].T) * _act_grad(hs[i], policy.activation)
    grads = gw + gb
    if l2 > 0:
        loss += 0.5 * l2 * sum(float(np.sum(p * p)) for p in policy.params)
        grads = [g + l2 * p for g, p in zip(grads, policy.params)]
    return loss, grads


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, opt: OptimizerConfig) -> None:
    """In-place bias-corrected Adam update."""
    state.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= opt.learning_rate * (m / c1) / (np.sqrt(v / c2) + opt.epsilon)


class Dataset:
    """Aggregated (observation, action) pairs tagged with the iteration that produced them."""

    def __init__(self):
        self._x: list[np.ndarray] = []
        self._y: list[np.ndarray] = []
        self._it: list[np.ndarray] = []
        self._cache = None

    def add(self, observations, actions, iteration: int) -> None:
        if len(observations) == 0:
            return
        self._x.append(np.stack([np.asarray(o, dtype=float).ravel() for o in observations]))
        self._y.append(np.stack([_action_vec(a) for a in actions]))
        self._it.append(np.full(len(observations), iteration, dtype=int))
        self._cache = None

    def add_trajectories(self, trajectories, iteration: int) -> None:
        for tr in trajectories:
            self.add(tr.observations, tr.actions, iteration)

    def _arrays(self):
        if self._cache is None:
            if not self._x:
                self._cache = (np.zeros((0, 0)), np.zeros((0, N_ACTION)), np.zeros(0, dtype=int))
            else:
                self._cache = (np.concatenate(self._x), np.concatenate(self._y), np.concatenate(self._it))
        return self._cache

    @property
    def X(self) -> np.ndarray:
        return self._arrays()[0]

    @property
    def Y(self) -> np.ndarray:
        return self._arrays()[1]

    @property
    def source_iteration(self) -> np.ndarray:
        return self._arrays()[2]

    def __len__(self) -> int:
        return int(sum(len(x) for x in self._x))

    @classmethod
    def from_arrays(cls, X, Y, iteration: int = 0) -> "Dataset":
        d = cls()
        d.add(list(X), list(Y), iteration)
        return d


def symmetry_augment(X: np.ndarray, Y: np.ndarray, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply one of the 8 square symmetries per sample to images and actions.

    Bit 0 transposes (swaps u and v), bit 1 mirrors u, bit 2 mirrors v.  The cloth,
    its flat target and the camera are all centred, so the corner-pulling label of
    a transformed image is the transformed label.
    """
    n = len(X)
    side = int(round(np.sqrt(X.shape[1])))
    img = X.reshape(n, side, side).copy()
    act = np.array(Y, dtype=float, copy=True)
    t = (codes & 1).astype(bool)
    img[t] = img[t].transpose(0, 2, 1)
    act[t] = act[t][:, [1, 0, 3, 2]]
    mu = (codes & 2).astype(bool)
    img[mu] = img[mu][:, :, ::-1]
    act[mu, 0] = 1.0 - act[mu, 0]
    act[mu, 2] = -act[mu, 2]
    mv = (codes & 4).astype(bool)
    img[mv] = img[mv][:, ::-1, :]
    act[mv, 1] = 1.0 - act[mv, 1]
    act[mv, 3] = -act[mv, 3]
    return img.reshape(n, -1), act


def update_epoch(
    policy: PolicyNet,
    data: Dataset,
    opt: OptimizerConfig,
    seed: int,
    steps: int | None = None,
    indices: np.ndarray | None = None,
) -> PolicyNet:
    """`steps` (default `opt.steps_per_epoch`) Adam steps on seeded minibatches; returns a new policy.

    Minibatches are drawn with replacement from `indices` (default: the whole dataset)
    and, when `opt.symmetry_augmentation` is set, each sample gets a random square symmetry.
    Adam moments carry over between calls through `policy.adam`.
    """
    if len(data) == 0:
        raise ValueError("update_epoch needs a nonempty dataset")
    steps = opt.steps_per_epoch if steps is None else steps
    X, Y = data.X, data.Y
    pool = np.arange(len(X)) if indices is None else np.asarray(indices)
    rng = np.random.default_rng(seed)
    new = policy.copy()
    params = new.params
    state = new.adam if new.adam is not None else AdamState.zeros_like(params)
    for _ in range(steps):
        batch = pool[rng.integers(0, len(pool), size=opt.minibatch_size)]
        xb, yb = X[batch], Y[batch]
        if opt.symmetry_augmentation:
            xb, yb = symmetry_augment(xb, yb, rng.integers(0, 8, size=len(batch)))
        loss, grads = loss_and_grads(new, xb, yb, opt.l2_coefficient)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite BC loss after {state.step} Adam steps")
        adam_step(params, grads, state, opt)
    k = len(new.weights)
    new.weights, new.biases, new.adam = params[:k], params[k:], state
    return new


@dataclass
class Ensemble:
    members: list[PolicyNet]
    member_seeds: list[int]

    def __len__(self) -> int:
        return len(self.members)

    def predict_batch(self, X) -> np.ndarray:
        """Member predictions, shape (E, n, 4)."""
        return np.stack([predict_batch(m, X) for m in self.members])


def bootstrap_indices(n: int, seed: int) -> np.ndarray:
    """Per-member bootstrap resample of the whole dataset."""
    return np.random.default_rng(seed).integers(0, n, size=n)


def train_member(data: Dataset, opt: OptimizerConfig, net: NetConfig, seed: int, steps: int) -> PolicyNet:
    ss = np.random.SeedSequence(seed).spawn(3)
    init_seed, boot_seed, batch_seed = (int(s.generate_state(1)[0]) for s in ss)
    member = init_policy(data.X.shape[1], net, init_seed)
    return update_epoch(member, data, opt, batch_seed, steps=steps, indices=bootstrap_indices(len(data), boot_seed))


def train_ensemble(
    data: Dataset,
    opt: OptimizerConfig,
    E: int,
    seeds,
    net: NetConfig | None = None,
    steps: int | None = None,
    allow_duplicate_seeds: bool = False,
) -> Ensemble:
    seeds = [int(s) for s in seeds]
    if len(seeds) != E or E < 2:
        raise ValueError(f"need E = len(seeds) >= 2, got E={E} with {len(seeds)} seeds")
    if len(set(seeds)) != len(seeds) and not allow_duplicate_seeds:
        raise ValueError("ensemble member seeds must be distinct")
    net = NetConfig() if net is None else net
    steps = opt.steps_per_epoch if steps is None else steps
    return Ensemble([train_member(data, opt, net, s, steps) for s in seeds], seeds)


# ---------------------------------------------------------------------------
# checkpoints


def policy_to_dict(policy: PolicyNet, config_hash: str = "") -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "layer_sizes": list(policy.layer_sizes),
        "activation": policy.activation,
        "config_hash": config_hash,
        "weights": [w.tolist() for w in policy.weights],
        "biases": [b.tolist() for b in policy.biases],
    }


def policy_from_dict(d: dict) -> PolicyNet:
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
    weights = [np.array(w, dtype=float) for w in d["weights"]]
    biases = [np.array(b, dtype=float) for b in d["biases"]]
    sizes = list(d["layer_sizes"])
    if [w.shape for w in weights] != list(zip(sizes[:-1], sizes[1:])):
        raise ValueError("checkpoint weights do not match the architecture header")
    return PolicyNet(sizes, weights, biases, d["activation"])


def save_policy(policy: PolicyNet, path: str | Path, config_hash: str = "") -> None:
    # repr() of a float64 round-trips exactly through json
    Path(path).write_text(json.dumps(policy_to_dict(policy, config_hash)))


def load_policy(path: str | Path) -> PolicyNet:
    return policy_from_dict(json.loads(Path(path).read_text()))


def save_ensemble(ens: Ensemble, path: str | Path, config_hash: str = "") -> None:
    blob = {
        "version": CHECKPOINT_VERSION,
        "member_seeds": ens.member_seeds,
        "members": [policy_to_dict(m, config_hash) for m in ens.members],
    }
    Path(path).write_text(json.dumps(blob))


def load_ensemble(path: str | Path) -> Ensemble:
    blob = json.loads(Path(path).read_text())
    return Ensemble([policy_from_dict(m) for m in blob["members"]], list(blob["member_seeds"]))


def replace_optimizer(opt: OptimizerConfig, **kw) -> OptimizerConfig:
    return dataclasses.replace(opt, **kw)
