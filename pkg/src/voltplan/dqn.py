"""Deep Q-learning over the mission MDP.

A small fully connected Q-network (two rectified-linear hidden layers,
plain stochastic gradient descent, written on numpy so the gradients can
be checked against finite differences), a uniform replay buffer, an
epsilon-greedy behaviour policy, and a periodically synchronized target
network.  Actions live in a fixed global enumeration
(destinations-sorted-by-id plus the station, times the four altitudes);
illegal entries are masked to -inf at selection time.

State encoding (fixed a priori so checkpoints are portable across maps of
the same size): [pc1, pc2, (v - 3.0)/1.2, x/radius, y/radius, i/n,
visited-mask bits].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .env import STATION, Action, EnvState, MissionEnv, MissionMap, ScenarioConfig, legal_actions

_MASK64 = (1 << 64) - 1


def splitmix64(master_seed: int, index: int) -> int:
    """Derive the index-th child seed from a master seed (splitmix step)."""
    x = (master_seed + (index + 1) * 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 3000
    discount: float = 0.99
    learning_rate: float = 1e-3
    batch_size: int = 64
    buffer_capacity: int = 20_000
    target_sync_every: int = 500   # gradient steps between hard target copies
    eps_start: float = 1.0
    eps_decay: float = 0.999       # per episode
    eps_floor: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.discount < 1:
            raise ValueError("discount must lie in [0, 1)")
        if not 0 < self.eps_floor <= self.eps_start <= 1:
            raise ValueError("epsilon schedule must satisfy 0 < floor <= start <= 1")

    def epsilon(self, episode: int) -> float:
        return max(self.eps_floor, self.eps_start * self.eps_decay ** episode)


class ActionSpace:
    """Fixed global (target, altitude) enumeration for one map."""

    def __init__(self, mmap: MissionMap, altitudes: tuple[int, ...]):
        self.targets = list(mmap.sorted_ids) + [STATION]
        self.altitudes = tuple(altitudes)
        self.actions = [Action(target=t, altitude=a) for t in self.targets for a in self.altitudes]
        self._index = {action: i for i, action in enumerate(self.actions)}

    def __len__(self) -> int:
        return len(self.actions)

    def index(self, action: Action) -> int:
        return self._index[action]

    def mask(self, legal: list[Action]) -> np.ndarray:
        out = np.zeros(len(self.actions), dtype=bool)
        for a in legal:
            out[self._index[a]] = True
        return out


def norm_radius(mmap: MissionMap) -> float:
    """Coordinate scale used to normalize positions into roughly [-1, 1]."""
    coords = [abs(c) for d in mmap.destinations for c in (d.x, d.y)]
    coords += [abs(c) for c in mmap.station]
    return max(1.0, max(coords))


def encode_state(state: EnvState, mmap: MissionMap, radius: float) -> np.ndarray:
    n = len(mmap.destinations)
    bits = [(state.visited_mask >> k) & 1 for k in range(n)]
    return np.array(
        [state.pc1, state.pc2, (state.v - 3.0) / 1.2,
         state.pos[0] / radius, state.pos[1] / radius,
         state.reached_count / n, *bits],
        dtype=np.float64,
    )


class QNetwork:
    """Fully connected ReLU network mapping encoded states to action values."""

    def __init__(self, layer_sizes: list[int], rng: np.random.Generator | None = None):
        self.layer_sizes = list(layer_sizes)
        rng = rng or np.random.default_rng(0)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            self.weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {x.shape[-1]}")
        h = x
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(0.0, h @ W + b)
        return h @ self.weights[-1] + self.biases[-1]

    def _forward_cached(self, x: np.ndarray):
        pre = []
        h = x
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = h @ W + b
            pre.append((h, a))
            h = np.maximum(0.0, a)
        q = h @ self.weights[-1] + self.biases[-1]
        pre.append((h, q))
        return q, pre

    def backward(self, cache, dq: np.ndarray):
        """Gradients of a scalar loss given d(loss)/d(outputs)."""
        grads_w, grads_b = [], []
        grad = dq
        for layer in range(len(self.weights) - 1, -1, -1):
            inp, act = cache[layer]
            grads_w.insert(0, inp.T @ grad)
            grads_b.insert(0, grad.sum(axis=0))
            if layer > 0:
                grad = (grad @ self.weights[layer].T) * (cache[layer - 1][1] > 0)
        return grads_w, grads_b

    def apply_gradients(self, grads_w, grads_b, lr: float) -> None:
        for W, b, gw, gb in zip(self.weights, self.biases, grads_w, grads_b):
            W -= lr * gw
            b -= lr * gb

    def copy(self) -> "QNetwork":
        clone = QNetwork(self.layer_sizes)
        clone.weights = [W.copy() for W in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone


def sync_target(net: QNetwork, target_net: QNetwork) -> QNetwork:
    """Hard-copy online weights into the target network."""
    target_net.weights = [W.copy() for W in net.weights]
    target_net.biases = [b.copy() for b in net.biases]
    return target_net


def act(net: QNetwork, state_vec: np.ndarray, legal_idx: np.ndarray,
        epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy action index over the legal subset, ties to lowest index."""
    legal_idx = np.asarray(legal_idx)
    if legal_idx.size == 0:
        raise ValueError("no legal actions")
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.choice(legal_idx))
    q = net.forward(state_vec)
    masked = np.full_like(q, -np.inf)
    masked[legal_idx] = q[legal_idx]
    return int(np.argmax(masked))


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    next_legal: np.ndarray  # (B, n_actions) bool


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling (with replacement)."""

    def __init__(self, capacity: int = 20_000):
        self.capacity = capacity
        self.size = 0
        self._cursor = 0
        self._arrays = None

    def push(self, state, action: int, reward: float, next_state, done: bool, next_legal) -> None:
        if self._arrays is None:
            d, a = len(state), len(next_legal)
            self._arrays = dict(
                states=np.zeros((self.capacity, d)),
                actions=np.zeros(self.capacity, dtype=np.int64),
                rewards=np.zeros(self.capacity),
                next_states=np.zeros((self.capacity, d)),
                dones=np.zeros(self.capacity, dtype=bool),
                next_legal=np.zeros((self.capacity, a), dtype=bool),
            )
        k = self._cursor
        self._arrays["states"][k] = state
        self._arrays["actions"][k] = action
        self._arrays["rewards"][k] = reward
        self._arrays["next_states"][k] = next_state
        self._arrays["dones"][k] = done
        self._arrays["next_legal"][k] = next_legal
        self._cursor = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __len__(self) -> int:
        return self.size

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size < batch_size:
            raise ValueError(f"buffer holds {self.size} transitions; need {batch_size}")
        idx = rng.integers(0, self.size, size=batch_size)
        a = self._arrays
        return Batch(
            states=a["states"][idx],
            actions=a["actions"][idx],
            rewards=a["rewards"][idx],
            next_states=a["next_states"][idx],
            dones=a["dones"][idx],
            next_legal=a["next_legal"][idx],
        )


def bellman_targets(batch: Batch, target_net: QNetwork, discount: float) -> np.ndarray:
    """y = r for terminal transitions, else r + discount * max legal target-Q."""
    q_next = target_net.forward(batch.next_states)
    masked = np.where(batch.next_legal, q_next, -np.inf)
    max_next = np.max(masked, axis=1)
    max_next = np.where(np.isfinite(max_next), max_next, 0.0)
    return batch.rewards + discount * max_next * (~batch.dones)


def train_step(net: QNetwork, target_net: QNetwork, batch: Batch,
               lr: float, discount: float) -> float:
    """One SGD step on the squared Bellman error; returns the pre-update loss."""
    y = bellman_targets(batch, target_net, discount)
    q, cache = net._forward_cached(batch.states)
    rows = np.arange(len(batch.actions))
    err = q[rows, batch.actions] - y
    loss = float(np.mean(err ** 2))
    if not np.isfinite(loss):
        raise FloatingPointError("training loss is not finite")
    dq = np.zeros_like(q)
    dq[rows, batch.actions] = 2.0 * err / len(rows)
    grads_w, grads_b = net.backward(cache, dq)
    net.apply_gradients(grads_w, grads_b, lr)
    return loss


@dataclass
class LearningCurve:
    episode: np.ndarray
    reward: np.ndarray
    destinations: np.ndarray
    violations: np.ndarray
    cycles: np.ndarray
    epsilon: np.ndarray

    def to_csv(self, path) -> None:
        header = "episode,reward,destinations,violations,cycles,epsilon"
        data = np.column_stack([self.episode, self.reward, self.destinations,
                                self.violations, self.cycles, self.epsilon])
        np.savetxt(path, data, delimiter=",", header=header, comments="",
                   fmt=["%d", "%.6f", "%d", "%d", "%d", "%.6f"])


def train(env: MissionEnv, train_cfg: TrainConfig,
          hidden: tuple[int, int] = (64, 64)) -> tuple[QNetwork, LearningCurve]:
    """Run the full DQN loop on one environment; deterministic per seed."""
    space = ActionSpace(env.map, env.cfg.altitudes)
    radius = norm_radius(env.map)
    n_in = 6 + len(env.map.destinations)
    rng = np.random.default_rng(splitmix64(train_cfg.seed, 1))
    net = QNetwork([n_in, *hidden, len(space)], rng=np.random.default_rng(splitmix64(train_cfg.seed, 2)))
    target = net.copy()
    buffer = ReplayBuffer(train_cfg.buffer_capacity)

    records = {k: [] for k in ("reward", "destinations", "violations", "cycles", "epsilon")}
    grad_steps = 0
    state = env.reset(seed=splitmix64(train_cfg.seed, 0))
    for episode in range(train_cfg.episodes):
        if episode > 0:
            state = env.reset()
        eps = train_cfg.epsilon(episode)
        ep_reward = 0.0
        violated = False
        done = False
        while not done:
            vec = encode_state(state, env.map, radius)
            legal_idx = np.array([space.index(a) for a in env.legal_actions()])
            a_idx = act(net, vec, legal_idx, eps, rng)
            outcome = env.step(space.actions[a_idx])
            done = outcome.done
            next_vec = encode_state(outcome.state, env.map, radius)
            if done:
                next_mask = np.zeros(len(space), dtype=bool)
            else:
                next_mask = space.mask(legal_actions(outcome.state, env.map, env.cfg))
            buffer.push(vec, a_idx, outcome.reward, next_vec, done, next_mask)
            ep_reward += outcome.reward
            violated = violated or outcome.info["eod_violation"]
            state = outcome.state
            if len(buffer) >= train_cfg.batch_size:
                train_step(net, target, buffer.sample(train_cfg.batch_size, rng),
                           train_cfg.learning_rate, train_cfg.discount)
                grad_steps += 1
                if grad_steps % train_cfg.target_sync_every == 0:
                    sync_target(net, target)
        records["reward"].append(ep_reward)
        records["destinations"].append(state.reached_count)
        records["violations"].append(int(violated))
        records["cycles"].append(state.cycle_count)
        records["epsilon"].append(eps)

    curve = LearningCurve(
        episode=np.arange(train_cfg.episodes),
        reward=np.array(records["reward"]),
        destinations=np.array(records["destinations"], dtype=int),
        violations=np.array(records["violations"], dtype=int),
        cycles=np.array(records["cycles"], dtype=int),
        epsilon=np.array(records["epsilon"]),
    )
    return net, curve


@dataclass
class EvalReport:
    n_episodes: int
    mean_reward: float
    reward_ci: tuple[float, float]   # 95% bootstrap
    violation_rate: float
    mean_destinations: float
    completion_rate: float           # fraction of episodes visiting every destination
    mean_cycles: float
    episodes: list = field(default_factory=list)
    traces: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "n_episodes": self.n_episodes,
            "mean_reward": self.mean_reward,
            "reward_ci95": list(self.reward_ci),
            "violation_rate": self.violation_rate,
            "mean_destinations": self.mean_destinations,
            "completion_rate": self.completion_rate,
            "mean_cycles": self.mean_cycles,
        }


def _bootstrap_ci(values: np.ndarray, rng: np.random.Generator, n_resamples: int = 1000) -> tuple[float, float]:
    means = rng.choice(values, size=(n_resamples, len(values)), replace=True).mean(axis=1)
    return float(np.percentile(means, 2.5)), float(np.percentile(means, 97.5))


def evaluate(net: QNetwork, env: MissionEnv, n_episodes: int, seed: int = 0,
             collect_traces: int = 0) -> EvalReport:
    """Greedy-policy rollout statistics with per-episode derived seeds."""
    if n_episodes <= 0:
        raise ValueError("n_episodes must be positive")
    space = ActionSpace(env.map, env.cfg.altitudes)
    radius = norm_radius(env.map)
    n_dest = len(env.map.destinations)
    rng = np.random.default_rng(splitmix64(seed, 0))
    episodes, traces = [], []
    for i in range(n_episodes):
        state = env.reset(seed=splitmix64(seed, i + 1))
        ep_reward, violated, truncated = 0.0, False, False
        trace = []
        done = False
        step_no = 0
        while not done:
            vec = encode_state(state, env.map, radius)
            legal_idx = np.array([space.index(a) for a in env.legal_actions()])
            a_idx = act(net, vec, legal_idx, epsilon=0.0, rng=rng)
            outcome = env.step(space.actions[a_idx])
            if collect_traces and i < collect_traces:
                action = space.actions[a_idx]
                trace.append({
                    "step": step_no, "target": action.target, "altitude": action.altitude,
                    "wind_kts": outcome.info["wind_kts"], "reward": outcome.reward,
                    "v": outcome.state.v, "z": outcome.state.z_internal,
                    "cycle": outcome.state.cycle_count,
                })
            ep_reward += outcome.reward
            violated = violated or outcome.info["eod_violation"]
            truncated = truncated or outcome.info["truncated"]
            state = outcome.state
            done = outcome.done
            step_no += 1
        episodes.append({
            "reward": ep_reward,
            "destinations": state.reached_count,
            "violation": int(violated),
            "cycles": state.cycle_count,
            "completed": int(state.reached_count == n_dest),
            "truncated": int(truncated),
        })
        if collect_traces and i < collect_traces:
            traces.append(trace)

    rewards = np.array([e["reward"] for e in episodes])
    return EvalReport(
        n_episodes=n_episodes,
        mean_reward=float(rewards.mean()),
        reward_ci=_bootstrap_ci(rewards, rng),
        violation_rate=float(np.mean([e["violation"] for e in episodes])),
        mean_destinations=float(np.mean([e["destinations"] for e in episodes])),
        completion_rate=float(np.mean([e["completed"] for e in episodes])),
        mean_cycles=float(np.mean([e["cycles"] for e in episodes])),
        episodes=episodes,
        traces=traces,
    )


CHECKPOINT_VERSION = 1


def save_checkpoint(net: QNetwork, path, meta: dict | None = None) -> None:
    """Versioned JSON weight dump with normalization/enumeration metadata."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "layer_sizes": net.layer_sizes,
        "weights": [W.tolist() for W in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "meta": meta or {},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> tuple[QNetwork, dict]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    net = QNetwork(payload["layer_sizes"])
    net.weights = [np.array(W) for W in payload["weights"]]
    net.biases = [np.array(b) for b in payload["biases"]]
    return net, payload.get("meta", {})
