"""Per-intersection policies: fixed time, MaxPressure and DQN, plus replay memory."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BufferEmpty, DivergenceError, InterfaceError
from .nn import Mlp, OptimizerConfig, load_mlp, mlp_forward, mlp_init, mlp_train_step, save_mlp
from .road_network import N_PHASES, RoadNetwork
from .traffic_sim import SimState, episode_metrics, advance

# ---------------------------------------------------------------- fixed time


@dataclass(frozen=True)
class FixedTimePlan:
    phase_durations: tuple[tuple[int, int], ...]  # (phase id, decision intervals)

    def __post_init__(self):
        if not self.phase_durations:
            raise ValueError("a fixed-time plan needs at least one phase")
        if any(d < 1 for _, d in self.phase_durations):
            raise ValueError("phase durations must be >= 1 decision interval")

    @classmethod
    def uniform(cls, duration: int, n_phases: int = N_PHASES) -> "FixedTimePlan":
        return cls(tuple((p, int(duration)) for p in range(n_phases)))

    @property
    def cycle_length(self) -> int:
        return sum(d for _, d in self.phase_durations)

    def to_list(self) -> list[list[int]]:
        return [[p, d] for p, d in self.phase_durations]


def fixed_time_act(plan: FixedTimePlan, decision_index: int) -> int:
    pos = decision_index % plan.cycle_length
    for phase, duration in plan.phase_durations:
        if pos < duration:
            return phase
        pos -= duration
    raise AssertionError("unreachable")


def evaluate_fixed_plan(net: RoadNetwork, flow, plan: FixedTimePlan, horizon: int, dt: int = 10) -> float:
    state = SimState.new(net)
    signals = [0] * net.n_intersections
    for t in range(horizon):
        if t % dt == 0:
            signals = [fixed_time_act(plan, t // dt)] * net.n_intersections
        advance(state, flow, signals)
    return episode_metrics(state, horizon).avg_travel_time


def tune_fixed_plan(
    net: RoadNetwork, flow, candidate_durations: Sequence[int], rng_seed: int = 0, horizon: int = 600, dt: int = 10
) -> FixedTimePlan:
    """Grid search over uniform cyclic plans; ties go to the shorter duration.

    The simulator is deterministic, so ``rng_seed`` only exists to keep the
    signature uniform with the learning components.
    """
    del rng_seed
    if not candidate_durations:
        raise ValueError("candidate_durations must not be empty")
    scored = [(evaluate_fixed_plan(net, flow, FixedTimePlan.uniform(d), horizon, dt), d) for d in sorted(set(candidate_durations))]
    best_time, best_d = min(scored)
    return FixedTimePlan.uniform(best_d)


# ---------------------------------------------------------------- max pressure


def max_pressure_act(queues_in, queues_out, phases: Sequence[Sequence[int]]) -> int:
    """Pick the phase with the largest summed (in - out) count over its movements.

    ``queues_in``/``queues_out`` are per-movement counts; ``phases`` lists
    the movement indices of every phase. Ties go to the lowest phase id.
    """
    diff = np.asarray(queues_in, dtype=float) - np.asarray(queues_out, dtype=float)
    best, best_p = -np.inf, 0
    for p, moves in enumerate(phases):
        pressure = float(diff[list(moves)].sum()) if len(moves) else 0.0
        if pressure > best:
            best, best_p = pressure, p
    return best_p


def phase_movement_indices(net: RoadNetwork, k: int) -> tuple[tuple, list[list[int]]]:
    """Movements of intersection ``k`` and, per phase, the indices of its movements."""
    inter = net.intersection(k)
    moves = inter.movements
    index = {m: i for i, m in enumerate(moves)}
    phases = [sorted(index[m] for m in ph.movements) for ph in inter.phases]
    return moves, phases


# ---------------------------------------------------------------- DQN


class Source(enum.IntEnum):
    OBSERVED = 0
    IMPUTED = 1


@dataclass
class Experience:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    source: Source = Source.OBSERVED
    intersection: int = -1


@dataclass
class EpsilonSchedule:
    epsilon: float = 0.1
    epsilon_min: float = 0.01
    decay: float = 0.995

    def __post_init__(self):
        if not 0 <= self.epsilon_min <= self.epsilon <= 1:
            raise ValueError("need 0 <= epsilon_min <= epsilon <= 1")

    def step(self) -> float:
        """Decay once (end of an episode) and return the new value."""
        self.epsilon = max(self.epsilon_min, self.epsilon * self.decay)
        return self.epsilon

    @staticmethod
    def value_after(n: int, start: float = 0.1, floor: float = 0.01, decay: float = 0.995) -> float:
        return max(floor, start * decay**n)


@dataclass
class QNetwork:
    """Q-values per phase; lane counts are scaled on input, values on output."""

    mlp: Mlp
    count_scale: float = 0.1
    reward_scale: float = 10.0

    @property
    def input_dim(self) -> int:
        return self.mlp.layer_sizes[0]

    def _prep(self, states) -> np.ndarray:
        x = np.array(states, dtype=float, ndmin=2)
        if x.shape[1] != self.input_dim:
            raise InterfaceError(f"Q-network expects {self.input_dim}-dim states, got {x.shape[1]}")
        # each 16-wide block is [12 counts, 4 phase bits]
        for start in range(0, x.shape[1], 16):
            x[:, start : start + 12] *= self.count_scale
        return x

    def q_values(self, states) -> np.ndarray:
        return mlp_forward(self.mlp, self._prep(states)) * self.reward_scale

    def copy(self) -> "QNetwork":
        return QNetwork(self.mlp.copy(), self.count_scale, self.reward_scale)

    def save(self, path: str | Path) -> None:
        save_mlp(self.mlp, path, meta={"kind": "q_network", "count_scale": self.count_scale, "reward_scale": self.reward_scale})

    @classmethod
    def load(cls, path: str | Path) -> "QNetwork":
        mlp, meta = load_mlp(path)
        if meta.get("kind") != "q_network":
            raise InterfaceError(f"{path} is not a Q-network checkpoint")
        return cls(mlp, meta["count_scale"], meta["reward_scale"])


def new_q_network(input_dim: int = 16, hidden=(64, 64), rng_seed: int = 0, count_scale=0.1, reward_scale=10.0) -> QNetwork:
    return QNetwork(mlp_init([input_dim, *hidden, N_PHASES], rng_seed), count_scale, reward_scale)


def _argmax_lowest(values: np.ndarray) -> int:
    return int(np.flatnonzero(values == values.max())[0])


def dqn_act(q: QNetwork, state, eps, rng: np.random.Generator) -> int:
    """Epsilon-greedy action; ``eps`` is a float or an :class:`EpsilonSchedule`."""
    epsilon = eps.epsilon if isinstance(eps, EpsilonSchedule) else float(eps)
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(N_PHASES))
    return _argmax_lowest(q.q_values(state)[0])


def dqn_update(q: QNetwork, target_q: QNetwork | None, batch: Sequence[Experience], gamma: float, opt: OptimizerConfig, rewards=None) -> float:
    """Regress Q(s, a) toward r + gamma * max_a' target(s', a'); returns the pre-step MSE.

    ``rewards`` overrides the rewards stored in ``batch`` (used by the
    imaginary rollout, which re-infers them).
    """
    if len(batch) == 0:
        raise ValueError("dqn_update needs a non-empty batch")
    target_q = target_q or q
    states = np.array([e.state for e in batch])
    next_states = np.array([e.next_state for e in batch])
    actions = np.array([e.action for e in batch])
    r = np.array([e.reward for e in batch], dtype=float) if rewards is None else np.asarray(rewards, dtype=float)
    if gamma > 0:
        targets = r + gamma * target_q.q_values(next_states).max(axis=1)
    else:
        targets = r.copy()
    if not np.all(np.isfinite(targets)):
        raise DivergenceError("non-finite Q-learning targets")
    loss = mlp_train_step(q.mlp, q._prep(states), targets / q.reward_scale, opt, actions=actions)
    return loss * q.reward_scale**2


@dataclass
class ReplayBuffer:
    capacity: int = 10_000
    items: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("replay capacity must be >= 1")
        self.items = deque(self.items, maxlen=self.capacity)

    def __len__(self) -> int:
        return len(self.items)

    def add(self, exp: Experience) -> None:
        self.items.append(exp)

    def count(self, source: Source) -> int:
        return sum(1 for e in self.items if e.source == source)


def replay_sample(buf: ReplayBuffer, batch_size: int, rng: np.random.Generator, source_filter: Source | None = None) -> list[Experience]:
    """Uniform sampling with replacement, optionally restricted to one source tag."""
    pool = buf.items if source_filter is None else [e for e in buf.items if e.source == source_filter]
    if len(pool) == 0:
        raise BufferEmpty("no experiences available to sample")
    idx = rng.integers(len(pool), size=batch_size)
    return [pool[i] for i in idx]
