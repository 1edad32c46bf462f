"""Control strategies for networks with unobserved intersections.

A :class:`Controller` binds a policy to every intersection according to its
:class:`Strategy` and the observation mask, runs training episodes and, for
the model-based strategy, the reward-model update and imaginary rollout.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import (
    EpsilonSchedule,
    Experience,
    FixedTimePlan,
    QNetwork,
    ReplayBuffer,
    Source,
    dqn_act,
    dqn_update,
    fixed_time_act,
    max_pressure_act,
    new_q_network,
    phase_movement_indices,
    replay_sample,
)
from .errors import ConfigError, ImputationUnavailable
from .imputation import RewardModel, sfm_impute
from .nn import OptimizerConfig
from .observation import NEIGHBOR_CONCAT_DIM, ObservationMask, neighbor_concat_state, neighbor_reward_sum
from .road_network import BOUNDARY, RoadNetwork
from .traffic_sim import STATE_DIM, FlowSpec, Metrics, SimState, StateVector, advance, episode_metrics, local_reward, local_state

log = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    FixFix = "FixFix"
    IdqnFix = "IdqnFix"
    IdqnNeighboring = "IdqnNeighboring"
    IdqnMaxp = "IdqnMaxp"
    SdqnTransferred = "SdqnTransferred"
    IdqnIdqn = "IdqnIdqn"
    SdqnAll = "SdqnAll"
    SdqnModelBased = "SdqnModelBased"

    @property
    def shared(self) -> bool:
        return self in (Strategy.SdqnTransferred, Strategy.SdqnAll, Strategy.SdqnModelBased)

    @property
    def learning(self) -> bool:
        return self is not Strategy.FixFix

    @property
    def imputes_rewards(self) -> bool:
        return self in (Strategy.IdqnIdqn, Strategy.SdqnAll, Strategy.SdqnModelBased)

    @property
    def imputes_states(self) -> bool:
        return self in (
            Strategy.IdqnMaxp,
            Strategy.SdqnTransferred,
            Strategy.IdqnIdqn,
            Strategy.SdqnAll,
            Strategy.SdqnModelBased,
        )


@dataclass
class ControllerConfig:
    dt: int = 10
    gamma: float = 0.95
    learning_rate: float = 1e-4
    epsilon: float = 0.1
    epsilon_min: float = 0.01
    epsilon_decay: float = 0.995
    replay_capacity: int = 10_000
    batch_size: int = 32
    warmup: int = 100
    updates_per_decision: int = 1
    target_sync_episodes: int = 5  # 0 disables the target network
    hidden: tuple[int, ...] = (64, 64)
    count_scale: float = 0.1
    reward_scale: float = 10.0
    clip_norm: float | None = None
    rollout_rounds: int = 5
    rollout_batch: int = 32
    reward_model_lr: float = 1e-3
    rollout_true_rewards: bool = False  # ablation only: use stored observed rewards in the rollout

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(learning_rate=self.learning_rate, clip_norm=self.clip_norm)


@dataclass
class Agent:
    q: QNetwork
    target: QNetwork | None
    buffer: ReplayBuffer
    updates: int = 0

    def sync_target(self) -> None:
        if self.target is not None:
            self.target.mlp.load_from(self.q.mlp)


@dataclass
class Decision:
    """What an intersection saw and did at one decision boundary."""

    kind: str  # "fixed" | "dqn" | "maxp" | "neigh"
    action: int
    inputs: np.ndarray | None = None
    imputed: bool = False


class Controller:
    """Strategy-specific bindings, networks, buffers and imputation state."""

    def __init__(
        self,
        strategy: Strategy | str,
        net: RoadNetwork,
        mask: ObservationMask,
        config: ControllerConfig | None = None,
        seed: int = 0,
        fixed_plan: FixedTimePlan | None = None,
        reward_model: RewardModel | None = None,
    ):
        self.strategy = Strategy(strategy)
        self.net = net
        self.mask = mask
        self.config = config or ControllerConfig()
        self.seed = seed
        self.fixed_plan = fixed_plan or FixedTimePlan.uniform(1)
        self.reward_model = reward_model
        self.rng = np.random.default_rng(seed)
        self.eps = EpsilonSchedule(self.config.epsilon, self.config.epsilon_min, self.config.epsilon_decay)
        self.opt = self.config.optimizer()
        self.episode = 0
        self.epsilon_log: list[float] = []

        n = net.n_intersections
        self.bindings: dict[int, str] = {}
        for k in range(n):
            self.bindings[k] = self._binding_for(k)

        self.agents: dict[int, Agent] = {}
        if self.strategy.shared:
            shared = self._new_agent(STATE_DIM, n)
            for k in range(n):
                self.agents[k] = shared
        else:
            for k, kind in self.bindings.items():
                if kind == "dqn":
                    self.agents[k] = self._new_agent(STATE_DIM, k)
                elif kind == "neigh":
                    self.agents[k] = self._new_agent(NEIGHBOR_CONCAT_DIM, k)

        self.prev_observed: dict[int, StateVector] | None = None
        self.imputed: dict[int, StateVector] = {}
        self._movements = {k: phase_movement_indices(net, k) for k in mask.unobserved}

    # -- construction helpers

    def _binding_for(self, k: int) -> str:
        s = self.strategy
        if s is Strategy.FixFix:
            return "fixed"
        if k in self.mask.observed:
            return "dqn"
        return {
            Strategy.IdqnFix: "fixed",
            Strategy.IdqnNeighboring: "neigh",
            Strategy.IdqnMaxp: "maxp",
        }.get(s, "dqn")

    def _new_agent(self, input_dim: int, slot: int) -> Agent:
        c = self.config
        # seed depends only on (run seed, slot) so degenerate strategies coincide
        seed = self.seed * 100_003 + slot
        q = new_q_network(input_dim, c.hidden, seed, c.count_scale, c.reward_scale)
        target = q.copy() if c.target_sync_episodes > 0 else None
        return Agent(q, target, ReplayBuffer(c.replay_capacity))

    @property
    def unique_agents(self) -> list[Agent]:
        seen: dict[int, Agent] = {}
        for k in sorted(self.agents):
            seen.setdefault(id(self.agents[k]), self.agents[k])
        return list(seen.values())

    @property
    def model_based_active(self) -> bool:
        return self.strategy is Strategy.SdqnModelBased and bool(self.mask.unobserved)

    def check_ready(self) -> None:
        if self.strategy.imputes_rewards and self.mask.unobserved and self.reward_model is None:
            raise ConfigError([f"strategy {self.strategy.value} needs a pretrained reward model"])

    def reset_episode(self) -> None:
        self.prev_observed = None
        self.imputed = {}

    # -- observation

    def impute_states(self, sim: SimState) -> dict[int, StateVector]:
        """SFM states for unobserved intersections from last boundary's observations."""
        out = {}
        for k in sorted(self.mask.unobserved):
            own_phase = sim.phase[k]
            nbs = [nb for nb in self.net.intersections[k].neighbors if nb in self.mask.observed]
            try:
                if self.prev_observed is None:
                    raise ImputationUnavailable("no previous decision step")
                est = sfm_impute([self.prev_observed[nb] for nb in nbs], own_phase)
            except ImputationUnavailable as exc:
                held = self.imputed.get(k)
                counts = held.lane_counts if held is not None else np.zeros(12)
                if held is None:
                    log.debug("intersection %d: %s; zero-state fallback", k, exc)
                est = StateVector(counts, own_phase)
            out[k] = est
        return out

    def _maxp_inputs(self, sim: SimState, k: int, imputed: dict[int, StateVector]):
        moves, phases = self._movements[k]
        inter = self.net.intersections[k]
        pos_in = {lane: i for i, lane in enumerate(inter.incoming)}
        own = np.rint(imputed[k].lane_counts)
        q_in = np.array([own[pos_in[m.in_lane]] for m in moves])
        q_out = np.zeros(len(moves))
        for i, m in enumerate(moves):
            nb = self.net.lanes[m.out_lane].to_node
            if nb == BOUNDARY:
                continue
            if nb in self.mask.observed:
                q_out[i] = sim.occupancy(m.out_lane)
            else:
                nb_pos = self.net.intersections[nb].incoming.index(m.out_lane)
                q_out[i] = np.rint(imputed[nb].lane_counts[nb_pos])
        return q_in, q_out, phases

    def observe(self, sim: SimState) -> tuple[dict[int, np.ndarray | None], dict[int, StateVector], dict[int, StateVector]]:
        """Policy inputs per intersection, plus the observed and imputed states used."""
        observed = {j: local_state(sim, j) for j in sorted(self.mask.observed)}
        imputed = self.impute_states(sim) if self.strategy.imputes_states else {}
        inputs: dict[int, np.ndarray | None] = {}
        for k, kind in self.bindings.items():
            if kind == "dqn":
                inputs[k] = (observed[k] if k in observed else imputed[k]).to_array()
            elif kind == "neigh":
                inputs[k] = neighbor_concat_state(sim, self.mask, k)
            else:
                inputs[k] = None
        return inputs, observed, imputed

    def act(self, sim: SimState, greedy: bool = False) -> dict[int, Decision]:
        inputs, observed, imputed = self.observe(sim)
        b = sim.step // self.config.dt
        eps = 0.0 if greedy else self.eps.epsilon
        decisions = {}
        for k in range(self.net.n_intersections):
            kind = self.bindings[k]
            if kind == "fixed":
                a = fixed_time_act(self.fixed_plan, b)
            elif kind == "maxp":
                a = max_pressure_act(*self._maxp_inputs(sim, k, imputed))
            else:
                a = dqn_act(self.agents[k].q, inputs[k], eps, self.rng)
            decisions[k] = Decision(kind, a, inputs[k], imputed=k in imputed)
        self.prev_observed = observed
        self.imputed = imputed
        return decisions


def control_step(ctrl: Controller, sim: SimState, mask: ObservationMask | None = None, greedy: bool = False) -> dict[int, int]:
    """Signals for the next ``dt`` steps, chosen at a decision boundary."""
    if mask is not None and mask != ctrl.mask:
        raise ConfigError(["control_step mask differs from the controller's mask"])
    if sim.step % ctrl.config.dt != 0:
        raise ConfigError([f"control_step called at step {sim.step}, not a multiple of dt={ctrl.config.dt}"])
    return {k: d.action for k, d in ctrl.act(sim, greedy).items()}


def _store_transitions(ctrl: Controller, sim: SimState, prev: dict[int, Decision], now_inputs, recorder) -> list[Experience]:
    """Build experiences for the interval that just ended; returns the observed ones."""
    strat = ctrl.strategy
    observed_batch = []
    imputed_rewards = {}
    imp_keys = [k for k, d in prev.items() if d.imputed and d.kind == "dqn" and strat.imputes_rewards]
    if imp_keys:
        states = np.array([prev[k].inputs for k in imp_keys])
        actions = [prev[k].action for k in imp_keys]
        imputed_rewards = dict(zip(imp_keys, ctrl.reward_model.predict(states, actions)))
    for k in sorted(prev):
        d = prev[k]
        if d.kind in ("fixed", "maxp"):
            continue
        if d.kind == "neigh":
            exp = Experience(d.inputs, d.action, neighbor_reward_sum(sim, ctrl.mask, k), now_inputs[k], Source.OBSERVED, k)
        elif k in ctrl.mask.observed:
            exp = Experience(d.inputs, d.action, local_reward(sim, k), now_inputs[k], Source.OBSERVED, k)
            observed_batch.append(exp)
        elif k in imputed_rewards:
            exp = Experience(d.inputs, d.action, float(imputed_rewards[k]), now_inputs[k], Source.IMPUTED, k)
        else:
            continue  # unobserved intersection whose experiences are not trained on
        ctrl.agents[k].buffer.add(exp)
        if recorder is not None:
            recorder(k, exp)
    return observed_batch


def _learn(ctrl: Controller, observed_batch: list[Experience]) -> None:
    c = ctrl.config
    for agent in ctrl.unique_agents:
        if len(agent.buffer) < c.warmup:
            continue
        for _ in range(c.updates_per_decision):
            batch = replay_sample(agent.buffer, c.batch_size, ctrl.rng)
            dqn_update(agent.q, agent.target, batch, c.gamma, ctrl.opt)
            agent.updates += 1
    if ctrl.model_based_active:
        if observed_batch:
            ctrl.reward_model.train_step(
                np.array([e.state for e in observed_batch]),
                [e.action for e in observed_batch],
                [e.reward for e in observed_batch],
                OptimizerConfig(learning_rate=c.reward_model_lr),
            )
        if len(ctrl.agents[0].buffer) >= c.warmup:
            imaginary_rollout(ctrl, c.rollout_rounds, c.rollout_batch)


def imaginary_rollout(ctrl: Controller, rollout_rounds: int, batch_size: int) -> float | None:
    """Extra Q-updates on replayed transitions with rewards re-inferred by the reward model.

    Only the controller's buffer, Q-network and reward model are touched;
    the environment is never consulted here.
    """
    if ctrl.strategy is not Strategy.SdqnModelBased:
        raise ConfigError([f"imaginary rollout is only defined for SdqnModelBased, not {ctrl.strategy.value}"])
    if ctrl.reward_model is None:
        raise ConfigError(["imaginary rollout needs a reward model"])
    agent = ctrl.agents[0]
    if len(agent.buffer) == 0:
        log.warning("imaginary rollout skipped: empty replay buffer")
        return None
    c = ctrl.config
    losses = []
    for _ in range(rollout_rounds):
        batch = replay_sample(agent.buffer, batch_size, ctrl.rng)
        states = np.array([e.state for e in batch])
        r_hat = ctrl.reward_model.predict(states, [e.action for e in batch])
        if c.rollout_true_rewards:
            r_hat = np.array([e.reward if e.source == Source.OBSERVED else r for e, r in zip(batch, r_hat)])
        losses.append(dqn_update(agent.q, agent.target, batch, c.gamma, ctrl.opt, rewards=r_hat))
    return float(np.mean(losses)) if losses else 0.0


def run_episode(
    ctrl: Controller,
    net: RoadNetwork,
    flow: FlowSpec,
    mask: ObservationMask,
    horizon: int,
    learn: bool = True,
    greedy: bool = False,
    recorder=None,
    trace: list | None = None,
) -> Metrics:
    """Simulate one episode; ``learn`` stores experiences and updates the agents.

    ``recorder(k, experience)`` sees every stored experience; ``trace``
    collects the signals chosen at each decision boundary.
    """
    if mask != ctrl.mask:
        raise ConfigError(["episode mask differs from the controller's mask"])
    if learn:
        ctrl.check_ready()
    ctrl.reset_episode()
    sim = SimState.new(net)
    dt = ctrl.config.dt
    prev: dict[int, Decision] | None = None
    signals = [0] * net.n_intersections
    for t in range(horizon):
        if t % dt == 0:
            decisions = ctrl.act(sim, greedy=greedy)
            if learn and prev is not None and ctrl.strategy.learning:
                now_inputs = {k: d.inputs for k, d in decisions.items()}
                observed_batch = _store_transitions(ctrl, sim, prev, now_inputs, recorder)
                _learn(ctrl, observed_batch)
            prev = decisions
            signals = [decisions[k].action for k in range(net.n_intersections)]
            if trace is not None:
                trace.append(tuple(signals))
        advance(sim, flow, signals)
    if learn and prev is not None and ctrl.strategy.learning:
        # close the last interval with the state at the horizon
        inputs, observed, imputed = ctrl.observe(sim)
        observed_batch = _store_transitions(ctrl, sim, prev, inputs, recorder)
        _learn(ctrl, observed_batch)
    return episode_metrics(sim, horizon)


def train_episode(ctrl: Controller, net: RoadNetwork, flow: FlowSpec, mask: ObservationMask, horizon: int, recorder=None) -> Metrics:
    """One training episode followed by epsilon decay and periodic target sync."""
    ctrl.epsilon_log.append(ctrl.eps.epsilon)
    metrics = run_episode(ctrl, net, flow, mask, horizon, learn=True, recorder=recorder)
    ctrl.episode += 1
    ctrl.eps.step()
    sync = ctrl.config.target_sync_episodes
    if sync > 0 and ctrl.episode % sync == 0:
        for agent in ctrl.unique_agents:
            agent.sync_target()
    return metrics


def evaluate(ctrl: Controller, net: RoadNetwork, flow: FlowSpec, mask: ObservationMask, horizon: int, trace=None) -> Metrics:
    """Greedy (epsilon = 0) episode without learning."""
    state = ctrl.rng.bit_generator.state
    try:
        return run_episode(ctrl, net, flow, mask, horizon, learn=False, greedy=True, trace=trace)
    finally:
        ctrl.rng.bit_generator.state = state


def save_checkpoints(ctrl: Controller, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    if ctrl.strategy.shared:
        path = directory / "q_shared.npz"
        ctrl.agents[0].q.save(path)
        written.append(path)
    else:
        for k in sorted(ctrl.agents):
            path = directory / f"q_{k:03d}.npz"
            ctrl.agents[k].q.save(path)
            written.append(path)
    if ctrl.reward_model is not None and ctrl.strategy.imputes_rewards:
        path = directory / "reward_model.npz"
        ctrl.reward_model.save(path)
        written.append(path)
    return written


def load_checkpoints(ctrl: Controller, directory: str | Path) -> None:
    directory = Path(directory)
    if ctrl.strategy.shared:
        q = QNetwork.load(directory / "q_shared.npz")
        ctrl.agents[0].q.mlp.load_from(q.mlp)
        ctrl.agents[0].sync_target()
    else:
        for k in sorted(ctrl.agents):
            q = QNetwork.load(directory / f"q_{k:03d}.npz")
            ctrl.agents[k].q.mlp.load_from(q.mlp)
            ctrl.agents[k].sync_target()
    rm = directory / "reward_model.npz"
    if rm.exists() and ctrl.strategy.imputes_rewards:
        ctrl.reward_model = RewardModel.load(rm)
