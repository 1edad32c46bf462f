"""State imputation by neighbour averaging and a learned reward model.

The state imputer fills in an unobserved intersection's lane counts with the
componentwise mean of its observed neighbours' counts from the previous
decision step. The reward model is a small MLP mapping (state, action) to the
local reward; it is pretrained on observed intersections and can be updated
online.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DivergenceError, ImputationUnavailable, InterfaceError
from .nn import Mlp, OptimizerConfig, load_mlp, loss_and_grads, mlp_forward, mlp_init, mlp_train_step, save_mlp
from .road_network import N_PHASES
from .traffic_sim import STATE_DIM, StateVector

log = logging.getLogger(__name__)

REWARD_INPUT_DIM = STATE_DIM + N_PHASES
REWARD_LAYOUT = "lane_counts[N,E,S,W x L,T,R] + phase_onehot[4] + action_onehot[4]"


def sfm_impute(neighbor_states_prev: Sequence[StateVector], own_phase: int) -> StateVector:
    """Mean of the neighbours' lane counts; the phase is the intersection's own."""
    if len(neighbor_states_prev) == 0:
        raise ImputationUnavailable("no observed neighbour to impute from")
    counts = np.mean([np.asarray(s.lane_counts, dtype=float) for s in neighbor_states_prev], axis=0)
    return StateVector(counts, int(own_phase))


class SfmImputer:
    """Callable wrapper so other state imputers can be plugged in."""

    def __call__(self, neighbor_states_prev, own_phase):
        return sfm_impute(neighbor_states_prev, own_phase)


@dataclass
class RewardModel:
    """MLP over [state(16), action one-hot(4)] predicting the local reward.

    Lane counts are multiplied by ``count_scale`` before entering the
    network and its output is multiplied by ``reward_scale``; both are fixed
    and stored with the checkpoint.
    """

    net: Mlp
    count_scale: float = 0.1
    reward_scale: float = 10.0

    def encode(self, states, actions) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=float))
        a = np.atleast_1d(np.asarray(actions, dtype=int))
        if s.shape[1] != STATE_DIM or len(a) != len(s):
            raise InterfaceError(f"reward model expects ({STATE_DIM}-dim states, actions), got {s.shape}, {a.shape}")
        if np.any(a < 0) or np.any(a >= N_PHASES):
            raise InterfaceError(f"actions must lie in 0..{N_PHASES - 1}")
        x = np.zeros((len(s), REWARD_INPUT_DIM))
        x[:, :12] = s[:, :12] * self.count_scale
        x[:, 12:STATE_DIM] = s[:, 12:STATE_DIM]
        x[np.arange(len(s)), STATE_DIM + a] = 1.0
        return x

    def predict(self, states, actions) -> np.ndarray:
        return mlp_forward(self.net, self.encode(states, actions))[:, 0] * self.reward_scale

    def loss(self, states, actions, rewards) -> float:
        resid = self.predict(states, actions) - np.asarray(rewards, dtype=float)
        return float(np.mean(resid**2))

    def train_step(self, states, actions, rewards, opt: OptimizerConfig) -> float:
        x = self.encode(states, actions)
        y = np.asarray(rewards, dtype=float).reshape(-1, 1) / self.reward_scale
        return mlp_train_step(self.net, x, y, opt) * self.reward_scale**2

    def save(self, path: str | Path) -> None:
        save_mlp(
            self.net,
            path,
            meta={
                "kind": "reward_model",
                "layout": REWARD_LAYOUT,
                "count_scale": self.count_scale,
                "reward_scale": self.reward_scale,
            },
        )

    @classmethod
    def load(cls, path: str | Path) -> "RewardModel":
        net, meta = load_mlp(path)
        if meta.get("kind") != "reward_model" or meta.get("layout") != REWARD_LAYOUT:
            raise InterfaceError(f"{path} is not a reward-model checkpoint with the expected input layout")
        return cls(net, meta["count_scale"], meta["reward_scale"])


def new_reward_model(hidden=(64, 64, 32), rng_seed: int = 0) -> RewardModel:
    return RewardModel(mlp_init([REWARD_INPUT_DIM, *hidden, 1], rng_seed))


@dataclass
class PretrainDataset:
    states: np.ndarray  # (n, 16)
    actions: np.ndarray  # (n,)
    rewards: np.ndarray  # (n,)
    train_idx: np.ndarray
    test_idx: np.ndarray
    sources: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))  # intersection per sample

    def __len__(self) -> int:
        return len(self.rewards)

    @classmethod
    def from_samples(cls, states, actions, rewards, sources=None, train_frac: float = 0.8, rng_seed: int = 0):
        states = np.asarray(states, dtype=float).reshape(-1, STATE_DIM)
        n = len(states)
        order = np.random.default_rng(rng_seed).permutation(n)
        cut = int(round(train_frac * n))
        return cls(
            states=states,
            actions=np.asarray(actions, dtype=int).reshape(n),
            rewards=np.asarray(rewards, dtype=float).reshape(n),
            train_idx=np.sort(order[:cut]),
            test_idx=np.sort(order[cut:]),
            sources=np.asarray(sources if sources is not None else np.full(n, -1), dtype=int),
        )

    def save(self, path: str | Path) -> None:
        """Flat record file: one row per sample with its split."""
        split = np.zeros(len(self), dtype=int)
        split[self.test_idx] = 1
        cols = ["source", "split", "action", "reward"] + [f"s{i}" for i in range(STATE_DIM)]
        rows = np.column_stack([self.sources, split, self.actions, self.rewards, self.states])
        fmt = ["%d", "%d", "%d", "%.17g"] + ["%.17g"] * STATE_DIM
        np.savetxt(path, rows, fmt=fmt, delimiter=",", header=",".join(cols), comments="")

    @classmethod
    def load(cls, path: str | Path) -> "PretrainDataset":
        rows = np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))
        split = rows[:, 1].astype(int)
        return cls(
            states=rows[:, 4:],
            actions=rows[:, 2].astype(int),
            rewards=rows[:, 3],
            train_idx=np.flatnonzero(split == 0),
            test_idx=np.flatnonzero(split == 1),
            sources=rows[:, 0].astype(int),
        )


def collect_pretrain_samples(net, flow, mask, epochs: int, rng_seed: int = 0, horizon: int = 600, config=None, fixed_plan=None) -> PretrainDataset:
    """Run IDQN-Fix training episodes and record (s, a, r) at observed intersections."""
    from .controllers import Controller, ControllerConfig, Strategy, train_episode

    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    ctrl = Controller(Strategy.IdqnFix, net, mask, config or ControllerConfig(), seed=rng_seed, fixed_plan=fixed_plan)
    states, actions, rewards, sources = [], [], [], []

    def record(k, exp):
        if k in mask.observed:
            states.append(exp.state)
            actions.append(exp.action)
            rewards.append(exp.reward)
            sources.append(k)

    for _ in range(epochs):
        train_episode(ctrl, net, flow, mask, horizon, recorder=record)
    return PretrainDataset.from_samples(states, actions, rewards, sources, rng_seed=rng_seed)


@dataclass
class PretrainConfig:
    hidden: tuple[int, ...] = (64, 64, 32)
    batch_size: int = 32
    learning_rate: float = 1e-3
    passes: int = 50
    patience: int = 5
    rng_seed: int = 0


def pretrain_reward_model(data: PretrainDataset, cfg: PretrainConfig | None = None) -> tuple[RewardModel, float]:
    """Minibatch MSE regression on the train split; returns the model and test MSE.

    Training stops early when the test MSE has not improved for
    ``cfg.patience`` passes, and the best parameters seen are kept.
    """
    cfg = cfg or PretrainConfig()
    if len(data.train_idx) == 0:
        raise ValueError("pretraining dataset has no training samples")
    model = new_reward_model(cfg.hidden, cfg.rng_seed)
    opt = OptimizerConfig(learning_rate=cfg.learning_rate)
    rng = np.random.default_rng(cfg.rng_seed)
    train = data.train_idx
    test = data.test_idx if len(data.test_idx) else data.train_idx
    x_train = model.encode(data.states[train], data.actions[train])
    y_train = data.rewards[train].reshape(-1, 1) / model.reward_scale
    # start from the predict-the-mean baseline rather than a random output layer
    model.net.weights[-1][...] = 0.0
    model.net.biases[-1][...] = y_train.mean()

    best = (np.inf, model.net.copy())
    stale = 0
    for epoch in range(cfg.passes):
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            b = order[start : start + cfg.batch_size]
            try:
                mlp_train_step(model.net, x_train[b], y_train[b], opt)
            except DivergenceError as exc:
                raise DivergenceError(f"reward-model pretraining diverged in pass {epoch}", epoch=epoch) from exc
        test_mse = model.loss(data.states[test], data.actions[test], data.rewards[test])
        if not np.isfinite(test_mse):
            raise DivergenceError(f"non-finite test loss in pass {epoch}", epoch=epoch)
        log.debug("pretrain pass %d test mse %.4f", epoch, test_mse)
        if test_mse < best[0] - 1e-12:
            best = (test_mse, model.net.copy())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.net = best[1]
    return model, float(best[0])


def infer_reward(model: RewardModel, state, action: int) -> float:
    vec = state.to_array() if isinstance(state, StateVector) else np.asarray(state, dtype=float)
    if vec.shape != (STATE_DIM,):
        raise InterfaceError(f"expected a {STATE_DIM}-dim state, got shape {vec.shape}")
    return float(model.predict(vec[None, :], [action])[0])


def update_reward_model(model: RewardModel, batch, lr: float = 1e-3) -> float | None:
    """One gradient step on observed (state, action, reward) triples.

    Returns the batch loss before the step, or None (with a warning) for an
    empty batch.
    """
    if len(batch) == 0:
        warnings.warn("update_reward_model called with an empty batch; skipped", RuntimeWarning, stacklevel=2)
        return None
    states = np.array([s.to_array() if isinstance(s, StateVector) else s for s, _, _ in batch], dtype=float)
    actions = [a for _, a, _ in batch]
    rewards = [r for _, _, r in batch]
    return model.train_step(states, actions, rewards, OptimizerConfig(learning_rate=lr))


def reward_model_grads(model: RewardModel, states, actions, rewards):
    """Exact loss gradients in network units (for gradient checks)."""
    x = model.encode(states, actions)
    y = np.asarray(rewards, dtype=float).reshape(-1, 1) / model.reward_scale
    return loss_and_grads(model.net, x, y)
