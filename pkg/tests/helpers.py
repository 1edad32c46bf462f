"""Shared scaffolding for simulator tests."""

import numpy as np

from tscimpute.traffic_sim import FlowSpec, SimState, advance


def straight_route(net, k=0, approach=0):
    """Entry lane through ``k`` from ``approach`` going straight to the exit."""
    inter = net.intersections[k]
    in_lane = inter.incoming[approach * 3 + 1]
    return (in_lane, net.target_road(in_lane)[1])


def queue_snapshot(state):
    return [[v.id for v in q] for q in state.queues]


def fifo_violations(before, after, state):
    """Lanes whose queue did not behave as pop-front / push-back."""
    bad = []
    for lane, (pre, post) in enumerate(zip(before, after)):
        # vehicles still in the queue must be a suffix of the old queue, in order
        kept = [v for v in post if v in set(pre)]
        if kept != pre[len(pre) - len(kept):]:
            bad.append(lane)
        # newcomers only at the back
        n_kept = len(kept)
        if post[:n_kept] != kept:
            bad.append(lane)
    return bad


def random_episode(net, flow, horizon, rng, check=None):
    state = SimState.new(net)
    signals = [0] * net.n_intersections
    for t in range(horizon):
        if t % 10 == 0:
            signals = [int(x) for x in rng.integers(4, size=net.n_intersections)]
        before = queue_snapshot(state)
        advance(state, flow, signals)
        if check is not None:
            check(state, before)
    return state


def manual_flow(*arrivals):
    return FlowSpec(tuple(sorted(arrivals, key=lambda a: a[0])))


def chain_mdp(gamma):
    """Two states, two actions: action 0 stays, action 1 switches; reward 1 for landing in state 1.

    Returns the 16-dim state encodings, a batch covering every (s, a) pair
    and Q* from value iteration.
    """
    from tscimpute.agents import Experience

    states = np.zeros((2, 16))
    states[0, 12] = 1
    states[1, 13] = 1
    nxt = {(s, a): s if a == 0 else 1 - s for s in (0, 1) for a in (0, 1)}
    batch = [Experience(states[s], a, float(nxt[s, a] == 1), states[nxt[s, a]]) for s in (0, 1) for a in (0, 1)]
    q_star = np.zeros((2, 2))
    for _ in range(5000):
        q_star = np.array([[float(nxt[s, a] == 1) + gamma * q_star[nxt[s, a]].max() for a in (0, 1)] for s in (0, 1)])
    return states, batch, q_star


def train_chain(gamma=0.95, updates=5000, sync_every=25, lr=1e-3, seed=0):
    """Fit a 2-output Q-network to the chain MDP; returns the max abs error to Q*."""
    from tscimpute.agents import QNetwork, dqn_update
    from tscimpute.nn import OptimizerConfig, mlp_init

    states, batch, q_star = chain_mdp(gamma)
    q = QNetwork(mlp_init([16, 32, 32, 2], seed))
    target = q.copy()
    opt = OptimizerConfig(learning_rate=lr)
    for i in range(updates):
        dqn_update(q, target, batch, gamma, opt)
        if (i + 1) % sync_every == 0:
            target = q.copy()
    return float(np.abs(q.q_values(states) - q_star).max())
