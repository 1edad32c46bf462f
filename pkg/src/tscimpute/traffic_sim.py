"""Deterministic point-queue (store-and-forward) traffic simulator.

One step is one second. A vehicle entering a lane travels for the lane's
``free_flow_steps`` and then joins the lane's FIFO queue. Queued vehicles
are released by green signals, at most ``sat_flow`` per in-lane and step, and
only while the lane they turn onto has spare capacity. The head of a queue
blocks everything behind it.

:func:`advance` mutates the state in place and returns it; use
:meth:`SimState.copy` to branch a trajectory.
"""

from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ControlError, SimulationError
from .road_network import BOUNDARY, N_PHASES, RoadNetwork, exit_arm

STATE_DIM = 16
FLOW_HEADER = "# tscimpute-flow v1: entry_step entry_lane route(comma-separated lane ids)"


@dataclass(slots=True)
class Vehicle:
    id: int
    route: tuple[int, ...]
    entry_step: int
    route_index: int = 0
    exit_step: int | None = None
    ready_step: int = 0  # step at which it stops travelling and joins the queue
    queued: bool = False

    def remaining_steps(self, step: int) -> int:
        """Travel steps left on the current lane (0 once queued)."""
        return 0 if self.queued else max(self.ready_step - step, 0)

    @property
    def lane(self) -> int:
        return self.route[self.route_index]


@dataclass(frozen=True)
class FlowSpec:
    arrivals: tuple[tuple[int, int, tuple[int, ...]], ...]

    def __len__(self) -> int:
        return len(self.arrivals)

    def validate(self, net: RoadNetwork) -> None:
        entry = set(net.entry_lanes)
        last = -1
        for n, (t, lane, route) in enumerate(self.arrivals):
            if t < last:
                raise SimulationError(f"arrival {n} is out of order (step {t} after {last})")
            last = t
            if lane not in entry:
                raise SimulationError(f"arrival {n} enters on non-entry lane {lane}")
            if not route or route[0] != lane:
                raise SimulationError(f"arrival {n} route does not start at its entry lane")
            if not net.lanes[route[-1]].is_exit:
                raise SimulationError(f"arrival {n} route does not end on an exit lane")
            for a, b in zip(route, route[1:]):
                if not net.is_movement(a, b):
                    raise SimulationError(f"arrival {n} route has no movement {a}->{b}")


@dataclass(frozen=True)
class StateVector:
    """Local observation of one intersection: 12 lane counts and its phase."""

    lane_counts: np.ndarray
    phase: int

    @property
    def phase_onehot(self) -> np.ndarray:
        out = np.zeros(N_PHASES)
        out[self.phase] = 1.0
        return out

    def to_array(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.lane_counts, dtype=float), self.phase_onehot])

    def __eq__(self, other) -> bool:
        if not isinstance(other, StateVector):
            return NotImplemented
        return self.phase == other.phase and np.array_equal(self.lane_counts, other.lane_counts)

    __hash__ = None  # type: ignore[assignment]


@dataclass
class Metrics:
    avg_travel_time: float
    throughput: int
    injected: int
    per_intersection_delay: dict[int, float]
    per_intersection_visits: dict[int, int]
    per_step_queue_log: list[int]
    degenerate: bool = False


@dataclass
class SimState:
    net: RoadNetwork
    step: int = 0
    phase: list[int] = field(default_factory=list)
    traveling: list[deque] = field(default_factory=list)
    queues: list[deque] = field(default_factory=list)
    active: dict[int, Vehicle] = field(default_factory=dict)
    completed: list[Vehicle] = field(default_factory=list)
    pending: deque = field(default_factory=deque)  # blocked at entry, retried each step
    next_arrival: int = 0
    blocked_events: int = 0
    queue_sums: np.ndarray | None = None  # per intersection, summed over steps
    visits: np.ndarray | None = None
    queue_log: list[int] = field(default_factory=list)

    @classmethod
    def new(cls, net: RoadNetwork, initial_phase: int = 0) -> "SimState":
        n_lanes = len(net.lanes)
        return cls(
            net=net,
            phase=[initial_phase] * net.n_intersections,
            traveling=[deque() for _ in range(n_lanes)],
            queues=[deque() for _ in range(n_lanes)],
            queue_sums=np.zeros(net.n_intersections),
            visits=np.zeros(net.n_intersections, dtype=int),
        )

    def copy(self) -> "SimState":
        net = self.net
        self.net = None  # type: ignore[assignment]
        try:
            dup = copy.deepcopy(self)
        finally:
            self.net = net
        dup.net = net
        return dup

    def occupancy(self, lane: int) -> int:
        return len(self.traveling[lane]) + len(self.queues[lane])

    def lane_queue(self, lane: int) -> int:
        return len(self.queues[lane])

    @property
    def n_due(self) -> int:
        """Arrivals whose scheduled entry step has been processed."""
        return self.next_arrival

    def check_invariants(self) -> list[str]:
        """Return a list of violated invariants (empty when consistent)."""
        problems = []
        seen: dict[int, int] = {}
        for lane_id in range(len(self.net.lanes)):
            cap = self.net.lanes[lane_id].capacity
            if self.occupancy(lane_id) > cap:
                problems.append(f"lane {lane_id} over capacity at step {self.step}")
            for v in list(self.traveling[lane_id]) + list(self.queues[lane_id]):
                if v.id in seen:
                    problems.append(f"vehicle {v.id} on lanes {seen[v.id]} and {lane_id}")
                seen[v.id] = lane_id
                if v.lane != lane_id:
                    problems.append(f"vehicle {v.id} route position disagrees with lane {lane_id}")
        if set(seen) != set(self.active):
            problems.append("active vehicle set differs from vehicles on lanes")
        if self.n_due != len(self.active) + len(self.completed) + len(self.pending):
            problems.append("vehicle conservation violated")
        return problems


def _sample_route(net: RoadNetwork, idx: int, approach: int, turn_p: np.ndarray, rng) -> tuple[int, ...]:
    max_hops = 2 * (net.rows + net.cols) + 4
    route: list[int] = []
    hops = 0
    while True:
        inter = net.intersections[idx]
        turn = 1 if hops >= max_hops else int(rng.choice(3, p=turn_p))
        route.append(inter.incoming[approach * 3 + turn])
        arm = exit_arm(approach, turn)
        nb = inter.arm_neighbors[arm]
        if nb is None:
            route.append(inter.outgoing[arm * 3 + turn])
            return tuple(route)
        idx, approach = nb, (arm + 2) % 4
        hops += 1


def generate_gaussian_flow(
    net: RoadNetwork,
    mean_rate: float,
    std_rate: float,
    horizon: int,
    turn_probs: Sequence[float] = (0.1, 0.8, 0.1),
    rng_seed: int = 0,
) -> FlowSpec:
    """Synthetic demand: per entry road and 60-step window, ``N(mean, std)`` vehicles.

    Rates are vehicles per minute per entry road. Counts are clipped at zero
    and rounded; a trailing partial window gets a proportional share.
    """
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    if not mean_rate > 0:
        raise ValueError(f"mean_rate must be positive, got {mean_rate}")
    if std_rate < 0:
        raise ValueError(f"std_rate must be non-negative, got {std_rate}")
    p = np.asarray(turn_probs, dtype=float)
    if p.shape != (3,) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
        raise ValueError(f"turn_probs must be three non-negative values summing to 1, got {turn_probs}")
    p = p / p.sum()
    rng = np.random.default_rng(rng_seed)

    arrivals = []
    for inter in net.intersections:
        for arm in range(4):
            if inter.arm_neighbors[arm] is not None:
                continue
            for start in range(0, horizon, 60):
                width = min(60, horizon - start)
                draw = rng.normal(mean_rate, std_rate) if std_rate > 0 else mean_rate
                count = int(round(max(draw, 0.0) * width / 60))
                steps = np.sort(rng.integers(start, start + width, size=count))
                for t in steps:
                    route = _sample_route(net, inter.id, arm, p, rng)
                    arrivals.append((int(t), route[0], route))
    arrivals.sort(key=lambda a: a[0])  # stable: ties keep generation order
    return FlowSpec(tuple(arrivals))


def save_flow(flow: FlowSpec, path: str | Path) -> None:
    lines = [FLOW_HEADER]
    for t, lane, route in flow.arrivals:
        lines.append(f"{t} {lane} {','.join(map(str, route))}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_flow(path: str | Path, net: RoadNetwork | None = None) -> FlowSpec:
    arrivals = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            t, lane, route = line.split()
            arrivals.append((int(t), int(lane), tuple(int(x) for x in route.split(","))))
        except ValueError as exc:
            raise SimulationError(f"{path}:{lineno}: malformed flow record {line!r}") from exc
    flow = FlowSpec(tuple(arrivals))
    if net is not None:
        flow.validate(net)
    return flow


def _check_signals(net: RoadNetwork, signals) -> list[int]:
    n = net.n_intersections
    if isinstance(signals, Mapping):
        missing = [k for k in range(n) if k not in signals]
        if missing:
            raise ControlError(f"no signal for intersections {missing}")
        plan = [signals[k] for k in range(n)]
    else:
        plan = list(signals)
        if len(plan) != n:
            raise ControlError(f"expected {n} signals, got {len(plan)}")
    for k, p in enumerate(plan):
        if not (isinstance(p, (int, np.integer)) and 0 <= p < len(net.intersections[k].phases)):
            raise ControlError(f"unknown phase {p!r} for intersection {k}")
    return [int(p) for p in plan]


def _green_lanes(net: RoadNetwork) -> list[list[frozenset[int]]]:
    cache = getattr(net, "_green_cache", None)
    if cache is None:
        cache = [[ph.green_lanes for ph in inter.phases] for inter in net.intersections]
        net._green_cache = cache  # type: ignore[attr-defined]
    return cache


def advance(state: SimState, flow: FlowSpec, signals) -> SimState:
    """Advance the simulation by one step under ``signals`` (intersection -> phase)."""
    net = state.net
    plan = _check_signals(net, signals)
    state.phase = plan
    t = state.step
    lanes = net.lanes
    traveling, queues = state.traveling, state.queues

    # (2) travellers whose free-flow time is up join their lane's queue;
    # done before injection so vehicles entering this step are not counted down
    for lane_id in range(len(lanes)):
        trav = traveling[lane_id]
        while trav and trav[0].ready_step <= t:
            v = trav.popleft()
            v.queued = True
            queues[lane_id].append(v)

    # (1) inject: blocked arrivals first, then newly due ones
    arrivals = flow.arrivals
    while state.next_arrival < len(arrivals) and arrivals[state.next_arrival][0] <= t:
        entry_step, lane, route = arrivals[state.next_arrival]
        state.pending.append(Vehicle(id=state.next_arrival, route=tuple(route), entry_step=entry_step))
        state.next_arrival += 1
    still_blocked: deque = deque()
    while state.pending:
        v = state.pending.popleft()
        lane_id = v.route[0]
        if state.occupancy(lane_id) >= lanes[lane_id].capacity:
            state.blocked_events += 1
            still_blocked.append(v)
            continue
        v.ready_step = t + lanes[lane_id].free_flow_steps
        traveling[lane_id].append(v)
        state.active[v.id] = v
        state.visits[lanes[lane_id].to_node] += 1
    state.pending = still_blocked

    # (3) discharge through green movements
    green = _green_lanes(net)
    for inter in net.intersections:
        green_now = green[inter.id][plan[inter.id]]
        for in_lane in inter.incoming:
            q = queues[in_lane]
            if not q or in_lane not in green_now:
                continue
            moved = 0
            sat = lanes[in_lane].sat_flow
            while q and moved < sat:
                v = q[0]
                if v.route_index + 1 >= len(v.route):
                    raise SimulationError(f"vehicle {v.id} route ends on non-exit lane {in_lane}")
                out_lane = v.route[v.route_index + 1]
                if not net.is_movement(in_lane, out_lane):
                    raise SimulationError(f"vehicle {v.id} has no movement {in_lane}->{out_lane}")
                if state.occupancy(out_lane) >= lanes[out_lane].capacity:
                    break
                q.popleft()
                v.route_index += 1
                v.queued = False
                v.ready_step = t + lanes[out_lane].free_flow_steps
                traveling[out_lane].append(v)
                to_node = lanes[out_lane].to_node
                if to_node != BOUNDARY:
                    state.visits[to_node] += 1
                moved += 1

    # (4) exit lanes drain into the boundary sink
    for lane_id in net.exit_lanes:
        q = queues[lane_id]
        while q:
            v = q.popleft()
            if v.route_index != len(v.route) - 1:
                raise SimulationError(f"vehicle {v.id} left the network mid-route")
            v.exit_step = t + 1
            v.queued = False
            del state.active[v.id]
            state.completed.append(v)

    total = 0
    for inter in net.intersections:
        qlen = sum(len(queues[l]) for l in inter.incoming)
        state.queue_sums[inter.id] += qlen
        total += qlen
    state.queue_log.append(total)
    # (5)
    state.step = t + 1
    return state


def local_state(state: SimState, i: int) -> StateVector:
    inter = state.net.intersection(i)
    counts = np.array([state.occupancy(l) for l in inter.incoming], dtype=float)
    return StateVector(counts, state.phase[i])


def local_queues(state: SimState, i: int) -> np.ndarray:
    inter = state.net.intersection(i)
    return np.array([len(state.queues[l]) for l in inter.incoming], dtype=float)


def local_reward(state: SimState, i: int) -> float:
    """Negated number of queued vehicles on the incoming lanes of ``i``."""
    inter = state.net.intersection(i)
    return -float(sum(len(state.queues[l]) for l in inter.incoming))


def episode_metrics(state: SimState, horizon: int) -> Metrics:
    """Summarise an episode; unfinished vehicles count with censored times."""
    times = [v.exit_step - v.entry_step for v in state.completed]
    times += [horizon - v.entry_step for v in state.active.values()]
    times += [horizon - v.entry_step for v in state.pending]
    steps = max(state.step, 1)
    n = state.net.n_intersections
    delay = {k: float(state.queue_sums[k]) / steps for k in range(n)}
    visits = {k: int(state.visits[k]) for k in range(n)}
    if not times:
        return Metrics(0.0, 0, 0, delay, visits, list(state.queue_log), degenerate=True)
    return Metrics(
        avg_travel_time=float(np.mean(times)),
        throughput=len(state.completed),
        injected=state.n_due,
        per_intersection_delay=delay,
        per_intersection_visits=visits,
        per_step_queue_log=list(state.queue_log),
    )


def run_fixed_signals(net: RoadNetwork, flow: FlowSpec, signal_fn, horizon: int) -> SimState:
    """Run ``horizon`` steps where ``signal_fn(state)`` returns the signals each step."""
    state = SimState.new(net)
    for _ in range(horizon):
        advance(state, flow, signal_fn(state))
    return state
