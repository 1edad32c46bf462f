"""Grid road networks: lanes, movements, phases and intersections.

Every intersection has four arms (N, E, S, W) and each approach carries three
lanes, one per turn (L, T, R). A vehicle picks the lane of a road according
to the turn it will make at the downstream intersection. On boundary exit
roads there is no downstream intersection; vehicles keep the lane label of
the turn they just made.

Arms are indexed clockwise (N=0, E=1, S=2, W=3). A vehicle approaching from
arm ``a`` leaves through arm ``a+1`` when turning left, ``a+2`` going through
and ``a+3`` turning right (all mod 4).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import NetworkError

ARMS = ("N", "E", "S", "W")
TURNS = ("L", "T", "R")
BOUNDARY = -1

N_PHASES = 4
PHASE_NAMES = ("NS-Through", "EW-Through", "NS-Left", "EW-Left")
# phase id -> (approach arms, turn) that get green; right turns are always green
_PHASE_GREEN = {
    0: ((0, 2), 1),
    1: ((1, 3), 1),
    2: ((0, 2), 0),
    3: ((1, 3), 0),
}

NETWORK_FORMAT = "tscimpute-grid"
NETWORK_VERSION = 1

_ARM_OFFSETS = {0: (-1, 0), 1: (0, 1), 2: (1, 0), 3: (0, -1)}


def exit_arm(approach: int, turn: int) -> int:
    """Arm through which a vehicle leaves after ``turn`` from ``approach``."""
    return (approach + 1 + turn) % 4


@dataclass(frozen=True)
class LaneParams:
    length: float = 300.0
    free_flow_steps: int = 11
    capacity: int = 40
    sat_flow: int = 2

    def validate(self) -> None:
        for name in ("length", "free_flow_steps", "capacity", "sat_flow"):
            value = getattr(self, name)
            if not value > 0:
                raise NetworkError(f"lane_params.{name} must be positive, got {value!r}")
        for name in ("free_flow_steps", "capacity", "sat_flow"):
            if int(getattr(self, name)) != getattr(self, name):
                raise NetworkError(f"lane_params.{name} must be an integer")


@dataclass(frozen=True)
class Lane:
    id: int
    from_node: int
    to_node: int
    length: float
    free_flow_steps: int
    capacity: int
    sat_flow: int
    approach_dir: str
    turn: str

    @property
    def is_entry(self) -> bool:
        return self.from_node == BOUNDARY

    @property
    def is_exit(self) -> bool:
        return self.to_node == BOUNDARY


@dataclass(frozen=True)
class Movement:
    in_lane: int
    out_lane: int


@dataclass(frozen=True)
class Phase:
    id: int
    movements: frozenset[Movement]

    @property
    def green_lanes(self) -> frozenset[int]:
        return frozenset(m.in_lane for m in self.movements)


@dataclass(frozen=True)
class Intersection:
    id: int
    grid_pos: tuple[int, int]
    incoming: tuple[int, ...]  # ordered [N,E,S,W] x [L,T,R]
    outgoing: tuple[int, ...]  # ordered by exit arm x lane label
    phases: tuple[Phase, ...]
    neighbors: tuple[int, ...]  # [N,E,S,W] order, absent arms omitted
    arm_neighbors: tuple[int | None, ...]  # one slot per arm

    @property
    def movements(self) -> tuple[Movement, ...]:
        """All movements of the intersection in a stable order."""
        out = []
        for pos, lane in enumerate(self.incoming):
            arm = exit_arm(*divmod(pos, 3))
            out.extend(Movement(lane, o) for o in self.outgoing[arm * 3 : arm * 3 + 3])
        return tuple(out)


@dataclass
class RoadNetwork:
    rows: int
    cols: int
    lane_params: LaneParams
    intersections: list[Intersection]
    lanes: list[Lane]
    entry_lanes: list[int]
    exit_lanes: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        # lane id -> (out road lanes indexed by label) for every in-lane
        self._turn_target: dict[int, tuple[int, int, int]] = {}
        self._movement_set: set[tuple[int, int]] = set()
        for inter in self.intersections:
            for pos, lane_id in enumerate(inter.incoming):
                approach, turn = divmod(pos, 3)
                arm = exit_arm(approach, turn)
                self._turn_target[lane_id] = tuple(inter.outgoing[arm * 3 : arm * 3 + 3])
            for phase in inter.phases:
                for m in phase.movements:
                    self._movement_set.add((m.in_lane, m.out_lane))

    @property
    def n_intersections(self) -> int:
        return len(self.intersections)

    def intersection(self, k: int) -> Intersection:
        if not isinstance(k, (int,)) or k < 0 or k >= len(self.intersections):
            raise KeyError(f"unknown intersection id {k!r}")
        return self.intersections[k]

    def index_of(self, row: int, col: int) -> int:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise KeyError(f"grid position {(row, col)} outside {self.rows}x{self.cols}")
        return row * self.cols + col

    def target_road(self, in_lane: int) -> tuple[int, int, int]:
        """Lanes (L, T, R labels) of the road an in-lane's vehicles turn onto."""
        return self._turn_target[in_lane]

    def is_movement(self, in_lane: int, out_lane: int) -> bool:
        return (in_lane, out_lane) in self._movement_set

    @property
    def internal_lanes(self) -> list[int]:
        return [ln.id for ln in self.lanes if not ln.is_entry and not ln.is_exit]

    def to_dict(self) -> dict:
        return {
            "format": NETWORK_FORMAT,
            "version": NETWORK_VERSION,
            "rows": self.rows,
            "cols": self.cols,
            "lane_params": asdict(self.lane_params),
        }


def build_grid(rows: int, cols: int, lane_params: LaneParams | None = None) -> RoadNetwork:
    """Build a ``rows`` x ``cols`` grid with 12 in/out lanes and 4 phases per node."""
    if int(rows) != rows or rows < 1:
        raise NetworkError(f"rows must be a positive integer, got {rows!r}")
    if int(cols) != cols or cols < 1:
        raise NetworkError(f"cols must be a positive integer, got {cols!r}")
    lp = lane_params or LaneParams()
    lp.validate()

    lanes: list[Lane] = []
    # (from_node, to_node, tag) -> lane ids [L, T, R]; tag disambiguates boundary roads
    roads: dict[tuple, list[int]] = {}

    def make_road(key, from_node, to_node, approach_arm):
        ids = []
        for t, turn in enumerate(TURNS):
            lane = Lane(
                id=len(lanes),
                from_node=from_node,
                to_node=to_node,
                length=float(lp.length),
                free_flow_steps=int(lp.free_flow_steps),
                capacity=int(lp.capacity),
                sat_flow=int(lp.sat_flow),
                approach_dir=ARMS[approach_arm],
                turn=turn,
            )
            lanes.append(lane)
            ids.append(lane.id)
        roads[key] = ids
        return ids

    def neighbor(idx, arm):
        r, c = divmod(idx, cols)
        dr, dc = _ARM_OFFSETS[arm]
        rr, cc = r + dr, c + dc
        if 0 <= rr < rows and 0 <= cc < cols:
            return rr * cols + cc
        return None

    n = rows * cols
    entry_lanes: list[int] = []
    exit_lanes: list[int] = []
    # incoming roads, created in a fixed order so lane ids are reproducible
    for idx in range(n):
        for arm in range(4):
            nb = neighbor(idx, arm)
            if nb is None:
                ids = make_road(("in", idx, arm), BOUNDARY, idx, arm)
                entry_lanes.extend(ids)
            else:
                make_road((nb, idx), nb, idx, arm)
    for idx in range(n):
        for arm in range(4):
            if neighbor(idx, arm) is None:
                # exit road, labelled as if approaching a virtual node from the opposite side
                ids = make_road(("out", idx, arm), idx, BOUNDARY, (arm + 2) % 4)
                exit_lanes.extend(ids)

    intersections = []
    for idx in range(n):
        arm_nb = tuple(neighbor(idx, arm) for arm in range(4))
        incoming: list[int] = []
        outgoing: list[int] = []
        for arm in range(4):
            nb = arm_nb[arm]
            incoming.extend(roads[("in", idx, arm)] if nb is None else roads[(nb, idx)])
        for arm in range(4):
            nb = arm_nb[arm]
            outgoing.extend(roads[("out", idx, arm)] if nb is None else roads[(idx, nb)])
        phases = []
        for pid in range(N_PHASES):
            green_arms, green_turn = _PHASE_GREEN[pid]
            moves = set()
            for pos, lane_id in enumerate(incoming):
                approach, turn = divmod(pos, 3)
                if turn == 2 or (approach in green_arms and turn == green_turn):
                    arm = exit_arm(approach, turn)
                    for out_lane in outgoing[arm * 3 : arm * 3 + 3]:
                        moves.add(Movement(lane_id, out_lane))
            phases.append(Phase(pid, frozenset(moves)))
        intersections.append(
            Intersection(
                id=idx,
                grid_pos=divmod(idx, cols),
                incoming=tuple(incoming),
                outgoing=tuple(outgoing),
                phases=tuple(phases),
                neighbors=tuple(nb for nb in arm_nb if nb is not None),
                arm_neighbors=arm_nb,
            )
        )

    net = RoadNetwork(rows, cols, lp, intersections, lanes, entry_lanes, exit_lanes)
    validate_network(net)
    return net


def validate_network(net: RoadNetwork) -> None:
    """Check the structural invariants of a built network."""
    n_lanes = len(net.lanes)
    for lane in net.lanes:
        if lane.from_node == BOUNDARY and lane.to_node == BOUNDARY:
            raise NetworkError(f"lane {lane.id} has boundary markers at both ends")
    for inter in net.intersections:
        if len(inter.incoming) != 12 or len(inter.outgoing) != 12:
            raise NetworkError(f"intersection {inter.id} does not have 12 in/out lanes")
        for nb in inter.neighbors:
            if inter.id not in net.intersections[nb].neighbors:
                raise NetworkError(f"neighbour relation {inter.id}-{nb} is not symmetric")
        if [p.id for p in inter.phases] != list(range(len(inter.phases))):
            raise NetworkError(f"intersection {inter.id} phase ids are not 0..P-1")
        for phase in inter.phases:
            for m in phase.movements:
                if not (0 <= m.in_lane < n_lanes and 0 <= m.out_lane < n_lanes):
                    raise NetworkError(f"movement {m} references a missing lane")
                if net.lanes[m.in_lane].to_node != inter.id or net.lanes[m.out_lane].from_node != inter.id:
                    raise NetworkError(f"movement {m} does not pass through {inter.id}")
    # connectivity over the neighbour graph
    seen = {0}
    stack = [0]
    while stack:
        k = stack.pop()
        for nb in net.intersections[k].neighbors:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    if len(seen) != net.n_intersections:
        raise NetworkError("road network is not connected")


def neighbors(net: RoadNetwork, k: int) -> list[int]:
    """Grid-adjacent intersections of ``k`` in [N, E, S, W] order."""
    return list(net.intersection(k).neighbors)


def save_network(net: RoadNetwork, path: str | Path) -> None:
    Path(path).write_text(json.dumps(net.to_dict(), indent=2, sort_keys=True) + "\n")


def load_network(path: str | Path) -> RoadNetwork:
    return network_from_dict(json.loads(Path(path).read_text()))


def network_from_dict(data: dict) -> RoadNetwork:
    if data.get("format") != NETWORK_FORMAT:
        raise NetworkError(f"not a {NETWORK_FORMAT} file (format={data.get('format')!r})")
    if data.get("version") != NETWORK_VERSION:
        raise NetworkError(f"unsupported network file version {data.get('version')!r}")
    lp = LaneParams(**data.get("lane_params", {}))
    return build_grid(int(data["rows"]), int(data["cols"]), lp)
