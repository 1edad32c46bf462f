"""Observed / unobserved intersection masks and the views restricted by them."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import ConstraintError, MaskError
from .road_network import RoadNetwork
from .traffic_sim import STATE_DIM, SimState, local_reward, local_state

NEIGHBOR_CONCAT_DIM = 4 * STATE_DIM
MAX_MASK_TRIES = 10_000


@dataclass(frozen=True)
class ObservationMask:
    observed: frozenset[int]
    unobserved: frozenset[int]

    @classmethod
    def from_unobserved(cls, net: RoadNetwork, unobserved) -> "ObservationMask":
        missing = frozenset(int(k) for k in unobserved)
        everything = frozenset(range(net.n_intersections))
        if not missing <= everything:
            raise MaskError(f"unknown intersections in mask: {sorted(missing - everything)}")
        return cls(everything - missing, missing)

    @property
    def missing_rate(self) -> float:
        return len(self.unobserved) / (len(self.observed) + len(self.unobserved))

    def is_observed(self, k: int) -> bool:
        return k in self.observed

    def to_list(self) -> list[int]:
        return sorted(self.unobserved)


def _has_adjacent_pair(net: RoadNetwork, ids) -> bool:
    return any(b in net.intersections[a].neighbors for a, b in combinations(ids, 2))


def sample_mask(net: RoadNetwork, n_missing: int, allow_adjacent: bool = True, rng_seed: int = 0) -> ObservationMask:
    """Sample ``n_missing`` unobserved intersections uniformly.

    ``allow_adjacent=False`` rejects draws where two unobserved
    intersections are grid neighbours; ``allow_adjacent=True`` requires at
    least one adjacent unobserved pair once two or more are missing.
    """
    n = net.n_intersections
    if not 0 <= n_missing < n:
        raise ConstraintError(f"n_missing must be in [0, {n}), got {n_missing}")
    rng = np.random.default_rng(rng_seed)
    for _ in range(MAX_MASK_TRIES):
        ids = sorted(int(k) for k in rng.choice(n, size=n_missing, replace=False))
        if n_missing >= 2:
            adjacent = _has_adjacent_pair(net, ids)
            if adjacent != allow_adjacent:
                continue
        return ObservationMask.from_unobserved(net, ids)
    mode = "adjacent" if allow_adjacent else "non-adjacent"
    raise ConstraintError(
        f"could not place {n_missing} {mode} unobserved intersections in a "
        f"{net.rows}x{net.cols} grid after {MAX_MASK_TRIES} draws"
    )


def neighbor_concat_state(state: SimState, mask: ObservationMask, k: int) -> np.ndarray:
    """64-dim input for an unobserved agent: its neighbours' states per arm.

    Slots follow [N, E, S, W]; missing arms and unobserved neighbours stay zero.
    """
    if k in mask.observed:
        raise MaskError(f"intersection {k} is observed; the neighbour view is for unobserved ones")
    out = np.zeros(NEIGHBOR_CONCAT_DIM)
    for slot, nb in enumerate(state.net.intersection(k).arm_neighbors):
        if nb is not None and nb in mask.observed:
            out[slot * STATE_DIM : (slot + 1) * STATE_DIM] = local_state(state, nb).to_array()
    return out


def neighbor_reward_sum(state: SimState, mask: ObservationMask, k: int) -> float:
    """Sum of the local rewards of ``k``'s observed neighbours (0 if none)."""
    return float(sum(local_reward(state, nb) for nb in state.net.intersection(k).neighbors if nb in mask.observed))
