"""Agent types as action masks over the 19-action universe.

An agent type is nothing but a boolean mask: which of the 19 actions the
agent can execute.  Eight named types are built in (ids 0-5 in-distribution,
6-7 held out), and :func:`sample_diverse_agents` enumerates the space of
solvable movement subsets for large-scale mixtures.
"""

from __future__ import annotations

import dataclasses
import functools
from typing import Iterable, Sequence

import numpy as np

from .env import (
    Action,
    DIR_VEC,
    Direction,
    EnvConfig,
    EnvError,
    N_ACTIONS,
    TURN_ACTIONS,
    TRANSLATION_ACTIONS,
    _translation_delta,
)

INTERACTION_IDS = (3, 4, 5, 6)
MOVEMENT_IDS = tuple(sorted(set(range(N_ACTIONS)) - set(INTERACTION_IDS)))


@dataclasses.dataclass(frozen=True)
class ActionSpaceMask:
    bits: tuple[bool, ...]

    def __post_init__(self):
        if len(self.bits) != N_ACTIONS:
            raise EnvError(f"mask must have {N_ACTIONS} bits, got {len(self.bits)}")
        object.__setattr__(self, "bits", tuple(bool(b) for b in self.bits))

    @staticmethod
    def from_ids(ids: Iterable[int]) -> "ActionSpaceMask":
        ids = set(int(i) for i in ids)
        return ActionSpaceMask(tuple(i in ids for i in range(N_ACTIONS)))

    def allows(self, action: int) -> bool:
        return self.bits[int(action)]

    def allowed_ids(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.bits) if b)

    def movement_ids(self) -> tuple[int, ...]:
        return tuple(i for i in self.allowed_ids() if i in MOVEMENT_IDS)

    def as_int(self) -> int:
        return sum(1 << i for i, b in enumerate(self.bits) if b)


@dataclasses.dataclass(frozen=True)
class AgentTypeSpec:
    agent_id: int
    name: str
    mask: ActionSpaceMask
    split: str  # "ID" or "OOD"


def _builtin(agent_id, name, movement, split):
    return AgentTypeSpec(
        agent_id=agent_id,
        name=name,
        mask=ActionSpaceMask.from_ids(tuple(movement) + INTERACTION_IDS),
        split=split,
    )


_BUILTINS = (
    _builtin(0, "standard", (0, 1, 2), "ID"),
    _builtin(1, "no-left", (1, 2), "ID"),
    _builtin(2, "no-right", (0, 2), "ID"),
    _builtin(3, "diagonal", (0, 1, 2, 7, 8), "ID"),
    _builtin(4, "absolute", (9, 10, 11, 12), "ID"),
    _builtin(5, "eight-way", (1, 2, 7, 8, 14, 15, 16, 17, 18), "ID"),
    _builtin(6, "strafe-only", (1, 16, 17), "OOD"),
    _builtin(7, "diagonal-only", (1, 7, 8, 14, 15), "OOD"),
)


def builtin_agents() -> list[AgentTypeSpec]:
    """The eight named agent types, ids 0-7."""
    return list(_BUILTINS)


def get_agent(agent_id: int) -> AgentTypeSpec:
    if not 0 <= agent_id < len(_BUILTINS):
        raise EnvError(f"no built-in agent with id {agent_id}")
    return _BUILTINS[agent_id]


def action_space_vector(spec: AgentTypeSpec) -> np.ndarray:
    """The mask as a float 0/1 vector, the conditioning signal for planners."""
    return np.asarray(spec.mask.bits, dtype=np.float32)


# ---------------------------------------------------------------------------
# Solvability
# ---------------------------------------------------------------------------
#
# A mask is solvable in an arena when, starting from any pose, the agent can
# reach a success pose (adjacent to the cell, facing it) for every interior
# cell.  We build the pose graph (cell x direction) for an empty arena,
# condense it into strongly connected components, and check that every sink
# component can see a success pose for every candidate target cell.  Checking
# sinks is exact: every start reaches some sink, and a sink that fails is
# itself a failing start.


def _pose_edges(mask: ActionSpaceMask, size: int):
    interior = range(1, size - 1)
    n = size * size * 4

    def node(col, row, d):
        return (row * size + col) * 4 + d

    edges: list[list[int]] = [[] for _ in range(n)]
    nodes = []
    move_actions = [Action(i) for i in mask.movement_ids()]
    for row in interior:
        for col in interior:
            for d in range(4):
                src = node(col, row, d)
                nodes.append(src)
                direction = Direction(d)
                for action in move_actions:
                    if action in TURN_ACTIONS:
                        if action == Action.LEFT:
                            nd = direction.turn_left()
                        elif action == Action.RIGHT:
                            nd = direction.turn_right()
                        else:
                            nd = direction.opposite()
                        edges[src].append(node(col, row, nd))
                    else:
                        (dc, dr), nd = _translation_delta(action, direction)
                        c2, r2 = col + dc, row + dr
                        if 1 <= c2 < size - 1 and 1 <= r2 < size - 1:
                            edges[src].append(node(c2, r2, nd))
    return nodes, edges, node


def _tarjan_scc(nodes: Sequence[int], edges: Sequence[list[int]]) -> dict[int, int]:
    """Iterative Tarjan; components are numbered in reverse topological order."""
    index = {}
    low = {}
    on_stack = set()
    stack: list[int] = []
    comp: dict[int, int] = {}
    counter = 0
    n_comp = 0
    for root in nodes:
        if root in index:
            continue
        work = [(root, 0)]
        while work:
            v, ei = work[-1]
            if ei == 0:
                index[v] = low[v] = counter
                counter += 1
                stack.append(v)
                on_stack.add(v)
            advanced = False
            for j in range(ei, len(edges[v])):
                w = edges[v][j]
                if w not in index:
                    work[-1] = (v, j + 1)
                    work.append((w, 0))
                    advanced = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if low[v] == index[v]:
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp[w] = n_comp
                    if w == v:
                        break
                n_comp += 1
            if work:
                u, _ = work[-1]
                low[u] = min(low[u], low[v])
    return comp


def _check_solvable(mask: ActionSpaceMask, size: int) -> bool:
    if not any(mask.bits[a] for a in TRANSLATION_ACTIONS):
        return False
    nodes, edges, node = _pose_edges(mask, size)
    comp = _tarjan_scc(nodes, edges)
    n_comp = max(comp.values()) + 1

    # comp ids come out in reverse topological order, so successors of c have
    # ids < c and their reach sets are final when c is processed.
    reach = [0] * n_comp
    for c in range(n_comp):
        reach[c] = 1 << c
    order = sorted(nodes, key=lambda v: comp[v])
    for v in order:
        c = comp[v]
        for w in edges[v]:
            reach[c] |= reach[comp[w]]
    sinks = [c for c in range(n_comp) if reach[c] == (1 << c)]

    interior = range(1, size - 1)
    for trow in interior:
        for tcol in interior:
            target_bits = 0
            for d in range(4):
                dc, dr = DIR_VEC[Direction(d)]
                acol, arow = tcol - dc, trow - dr
                if 1 <= acol < size - 1 and 1 <= arow < size - 1:
                    target_bits |= 1 << comp[node(acol, arow, d)]
            if target_bits == 0:
                return False
            for c in sinks:
                if not reach[c] & target_bits:
                    return False
            # Non-sink components all reach a sink, so sinks suffice.
    return True


def is_solvable(mask: ActionSpaceMask, config: EnvConfig) -> bool:
    """Whether the mask can complete any GoTo task in an empty arena
    of the config's grid size, from any starting pose."""
    return _check_solvable(mask, config.grid_size)


@functools.lru_cache(maxsize=None)
def _solvable_movement_sets(size: int) -> tuple[int, ...]:
    """All movement-id subsets (as bit-ints over action ids) that are solvable.

    Solvability is monotone in the mask, so subsets are visited in order of
    increasing popcount and any superset of a known-solvable set is accepted
    without rerunning the pose-graph check.
    """
    subsets = sorted(range(1 << len(MOVEMENT_IDS)), key=lambda s: (bin(s).count("1"), s))
    minimal: list[int] = []
    solvable: list[int] = []
    for s in subsets:
        ids = [MOVEMENT_IDS[i] for i in range(len(MOVEMENT_IDS)) if s >> i & 1]
        as_int = sum(1 << i for i in ids)
        if any(as_int & m == m for m in minimal):
            solvable.append(as_int)
            continue
        mask = ActionSpaceMask.from_ids(tuple(ids) + INTERACTION_IDS)
        if _check_solvable(mask, size):
            solvable.append(as_int)
            minimal.append(as_int)
    return tuple(solvable)


def sample_diverse_agents(
    n: int, seed: int, config: EnvConfig | None = None
) -> list[AgentTypeSpec]:
    """Draw ``n`` distinct solvable agent masks, deterministic in ``seed``.

    The two held-out built-in masks (agents 6 and 7) are never drawn, so they
    stay out of distribution no matter how large the sample.
    """
    size = (config or EnvConfig.make("gotoobj")).grid_size
    excluded = {
        sum(1 << i for i in get_agent(a).mask.movement_ids()) for a in (6, 7)
    }
    pool = [s for s in _solvable_movement_sets(size) if s not in excluded]
    if n > len(pool):
        raise EnvError(f"only {len(pool)} solvable masks available, requested {n}")
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(len(pool))[:n]
    agents = []
    for k, idx in enumerate(sorted(int(i) for i in chosen)):
        movement = pool[idx]
        ids = [i for i in range(N_ACTIONS) if movement >> i & 1] + list(INTERACTION_IDS)
        agents.append(
            AgentTypeSpec(
                agent_id=8 + k,
                name=f"gen-{movement:05x}",
                mask=ActionSpaceMask.from_ids(ids),
                split="ID",
            )
        )
    return agents
