"""Optimal demonstrations by breadth-first search over the agent's pose graph.

The search state is (position, direction, open-door bitset).  Doors only ever
open along a search path, pick up and drop are never expanded, and ties among
equal-length paths are broken by ascending action id, so results are fully
deterministic.
"""

from __future__ import annotations

import dataclasses
from collections import deque
from typing import Optional, Sequence

import numpy as np

from .agents import AgentTypeSpec
from .env import (
    Action,
    DIR_VEC,
    Direction,
    DoorState,
    EnvError,
    EnvState,
    Object,
    TaskInstruction,
    TURN_ACTIONS,
    TRANSLATION_ACTIONS,
    _translation_delta,
    encode_observation,
    is_success,
    step,
)


class InfeasibleTaskError(EnvError):
    """No action sequence under the mask reaches success within max_steps."""


@dataclasses.dataclass(frozen=True)
class TrajectoryRecord:
    """One expert episode: instruction, observations o_0..o_t, actions a_1..a_t.

    A record with an empty action tuple but several observations is an
    observation-only record (the output of granularity subsampling, where
    actions are deliberately dropped); otherwise observations outnumber
    actions by exactly one.
    """

    instruction: TaskInstruction
    observations: tuple[np.ndarray, ...]
    actions: tuple[int, ...]
    agent_id: int
    env_kind: str
    seed: int

    def __post_init__(self):
        if not self.observations:
            raise EnvError("record needs at least one observation")
        if self.actions and len(self.observations) != len(self.actions) + 1:
            raise EnvError(
                "observation count must be action count + 1, got "
                f"{len(self.observations)} and {len(self.actions)}"
            )

    @property
    def observation_only(self) -> bool:
        return not self.actions and len(self.observations) > 1


def _static_passable(grid: np.ndarray) -> np.ndarray:
    obj = grid[:, :, 0]
    return (obj == Object.EMPTY) | (obj == Object.FLOOR) | (obj == Object.GOAL)


def _door_cells(grid: np.ndarray) -> dict[tuple[int, int], int]:
    rows, cols = np.nonzero(grid[:, :, 0] == Object.DOOR)
    return {(int(c), int(r)): i for i, (r, c) in enumerate(zip(rows, cols))}


def _initial_door_bits(grid: np.ndarray, doors: dict[tuple[int, int], int]) -> int:
    bits = 0
    for (col, row), i in doors.items():
        if grid[row, col, 2] == DoorState.OPEN:
            bits |= 1 << i
    return bits


def _success_poses(state: EnvState, instruction: TaskInstruction) -> set[tuple[int, int, int]]:
    """All (col, row, dir) poses adjacent to a matching target cell, facing it."""
    grid = state.grid
    match = (grid[:, :, 0] == instruction.object_id) & (
        grid[:, :, 1] == instruction.color_id
    )
    poses = set()
    passable = _static_passable(grid)
    doors = grid[:, :, 0] == Object.DOOR
    for trow, tcol in zip(*np.nonzero(match)):
        for d in range(4):
            dc, dr = DIR_VEC[Direction(d)]
            acol, arow = int(tcol) - dc, int(trow) - dr
            if not (0 <= arow < grid.shape[0] and 0 <= acol < grid.shape[1]):
                continue
            if passable[arow, acol] or doors[arow, acol]:
                poses.add((acol, arow, d))
    return poses


def _search(
    state: EnvState,
    spec: AgentTypeSpec,
    goal_poses: set[tuple[int, int, int]],
    budget: int,
) -> Optional[list[int]]:
    """BFS over (pos, dir, door_bits) to any goal pose, ascending-id ties."""
    grid = state.grid
    height, width = grid.shape[:2]
    passable = _static_passable(grid)
    doors = _door_cells(grid)
    door_bits0 = _initial_door_bits(grid, doors)
    if not goal_poses:
        return None

    start = (state.agent_pos[0], state.agent_pos[1], int(state.agent_dir), door_bits0)
    if start[:3] in goal_poses:
        return []

    allowed = [Action(a) for a in spec.mask.allowed_ids()]

    def successors(node):
        """(next_node, action) pairs in ascending action-id order."""
        col, row, d, bits = node
        direction = Direction(d)
        for action in allowed:
            if action in TURN_ACTIONS:
                if action == Action.LEFT:
                    nd = direction.turn_left()
                elif action == Action.RIGHT:
                    nd = direction.turn_right()
                else:
                    nd = direction.opposite()
                yield (col, row, int(nd), bits), action
            elif action in TRANSLATION_ACTIONS:
                (dc, dr), ndir = _translation_delta(action, direction)
                c2, r2 = col + dc, row + dr
                if not (0 <= r2 < height and 0 <= c2 < width):
                    continue
                is_open_door = (c2, r2) in doors and bits >> doors[(c2, r2)] & 1
                if passable[r2, c2] or is_open_door:
                    yield (c2, r2, int(ndir), bits), action
            elif action == Action.TOGGLE:
                fc, fr = col + DIR_VEC[direction][0], row + DIR_VEC[direction][1]
                if (fc, fr) in doors and not bits >> doors[(fc, fr)] & 1:
                    if grid[fr, fc, 2] == DoorState.CLOSED:
                        yield (col, row, d, bits | 1 << doors[(fc, fr)]), action
            # pickup/drop/done never help a GoTo task; not expanded.

    visited = {start}
    frontier = deque([(start, ())])
    while frontier:
        node, path = frontier.popleft()
        if len(path) >= budget:
            continue
        for nxt, action in successors(node):
            if nxt in visited:
                continue
            visited.add(nxt)
            new_path = path + (int(action),)
            if nxt[:3] in goal_poses:
                return list(new_path)
            frontier.append((nxt, new_path))
    return None


def plan_actions(
    state: EnvState, instruction: TaskInstruction, spec: AgentTypeSpec
) -> Optional[list[int]]:
    """Shortest action sequence reaching success, or None if none exists
    within the episode's step budget."""
    goals = _success_poses(state, instruction)
    budget = state.max_steps - state.step_count
    return _search(state, spec, goals, budget)


def plan_to_pose(
    state: EnvState,
    goal_pose: tuple[int, int, int],
    spec: AgentTypeSpec,
    budget: Optional[int] = None,
) -> Optional[list[int]]:
    """Shortest action sequence bringing the agent to an exact
    (col, row, direction) pose, or None when unreachable in the budget."""
    if budget is None:
        budget = state.max_steps - state.step_count
    col, row, d = goal_pose
    return _search(state, spec, {(int(col), int(row), int(d) % 4)}, budget)


def plan_demo(
    state: EnvState,
    instruction: TaskInstruction,
    spec: AgentTypeSpec,
    visual: bool = False,
    env_kind: str = "",
) -> TrajectoryRecord:
    """Plan with :func:`plan_actions` and replay through the environment,
    recording the observation before each action plus the final observation.

    Raises :class:`InfeasibleTaskError` when no plan exists.  With ``visual``
    the agent cell carries the per-agent tint in every recorded frame.
    """
    actions = plan_actions(state, instruction, spec)
    if actions is None:
        raise InfeasibleTaskError(
            f"agent {spec.agent_id} ({spec.name}) cannot solve seed {state.rng_seed}"
        )
    tint = spec.agent_id if visual else None
    observations = [encode_observation(state, tint)]
    current = state
    for action in actions:
        current, done, success = step(current, action, spec.mask)
        observations.append(encode_observation(current, tint))
    if not is_success(current):
        raise EnvError("planned action sequence failed to reach success on replay")
    return TrajectoryRecord(
        instruction=instruction,
        observations=tuple(observations),
        actions=tuple(actions),
        agent_id=spec.agent_id,
        env_kind=env_kind,
        seed=state.rng_seed,
    )
