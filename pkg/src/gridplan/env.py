"""Deterministic, fully observable gridworld with an extended 19-action space.

The world is a bordered grid of cells, each encoded as an integer triple
``(object_id, color_id, state_id)``.  Three task layouts are supported:

* ``GOTO_OBJ``      -- a single room with one object to navigate to,
* ``GOTO_DISTRACTOR`` -- the same room with three distractor objects,
* ``GOTO_DISTRACTOR_LARGE`` -- nine rooms connected by doors, seven distractors.

States are immutable values; :func:`step` returns a fresh state, so episodes
can run in parallel without shared mutable data.
"""

from __future__ import annotations

import dataclasses
import re
from enum import Enum, IntEnum
from typing import Optional, Sequence, Union

import numpy as np


class EnvError(RuntimeError):
    """Contract violation in environment usage."""


class GenerationError(EnvError):
    """Layout generation failed to produce a solvable episode."""


class DecodeError(EnvError):
    """An observation grid could not be decoded back into a state."""


class Direction(IntEnum):
    EAST = 0
    SOUTH = 1
    WEST = 2
    NORTH = 3

    def turn_right(self) -> "Direction":
        return Direction((self + 1) % 4)

    def turn_left(self) -> "Direction":
        return Direction((self - 1) % 4)

    def opposite(self) -> "Direction":
        return Direction((self + 2) % 4)


# (dcol, drow) unit vectors; rows grow downwards.
DIR_VEC = {
    Direction.EAST: (1, 0),
    Direction.SOUTH: (0, 1),
    Direction.WEST: (-1, 0),
    Direction.NORTH: (0, -1),
}


class Object(IntEnum):
    UNSEEN = 0
    EMPTY = 1
    WALL = 2
    FLOOR = 3
    DOOR = 4
    KEY = 5
    BALL = 6
    BOX = 7
    GOAL = 8
    AGENT = 9


class Color(IntEnum):
    RED = 0
    GREEN = 1
    BLUE = 2
    PURPLE = 3
    YELLOW = 4
    GREY = 5


class DoorState(IntEnum):
    OPEN = 0
    CLOSED = 1
    LOCKED = 2


COLOR_NAMES = {
    Color.RED: "red",
    Color.GREEN: "green",
    Color.BLUE: "blue",
    Color.PURPLE: "purple",
    Color.YELLOW: "yellow",
    Color.GREY: "grey",
}

OBJECT_NAMES = {Object.KEY: "key", Object.BALL: "ball", Object.BOX: "box"}

# Object kinds that can serve as navigation targets.
TARGET_OBJECTS = (Object.KEY, Object.BALL, Object.BOX)

# Channel vocabularies.  Colors 0-5 belong to objects; 6-13 are reserved as
# per-agent tints so recoloured agents never collide with object colors.
OBJECT_VOCAB = 10
COLOR_VOCAB = 14
STATE_VOCAB = 4
AGENT_TINT_BASE = 6
DEFAULT_AGENT_COLOR = Color.RED

VOCAB_SIZES = (OBJECT_VOCAB, COLOR_VOCAB, STATE_VOCAB)


class Action(IntEnum):
    """The 19-action universe.

    Relative moves (7, 8, 14, 15, 16, 17, 18) keep the agent's facing;
    absolute moves (9-12) also turn the agent into the direction of motion.
    """

    LEFT = 0
    RIGHT = 1
    FORWARD = 2
    PICKUP = 3
    DROP = 4
    TOGGLE = 5
    DONE = 6
    DIAG_LEFT = 7
    DIAG_RIGHT = 8
    MOVE_EAST = 9
    MOVE_SOUTH = 10
    MOVE_WEST = 11
    MOVE_NORTH = 12
    TURN_AROUND = 13
    DIAG_BACK_LEFT = 14
    DIAG_BACK_RIGHT = 15
    STRAFE_LEFT = 16
    STRAFE_RIGHT = 17
    BACKWARD = 18


N_ACTIONS = 19

INTERACTION_ACTIONS = frozenset(
    {Action.PICKUP, Action.DROP, Action.TOGGLE, Action.DONE}
)
MOVEMENT_ACTIONS = frozenset(Action) - INTERACTION_ACTIONS
TURN_ACTIONS = frozenset({Action.LEFT, Action.RIGHT, Action.TURN_AROUND})
TRANSLATION_ACTIONS = MOVEMENT_ACTIONS - TURN_ACTIONS


class EnvKind(str, Enum):
    GOTO_OBJ = "gotoobj"
    GOTO_DISTRACTOR = "gotodistractor"
    GOTO_DISTRACTOR_LARGE = "gotodistractorlarge"


@dataclasses.dataclass(frozen=True)
class EnvConfig:
    kind: EnvKind
    grid_size: int
    n_distractors: int
    max_steps: int

    @staticmethod
    def make(kind: Union[EnvKind, str]) -> "EnvConfig":
        kind = EnvKind(kind)
        if kind == EnvKind.GOTO_OBJ:
            return EnvConfig(kind, grid_size=8, n_distractors=0, max_steps=25)
        if kind == EnvKind.GOTO_DISTRACTOR:
            return EnvConfig(kind, grid_size=8, n_distractors=3, max_steps=25)
        return EnvConfig(kind, grid_size=22, n_distractors=7, max_steps=100)


@dataclasses.dataclass(frozen=True)
class TaskInstruction:
    """A "go to the {color} {object}" task naming a unique target."""

    template: str
    color_id: int
    object_id: int
    text: str

    @staticmethod
    def go_to(color_id: int, object_id: int) -> "TaskInstruction":
        text = f"go to the {COLOR_NAMES[Color(color_id)]} {OBJECT_NAMES[Object(object_id)]}"
        return TaskInstruction(
            template="GoTo", color_id=color_id, object_id=object_id, text=text
        )


_INSTRUCTION_RE = re.compile(r"^go to the (\w+) (\w+)$")
_COLOR_BY_NAME = {name: color for color, name in COLOR_NAMES.items()}
_OBJECT_BY_NAME = {name: obj for obj, name in OBJECT_NAMES.items()}


def parse_instruction(text: str) -> TaskInstruction:
    match = _INSTRUCTION_RE.match(text.strip().lower())
    if match is None:
        raise EnvError(f"unparseable instruction: {text!r}")
    color_name, object_name = match.groups()
    if color_name not in _COLOR_BY_NAME or object_name not in _OBJECT_BY_NAME:
        raise EnvError(f"unknown color/object in instruction: {text!r}")
    return TaskInstruction.go_to(_COLOR_BY_NAME[color_name], _OBJECT_BY_NAME[object_name])


@dataclasses.dataclass(frozen=True)
class EnvState:
    """Immutable full state of one episode.

    ``grid`` has shape (H, W, 3) and holds (object, color, state) triples;
    the agent is not part of the grid, its pose lives in ``agent_pos`` /
    ``agent_dir``.  Positions are (col, row).
    """

    grid: np.ndarray
    agent_pos: tuple[int, int]
    agent_dir: Direction
    carried: Optional[tuple[int, int, int]]
    step_count: int
    max_steps: int
    rng_seed: int
    mission: Optional[TaskInstruction]

    def __post_init__(self):
        self.grid.setflags(write=False)

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]


def cell_at(grid: np.ndarray, pos: tuple[int, int]) -> tuple[int, int, int]:
    col, row = pos
    c = grid[row, col]
    return (int(c[0]), int(c[1]), int(c[2]))


def front_pos(state: EnvState) -> tuple[int, int]:
    dc, dr = DIR_VEC[state.agent_dir]
    return (state.agent_pos[0] + dc, state.agent_pos[1] + dr)


def _in_bounds(grid: np.ndarray, pos: tuple[int, int]) -> bool:
    col, row = pos
    return 0 <= row < grid.shape[0] and 0 <= col < grid.shape[1]


def is_traversable(cell: tuple[int, int, int]) -> bool:
    obj = cell[0]
    if obj in (Object.EMPTY, Object.FLOOR, Object.GOAL):
        return True
    return obj == Object.DOOR and cell[2] == DoorState.OPEN


def is_success(state: EnvState) -> bool:
    """True when the agent stands orthogonally adjacent to the target, facing it."""
    if state.mission is None:
        return False
    fp = front_pos(state)
    if not _in_bounds(state.grid, fp):
        return False
    obj, color, _ = cell_at(state.grid, fp)
    return obj == state.mission.object_id and color == state.mission.color_id


def _translation_delta(action: Action, direction: Direction):
    """Return ((dcol, drow), new_direction) for a translation action."""
    f = DIR_VEC[direction]
    r = DIR_VEC[direction.turn_right()]
    if action == Action.FORWARD:
        return f, direction
    if action == Action.DIAG_LEFT:
        return (f[0] - r[0], f[1] - r[1]), direction
    if action == Action.DIAG_RIGHT:
        return (f[0] + r[0], f[1] + r[1]), direction
    if action == Action.MOVE_EAST:
        return DIR_VEC[Direction.EAST], Direction.EAST
    if action == Action.MOVE_SOUTH:
        return DIR_VEC[Direction.SOUTH], Direction.SOUTH
    if action == Action.MOVE_WEST:
        return DIR_VEC[Direction.WEST], Direction.WEST
    if action == Action.MOVE_NORTH:
        return DIR_VEC[Direction.NORTH], Direction.NORTH
    if action == Action.DIAG_BACK_LEFT:
        return (-f[0] - r[0], -f[1] - r[1]), direction
    if action == Action.DIAG_BACK_RIGHT:
        return (-f[0] + r[0], -f[1] + r[1]), direction
    if action == Action.STRAFE_LEFT:
        return (-r[0], -r[1]), direction
    if action == Action.STRAFE_RIGHT:
        return (r[0], r[1]), direction
    if action == Action.BACKWARD:
        return (-f[0], -f[1]), direction
    raise EnvError(f"not a translation action: {action}")


def _mask_bits(mask) -> Optional[np.ndarray]:
    if mask is None:
        return None
    bits = getattr(mask, "bits", mask)
    return np.asarray(bits, dtype=bool)


def step(state: EnvState, action: int, mask=None) -> tuple[EnvState, bool, bool]:
    """Advance one timestep.

    Masked-out, physically blocked, and inapplicable actions leave the grid,
    pose, and carried item unchanged but still consume the timestep.  Returns
    ``(new_state, done, success)`` where ``done = success or out of time``.
    """
    if not 0 <= int(action) < N_ACTIONS:
        raise EnvError(f"action id out of range: {action}")
    action = Action(int(action))
    bits = _mask_bits(mask)
    allowed = True if bits is None else bool(bits[action])

    grid = state.grid
    pos = state.agent_pos
    direction = state.agent_dir
    carried = state.carried

    if allowed:
        if action == Action.LEFT:
            direction = direction.turn_left()
        elif action == Action.RIGHT:
            direction = direction.turn_right()
        elif action == Action.TURN_AROUND:
            direction = direction.opposite()
        elif action in TRANSLATION_ACTIONS:
            (dc, dr), new_dir = _translation_delta(action, direction)
            dest = (pos[0] + dc, pos[1] + dr)
            if _in_bounds(grid, dest) and is_traversable(cell_at(grid, dest)):
                pos = dest
                direction = new_dir
        elif action == Action.PICKUP:
            fp = front_pos(state)
            if carried is None and _in_bounds(grid, fp):
                cell = cell_at(grid, fp)
                if cell[0] in (Object.KEY, Object.BALL, Object.BOX):
                    grid = grid.copy()
                    grid[fp[1], fp[0]] = (Object.EMPTY, 0, 0)
                    carried = cell
        elif action == Action.DROP:
            fp = front_pos(state)
            if carried is not None and _in_bounds(grid, fp):
                if cell_at(grid, fp)[0] == Object.EMPTY:
                    grid = grid.copy()
                    grid[fp[1], fp[0]] = carried
                    carried = None
        elif action == Action.TOGGLE:
            fp = front_pos(state)
            if _in_bounds(grid, fp):
                obj, color, st = cell_at(grid, fp)
                if obj == Object.DOOR:
                    if st == DoorState.OPEN:
                        grid = grid.copy()
                        grid[fp[1], fp[0], 2] = DoorState.CLOSED
                    elif st == DoorState.CLOSED:
                        grid = grid.copy()
                        grid[fp[1], fp[0], 2] = DoorState.OPEN
                    elif st == DoorState.LOCKED and carried is not None:
                        if carried[0] == Object.KEY and carried[1] == color:
                            grid = grid.copy()
                            grid[fp[1], fp[0], 2] = DoorState.OPEN
        # Action.DONE: explicit no-op.

    new_state = dataclasses.replace(
        state,
        grid=grid,
        agent_pos=pos,
        agent_dir=direction,
        carried=carried,
        step_count=state.step_count + 1,
    )
    success = is_success(new_state)
    done = success or new_state.step_count >= new_state.max_steps
    return new_state, done, success


# ---------------------------------------------------------------------------
# Layout generation
# ---------------------------------------------------------------------------

_MAX_LAYOUT_ATTEMPTS = 100
_LARGE_ROOM_SIZE = 7  # wall-to-wall stride of one room in the nine-room maze


def _empty_grid(size: int) -> np.ndarray:
    grid = np.zeros((size, size, 3), dtype=np.uint8)
    grid[:, :, 0] = Object.EMPTY
    grid[0, :, 0] = Object.WALL
    grid[-1, :, 0] = Object.WALL
    grid[:, 0, 0] = Object.WALL
    grid[:, -1, 0] = Object.WALL
    grid[grid[:, :, 0] == Object.WALL, 1] = Color.GREY
    return grid


def _add_room_walls(grid: np.ndarray, rng: np.random.Generator) -> None:
    """Carve the 3x3 room structure with one closed door per internal wall."""
    size = grid.shape[0]
    lines = [_LARGE_ROOM_SIZE, 2 * _LARGE_ROOM_SIZE]
    for line in lines:
        grid[line, :, :] = (Object.WALL, Color.GREY, 0)
        grid[:, line, :] = (Object.WALL, Color.GREY, 0)
    # One door per shared wall segment, 12 in total.
    for x in lines:  # vertical walls, 3 row bands each
        for band in range(3):
            row0 = band * _LARGE_ROOM_SIZE + 1
            offset = int(rng.integers(0, _LARGE_ROOM_SIZE - 1))
            color = int(rng.integers(0, len(Color)))
            grid[row0 + offset, x] = (Object.DOOR, color, DoorState.CLOSED)
    for y in lines:  # horizontal walls, 3 column bands each
        for band in range(3):
            col0 = band * _LARGE_ROOM_SIZE + 1
            offset = int(rng.integers(0, _LARGE_ROOM_SIZE - 1))
            color = int(rng.integers(0, len(Color)))
            grid[y, col0 + offset] = (Object.DOOR, color, DoorState.CLOSED)


def _free_cells(grid: np.ndarray) -> list[tuple[int, int]]:
    rows, cols = np.nonzero(grid[:, :, 0] == Object.EMPTY)
    return [(int(c), int(r)) for r, c in zip(rows, cols)]


def _reachable_adjacent(grid: np.ndarray, start: tuple[int, int], target: tuple[int, int]) -> bool:
    """Cell-level reachability from ``start`` to a cell adjacent to ``target``.

    Closed doors count as passable (a toggle opens them); object cells block.
    """
    goal_cells = set()
    for dc, dr in DIR_VEC.values():
        cand = (target[0] + dc, target[1] + dr)
        if _in_bounds(grid, cand):
            cell = cell_at(grid, cand)
            if is_traversable(cell) or (cell[0] == Object.DOOR and cell[2] != DoorState.LOCKED):
                goal_cells.add(cand)
    if not goal_cells:
        return False
    if start in goal_cells:
        return True
    seen = {start}
    frontier = [start]
    while frontier:
        nxt = []
        for pos in frontier:
            for dc, dr in DIR_VEC.values():
                cand = (pos[0] + dc, pos[1] + dr)
                if cand in seen or not _in_bounds(grid, cand):
                    continue
                cell = cell_at(grid, cand)
                passable = is_traversable(cell) or (
                    cell[0] == Object.DOOR and cell[2] != DoorState.LOCKED
                )
                if not passable:
                    continue
                if cand in goal_cells:
                    return True
                seen.add(cand)
                nxt.append(cand)
        frontier = nxt
    return False


def reset(config: EnvConfig, seed: int) -> tuple[EnvState, TaskInstruction]:
    """Generate a solvable episode, deterministic in ``seed``."""
    if seed < 0:
        raise EnvError("seed must be non-negative")
    rng = np.random.default_rng(seed)
    for _ in range(_MAX_LAYOUT_ATTEMPTS):
        grid = _empty_grid(config.grid_size)
        if config.kind == EnvKind.GOTO_DISTRACTOR_LARGE:
            _add_room_walls(grid, rng)

        target_obj = int(TARGET_OBJECTS[rng.integers(0, len(TARGET_OBJECTS))])
        target_color = int(rng.integers(0, len(Color)))

        free = _free_cells(grid)
        n_objects = 1 + config.n_distractors
        if len(free) < n_objects + 1:
            raise GenerationError("grid too small for requested object count")
        idx = rng.choice(len(free), size=n_objects, replace=False)
        target_pos = free[int(idx[0])]
        grid[target_pos[1], target_pos[0]] = (target_obj, target_color, 0)
        for k in range(1, n_objects):
            while True:
                obj = int(TARGET_OBJECTS[rng.integers(0, len(TARGET_OBJECTS))])
                color = int(rng.integers(0, len(Color)))
                if (obj, color) != (target_obj, target_color):
                    break
            pos = free[int(idx[k])]
            grid[pos[1], pos[0]] = (obj, color, 0)

        agent_candidates = _free_cells(grid)
        agent_pos = agent_candidates[int(rng.integers(0, len(agent_candidates)))]
        agent_dir = Direction(int(rng.integers(0, 4)))

        if not _reachable_adjacent(grid, agent_pos, target_pos):
            continue

        instruction = TaskInstruction.go_to(target_color, target_obj)
        state = EnvState(
            grid=grid,
            agent_pos=agent_pos,
            agent_dir=agent_dir,
            carried=None,
            step_count=0,
            max_steps=config.max_steps,
            rng_seed=seed,
            mission=instruction,
        )
        return state, instruction
    raise GenerationError(
        f"no solvable layout for {config.kind.value} seed={seed} "
        f"after {_MAX_LAYOUT_ATTEMPTS} attempts"
    )


# ---------------------------------------------------------------------------
# Observation encoding
# ---------------------------------------------------------------------------


def encode_observation(
    state: EnvState, visual_agent_type: Optional[int] = None
) -> np.ndarray:
    """Render the state as an (H, W, 3) integer grid with the agent drawn in.

    The agent cell stores (AGENT, color, direction); ``visual_agent_type``
    selects a per-agent tint from the extended color vocabulary, otherwise
    the default agent color is used.
    """
    if visual_agent_type is None:
        color = int(DEFAULT_AGENT_COLOR)
    else:
        color = AGENT_TINT_BASE + int(visual_agent_type)
        if not AGENT_TINT_BASE <= color < COLOR_VOCAB:
            raise EnvError(f"no tint reserved for agent type {visual_agent_type}")
    obs = state.grid.copy()
    col, row = state.agent_pos
    obs[row, col] = (int(Object.AGENT), color, int(state.agent_dir))
    return obs


def decode_observation(obs: np.ndarray, max_steps: int = 10_000) -> EnvState:
    """Reconstruct a state from an observation grid.

    The mission, step count, and carried item are not recoverable; any cell
    hidden under the agent decodes as empty.  Raises :class:`DecodeError`
    unless the grid contains exactly one agent marker.
    """
    obs = np.asarray(obs)
    if obs.ndim != 3 or obs.shape[2] != 3:
        raise DecodeError(f"expected (H, W, 3) grid, got {obs.shape}")
    rows, cols = np.nonzero(obs[:, :, 0] == Object.AGENT)
    if len(rows) != 1:
        raise DecodeError(f"expected exactly one agent marker, found {len(rows)}")
    row, col = int(rows[0]), int(cols[0])
    direction = Direction(int(obs[row, col, 2]) % 4)
    grid = obs.astype(np.uint8, copy=True)
    grid[row, col] = (int(Object.EMPTY), 0, 0)
    return EnvState(
        grid=grid,
        agent_pos=(col, row),
        agent_dir=direction,
        carried=None,
        step_count=0,
        max_steps=max_steps,
        rng_seed=0,
        mission=None,
    )


def normalize(obs: np.ndarray) -> np.ndarray:
    """Map an (H, W, 3) integer grid to a channels-first float32 tensor in [-1, 1].

    Channel ``c`` with vocabulary size ``V`` maps id 0 to -1 and id V-1 to +1.
    """
    obs = np.asarray(obs, dtype=np.float32)
    out = np.empty((3,) + obs.shape[:2], dtype=np.float32)
    for c, vocab in enumerate(VOCAB_SIZES):
        out[c] = obs[:, :, c] * (2.0 / (vocab - 1)) - 1.0
    return out


def denormalize(tensor: np.ndarray) -> np.ndarray:
    """Invert :func:`normalize`, rounding to the nearest valid id and clamping."""
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.ndim != 3 or tensor.shape[0] != 3:
        raise EnvError(f"expected (3, H, W) tensor, got {tensor.shape}")
    out = np.empty(tensor.shape[1:] + (3,), dtype=np.uint8)
    for c, vocab in enumerate(VOCAB_SIZES):
        ids = np.rint((tensor[c] + 1.0) * ((vocab - 1) / 2.0))
        out[:, :, c] = np.clip(ids, 0, vocab - 1).astype(np.uint8)
    return out


def replay_observation(obs: np.ndarray, action: int, mask=None) -> np.ndarray:
    """Predict the observation that ``action`` produces from ``obs``.

    Decodes, steps, and re-encodes, preserving any per-agent tint present in
    the source observation.  In roomy layouts a cell hidden under the agent
    is lost, so the prediction is exact only when the agent is not standing
    on a door.
    """
    obs = np.asarray(obs)
    state = decode_observation(obs)
    col, row = state.agent_pos
    agent_color = int(obs[row, col, 1])
    new_state, _, _ = step(state, action, mask)
    out = new_state.grid.copy()
    ncol, nrow = new_state.agent_pos
    out[nrow, ncol] = (int(Object.AGENT), agent_color, int(new_state.agent_dir))
    return out
