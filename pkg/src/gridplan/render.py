"""Human-readable views of observation grids.

ASCII rendering assigns every (object, colour) pair a fixed two-character
glyph: an object letter followed by a colour letter, the convention most
grid-world tooling uses.  Agent cells show a direction arrow instead of an
object letter.  Tint colours (the visual agent-type range) render their
agent id as the colour character.

PNG rendering uses a flat colour map, one colour per cell, written by a
self-contained encoder on top of ``zlib`` so there is no imaging
dependency.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .env import AGENT_TINT_BASE, Color, Direction, DoorState, Object

# red, green, blue, purple, yellow, grey
_COLOR_CHARS = "rgbpye"
_DIR_CHARS = ">v<^"
_OBJECT_CHARS = {
    Object.KEY: "K",
    Object.BALL: "A",
    Object.BOX: "B",
    Object.GOAL: "G",
}


def _color_char(color_id: int) -> str:
    if color_id < len(_COLOR_CHARS):
        return _COLOR_CHARS[color_id]
    return str(color_id - AGENT_TINT_BASE)  # tint: the agent id


def cell_glyph(obj: int, color: int, state: int) -> str:
    obj = Object(obj)
    if obj == Object.UNSEEN:
        return "? "
    if obj == Object.EMPTY:
        return ". "
    if obj == Object.WALL:
        return "##"
    if obj == Object.FLOOR:
        return ": "
    if obj == Object.AGENT:
        return _DIR_CHARS[state % 4] + _color_char(color)
    if obj == Object.DOOR:
        # generated frames may carry any in-vocab state value; an invalid
        # door state renders as '?' rather than crashing the inspector
        lead = "_DL?"[state] if state < 4 else "?"
        return lead + _color_char(color)
    return _OBJECT_CHARS[obj] + _color_char(color)


def ascii_grid(obs: np.ndarray) -> str:
    rows = []
    for r in range(obs.shape[0]):
        rows.append("".join(
            cell_glyph(*obs[r, c]) for c in range(obs.shape[1])
        ))
    return "\n".join(rows)


def ascii_panels(frames, labels=None) -> str:
    """Grids side by side, one panel per frame, separated by a gutter."""
    panels = [ascii_grid(f).split("\n") for f in frames]
    if labels is None:
        labels = [f"frame {i}" for i in range(len(frames))]
    width = len(panels[0][0])
    head = "   ".join(f"{lab:<{width}.{width}}" for lab in labels)
    body = [
        "   ".join(panel[r] for panel in panels)
        for r in range(len(panels[0]))
    ]
    return "\n".join([head.rstrip()] + body)


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------

# palette for the 14 colour slots: 6 named colours then 8 agent tints
_PALETTE = np.array([
    (220, 50, 40),    # red
    (60, 180, 75),    # green
    (65, 105, 225),   # blue
    (145, 70, 200),   # purple
    (230, 200, 50),   # yellow
    (150, 150, 150),  # grey
    (250, 120, 40), (80, 220, 210), (240, 90, 170), (130, 220, 70),
    (90, 130, 250), (250, 210, 120), (170, 110, 60), (200, 200, 240),
], dtype=np.uint8)


def cell_rgb(obj: int, color: int, state: int) -> tuple:
    obj = Object(obj)
    base = tuple(int(v) for v in _PALETTE[color % len(_PALETTE)])
    if obj == Object.UNSEEN:
        return (20, 20, 20)
    if obj == Object.EMPTY:
        return (0, 0, 0)
    if obj == Object.WALL:
        return (105, 105, 105)
    if obj == Object.FLOOR:
        return (40, 40, 40)
    if obj == Object.DOOR:
        if state == int(DoorState.OPEN):
            return tuple(v // 3 for v in base)
        return tuple(v * 3 // 4 for v in base)
    if obj == Object.AGENT:
        return tuple(min(255, v + 80) for v in base)
    if obj == Object.BOX:
        return tuple(v * 2 // 3 for v in base)
    return base  # key, ball, goal at full saturation


def grid_rgb(obs: np.ndarray, scale: int = 16) -> np.ndarray:
    h, w = obs.shape[:2]
    img = np.zeros((h, w, 3), dtype=np.uint8)
    for r in range(h):
        for c in range(w):
            img[r, c] = cell_rgb(*obs[r, c])
    return np.kron(img, np.ones((scale, scale, 1), dtype=np.uint8))


def panels_rgb(frames, scale: int = 16, gutter: int = 4) -> np.ndarray:
    imgs = [grid_rgb(f, scale) for f in frames]
    h = imgs[0].shape[0]
    sep = np.full((h, gutter, 3), 255, dtype=np.uint8)
    parts = []
    for i, img in enumerate(imgs):
        if i:
            parts.append(sep)
        parts.append(img)
    return np.concatenate(parts, axis=1)


def write_png(path, rgb: np.ndarray) -> None:
    """Minimal 8-bit RGB PNG encoder (IHDR + IDAT + IEND)."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("expected (H, W, 3) uint8")
    h, w = rgb.shape[:2]

    def chunk(tag: bytes, payload: bytes) -> bytes:
        crc = zlib.crc32(tag + payload) & 0xFFFFFFFF
        return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)

    raw = b"".join(b"\x00" + rgb[r].tobytes() for r in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    data = (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", ihdr)
        + chunk(b"IDAT", zlib.compress(raw, 9))
        + chunk(b"IEND", b"")
    )
    with open(path, "wb") as f:
        f.write(data)
