"""Grids, state codes, palettes, target masks, neighbourhoods and chunk files."""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np


class Env(enum.IntEnum):
    FOREST = 0
    HOST_PATHOGEN = 1
    STOCK = 2

    @classmethod
    def parse(cls, value: "Env | str | int") -> "Env":
        if isinstance(value, Env):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        key = str(value).lower()
        aliases = {"forest": cls.FOREST, "host": cls.HOST_PATHOGEN,
                   "host_pathogen": cls.HOST_PATHOGEN, "stock": cls.STOCK}
        if key not in aliases:
            raise ValueError(f"unknown environment {value!r}")
        return aliases[key]

    @property
    def label(self) -> str:
        return {Env.FOREST: "forest", Env.HOST_PATHOGEN: "host_pathogen", Env.STOCK: "stock"}[self]


class Forest(enum.IntEnum):
    EMPTY = 0
    TREE = 1
    FIRE = 2
    EMBER = 3


class Host(enum.IntEnum):
    EMPTY = 0
    DEAD = 1
    HEALTHY = 2
    INFECTED = 3


class Stock(enum.IntEnum):
    HOLD = 0
    SELL = 1
    BUY = 2
    INACTIVE = 3


STATE_NAMES = {
    Env.FOREST: tuple(s.name.lower() for s in Forest),
    Env.HOST_PATHOGEN: tuple(s.name.lower() for s in Host),
    Env.STOCK: tuple(s.name.lower() for s in Stock),
}
NUM_STATES = 4
NUM_CHANNELS = 3

# codes counted as the predicted state s*
TARGET_CODES = {
    Env.FOREST: (Forest.FIRE, Forest.EMBER),
    Env.HOST_PATHOGEN: (Host.HEALTHY,),
    Env.STOCK: (Stock.BUY,),
}


def decode_state(env: Env | str, code: int) -> str:
    """Name of a state code; codes outside 0..3 raise ``ValueError``."""
    env = Env.parse(env)
    if not 0 <= int(code) < NUM_STATES:
        raise ValueError(f"state code {code} out of range 0..{NUM_STATES - 1}")
    return STATE_NAMES[env][int(code)]


@dataclass(frozen=True)
class Palette:
    env: Env
    colors: np.ndarray  # (4, 3) in [0, 1]

    def lookup(self, states: np.ndarray) -> np.ndarray:
        return self.colors[np.asarray(states, dtype=np.intp)]

    def decode(self, rgb: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`lookup` for exact palette colours."""
        rgb = np.asarray(rgb)
        dist = np.abs(rgb[..., None, :] - self.colors).sum(-1)
        codes = dist.argmin(-1)
        if not np.all(dist.min(-1) == 0):
            raise ValueError("field contains colours outside the palette")
        return codes.astype(np.uint8)


PALETTES = {
    Env.FOREST: Palette(Env.FOREST, np.array(
        [[0, 0, 0], [0, 1, 0], [1, 0, 0], [1, 0.5, 0]], dtype=np.float64)),
    Env.HOST_PATHOGEN: Palette(Env.HOST_PATHOGEN, np.array(
        [[0, 0, 0], [0.5, 0.5, 0.5], [0, 1, 0], [1, 0, 0]], dtype=np.float64)),
    Env.STOCK: Palette(Env.STOCK, np.array(
        [[0.5, 0.5, 0.5], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64)),
}


def palette_for(env: Env | str) -> Palette:
    return PALETTES[Env.parse(env)]


@dataclass
class Grid:
    """One frame: ``n x n`` state codes plus environment-specific auxiliary fields.

    ``heat`` exists only for the forest and ``buy_streak`` only for the stock
    market. Neither is ever shown to a model.
    """

    env: Env
    states: np.ndarray
    heat: np.ndarray | None = None
    buy_streak: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.env = Env.parse(self.env)
        self.states = np.asarray(self.states, dtype=np.uint8)
        if self.states.ndim != 2 or self.states.shape[0] != self.states.shape[1]:
            raise ValueError(f"states must be square, got shape {self.states.shape}")
        if self.states.size and self.states.max() >= NUM_STATES:
            raise ValueError("state code out of range")
        if (self.heat is not None) != (self.env == Env.FOREST):
            raise ValueError("heat is present iff env is forest")
        if (self.buy_streak is not None) != (self.env == Env.STOCK):
            raise ValueError("buy_streak is present iff env is stock")
        if self.heat is not None:
            self.heat = np.asarray(self.heat, dtype=np.float32)
        if self.buy_streak is not None:
            self.buy_streak = np.asarray(self.buy_streak, dtype=np.uint8)

    @property
    def n(self) -> int:
        return self.states.shape[0]

    def copy(self) -> "Grid":
        return Grid(self.env, self.states.copy(),
                    None if self.heat is None else self.heat.copy(),
                    None if self.buy_streak is None else self.buy_streak.copy())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Grid):
            return NotImplemented
        return (self.env == other.env and np.array_equal(self.states, other.states)
                and _aux_equal(self.heat, other.heat)
                and _aux_equal(self.buy_streak, other.buy_streak))


def _aux_equal(a: np.ndarray | None, b: np.ndarray | None) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.dtype == b.dtype and a.tobytes() == b.tobytes()


@dataclass
class SequenceChunk:
    """One simulated episode of ``T`` frames."""

    env: Env
    stochastic: bool
    seed: int
    frames: list[Grid]
    params: dict[str, Any] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.frames[0].n

    @property
    def T(self) -> int:
        return len(self.frames)

    def states(self) -> np.ndarray:
        """All state codes stacked as ``(T, n, n)`` uint8."""
        return np.stack([f.states for f in self.frames])

    def rgb(self, palette: Palette | None = None) -> np.ndarray:
        """All frames as ``(T, n, n, 3)`` colour fields."""
        palette = palette or palette_for(self.env)
        return palette.lookup(self.states())

    def masks(self) -> np.ndarray:
        return np.isin(self.states(), TARGET_CODES[self.env])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SequenceChunk):
            return NotImplemented
        return (self.env == other.env and self.stochastic == other.stochastic
                and self.seed == other.seed and self.params == other.params
                and len(self.frames) == len(other.frames)
                and all(a == b for a, b in zip(self.frames, other.frames)))


def encode_rgb(grid: Grid, palette: Palette | None = None) -> np.ndarray:
    palette = palette or palette_for(grid.env)
    if palette.env != grid.env:
        raise ValueError(f"palette is for {palette.env.label}, grid is {grid.env.label}")
    return palette.lookup(grid.states)


def target_mask(grid: Grid) -> np.ndarray:
    """Boolean ``n x n`` mask of cells in the environment's target state."""
    return np.isin(grid.states, TARGET_CODES[grid.env])


def window_offsets(radius: int) -> list[tuple[int, int]]:
    """Row-major ``(di, dj)`` offsets of a ``(2r+1) x (2r+1)`` window."""
    span = range(-radius, radius + 1)
    return [(di, dj) for di in span for dj in span]


def extract_neighborhoods(values: np.ndarray, radius: int = 1) -> np.ndarray:
    """Zero-padded windows: ``(..., n, n, d) -> (..., n, n, (2r+1)**2, d)``.

    Works on a batch of fields as long as the last three axes are ``n, n, d``.
    Index ``((2r+1)**2 - 1) // 2`` of the window axis is the centre cell.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    values = np.asarray(values)
    *lead, h, w, d = values.shape
    pad = [(0, 0)] * len(lead) + [(radius, radius), (radius, radius), (0, 0)]
    padded = np.pad(values, pad)
    wins = [padded[..., radius + di:radius + di + h, radius + dj:radius + dj + w, :]
            for di, dj in window_offsets(radius)]
    return np.stack(wins, axis=-2)


# ---------------------------------------------------------------- chunk files

MAGIC = b"ARNC"
VERSION = 1
AUX_HEAT = 1
AUX_BUY_STREAK = 2
_HEADER = struct.Struct("<4sHBBHHQ")


class ChunkFormatError(ValueError):
    """Base class for unreadable chunk files."""


class BadMagicError(ChunkFormatError):
    pass


class UnsupportedVersionError(ChunkFormatError):
    pass


class TruncatedPayloadError(ChunkFormatError):
    pass


class CodeOutOfRangeError(ChunkFormatError):
    pass


def chunk_to_bytes(chunk: SequenceChunk) -> bytes:
    n, T = chunk.n, chunk.T
    params = json.dumps(chunk.params, sort_keys=True).encode("utf-8")
    parts = [
        _HEADER.pack(MAGIC, VERSION, int(chunk.env), 1 if chunk.stochastic else 0, n, T,
                     int(chunk.seed) & ((1 << 64) - 1)),
        struct.pack("<I", len(params)),
        params,
        chunk.states().astype(np.uint8).tobytes(),
    ]
    if chunk.env == Env.FOREST:
        heat = np.stack([f.heat for f in chunk.frames]).astype("<f4")
        parts += [bytes([AUX_HEAT]), heat.tobytes()]
    if chunk.env == Env.STOCK:
        streak = np.stack([f.buy_streak for f in chunk.frames]).astype(np.uint8)
        parts += [bytes([AUX_BUY_STREAK]), streak.tobytes()]
    return b"".join(parts)


def chunk_from_bytes(raw: bytes) -> SequenceChunk:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}")
    if len(raw) < _HEADER.size + 4:
        raise TruncatedPayloadError("header truncated")
    _, version, env, flags, n, T, seed = _HEADER.unpack_from(raw, 0)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported chunk version {version}")
    env = Env(env)
    pos = _HEADER.size
    (plen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if len(raw) < pos + plen + T * n * n:
        raise TruncatedPayloadError("payload truncated")
    params = json.loads(raw[pos:pos + plen].decode("utf-8"))
    pos += plen
    states = np.frombuffer(raw, dtype=np.uint8, count=T * n * n, offset=pos).reshape(T, n, n)
    pos += T * n * n
    if states.size and states.max() >= NUM_STATES:
        raise CodeOutOfRangeError(f"state code {int(states.max())} out of range")
    heat = streak = None
    while pos < len(raw):
        tag = raw[pos]
        pos += 1
        if tag == AUX_HEAT:
            need = 4 * T * n * n
            if len(raw) < pos + need:
                raise TruncatedPayloadError("heat section truncated")
            heat = np.frombuffer(raw, dtype="<f4", count=T * n * n, offset=pos).reshape(T, n, n)
            pos += need
        elif tag == AUX_BUY_STREAK:
            if len(raw) < pos + T * n * n:
                raise TruncatedPayloadError("buy_streak section truncated")
            streak = np.frombuffer(raw, dtype=np.uint8, count=T * n * n, offset=pos).reshape(T, n, n)
            pos += T * n * n
        else:
            raise ChunkFormatError(f"unknown aux section tag {tag}")
    frames = [
        Grid(env, states[t].copy(),
             None if heat is None else heat[t].astype(np.float32),
             None if streak is None else streak[t].copy())
        for t in range(T)
    ]
    return SequenceChunk(env, bool(flags & 1), seed, frames, params)


def write_chunk(chunk: SequenceChunk, path: str | Path) -> None:
    Path(path).write_bytes(chunk_to_bytes(chunk))


def read_chunk(path: str | Path) -> SequenceChunk:
    return chunk_from_bytes(Path(path).read_bytes())
