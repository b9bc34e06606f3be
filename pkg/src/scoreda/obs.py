"""Observation sets and selection operators.

Every operator here is a pure selection: it gathers a fixed list of entries from
the flattened ``(C, H, W)`` grid. Its adjoint scatters back into a zero grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError

__all__ = [
    "ObsOperator",
    "Observation",
    "ObservationSet",
    "point_set",
    "regular_stride",
    "make_channel_mask",
    "compose",
    "simulate_pseudo_obs",
    "DEFAULT_OBS_STD",
    "nearest_index",
]

DEFAULT_OBS_STD = 0.1


class ObsOperator:
    """Gather operator ``H`` over grids of a fixed ``(C, H, W)`` shape."""

    def __init__(self, shape: Sequence[int], indices, kind: str = "point_set"):
        self.shape = tuple(int(s) for s in shape)
        idx = np.asarray(indices, dtype=np.int64).ravel()
        size = int(np.prod(self.shape))
        if idx.size and (idx.min() < 0 or idx.max() >= size):
            raise ConfigError(f"observation index out of bounds for grid {self.shape}")
        if np.unique(idx).size != idx.size:
            raise ConfigError("observation operator selects the same grid entry twice")
        self.indices = idx
        self.kind = kind

    @property
    def dim(self) -> int:
        return self.indices.size

    def __len__(self) -> int:
        return self.dim

    def apply(self, grid) -> np.ndarray:
        grid = np.asarray(grid)
        if grid.shape[-3:] != self.shape:
            raise ConfigError(f"grid shape {grid.shape[-3:]} does not match operator {self.shape}")
        flat = grid.reshape(*grid.shape[:-3], -1)
        return flat[..., self.indices]

    __call__ = apply

    def adjoint(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        lead = values.shape[:-1]
        out = np.zeros((*lead, int(np.prod(self.shape))))
        out[..., self.indices] = values
        return out.reshape(*lead, *self.shape)

    def coords(self) -> np.ndarray:
        """(channel, row, col) of each selected entry, shape (M, 3)."""
        return np.stack(np.unravel_index(self.indices, self.shape), axis=-1)

    def mask(self) -> np.ndarray:
        m = np.zeros(int(np.prod(self.shape)), dtype=bool)
        m[self.indices] = True
        return m.reshape(self.shape)

    def channel_of_entry(self) -> np.ndarray:
        return self.coords()[:, 0]

    def __repr__(self):
        return f"ObsOperator(kind={self.kind!r}, shape={self.shape}, dim={self.dim})"


def nearest_index(position: float, size: int) -> int:
    """Nearest grid index to a fractional position; exact halves go to the lower index."""
    if not -0.5 <= position <= size - 0.5:
        raise ConfigError(f"position {position} falls outside a grid of size {size}")
    return min(max(math.ceil(position - 0.5), 0), size - 1)


def point_set(shape, entries: Iterable[tuple[int, int, int]]) -> ObsOperator:
    """Select explicit ``(channel, row, col)`` entries, in the given order."""
    shape = tuple(shape)
    entries = list(entries)
    if not entries:
        return ObsOperator(shape, [], "point_set")
    arr = np.asarray(entries, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ConfigError("point entries must be (channel, row, col) triples")
    for axis in range(3):
        if arr[:, axis].min() < 0 or arr[:, axis].max() >= shape[axis]:
            raise ConfigError(f"point entry out of bounds for grid {shape}")
    return ObsOperator(shape, np.ravel_multi_index(arr.T, shape), "point_set")


def regular_stride(shape, stride: int, channels: Sequence[int] | None = None) -> ObsOperator:
    """Every ``stride``-th row and column, anchored at index 0."""
    c, h, w = shape
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    channels = range(c) if channels is None else channels
    rows, cols = np.arange(0, h, stride), np.arange(0, w, stride)
    entries = [(ch, r, col) for ch in channels for r in rows for col in cols]
    op = point_set(shape, entries)
    op.kind = f"regular_stride({stride})"
    return op


def stride_count(size: int, stride: int) -> int:
    return math.ceil(size / stride)


def make_channel_mask(shape, kept: Sequence[int]) -> ObsOperator:
    """Dense observation of the ``kept`` channels; the others stay unconstrained."""
    c, h, w = shape
    kept = sorted(set(int(k) for k in kept))
    if not kept:
        raise ConfigError("channel mask must keep at least one channel")
    if kept[0] < 0 or kept[-1] >= c:
        raise ConfigError(f"channel index out of range for {c} channels")
    idx = np.concatenate([np.arange(k * h * w, (k + 1) * h * w) for k in kept])
    return ObsOperator(shape, idx, f"channel_mask({kept})")


def compose(*ops: ObsOperator) -> ObsOperator:
    """Entries selected by every operator (e.g. a stride restricted to some channels)."""
    if not ops:
        raise ConfigError("nothing to compose")
    shape = ops[0].shape
    if any(op.shape != shape for op in ops):
        raise ConfigError("composed operators must share a grid shape")
    idx = ops[0].indices
    for op in ops[1:]:
        idx = idx[np.isin(idx, op.indices)]
    return ObsOperator(shape, idx, "composition")


@dataclass(frozen=True)
class Observation:
    channel: int
    row: int
    col: int
    value: float
    sigma: float = DEFAULT_OBS_STD
    station_id: str = ""

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"observation sigma must be positive, got {self.sigma}")


@dataclass
class ObservationSet:
    """Observations ``y`` in model space with their operator ``H`` and noise std.

    ``truth`` optionally keeps the grid the observations were simulated from.
    """

    operator: ObsOperator
    values: np.ndarray
    sigma: np.ndarray
    station_ids: list[str] = field(default_factory=list)
    truth: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        self.sigma = np.broadcast_to(np.asarray(self.sigma, dtype=np.float64), self.values.shape).copy()
        if self.values.size != self.operator.dim:
            raise ConfigError(
                f"{self.values.size} observation values for an operator of dimension {self.operator.dim}"
            )
        if np.any(self.sigma <= 0):
            raise ConfigError("observation noise must be strictly positive")

    def __len__(self) -> int:
        return self.values.size

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.operator.shape

    @classmethod
    def empty(cls, shape) -> "ObservationSet":
        return cls(ObsOperator(shape, []), np.zeros(0), np.zeros(0))

    @classmethod
    def from_observations(cls, shape, observations: Sequence[Observation]) -> "ObservationSet":
        op = point_set(shape, [(o.channel, o.row, o.col) for o in observations])
        return cls(
            op,
            [o.value for o in observations],
            [o.sigma for o in observations],
            [o.station_id for o in observations],
        )

    def observations(self) -> list[Observation]:
        ids = self.station_ids or [""] * len(self)
        return [
            Observation(int(c), int(r), int(k), float(v), float(s), sid)
            for (c, r, k), v, s, sid in zip(self.operator.coords(), self.values, self.sigma, ids)
        ]

    def subset(self, keep) -> "ObservationSet":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        ids = [self.station_ids[i] for i in keep] if self.station_ids else []
        op = ObsOperator(self.shape, self.operator.indices[keep], self.operator.kind)
        return ObservationSet(op, self.values[keep], self.sigma[keep], ids, self.truth)


def simulate_pseudo_obs(grid, op: ObsOperator, noise_std, rng: np.random.Generator) -> ObservationSet:
    """Noisy pseudo-observations ``y = H(grid) + eta`` in model space.

    ``noise_std`` is a scalar or one standard deviation per channel; zero gives
    exact selection (the stored ``sigma`` is then a tiny positive floor).
    """
    grid = np.asarray(grid, dtype=np.float64)
    std = np.asarray(noise_std, dtype=np.float64)
    if np.any(std < 0):
        raise ConfigError("noise std must be non-negative")
    if std.ndim == 0:
        per_entry = np.full(op.dim, float(std))
    else:
        per_entry = std[op.channel_of_entry()]
    clean = op.apply(grid)
    values = clean + per_entry * rng.standard_normal(op.dim)
    return ObservationSet(op, values, np.maximum(per_entry, 1e-12), truth=grid.copy())
