"""Grid state, channel transforms and normalization.

Every numerical routine in the package works on arrays shaped ``(..., C, H, W)``
in transformed, normalized ("model") space. :class:`FieldGrid` carries such an
array together with the channel metadata needed to get back to physical units.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError, IngestError

__all__ = [
    "ChannelSpec",
    "NormStats",
    "FieldGrid",
    "Ensemble",
    "transform_physical_to_model",
    "transform_model_to_physical",
    "normalize",
    "denormalize",
    "write_grid",
    "read_grid",
    "PRECIP_SHIFT",
]

PRECIP_SHIFT = 1e-4

_TRANSFORM_TAGS = {"identity": 0, "log_shift": 1}
_TAG_TRANSFORMS = {v: k for k, v in _TRANSFORM_TAGS.items()}


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    transform: str = "identity"
    shift: float = 0.0
    units: str = ""

    def __post_init__(self):
        if self.transform not in _TRANSFORM_TAGS:
            raise ConfigError(f"unknown transform {self.transform!r} for channel {self.name!r}")
        if self.transform == "log_shift" and not self.shift > 0:
            raise ConfigError(f"log_shift on channel {self.name!r} needs shift > 0, got {self.shift}")

    @classmethod
    def precipitation(cls, name: str = "tp", units: str = "mm/h") -> "ChannelSpec":
        return cls(name, "log_shift", PRECIP_SHIFT, units)


def transform_physical_to_model(values, spec: ChannelSpec) -> np.ndarray:
    """Map physical values of one channel into model space.

    Identity channels pass through; ``log_shift`` channels map ``v -> ln(v + shift)``.
    Negative input to a ``log_shift`` channel raises :class:`DomainError`.
    """
    values = np.asarray(values, dtype=np.float64)
    if spec.transform == "identity":
        return values.copy()
    if np.any(values < 0):
        raise DomainError(f"negative value for log_shift channel {spec.name!r}")
    return np.log(values + spec.shift)


def transform_model_to_physical(values, spec: ChannelSpec) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if spec.transform == "identity":
        return values.copy()
    return np.exp(values) - spec.shift


@dataclass(frozen=True)
class NormStats:
    """Per-channel standardization, fitted on the training split."""

    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(float(s) for s in self.std))
        if len(self.mean) != len(self.std):
            raise ConfigError("mean and std must have one entry per channel")
        if not all(s > 0 for s in self.std):
            raise ConfigError(f"std must be strictly positive, got {self.std}")

    @property
    def n_channels(self) -> int:
        return len(self.mean)

    @classmethod
    def identity(cls, n_channels: int) -> "NormStats":
        return cls((0.0,) * n_channels, (1.0,) * n_channels)

    @classmethod
    def fit(cls, data: np.ndarray) -> "NormStats":
        """Fit from a stack of model-space samples shaped (N, C, H, W)."""
        data = np.asarray(data, dtype=np.float64)
        mean = data.mean(axis=(0, 2, 3))
        std = data.std(axis=(0, 2, 3))
        return cls(tuple(mean), tuple(std))

    def _arrays(self, data: np.ndarray):
        if data.shape[-3] != self.n_channels:
            raise ConfigError(
                f"NormStats has {self.n_channels} channels, data has {data.shape[-3]}"
            )
        mean = np.asarray(self.mean)[:, None, None]
        std = np.asarray(self.std)[:, None, None]
        return mean, std


def normalize(data, stats: NormStats) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    mean, std = stats._arrays(data)
    return (data - mean) / std


def denormalize(data, stats: NormStats) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    mean, std = stats._arrays(data)
    return data * std + mean


@dataclass(frozen=True)
class FieldGrid:
    """A C x H x W state in model space."""

    channels: tuple[ChannelSpec, ...]
    data: np.ndarray
    norm: NormStats

    def __post_init__(self):
        channels = tuple(self.channels)
        object.__setattr__(self, "channels", channels)
        names = [c.name for c in channels]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate channel names: {names}")
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[0] != len(channels):
            raise ConfigError(f"data shape {data.shape} does not match {len(channels)} channels")
        if not np.all(np.isfinite(data)):
            raise DomainError("grid data must be finite")
        if self.norm.n_channels != len(channels):
            raise ConfigError("NormStats channel count does not match grid")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channel_names(self) -> list[str]:
        return [c.name for c in self.channels]

    def channel_index(self, name: str) -> int:
        try:
            return self.channel_names.index(name)
        except ValueError:
            raise ConfigError(f"unknown channel {name!r}") from None

    def with_data(self, data) -> "FieldGrid":
        return FieldGrid(self.channels, data, self.norm)

    @classmethod
    def from_physical(cls, channels: Sequence[ChannelSpec], physical, norm: NormStats) -> "FieldGrid":
        physical = np.asarray(physical, dtype=np.float64)
        model = np.stack(
            [transform_physical_to_model(physical[i], spec) for i, spec in enumerate(channels)]
        )
        return cls(tuple(channels), normalize(model, norm), norm)

    def to_physical(self) -> np.ndarray:
        model = denormalize(self.data, self.norm)
        return np.stack(
            [transform_model_to_physical(model[i], spec) for i, spec in enumerate(self.channels)]
        )


@dataclass
class Ensemble:
    members: list[FieldGrid]
    seed_record: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ConfigError("an ensemble needs at least one member")
        first = self.members[0]
        for m in self.members[1:]:
            if m.shape != first.shape or m.channel_names != first.channel_names:
                raise ConfigError("ensemble members must share channels and dimensions")
        if self.seed_record and len(self.seed_record) != len(self.members):
            raise ConfigError("one seed per member expected")

    def __len__(self) -> int:
        return len(self.members)

    def stack(self) -> np.ndarray:
        return np.stack([m.data for m in self.members])

    def mean(self) -> np.ndarray:
        return self.stack().mean(axis=0)

    def std(self) -> np.ndarray:
        return self.stack().std(axis=0, ddof=1 if len(self) > 1 else 0)


# Grid file: "SDAG", version, C, H, W, per-channel header, then float32 data (channel-major).
_GRID_MAGIC = b"SDAG"
_GRID_VERSION = 1


def write_grid(path, grid: FieldGrid) -> None:
    c, h, w = grid.shape
    parts = [_GRID_MAGIC, struct.pack("<4I", _GRID_VERSION, c, h, w)]
    for i, spec in enumerate(grid.channels):
        name = spec.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(
            struct.pack(
                "<B3d", _TRANSFORM_TAGS[spec.transform], spec.shift, grid.norm.mean[i], grid.norm.std[i]
            )
        )
    parts.append(np.ascontiguousarray(grid.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_grid(path) -> FieldGrid:
    raw = Path(path).read_bytes()
    if raw[:4] != _GRID_MAGIC:
        raise IngestError(f"{path}: not a grid file (bad magic)")
    version, c, h, w = struct.unpack_from("<4I", raw, 4)
    if version != _GRID_VERSION:
        raise IngestError(f"{path}: unsupported grid file version {version}")
    offset = 20
    channels, means, stds = [], [], []
    for _ in range(c):
        (n,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + n].decode("utf-8")
        offset += n
        tag, shift, mean, std = struct.unpack_from("<B3d", raw, offset)
        offset += struct.calcsize("<B3d")
        channels.append(ChannelSpec(name, _TAG_TRANSFORMS[tag], shift))
        means.append(mean)
        stds.append(std)
    expected = offset + 4 * c * h * w
    if len(raw) != expected:
        raise IngestError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=offset).reshape(c, h, w).astype(np.float32)
    return FieldGrid(tuple(channels), data, NormStats(tuple(means), tuple(stds)))
