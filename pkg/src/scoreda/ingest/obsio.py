"""Observation CSV files.

Columns: ``time, station_id, row, col, channel, value, sigma``. Values are in
physical units and are transformed and normalized on load; ``sigma`` is the
observation noise standard deviation in model (normalized) units. A missing
``sigma`` column or an empty cell falls back to :data:`DEFAULT_OBS_STD`.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import ConfigError, DomainError, IngestError
from ..fields import ChannelSpec, NormStats, transform_model_to_physical, transform_physical_to_model
from ..obs import DEFAULT_OBS_STD, ObservationSet, point_set

__all__ = ["CSV_COLUMNS", "read_observation_csv", "write_observation_csv"]

CSV_COLUMNS = ("time", "station_id", "row", "col", "channel", "value", "sigma")
_REQUIRED = ("time", "station_id", "row", "col", "channel", "value")


def read_observation_csv(
    path,
    shape: Sequence[int],
    channels: Sequence[ChannelSpec],
    norm: NormStats | None = None,
    default_sigma: float = DEFAULT_OBS_STD,
) -> dict[str, ObservationSet]:
    """Parse the file into one :class:`ObservationSet` per distinct ``time``, in file order."""
    shape = tuple(int(s) for s in shape)
    channels = list(channels)
    if len(channels) != shape[0]:
        raise ConfigError(f"{len(channels)} channel specs for a grid with {shape[0]} channels")
    norm = norm or NormStats.identity(shape[0])
    by_name = {c.name: i for i, c in enumerate(channels)}
    groups = defaultdict(list)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IngestError(f"{path}: {exc.strerror}") from None
    with fh:
        reader = csv.DictReader(fh)
        missing = [c for c in _REQUIRED if c not in (reader.fieldnames or [])]
        if missing:
            raise IngestError(f"{path}: missing columns {missing}", line=1)
        seen = set()
        for line, row in enumerate(reader, start=2):
            if None in row or any(row[c] is None for c in _REQUIRED):
                raise IngestError("wrong number of fields", line=line)
            name = row["channel"].strip()
            if name not in by_name:
                raise IngestError(f"unknown channel {name!r}", line=line)
            ch = by_name[name]
            try:
                r, c = int(row["row"]), int(row["col"])
                value = float(row["value"])
                sigma_text = (row.get("sigma") or "").strip()
                sigma = float(sigma_text) if sigma_text else default_sigma
            except ValueError as exc:
                raise IngestError(f"malformed number ({exc})", line=line) from None
            if not (0 <= r < shape[1] and 0 <= c < shape[2]):
                raise IngestError(f"location ({r}, {c}) outside the {shape[1]}x{shape[2]} grid", line=line)
            if not math.isfinite(value):
                raise IngestError("non-finite value", line=line)
            if not sigma > 0:
                raise IngestError(f"sigma must be positive, got {sigma}", line=line)
            try:
                model = float(transform_physical_to_model(value, channels[ch]))
            except DomainError as exc:
                raise IngestError(str(exc), line=line) from None
            model = (model - norm.mean[ch]) / norm.std[ch]
            t = row["time"].strip()
            key = (t, ch, r, c)
            if key in seen:
                raise IngestError(f"duplicate observation of {name} at ({r}, {c}) for time {t}", line=line)
            seen.add(key)
            groups[t].append((ch, r, c, model, sigma, row["station_id"].strip()))
    out = {}
    for t, rows in groups.items():
        op = point_set(shape, [(ch, r, c) for ch, r, c, *_ in rows])
        out[t] = ObservationSet(op, [x[3] for x in rows], [x[4] for x in rows], [x[5] for x in rows])
    return out


def write_observation_csv(
    path,
    sets: dict[str, ObservationSet],
    channels: Sequence[ChannelSpec],
    norm: NormStats | None = None,
) -> None:
    """Inverse of :func:`read_observation_csv` (values converted back to physical units)."""
    channels = list(channels)
    norm = norm or NormStats.identity(len(channels))
    try:
        fh = open(path, "w", newline="")
    except OSError as exc:
        raise IngestError(f"{path}: {exc.strerror}") from None
    with fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for t, obs in sets.items():
            ids = obs.station_ids or [f"s{i}" for i in range(len(obs))]
            coords = obs.operator.coords()
            for (ch, r, c), v, s, sid in zip(coords, obs.values, obs.sigma, ids):
                model = v * norm.std[ch] + norm.mean[ch]
                phys = float(transform_model_to_physical(np.float64(model), channels[ch]))
                writer.writerow([t, sid, int(r), int(c), channels[ch].name, repr(phys), repr(float(s))])


def read_observation_csv_single(path, shape, channels, norm=None) -> ObservationSet:
    """All rows of a file as one set; an error if the file holds several times."""
    sets = read_observation_csv(path, shape, channels, norm)
    if not sets:
        return ObservationSet.empty(shape)
    if len(sets) > 1:
        raise IngestError(f"{path}: expected one analysis time, found {len(sets)}")
    return next(iter(sets.values()))


__all__.append("read_observation_csv_single")
