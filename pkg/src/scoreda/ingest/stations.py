"""Weather-station preprocessing: wind decomposition and hourly interpolation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from itertools import groupby
from typing import Iterable

import numpy as np

from ..errors import IngestError
from ..fields import PRECIP_SHIFT

logger = logging.getLogger(__name__)

__all__ = [
    "StationRecord",
    "HourlyRecord",
    "decompose_wind",
    "interpolate_to_hours",
    "read_station_csv",
    "hourly_to_observation_rows",
]


@dataclass(frozen=True)
class StationRecord:
    station_id: str
    time: datetime
    speed: float | None  # m/s
    direction: float | None  # degrees the wind blows FROM
    precip: float | None  # mm, None when not reported
    row: int
    col: int

    def __post_init__(self):
        if self.speed is not None and self.speed < 0:
            raise IngestError(f"station {self.station_id}: negative wind speed {self.speed}")
        if self.direction is not None and not 0 <= self.direction < 360:
            raise IngestError(f"station {self.station_id}: wind direction {self.direction} outside [0, 360)")
        if self.precip is not None and self.precip < 0:
            raise IngestError(f"station {self.station_id}: negative precipitation {self.precip}")


@dataclass(frozen=True)
class HourlyRecord:
    """Interpolated values at a top-of-hour; ``None`` marks a missing value."""

    station_id: str
    time: datetime
    u: float | None
    v: float | None
    log_precip: float | None
    row: int
    col: int


def decompose_wind(speed: float, direction_deg: float) -> tuple[float, float]:
    """Zonal and meridional components of a wind blowing FROM ``direction_deg``.

    ``u = -speed sin(theta)``, ``v = -speed cos(theta)``; a wind from the east
    (90 degrees) therefore has negative ``u``.
    """
    if speed < 0:
        raise IngestError(f"negative wind speed {speed}")
    if not 0 <= direction_deg < 360:
        raise IngestError(f"wind direction {direction_deg} outside [0, 360)")
    theta = math.radians(direction_deg)
    return -speed * math.sin(theta), -speed * math.cos(theta)


def _hours_between(t0: datetime, t1: datetime):
    h = t0.replace(minute=0, second=0, microsecond=0)
    if h < t0:
        h += timedelta(hours=1)
    while h <= t1:
        yield h
        h += timedelta(hours=1)


def _interp_series(times, values, hours, max_gap_s):
    """Linear interpolation of one variable onto ``hours``; None outside brackets."""
    pairs = [(t, v) for t, v in zip(times, values) if v is not None]
    out = [None] * len(hours)
    if not pairs:
        return out
    ts = np.array([p[0] for p in pairs], dtype=np.float64)
    vs = np.array([p[1] for p in pairs], dtype=np.float64)
    for i, h in enumerate(hours):
        k = np.searchsorted(ts, h, side="left")
        if k < len(ts) and ts[k] == h:
            out[i] = float(vs[k])
            continue
        if k == 0 or k == len(ts):
            continue
        t0, t1 = ts[k - 1], ts[k]
        if t1 - t0 > max_gap_s:
            continue
        w = (h - t0) / (t1 - t0)
        out[i] = float(vs[k - 1] + w * (vs[k] - vs[k - 1]))
    return out


def interpolate_to_hours(
    records: Iterable[StationRecord],
    max_gap: timedelta = timedelta(hours=2),
    precip_shift: float = PRECIP_SHIFT,
) -> list[HourlyRecord]:
    """Decompose winds, then interpolate u, v and log precipitation to full hours.

    Each top-of-hour bracketed by two reports at most ``max_gap`` apart gets a
    linearly interpolated value; other hours are marked missing. Reports sharing a
    timestamp keep the last one. Precipitation is interpolated in
    ``ln(P + shift)`` space.
    """
    out = []
    records = sorted(records, key=lambda r: (r.station_id, r.time))
    for sid, group in groupby(records, key=lambda r: r.station_id):
        group = list(group)
        dedup = {}
        for rec in group:
            if rec.time in dedup:
                logger.warning("station %s: duplicate timestamp %s, keeping the last report", sid, rec.time)
            dedup[rec.time] = rec
        group = [dedup[t] for t in sorted(dedup)]
        times = [r.time.timestamp() for r in group]
        u, v, lp = [], [], []
        for r in group:
            if r.speed is not None and r.direction is not None:
                uu, vv = decompose_wind(r.speed, r.direction)
            elif r.speed == 0:
                uu, vv = 0.0, 0.0
            else:
                uu = vv = None
            u.append(uu)
            v.append(vv)
            lp.append(None if r.precip is None else math.log(r.precip + precip_shift))
        hours = list(_hours_between(group[0].time, group[-1].time))
        hs = [h.timestamp() for h in hours]
        gap = max_gap.total_seconds()
        cols = [_interp_series(times, series, hs, gap) for series in (u, v, lp)]
        row, col = group[-1].row, group[-1].col
        for i, h in enumerate(hours):
            out.append(HourlyRecord(sid, h, cols[0][i], cols[1][i], cols[2][i], row, col))
    return out


def _parse_time(text: str) -> datetime:
    t = datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    if t.tzinfo is None:
        t = t.replace(tzinfo=timezone.utc)
    return t.astimezone(timezone.utc)


def _opt_float(text):
    text = (text or "").strip()
    return None if text in ("", "NA", "nan", "NaN") else float(text)


def read_station_csv(path) -> list[StationRecord]:
    """Raw station reports with columns ``station_id, time, speed, direction, precip, row, col``."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"station_id", "time", "speed", "direction", "row", "col"}
        missing = required - set(reader.fieldnames or [])
        if missing:
            raise IngestError(f"{path}: missing columns {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            try:
                records.append(
                    StationRecord(
                        row["station_id"].strip(),
                        _parse_time(row["time"]),
                        _opt_float(row["speed"]),
                        _opt_float(row["direction"]),
                        _opt_float(row.get("precip")),
                        int(row["row"]),
                        int(row["col"]),
                    )
                )
            except IngestError as exc:
                raise IngestError(str(exc), line=line) from None
            except (TypeError, ValueError) as exc:
                raise IngestError(f"malformed row: {exc}", line=line) from None
    return records


def hourly_to_observation_rows(hourly: Iterable[HourlyRecord], channels=("u10", "v10", "tp")):
    """Rows for the observation CSV, in physical units (precipitation back in mm)."""
    names = dict(zip(("u", "v", "p"), channels))
    rows = []
    for h in hourly:
        stamp = h.time.strftime("%Y-%m-%dT%H:%M:%SZ")
        for key, value in (("u", h.u), ("v", h.v), ("p", h.log_precip)):
            if value is None:
                continue
            if key == "p":
                value = max(math.exp(value) - PRECIP_SHIFT, 0.0)
            rows.append(
                {"time": stamp, "station_id": h.station_id, "row": h.row, "col": h.col, "channel": names[key], "value": value}
            )
    return rows
