"""8-bit raster export of grid channels with a sidecar JSON of value ranges."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError

__all__ = ["to_uint8", "export_channel_rasters", "channel_ranges"]


def channel_ranges(stack: np.ndarray) -> list[tuple[float, float]]:
    """Per-channel (min, max) over a stack shaped (..., C, H, W)."""
    stack = np.asarray(stack, dtype=np.float64)
    flat = np.moveaxis(stack, -3, 0).reshape(stack.shape[-3], -1)
    return [(float(np.nanmin(f)), float(np.nanmax(f))) for f in flat]


def to_uint8(image: np.ndarray, vmin: float, vmax: float) -> np.ndarray:
    """Linear map of ``[vmin, vmax]`` onto 0..255, clipped; a flat range maps to mid-gray."""
    image = np.asarray(image, dtype=np.float64)
    if not vmax >= vmin:
        raise ConfigError(f"invalid value range ({vmin}, {vmax})")
    if vmax == vmin:
        return np.full(image.shape, 128, dtype=np.uint8)
    scaled = (image - vmin) / (vmax - vmin)
    return np.round(np.clip(np.nan_to_num(scaled, nan=0.0), 0.0, 1.0) * 255).astype(np.uint8)


def export_channel_rasters(grid, out_dir, stem: str, channel_names, ranges=None) -> list[Path]:
    """Write one grayscale PNG per channel of ``grid`` (C, H, W).

    ``ranges`` fixes the value range per channel (useful to share a scale across
    members); by default each channel spans its own min and max. The ranges used
    go into ``<stem>.json`` next to the images.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3:
        raise ConfigError(f"expected a (C, H, W) grid, got shape {grid.shape}")
    if len(channel_names) != grid.shape[0]:
        raise ConfigError("one channel name per grid channel expected")
    ranges = channel_ranges(grid) if ranges is None else [tuple(map(float, r)) for r in ranges]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths, sidecar = [], {}
    for i, name in enumerate(channel_names):
        vmin, vmax = ranges[i]
        path = out / f"{stem}_{name}.png"
        Image.fromarray(to_uint8(grid[i], vmin, vmax)).save(path)
        paths.append(path)
        sidecar[name] = {"file": path.name, "vmin": vmin, "vmax": vmax}
    (out / f"{stem}.json").write_text(json.dumps(sidecar, indent=2))
    return paths
