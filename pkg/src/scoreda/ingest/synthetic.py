"""Synthetic Gaussian-random-field datasets with a known covariance.

Samples are drawn exactly from a separable squared-exponential prior, so the
matching analytic denoiser can be rebuilt from the stored parameters.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..covariance import KroneckerCovariance
from ..errors import ConfigError, IngestError

__all__ = [
    "SyntheticDatasetSpec",
    "GRFDataset",
    "generate_grf_dataset",
    "save_dataset",
    "load_dataset",
    "dataset_covariance",
]

MANIFEST_NAME = "manifest.json"
_FORMAT = "scoreda-grf-v1"


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    height: int = 32
    width: int = 32
    channels: int = 1
    length_scale: float | tuple = 3.0
    channel_corr: tuple | None = None
    n_samples: int = 1000
    seed: int = 0
    nugget: float = 1e-6
    shard_size: int = 2048

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ConfigError("grid dimensions and channel count must be positive")
        if self.n_samples < 1 or self.shard_size < 1:
            raise ConfigError("n_samples and shard_size must be positive")
        ls = np.atleast_1d(np.asarray(self.length_scale, dtype=np.float64))
        if np.any(ls <= 0):
            raise ConfigError("length scale must be positive")
        if ls.size not in (1, self.channels):
            raise ConfigError(f"expected 1 or {self.channels} length scales, got {ls.size}")
        # a separable prior needs a single spatial kernel
        if not np.all(ls == ls[0]):
            raise ConfigError("per-channel length scales must be equal (separable covariance)")
        self.covariance()  # validates the correlation matrix

    @property
    def scalar_length_scale(self) -> float:
        return float(np.atleast_1d(self.length_scale)[0])

    def correlation(self) -> np.ndarray:
        if self.channel_corr is None:
            return np.eye(self.channels)
        corr = np.asarray(self.channel_corr, dtype=np.float64)
        if corr.shape != (self.channels, self.channels):
            raise ConfigError(f"correlation matrix shape {corr.shape} does not match {self.channels} channels")
        return corr

    def covariance(self) -> KroneckerCovariance:
        return KroneckerCovariance(self.height, self.width, self.scalar_length_scale, self.correlation(), self.nugget)

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
            "length_scale": self.scalar_length_scale,
            "channel_corr": self.correlation().tolist(),
            "n_samples": self.n_samples,
            "seed": self.seed,
            "nugget": self.nugget,
            "shard_size": self.shard_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticDatasetSpec":
        d = dict(d)
        if d.get("channel_corr") is not None:
            d["channel_corr"] = tuple(map(tuple, d["channel_corr"]))
        return cls(**d)


@dataclass
class GRFDataset:
    spec: SyntheticDatasetSpec
    samples: np.ndarray  # (N, C, H, W), zero mean, unit marginal variance
    covariance_params: dict = field(default_factory=dict)

    def covariance(self) -> KroneckerCovariance:
        return KroneckerCovariance.from_params(self.covariance_params)


def _shard_seeds(seed: int, n_shards: int):
    return np.random.SeedSequence(seed).spawn(n_shards)


def generate_grf_dataset(spec: SyntheticDatasetSpec, threads: int = 1) -> GRFDataset:
    """Draw ``spec.n_samples`` fields; shards use independent seeds, so ``threads`` never changes the output."""
    cov = spec.covariance()
    sizes = [min(spec.shard_size, spec.n_samples - i) for i in range(0, spec.n_samples, spec.shard_size)]
    seeds = _shard_seeds(spec.seed, len(sizes))

    def draw(k):
        return cov.sample(np.random.default_rng(seeds[k]), sizes[k])

    if threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(threads) as pool:
            shards = list(pool.map(draw, range(len(sizes))))
    else:
        shards = [draw(k) for k in range(len(sizes))]
    return GRFDataset(spec, np.concatenate(shards).astype(np.float32), cov.params())


def save_dataset(ds: GRFDataset, out_dir) -> Path:
    """Write ``.npy`` shards plus a manifest with the generating parameters."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    step = ds.spec.shard_size
    for k, i in enumerate(range(0, len(ds.samples), step)):
        name = f"shard_{k:04d}.npy"
        np.save(out / name, ds.samples[i : i + step])
        files.append(name)
    manifest = {
        "format": _FORMAT,
        "spec": ds.spec.to_dict(),
        "covariance": ds.covariance_params,
        "shape": list(ds.samples.shape),
        "dtype": "float32",
        "files": files,
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_dataset(path) -> GRFDataset:
    """Load from a dataset directory or its manifest file."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise IngestError(f"{path}: dataset manifest not found") from None
    except json.JSONDecodeError as exc:
        raise IngestError(f"{path}: invalid manifest JSON ({exc})") from None
    if manifest.get("format") != _FORMAT:
        raise IngestError(f"{path}: unknown dataset format {manifest.get('format')!r}")
    try:
        parts = [np.load(path.parent / name) for name in manifest["files"]]
    except OSError as exc:
        raise IngestError(f"{path}: cannot read shard ({exc})") from None
    samples = np.concatenate(parts)
    if list(samples.shape) != manifest["shape"]:
        raise IngestError(f"{path}: shards hold shape {samples.shape}, manifest says {manifest['shape']}")
    return GRFDataset(SyntheticDatasetSpec.from_dict(manifest["spec"]), samples, manifest["covariance"])


def dataset_covariance(path) -> KroneckerCovariance:
    """Covariance recorded in a dataset manifest, without loading the shards."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        manifest = json.loads(path.read_text())
        return KroneckerCovariance.from_params(manifest["covariance"])
    except FileNotFoundError:
        raise IngestError(f"{path}: dataset manifest not found") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise IngestError(f"{path}: manifest has no usable covariance record ({exc})") from None
