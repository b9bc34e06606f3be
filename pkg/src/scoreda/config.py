"""Run configuration: per-command option tables, TOML files and flag overrides.

Precedence, lowest first: built-in defaults, the TOML file, the ``SDA_SEED``
environment variable (seed only), command-line flags. A TOML file may hold keys
at top level (applied to whichever command runs) and tables named after
commands; anything else is rejected.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .errors import ConfigError

__all__ = ["Option", "COMMANDS", "RunConfig", "resolve_config", "load_toml"]

SEED_ENV = "SDA_SEED"
RESOLVED_NAME = "resolved_config.toml"


@dataclass(frozen=True)
class Option:
    name: str
    type: type
    default: object
    help: str = ""
    choices: tuple | None = None
    is_list: bool = False

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")

    def coerce(self, value, source: str):
        if value is None:
            return None
        if self.is_list:
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{source}: {self.name} must be a list")
            return [self._scalar(v, source) for v in value]
        return self._scalar(value, source)

    def _scalar(self, value, source):
        if self.type is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
                return value.lower() in ("true", "1", "yes")
            raise ConfigError(f"{source}: {self.name} must be a boolean, got {value!r}")
        if self.type is int and isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{source}: {self.name} must be an integer, got {value!r}")
        if self.type in (int, float) and isinstance(value, bool):
            raise ConfigError(f"{source}: {self.name} must be a number, got {value!r}")
        try:
            out = self.type(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{source}: cannot read {self.name}={value!r} as {self.type.__name__}") from None
        if self.choices and out not in self.choices:
            raise ConfigError(f"{source}: {self.name} must be one of {list(self.choices)}, got {out!r}")
        return out


_COMMON = [
    Option("out_dir", str, "out", "directory for all outputs"),
    Option("seed", int, 0, "base random seed"),
    Option("threads", int, 1, "worker threads for ensemble members and dataset shards"),
]

_PRIOR = [
    Option("checkpoint", str, "", "trained denoiser checkpoint; empty selects the analytic prior"),
    Option("dataset", str, "", "dataset directory whose recorded covariance defines the analytic prior"),
    Option("height", int, 32, "analytic prior grid height"),
    Option("width", int, 32, "analytic prior grid width"),
    Option("channels", int, 1, "analytic prior channel count"),
    Option("length_scale", float, 3.0, "squared-exponential length scale in pixels"),
    Option("correlation", float, 0.0, "cross-channel correlation (same for every channel pair)"),
    Option("nugget", float, 1e-6, "diagonal jitter added to the prior covariance"),
]

_SAMPLING = [
    Option("members", int, 16, "ensemble size"),
    Option("batch_size", int, 32, "members per vectorized chunk"),
    Option("preset", str, "default", "guidance hyperparameter preset", ("default", "missing-channel")),
    Option("n_steps", int, None, "diffusion steps (preset value if unset)"),
    Option("corrections", int, None, "Langevin corrections per step"),
    Option("tau_tilde", float, None, "Langevin step scale"),
    Option("gamma", float, None, "observation variance inflation"),
    Option("obs_std", float, None, "observation noise std in normalized units when the CSV has no sigma"),
    Option("rasters", bool, True, "write PNG rasters next to the grids"),
]

COMMANDS: dict[str, list[Option]] = {
    "gen-data": _COMMON
    + [
        Option("height", int, 32, "grid height"),
        Option("width", int, 32, "grid width"),
        Option("channels", int, 1, "channel count"),
        Option("length_scale", float, 3.0, "squared-exponential length scale in pixels"),
        Option("correlation", float, 0.0, "cross-channel correlation"),
        Option("n_samples", int, 10000, "number of fields"),
        Option("nugget", float, 1e-6, "diagonal jitter"),
        Option("shard_size", int, 2048, "fields per .npy shard"),
    ],
    "train": _COMMON
    + [
        Option("dataset", str, None, "dataset directory from gen-data"),
        Option("iterations", int, 6000, "optimizer steps"),
        Option("batch_size", int, 64, "training batch size"),
        Option("learning_rate", float, 2e-3, "peak Adam learning rate"),
        Option("base", int, 16, "base channel width of the network"),
        Option("emb_dim", int, 64, "noise embedding width"),
        Option("ema_decay", float, 0.999, "weight averaging decay"),
        Option("warmup", int, 200, "learning-rate warmup steps"),
        Option("val_fraction", float, 0.1, "held-out fraction"),
        Option("log_every", int, 100, "loss logging interval"),
    ],
    "sample": _COMMON
    + _PRIOR
    + _SAMPLING
    + [
        Option("schedule", str, "vp", "reverse process: vp (predictor-corrector) or edm (Heun)", ("vp", "edm")),
        Option("sigma_min", float, 0.002, "smallest EDM noise level"),
        Option("sigma_max", float, 80.0, "largest EDM noise level"),
    ],
    "assimilate": _COMMON
    + _PRIOR
    + _SAMPLING
    + [
        Option("obs", str, None, "observation CSV"),
        Option("time", str, "", "assimilate only this time (all times if empty)"),
    ],
    "evaluate": _COMMON
    + [
        Option("ensemble", str, None, "output directory of assimilate"),
        Option("obs", str, None, "evaluation observation CSV"),
        Option("obs_std", float, 0.1, "observation noise std in normalized units when the CSV has no sigma"),
        Option("bootstrap", int, 1000, "bootstrap resamples for confidence intervals"),
    ],
    "station-sweep": _COMMON
    + _PRIOR
    + _SAMPLING
    + [
        Option("obs", str, "", "station observation CSV (synthetic truth is drawn if empty)"),
        Option("n_stations", int, 64, "synthetic station count"),
        Option("n_times", int, 4, "synthetic analysis times"),
        Option("counts", int, [4, 8, 16, 32, 48], "guiding-station counts", is_list=True),
        Option("split_seed", int, 0, "seed of the station permutation"),
    ],
    "oracle-check": _COMMON
    + [
        Option("members", int, 256, "ensemble size of the posterior check"),
        Option("quick", bool, False, "use a 32-member ensemble"),
    ],
}


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc})") from None


@dataclass
class RunConfig:
    command: str
    values: dict
    sources: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def out_dir(self) -> Path:
        return Path(self.values["out_dir"])

    def write_resolved(self, directory=None) -> Path:
        """Write the effective settings so the run can be repeated exactly."""
        directory = Path(directory) if directory is not None else self.out_dir
        directory.mkdir(parents=True, exist_ok=True)
        body = {k: v for k, v in self.values.items() if v is not None}
        path = directory / RESOLVED_NAME
        path.write_text(tomli_w.dumps({self.command: body}))
        return path


def resolve_config(command: str, file_path=None, flags: dict | None = None, environ=None) -> RunConfig:
    """Merge defaults, file, environment and flags for ``command``; unknown keys are errors."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    options = {o.name: o for o in COMMANDS[command]}
    values = {name: o.default for name, o in options.items()}
    sources = {name: "default" for name in options}
    if file_path:
        raw = load_toml(file_path)
        merged = {}
        for key, value in raw.items():
            if isinstance(value, dict):
                if key not in COMMANDS:
                    raise ConfigError(f"{file_path}: unknown table [{key}]")
                if key == command:
                    section = value
                    for k in section:
                        if k not in options:
                            raise ConfigError(f"{file_path}: unknown key {k!r} in [{key}]")
                    merged.update(section)
                continue
            if key not in options:
                raise ConfigError(f"{file_path}: unknown key {key!r} for command {command}")
            merged.setdefault(key, value)
        for k, v in merged.items():
            values[k] = options[k].coerce(v, str(file_path))
            sources[k] = "file"
    environ = os.environ if environ is None else environ
    if environ.get(SEED_ENV, "") != "":
        values["seed"] = options["seed"].coerce(environ[SEED_ENV], SEED_ENV)
        sources["seed"] = "env"
    for k, v in (flags or {}).items():
        if v is None:
            continue
        if k not in options:
            raise ConfigError(f"unknown option {k!r} for command {command}")
        values[k] = options[k].coerce(v, "command line")
        sources[k] = "flag"
    if values.get("threads", 1) < 1:
        raise ConfigError("threads must be >= 1")
    return RunConfig(command, values, sources)
