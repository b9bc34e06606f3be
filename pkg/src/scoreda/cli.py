"""Command-line driver: ``scoreda <command> [--config FILE] [--flags]``.

Exit codes: 0 success, 1 oracle checks ran but some failed, 2 configuration
error, 3 numerical failure, 4 input/output error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import COMMANDS, RunConfig, resolve_config
from .covariance import KroneckerCovariance
from .denoiser.analytic import GaussianAnalyticDenoiser
from .denoiser.conv import ConvDenoiser, load_checkpoint, save_checkpoint
from .denoiser.training import TrainConfig, split_train_val, train
from .errors import ConfigError, DomainError, EnsembleError, IngestError, NumericalError, ScoreDAError
from .fields import ChannelSpec, Ensemble, FieldGrid, NormStats, normalize, read_grid, write_grid
from .guidance import GuidanceConfig, assimilate_ensemble, member_seed, preset, sample_edm_batch
from .ingest.obsio import read_observation_csv
from .ingest.synthetic import SyntheticDatasetSpec, dataset_covariance, generate_grf_dataset, load_dataset, save_dataset
from .metrics import evaluate_ensemble, station_sweep
from .obs import ObservationSet
from .oracle import run_oracle_checks
from .raster import channel_ranges, export_channel_rasters
from .schedule import EDMSchedule

logger = logging.getLogger("scoreda")

EXIT_OK, EXIT_CHECKS_FAILED, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3, 4


# --- shared helpers ---------------------------------------------------------


def _uniform_corr(channels: int, rho: float) -> np.ndarray:
    corr = np.full((channels, channels), float(rho))
    np.fill_diagonal(corr, 1.0)
    return corr


def build_prior(cfg: RunConfig):
    """(denoiser, channel specs, norm stats) from checkpoint, dataset manifest or explicit keys."""
    if cfg["checkpoint"]:
        model = load_checkpoint(cfg["checkpoint"])
        return model, model.channels, model.norm
    if cfg["dataset"]:
        cov = dataset_covariance(cfg["dataset"])
    else:
        cov = KroneckerCovariance(
            cfg["height"], cfg["width"], cfg["length_scale"],
            _uniform_corr(cfg["channels"], cfg["correlation"]), cfg["nugget"],
        )
    c = cov.shape[0]
    return GaussianAnalyticDenoiser(cov), tuple(ChannelSpec(f"ch{i}") for i in range(c)), NormStats.identity(c)


def guidance_config(cfg: RunConfig, seed: int | None = None) -> GuidanceConfig:
    keys = ("n_steps", "corrections", "tau_tilde", "gamma", "obs_std")
    overrides = {k: cfg[k] for k in keys if cfg.get(k) is not None}
    return preset(cfg["preset"], seed=cfg["seed"] if seed is None else seed, **overrides)


def write_manifest(out: Path, payload: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.json"
    path.write_text(json.dumps(payload, indent=2, default=str))
    return path


def write_ensemble(out: Path, ens: Ensemble, rasters: bool) -> list[str]:
    """Members, mean and std as grid files (std in normalized units), plus optional rasters."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "members").mkdir(exist_ok=True)
    files = []
    for i, m in enumerate(ens.members):
        name = f"members/member_{i:03d}.sdag"
        write_grid(out / name, m)
        files.append(name)
    first = ens.members[0]
    mean = first.with_data(ens.mean())
    std_channels = tuple(ChannelSpec(c.name, units="normalized std") for c in first.channels)
    std = FieldGrid(std_channels, ens.std(), NormStats.identity(len(std_channels)))
    write_grid(out / "mean.sdag", mean)
    write_grid(out / "std.sdag", std)
    files += ["mean.sdag", "std.sdag"]
    if rasters:
        names = first.channel_names
        stack = ens.stack()
        shared = channel_ranges(stack)
        rdir = out / "rasters"
        export_channel_rasters(mean.data, rdir, "mean", names, shared)
        export_channel_rasters(std.data, rdir, "std", names)
        for i in range(min(len(ens), 8)):
            export_channel_rasters(stack[i], rdir, f"member_{i:03d}", names, shared)
        files.append("rasters/")
    return files


def _time_dir(k: int) -> str:
    return f"t{k:03d}"


def _run_ensemble(prior, obs, gcfg, cfg, channels, norm):
    try:
        return assimilate_ensemble(
            prior, obs, gcfg, cfg["members"], threads=cfg["threads"], batch_size=cfg["batch_size"],
            channels=channels, norm=norm,
        )
    except EnsembleError as exc:
        if exc.partial is not None:
            write_ensemble(cfg.out_dir / "partial", exc.partial, False)
        raise


# --- commands ---------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> int:
    spec = SyntheticDatasetSpec(
        height=cfg["height"], width=cfg["width"], channels=cfg["channels"], length_scale=cfg["length_scale"],
        channel_corr=tuple(map(tuple, _uniform_corr(cfg["channels"], cfg["correlation"]))),
        n_samples=cfg["n_samples"], seed=cfg["seed"], nugget=cfg["nugget"], shard_size=cfg["shard_size"],
    )
    ds = generate_grf_dataset(spec, threads=cfg["threads"])
    path = save_dataset(ds, cfg.out_dir)
    print(f"wrote {len(ds.samples)} fields of shape {ds.samples.shape[1:]} to {path.parent}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    if not cfg["dataset"]:
        raise ConfigError("train needs --dataset")
    ds = load_dataset(cfg["dataset"])
    data = ds.samples
    tcfg = TrainConfig(
        batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"], iterations=cfg["iterations"],
        val_fraction=cfg["val_fraction"], ema_decay=cfg["ema_decay"], warmup=cfg["warmup"], seed=cfg["seed"],
        log_every=cfg["log_every"],
    )
    train_part, _ = split_train_val(data, tcfg.val_fraction, tcfg.seed)
    norm = NormStats.fit(train_part)
    c = data.shape[1]
    channels = tuple(ChannelSpec(f"ch{i}") for i in range(c))
    model = ConvDenoiser(data.shape[1:], base=cfg["base"], emb_dim=cfg["emb_dim"], norm=norm, channels=channels)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    curve = []

    def progress(it, loss):
        curve.append((it, loss))
        logger.info("iteration %d loss %.5f", it, loss)

    result = train(model, normalize(data, norm).astype(np.float32), tcfg, progress)
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss"])
        writer.writerows((i + 1, f"{v:.6g}") for i, v in enumerate(result.losses))
    reference = GaussianAnalyticDenoiser(ds.covariance()).mmse(1.0)
    summary = {
        "val_mse_sigma1": result.val_mse,
        "analytic_mmse_sigma1": reference,
        "seconds": result.seconds,
        "n_train": result.n_train,
        "n_val": result.n_val,
        "n_params": model.n_params,
    }
    save_checkpoint(out / "denoiser.sdad", model, extra={"dataset": str(cfg["dataset"]), **summary})
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2))
    print(f"val MSE at sigma=1: {result.val_mse:.5f} (analytic optimum {reference:.5f})")
    return EXIT_OK


def _ensemble_outputs(cfg, runs, command):
    """Write each (time, ensemble) pair under its own directory plus a top-level manifest."""
    entries = []
    for k, (t, ens) in enumerate(runs):
        d = _time_dir(k)
        files = write_ensemble(cfg.out_dir / d, ens, cfg["rasters"])
        entries.append({"time": t, "dir": d, "seeds": ens.seed_record, "files": files})
    write_manifest(cfg.out_dir, {"command": command, "times": entries})


def cmd_sample(cfg: RunConfig) -> int:
    prior, channels, norm = build_prior(cfg)
    if cfg["schedule"] == "edm":
        gcfg = guidance_config(cfg)
        edm = EDMSchedule(cfg["sigma_min"], cfg["sigma_max"], gcfg.n_steps)
        seeds = [member_seed(cfg["seed"], i) for i in range(cfg["members"])]
        data = []
        for i in range(0, len(seeds), cfg["batch_size"]):
            rngs = [np.random.default_rng(s) for s in seeds[i : i + cfg["batch_size"]]]
            data.extend(sample_edm_batch(prior, edm, rngs))
        ens = Ensemble([FieldGrid(channels, x, norm) for x in data], seeds)
    else:
        ens = _run_ensemble(prior, None, guidance_config(cfg), cfg, channels, norm)
    _ensemble_outputs(cfg, [("", ens)], "sample")
    print(f"wrote {len(ens)} unconditional members to {cfg.out_dir}")
    return EXIT_OK


def cmd_assimilate(cfg: RunConfig) -> int:
    if not cfg["obs"]:
        raise ConfigError("assimilate needs --obs")
    prior, channels, norm = build_prior(cfg)
    base = guidance_config(cfg)
    sets = read_observation_csv(cfg["obs"], prior.shape, channels, norm, default_sigma=base.obs_std)
    if cfg["time"]:
        if cfg["time"] not in sets:
            raise ConfigError(f"time {cfg['time']!r} not present in {cfg['obs']}")
        sets = {cfg["time"]: sets[cfg["time"]]}
    if not sets:
        # no observations at all: plain unconditional sampling
        sets = {"": ObservationSet.empty(prior.shape)}
    runs = []
    for k, (t, obs) in enumerate(sets.items()):
        gcfg = guidance_config(cfg, seed=cfg["seed"] + k)
        logger.info("assimilating %d observations for time %r", len(obs), t)
        runs.append((t, _run_ensemble(prior, obs, gcfg, cfg, channels, norm)))
    _ensemble_outputs(cfg, runs, "assimilate")
    print(f"assimilated {len(runs)} time(s) with {cfg['members']} members; N={base.n_steps}, C={base.corrections}, "
          f"tau_tilde={base.tau_tilde}, gamma={base.gamma}, obs_std={base.obs_std}")
    return EXIT_OK


def _load_ensemble_dir(path: Path):
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise IngestError(f"{path}: no manifest.json (expected an assimilate output directory)") from None
    out = {}
    for entry in manifest["times"]:
        d = path / entry["dir"]
        members = sorted((d / "members").glob("member_*.sdag"))
        if not members:
            raise IngestError(f"{d}: no member grids")
        grids = [read_grid(p) for p in members]
        out[entry["time"]] = grids
    return out


def cmd_evaluate(cfg: RunConfig) -> int:
    if not cfg["ensemble"] or not cfg["obs"]:
        raise ConfigError("evaluate needs --ensemble and --obs")
    ensembles = _load_ensemble_dir(Path(cfg["ensemble"]))
    first = next(iter(ensembles.values()))[0]
    shape, channels, norm = first.shape, first.channels, first.norm
    sets = read_observation_csv(cfg["obs"], shape, channels, norm, default_sigma=cfg["obs_std"])
    if len(ensembles) == 1 and len(sets) == 1:
        pairs = [(next(iter(ensembles.values())), next(iter(sets.values())))]
    else:
        pairs = [(ensembles[t], sets[t]) for t in sets if t in ensembles]
    if not pairs:
        raise ConfigError("no evaluation time matches an ensemble time")
    entries = sorted({int(i) for _, obs in pairs for i in obs.operator.indices})
    col = {e: j for j, e in enumerate(entries)}
    n_members = min(len(g) for g, _ in pairs)
    pred = np.full((len(pairs), n_members, len(entries)), np.nan)
    y = np.full((len(pairs), len(entries)), np.nan)
    std = np.full(len(entries), cfg["obs_std"])
    for t, (grids, obs) in enumerate(pairs):
        stack = np.stack([g.data for g in grids[:n_members]]).reshape(n_members, -1)
        j = [col[int(i)] for i in obs.operator.indices]
        pred[t][:, j] = stack[:, obs.operator.indices]
        y[t, j] = obs.values
        std[j] = obs.sigma
    flat_channels = np.unravel_index(np.asarray(entries), shape)[0]
    rng = np.random.default_rng(cfg["seed"])
    report = evaluate_ensemble(
        np.nan_to_num(pred), y, flat_channels, std, [c.name for c in channels], rng, cfg["bootstrap"]
    )
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "metrics.csv")
    report.write_json(out / "metrics.json")
    for row in report.rows():
        print(f"{row['channel']:>8} {row['metric']:>10} {row['value']:.5f}")
    return EXIT_OK


def _stations_from_csv(cfg, shape, channels, norm):
    sets = read_observation_csv(cfg["obs"], shape, channels, norm)
    loc = {}
    for obs in sets.values():
        for o in obs.observations():
            loc.setdefault(o.station_id, (o.row, o.col))
    ids = sorted(loc)
    data = np.full((len(sets), len(ids), shape[0]), np.nan)
    for t, obs in enumerate(sets.values()):
        for o in obs.observations():
            data[t, ids.index(o.station_id), o.channel] = o.value
    return [loc[i] for i in ids], data


def cmd_station_sweep(cfg: RunConfig) -> int:
    prior, channels, norm = build_prior(cfg)
    shape = prior.shape
    base = guidance_config(cfg)
    rng = np.random.default_rng(cfg["seed"])
    if cfg["obs"]:
        stations, data = _stations_from_csv(cfg, shape, channels, norm)
    else:
        n = cfg["n_stations"]
        if n > shape[1] * shape[2]:
            raise ConfigError("more stations than grid pixels")
        flat = rng.choice(shape[1] * shape[2], n, replace=False)
        stations = [(int(i) // shape[2], int(i) % shape[2]) for i in flat]
        if isinstance(prior, GaussianAnalyticDenoiser):
            truth = prior.sample_prior(rng, cfg["n_times"])
        else:
            truth = assimilate_ensemble(prior, None, base, cfg["n_times"], batch_size=cfg["batch_size"]).stack()
        rows, cols = zip(*stations)
        data = truth[:, :, list(rows), list(cols)].transpose(0, 2, 1)
        data = data + base.obs_std * rng.standard_normal(data.shape)

    def assimilator(obs_set, t):
        gcfg = guidance_config(cfg, seed=cfg["seed"] + t)
        ens = assimilate_ensemble(prior, obs_set, gcfg, cfg["members"], threads=cfg["threads"],
                                  batch_size=cfg["batch_size"])
        return ens.mean()

    result = station_sweep(stations, cfg["counts"], assimilator, data, shape, base.obs_std, cfg["split_seed"])
    result.channel_names = [c.name for c in channels]
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    result.write_csv(out / "station_sweep.csv")
    for k, row in zip(result.counts, result.rmse):
        print(f"{k:>5} stations: held-out RMSE " + ", ".join(f"{v:.4f}" for v in row))
    return EXIT_OK


def cmd_oracle_check(cfg: RunConfig) -> int:
    results = run_oracle_checks(cfg["members"], threads=cfg["threads"], quick=cfg["quick"])
    for r in results:
        print(r.line())
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "oracle_report.json").write_text(json.dumps([r.__dict__ for r in results], indent=2))
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECKS_FAILED


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "assimilate": cmd_assimilate,
    "evaluate": cmd_evaluate,
    "station-sweep": cmd_station_sweep,
    "oracle-check": cmd_oracle_check,
}


# --- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scoreda", description="Score-based data assimilation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, options in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML file with option values")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        for o in options:
            if o.type is bool:
                p.add_argument(o.flag, dest=o.name, action=argparse.BooleanOptionalAction, default=None, help=o.help)
            elif o.is_list:
                p.add_argument(o.flag, dest=o.name, type=o.type, nargs="+", default=None, help=o.help)
            else:
                p.add_argument(o.flag, dest=o.name, type=o.type, default=None, choices=o.choices, help=o.help)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("step", "tau", "line", "failed_seeds"):
        if getattr(exc, attr, None) is not None:
            payload[attr] = getattr(exc, attr)
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    flags = {o.name: getattr(args, o.name) for o in COMMANDS[args.command]}
    try:
        cfg = resolve_config(args.command, args.config, flags)
        cfg.write_resolved()
        return HANDLERS[args.command](cfg)
    except (ConfigError, DomainError) as exc:
        return _fail(EXIT_CONFIG, exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except (IngestError, OSError) as exc:
        return _fail(EXIT_IO, exc)
    except ScoreDAError as exc:
        return _fail(EXIT_CONFIG, exc)


if __name__ == "__main__":
    sys.exit(main())
