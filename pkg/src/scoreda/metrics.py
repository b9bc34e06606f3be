"""Deterministic and probabilistic verification of assimilated ensembles.

Scores are computed at evaluation observations. For the probabilistic scores
(CRPS, spread, rank histograms) observation noise is first added to each member
so that members and observations are compared on the same footing; MSE and MAE
use raw member values.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError

__all__ = [
    "mse",
    "mae",
    "rmse",
    "crps_fair",
    "ensemble_spread",
    "add_obs_noise",
    "RankHistogram",
    "rank_histogram",
    "bootstrap_ci",
    "EvalReport",
    "evaluate_ensemble",
    "station_sweep",
    "SweepResult",
    "ClimateReport",
    "climate_diagnostics",
]


def _errors(pred, obs) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if pred.shape != obs.shape:
        raise ConfigError(f"prediction shape {pred.shape} does not match observations {obs.shape}")
    if obs.size == 0:
        raise ConfigError("no observations to score")
    err = obs - pred
    return err[np.isfinite(err)]


def mse(pred, obs) -> float:
    """Mean of ``(y - H x)^2`` over all entries and times; NaN observations are skipped."""
    return float(np.mean(_errors(pred, obs) ** 2))


def mae(pred, obs) -> float:
    return float(np.mean(np.abs(_errors(pred, obs))))


def rmse(pred, obs) -> float:
    return float(np.sqrt(mse(pred, obs)))


def crps_fair(members, y) -> np.ndarray:
    """Fair (unbiased) ensemble CRPS.

    ``members`` has the ensemble on its last axis (size R >= 2) and ``y`` the
    matching shape without it::

        CRPS = mean_r |x_r - y| - sum_{r != q} |x_r - x_q| / (2 R (R - 1))
    """
    members = np.asarray(members, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    r = members.shape[-1]
    if r < 2:
        raise ConfigError("fair CRPS needs at least two members")
    if members.shape[:-1] != y.shape:
        raise ConfigError(f"members {members.shape} do not match observations {y.shape}")
    skill = np.mean(np.abs(members - y[..., None]), axis=-1)
    pairs = np.abs(members[..., :, None] - members[..., None, :]).sum(axis=(-2, -1))
    return skill - pairs / (2 * r * (r - 1))


def ensemble_spread(members) -> float:
    """Bias-corrected ensemble variance ``(R+1)/R * mean_t s_t^2``.

    ``members`` is shaped (..., R); every leading index is one (time, location).
    """
    members = np.asarray(members, dtype=np.float64)
    r = members.shape[-1]
    if r < 2:
        raise ConfigError("spread needs at least two members")
    s2 = np.var(members, axis=-1, ddof=1)
    s2 = s2[np.isfinite(s2)]
    return float((r + 1) / r * np.mean(s2))


def add_obs_noise(members, obs_std, rng: np.random.Generator) -> np.ndarray:
    """Pseudo-observations of each member: ``members + obs_std * N(0, 1)``.

    ``obs_std`` broadcasts against ``members`` without its ensemble axis.
    """
    members = np.asarray(members, dtype=np.float64)
    std = np.asarray(obs_std, dtype=np.float64)[..., None]
    return members + std * rng.standard_normal(members.shape)


@dataclass
class RankHistogram:
    counts: np.ndarray

    @property
    def n_members(self) -> int:
        return len(self.counts) - 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def edges(self) -> np.ndarray:
        return np.arange(len(self.counts) + 1) - 0.5

    def __add__(self, other: "RankHistogram") -> "RankHistogram":
        return RankHistogram(self.counts + other.counts)

    def chi_square(self):
        """Chi-square test of uniformity; returns (statistic, p-value)."""
        from scipy.stats import chisquare

        res = chisquare(self.counts)
        return float(res.statistic), float(res.pvalue)


def rank_histogram(members, y, rng: np.random.Generator) -> RankHistogram:
    """Rank of each observation among its members; ties are broken uniformly at random.

    Points with a missing observation are skipped.
    """
    members = np.asarray(members, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if members.shape[:-1] != y.shape:
        raise ConfigError(f"members {members.shape} do not match observations {y.shape}")
    r = members.shape[-1]
    members = members.reshape(-1, r)
    y = y.ravel()
    ok = np.isfinite(y) & np.all(np.isfinite(members), axis=1)
    members, y = members[ok], y[ok]
    below = np.sum(members < y[:, None], axis=1)
    ties = np.sum(members == y[:, None], axis=1)
    ranks = below + rng.integers(0, ties + 1)
    return RankHistogram(np.bincount(ranks, minlength=r + 1))


def bootstrap_ci(values, iterations: int = 1000, level: float = 0.95, rng: np.random.Generator | None = None):
    """Percentile bootstrap interval for the mean of a per-time series."""
    values = np.asarray(values, dtype=np.float64)
    values = values[np.isfinite(values)]
    if values.size < 2:
        raise ConfigError("bootstrap needs at least two values")
    rng = np.random.default_rng(0) if rng is None else rng
    idx = rng.integers(0, values.size, size=(iterations, values.size))
    means = values[idx].mean(axis=1)
    alpha = (1 - level) / 2
    lo, hi = np.quantile(means, [alpha, 1 - alpha])
    centre = values.mean()
    return float(min(lo, centre)), float(max(hi, centre))


@dataclass
class ChannelScores:
    mse_mean: float
    mse_single: float
    mae_mean: float
    mae_single: float
    crps: float
    var_ens: float
    rmse_mean: float
    n_scored: int
    rank_counts: list[int]
    rmse_series: list[float]
    ci: dict[str, tuple[float, float]] = field(default_factory=dict)


@dataclass
class EvalReport:
    channels: dict[str, ChannelScores]
    n_members: int
    n_times: int

    METRICS = ("crps", "mse_mean", "mse_single", "mae_mean", "mae_single", "var_ens", "rmse_mean")

    def rows(self):
        for name, sc in self.channels.items():
            for metric in self.METRICS:
                lo, hi = sc.ci.get(metric, (float("nan"), float("nan")))
                yield {"channel": name, "metric": metric, "value": getattr(sc, metric), "ci_lo": lo, "ci_hi": hi}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["channel", "metric", "value", "ci_lo", "ci_hi"])
            writer.writeheader()
            writer.writerows(self.rows())

    def to_dict(self) -> dict:
        return {
            "n_members": self.n_members,
            "n_times": self.n_times,
            "channels": {k: asdict(v) for k, v in self.channels.items()},
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def evaluate_ensemble(
    pred,
    obs,
    obs_channel,
    obs_std,
    channel_names: Sequence[str],
    rng: np.random.Generator,
    bootstrap_iterations: int = 1000,
) -> EvalReport:
    """Score member predictions at evaluation observations.

    ``pred`` is (T, R, M): member values at the M evaluation entries for each of T
    times; ``obs`` is (T, M) with NaN where missing; ``obs_channel`` (M,) gives each
    entry's channel and ``obs_std`` its observation noise (scalar or (M,)).
    """
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    t, r, m = pred.shape
    if obs.shape != (t, m):
        raise ConfigError(f"observations {obs.shape} do not match predictions {pred.shape}")
    if r < 2:
        raise ConfigError("ensemble evaluation needs at least two members")
    obs_channel = np.asarray(obs_channel)
    std = np.broadcast_to(np.asarray(obs_std, dtype=np.float64), (m,))
    members = np.moveaxis(pred, 1, -1)  # (T, M, R)
    noisy = add_obs_noise(members, np.broadcast_to(std, (t, m)), rng)
    mean = members.mean(axis=-1)
    out = {}
    for c, name in enumerate(channel_names):
        sel = obs_channel == c
        if not np.any(sel):
            continue
        y = obs[:, sel]
        valid = np.isfinite(y)
        if not np.any(valid):
            continue
        ens_mean = mean[:, sel]
        single = members[:, sel, 0]
        crps_vals = np.where(valid, crps_fair(noisy[:, sel], np.where(valid, y, 0.0)), np.nan)
        sq = np.where(valid, (y - ens_mean) ** 2, np.nan)
        with np.errstate(invalid="ignore"):
            per_time_mse = np.nanmean(sq, axis=1)
            per_time_crps = np.nanmean(crps_vals, axis=1)
        has_time = np.isfinite(per_time_mse)
        spread_members = noisy[:, sel][valid]
        scores = ChannelScores(
            mse_mean=mse(ens_mean, y),
            mse_single=mse(single, y),
            mae_mean=mae(ens_mean, y),
            mae_single=mae(single, y),
            crps=float(np.nanmean(crps_vals)),
            var_ens=ensemble_spread(spread_members),
            rmse_mean=rmse(ens_mean, y),
            n_scored=int(valid.sum()),
            rank_counts=rank_histogram(noisy[:, sel], y, rng).counts.tolist(),
            rmse_series=np.sqrt(per_time_mse).tolist(),
        )
        if has_time.sum() >= 2:
            scores.ci["mse_mean"] = bootstrap_ci(per_time_mse[has_time], bootstrap_iterations, rng=rng)
            scores.ci["crps"] = bootstrap_ci(per_time_crps[has_time], bootstrap_iterations, rng=rng)
            lo, hi = scores.ci["mse_mean"]
            scores.ci["rmse_mean"] = (float(np.sqrt(lo)), float(np.sqrt(hi)))
        out[name] = scores
    return EvalReport(out, r, t)


@dataclass
class SweepResult:
    counts: list[int]
    channel_names: list[str]
    rmse: np.ndarray  # (len(counts), C)
    n_eval: list[int]
    flags: list[str]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["n_stations", "n_eval", *[f"rmse_{c}" for c in self.channel_names], "flag"])
            for k, n_eval, row, flag in zip(self.counts, self.n_eval, self.rmse, self.flags):
                writer.writerow([k, n_eval, *[f"{v:.6g}" for v in row], flag])


def station_sweep(
    stations: Sequence[tuple[int, int]],
    counts: Sequence[int],
    assimilator: Callable,
    data,
    shape: tuple[int, int, int],
    obs_std=0.1,
    split_seed: int = 0,
) -> SweepResult:
    """Held-out RMSE as a function of the number of guiding stations.

    ``data`` holds station observations shaped (T, S, C) in model space (NaN where
    missing). For each count ``k`` a fixed random permutation of the stations puts
    the first ``k`` in the guiding set and the rest in the evaluation set.
    ``assimilator(obs_set, t)`` returns the assimilated ``shape`` state for time t.
    """
    from .obs import Observation, ObservationSet

    data = np.asarray(data, dtype=np.float64)
    n_times, n_st, n_ch = data.shape
    if n_st != len(stations):
        raise ConfigError("data and station list disagree on the number of stations")
    order = np.random.default_rng(split_seed).permutation(n_st)
    rmse_rows, n_eval, flags = [], [], []
    for k in counts:
        if not 0 <= k < n_st:
            raise ConfigError(f"station count {k} must be below the total ({n_st})")
        guide, held = order[:k], order[k:]
        sq = np.zeros(n_ch)
        cnt = np.zeros(n_ch)
        for t in range(n_times):
            obs = [
                Observation(c, stations[s][0], stations[s][1], data[t, s, c], float(obs_std), str(s))
                for s in guide
                for c in range(n_ch)
                if np.isfinite(data[t, s, c])
            ]
            obs_set = ObservationSet.from_observations(shape, obs) if obs else ObservationSet.empty(shape)
            x = assimilator(obs_set, t)
            for s in held:
                r, col = stations[s]
                err = data[t, s] - x[:, r, col]
                ok = np.isfinite(err)
                sq[ok] += err[ok] ** 2
                cnt[ok] += 1
        with np.errstate(invalid="ignore", divide="ignore"):
            rmse_rows.append(np.sqrt(sq / cnt))
        n_eval.append(len(held))
        flags.append("high_variance_single_station" if len(held) == 1 else "")
    return SweepResult(list(counts), [f"ch{c}" for c in range(n_ch)], np.array(rmse_rows), n_eval, flags)


@dataclass
class ClimateReport:
    mean_a: np.ndarray
    mean_b: np.ndarray
    bias_map: np.ndarray
    bin_edges: list[np.ndarray]
    hist_a: list[np.ndarray]
    hist_b: list[np.ndarray]
    mean_bias: np.ndarray
    variance_ratio: np.ndarray

    def summary(self, channel_names=None) -> dict:
        names = channel_names or [f"ch{i}" for i in range(len(self.mean_bias))]
        return {
            n: {"mean_bias": float(b), "variance_ratio": float(v)}
            for n, b, v in zip(names, self.mean_bias, self.variance_ratio)
        }


def climate_diagnostics(samples_a, samples_b, bins: int = 50) -> ClimateReport:
    """Compare two sample sets (N, C, H, W): time-mean maps, shared-bin histograms, bias.

    ``variance_ratio`` is var(b) / var(a) per channel over all samples and pixels.
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.shape[1:] != b.shape[1:]:
        raise ConfigError(f"sample sets differ in shape: {a.shape[1:]} vs {b.shape[1:]}")
    mean_a, mean_b = a.mean(axis=0), b.mean(axis=0)
    edges, ha, hb = [], [], []
    for c in range(a.shape[1]):
        lo = min(a[:, c].min(), b[:, c].min())
        hi = max(a[:, c].max(), b[:, c].max())
        if hi <= lo:
            hi = lo + 1.0
        e = np.linspace(lo, hi, bins + 1)
        edges.append(e)
        ha.append(np.histogram(a[:, c], e)[0])
        hb.append(np.histogram(b[:, c], e)[0])
    var_a = a.var(axis=(0, 2, 3))
    var_b = b.var(axis=(0, 2, 3))
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(var_a > 0, var_b / var_a, np.nan)
    return ClimateReport(
        mean_a, mean_b, mean_b - mean_a, edges, ha, hb, (mean_b - mean_a).mean(axis=(1, 2)), ratio
    )
