import logging
import math
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from scoreda.covariance import KroneckerCovariance
from scoreda.errors import ConfigError, IngestError
from scoreda.fields import ChannelSpec, NormStats
from scoreda.ingest import (
    SyntheticDatasetSpec,
    dataset_covariance,
    decompose_wind,
    generate_grf_dataset,
    hourly_to_observation_rows,
    interpolate_to_hours,
    load_dataset,
    read_observation_csv,
    read_observation_csv_single,
    read_station_csv,
    save_dataset,
    write_observation_csv,
)
from scoreda.ingest.stations import StationRecord
from scoreda.obs import ObservationSet, point_set

T0 = datetime(2024, 3, 1, 0, 0, tzinfo=timezone.utc)
CHANNELS = (ChannelSpec("u10"), ChannelSpec("v10"), ChannelSpec.precipitation())


def rec(minutes, speed=None, direction=None, precip=None, sid="A"):
    return StationRecord(sid, T0 + timedelta(minutes=minutes), speed, direction, precip, 1, 2)


# --- wind --------------------------------------------------------------------


def test_wind_examples():
    assert all(c == 0 for c in decompose_wind(0.0, 123.0))
    u, v = decompose_wind(2.0, 90.0)
    assert u == pytest.approx(-2.0, abs=1e-12) and v == pytest.approx(0.0, abs=1e-12)
    u, v = decompose_wind(2.0, 180.0)
    assert u == pytest.approx(0.0, abs=1e-12) and v == pytest.approx(2.0, abs=1e-12)
    u, v = decompose_wind(3.0, 0.0)
    assert v == -3.0


def test_wind_domain():
    with pytest.raises(IngestError):
        decompose_wind(1.0, 360.0)
    with pytest.raises(IngestError):
        decompose_wind(-1.0, 10.0)


# --- hourly interpolation ----------------------------------------------------


def test_on_hour_passthrough():
    out = interpolate_to_hours([rec(0, 2.0, 90.0, 0.5), rec(60, 1.0, 180.0, 0.0)])
    assert [h.time for h in out] == [T0, T0 + timedelta(hours=1)]
    assert out[0].u == pytest.approx(-2.0) and out[1].v == pytest.approx(1.0)
    assert out[0].log_precip == pytest.approx(math.log(0.5 + 1e-4))


def test_linear_interpolation_to_enclosed_hour():
    # u = 0 at :30 (calm), u = 2 at +1:30 (wind from the west, 270 degrees)
    out = interpolate_to_hours([rec(30, 0.0, None), rec(90, 2.0, 270.0)])
    assert len(out) == 1 and out[0].time == T0 + timedelta(hours=1)
    assert out[0].u == pytest.approx(1.0, abs=1e-12)
    assert out[0].v == pytest.approx(0.0, abs=1e-12)


def test_gap_rule_marks_missing():
    out = interpolate_to_hours([rec(0, 1.0, 90.0), rec(300, 1.0, 90.0)], max_gap=timedelta(hours=2))
    assert len(out) == 6
    assert out[0].u is not None and out[-1].u is not None
    assert all(h.u is None and h.v is None for h in out[1:-1])


def test_missing_precip_stays_missing():
    out = interpolate_to_hours([rec(0, 1.0, 0.0, None), rec(60, 1.0, 0.0, 1.0)])
    assert out[0].log_precip is None and out[1].log_precip is not None


def test_precip_interpolated_in_log_space():
    out = interpolate_to_hours([rec(30, 1.0, 0.0, 0.0), rec(90, 1.0, 0.0, 1.0)])
    expected = 0.5 * (math.log(1e-4) + math.log(1.0 + 1e-4))
    assert out[0].log_precip == pytest.approx(expected, abs=1e-12)


def test_duplicate_timestamps_keep_last(caplog):
    with caplog.at_level(logging.WARNING):
        out = interpolate_to_hours([rec(0, 1.0, 90.0), rec(0, 3.0, 90.0)])
    assert len(out) == 1 and out[0].u == pytest.approx(-3.0)
    assert "duplicate" in caplog.text


def test_stations_handled_separately():
    out = interpolate_to_hours([rec(0, 1.0, 90.0, sid="A"), rec(0, 2.0, 90.0, sid="B")])
    assert {h.station_id: h.u for h in out} == pytest.approx({"A": -1.0, "B": -2.0})


def test_station_record_validation():
    with pytest.raises(IngestError):
        rec(0, -1.0, 0.0)
    with pytest.raises(IngestError):
        rec(0, 1.0, 400.0)
    with pytest.raises(IngestError):
        rec(0, 1.0, 0.0, -0.1)


def test_read_station_csv(tmp_path):
    p = tmp_path / "st.csv"
    p.write_text(
        "station_id,time,speed,direction,precip,row,col\n"
        "A,2024-03-01T00:30:00Z,0,,0,1,2\n"
        "A,2024-03-01T01:30:00,2,270,,1,2\n"
    )
    recs = read_station_csv(p)
    assert recs[0].time == T0 + timedelta(minutes=30)
    assert recs[1].time.tzinfo is not None and recs[1].precip is None
    rows = hourly_to_observation_rows(interpolate_to_hours(recs))
    assert {r["channel"] for r in rows} == {"u10", "v10"}
    assert rows[0]["time"] == "2024-03-01T01:00:00Z"
    p.write_text("station_id,time,speed,direction,precip,row,col\nA,2024-03-01T00:00:00Z,x,0,0,1,2\n")
    with pytest.raises(IngestError, match="line 2"):
        read_station_csv(p)


# --- synthetic GRF ------------------------------------------------------------


def test_white_noise_variance():
    ds = generate_grf_dataset(SyntheticDatasetSpec(8, 8, 1, 1e-3, n_samples=10000, seed=1))
    var = ds.samples.astype(np.float64).var(axis=0)
    assert abs(var.mean() - 1) < 0.03
    assert np.abs(var - 1).max() < 0.06  # per-pixel sampling error is about 1.4% (1 sd)


def test_cross_channel_correlation():
    corr = ((1.0, 0.9), (0.9, 1.0))
    ds = generate_grf_dataset(SyntheticDatasetSpec(6, 6, 2, 2.0, corr, n_samples=10000, seed=2))
    x = ds.samples.astype(np.float64)
    r = np.mean([np.corrcoef(x[:, 0, i, j], x[:, 1, i, j])[0, 1] for i in range(6) for j in range(6)])
    assert r == pytest.approx(0.9, abs=0.02)


def test_grf_covariance_converges():
    ds = generate_grf_dataset(SyntheticDatasetSpec(8, 8, 1, 2.0, n_samples=10000, seed=3))
    emp = np.cov(ds.samples.reshape(10000, -1).astype(np.float64), rowvar=False)
    ref = ds.covariance().dense()
    assert np.linalg.norm(emp - ref) / np.linalg.norm(ref) < 0.10


def test_grf_deterministic_and_thread_independent():
    spec = SyntheticDatasetSpec(8, 8, 1, 2.0, n_samples=50, seed=4, shard_size=16)
    a = generate_grf_dataset(spec, threads=1).samples
    b = generate_grf_dataset(spec, threads=3).samples
    assert a.tobytes() == b.tobytes()
    c = generate_grf_dataset(SyntheticDatasetSpec(8, 8, 1, 2.0, n_samples=50, seed=5, shard_size=16)).samples
    assert not np.array_equal(a, c)


def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticDatasetSpec(channels=2, channel_corr=((1.0, 1.5), (1.5, 1.0)))
    with pytest.raises(ConfigError):
        SyntheticDatasetSpec(length_scale=-1.0)
    with pytest.raises(ConfigError):
        SyntheticDatasetSpec(channels=2, length_scale=(1.0, 2.0))


def test_dataset_round_trip(tmp_path):
    spec = SyntheticDatasetSpec(4, 4, 2, 1.5, ((1.0, 0.5), (0.5, 1.0)), n_samples=10, seed=6, shard_size=4)
    ds = generate_grf_dataset(spec)
    save_dataset(ds, tmp_path)
    assert sorted(p.name for p in tmp_path.glob("shard_*.npy")) == ["shard_0000.npy", "shard_0001.npy", "shard_0002.npy"]
    back = load_dataset(tmp_path)
    assert back.samples.tobytes() == ds.samples.tobytes()
    assert back.spec == spec
    assert isinstance(dataset_covariance(tmp_path), KroneckerCovariance)
    with pytest.raises(IngestError):
        load_dataset(tmp_path / "nowhere")


# --- observation CSV ----------------------------------------------------------

HEADER = "time,station_id,row,col,channel,value,sigma\n"


def write(tmp_path, body, header=HEADER):
    p = tmp_path / "obs.csv"
    p.write_text(header + body)
    return p


def test_csv_negative_precip_rejected(tmp_path):
    p = write(tmp_path, "t0,A,0,0,u10,1.0,0.1\nt0,A,0,0,tp,-0.5,0.1\n")
    with pytest.raises(IngestError, match="line 3"):
        read_observation_csv(p, (3, 4, 4), CHANNELS)


def test_csv_missing_sigma_uses_default(tmp_path):
    p = write(tmp_path, "t0,A,0,0,u10,1.0\n", header="time,station_id,row,col,channel,value\n")
    obs = read_observation_csv_single(p, (3, 4, 4), CHANNELS)
    assert obs.sigma.tolist() == [0.1]
    p = write(tmp_path, "t0,A,0,0,u10,1.0,\n")
    assert read_observation_csv_single(p, (3, 4, 4), CHANNELS).sigma.tolist() == [0.1]


def test_csv_transforms_precip(tmp_path):
    p = write(tmp_path, "t0,A,1,2,tp,0.5,0.2\n")
    obs = read_observation_csv_single(p, (3, 4, 4), CHANNELS)
    assert obs.values[0] == pytest.approx(math.log(0.5 + 1e-4))
    assert obs.operator.coords().tolist() == [[2, 1, 2]]


@pytest.mark.parametrize(
    "body, pattern",
    [
        ("t0,A,0,0,w,1.0,0.1\n", "unknown channel"),
        ("t0,A,0,0,u10,abc,0.1\n", "malformed"),
        ("t0,A,9,0,u10,1.0,0.1\n", "outside"),
        ("t0,A,0,0,u10,nan,0.1\n", "non-finite"),
        ("t0,A,0,0,u10,1.0,0\n", "sigma"),
        ("t0,A,0,0,u10,1.0,0.1\nt0,B,0,0,u10,2.0,0.1\n", "duplicate"),
        ("t0,A,0,0,u10,1.0,0.1,extra\n", "fields"),
    ],
)
def test_csv_errors_carry_line_numbers(tmp_path, body, pattern):
    p = write(tmp_path, body)
    with pytest.raises(IngestError, match=pattern) as info:
        read_observation_csv(p, (3, 4, 4), CHANNELS)
    assert info.value.line == body.count("\n") + 1


def test_csv_missing_file(tmp_path):
    with pytest.raises(IngestError):
        read_observation_csv(tmp_path / "none.csv", (3, 4, 4), CHANNELS)


def test_csv_groups_times_in_file_order(tmp_path):
    p = write(tmp_path, "t1,A,0,0,u10,1.0,0.1\nt0,A,0,0,u10,2.0,0.1\nt1,B,1,1,v10,3.0,0.1\n")
    sets = read_observation_csv(p, (3, 4, 4), CHANNELS)
    assert list(sets) == ["t1", "t0"]
    assert len(sets["t1"]) == 2
    with pytest.raises(IngestError):
        read_observation_csv_single(p, (3, 4, 4), CHANNELS)


def test_csv_empty_file_gives_empty_set(tmp_path):
    obs = read_observation_csv_single(write(tmp_path, ""), (3, 4, 4), CHANNELS)
    assert len(obs) == 0


def test_csv_round_trip(tmp_path):
    norm = NormStats((0.5, -0.2, -3.0), (2.0, 1.5, 2.5))
    rng = np.random.default_rng(7)
    op = point_set((3, 4, 4), [(0, 0, 1), (1, 2, 3), (2, 3, 3)])
    sets = {
        "2024-03-01T00:00:00Z": ObservationSet(op, rng.standard_normal(3), [0.1, 0.2, 0.3], ["a", "b", "c"]),
        "2024-03-01T01:00:00Z": ObservationSet(point_set((3, 4, 4), [(0, 0, 1)]), [0.25], 0.1, ["a"]),
    }
    path = tmp_path / "rt.csv"
    write_observation_csv(path, sets, CHANNELS, norm)
    back = read_observation_csv(path, (3, 4, 4), CHANNELS, norm)
    assert list(back) == list(sets)
    for t in sets:
        np.testing.assert_allclose(back[t].values, sets[t].values, rtol=1e-12, atol=1e-12)
        assert back[t].sigma.tolist() == sets[t].sigma.tolist()
        assert back[t].station_ids == sets[t].station_ids
        assert np.array_equal(back[t].operator.indices, sets[t].operator.indices)
