import numpy as np
import pytest
import torch

from scoreda.covariance import KroneckerCovariance
from scoreda.denoiser.analytic import GaussianAnalyticDenoiser
from scoreda.denoiser.base import score_from_denoiser, vjp_finite_difference_check
from scoreda.denoiser.conv import ConvDenoiser, edm_coefficients, load_checkpoint, save_checkpoint
from scoreda.denoiser.training import TrainConfig, Trainer, edm_train_step, train, validation_mse
from scoreda.errors import ConfigError, DomainError, IngestError, NumericalError
from scoreda.fields import ChannelSpec, NormStats

torch.set_num_threads(1)


def randomized_conv(shape=(2, 8, 8), seed=0):
    torch.manual_seed(seed)
    model = ConvDenoiser(shape, base=8, emb_dim=16)
    # the output layer starts at zero; give it weights so the network is non-trivial
    with torch.no_grad():
        model.net.out.weight.normal_(0, 0.1)
        model.net.out.bias.normal_(0, 0.1)
    model.invalidate()
    return model


# --- analytic backend -------------------------------------------------------


def test_identity_covariance_formula():
    d = GaussianAnalyticDenoiser.from_matrix(np.eye(16), (1, 4, 4))
    x = np.random.default_rng(0).standard_normal((1, 4, 4))
    for sigma in (0.3, 1.0, 4.0):
        np.testing.assert_allclose(d.evaluate(x, sigma), x / (1 + sigma**2), rtol=1e-12)


def test_zero_sigma_is_identity():
    d = GaussianAnalyticDenoiser.squared_exponential(4, 4, 1.0)
    x = np.random.default_rng(1).standard_normal((1, 4, 4))
    assert np.array_equal(d.evaluate(x, 0.0), x)


def test_large_sigma_returns_mean():
    mean = np.full((1, 4, 4), 0.7)
    d = GaussianAnalyticDenoiser.squared_exponential(4, 4, 1.0, mean=mean)
    x = np.random.default_rng(2).standard_normal((1, 4, 4))
    np.testing.assert_allclose(d.evaluate(x, 1e6), mean, atol=1e-9)


def test_matches_dense_solve():
    rng = np.random.default_rng(3)
    mean = rng.standard_normal((1, 8, 8))
    d = GaussianAnalyticDenoiser.squared_exponential(8, 8, 2.0, mean=mean)
    c = d.covariance.dense()
    x = rng.standard_normal((1, 8, 8))
    y = np.linalg.solve(c + np.eye(64), (x - mean).ravel())
    ref = mean.ravel() + c @ y
    np.testing.assert_allclose(d.evaluate(x, 1.0).ravel(), ref, atol=1e-10)


def test_batched_evaluation():
    d = GaussianAnalyticDenoiser.squared_exponential(4, 4, 1.0)
    x = np.random.default_rng(4).standard_normal((3, 1, 4, 4))
    out = d.evaluate(x, 0.5)
    for i in range(3):
        np.testing.assert_allclose(out[i], d.evaluate(x[i], 0.5), atol=1e-14)


def test_linearity():
    d = GaussianAnalyticDenoiser.squared_exponential(5, 5, 1.5)
    rng = np.random.default_rng(5)
    x, y = rng.standard_normal((2, 1, 5, 5))
    np.testing.assert_allclose(d.evaluate(2 * x - y, 0.8), 2 * d.evaluate(x, 0.8) - d.evaluate(y, 0.8), atol=1e-12)


def test_score_identity_covariance():
    d = GaussianAnalyticDenoiser.from_matrix(np.eye(4), (1, 2, 2))
    x = np.random.default_rng(6).standard_normal((1, 2, 2))
    np.testing.assert_allclose(score_from_denoiser(x, 0.5, d), -x / 1.25, rtol=1e-12)


def test_score_at_fixed_point_is_zero():
    d = GaussianAnalyticDenoiser.squared_exponential(3, 3, 1.0)
    assert np.all(score_from_denoiser(d.mean, 0.4, d) == 0)


def test_score_requires_positive_sigma():
    d = GaussianAnalyticDenoiser.squared_exponential(3, 3, 1.0)
    with pytest.raises(DomainError):
        score_from_denoiser(np.zeros((1, 3, 3)), 0.0, d)


def test_score_matches_log_density_finite_differences():
    d = GaussianAnalyticDenoiser.squared_exponential(6, 6, 1.5)
    sigma = 0.7
    cov = d.covariance.dense() + sigma**2 * np.eye(36)
    prec = np.linalg.inv(cov)

    def logp(v):
        return -0.5 * v @ prec @ v

    rng = np.random.default_rng(7)
    x = rng.standard_normal(36)
    fd = np.array([(logp(x + 1e-5 * e) - logp(x - 1e-5 * e)) / 2e-5 for e in np.eye(36)])
    got = score_from_denoiser(x.reshape(1, 6, 6), sigma, d).ravel()
    assert np.linalg.norm(got - fd) / np.linalg.norm(fd) < 1e-4


@pytest.mark.parametrize("sigma", [0.1, 1.0, 10.0])
def test_analytic_vjp_finite_differences(sigma):
    d = GaussianAnalyticDenoiser.squared_exponential(8, 8, 2.0, np.array([[1, 0.5], [0.5, 1]]))
    rng = np.random.default_rng(8)
    x = rng.standard_normal(d.shape)
    ct = rng.standard_normal(d.shape)
    assert vjp_finite_difference_check(d, x, sigma, ct, rng=rng) < 1e-6


def test_zero_cotangent_gives_zero_vjp():
    d = GaussianAnalyticDenoiser.squared_exponential(4, 4, 1.0)
    assert np.all(d.vjp(np.ones(d.shape), 0.5, np.zeros(d.shape)) == 0)
    m = randomized_conv()
    assert np.all(m.vjp(np.ones(m.shape), 0.5, np.zeros(m.shape)) == 0)


def test_mmse_matches_monte_carlo():
    d = GaussianAnalyticDenoiser.squared_exponential(8, 8, 2.0)
    rng = np.random.default_rng(9)
    x = d.sample_prior(rng, 4000)
    noisy = x + rng.standard_normal(x.shape)
    assert np.mean((d.evaluate(noisy, 1.0) - x) ** 2) == pytest.approx(d.mmse(1.0), rel=0.03)


def test_shape_mismatch():
    d = GaussianAnalyticDenoiser.squared_exponential(4, 4, 1.0)
    with pytest.raises(ConfigError):
        d.evaluate(np.zeros((1, 5, 4)), 1.0)


# --- convolutional backend --------------------------------------------------


def test_edm_coefficients():
    c_skip, c_out, c_in, c_noise = edm_coefficients(1.0)
    assert c_skip == 0.5 and c_out == pytest.approx(2**-0.5) and c_in == pytest.approx(2**-0.5) and c_noise == 0


def test_conv_shapes_and_identity_at_zero():
    m = randomized_conv()
    x = np.random.default_rng(10).standard_normal((3, *m.shape))
    out = m.evaluate(x, 0.7)
    assert out.shape == x.shape and np.all(np.isfinite(out))
    assert np.array_equal(m.evaluate(x, 0.0), x)
    assert m.n_params < 2_000_000


def test_conv_rejects_indivisible_grid():
    with pytest.raises(ConfigError):
        ConvDenoiser((1, 10, 10))


@pytest.mark.parametrize("sigma", [0.1, 1.0, 10.0])
def test_conv_vjp_finite_differences(sigma):
    m = randomized_conv()
    rng = np.random.default_rng(11)
    x = rng.standard_normal(m.shape)
    ct = rng.standard_normal(m.shape)
    assert vjp_finite_difference_check(m, x, sigma, ct, rng=rng) < 1e-3


def test_conv_vjp_reuses_forward_pass():
    m = randomized_conv()
    rng = np.random.default_rng(12)
    x = rng.standard_normal((2, *m.shape))
    out, vjp = m.evaluate_with_vjp(x, 0.5)
    np.testing.assert_allclose(out, m.evaluate(x, 0.5), atol=1e-12)
    ct = rng.standard_normal(x.shape)
    np.testing.assert_allclose(vjp(ct), vjp(ct))
    np.testing.assert_allclose(vjp(ct), m.vjp(x, 0.5, ct), atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    m = randomized_conv()
    m.norm = NormStats((0.5, -1.0), (2.0, 3.0))
    m.channels = (ChannelSpec("u10"), ChannelSpec.precipitation())
    path = tmp_path / "m.sdad"
    save_checkpoint(path, m, extra={"note": 1})
    assert path.read_bytes()[:4] == b"SDAD"
    back = load_checkpoint(path)
    x = np.random.default_rng(13).standard_normal(m.shape)
    assert np.array_equal(back.evaluate(x, 0.3), m.evaluate(x, 0.3))
    assert back.norm == m.norm and back.channels == m.channels


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.sdad"
    path.write_bytes(b"XXXX" + bytes(16))
    with pytest.raises(IngestError):
        load_checkpoint(path)


# --- training ---------------------------------------------------------------


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(val_fraction=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


def test_train_step_returns_nonnegative_loss():
    torch.manual_seed(0)
    m = ConvDenoiser((1, 8, 8), base=8, emb_dim=16)
    trainer = Trainer(m, TrainConfig(batch_size=4, iterations=10, warmup=2))
    batch = np.random.default_rng(0).standard_normal((4, 1, 8, 8))
    loss = edm_train_step(trainer, batch, np.random.default_rng(1))
    assert np.isfinite(loss) and loss >= 0
    with pytest.raises(ConfigError):
        edm_train_step(trainer, np.zeros((0, 1, 8, 8)), np.random.default_rng(1))


def test_train_step_non_finite_loss_reports_batch():
    torch.manual_seed(0)
    m = ConvDenoiser((1, 8, 8), base=8, emb_dim=16)
    trainer = Trainer(m, TrainConfig(batch_size=2, iterations=10))
    batch = np.full((2, 1, 8, 8), np.inf)
    with pytest.raises(NumericalError) as info:
        edm_train_step(trainer, batch, np.random.default_rng(0), batch_index=7)
    assert info.value.step == 7 and "sigma" in str(info.value)


def test_training_reduces_loss_on_gaussian_data():
    prior = GaussianAnalyticDenoiser(KroneckerCovariance(8, 8, 2.0))
    data = prior.sample_prior(np.random.default_rng(0), 800).astype(np.float32)
    torch.manual_seed(0)
    m = ConvDenoiser((1, 8, 8), base=8, emb_dim=16)
    cfg = TrainConfig(batch_size=32, iterations=400, warmup=20, learning_rate=3e-3)
    before = validation_mse(m, data[:100])
    result = train(m, data, cfg)
    moving = np.convolve(result.losses, np.ones(100) / 100, mode="valid")
    assert moving[-1] < moving[0]
    assert result.val_mse < before
    assert result.n_train + result.n_val == 800


def test_training_on_zero_data_drives_loss_down():
    torch.manual_seed(0)
    m = ConvDenoiser((1, 8, 8), base=8, emb_dim=16)
    cfg = TrainConfig(batch_size=16, iterations=200, warmup=10, learning_rate=3e-3, p_mean=-3.0, p_std=0.5)
    result = train(m, np.zeros((64, 1, 8, 8), np.float32), cfg)
    assert np.mean(result.losses[-20:]) < 0.5 * np.mean(result.losses[:20])
