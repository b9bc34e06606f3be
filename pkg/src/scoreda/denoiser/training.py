"""EDM denoising score-matching training for :class:`ConvDenoiser`."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import ConfigError, NumericalError
from .conv import ConvDenoiser, precondition

logger = logging.getLogger(__name__)

__all__ = ["TrainConfig", "TrainResult", "Trainer", "edm_train_step", "validation_mse", "train"]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 2e-3
    iterations: int = 6000
    p_mean: float = -1.2
    p_std: float = 1.2
    val_fraction: float = 0.1
    ema_decay: float = 0.999
    warmup: int = 200
    seed: int = 0
    checkpoint_path: str | None = None
    log_every: int = 100

    def __post_init__(self):
        for name in ("batch_size", "learning_rate", "iterations", "p_std"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("ema_decay must lie in [0, 1)")


class Trainer:
    """Optimizer state plus an exponential moving average of the weights."""

    def __init__(self, model: ConvDenoiser, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.optimizer = torch.optim.Adam(model.net.parameters(), lr=cfg.learning_rate)
        self.ema = copy.deepcopy(model.net).eval()
        for p in self.ema.parameters():
            p.requires_grad_(False)
        self.step_count = 0

    def learning_rate(self) -> float:
        # linear warmup, cosine decay to 5% of the peak
        cfg, k = self.cfg, self.step_count
        if k < cfg.warmup:
            return cfg.learning_rate * (k + 1) / cfg.warmup
        frac = min(1.0, (k - cfg.warmup) / max(1, cfg.iterations - cfg.warmup))
        return cfg.learning_rate * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * frac)))

    def update_ema(self):
        # short runs would otherwise keep a large share of the initial weights
        k = self.step_count
        d = min(self.cfg.ema_decay, (1 + k) / (10 + k))
        with torch.no_grad():
            for pe, p in zip(self.ema.parameters(), self.model.net.parameters()):
                pe.mul_(d).add_(p.detach(), alpha=1 - d)

    def finalize(self):
        """Copy the averaged weights into the model."""
        self.model.net.load_state_dict(self.ema.state_dict())
        self.model.invalidate()


def edm_train_step(trainer: Trainer, batch: np.ndarray, rng: np.random.Generator, batch_index: int = 0) -> float:
    """One optimizer step on a batch of normalized grids (B, C, H, W); returns the loss.

    Noise levels follow ``ln sigma ~ N(p_mean, p_std)`` and the per-item loss is
    ``lambda(sigma) |D(x + sigma eps; sigma) - x|^2`` with the EDM weighting
    ``lambda = (sigma^2 + 1) / sigma^2``, averaged over entries.
    """
    cfg = trainer.cfg
    batch = np.asarray(batch, dtype=np.float32)
    if batch.shape[0] == 0:
        raise ConfigError("empty training batch")
    b = batch.shape[0]
    sigma = np.exp(cfg.p_mean + cfg.p_std * rng.standard_normal(b)).astype(np.float32)
    noise = rng.standard_normal(batch.shape).astype(np.float32)
    x = torch.from_numpy(batch)
    s = torch.from_numpy(sigma)
    noisy = x + s.reshape(-1, 1, 1, 1) * torch.from_numpy(noise)
    weight = (s**2 + 1) / s**2
    net = trainer.model.net
    net.train()
    denoised = precondition(net, noisy, s)
    per_item = ((denoised - x) ** 2).mean(dim=(1, 2, 3))
    loss = (weight * per_item).mean()
    if not torch.isfinite(loss):
        raise NumericalError(
            f"non-finite training loss in batch {batch_index} (sigma draws {sigma.tolist()})",
            step=batch_index,
        )
    for group in trainer.optimizer.param_groups:
        group["lr"] = trainer.learning_rate()
    trainer.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    trainer.optimizer.step()
    trainer.step_count += 1
    trainer.update_ema()
    trainer.model.invalidate()
    return float(loss.detach())


def validation_mse(denoiser, data: np.ndarray, sigma: float = 1.0, seed: int = 1234, chunk: int = 256) -> float:
    """Mean squared denoising error per entry at a fixed noise level."""
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    for i in range(0, len(data), chunk):
        x = np.asarray(data[i : i + chunk], dtype=np.float64)
        noisy = x + sigma * rng.standard_normal(x.shape)
        total += float(np.sum((denoiser.evaluate(noisy, sigma) - x) ** 2))
        count += x.size
    return total / count


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    val_mse: float = float("nan")
    seconds: float = 0.0
    n_train: int = 0
    n_val: int = 0


def split_train_val(data: np.ndarray, val_fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    n_val = max(1, int(round(val_fraction * len(data))))
    return data[order[n_val:]], data[order[:n_val]]


def train(model: ConvDenoiser, data: np.ndarray, cfg: TrainConfig, progress=None) -> TrainResult:
    """Train on normalized samples (N, C, H, W); the model ends with EMA weights."""
    torch.manual_seed(cfg.seed)
    train_set, val_set = split_train_val(np.asarray(data, dtype=np.float32), cfg.val_fraction, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    trainer = Trainer(model, cfg)
    result = TrainResult(n_train=len(train_set), n_val=len(val_set))
    start = time.perf_counter()
    order = rng.permutation(len(train_set))
    pos = 0
    for it in range(cfg.iterations):
        if pos + cfg.batch_size > len(order):
            order, pos = rng.permutation(len(train_set)), 0
        idx = order[pos : pos + cfg.batch_size]
        pos += cfg.batch_size
        loss = edm_train_step(trainer, train_set[idx], rng, batch_index=it)
        result.losses.append(loss)
        if progress is not None and (it + 1) % cfg.log_every == 0:
            progress(it + 1, float(np.mean(result.losses[-cfg.log_every :])))
    trainer.finalize()
    result.seconds = time.perf_counter() - start
    result.val_mse = validation_mse(model, val_set, 1.0)
    logger.info("trained %d iterations in %.0fs, val mse %.4f", cfg.iterations, result.seconds, result.val_mse)
    return result
