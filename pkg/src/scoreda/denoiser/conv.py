"""Trainable convolutional denoiser with EDM preconditioning.

``D(x; sigma) = c_skip x + c_out F(c_in x, c_noise)`` where ``F`` is a small
three-level encoder-decoder with skip connections and SiLU activations.
Data are assumed standardized, so ``sigma_data = 1``.
"""

from __future__ import annotations

import copy
import json
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigError, DomainError, IngestError
from ..fields import ChannelSpec, NormStats
from .base import Denoiser

__all__ = ["UNet", "ConvDenoiser", "edm_coefficients", "save_checkpoint", "load_checkpoint"]

SIGMA_DATA = 1.0


def edm_coefficients(sigma, sigma_data: float = SIGMA_DATA):
    """(c_skip, c_out, c_in, c_noise) for noise level ``sigma``."""
    s2 = sigma**2 + sigma_data**2
    c_skip = sigma_data**2 / s2
    c_out = sigma * sigma_data / s2**0.5
    c_in = 1 / s2**0.5
    c_noise = (torch.log(sigma) if torch.is_tensor(sigma) else np.log(sigma)) / 4
    return c_skip, c_out, c_in, c_noise


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, emb_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(x))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class UNet(nn.Module):
    """Encoder-decoder over three resolutions (H, H/2, H/4)."""

    def __init__(self, channels: int = 1, base: int = 16, emb_dim: int = 64):
        super().__init__()
        self.config = {"channels": channels, "base": base, "emb_dim": emb_dim}
        b = base
        self.embed = nn.Sequential(nn.Linear(1, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.inp = nn.Conv2d(channels, b, 3, padding=1)
        self.enc0 = ResBlock(b, b, emb_dim)
        self.enc1 = ResBlock(b, 2 * b, emb_dim)
        self.mid1 = ResBlock(2 * b, 2 * b, emb_dim)
        self.mid2 = ResBlock(2 * b, 2 * b, emb_dim)
        self.dec1 = ResBlock(4 * b, 2 * b, emb_dim)
        self.dec0 = ResBlock(3 * b, b, emb_dim)
        self.out = nn.Conv2d(b, channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x, c_noise):
        emb = self.embed(c_noise.reshape(-1, 1))
        h0 = self.enc0(self.inp(x), emb)
        h1 = self.enc1(F.avg_pool2d(h0, 2), emb)
        m = self.mid2(self.mid1(F.avg_pool2d(h1, 2), emb), emb)
        u = self.dec1(torch.cat([F.interpolate(m, scale_factor=2.0), h1], 1), emb)
        u = self.dec0(torch.cat([F.interpolate(u, scale_factor=2.0), h0], 1), emb)
        return self.out(F.silu(u))


def precondition(net: nn.Module, x: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """EDM-preconditioned denoiser; ``sigma`` has one entry per batch item."""
    sigma = sigma.reshape(-1, 1, 1, 1)
    c_skip, c_out, c_in, c_noise = edm_coefficients(sigma)
    return c_skip * x + c_out * net(c_in * x, c_noise.reshape(-1))


class ConvDenoiser(Denoiser):
    def __init__(self, shape, base: int = 16, emb_dim: int = 64, net: UNet | None = None, norm: NormStats | None = None,
                 channels=None):
        c, h, w = shape
        if h % 4 or w % 4:
            raise ConfigError(f"grid dimensions must be divisible by 4, got {h}x{w}")
        self.shape = (c, h, w)
        self.net = net if net is not None else UNet(c, base, emb_dim)
        self.norm = norm if norm is not None else NormStats.identity(c)
        self.channels = tuple(channels) if channels else tuple(ChannelSpec(f"ch{i}") for i in range(c))
        self._eval_net = None

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def invalidate(self):
        """Drop the cached float64 copy after the weights change."""
        self._eval_net = None

    def _inference_net(self):
        if self._eval_net is None:
            net = copy.deepcopy(self.net).double().eval()
            for p in net.parameters():
                p.requires_grad_(False)
            self._eval_net = net
        return self._eval_net

    def _prepare(self, x, sigma):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-3:] != self.shape:
            raise ConfigError(f"state shape {x.shape[-3:]} does not match model {self.shape}")
        if sigma < 0:
            raise DomainError("sigma must be non-negative")
        lead = x.shape[:-3]
        xt = torch.from_numpy(np.ascontiguousarray(x.reshape(-1, *self.shape)))
        st = torch.full((xt.shape[0],), float(sigma), dtype=torch.float64)
        return xt, st, lead

    def evaluate(self, x, sigma):
        if sigma == 0:
            return np.array(x, dtype=np.float64)
        xt, st, lead = self._prepare(x, sigma)
        with torch.no_grad():
            out = precondition(self._inference_net(), xt, st)
        return out.numpy().reshape(*lead, *self.shape)

    def evaluate_with_vjp(self, x, sigma):
        if sigma == 0:
            return np.array(x, dtype=np.float64), lambda ct: np.array(ct, dtype=np.float64)
        xt, st, lead = self._prepare(x, sigma)
        xt.requires_grad_(True)
        with torch.enable_grad():
            out = precondition(self._inference_net(), xt, st)

        def vjp(ct):
            ct = torch.from_numpy(np.ascontiguousarray(np.asarray(ct, dtype=np.float64).reshape(out.shape)))
            (g,) = torch.autograd.grad(out, xt, ct, retain_graph=True)
            return g.numpy().reshape(*lead, *self.shape)

        return out.detach().numpy().reshape(*lead, *self.shape), vjp

    def vjp(self, x, sigma, cotangent):
        return self.evaluate_with_vjp(x, sigma)[1](cotangent)


# Checkpoint: "SDAD", u32 version, u32 header length, JSON header, float32 weight blob.
_CKPT_MAGIC = b"SDAD"
_CKPT_VERSION = 1


def save_checkpoint(path, model: ConvDenoiser, extra: dict | None = None) -> None:
    sections, blobs, offset = [], [], 0
    for name, tensor in model.net.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        sections.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = {
        "arch": {"kind": "unet3", "shape": list(model.shape), **model.net.config},
        "norm": {"mean": list(model.norm.mean), "std": list(model.norm.std)},
        "channels": [
            {"name": c.name, "transform": c.transform, "shift": c.shift, "units": c.units} for c in model.channels
        ],
        "sections": sections,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(_CKPT_MAGIC + struct.pack("<II", _CKPT_VERSION, len(head)) + head + b"".join(blobs))


def load_checkpoint(path) -> ConvDenoiser:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise IngestError(f"{path}: not a denoiser checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != _CKPT_VERSION:
        raise IngestError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + n].decode("utf-8"))
    blob = np.frombuffer(raw, dtype="<f4", offset=12 + n)
    arch = header["arch"]
    model = ConvDenoiser(
        tuple(arch["shape"]),
        base=arch["base"],
        emb_dim=arch["emb_dim"],
        norm=NormStats(header["norm"]["mean"], header["norm"]["std"]),
        channels=[ChannelSpec(**c) for c in header["channels"]],
    )
    state = {}
    for sec in header["sections"]:
        arr = blob[sec["offset"] : sec["offset"] + sec["count"]].reshape(sec["shape"])
        state[sec["name"]] = torch.from_numpy(arr.astype(np.float32))
    model.net.load_state_dict(state)
    return model
