"""Small encoder-decoder convolutional network shared by the denoisers and the segmenter."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class UNetArch:
    in_channels: int
    out_channels: int
    widths: tuple = (32, 32, 64)
    emb_inputs: int = 0  # number of scalar inputs embedded sinusoidally (t, delta)
    emb_dim: int = 64
    padding_mode: str = "zeros"
    groups: int = 8

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


def sinusoidal_embedding(x, dim, max_period=10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=x.dtype, device=x.device) / half)
    args = x.to(freqs.dtype)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def wrap_pad(x):
    """One-pixel circular padding (cheaper than F.pad's circular mode on CPU)."""
    x = torch.cat([x[..., -1:, :], x, x[..., :1, :]], dim=-2)
    return torch.cat([x[..., -1:], x, x[..., :1]], dim=-1)


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, arch: UNetArch, n_convs):
        super().__init__()
        self.circular = arch.padding_mode == "circular"
        pad = 0 if self.circular else 1
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=pad)
        self.norm1 = nn.GroupNorm(min(arch.groups, cout), cout)
        self.bias = nn.Linear(arch.emb_dim, cout) if arch.emb_inputs else None
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=pad) if n_convs > 1 else None
        self.norm2 = nn.GroupNorm(min(arch.groups, cout), cout) if n_convs > 1 else None

    def _conv(self, conv, x):
        return conv(wrap_pad(x) if self.circular else x)

    def forward(self, x, emb=None):
        h = self.norm1(self._conv(self.conv1, x))
        if self.bias is not None:
            h = h + self.bias(emb)[:, :, None, None]
        h = F.silu(h)
        if self.conv2 is not None:
            h = F.silu(self.norm2(self._conv(self.conv2, h)))
        return h


class UNet(nn.Module):
    """Two-level encoder-decoder with skip connections.

    Downsampling is 2x2 average pooling and upsampling is nearest-neighbour,
    so with circular padding the network commutes with circular shifts by
    multiples of 4 pixels.
    """

    def __init__(self, arch: UNetArch):
        super().__init__()
        self.arch = arch
        w0, w1, w2 = arch.widths
        if arch.emb_inputs:
            self.embed = nn.Sequential(
                nn.Linear(arch.emb_dim * arch.emb_inputs, arch.emb_dim), nn.SiLU(),
                nn.Linear(arch.emb_dim, arch.emb_dim))
        self.down0 = ConvBlock(arch.in_channels, w0, arch, 1)
        self.down1 = ConvBlock(w0, w1, arch, 2)
        self.mid = ConvBlock(w1, w2, arch, 2)
        self.up1 = ConvBlock(w2 + w1, w1, arch, 2)
        self.up0 = ConvBlock(w1 + w0, w0, arch, 1)
        self.head = nn.Conv2d(w0, arch.out_channels, 1)

    def forward(self, x, scalars=None):
        emb = None
        if self.arch.emb_inputs:
            parts = [sinusoidal_embedding(s, self.arch.emb_dim) for s in scalars]
            emb = self.embed(torch.cat(parts, dim=1).to(x.dtype))
        h0 = self.down0(x, emb)
        h1 = self.down1(F.avg_pool2d(h0, 2), emb)
        m = self.mid(F.avg_pool2d(h1, 2), emb)
        u = self.up1(torch.cat([F.interpolate(m, scale_factor=2.0), h1], 1), emb)
        u = self.up0(torch.cat([F.interpolate(u, scale_factor=2.0), h0], 1), emb)
        return self.head(u)


def layout_manifest(module: nn.Module):
    """[(name, shape, offset)] for every parameter, in state-dict order."""
    out, off = [], 0
    for name, p in module.state_dict().items():
        out.append((name, tuple(p.shape), off))
        off += p.numel()
    return out


def to_blob(module: nn.Module) -> np.ndarray:
    parts = [p.detach().cpu().to(torch.float32).reshape(-1).numpy() for p in module.state_dict().values()]
    return np.concatenate(parts).astype("<f4") if parts else np.zeros(0, "<f4")


def blob_size(module: nn.Module) -> int:
    return sum(p.numel() for p in module.state_dict().values())


def load_blob(module: nn.Module, blob) -> None:
    blob = np.asarray(blob, dtype="<f4")
    if blob.size != blob_size(module):
        raise ValueError(f"parameter blob has {blob.size} values, architecture needs {blob_size(module)}")
    state = module.state_dict()
    new = {}
    for name, shape, off in layout_manifest(module):
        n = int(np.prod(shape)) if shape else 1
        new[name] = torch.from_numpy(blob[off:off + n].astype(np.float32).reshape(shape)).to(state[name].dtype)
    module.load_state_dict(new)


def build_unet(arch: UNetArch, seed: int) -> UNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return UNet(arch)
