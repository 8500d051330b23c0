"""Small convolutional networks for desk-scale training.

Tensors are NCHW inside the networks; callers convert from NHWC numpy arrays.
"""

from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _groups(ch: int) -> int:
    return 8 if ch % 8 == 0 else 1


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int | None = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout) if emb_dim else None
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.emb is not None:
            h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SmallUNet(nn.Module):
    """U-shaped encoder/decoder, one residual block per level, optional timestep input."""

    def __init__(self, in_ch: int, out_ch: int, widths=(32, 64, 64), time_dim: int | None = None):
        super().__init__()
        self.time_dim = time_dim
        emb_dim = None
        if time_dim:
            emb_dim = time_dim * 2
            self.time_mlp = nn.Sequential(nn.Linear(time_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.stem = nn.Conv2d(in_ch, widths[0], 3, padding=1)
        self.down = nn.ModuleList()
        ch = widths[0]
        skips = []
        for w in widths:
            self.down.append(ResBlock(ch, w, emb_dim))
            skips.append(w)
            ch = w
        self.mid = ResBlock(ch, ch, emb_dim)
        self.up = nn.ModuleList()
        for w in reversed(widths):
            self.up.append(ResBlock(ch + skips.pop(), w, emb_dim))
            ch = w
        self.out_norm = nn.GroupNorm(_groups(ch), ch)
        self.out = nn.Conv2d(ch, out_ch, 3, padding=1)

    def forward(self, x, t=None):
        emb = self.time_mlp(timestep_embedding(t, self.time_dim)) if self.time_dim else None
        h = self.stem(x)
        hs = []
        for i, block in enumerate(self.down):
            h = block(h, emb)
            hs.append(h)
            if i < len(self.down) - 1:
                h = F.avg_pool2d(h, 2)
        h = self.mid(h, emb)
        for i, block in enumerate(self.up):
            skip = hs.pop()
            if h.shape[-1] != skip.shape[-1]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = block(torch.cat([h, skip], dim=1), emb)
        return self.out(F.silu(self.out_norm(h)))


class DilatedNet(nn.Module):
    """Plain stack of dilated 3x3 convolutions at full resolution."""

    def __init__(self, in_ch: int, out_ch: int, width: int = 32, dilations=(1, 2, 4, 8, 4, 2, 1)):
        super().__init__()
        layers: list[nn.Module] = []
        ch = in_ch
        for d in dilations:
            layers += [nn.Conv2d(ch, width, 3, padding=d, dilation=d), nn.BatchNorm2d(width), nn.ReLU()]
            ch = width
        layers.append(nn.Conv2d(ch, out_ch, 1))
        self.body = nn.Sequential(*layers)

    def forward(self, x, t=None):
        return self.body(x)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def to_nchw(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=torch.float32).permute(0, 3, 1, 2).contiguous()


def to_nhwc(x: torch.Tensor):
    return x.permute(0, 2, 3, 1).detach().cpu().numpy().astype("float64")
