"""Noise schedule, the cross-attention UNet denoiser and the reconstruction loss."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import autodiff as ad
from .text import LatentTextualFeature

COSINE_OFFSET = 0.008


class ConditioningError(ValueError):
    pass


# -- schedule ------------------------------------------------------------------

@lru_cache(maxsize=64)
def _alpha_bar_table(T: int, s: float) -> tuple[float, ...]:
    f0 = math.cos(s / (1 + s) * math.pi / 2) ** 2
    return tuple(math.cos(((t / T) + s) / (1 + s) * math.pi / 2) ** 2 / f0 for t in range(T))


def alpha_bar(t: int, T: int, s: float = COSINE_OFFSET) -> float:
    if not 0 <= t < T:
        raise IndexError(f"timestep {t} outside [0, {T})")
    return _alpha_bar_table(T, s)[t]


def schedule(t: int, T: int, s: float = COSINE_OFFSET) -> tuple[float, float, float]:
    """(alpha_t, sigma_t, w_t) of the cosine variance-preserving schedule."""
    ab = alpha_bar(t, T, s)
    return math.sqrt(ab), math.sqrt(1.0 - ab), 1.0


def schedule_tensors(t: torch.Tensor, T: int) -> tuple[torch.Tensor, torch.Tensor]:
    table = torch.tensor(_alpha_bar_table(T, COSINE_OFFSET), dtype=torch.float64)
    ab = table[t.long()]
    return ab.sqrt().float(), (1 - ab).sqrt().float()


@dataclass
class NoisySample:
    z: torch.Tensor
    t: torch.Tensor  # [B] integer timesteps
    alpha: torch.Tensor
    sigma: torch.Tensor
    weight: torch.Tensor


def add_noise(z0: torch.Tensor, eps: torch.Tensor, t: torch.Tensor | int, T: int) -> NoisySample:
    if z0.shape != eps.shape:
        raise ad.DimensionError(f"add_noise: {tuple(z0.shape)} vs {tuple(eps.shape)}")
    if isinstance(t, int):
        t = torch.full((z0.shape[0],), t, dtype=torch.long)
    if int(t.min()) < 0 or int(t.max()) >= T:
        raise IndexError("timestep outside [0, T)")
    a, s = schedule_tensors(t, T)
    view = (-1,) + (1,) * (z0.dim() - 1)
    z = a.view(view) * z0 + s.view(view) * eps
    return NoisySample(z, t, a, s, torch.ones_like(a))


# -- network -------------------------------------------------------------------

def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([args.sin(), args.cos()], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int):
        super().__init__()
        self.n1 = nn.GroupNorm(8, cin)
        self.c1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.t = nn.Linear(temb, cout)
        self.n2 = nn.GroupNorm(8, cout)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.c1(F.silu(self.n1(x)))
        h = h + self.t(temb)[:, :, None, None]
        h = self.c2(F.silu(self.n2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Queries from spatial features; keys/values are supplied K[l], V[l]."""

    def __init__(self, channels: int, d_l: int, heads: int):
        super().__init__()
        self.heads, self.d_l = heads, d_l
        self.norm = nn.GroupNorm(8, channels)
        self.q = nn.Linear(channels, d_l, bias=False)
        self.out = nn.Linear(d_l, channels)

    def forward(self, x, K, V):
        b, c, hh, ww = x.shape
        m = K.shape[1]
        dh = self.d_l // self.heads
        q = self.q(self.norm(x).flatten(2).transpose(1, 2))  # [b, hw, d_l]
        q = q.reshape(b, hh * ww, self.heads, dh).transpose(1, 2)
        k = K.reshape(b, m, self.heads, dh).transpose(1, 2)
        v = V.reshape(b, m, self.heads, dh).transpose(1, 2)
        probs = ad.softmax_rows(ad.matmul(q, k.transpose(-1, -2)) * dh ** -0.5)  # [b, heads, hw, m]
        o = ad.matmul(probs, v).transpose(1, 2).reshape(b, hh * ww, self.d_l)
        o = self.out(o).transpose(1, 2).reshape(b, c, hh, ww)
        return x + o, probs


@dataclass
class DenoiserOutput:
    eps_hat: torch.Tensor
    # per cross-attention layer: head-averaged token maps [B, M, H', W']
    attn: list[torch.Tensor] = field(default_factory=list)


class Denoiser(nn.Module):
    """Two-level UNet with one cross-attention block per level on the way
    down and on the way up (four conditioning layers in total)."""

    def __init__(self, in_ch: int = 3, widths: tuple[int, int] = (32, 64), d_l: int = 64,
                 heads: int = 4, T: int = 100):
        super().__init__()
        c1, c2 = widths
        temb = 4 * c1
        self.T, self.d_l, self.n_layers = T, d_l, 4
        self.temb_dim = c1
        self.temb = nn.Sequential(nn.Linear(c1, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.inp = nn.Conv2d(in_ch, c1, 3, padding=1)
        self.down1 = ResBlock(c1, c1, temb)
        self.att1 = CrossAttention(c1, d_l, heads)
        self.pool = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.down2 = ResBlock(c2, c2, temb)
        self.att2 = CrossAttention(c2, d_l, heads)
        self.mid = ResBlock(c2, c2, temb)
        self.up2 = ResBlock(2 * c2, c2, temb)
        self.att3 = CrossAttention(c2, d_l, heads)
        self.upconv = nn.Conv2d(c2, c1, 3, padding=1)
        self.up1 = ResBlock(2 * c1, c1, temb)
        self.att4 = CrossAttention(c1, d_l, heads)
        self.outn = nn.GroupNorm(8, c1)
        self.outc = nn.Conv2d(c1, in_ch, 3, padding=1)
        nn.init.zeros_(self.outc.weight)
        nn.init.zeros_(self.outc.bias)

    def forward(self, z, t, K, V, capture: bool = False) -> DenoiserOutput:
        if K.shape[1] != self.n_layers:
            raise ConditioningError(f"conditioning has {K.shape[1]} layers, denoiser needs {self.n_layers}")
        temb = self.temb(timestep_embedding(t, self.temb_dim).to(z.dtype))
        maps = []

        def attend(block, x, l):
            x, probs = block(x, K[:, l], V[:, l])
            if capture:
                b, _, hh, ww = x.shape
                maps.append(probs.mean(1).transpose(1, 2).reshape(b, -1, hh, ww))
            return x

        h1 = attend(self.att1, self.down1(self.inp(z), temb), 0)
        h2 = attend(self.att2, self.down2(self.pool(h1), temb), 1)
        u2 = attend(self.att3, self.up2(torch.cat([self.mid(h2, temb), h2], 1), temb), 2)
        u1 = F.interpolate(u2, scale_factor=2, mode="nearest")
        u1 = attend(self.att4, self.up1(torch.cat([self.upconv(u1), h1], 1), temb), 3)
        return DenoiserOutput(self.outc(F.silu(self.outn(u1))), maps)


def denoise(model: Denoiser, zs: NoisySample, h: LatentTextualFeature,
            capture_attn: bool = False) -> DenoiserOutput:
    if h.layers != model.n_layers:
        raise ConditioningError(f"conditioning has {h.layers} layers, denoiser needs {model.n_layers}")
    return model(zs.z, zs.t, h.K, h.V, capture=capture_attn)


def diffusion_loss(model: Denoiser, z0: torch.Tensor, h: LatentTextualFeature,
                   gen: torch.Generator | None = None, t: torch.Tensor | None = None,
                   noise: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over the batch of w_t * ||eps - eps_hat||^2 (sum over pixels)."""
    if z0.shape[0] == 0:
        raise ad.ContractError("diffusion_loss: empty batch")
    if h.batch != z0.shape[0]:
        raise ad.DimensionError("diffusion_loss: conditioning batch does not match images")
    b = z0.shape[0]
    if t is None:
        t = torch.randint(0, model.T, (b,), generator=gen)
    if noise is None:
        noise = torch.randn(z0.shape, generator=gen)
    zs = add_noise(z0, noise, t, model.T)
    eps_hat = denoise(model, zs, h).eps_hat
    per = ((noise - eps_hat) ** 2).flatten(1).sum(1) * zs.weight
    return per.mean()
