"""Multi-concept blending in the latent textual space, DDIM/DDPM sampling with
classifier-free guidance, and attention-overlap blending guidance."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import autodiff as ad
from .denoiser import Denoiser, _alpha_bar_table
from .text import LatentTextualFeature, TokenizedPrompt, Vocabulary, tokenize

TokenSet = tuple[int, int]  # (identifier-row position, noun position) in the query


class PlanningError(ValueError):
    pass


class CompatibilityError(ValueError):
    pass


class BlendError(ValueError):
    pass


class DegenerateMapError(ValueError):
    pass


class GuidanceError(ValueError):
    pass


# -- blending ------------------------------------------------------------------

def replace_rows(h: LatentTextualFeature, positions: Sequence[Sequence[int]],
                 k_rows: torch.Tensor, v_rows: torch.Tensor) -> LatentTextualFeature:
    """Per batch item ``i``, overwrite token rows ``positions[i]`` of every layer's
    K and V with ``k_rows[i]``/``v_rows[i]`` (shape [D, r, d_l])."""
    if len(positions) != h.batch:
        raise BlendError("one position list per batch item is required")
    ks, vs = [], []
    for i, pos in enumerate(positions):
        ks.append(ad.scatter_rows(h.K[i], list(pos), k_rows[i]))
        vs.append(ad.scatter_rows(h.V[i], list(pos), v_rows[i]))
    return LatentTextualFeature(torch.stack(ks), torch.stack(vs), list(h.prompts))


@dataclass
class BlendPlan:
    prompt: str
    tokens: TokenizedPrompt
    entries: list[tuple[str, tuple[int, int]]]  # (concept name, (article pos, noun pos))
    records: list = field(default_factory=list)

    def __post_init__(self):
        seen: set[int] = set()
        for name, span in self.entries:
            if any(p < 0 or p >= len(self.tokens.ids) for p in span):
                raise PlanningError(f"span {span} of {name!r} out of range")
            if seen & set(span):
                raise BlendError(f"span {span} of {name!r} overlaps another concept")
            seen |= set(span)

    @property
    def token_sets(self) -> list[TokenSet]:
        return [span for _, span in self.entries]


def plan_blend(prompt: str, concepts: Sequence[str], bank, vocab: Vocabulary, max_len: int = 16,
               backbone_hash: str | None = None,
               spans: dict[str, tuple[int, int]] | None = None) -> BlendPlan:
    """Resolve each concept's (article, noun) span in ``prompt`` and load its record."""
    tp = tokenize(prompt, vocab, max_len)
    entries, records = [], []
    for name in concepts:
        rec = bank.load(name)
        if backbone_hash is not None and rec.backbone_hash != backbone_hash:
            raise CompatibilityError(f"concept {name!r} was extracted from another backbone")
        if spans and name in spans:
            span = tuple(int(p) for p in spans[name])
        else:
            hits = [i for i, t in enumerate(tp.tokens) if t == rec.noun]
            if len(hits) != 1:
                raise PlanningError(f"noun {rec.noun!r} occurs {len(hits)} times in {prompt!r}")
            j = hits[0]
            if j < 1 or tp.tokens[j - 1] not in ("a", "the", rec.identifier):
                raise PlanningError(f"noun {rec.noun!r} has no article or identifier in {prompt!r}")
            span = (j - 1, j)
        entries.append((name, span))
        records.append(rec)
    return BlendPlan(prompt, tp, entries, records)


def article_form(prompt: str, identifiers: Sequence[str], article: str = "a") -> str:
    """The base-flow prompt: each listed identifier word becomes an article (same token count)."""
    ids = set(identifiers)
    return " ".join(article if w in ids else w for w in prompt.split(" "))


def blend_multi(h_b: LatentTextualFeature, plan: BlendPlan) -> LatentTextualFeature:
    """Replace each planned span by its concept rows; all other rows stay as in ``h_b``."""
    if not plan.entries:
        return h_b
    positions = [p for _, span in plan.entries for p in span]
    if len(set(positions)) != len(positions):
        raise BlendError("overlapping concept spans")
    k = torch.cat([torch.as_tensor(r.k_rows) for r in plan.records], dim=1)
    v = torch.cat([torch.as_tensor(r.v_rows) for r in plan.records], dim=1)
    b = h_b.batch
    return replace_rows(h_b, [positions] * b, k.unsqueeze(0).expand(b, *k.shape),
                        v.unsqueeze(0).expand(b, *v.shape))


# -- guidance ------------------------------------------------------------------

def overlap(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Normalized-intersection overlap sum(min(a/|a|, b/|b|)) over the last two axes."""
    if a.shape != b.shape:
        raise ad.DimensionError("overlap: maps differ in shape")
    sa, sb = a.sum(dim=(-2, -1), keepdim=True), b.sum(dim=(-2, -1), keepdim=True)
    if bool((sa <= 0).any()) or bool((sb <= 0).any()):
        raise DegenerateMapError("overlap: attention map has no mass")
    return ad.minimum(a / sa, b / sb).sum(dim=(-2, -1))


def aggregate_maps(attn: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mean token map over layers at the coarsest captured resolution: [B, M, h, w]."""
    if not attn:
        raise GuidanceError("no attention maps captured")
    size = min(a.shape[-1] for a in attn)
    maps = [a if a.shape[-1] == size else F.adaptive_avg_pool2d(a, size) for a in attn]
    return torch.stack(maps).mean(0)


def guidance_terms(maps: torch.Tensor, token_sets: Sequence[TokenSet]) -> tuple[torch.Tensor, torch.Tensor]:
    """Binding term g1 and separation term g2, per batch item.

    ``maps`` is [B, M, h, w]; each token set is (identifier position, noun position).
    """
    b, m = maps.shape[:2]
    n = len(token_sets)
    zero = maps.new_zeros(b)
    if n == 0:
        return zero, zero
    for ts in token_sets:
        if any(p < 0 or p >= m for p in ts):
            raise GuidanceError(f"no attention map for token set {ts}")
    g1, g2 = zero, zero
    for i, (vi, ni) in enumerate(token_sets):
        g1 = g1 - overlap(maps[:, vi], maps[:, ni])
        for j, other in enumerate(token_sets):
            if j == i:
                continue
            for k in other:
                g2 = g2 + overlap(maps[:, vi], maps[:, k]) + overlap(maps[:, k], maps[:, ni])
    return g1, g2 / (2 * n)


@dataclass
class GuidanceConfig:
    scale: float = 1.0
    t_hi: int = 99
    t_lo: int = 20

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")

    @classmethod
    def for_schedule(cls, T: int, scale: float = 1.0, fraction: float = 0.8) -> "GuidanceConfig":
        return cls(scale, T - 1, int(round(T * (1 - fraction))))

    def active(self, t: int) -> bool:
        return self.scale > 0 and self.t_lo <= t <= self.t_hi


def _guidance_pass(model: Denoiser, z: torch.Tensor, t: torch.Tensor, h: LatentTextualFeature,
                   token_sets: Sequence[TokenSet], with_grad: bool):
    if not with_grad:
        with torch.no_grad():
            out = model(z, t, h.K, h.V, capture=True)
            g1, g2 = guidance_terms(aggregate_maps(out.attn), token_sets)
        return out.eps_hat, g1, g2, None
    zg = z.detach().requires_grad_(True)
    with torch.enable_grad():
        out = model(zg, t, h.K.detach(), h.V.detach(), capture=True)
        g1, g2 = guidance_terms(aggregate_maps(out.attn), token_sets)
        total = (g1 + g2).sum()
        grad = torch.autograd.grad(total, zg)[0] if total.requires_grad else torch.zeros_like(z)
    return out.eps_hat.detach(), g1.detach(), g2.detach(), grad


def guided_eps(model: Denoiser, z: torch.Tensor, t: torch.Tensor | int, h: LatentTextualFeature,
               token_sets: Sequence[TokenSet], gcfg: GuidanceConfig) -> torch.Tensor:
    """eps_hat + scale * d(g1 + g2)/dz inside the active window, eps_hat elsewhere."""
    if isinstance(t, int):
        t = torch.full((z.shape[0],), t, dtype=torch.long)
    tt = int(t[0])
    if not gcfg.active(tt):
        with torch.no_grad():
            return model(z, t, h.K, h.V).eps_hat
    eps, _, _, grad = _guidance_pass(model, z, t, h, token_sets, with_grad=True)
    return eps + gcfg.scale * grad


# -- sampling --------------------------------------------------------------------

@dataclass
class SamplerConfig:
    method: str = "ddim"
    steps: int = 100
    eta: float = 0.0
    cfg_scale: float = 6.0
    seed: int = 0
    clip_x0: bool = True

    def __post_init__(self):
        if self.method not in ("ddim", "ddpm"):
            raise ValueError(f"unknown sampler {self.method!r}")

    @property
    def stochasticity(self) -> float:
        return 1.0 if self.method == "ddpm" else self.eta


def timesteps(T: int, steps: int) -> list[int]:
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}]")
    ts = np.linspace(T - 1, 0, steps).round().astype(int)
    return [int(t) for t in dict.fromkeys(ts.tolist())]


def initial_noise(seeds: Sequence[int], shape: tuple[int, ...] = (3, 32, 32)) -> torch.Tensor:
    return torch.stack([torch.randn(shape, generator=torch.Generator().manual_seed(int(s))) for s in seeds])


def update(z: torch.Tensor, eps: torch.Tensor, ab_t: float, ab_prev: float, eta: float = 0.0,
           noise: torch.Tensor | None = None, clip_x0: bool = False) -> torch.Tensor:
    """One DDIM step t -> t_prev (eta=1 gives the DDPM ancestral step)."""
    a_t, s_t = math.sqrt(ab_t), math.sqrt(max(1.0 - ab_t, 0.0))
    x0 = (z - s_t * eps) / a_t
    if clip_x0:
        x0 = x0.clamp(-1, 1)
        if s_t > 0:
            eps = (z - a_t * x0) / s_t
    if eta > 0 and s_t > 0 and ab_prev < 1.0:
        sig = eta * math.sqrt((1 - ab_prev) / (1 - ab_t)) * math.sqrt(1 - ab_t / ab_prev)
    else:
        sig = 0.0
    dir_coef = math.sqrt(max(1.0 - ab_prev - sig * sig, 0.0))
    out = math.sqrt(ab_prev) * x0 + dir_coef * eps
    if sig > 0:
        out = out + sig * noise
    return out


EpsFn = Callable[[torch.Tensor, int, int], tuple[torch.Tensor, dict]]


@dataclass
class SampleResult:
    images: torch.Tensor
    trajectory: list[dict]
    latents: torch.Tensor | None = None  # [steps + 1, B, C, H, W]


def run_loop(eps_fn: EpsFn, z_T: torch.Tensor, T: int, scfg: SamplerConfig,
             seeds: Sequence[int] | None = None, keep_latents: bool = False) -> SampleResult:
    """Generic reverse process; ``eps_fn(z, t, step_index)`` returns (eps, log fields)."""
    table = _alpha_bar_table(T, 0.008)
    ts = timesteps(T, scfg.steps)
    eta = scfg.stochasticity
    gens = None
    if eta > 0:
        seeds = seeds if seeds is not None else range(z_T.shape[0])
        gens = [torch.Generator().manual_seed(int(s) * 7919 + 1) for s in seeds]
    z = z_T
    traj: list[dict] = []
    lat = [z] if keep_latents else None
    for i, t in enumerate(ts):
        eps, fields = eps_fn(z, t, i)
        ab_prev = table[ts[i + 1]] if i + 1 < len(ts) else 1.0
        noise = torch.stack([torch.randn(z.shape[1:], generator=g) for g in gens]) if gens else None
        traj.append({"t": t, "z_norm": z.flatten(1).norm(dim=1).tolist(), **fields})
        with torch.no_grad():
            z = update(z, eps, table[t], ab_prev, eta, noise, scfg.clip_x0)
        if keep_latents:
            lat.append(z)
    return SampleResult(z, traj, torch.stack(lat) if keep_latents else None)


def conditional_eps_fn(model: Denoiser, cond: LatentTextualFeature, uncond: LatentTextualFeature | None,
                       scfg: SamplerConfig, gcfg: GuidanceConfig | None,
                       token_sets: Sequence[TokenSet] = ()) -> EpsFn:
    """Classifier-free guided prediction with blending guidance applied after mixing."""
    gcfg = gcfg or GuidanceConfig(scale=0.0)

    def fn(z, t, i):
        b = z.shape[0]
        tt = torch.full((b,), t, dtype=torch.long)
        guided = gcfg.active(t) and len(token_sets) > 0
        eps_c, g1, g2, grad = _guidance_pass(model, z, tt, cond, token_sets, with_grad=guided)
        if uncond is not None and scfg.cfg_scale != 1.0:
            with torch.no_grad():
                eps_u = model(z, tt, uncond.K, uncond.V).eps_hat
            eps = eps_u + scfg.cfg_scale * (eps_c - eps_u)
        else:
            eps = eps_c
        if guided:
            eps = eps + gcfg.scale * grad
        return eps, {"g1": g1.tolist(), "g2": g2.tolist()}

    return fn


def _expand(h: LatentTextualFeature, b: int) -> LatentTextualFeature:
    if h.batch == b:
        return h
    if h.batch != 1:
        raise ad.DimensionError("conditioning batch must be 1 or match the sample count")
    return LatentTextualFeature(h.K.expand(b, *h.K.shape[1:]), h.V.expand(b, *h.V.shape[1:]),
                                list(h.prompts) * b)


def sample_with(model: Denoiser, cond: LatentTextualFeature, uncond: LatentTextualFeature,
                seeds: Sequence[int], scfg: SamplerConfig, gcfg: GuidanceConfig | None = None,
                token_sets: Sequence[TokenSet] = (), keep_latents: bool = False,
                shape: tuple[int, ...] = (3, 32, 32)) -> SampleResult:
    b = len(seeds)
    cond, uncond = _expand(cond, b), _expand(uncond, b)
    fn = conditional_eps_fn(model, cond, uncond, scfg, gcfg, token_sets)
    return run_loop(fn, initial_noise(seeds, shape), model.T, scfg, seeds, keep_latents)


def sample(backbone, prompt: str, concepts: Sequence[str], bank, scfg: SamplerConfig,
           gcfg: GuidanceConfig | None = None, n: int = 1, keep_latents: bool = False,
           backbone_hash: str | None = None) -> SampleResult:
    """Generate ``n`` images for ``prompt`` with concepts blended from ``bank``.

    Sample ``i`` starts from the unit-normal draw seeded by ``scfg.seed + i``.
    """
    plan = plan_blend(prompt, concepts, bank, backbone.vocab, backbone.cfg.max_len, backbone_hash)
    with torch.no_grad():
        cond = blend_multi(backbone.flow(article_form(prompt, [r.identifier for r in plan.records])), plan)
        uncond = backbone.flow("")
    seeds = [scfg.seed + i for i in range(n)]
    return sample_with(backbone.denoiser, cond, uncond, seeds, scfg, gcfg, plan.token_sets, keep_latents)
