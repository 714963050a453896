"""Single-concept fine-tuning with a frozen base flow and a learnable concept flow.

Only the concept-token rows of the concept flow enter the denoiser's
conditioning, so the reconstruction gradient reaches the learnable identifier
embedding and projection copies exclusively through those rows.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import container
from .backbone import Backbone, TrainingError
from .data import Concept, subject_text
from .denoiser import diffusion_loss
from .sampler import replace_rows
from .text import (AlignmentError, LatentTextualFeature, ProjectionSet, TemplatePool,
                   draw_template, tokenize)

log = logging.getLogger(__name__)


@dataclass
class ConceptSpec:
    concept: Concept
    references: np.ndarray  # [n, 3, H, W] in [-1, 1]

    def __post_init__(self):
        if not 3 <= len(self.references) <= 5:
            raise ValueError(f"reference set must hold 3-5 images, got {len(self.references)}")

    @property
    def identifier(self) -> str:
        return self.concept.identifier

    @property
    def noun(self) -> str:
        return self.concept.noun


@dataclass
class FinetuneConfig:
    steps: int = 500
    lr: float = 1e-3  # reference setting at SDXL scale is 1e-5
    optimizer: str = "adam"
    grad_clip: float = 1.0
    batch: int = 4
    prior_batch: int = 4
    prior_weight: float = 1.0
    flip_prob: float = 0.5
    template_mode: str = "variable"
    base_flow: bool = True
    bare_prompt: bool = False
    article: str = "a"
    init: str = "noun"
    init_noise: float = 0.01
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConceptState:
    """Learnable state of one customized concept."""

    name: str
    identifier: str
    noun: str
    embedding: torch.Tensor  # [d_t]
    projections: ProjectionSet
    config: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    def overrides(self, backbone: Backbone) -> dict[int, torch.Tensor]:
        return {backbone.vocab[self.identifier]: self.embedding}

    def tensors(self) -> dict[str, torch.Tensor]:
        return {"embedding": self.embedding.detach(), "w_k": self.projections.w_k.detach(),
                "w_v": self.projections.w_v.detach()}

    def to_bytes(self, config_hash: str = "", backbone_hash: str = "") -> bytes:
        meta = {"kind": "concept-state", "name": self.name, "identifier": self.identifier,
                "noun": self.noun, "config": self.config, "history": self.history,
                "config_hash": config_hash, "backbone_hash": backbone_hash}
        return container.encode(meta, self.tensors())

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple["ConceptState", dict]:
        meta, t = container.decode(blob)
        if meta.get("kind") != "concept-state":
            raise container.CorruptionError("container does not hold a concept state")
        proj = ProjectionSet(torch.from_numpy(t["w_k"]), torch.from_numpy(t["w_v"]))
        state = cls(meta["name"], meta["identifier"], meta["noun"], torch.from_numpy(t["embedding"]),
                    proj, meta["config"], meta["history"])
        return state, meta


def init_state(backbone: Backbone, spec: ConceptSpec, cfg: FinetuneConfig) -> ConceptState:
    table = backbone.encoder.token.weight.detach()
    src = spec.noun if cfg.init == "noun" else cfg.init
    emb = table[backbone.vocab[src]].clone()
    if cfg.init_noise > 0:
        gen = torch.Generator().manual_seed(cfg.seed + 5)
        emb = emb + cfg.init_noise * torch.randn(emb.shape, generator=gen)
    return ConceptState(spec.concept.name, spec.identifier, spec.noun, emb.requires_grad_(True),
                        backbone.projections.learnable_copy(), cfg.to_dict())


def build_dual_prompts(spec: ConceptSpec, pool: TemplatePool, rng: np.random.Generator,
                       mode: str = "variable", article: str = "a") -> tuple[str, str]:
    """(base prompt, concept prompt); templates drawn independently in variable mode."""
    t_b = pool.templates[draw_template(pool, rng, mode)]
    t_c = pool.templates[draw_template(pool, rng, mode)]
    return subject_text(t_b, spec.noun, article), t_c.replace("{}", f"{spec.identifier} {spec.noun}")


def concept_rows(h_c: LatentTextualFeature, noun: str) -> tuple[torch.Tensor, torch.Tensor, list]:
    """(identifier, noun) rows of each item of a concept-flow output: [B, D, 2, d_l]."""
    spans = []
    for tp in h_c.prompts:
        a, n = tp.subject(noun)
        if a not in tp.spans["identifier"]:
            raise AlignmentError(f"concept prompt {tp.tokens} has no identifier before {noun!r}")
        spans.append((a, n))
    idx = torch.tensor(spans, dtype=torch.long)
    k = torch.stack([h_c.K[i][:, idx[i]] for i in range(h_c.batch)])
    v = torch.stack([h_c.V[i][:, idx[i]] for i in range(h_c.batch)])
    return k, v, spans


def base_spans(h_b: LatentTextualFeature, noun: str) -> list[tuple[int, int]]:
    spans = []
    for tp in h_b.prompts:
        a, n = tp.subject(noun)
        if a not in tp.spans["article"]:
            raise AlignmentError(f"base prompt {tp.tokens} has no article before {noun!r}")
        spans.append((a, n))
    return spans


def train_blend(h_b: LatentTextualFeature, k_rows: torch.Tensor, v_rows: torch.Tensor,
                noun: str) -> LatentTextualFeature:
    """Put concept rows in place of each base prompt's (article, noun) rows."""
    return replace_rows(h_b.detach(), base_spans(h_b, noun), k_rows, v_rows)


def prior_loss(backbone: Backbone, projections: ProjectionSet, images: torch.Tensor, noun: str,
               gen: torch.Generator | None = None) -> torch.Tensor:
    """Reconstruction of real class images under "A <noun>." through the given projections."""
    if len(images) == 0:
        raise ValueError("prior_loss: empty prior set")
    h = backbone.flow([f"A {noun}."] * len(images), projections)
    return diffusion_loss(backbone.denoiser, images, h, gen=gen)


def _conditioning(backbone: Backbone, state: ConceptState, spec: ConceptSpec, cfg: FinetuneConfig,
                  pool: TemplatePool, rng: np.random.Generator, n: int) -> LatentTextualFeature:
    pairs = [build_dual_prompts(spec, pool, rng, cfg.template_mode, cfg.article) for _ in range(n)]
    ov = state.overrides(backbone)
    if not cfg.base_flow:
        prompts = [f"{spec.identifier} {spec.noun}"] * n if cfg.bare_prompt else [c for _, c in pairs]
        return backbone.flow(prompts, state.projections, ov)
    with torch.no_grad():
        h_b = backbone.flow([b for b, _ in pairs])
    h_c = backbone.flow([c for _, c in pairs], state.projections, ov)
    k, v, _ = concept_rows(h_c, spec.noun)
    return train_blend(h_b, k, v, spec.noun)


def finetune_concept(backbone: Backbone, spec: ConceptSpec, priors: np.ndarray | None,
                     cfg: FinetuneConfig, pool: TemplatePool | None = None) -> ConceptState:
    """Tune the identifier embedding and a private copy of the K/V projections."""
    pool = pool or TemplatePool()
    state = init_state(backbone, spec, cfg)
    params = [state.embedding, *state.projections.parameters()]
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=cfg.lr)
    elif cfg.optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=cfg.lr)
    else:
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xF1]))
    gen = torch.Generator().manual_seed(cfg.seed + 11)
    refs = torch.from_numpy(np.asarray(spec.references, dtype=np.float32))
    prior_t = torch.from_numpy(np.asarray(priors, dtype=np.float32)) if priors is not None else None
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(len(refs), size=cfg.batch)
        imgs = refs[idx]
        flip = torch.from_numpy(rng.random(cfg.batch) < cfg.flip_prob)
        imgs = torch.where(flip[:, None, None, None], imgs.flip(-1), imgs)
        cond = _conditioning(backbone, state, spec, cfg, pool, rng, cfg.batch)
        rec = diffusion_loss(backbone.denoiser, imgs, cond, gen=gen)
        loss = rec
        pl = torch.zeros(())
        if cfg.prior_weight > 0 and prior_t is not None:
            pidx = rng.integers(len(prior_t), size=cfg.prior_batch)
            pl = prior_loss(backbone, state.projections, prior_t[pidx], spec.noun, gen)
            loss = rec + cfg.prior_weight * pl
        if not torch.isfinite(loss):
            raise TrainingError(f"fine-tuning diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        state.history.append({"step": step, "loss": rec.item(), "prior": pl.item()})
        if step % 100 == 0:
            log.info("finetune %s step %d rec %.2f prior %.2f", spec.concept.name, step, rec.item(), pl.item())
    return state


def ablation_no_base_flow(backbone: Backbone, spec: ConceptSpec, priors: np.ndarray | None,
                          cfg: FinetuneConfig, bare: bool = False) -> ConceptState:
    """Fine-tune with the concept flow as the whole conditioning (no Blend).

    ``bare`` trains on the PAD-filled "V* <noun>" prompt instead of templates.
    """
    from dataclasses import replace
    return finetune_concept(backbone, spec, priors, replace(cfg, base_flow=False, bare_prompt=bare))


def reconstruction_loss(backbone: Backbone, cond: LatentTextualFeature, images: np.ndarray,
                        draws: int = 32, seed: int = 1234) -> float:
    """Mean diffusion loss over fixed (t, noise) draws for each image.

    Timesteps are stratified over [0, T) so repeated evaluations are comparable.
    """
    imgs = torch.from_numpy(np.asarray(images, dtype=np.float32))
    n = len(imgs)
    gen = torch.Generator().manual_seed(seed)
    total = 0.0
    with torch.no_grad():
        for j in range(draws):
            t = torch.full((n,), int((j + 0.5) * backbone.T / draws), dtype=torch.long)
            noise = torch.randn(imgs.shape, generator=gen)
            h = LatentTextualFeature(cond.K.expand(n, *cond.K.shape[1:]), cond.V.expand(n, *cond.V.shape[1:]))
            total += float(diffusion_loss(backbone.denoiser, imgs, h, t=t, noise=noise))
    return total / draws
