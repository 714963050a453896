"""The pretrained text-to-image backbone and its joint pretraining loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import container
from .data import Corpus
from .denoiser import Denoiser, _alpha_bar_table, diffusion_loss
from .text import (LatentTextualFeature, ProjectionSet, TextEncoder, Vocabulary,
                   encoding_flow)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class BackboneConfig:
    d_t: int = 64
    d_l: int = 64
    max_len: int = 16
    encoder_layers: int = 2
    heads: int = 4
    causal: bool = False
    widths: tuple[int, int] = (32, 64)
    T: int = 100


class Backbone:
    """Frozen encoder, pretrained projections and denoiser, plus the vocabulary."""

    def __init__(self, vocab: Vocabulary, cfg: BackboneConfig | None = None, seed: int = 0):
        self.cfg = cfg = cfg or BackboneConfig()
        self.vocab = vocab
        torch.manual_seed(seed)
        gen = torch.Generator().manual_seed(seed)
        self.encoder = TextEncoder(len(vocab), cfg.d_t, cfg.max_len, cfg.encoder_layers,
                                   cfg.heads, cfg.causal)
        self.projections = ProjectionSet.init(4, cfg.d_t, cfg.d_l, gen)
        self.denoiser = Denoiser(3, tuple(cfg.widths), cfg.d_l, cfg.heads, cfg.T)
        self.freeze()

    @property
    def T(self) -> int:
        return self.cfg.T

    def freeze(self) -> None:
        for p in list(self.encoder.parameters()) + list(self.denoiser.parameters()):
            p.requires_grad_(False)
        self.projections = self.projections.frozen_copy()
        self.encoder.eval()
        self.denoiser.eval()

    def flow(self, prompts: Sequence[str] | str, projections: ProjectionSet | None = None,
             overrides: Mapping[int, torch.Tensor] | None = None) -> LatentTextualFeature:
        return encoding_flow(prompts, projections or self.projections, self.encoder, self.vocab, overrides)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}
        out["projections.w_k"] = self.projections.w_k.detach()
        out["projections.w_v"] = self.projections.w_v.detach()
        out.update({f"denoiser.{k}": v for k, v in self.denoiser.state_dict().items()})
        return out

    def load_state_tensors(self, tensors: Mapping[str, torch.Tensor]) -> None:
        enc = {k[len("encoder."):]: v for k, v in tensors.items() if k.startswith("encoder.")}
        den = {k[len("denoiser."):]: v for k, v in tensors.items() if k.startswith("denoiser.")}
        self.encoder.load_state_dict(enc)
        self.denoiser.load_state_dict(den)
        self.projections = ProjectionSet(tensors["projections.w_k"].clone(),
                                         tensors["projections.w_v"].clone())
        self.freeze()

    def config_dict(self) -> dict:
        d = asdict(self.cfg)
        d["widths"] = list(d["widths"])
        return d

    def weights_hash(self) -> str:
        return container.tensors_hash(self.state_tensors())

    def to_bytes(self, config_hash: str = "", extra: Mapping | None = None) -> bytes:
        tensors = self.state_tensors()
        sections: dict[str, list[str]] = {}
        for name in sorted(tensors):
            sections.setdefault(name.split(".")[0], []).append(name)
        tensors["schedule.alpha_bar"] = np.asarray(_alpha_bar_table(self.T, 0.008), dtype=np.float64)
        sections["schedule"] = ["schedule.alpha_bar"]
        meta = {"kind": "backbone", "config": self.config_dict(), "vocab": self.vocab.tokens,
                "nouns": sorted(self.vocab.nouns), "sections": sections,
                "schedule": {"T": self.T, "s": 0.008}, "config_hash": config_hash,
                "weights_hash": self.weights_hash(), **(extra or {})}
        return container.encode(meta, tensors)

    def save(self, path: str | Path, config_hash: str = "", extra: Mapping | None = None) -> str:
        blob = self.to_bytes(config_hash, extra)
        Path(path).write_bytes(blob)
        return container.sha256(blob)

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple["Backbone", dict]:
        meta, tensors = container.decode(blob)
        if meta.get("kind") != "backbone":
            raise container.CorruptionError("container does not hold a backbone")
        cfg = dict(meta["config"])
        cfg["widths"] = tuple(cfg["widths"])
        bb = cls(Vocabulary(meta["vocab"], meta["nouns"]), BackboneConfig(**cfg))
        bb.load_state_tensors({k: torch.from_numpy(v) for k, v in tensors.items()
                               if not k.startswith("schedule.")})
        if bb.weights_hash() != meta["weights_hash"]:
            raise container.CorruptionError("backbone weights do not match their recorded hash")
        return bb, meta

    @classmethod
    def load(cls, path: str | Path) -> tuple["Backbone", dict]:
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class PretrainConfig:
    seed: int = 0
    max_steps: int = 8000
    batch: int = 32
    lr: float = 1e-3
    warmup: int = 100
    eval_every: int = 500
    patience: int = 3
    val_size: int = 256
    grad_clip: float = 1.0
    lr_floor: float = 0.05


def _lr_at(step: int, cfg: PretrainConfig) -> float:
    """Linear warmup, then cosine decay to ``lr_floor * lr`` at ``max_steps``."""
    if step <= cfg.warmup:
        return cfg.lr * step / cfg.warmup
    frac = (step - cfg.warmup) / max(1, cfg.max_steps - cfg.warmup)
    return cfg.lr * (cfg.lr_floor + (1 - cfg.lr_floor) * 0.5 * (1 + math.cos(math.pi * frac)))


def _validation_loss(bb: Backbone, images, captions, t, noise) -> float:
    with torch.no_grad():
        losses = []
        for i in range(0, len(captions), 64):
            h = bb.flow(captions[i:i + 64])
            losses.append(float(diffusion_loss(bb.denoiser, images[i:i + 64], h,
                                               t=t[i:i + 64], noise=noise[i:i + 64])) * len(h.prompts))
        return sum(losses) / len(captions)


def pretrain(corpus: Corpus, vocab: Vocabulary, cfg: PretrainConfig,
             bb_cfg: BackboneConfig | None = None) -> tuple[Backbone, list[dict]]:
    """Joint encoder + projection + denoiser training on the pretraining split.

    Stops on validation plateau (``patience`` evaluations without improvement)
    or at ``max_steps``; the best validation checkpoint is kept.
    """
    bb = Backbone(vocab, bb_cfg, seed=cfg.seed)
    proj = bb.projections.learnable_copy()
    for p in list(bb.encoder.parameters()) + list(bb.denoiser.parameters()):
        p.requires_grad_(True)
    bb.encoder.train()
    bb.denoiser.train()
    params = list(bb.encoder.parameters()) + proj.parameters() + list(bb.denoiser.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=0.0)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x9E]))
    gen = torch.Generator().manual_seed(cfg.seed + 17)

    n = len(corpus.captions)
    val_idx = np.arange(n - cfg.val_size, n)
    train_n = n - cfg.val_size
    vgen = torch.Generator().manual_seed(cfg.seed + 99)
    val_imgs = torch.from_numpy(corpus.images[val_idx])
    val_caps = [corpus.captions[i] for i in val_idx]
    val_t = torch.randint(0, bb.T, (cfg.val_size,), generator=vgen)
    val_noise = torch.randn(val_imgs.shape, generator=vgen)

    history: list[dict] = []
    initial = _validation_loss(bb, val_imgs, val_caps, val_t, val_noise) if cfg.max_steps else math.inf
    best, best_state, bad = math.inf, None, 0
    start = time.time()
    for step in range(1, cfg.max_steps + 1):
        idx = rng.integers(train_n, size=cfg.batch)
        imgs = torch.from_numpy(corpus.images[idx])
        # relational captions fix left-to-right order, so only single subjects flip
        single = np.array([len(corpus.objects[i]) == 1 for i in idx])
        flip = torch.from_numpy(single & (rng.random(cfg.batch) < 0.5))
        imgs = torch.where(flip[:, None, None, None], imgs.flip(-1), imgs)
        h = encoding_flow([corpus.captions[i] for i in idx], proj, bb.encoder, vocab)
        loss = diffusion_loss(bb.denoiser, imgs, h, gen=gen)
        if not torch.isfinite(loss):
            raise TrainingError(f"pretraining diverged at step {step}")
        for g in opt.param_groups:
            g["lr"] = _lr_at(step, cfg)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            bb.projections = proj
            bb.encoder.eval()
            bb.denoiser.eval()
            val = _validation_loss(bb, val_imgs, val_caps, val_t, val_noise)
            history.append({"step": step, "train_loss": loss.item(), "val_loss": val,
                            "elapsed": time.time() - start})
            log.info("pretrain step %d loss %.2f val %.2f", step, loss.item(), val)
            if val < best - 1e-3 * abs(best if math.isfinite(best) else val):
                best, bad = val, 0
                best_state = {k: v.detach().clone() for k, v in
                              {**{f"encoder.{k}": v for k, v in bb.encoder.state_dict().items()},
                               "projections.w_k": proj.w_k, "projections.w_v": proj.w_v,
                               **{f"denoiser.{k}": v for k, v in bb.denoiser.state_dict().items()}}.items()}
            else:
                bad += 1
            bb.encoder.train()
            bb.denoiser.train()
            if bad >= cfg.patience:
                break
    if cfg.max_steps and not best < initial:
        raise TrainingError(f"validation loss never improved on its initial value {initial:.2f}")
    if best_state is None:
        bb.projections = proj
        best_state = bb.state_tensors()
        best_state = {k: v.detach().clone() for k, v in best_state.items()}
    bb.load_state_tensors(best_state)
    return bb, history
