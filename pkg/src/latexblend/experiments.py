"""Artifact pipeline (cached by config hash) and the behavioral experiment drivers.

Every artifact lives under ``home`` and carries the hash of the config sections
that produced it; a cached file is reused only when that hash matches.
"""
from __future__ import annotations

import logging
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import container
from .backbone import Backbone, pretrain
from .bank import ConceptBank, ConceptRecord, extract, position_similarity
from .config import RunConfig, default_home
from .report import Report, timed
from .customization import ConceptSpec, ConceptState, finetune_concept, reconstruction_loss, init_state
from .data import NOUNS, Concept, Corpus, make_vocabulary, synth_dataset
from .metrics import (PresenceOracle, TrajectoryPair, deviation_magnitude, layout_similarity,
                      presence_eval, train_presence_oracle)
from .sampler import (GuidanceConfig, SamplerConfig, SampleResult, article_form, blend_multi,
                      plan_blend, sample_with)
from .text import TEMPLATES, LatentTextualFeature, ProjectionSet

log = logging.getLogger(__name__)

VARIANTS = {
    "standard": {},
    "no-base-flow": {"base_flow": False},
    "fixed-template": {"template_mode": "fixed"},
}


class HashMismatchError(RuntimeError):
    pass


def _check_hash(meta: dict, want: str, what: str, force: bool) -> None:
    got = meta.get("config_hash", "")
    if got != want and not force:
        raise HashMismatchError(f"{what} was produced by config {got}, expected {want}")


class World:
    """Lazily built, disk-cached artifacts for one run configuration."""

    def __init__(self, cfg: RunConfig, home: str | Path | None = None, force: bool = False):
        self.cfg = cfg
        self.home = Path(home) if home is not None else default_home()
        self.home.mkdir(parents=True, exist_ok=True)
        self.force = force
        self.vocab = make_vocabulary()
        self._corpus: Corpus | None = None
        self._data: dict | None = None
        self._backbone: Backbone | None = None
        self._backbone_meta: dict = {}
        self._oracle: PresenceOracle | None = None
        self._states: dict[tuple[str, str], ConceptState] = {}

    # -- hashes ----------------------------------------------------------------------

    @property
    def corpus_hash(self) -> str:
        return self.cfg.hash("corpus")

    @property
    def backbone_config_hash(self) -> str:
        return self.cfg.hash("corpus", "backbone", "pretrain")

    @property
    def oracle_config_hash(self) -> str:
        return self.cfg.hash("corpus", "oracle")

    def state_config_hash(self, variant: str) -> str:
        return container.config_hash({"base": self.cfg.hash("corpus", "backbone", "pretrain", "finetune"),
                                      "variant": variant})

    # -- artifacts ----------------------------------------------------------------------

    @property
    def concepts(self) -> tuple[Concept, ...]:
        return tuple(self.cfg.corpus.concepts)

    def concept(self, name: str) -> Concept:
        for c in self.concepts:
            if c.name == name or c.identifier == name:
                return c
        raise KeyError(f"unknown concept {name!r}")

    def corpus(self) -> Corpus:
        if self._corpus is None:
            t0 = time.time()
            self._corpus = synth_dataset(self.cfg.corpus, self.vocab)
            log.info("corpus built in %.1fs", time.time() - t0)
        return self._corpus

    def concept_data(self) -> dict:
        """References and class priors (small; cached separately from the corpus)."""
        if self._data is None:
            path = self.home / f"data-{self.corpus_hash}.npz"
            if path.exists():
                z = np.load(path)
                self._data = {"references": {k[4:]: z[k] for k in z.files if k.startswith("ref:")},
                              "priors": {k[6:]: z[k] for k in z.files if k.startswith("prior:")}}
            else:
                c = self.corpus()
                self._data = {"references": c.references, "priors": c.priors}
                arrays = {**{f"ref:{k}": v for k, v in c.references.items()},
                          **{f"prior:{k}": v for k, v in c.priors.items()}}
                np.savez(path, **arrays)
        return self._data

    def backbone(self) -> Backbone:
        if self._backbone is None:
            path = self.home / f"backbone-{self.backbone_config_hash}.ltxb"
            if path.exists():
                bb, meta = Backbone.load(path)
                _check_hash(meta, self.backbone_config_hash, "backbone", self.force)
            else:
                bb, hist = pretrain(self.corpus(), self.vocab, self.cfg.pretrain, self.cfg.backbone)
                bb.save(path, self.backbone_config_hash, {"history": hist})
                bb, meta = Backbone.load(path)
            self._backbone, self._backbone_meta = bb, meta
        return self._backbone

    @property
    def backbone_hash(self) -> str:
        self.backbone()
        return self._backbone_meta["weights_hash"]

    @property
    def pretrain_history(self) -> list[dict]:
        self.backbone()
        return self._backbone_meta.get("history", [])

    def oracle(self) -> PresenceOracle:
        if self._oracle is None:
            path = self.home / f"oracle-{self.oracle_config_hash}.ltxb"
            if path.exists():
                oracle, meta = PresenceOracle.from_bytes(path.read_bytes())
                _check_hash(meta, self.oracle_config_hash, "oracle", self.force)
            else:
                oc = self.cfg.oracle
                oracle = train_presence_oracle(self.concepts, oc.seed, oc.train_size, oc.test_size,
                                               oc.steps, oc.batch, oc.min_accuracy)
                path.write_bytes(oracle.to_bytes(self.oracle_config_hash))
            self._oracle = oracle
        return self._oracle

    def spec(self, concept: Concept) -> ConceptSpec:
        return ConceptSpec(concept, self.concept_data()["references"][concept.name])

    def state(self, name: str, variant: str = "standard") -> ConceptState:
        concept = self.concept(name)
        key = (concept.name, variant)
        if key not in self._states:
            h = self.state_config_hash(variant)
            path = self.home / "states" / f"{variant}-{concept.name}-{h}.ltxb"
            if path.exists():
                st, meta = ConceptState.from_bytes(path.read_bytes())
                _check_hash(meta, h, f"concept state {concept.name}", self.force)
                if meta["backbone_hash"] != self.backbone_hash and not self.force:
                    raise HashMismatchError(f"state {concept.name} was tuned on another backbone")
            else:
                cfg = replace(self.cfg.finetune, **VARIANTS[variant])
                bb = self.backbone()
                t0 = time.time()
                st = finetune_concept(bb, self.spec(concept), self.concept_data()["priors"][concept.noun], cfg)
                log.info("fine-tuned %s (%s) in %.0fs", concept.name, variant, time.time() - t0)
                path.parent.mkdir(exist_ok=True)
                path.write_bytes(st.to_bytes(h, self.backbone_hash))
            self._states[key] = st
        return self._states[key]

    def record(self, name: str, variant: str = "standard", template: str | None = None) -> ConceptRecord:
        kw = {"template": template} if template else {}
        return extract(self.state(name, variant), self.backbone(), backbone_hash=self.backbone_hash,
                       config_hash=self.state_config_hash(variant), **kw)

    def bank(self, variant: str = "standard", names: Sequence[str] | None = None) -> ConceptBank:
        """Bank of records extracted with the default template."""
        bank = ConceptBank(self.home / f"bank-{variant}-{self.state_config_hash(variant)}")
        for c in self.concepts if names is None else [self.concept(n) for n in names]:
            if c.name not in bank:
                bank.save(self.record(c.name, variant))
        return bank

    # -- generation helpers ----------------------------------------------------------------

    def sampler_config(self, **kw) -> SamplerConfig:
        return replace(self.cfg.sampler, steps=self.cfg.experiment.steps, **kw)

    def guidance_config(self, scale: float | None = None) -> GuidanceConfig:
        g = self.cfg.guidance
        return replace(g, scale=g.scale if scale is None else scale)


# -- conditioning arms -------------------------------------------------------------------

def blended_conditioning(world: World, prompt: str, records: Sequence[ConceptRecord]):
    """(cond, token sets): the prompt's base flow with concept rows blended in."""
    bb = world.backbone()
    bank = _MemoryBank(records)
    plan = plan_blend(prompt, [r.name for r in records], bank, bb.vocab, bb.cfg.max_len, world.backbone_hash)
    with torch.no_grad():
        h_b = bb.flow(article_form(prompt, [r.identifier for r in records]))
        return blend_multi(h_b, plan), plan.token_sets


def merged_projections(backbone: Backbone, states: Sequence[ConceptState]) -> ProjectionSet:
    """W = W_o + sum_i (W_i - W_o): tuned projections applied to the whole prompt."""
    w_k, w_v = backbone.projections.w_k.clone(), backbone.projections.w_v.clone()
    for s in states:
        w_k += s.projections.w_k.detach() - backbone.projections.w_k
        w_v += s.projections.w_v.detach() - backbone.projections.w_v
    return ProjectionSet(w_k, w_v)


def direct_conditioning(world: World, prompt: str, states: Sequence[ConceptState]) -> LatentTextualFeature:
    """Reference arm: identifiers in the prompt, tuned projections everywhere, no blending."""
    bb = world.backbone()
    ov = {}
    for s in states:
        ov.update(s.overrides(bb))
    with torch.no_grad():
        return bb.flow(prompt, merged_projections(bb, states), ov)


class _MemoryBank:
    def __init__(self, records: Sequence[ConceptRecord]):
        self.records = {r.name: r for r in records}

    def load(self, name: str) -> ConceptRecord:
        return self.records[name]


def identifier_prompt(prompt: str, concepts: Sequence[Concept]) -> str:
    """Replace "a <noun>" by "<identifier> <noun>" for each concept."""
    words = prompt.split(" ")
    for c in concepts:
        for i in range(1, len(words)):
            if words[i].rstrip(".").lower() == c.noun and words[i - 1].lower() in ("a", "the"):
                words[i - 1] = c.identifier
                break
    return " ".join(words)


def relational_prompt(concepts: Sequence[Concept]) -> str:
    if len(concepts) == 1:
        return f"Photo of a {concepts[0].noun}."
    return "A " + " beside a ".join(c.noun for c in concepts) + "."


def generate(world: World, cond: LatentTextualFeature, seeds: Sequence[int], token_sets=(),
             scale: float = 0.0, keep_latents: bool = False, batch: int = 32) -> SampleResult:
    """Sample in chunks of ``batch`` seeds; the trajectory logs are concatenated per item."""
    bb = world.backbone()
    with torch.no_grad():
        uncond = bb.flow("")
    scfg, gcfg = world.sampler_config(), world.guidance_config(scale)
    parts = []
    for i in range(0, len(seeds), batch):
        parts.append(sample_with(bb.denoiser, cond, uncond, seeds[i:i + batch], scfg, gcfg,
                                 token_sets, keep_latents))
    if len(parts) == 1:
        return parts[0]
    traj = [{k: (sum((p.trajectory[j][k] for p in parts), []) if isinstance(v, list) else v)
             for k, v in parts[0].trajectory[j].items()} for j in range(len(parts[0].trajectory))]
    lat = torch.cat([p.latents for p in parts], dim=1) if keep_latents else None
    return SampleResult(torch.cat([p.images for p in parts]), traj, lat)


def trajectory_mean(result: SampleResult, key: str) -> np.ndarray:
    return np.array([step[key] for step in result.trajectory]).mean(axis=0)


def _seeds(world: World, n: int, offset: int = 0) -> list[int]:
    base = world.cfg.sampler.seed % 100_000
    return [base + offset + i for i in range(n)]


# -- experiments ----------------------------------------------------------------------------------

@timed
def backbone_gate(world: World, threshold: float = 0.7) -> Report:
    """Oracle class accuracy on the pretrained model's own single-noun samples."""
    oracle, bb = world.oracle(), world.backbone()
    n = world.cfg.experiment.gate_samples
    per_noun = {}
    hits = 0
    for k, noun in enumerate(NOUNS):
        prompts = [TEMPLATES[i % len(TEMPLATES)] for i in range(n)]
        prompts = [p.replace("{}", f"a {noun}") if "{}" in p else p for p in prompts]
        prompts = [p.replace("a a ", "a ") for p in prompts]
        with torch.no_grad():
            cond = bb.flow(prompts)
        res = generate(world, cond, _seeds(world, n, 1000 * k))
        pred = oracle.noun_prediction(res.images.clamp(-1, 1))
        ok = sum(p == noun for p in pred)
        per_noun[noun] = ok / n
        hits += ok
    acc = hits / (n * len(NOUNS))
    return Report("backbone-gate", acc >= threshold, f"class accuracy {acc:.3f} (gate {threshold})",
                  {"accuracy": acc, "per_noun": per_noun})


@timed
def customization(world: World, name: str | None = None, loss_drop: float = 0.5,
                  presence: float = 0.8) -> Report:
    """Reconstruction-loss drop and single-concept presence after fine-tuning."""
    concept = world.concept(name or world.concepts[0].name)
    bb, oracle = world.backbone(), world.oracle()
    spec = world.spec(concept)
    prompt = f"Photo of {concept.identifier} {concept.noun}."

    def cond_for(state):
        rec = extract(state, bb, backbone_hash=world.backbone_hash)
        return blended_conditioning(world, prompt, [rec])[0]

    init = init_state(bb, spec, world.cfg.finetune)
    state = world.state(concept.name)
    l0 = reconstruction_loss(bb, cond_for(init), spec.references)
    l1 = reconstruction_loss(bb, cond_for(state), spec.references)
    drop = 1 - l1 / l0
    res = generate(world, cond_for(state), _seeds(world, world.cfg.experiment.n_samples))
    rep = presence_eval(res.images, [concept.name], oracle)
    rate = rep.rates[concept.name]
    passed = drop >= loss_drop and rate >= presence
    return Report("customization", passed,
                  f"loss drop {drop:.1%} (>= {loss_drop:.0%}), presence {rate:.1%} (>= {presence:.0%})",
                  {"concept": concept.name, "loss_step0": l0, "loss_final": l1, "drop": drop,
                   "presence": rep.to_dict(), "train_curve": [h["loss"] for h in state.history[::25]]},
                  artifacts={"samples": res.images})


def _pair(world: World) -> list[Concept]:
    return list(world.concepts[:2])


@timed
def multi_concept(world: World, margin: float = 0.15) -> Report:
    """Joint presence of blended 2-concept generations vs the direct-projection arm."""
    cs = _pair(world)
    prompt = relational_prompt(cs)
    records = [world.record(c.name) for c in cs]
    cond_b, sets = blended_conditioning(world, prompt, records)
    cond_d = direct_conditioning(world, identifier_prompt(prompt, cs),
                                 [world.state(c.name, "no-base-flow") for c in cs])
    seeds = _seeds(world, world.cfg.experiment.n_samples, 5000)
    names = [c.name for c in cs]
    oracle = world.oracle()
    res_b = generate(world, cond_b, seeds, sets, scale=world.cfg.guidance.scale)
    res_d = generate(world, cond_d, seeds)
    rb, rd = presence_eval(res_b.images, names, oracle), presence_eval(res_d.images, names, oracle)
    diff = rb.joint_rate - rd.joint_rate
    return Report("multi-concept", diff >= margin,
                  f"joint presence blended {rb.joint_rate:.1%} vs direct {rd.joint_rate:.1%} "
                  f"(margin {diff:+.1%}, need >= {margin:.0%})",
                  {"prompt": prompt, "blended": rb.to_dict(), "direct": rd.to_dict(), "margin": diff},
                  artifacts={"blended": res_b.images, "direct": res_d.images})


@timed
def deviation(world: World, dev_frac: float = 0.8, layout_frac: float = 0.7) -> Report:
    """Trajectory deviation and layout similarity relative to the pretrained run, per seed."""
    cs = _pair(world)
    prompt = relational_prompt(cs)
    bb = world.backbone()
    seeds = _seeds(world, world.cfg.experiment.n_pairs, 9000)
    with torch.no_grad():
        cond_ref = bb.flow(prompt)
    cond_b, _ = blended_conditioning(world, prompt, [world.record(c.name) for c in cs])
    cond_d = direct_conditioning(world, identifier_prompt(prompt, cs),
                                 [world.state(c.name, "no-base-flow") for c in cs])
    ref = generate(world, cond_ref, seeds, keep_latents=True)
    blend = generate(world, cond_b, seeds, keep_latents=True)
    direct = generate(world, cond_d, seeds, keep_latents=True)
    series_b, dev_b = deviation_magnitude(TrajectoryPair(ref.latents, blend.latents))
    series_d, dev_d = deviation_magnitude(TrajectoryPair(ref.latents, direct.latents))
    lay_b = np.array([layout_similarity(r, b) for r, b in zip(ref.images, blend.images)])
    lay_d = np.array([layout_similarity(r, d) for r, d in zip(ref.images, direct.images)])
    f_dev = float((dev_b < dev_d).mean())
    f_lay = float((lay_b > lay_d).mean())
    passed = f_dev >= dev_frac and f_lay >= layout_frac
    return Report("deviation", passed,
                  f"lower deviation in {f_dev:.0%} of pairs (>= {dev_frac:.0%}), "
                  f"higher layout similarity in {f_lay:.0%} (>= {layout_frac:.0%})",
                  {"prompt": prompt, "dev_blended": dev_b.tolist(), "dev_direct": dev_d.tolist(),
                   "layout_blended": lay_b.tolist(), "layout_direct": lay_d.tolist(),
                   "series_blended": series_b.mean(1).tolist(), "series_direct": series_d.mean(1).tolist()},
                  artifacts={"pretrained": ref.images, "blended": blend.images, "direct": direct.images})


@timed
def guidance_ablation(world: World, frac: float = 0.9, scale: float = 1.0) -> Report:
    """Trajectory-mean g2 with and without blending guidance on 3-concept prompts."""
    cs = list(world.concepts[:3])
    prompt = relational_prompt(cs)
    cond, sets = blended_conditioning(world, prompt, [world.record(c.name) for c in cs])
    seeds = _seeds(world, world.cfg.experiment.n_pairs, 13000)
    on = generate(world, cond, seeds, sets, scale=scale)
    off = generate(world, cond, seeds, sets, scale=0.0)
    g2_on, g2_off = trajectory_mean(on, "g2"), trajectory_mean(off, "g2")
    f = float((g2_on < g2_off).mean())
    return Report("guidance", f >= frac,
                  f"g2 lower with guidance in {f:.0%} of pairs (>= {frac:.0%}); "
                  f"mean g2 {g2_on.mean():.4f} vs {g2_off.mean():.4f}",
                  {"prompt": prompt, "g2_on": g2_on.tolist(), "g2_off": g2_off.tolist(),
                   "g1_on": trajectory_mean(on, "g1").tolist(), "g1_off": trajectory_mean(off, "g1").tolist(),
                   "g2_curve_on": [float(np.mean(s["g2"])) for s in on.trajectory],
                   "g2_curve_off": [float(np.mean(s["g2"])) for s in off.trajectory]})


@timed
def ablations(world: World) -> Report:
    """Presence without the base flow, and cross-template record similarity without prompt variety."""
    cs = _pair(world)
    oracle = world.oracle()
    n = world.cfg.experiment.n_samples
    rates = {"standard": [], "no-base-flow": []}
    for k, c in enumerate(cs):
        prompt = f"Photo of {c.identifier} {c.noun}."
        seeds = _seeds(world, n, 17000 + 100 * k)
        for variant in rates:
            cond, _ = blended_conditioning(world, prompt, [world.record(c.name, variant)])
            res = generate(world, cond, seeds)
            rates[variant].append(presence_eval(res.images, [c.name], oracle).rates[c.name])
    p_std, p_nb = float(np.mean(rates["standard"])), float(np.mean(rates["no-base-flow"]))
    bb = world.backbone()
    c = cs[0]
    sim_var = position_similarity(world.state(c.name), bb, TEMPLATES)["mean"]
    sim_fix = position_similarity(world.state(c.name, "fixed-template"), bb, TEMPLATES)["mean"]
    passed = p_nb < p_std and sim_fix < sim_var
    return Report("ablations", passed,
                  f"presence standard {p_std:.1%} vs w/o base flow {p_nb:.1%}; "
                  f"cross-template cosine variable {sim_var:.3f} vs fixed {sim_fix:.3f}",
                  {"presence": rates, "similarity_variable": sim_var, "similarity_fixed": sim_fix})


@timed
def position_invariance(world: World, cos_gate: float = 0.9, layout_gate: float = 0.8,
                        templates: tuple[str, str] = (TEMPLATES[0], TEMPLATES[2])) -> Report:
    """Records extracted from two templates agree, and so do their generations."""
    c = world.concepts[0]
    bb = world.backbone()
    state = world.state(c.name)
    sim = position_similarity(state, bb, list(templates))["mean"]
    prompt = f"Photo of {c.identifier} {c.noun}."
    seeds = _seeds(world, world.cfg.experiment.n_pairs, 21000)
    imgs = []
    for t in templates:
        cond, _ = blended_conditioning(world, prompt, [world.record(c.name, template=t)])
        imgs.append(generate(world, cond, seeds).images)
    lay = np.array([layout_similarity(a, b) for a, b in zip(*imgs)])
    passed = sim >= cos_gate and lay.mean() >= layout_gate
    return Report("position-invariance", passed,
                  f"record cosine {sim:.3f} (>= {cos_gate}), mean layout similarity {lay.mean():.3f} "
                  f"(>= {layout_gate})",
                  {"templates": list(templates), "cosine": sim, "layout": lay.tolist()})
