"""``latexblend`` command line: synth, pretrain, finetune, extract, bank, generate, eval, selfcheck."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import torch

from . import checks, experiments, images
from .bank import ConceptBank
from .config import RunConfig
from .experiments import VARIANTS, World
from .metrics import TrajectoryPair, deviation_magnitude
from .sampler import GuidanceConfig, article_form, blend_multi, plan_blend, sample_with
from .text import EXTRACTION_TEMPLATE

log = logging.getLogger("latexblend")

EVAL_SUITES = {
    "presence": ("backbone_gate", "customization", "multi_concept"),
    "deviation": ("deviation",),
    "ablation": ("guidance_ablation", "ablations", "position_invariance"),
}


def _world(args) -> World:
    cfg = RunConfig.load(args.config, args.seed)
    return World(cfg, args.home, force=getattr(args, "force", False))


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, default=float))


def _out_dir(args, world: World, name: str) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else world.home / name
    out.mkdir(parents=True, exist_ok=True)
    world.cfg.dump_json(out / "config.json")
    return out


# -- subcommands ------------------------------------------------------------------------

def cmd_synth(args) -> dict:
    world = _world(args)
    corpus = world.corpus()
    world.concept_data()
    out = _out_dir(args, world, "synth")
    images.save_grid(out / "pretrain_sample.png", corpus.images[:64])
    for name, refs in corpus.references.items():
        images.save_grid(out / f"references-{name}.png", refs)
    reserved = {c.obj for c in world.concepts}
    manifest = {"config_hash": world.corpus_hash, "pretrain": len(corpus.captions),
                "references": {k: len(v) for k, v in corpus.references.items()},
                "priors": {k: len(v) for k, v in corpus.priors.items()},
                "reserved_in_pretrain": len(reserved & corpus.pretrain_triples()),
                "captions": corpus.captions[:20]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return {"out": str(out), **{k: manifest[k] for k in ("config_hash", "pretrain", "reserved_in_pretrain")}}


def cmd_pretrain(args) -> dict:
    world = _world(args)
    bb = world.backbone()
    return {"backbone": str(world.home / f"backbone-{world.backbone_config_hash}.ltxb"),
            "config_hash": world.backbone_config_hash, "weights_hash": world.backbone_hash,
            "history": world.pretrain_history, "params": sum(p.numel() for p in bb.denoiser.parameters())}


def cmd_finetune(args) -> dict:
    world = _world(args)
    st = world.state(args.concept, args.variant)
    return {"concept": st.name, "variant": args.variant, "config_hash": world.state_config_hash(args.variant),
            "loss_first": st.history[0]["loss"] if st.history else None,
            "loss_last": st.history[-1]["loss"] if st.history else None}


def _bank(args, world: World) -> ConceptBank:
    return ConceptBank(Path(args.bank) if args.bank else world.home / "bank")


def cmd_extract(args) -> dict:
    world = _world(args)
    rec = world.record(args.concept, args.variant, args.template)
    bank = _bank(args, world)
    digest = bank.save(rec)
    return {"concept": rec.name, "bank": str(bank.root), "sha256": digest, "template": rec.template}


def cmd_bank(args) -> dict:
    world = _world(args)
    bank = _bank(args, world)
    if args.bank_cmd == "ls":
        return {"bank": str(bank.root), "concepts": bank.names(), "problems": bank.problems}
    return bank.inspect(args.name)


def cmd_generate(args) -> dict:
    # here --seed picks the sampling noise; the root seed comes from the config
    world = World(RunConfig.load(args.config), args.home)
    sample_seed = args.seed if args.seed is not None else 0
    bb = world.backbone()
    bank = _bank(args, world)
    names = [c for c in (args.concepts or "").split(",") if c]
    plan = plan_blend(args.prompt, names, bank, bb.vocab, bb.cfg.max_len, world.backbone_hash)
    with torch.no_grad():
        cond = blend_multi(bb.flow(article_form(args.prompt, [r.identifier for r in plan.records])), plan)
        uncond = bb.flow("")
    scfg = replace(world.cfg.sampler, steps=args.steps, cfg_scale=args.cfg, seed=sample_seed,
                   method=args.method, eta=args.eta)
    gcfg = replace(world.cfg.guidance, scale=args.lam)
    seeds = [sample_seed + i for i in range(args.n)]
    res = sample_with(bb.denoiser, cond, uncond, seeds, scfg, gcfg, plan.token_sets, keep_latents=args.reference)
    traj = res.trajectory
    if args.reference:
        with torch.no_grad():
            ref_cond = bb.flow(article_form(args.prompt, [r.identifier for r in plan.records]))
        ref = sample_with(bb.denoiser, ref_cond, uncond, seeds, scfg, GuidanceConfig(scale=0.0), (), True)
        series, mean = deviation_magnitude(TrajectoryPair(ref.latents, res.latents))
        for i, step in enumerate(traj):
            step["deviation"] = series[i + 1].tolist()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if len(seeds) == 1:
        images.save_png(out, res.images[0])
    else:
        images.save_grid(out, res.images)
    if args.log:
        Path(args.log).write_text(json.dumps({"prompt": args.prompt, "concepts": names, "seeds": seeds,
                                              "config_hash": world.cfg.hash(), "steps": traj}, indent=1),
                                  encoding="utf-8")
    return {"out": str(out), "concepts": names, "token_sets": plan.token_sets,
            "final_g2": traj[-1]["g2"] if traj else None}


def cmd_eval(args) -> dict:
    world = _world(args)
    out = _out_dir(args, world, f"eval-{args.suite}")
    suites = EVAL_SUITES[args.suite] if args.suite != "all" else sum(EVAL_SUITES.values(), ())
    results = []
    for name in suites:
        rep = getattr(experiments, name)(world)
        rep.save(out / f"{rep.name}.json", world.cfg.hash())
        for key, imgs in rep.artifacts.items():
            images.save_grid(out / f"{rep.name}-{key}.png", imgs)
        print(rep.line(), file=sys.stderr)
        results.append(rep.to_dict() | {"details": None})
    return {"out": str(out), "reports": results, "passed": all(r["passed"] for r in results)}


def cmd_selfcheck(args) -> dict:
    reps = checks.run_all(args.suites or None)
    for r in reps:
        print(r.line(), file=sys.stderr)
    return {"passed": all(r.passed for r in reps), "suites": {r.name: r.passed for r in reps}}


# -- parser ----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--home", help="artifact root (default: $LTXB_HOME or ~/.latexblend)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="latexblend", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("synth", parents=[common], help="render the synthetic corpus")
    s.add_argument("--out", help="manifest directory (default: under the artifact root)")
    sub.add_parser("pretrain", parents=[common], help="pretrain (or load) the backbone")

    s = sub.add_parser("finetune", parents=[common], help="fine-tune one concept")
    s.add_argument("--concept", required=True)
    s.add_argument("--variant", default="standard", choices=sorted(VARIANTS))

    s = sub.add_parser("extract", parents=[common], help="extract a concept record into a bank")
    s.add_argument("--concept", required=True)
    s.add_argument("--variant", default="standard", choices=sorted(VARIANTS))
    s.add_argument("--template", default=EXTRACTION_TEMPLATE, help="template the record is read from")
    s.add_argument("--bank")

    s = sub.add_parser("bank", parents=[common], help="list or inspect a concept bank")
    s.add_argument("--bank")
    bsub = s.add_subparsers(dest="bank_cmd", required=True)
    bsub.add_parser("ls", help="list stored concepts and integrity problems")
    bi = bsub.add_parser("inspect", help="show one record's metadata")
    bi.add_argument("name")

    s = sub.add_parser("generate", parents=[common], help="sample with blended concepts")
    s.add_argument("--prompt", required=True, help='prompt with identifiers, e.g. "A photo of V1* circle."')
    s.add_argument("--concepts", default="", help="comma-separated concept names from the bank")
    s.add_argument("--steps", type=int, default=100, help="sampling steps")
    s.add_argument("--cfg", type=float, default=6.0, help="classifier-free guidance scale")
    s.add_argument("--lambda", dest="lam", type=float, default=1.0, help="blending guidance scale (0 disables)")
    s.add_argument("--n", type=int, default=1, help="number of samples (seeds seed..seed+n-1)")
    s.add_argument("--method", default="ddim", choices=("ddim", "ddpm"))
    s.add_argument("--eta", type=float, default=0.0, help="DDIM stochasticity")
    s.add_argument("--reference", action="store_true", help="log deviation from the unblended run")
    s.add_argument("--bank")
    s.add_argument("--out", required=True, help="output PNG (a grid when --n > 1)")
    s.add_argument("--log", help="per-step JSON log")

    s = sub.add_parser("eval", parents=[common], help="run behavioral experiments")
    s.add_argument("suite", choices=sorted(EVAL_SUITES) + ["all"])
    s.add_argument("--out")
    s.add_argument("--force", action="store_true", help="accept artifacts from a different config hash")

    s = sub.add_parser("selfcheck", parents=[common], help="run the invariant suites")
    s.add_argument("--suites", nargs="*", choices=sorted(checks.SUITES))
    return p


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "extract": cmd_extract,
            "bank": cmd_bank, "generate": cmd_generate, "eval": cmd_eval, "selfcheck": cmd_selfcheck}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = COMMANDS[args.cmd](args)
    except Exception as e:  # every failure becomes a machine-readable record
        record = {"error": type(e).__name__, "message": str(e).strip("'\""), "command": args.cmd}
        if args.verbose:
            record["traceback"] = traceback.format_exc()
        print(json.dumps(record), file=sys.stderr)
        return 1
    _emit(result)
    if isinstance(result, dict) and result.get("passed") is False:
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
