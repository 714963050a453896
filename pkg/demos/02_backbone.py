"""Pretrain (or load) the toy backbone and check it against the presence oracle.

The first run trains both models and caches them under $LTXB_HOME; later runs
load the cache. See the README for timings.
"""
from pathlib import Path

import torch

from latexblend import experiments, images
from latexblend.config import RunConfig
from latexblend.sampler import SamplerConfig, sample_with

out = Path("demo_out")
out.mkdir(exist_ok=True)
world = experiments.World(RunConfig())

bb = world.backbone()
for h in world.pretrain_history:
    print(f"step {h['step']:5d}  val loss {h['val_loss']:.1f}")

oracle = world.oracle()
print(f"oracle held-out exact-match accuracy {oracle.accuracy:.3f}")

gate = experiments.backbone_gate(world)
print(gate.line())
for noun, acc in gate.details["per_noun"].items():
    print(f"  {noun:9} {acc:.0%}")

# Classifier-free guidance strength, side by side.
with torch.no_grad():
    cond, uncond = bb.flow(["A photo of a red triangle."] * 8), bb.flow("")
rows = [sample_with(bb.denoiser, cond, uncond, list(range(8)), SamplerConfig(steps=50, cfg_scale=s)).images
        for s in (1.0, 3.0, 6.0)]
images.save_grid(out / "cfg_sweep.png", torch.cat(rows), cols=8, scale=3)
print("rows: cfg 1, 3, 6 ->", out / "cfg_sweep.png")
