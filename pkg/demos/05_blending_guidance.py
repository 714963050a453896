"""Blending guidance on a three-concept prompt: g2 with and without the gradient term."""
from pathlib import Path

import numpy as np

from latexblend import experiments
from latexblend.config import RunConfig

out = Path("demo_out")
out.mkdir(exist_ok=True)
world = experiments.World(RunConfig())

rep = experiments.guidance_ablation(world)
print(rep.line())
on, off = rep.details["g2_curve_on"], rep.details["g2_curve_off"]
print("step    g2 (lambda=1)   g2 (lambda=0)")
for i in range(0, len(on), max(1, len(on) // 10)):
    print(f"{i:4d}    {on[i]:.4f}          {off[i]:.4f}")
print("mean g1 with / without guidance:",
      f"{np.mean(rep.details['g1_on']):.3f} / {np.mean(rep.details['g1_off']):.3f}")

inv = experiments.position_invariance(world)
print(inv.line())
