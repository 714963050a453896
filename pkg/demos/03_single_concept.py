"""Customize one concept, extract its record into a bank, and generate with it."""
from pathlib import Path

import torch

from latexblend import experiments, images
from latexblend.bank import ConceptBank
from latexblend.config import RunConfig

out = Path("demo_out")
out.mkdir(exist_ok=True)
world = experiments.World(RunConfig())
concept = world.concepts[0]

state = world.state(concept.name)  # fine-tunes on first use
curve = [h["loss"] for h in state.history]
for i in range(0, len(curve), 100):
    window = curve[i:i + 100]
    print(f"steps {i + 1:3d}-{i + len(window):3d}: mean reconstruction loss {sum(window) / len(window):.1f}")

# The record is the (identifier, noun) rows of K and V in every layer.
rec = world.record(concept.name)
print(rec.name, rec.identifier, rec.noun, "rows", rec.rows.shape, "from", repr(rec.template))
bank = ConceptBank(out / "bank")
if rec.name not in bank:
    bank.save(rec)
print("bank:", bank.names())

rep = experiments.customization(world)
print(rep.line())
images.save_grid(out / f"{concept.name}-samples.png", rep.artifacts["samples"], scale=3)

# The same record works in other sentences.
for prompt in (f"A {concept.identifier} {concept.noun}.", f"A fancy photo of {concept.identifier} {concept.noun}."):
    cond, _ = experiments.blended_conditioning(world, prompt, [rec])
    res = experiments.generate(world, cond, list(range(8)))
    images.save_grid(out / f"{concept.name}-{len(prompt)}.png", res.images, scale=3)
    print(prompt, "->", out / f"{concept.name}-{len(prompt)}.png")
