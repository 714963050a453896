"""A tour of the synthetic shapes world and the dual prompt construction.

Runs in seconds. Writes a few PNGs to ./demo_out.
"""
from pathlib import Path

import numpy as np

from latexblend import images
from latexblend.customization import ConceptSpec, build_dual_prompts
from latexblend.data import DEFAULT_CONCEPTS, CorpusConfig, make_vocabulary, synth_dataset
from latexblend.text import TemplatePool, tokenize

out = Path("demo_out")
out.mkdir(exist_ok=True)

# A small corpus; the default one has 24k images.
corpus = synth_dataset(CorpusConfig(pretrain_size=64, prior_per_noun=4))
for cap in corpus.captions[:8]:
    print(repr(cap))
images.save_grid(out / "corpus.png", corpus.images[:32], scale=3)

# Customizable concepts are (noun, color, texture) triples never seen in pretraining.
held = {c.obj for c in DEFAULT_CONCEPTS}
print("concept triples in pretraining:", len(held & corpus.pretrain_triples()))
for c in DEFAULT_CONCEPTS:
    images.save_grid(out / f"refs-{c.name}.png", corpus.references[c.name], scale=3)

# Fine-tuning draws one template for the base flow and an independent one for
# the concept flow. The identifier in the concept prompt corresponds to the
# article in the base prompt.
spec = ConceptSpec(DEFAULT_CONCEPTS[0], corpus.references[DEFAULT_CONCEPTS[0].name])
rng = np.random.default_rng(0)
vocab = make_vocabulary()
for _ in range(4):
    base, concept = build_dual_prompts(spec, TemplatePool(), rng)
    tb, tc = tokenize(base, vocab), tokenize(concept, vocab)
    print(f"{base!r:34} span {tb.subject('circle')}   {concept!r:34} span {tc.subject('circle')}")
