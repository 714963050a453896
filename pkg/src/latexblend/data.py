"""Synthetic shapes world: rendering, captions, concept classes and corpus splits."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .text import ARTICLES, TEMPLATES, Vocabulary, split_words

NOUNS = ("circle", "square", "triangle", "diamond", "cross")
COLORS = {
    "red": (0.95, 0.15, 0.15),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.2, 0.35, 1.0),
    "yellow": (1.0, 0.9, 0.1),
    "purple": (0.65, 0.2, 0.9),
    "orange": (1.0, 0.5, 0.0),
    "cyan": (0.1, 0.9, 0.9),
    "white": (0.95, 0.95, 0.95),
}
TEXTURES = ("plain", "striped", "dotted", "checkered")
BACKGROUND = (0.1, 0.1, 0.12)
RELATIONS = ("A {} beside a {}.", "A {} beside a {} beside a {}.")
SUPERSAMPLE = 4


@dataclass(frozen=True)
class Obj:
    noun: str
    color: str
    texture: str

    def describe(self, color: bool = True, texture: bool = True) -> str:
        words = []
        if color:
            words.append(self.color)
        if texture and self.texture != "plain":
            words.append(self.texture)
        return " ".join(words + [self.noun])


@dataclass(frozen=True)
class Concept:
    """A customizable subject: one (noun, color, texture) triple bound to an identifier."""

    name: str
    identifier: str
    obj: Obj

    @property
    def noun(self) -> str:
        return self.obj.noun


DEFAULT_CONCEPTS = (
    Concept("orange-striped-circle", "V1*", Obj("circle", "orange", "striped")),
    Concept("cyan-checkered-square", "V2*", Obj("square", "cyan", "checkered")),
    Concept("purple-striped-triangle", "V3*", Obj("triangle", "purple", "striped")),
    Concept("yellow-checkered-diamond", "V4*", Obj("diamond", "yellow", "checkered")),
)


def base_words() -> list[str]:
    words: list[str] = list(ARTICLES)
    for t in TEMPLATES + RELATIONS:
        words += [w for w in split_words(t.replace("{}", " ")) if w not in words]
    return words + list(NOUNS) + list(COLORS) + [t for t in TEXTURES if t != "plain"]


def make_vocabulary(n_identifiers: int = 8) -> Vocabulary:
    return Vocabulary.build(base_words(), NOUNS, n_identifiers)


# -- rendering -------------------------------------------------------------------

def _shape_mask(noun: str, x: np.ndarray, y: np.ndarray, cx: float, cy: float, r: float) -> np.ndarray:
    dx, dy = x - cx, y - cy
    if noun == "circle":
        return dx * dx + dy * dy <= r * r
    if noun == "square":
        s = 0.85 * r
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if noun == "triangle":
        depth = (dy + r) / (2 * r)
        return (depth >= 0) & (depth <= 1) & (np.abs(dx) <= depth * r)
    if noun == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if noun == "cross":
        w = r / 3
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    raise ValueError(f"unknown noun {noun!r}")


def _texture_mask(texture: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if texture == "plain":
        return np.ones_like(x, dtype=bool)
    if texture == "striped":
        return (np.floor(y / 2) % 2) == 0
    if texture == "checkered":
        return ((np.floor(x / 3) + np.floor(y / 3)) % 2) == 0
    if texture == "dotted":
        fx, fy = x % 4 - 2, y % 4 - 2
        return fx * fx + fy * fy > 1.2
    raise ValueError(f"unknown texture {texture!r}")


@dataclass(frozen=True)
class Placement:
    obj: Obj
    cx: float
    cy: float
    r: float


def render(placements: list[Placement], size: int = 32) -> np.ndarray:
    """HWC float image in [-1, 1], anti-aliased by supersampling."""
    n = size * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / SUPERSAMPLE
    x, y = np.meshgrid(coords, coords)
    img = np.empty((n, n, 3), dtype=np.float64)
    img[:] = BACKGROUND
    for p in placements:
        m = _shape_mask(p.obj.noun, x, y, p.cx, p.cy, p.r)
        tex = _texture_mask(p.obj.texture, x, y)
        col = np.asarray(COLORS[p.obj.color])
        img[m & tex] = col
        img[m & ~tex] = col * 0.3
    img = img.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE, 3).mean(axis=(1, 3))
    return (img * 2 - 1).astype(np.float32)


_RADIUS = {1: (7.0, 11.0), 2: (5.5, 7.5), 3: (4.0, 5.0)}


def layout(objs: list[Obj], rng: np.random.Generator, size: int = 32) -> list[Placement]:
    """Left-to-right columns, one object per column, jittered inside it."""
    n = len(objs)
    col = size / n
    out = []
    for i, o in enumerate(objs):
        r = rng.uniform(*_RADIUS[n])
        lo, hi = i * col + r + 0.5, (i + 1) * col - r - 0.5
        cx = rng.uniform(lo, hi) if hi > lo else (lo + hi) / 2
        cy = rng.uniform(r + 1, size - r - 1)
        out.append(Placement(o, cx, cy, r))
    return out


# -- captions ----------------------------------------------------------------------

def slot_has_article(template: str) -> bool:
    before = template.split("{}")[0].rstrip().lower()
    return any(before == a or before.endswith(" " + a) for a in ARTICLES)


def subject_text(template: str, phrase: str, article: str = "a") -> str:
    """Fill a template's slot with an article-led phrase without doubling the article."""
    return template.replace("{}", phrase if slot_has_article(template) else f"{article} {phrase}")


def caption(objs: list[Obj], rng: np.random.Generator, p_color: float = 0.7,
            p_texture: float = 0.7, p_the: float = 0.1) -> str:
    descs = [o.describe(rng.random() < p_color, rng.random() < p_texture) for o in objs]
    if len(objs) == 1:
        t = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
        art = "the" if rng.random() < p_the else "a"
        return subject_text(t, descs[0], art)
    rel = RELATIONS[len(objs) - 2]
    return rel.format(*descs)


# -- corpus --------------------------------------------------------------------------

def all_objects() -> list[Obj]:
    return [Obj(n, c, t) for n in NOUNS for c in COLORS for t in TEXTURES]


@dataclass
class CorpusConfig:
    seed: int = 0
    pretrain_size: int = 24000
    p_multi: tuple[float, float, float] = (0.55, 0.3, 0.15)
    p_uncond: float = 0.1
    references_per_concept: int = 5
    prior_per_noun: int = 64
    concepts: tuple[Concept, ...] = DEFAULT_CONCEPTS


@dataclass
class Corpus:
    images: np.ndarray  # [N, 3, 32, 32] float32 in [-1, 1]
    captions: list[str]
    objects: list[list[Obj]]
    references: dict[str, np.ndarray] = field(default_factory=dict)
    priors: dict[str, np.ndarray] = field(default_factory=dict)
    concepts: tuple[Concept, ...] = DEFAULT_CONCEPTS

    def pretrain_triples(self) -> set[Obj]:
        return {o for objs in self.objects for o in objs}


def _to_chw(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def synth_dataset(cfg: CorpusConfig, vocab: Vocabulary | None = None) -> Corpus:
    """Deterministic corpus for a seed; concept triples never enter pretraining."""
    vocab = vocab or make_vocabulary()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC0]))
    reserved = {c.obj for c in cfg.concepts}
    pool = [o for o in all_objects() if o not in reserved]
    images, caps, objs = [], [], []
    for _ in range(cfg.pretrain_size):
        n = int(rng.choice(3, p=cfg.p_multi)) + 1
        idx = rng.choice(len(NOUNS), size=n, replace=False)
        chosen = []
        for i in idx:
            cands = [o for o in pool if o.noun == NOUNS[i]]
            chosen.append(cands[int(rng.integers(len(cands)))])
        place = layout(chosen, rng)
        cap = "" if rng.random() < cfg.p_uncond else caption(chosen, rng)
        for w in split_words(cap):
            vocab[w]  # raises on vocabulary gaps
        images.append(_to_chw(render(place)))
        caps.append(cap)
        objs.append(chosen)
    refs = {}
    for c in cfg.concepts:
        refs[c.name] = np.stack([_to_chw(render(layout([c.obj], rng)))
                                 for _ in range(cfg.references_per_concept)])
    priors = {}
    for noun in NOUNS:
        cands = [o for o in pool if o.noun == noun]
        priors[noun] = np.stack([_to_chw(render(layout([cands[int(rng.integers(len(cands)))]], rng)))
                                 for _ in range(cfg.prior_per_noun)])
    return Corpus(np.stack(images), caps, objs, refs, priors, tuple(cfg.concepts))
