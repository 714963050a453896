"""Tokenizer, frozen text encoder, per-layer key/value projections and the
prompt -> latent textual feature flow."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import autodiff as ad

PAD, BOS = "<pad>", "<bos>"
ARTICLES = ("a", "the")
IDENTIFIER_RE = re.compile(r"^V\d+\*$")
_TOKEN_RE = re.compile(r"V\d+\*|[A-Za-z]+|[.,]")

TEMPLATES = (
    "{}.",
    "A {}.",
    "Photo of {}.",
    "A photo of {}.",
    "A photo of a {}.",
    "a fancy photo of a {}.",
    "A fancy, detailed photo of {}.",
)
FIXED_TEMPLATE = 3
EXTRACTION_TEMPLATE = "Photo of {}."


class VocabularyError(KeyError):
    pass


class PromptLengthError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


# -- vocabulary / tokenizer ----------------------------------------------------

class Vocabulary:
    """Dense token table: specials, base words, then a reserved identifier block.

    ``nouns`` marks which base words are class nouns; it drives span tables.
    """

    def __init__(self, tokens: Sequence[str], nouns: Iterable[str] = ()):
        self.tokens = list(tokens)
        if self.tokens[:2] != [PAD, BOS]:
            raise VocabularyError("vocabulary must start with <pad>, <bos>")
        self.ids = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise VocabularyError("duplicate token in vocabulary")
        ident = [i for i, t in enumerate(self.tokens) if IDENTIFIER_RE.match(t)]
        self.base_size = ident[0] if ident else len(self.tokens)
        if any(i < self.base_size for i in ident) or ident != list(range(self.base_size, len(self.tokens))):
            raise VocabularyError("identifier tokens must form the trailing reserved block")
        self.nouns = frozenset(nouns)
        missing = self.nouns - set(self.ids)
        if missing:
            raise VocabularyError(f"nouns not in vocabulary: {sorted(missing)}")

    @classmethod
    def build(cls, words: Iterable[str], nouns: Iterable[str], n_identifiers: int = 8) -> "Vocabulary":
        base = [PAD, BOS] + [w for w in dict.fromkeys(words) if w not in (PAD, BOS)]
        return cls(base + [f"V{i}*" for i in range(1, n_identifiers + 1)], nouns)

    @classmethod
    def load(cls, path: str | Path, nouns: Iterable[str] = ()) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln], nouns)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        try:
            return self.ids[token]
        except KeyError:
            raise VocabularyError(f"unknown token {token!r}") from None

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def identifiers(self) -> list[str]:
        return self.tokens[self.base_size:]

    def is_identifier(self, token_id: int) -> bool:
        return token_id >= self.base_size


def split_words(prompt: str) -> list[str]:
    words = _TOKEN_RE.findall(prompt)
    return [w if IDENTIFIER_RE.match(w) else w.lower() for w in words]


def normalize(prompt: str) -> str:
    """Canonical text form: lower-case words, single spaces, punctuation attached."""
    out = ""
    for w in split_words(prompt):
        if w in ".,":
            out += w
        else:
            out += (" " if out else "") + w
    return out


@dataclass(frozen=True)
class TokenizedPrompt:
    ids: tuple[int, ...]
    tokens: tuple[str, ...]
    spans: Mapping[str, tuple[int, ...]]

    @property
    def length(self) -> int:
        return len(self.tokens)

    def subject(self, noun: str) -> tuple[int, int]:
        """(prefix, noun) positions for the single occurrence of ``noun``.

        The prefix is the token right before the noun and must be an article or
        an identifier.
        """
        pos = [i for i, t in enumerate(self.tokens) if t == noun]
        if len(pos) != 1:
            raise AlignmentError(f"noun {noun!r} occurs {len(pos)} times in {self.tokens}")
        j = pos[0]
        if j < 1 or not (self.tokens[j - 1] in ARTICLES or IDENTIFIER_RE.match(self.tokens[j - 1])):
            raise AlignmentError(f"noun {noun!r} is not preceded by an article or identifier")
        return j - 1, j


def tokenize(prompt: str, vocab: Vocabulary, max_len: int = 16) -> TokenizedPrompt:
    words = split_words(prompt)
    tokens = (BOS, *words)
    if len(tokens) > max_len:
        raise PromptLengthError(f"prompt has {len(tokens)} tokens, limit is {max_len}")
    ids = [vocab[t] for t in tokens] + [vocab.pad_id] * (max_len - len(tokens))
    spans: dict[str, list[int]] = {"article": [], "noun": [], "identifier": []}
    for i, t in enumerate(tokens):
        if t in ARTICLES:
            spans["article"].append(i)
        elif t in vocab.nouns:
            spans["noun"].append(i)
        elif IDENTIFIER_RE.match(t):
            spans["identifier"].append(i)
    return TokenizedPrompt(tuple(ids), tokens, {k: tuple(v) for k, v in spans.items()})


def detokenize(tp: TokenizedPrompt) -> str:
    return normalize(" ".join(tp.tokens[1:]))


# -- templates -----------------------------------------------------------------

@dataclass(frozen=True)
class TemplatePool:
    templates: tuple[str, ...] = TEMPLATES

    def __post_init__(self):
        if not self.templates:
            raise ValueError("template pool is empty")
        for t in self.templates:
            if t.count("{}") != 1:
                raise ValueError(f"template {t!r} must contain exactly one slot")

    def __len__(self) -> int:
        return len(self.templates)


def draw_template(pool: TemplatePool, rng: np.random.Generator, mode: str = "variable") -> int:
    """Index of a template; uniform in variable mode, pinned in fixed mode."""
    if mode == "fixed":
        return FIXED_TEMPLATE
    if mode != "variable":
        raise ValueError(f"unknown template mode {mode!r}")
    return int(rng.integers(len(pool)))


def fill(template: str, text: str) -> str:
    if template.count("{}") != 1:
        raise ValueError(f"template {template!r} must contain exactly one slot")
    return template.replace("{}", text)


# -- encoder ---------------------------------------------------------------------

class _Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x, bias):
        b, m, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).reshape(b, m, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = ad.matmul(q, k.transpose(-1, -2)) / (d // self.heads) ** 0.5 + bias
        att = ad.softmax_rows(scores)
        x = x + self.out((att @ v).transpose(1, 2).reshape(b, m, d))
        return x + self.mlp(self.ln2(x))


class TextEncoder(nn.Module):
    """Small transformer over fixed-length token sequences.

    PAD positions are masked as keys; their own output rows are still
    computed. ``causal`` restricts each position to itself and earlier ones.
    """

    def __init__(self, vocab_size: int, dim: int = 64, max_len: int = 16, layers: int = 2,
                 heads: int = 4, causal: bool = False):
        super().__init__()
        self.dim, self.max_len, self.causal = dim, max_len, causal
        self.token = nn.Embedding(vocab_size, dim)
        self.pos = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        nn.init.normal_(self.token.weight, std=0.3)
        self.blocks = nn.ModuleList(_Block(dim, heads) for _ in range(layers))
        self.ln = nn.LayerNorm(dim)

    def embed(self, ids: torch.Tensor, overrides: Mapping[int, torch.Tensor] | None = None):
        x = self.token(ids)
        for tid, row in (overrides or {}).items():
            hit = (ids == tid).unsqueeze(-1)
            if hit.any():
                x = torch.where(hit, row.to(x.dtype).expand_as(x), x)
        return x

    def forward(self, ids: torch.Tensor, overrides: Mapping[int, torch.Tensor] | None = None):
        b, m = ids.shape
        x = self.embed(ids, overrides) + self.pos[:m]
        bias = torch.zeros(b, 1, m, m, dtype=x.dtype)
        bias = bias.masked_fill((ids == 0)[:, None, None, :], -1e9)
        if self.causal:
            bias = bias.masked_fill(torch.ones(m, m, dtype=torch.bool).triu(1), -1e9)
        for blk in self.blocks:
            x = blk(x, bias)
        return self.ln(x)


def encode(tps: Sequence[TokenizedPrompt] | TokenizedPrompt, encoder: TextEncoder,
           overrides: Mapping[int, torch.Tensor] | None = None) -> torch.Tensor:
    """Textual features ``e`` of shape [M, d_t] (or [B, M, d_t] for a list)."""
    single = isinstance(tps, TokenizedPrompt)
    batch = [tps] if single else list(tps)
    ids = torch.tensor([tp.ids for tp in batch], dtype=torch.long)
    e = encoder(ids, overrides)
    return e[0] if single else e


# -- projections -------------------------------------------------------------------

@dataclass
class ProjectionSet:
    """Per-layer key/value maps, ``W_k[l], W_v[l]`` of shape [d_t, d_l]."""

    w_k: torch.Tensor  # [D, d_t, d_l]
    w_v: torch.Tensor
    frozen: bool = True

    def __post_init__(self):
        if self.w_k.shape != self.w_v.shape or self.w_k.dim() != 3:
            raise ad.DimensionError("projection stacks must share shape [D, d_t, d_l]")
        self.w_k.requires_grad_(not self.frozen)
        self.w_v.requires_grad_(not self.frozen)

    @classmethod
    def init(cls, layers: int, d_t: int, d_l: int, gen: torch.Generator | None = None) -> "ProjectionSet":
        s = d_t ** -0.5
        return cls(torch.randn(layers, d_t, d_l, generator=gen) * s,
                   torch.randn(layers, d_t, d_l, generator=gen) * s)

    @property
    def layers(self) -> int:
        return self.w_k.shape[0]

    def learnable_copy(self) -> "ProjectionSet":
        return ProjectionSet(self.w_k.detach().clone(), self.w_v.detach().clone(), frozen=False)

    def frozen_copy(self) -> "ProjectionSet":
        return ProjectionSet(self.w_k.detach().clone(), self.w_v.detach().clone(), frozen=True)

    def parameters(self) -> list[torch.Tensor]:
        return [self.w_k, self.w_v]


@dataclass
class LatentTextualFeature:
    """Key/value grids per cross-attention layer: ``K``, ``V`` of shape [B, D, M, d_l]."""

    K: torch.Tensor
    V: torch.Tensor
    prompts: list[TokenizedPrompt] = field(default_factory=list)

    def __post_init__(self):
        if self.K.shape != self.V.shape or self.K.dim() != 4:
            raise ad.DimensionError("K and V must share shape [B, D, M, d_l]")

    @property
    def batch(self) -> int:
        return self.K.shape[0]

    @property
    def layers(self) -> int:
        return self.K.shape[1]

    def detach(self) -> "LatentTextualFeature":
        return LatentTextualFeature(self.K.detach(), self.V.detach(), list(self.prompts))

    def select(self, idx: Sequence[int]) -> "LatentTextualFeature":
        i = torch.as_tensor(list(idx), dtype=torch.long)
        return LatentTextualFeature(self.K[i], self.V[i], [self.prompts[j] for j in idx] if self.prompts else [])

    @staticmethod
    def cat(parts: Sequence["LatentTextualFeature"]) -> "LatentTextualFeature":
        return LatentTextualFeature(torch.cat([p.K for p in parts]), torch.cat([p.V for p in parts]),
                                    [tp for p in parts for tp in p.prompts])


def project_latent(e: torch.Tensor, ps: ProjectionSet) -> tuple[torch.Tensor, torch.Tensor]:
    """K[l] = e W_k[l], V[l] = e W_v[l]; returns stacks of shape [..., D, M, d_l]."""
    if e.shape[-1] != ps.w_k.shape[1]:
        raise ad.DimensionError(f"feature width {e.shape[-1]} does not match projections {ps.w_k.shape[1]}")
    ks = [ad.matmul(e, ps.w_k[l]) for l in range(ps.layers)]
    vs = [ad.matmul(e, ps.w_v[l]) for l in range(ps.layers)]
    return torch.stack(ks, dim=-3), torch.stack(vs, dim=-3)


def encoding_flow(prompts: Sequence[str] | str, ps: ProjectionSet, encoder: TextEncoder,
                  vocab: Vocabulary, overrides: Mapping[int, torch.Tensor] | None = None
                  ) -> LatentTextualFeature:
    if isinstance(prompts, str):
        prompts = [prompts]
    tps = [tokenize(p, vocab, encoder.max_len) for p in prompts]
    e = encode(tps, encoder, overrides)
    K, V = project_latent(e, ps)
    return LatentTextualFeature(K, V, tps)
