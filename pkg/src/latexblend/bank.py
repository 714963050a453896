"""Concept records (compact latent textual features) and the on-disk concept bank."""
from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from filelock import FileLock

from . import container
from .container import CorruptionError, VersionError  # noqa: F401  (re-exported)
from .text import EXTRACTION_TEMPLATE, fill

RECORD_VERSION = 1
MANIFEST = "manifest.json"


class NotFoundError(KeyError):
    pass


class TemplateError(ValueError):
    pass


@dataclass
class ConceptRecord:
    """K/V rows of the (identifier, noun) pair across all cross-attention layers.

    ``rows`` has shape [D, 2, 2, d_l]: layer, kind (K, V), token (identifier, noun).
    """

    name: str
    identifier: str
    noun: str
    rows: np.ndarray
    template: str = EXTRACTION_TEMPLATE
    config_hash: str = ""
    backbone_hash: str = ""
    version: int = RECORD_VERSION

    def __post_init__(self):
        self.rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 4 or self.rows.shape[1:3] != (2, 2):
            raise ValueError(f"record rows must be [D, 2, 2, d_l], got {self.rows.shape}")

    @property
    def k_rows(self) -> torch.Tensor:
        return torch.from_numpy(self.rows[:, 0])

    @property
    def v_rows(self) -> torch.Tensor:
        return torch.from_numpy(self.rows[:, 1])

    def meta(self) -> dict:
        return {"kind": "concept-record", "name": self.name, "identifier": self.identifier,
                "noun": self.noun, "template": self.template, "config_hash": self.config_hash,
                "backbone_hash": self.backbone_hash, "version": self.version}

    def to_bytes(self) -> bytes:
        return container.encode(self.meta(), {"rows": self.rows}, version=self.version)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ConceptRecord":
        meta, tensors = container.decode(blob, version=RECORD_VERSION)
        if meta.get("kind") != "concept-record":
            raise CorruptionError("container does not hold a concept record")
        return cls(meta["name"], meta["identifier"], meta["noun"], tensors["rows"], meta["template"],
                   meta["config_hash"], meta["backbone_hash"], meta["version"])

    def equals(self, other: "ConceptRecord") -> bool:
        return self.meta() == other.meta() and self.rows.tobytes() == other.rows.tobytes()


def extract(state, backbone, template: str = EXTRACTION_TEMPLATE, backbone_hash: str = "",
            config_hash: str = "") -> ConceptRecord:
    """Run the concept flow on ``template`` and slice the (identifier, noun) rows."""
    if template.count("{}") != 1:
        raise TemplateError(f"template {template!r} must contain exactly one slot")
    prompt = fill(template, f"{state.identifier} {state.noun}")
    with torch.no_grad():
        h = backbone.flow(prompt, state.projections, state.overrides(backbone))
    a, n = h.prompts[0].subject(state.noun)
    k = h.K[0][:, [a, n]]
    v = h.V[0][:, [a, n]]
    rows = torch.stack([k, v], dim=1).numpy()
    return ConceptRecord(state.name, state.identifier, state.noun, rows, template,
                         config_hash, backbone_hash)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    a64, b64 = a.astype(np.float64), b.astype(np.float64)
    return float(a64 @ b64 / (np.linalg.norm(a64) * np.linalg.norm(b64) + 1e-12))


def position_similarity(state, backbone, templates: Sequence[str]) -> dict:
    """Pairwise cosine similarity of records extracted from different templates."""
    if len(templates) < 2:
        raise ValueError("need at least two templates")
    recs = [extract(state, backbone, t) for t in templates]
    pairs = []
    for (i, ra), (j, rb) in itertools.combinations(enumerate(recs), 2):
        sims = np.array([[[_cosine(ra.rows[l, kind, tok], rb.rows[l, kind, tok]) for tok in range(2)]
                          for kind in range(2)] for l in range(ra.rows.shape[0])])
        pairs.append({"templates": [templates[i], templates[j]], "per_layer_kind_token": sims.tolist(),
                      "mean": float(sims.mean())})
    return {"pairs": pairs, "mean": float(np.mean([p["mean"] for p in pairs]))}


_SAFE = re.compile(r"[^A-Za-z0-9_.-]+")


@dataclass
class ConceptBank:
    """Directory of record files plus a JSON manifest of name -> (file, sha256)."""

    root: Path
    problems: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.problems = self.check()

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST

    def _manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {"format": RECORD_VERSION, "entries": {}}
        return json.loads(self.manifest_path.read_text(encoding="utf-8"))

    def names(self) -> list[str]:
        return sorted(self._manifest()["entries"])

    def __contains__(self, name: str) -> bool:
        return name in self._manifest()["entries"]

    def __len__(self) -> int:
        return len(self._manifest()["entries"])

    def check(self) -> list[str]:
        """Manifest/file inconsistencies; reported, never repaired."""
        out = []
        for name, ent in self._manifest()["entries"].items():
            path = self.root / ent["file"]
            if not path.exists():
                out.append(f"{name}: missing file {ent['file']}")
            elif container.sha256(path.read_bytes()) != ent["sha256"]:
                out.append(f"{name}: hash mismatch for {ent['file']}")
        return out

    def save(self, record: ConceptRecord) -> str:
        blob = record.to_bytes()
        digest = container.sha256(blob)
        fname = _SAFE.sub("_", record.name) + ".ltxb"
        with FileLock(str(self.root / ".lock")):
            manifest = self._manifest()
            if record.name in manifest["entries"]:
                raise FileExistsError(f"concept {record.name!r} already in bank; records are immutable")
            (self.root / fname).write_bytes(blob)
            manifest["entries"][record.name] = {"file": fname, "sha256": digest}
            tmp = self.manifest_path.with_suffix(".tmp")
            tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
            tmp.replace(self.manifest_path)
        return digest

    def load(self, name: str) -> ConceptRecord:
        ent = self._manifest()["entries"].get(name)
        if ent is None:
            raise NotFoundError(f"concept {name!r} not in bank {self.root}")
        blob = (self.root / ent["file"]).read_bytes()
        if container.sha256(blob) != ent["sha256"]:
            raise CorruptionError(f"record file for {name!r} does not match manifest hash")
        return ConceptRecord.from_bytes(blob)

    def inspect(self, name: str) -> dict:
        rec = self.load(name)
        return {**rec.meta(), "shape": list(rec.rows.shape)}
