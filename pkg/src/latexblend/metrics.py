"""Trajectory deviation, layout similarity and the subject-presence oracle."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import container
from .autodiff import ContractError
from .data import NOUNS, Concept, Obj, Placement, all_objects, layout, render

log = logging.getLogger(__name__)


class DegenerateCorrelationError(ValueError):
    pass


class OracleQualityError(RuntimeError):
    pass


# -- trajectories ------------------------------------------------------------------

@dataclass
class TrajectoryPair:
    reference: torch.Tensor  # [steps + 1, B, C, H, W]
    test: torch.Tensor

    def __post_init__(self):
        if self.reference.shape != self.test.shape:
            raise ContractError("trajectories are not aligned")
        if not torch.equal(self.reference[0], self.test[0]):
            raise ContractError("trajectories do not share their initial noise")


def deviation_magnitude(pair: TrajectoryPair) -> tuple[np.ndarray, np.ndarray]:
    """Per-step ||z_test - z_ref|| / ||z_ref|| ([steps + 1, B]) and its mean ([B]).

    Index 0 is the shared initial noise, so the mean runs over the denoised steps.
    """
    ref = pair.reference.flatten(2).double()
    diff = (pair.test.flatten(2).double() - ref).norm(dim=-1)
    d = (diff / ref.norm(dim=-1)).numpy()
    return d, d[1:].mean(axis=0) if len(d) > 1 else d[0]


def _gray_grid(img: np.ndarray | torch.Tensor, cells: int = 8) -> np.ndarray:
    a = np.asarray(img.detach() if isinstance(img, torch.Tensor) else img, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 3:
        a = a.mean(axis=0)
    elif a.ndim == 3:
        a = a.mean(axis=-1)
    h, w = a.shape
    return a.reshape(cells, h // cells, cells, w // cells).mean(axis=(1, 3))


def layout_similarity(img_a, img_b, cells: int = 8) -> float:
    """Pearson correlation of block-averaged grayscale grids."""
    a, b = _gray_grid(img_a, cells).ravel(), _gray_grid(img_b, cells).ravel()
    if a.shape != b.shape:
        raise ValueError("images differ in size")
    a, b = a - a.mean(), b - b.mean()
    den = np.sqrt((a @ a) * (b @ b))
    if den < 1e-12:
        raise DegenerateCorrelationError("constant image has no layout")
    return float(a @ b / den)


# -- presence oracle -------------------------------------------------------------------

class OracleNet(nn.Module):
    def __init__(self, n_classes: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1), nn.ReLU(), nn.Conv2d(32, 32, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(64, 96, 3, padding=1), nn.ReLU(),
        )
        self.head = nn.Linear(96, n_classes)

    def forward(self, x):
        return self.head(self.body(x).amax(dim=(-2, -1)))


@dataclass
class PresenceOracle:
    """Multi-label classifier over class nouns and concept classes."""

    classes: list[str]
    net: OracleNet
    accuracy: float = 0.0
    confusion: dict = field(default_factory=dict)

    def probabilities(self, images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return torch.sigmoid(self.net(torch.as_tensor(images, dtype=torch.float32)))

    def index(self, name: str) -> int:
        return self.classes.index(name)

    def digest(self) -> str:
        return container.tensors_hash(self.net.state_dict())

    def to_bytes(self, config_hash: str = "") -> bytes:
        meta = {"kind": "presence-oracle", "classes": self.classes, "accuracy": self.accuracy,
                "confusion": self.confusion, "digest": self.digest(), "config_hash": config_hash}
        return container.encode(meta, self.net.state_dict())

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple["PresenceOracle", dict]:
        meta, tensors = container.decode(blob)
        if meta.get("kind") != "presence-oracle":
            raise container.CorruptionError("container does not hold a presence oracle")
        net = OracleNet(len(meta["classes"]))
        net.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        oracle = cls(meta["classes"], net, meta["accuracy"], meta["confusion"])
        if oracle.digest() != meta["digest"]:
            raise container.CorruptionError("oracle weights do not match their pinned hash")
        return oracle, meta

    def noun_prediction(self, images: torch.Tensor) -> list[str]:
        p = self.probabilities(images)[:, :len(NOUNS)]
        return [NOUNS[i] for i in p.argmax(1).tolist()]


def _labels(objs: Sequence[Obj], classes: list[str], concepts: Sequence[Concept]) -> np.ndarray:
    y = np.zeros(len(classes), dtype=np.float32)
    for o in objs:
        y[classes.index(o.noun)] = 1
        for c in concepts:
            if c.obj == o:
                y[classes.index(c.name)] = 1
    return y


def _scene(rng: np.random.Generator, concepts: Sequence[Concept], objects: list[Obj],
           p_counts=(0.1, 0.45, 0.3, 0.15)) -> list[Placement]:
    n = int(rng.choice(4, p=p_counts))
    if n == 0:
        return []
    nouns = rng.choice(len(NOUNS), size=n, replace=False)
    objs = []
    for i in nouns:
        noun = NOUNS[i]
        mine = [c.obj for c in concepts if c.noun == noun]
        if mine and rng.random() < 0.4:
            objs.append(mine[int(rng.integers(len(mine)))])
        else:
            cands = [o for o in objects if o.noun == noun]
            objs.append(cands[int(rng.integers(len(cands)))])
    if n == 1 and rng.random() < 0.3:
        # large subjects, as seen in zoomed quadrant crops
        r = rng.uniform(10, 15)
        return [Placement(objs[0], rng.uniform(r * 0.6, 32 - r * 0.6), rng.uniform(r * 0.6, 32 - r * 0.6), r)]
    return layout(objs, rng)


def oracle_dataset(n: int, concepts: Sequence[Concept], seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0A]))
    classes = list(NOUNS) + [c.name for c in concepts]
    objects = all_objects()
    xs, ys = [], []
    for _ in range(n):
        place = _scene(rng, concepts, objects)
        xs.append(render(place).transpose(2, 0, 1))
        ys.append(_labels([p.obj for p in place], classes, concepts))
    return np.stack(xs).astype(np.float32), np.stack(ys)


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    b = x.shape[0]
    flip = torch.rand(b, generator=gen) < 0.5
    x = torch.where(flip[:, None, None, None], x.flip(-1), x)
    sigma = torch.rand(b, 1, 1, 1, generator=gen) * 0.15
    x = x + sigma * torch.randn(x.shape, generator=gen)
    blur = torch.rand(b, generator=gen) < 0.3
    soft = F.avg_pool2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), 3, stride=1)
    return torch.where(blur[:, None, None, None], 0.5 * x + 0.5 * soft, x)


def train_presence_oracle(concepts: Sequence[Concept], seed: int = 0, train_size: int = 12000,
                          test_size: int = 1000, steps: int = 2500, batch: int = 64,
                          min_accuracy: float = 0.95) -> PresenceOracle:
    """Train on synthetic renders; raise if held-out exact-match accuracy is too low."""
    classes = list(NOUNS) + [c.name for c in concepts]
    x, y = oracle_dataset(train_size, concepts, seed)
    xt, yt = oracle_dataset(test_size, concepts, seed + 1)
    torch.manual_seed(seed)
    net = OracleNet(len(classes))
    opt = torch.optim.Adam(net.parameters(), lr=2e-3)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    gen = torch.Generator().manual_seed(seed)
    X, Y = torch.from_numpy(x), torch.from_numpy(y)
    for step in range(steps):
        idx = torch.randint(len(X), (batch,), generator=gen)
        loss = F.binary_cross_entropy_with_logits(net(_augment(X[idx], gen)), Y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    oracle = PresenceOracle(classes, net)
    pred = (oracle.probabilities(torch.from_numpy(xt)) >= 0.5).numpy()
    exact = (pred == (yt > 0.5)).all(axis=1)
    oracle.accuracy = float(exact.mean())
    oracle.confusion = {
        c: {"tp": int((pred[:, i] & (yt[:, i] > 0.5)).sum()), "fp": int((pred[:, i] & (yt[:, i] < 0.5)).sum()),
            "fn": int((~pred[:, i] & (yt[:, i] > 0.5)).sum())}
        for i, c in enumerate(classes)}
    log.info("oracle held-out exact-match accuracy %.3f", oracle.accuracy)
    if oracle.accuracy < min_accuracy:
        raise OracleQualityError(f"oracle accuracy {oracle.accuracy:.3f} below {min_accuracy}")
    return oracle


def quadrant_views(images: torch.Tensor) -> torch.Tensor:
    """Full frame plus the four upsampled quadrants: [5, B, C, H, W]."""
    h, w = images.shape[-2:]
    views = [images]
    for r in (0, h // 2):
        for c in (0, w // 2):
            crop = images[..., r:r + h // 2, c:c + w // 2]
            views.append(F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False))
    return torch.stack(views)


@dataclass
class PresenceReport:
    concepts: list[str]
    detected: np.ndarray  # [n_images, n_concepts] bool

    @property
    def count(self) -> int:
        return int(self.detected.shape[0])

    @property
    def rates(self) -> dict[str, float]:
        if self.count == 0:
            return {}
        return {c: float(self.detected[:, i].mean()) for i, c in enumerate(self.concepts)}

    @property
    def joint_rate(self) -> float:
        return float(self.detected.all(axis=1).mean()) if self.count else 0.0

    def to_dict(self) -> dict:
        return {"count": self.count, "rates": self.rates, "joint_rate": self.joint_rate}


def presence_eval(images: torch.Tensor, concepts: Sequence[str], oracle: PresenceOracle,
                  threshold: float = 0.5) -> PresenceReport:
    """A concept is present if any of the five views scores it at or above ``threshold``."""
    images = torch.as_tensor(images)
    if len(images) == 0:
        return PresenceReport(list(concepts), np.zeros((0, len(concepts)), dtype=bool))
    views = quadrant_views(images.clamp(-1, 1))
    probs = oracle.probabilities(views.flatten(0, 1)).reshape(5, len(images), -1)
    cols = [oracle.index(c) for c in concepts]
    detected = (probs[:, :, cols] >= threshold).any(dim=0).numpy()
    return PresenceReport(list(concepts), detected)
