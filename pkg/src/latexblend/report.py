"""Pass/fail records shared by the invariant suites and the experiments."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from functools import wraps
from pathlib import Path

log = logging.getLogger(__name__)


@dataclass
class Report:
    name: str
    passed: bool
    summary: str
    details: dict = field(default_factory=dict)
    elapsed: float = 0.0
    artifacts: dict = field(default_factory=dict)  # image tensors; not serialized

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.summary} ({self.elapsed:.1f}s)"

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "summary": self.summary,
                "details": self.details, "elapsed": self.elapsed}

    def save(self, path: str | Path, config_hash: str) -> None:
        Path(path).write_text(json.dumps({**self.to_dict(), "config_hash": config_hash}, indent=2,
                                         default=float), encoding="utf-8")


def timed(fn):
    @wraps(fn)
    def wrapper(*a, **kw):
        t0 = time.time()
        rep = fn(*a, **kw)
        rep.elapsed = time.time() - t0
        log.info("%s", rep.line())
        return rep
    return wrapper
