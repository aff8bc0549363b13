"""Run manifests: a canonical record of everything that shaped a training run.

The run id is a content hash of the manifest, so two runs with identical
inputs share an id and any config drift produces a new one.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from .errors import DataFormatError


@dataclass(frozen=True)
class RunManifest:
    model: dict
    training: dict
    corpus: dict
    partition: dict = field(default_factory=lambda: {"fractions": [0.8, 0.1, 0.1], "seed": 0})
    response_threshold: int = 0
    protocol: str = "standard"  # "standard" | "pretrain"

    def canonical(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def run_id(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    def save(self, path):
        blob = asdict(self)
        blob["run_id"] = self.run_id()
        with open(path, "w") as f:
            json.dump(blob, f, sort_keys=True, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path) as f:
            try:
                blob = json.load(f)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}: not a manifest ({e})")
        stored = blob.pop("run_id", None)
        m = cls(**blob)
        if stored is not None and stored != m.run_id():
            raise DataFormatError(f"{path}: run_id {stored} does not match content "
                                  f"hash {m.run_id()}")
        return m
