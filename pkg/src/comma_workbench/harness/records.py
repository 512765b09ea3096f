"""Run records: one JSON document per run, named by its content hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from ..errors import RecordParseError


def harmonic_mean(base: float, novel: float) -> float:
    """2BN/(B+N), defined as 0 when both accuracies are 0."""
    total = base + novel
    return 0.0 if total == 0 else 2.0 * base * novel / total


@dataclass
class RunRecord:
    config: dict
    seed: int
    status: str = "ok"
    error: str | None = None
    epoch_losses: list[dict] = field(default_factory=list)
    accuracy: dict = field(default_factory=dict)
    prompt_similarity: list[float] = field(default_factory=list)
    prompt_distances: list[float] = field(default_factory=list)
    final_kd_similarity: float | None = None
    backbone_checksum: str = ""
    backbone_checksum_end: str = ""
    prompt_checkpoint: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def content(self) -> dict:
        """Everything that (config, seed) determines; excludes wall-clock time."""
        d = dataclasses.asdict(self)
        d.pop("wall_clock")
        return d

    def content_hash(self) -> str:
        blob = json.dumps(self.content(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def filename(self) -> str:
        return f"{self.content_hash()[:16]}.json"

    def hm_consistent(self, tol: float = 1e-9) -> bool:
        acc = self.accuracy
        if not acc:
            return True
        return abs(acc["hm"] - harmonic_mean(acc["base"], acc["novel"])) <= tol


_FIELDS = {f.name for f in dataclasses.fields(RunRecord)}
_REQUIRED = {"config", "seed"}


def dumps_record(record: RunRecord) -> str:
    return json.dumps(dataclasses.asdict(record), sort_keys=True, indent=1) + "\n"


def save_record(record: RunRecord, directory) -> str:
    """Write ``record`` into ``directory`` under its hash name and return the path.

    Records are write-once: an existing file with different bytes is an error.
    """
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, record.filename())
    text = dumps_record(record)
    if os.path.exists(path):
        with open(path) as fh:
            if fh.read() == text:
                return path
        raise FileExistsError(f"{path} already holds a different record")
    with open(path, "x") as fh:
        fh.write(text)
    return path


def loads_record(text: str, path=None) -> RunRecord:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise RecordParseError(err.msg, path=path, line=err.lineno) from None
    if not isinstance(raw, dict):
        raise RecordParseError("top level must be an object", path=path, line=1)
    unknown = set(raw) - _FIELDS
    missing = _REQUIRED - set(raw)
    if unknown or missing:
        raise RecordParseError(f"unknown fields {sorted(unknown)}, missing {sorted(missing)}", path=path, line=1)
    return RunRecord(**raw)


def load_record(path) -> RunRecord:
    with open(path) as fh:
        return loads_record(fh.read(), path=path)
