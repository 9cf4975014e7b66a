"""Per-task measurement sets and their line-delimited file format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHANNELS = ("f", "b", "u")


@dataclass
class Measurements:
    x: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        if self.x.shape[0] == 1 and np.asarray(self.values).size != 1:
            self.x = self.x.T
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.x.shape[0] != self.values.size:
            raise ValueError(f"{self.x.shape[0]} points but {self.values.size} values")

    def __len__(self):
        return self.values.size

    def to_json(self):
        return {"x": self.x.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_json(cls, doc):
        x = np.asarray(doc["x"], dtype=np.float64).reshape(len(doc["values"]), -1)
        return cls(x, doc["values"])


@dataclass
class TaskDataset:
    """Measurements of one task.

    ``f`` holds source-term data at the residual collocation points (zeros
    when the source is known to vanish), ``b`` boundary/initial data and ``u``
    solution data.  ``params`` records the generator draws, ``reference`` an
    optional clean solution on an evaluation grid.
    """

    task_id: int
    f: Measurements | None = None
    b: Measurements | None = None
    u: Measurements | None = None
    params: dict = field(default_factory=dict)
    noise: dict = field(default_factory=dict)
    reference: dict = field(default_factory=dict)

    def __post_init__(self):
        for ch in CHANNELS:
            m = getattr(self, ch)
            if m is not None and len(m) == 0:
                setattr(self, ch, None)

    def channel(self, name: str) -> Measurements | None:
        return getattr(self, name)

    @property
    def residual_points(self) -> np.ndarray | None:
        return None if self.f is None else self.f.x

    def counts(self) -> dict:
        return {ch: 0 if getattr(self, ch) is None else len(getattr(self, ch)) for ch in CHANNELS}

    def to_json(self) -> dict:
        doc = {"task_id": int(self.task_id), "params": _plain(self.params),
               "noise": _plain(self.noise)}
        for ch in CHANNELS:
            m = getattr(self, ch)
            doc[ch] = None if m is None else m.to_json()
        if self.reference:
            doc["reference"] = _plain(self.reference)
        return doc

    @classmethod
    def from_json(cls, doc) -> "TaskDataset":
        kw = {ch: None if doc.get(ch) is None else Measurements.from_json(doc[ch]) for ch in CHANNELS}
        ref = {k: np.asarray(v) if isinstance(v, list) else v
               for k, v in doc.get("reference", {}).items()}
        return cls(doc["task_id"], params=doc.get("params", {}), noise=doc.get("noise", {}),
                   reference=ref, **kw)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def write_tasks(path, tasks, meta: dict) -> None:
    """One JSON record per line plus a ``<stem>.meta.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for t in tasks:
            fh.write(json.dumps(t.to_json()) + "\n")
    meta_path(path).write_text(json.dumps(_plain(meta), indent=1, sort_keys=True))


def read_tasks(path):
    path = Path(path)
    tasks = [TaskDataset.from_json(json.loads(line)) for line in path.read_text().splitlines() if line]
    mp = meta_path(path)
    meta = json.loads(mp.read_text()) if mp.exists() else {}
    return tasks, meta
