"""Append-only trial ledger shared by every search strategy."""
from __future__ import annotations

import csv
import json
import threading
from dataclasses import dataclass, field, replace
from typing import Optional

from .errors import SearchError

__all__ = ["TrialRecord", "Ledger", "LEDGER_COLUMNS"]

LEDGER_COLUMNS = ("birth_index", "assignment_json", "fidelity", "seed", "val_metric",
                  "test_metric", "train_loss", "wall_seconds", "epochs", "status", "reason",
                  "graph_id", "signature_json", "entry")


@dataclass(frozen=True)
class TrialRecord:
    assignment: object
    fidelity: str = "full"
    seed: int = 0
    val_metric: float = 0.0
    test_metric: Optional[float] = None
    train_loss: Optional[float] = None
    wall_seconds: float = 0.0
    epochs: int = 0
    birth_index: int = -1
    status: str = "ok"
    reason: str = ""
    graph_id: str = "full"
    signature_json: str = ""
    entry: str = ""
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.status == "ok" and not 0.0 <= self.val_metric <= 1.0:
            raise ValueError(f"val_metric {self.val_metric} outside [0, 1]")

    @property
    def ok(self):
        return self.status == "ok"

    @property
    def assignment_json(self):
        a = self.assignment
        if a is None:
            return "null"
        if hasattr(a, "key"):
            return a.key()
        return json.dumps(a, sort_keys=True, separators=(",", ":"))

    def row(self):
        def num(v):
            return "" if v is None else repr(float(v))
        return {
            "birth_index": str(self.birth_index),
            "assignment_json": self.assignment_json,
            "fidelity": self.fidelity,
            "seed": str(self.seed),
            "val_metric": num(self.val_metric) if self.ok else "",
            "test_metric": num(self.test_metric),
            "train_loss": num(self.train_loss),
            "wall_seconds": num(self.wall_seconds),
            "epochs": str(self.epochs),
            "status": self.status,
            "reason": self.reason,
            "graph_id": self.graph_id,
            "signature_json": self.signature_json,
            "entry": self.entry,
        }

    def to_json(self, timing=True):
        row = self.row()
        out = {
            "birth_index": self.birth_index,
            "assignment": json.loads(row["assignment_json"]),
            "fidelity": self.fidelity,
            "seed": self.seed,
            "val_metric": self.val_metric if self.ok else None,
            "test_metric": self.test_metric,
            "train_loss": self.train_loss,
            "epochs": self.epochs,
            "status": self.status,
            "reason": self.reason,
            "graph_id": self.graph_id,
            "entry": self.entry,
        }
        if timing:
            out["wall_seconds"] = self.wall_seconds
            if "start_offset" in self.extra:
                out["start_offset"] = self.extra["start_offset"]
        return out


class Ledger:
    """Ordered trial records; ``append`` assigns a unique monotone birth index."""

    def __init__(self, records=()):
        self._records = []
        self._lock = threading.Lock()
        for r in records:
            self.append(r)

    def append(self, record: TrialRecord) -> TrialRecord:
        with self._lock:
            record = replace(record, birth_index=len(self._records))
            self._records.append(record)
        return record

    def __iter__(self):
        return iter(list(self._records))

    def __len__(self):
        return len(self._records)

    def __getitem__(self, i):
        return self._records[i]

    @property
    def records(self):
        return list(self._records)

    def successful(self):
        return [r for r in self._records if r.ok]

    def best(self):
        """Highest val_metric; ties go to the lower birth index."""
        ok = self.successful()
        if not ok:
            raise SearchError("no successful trial in ledger")
        return max(ok, key=lambda r: (r.val_metric, -r.birth_index))

    def running_best(self):
        out, best = [], -1.0
        for r in self._records:
            if r.ok:
                best = max(best, r.val_metric)
            out.append(best)
        return out

    def total_epochs(self, graph_id=None):
        return sum(r.epochs for r in self._records
                   if graph_id is None or r.graph_id == graph_id)

    def extend(self, other):
        for r in other:
            self.append(r)
        return self

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LEDGER_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in self._records:
                w.writerow(r.row())
        return path

    @staticmethod
    def read_csv(path):
        with open(path, "r", encoding="utf-8", newline="") as fh:
            return list(csv.DictReader(fh))
