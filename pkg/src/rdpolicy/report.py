"""Evaluation reports: a summary mapping plus named per-row tables."""

from dataclasses import dataclass, field
import hashlib
import json
import os

import numpy as np
import pandas as pd
import yaml


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def config_hash(config):
    blob = json.dumps(_plain(config), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EvalReport:
    experiment: str
    summary: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)

    def table(self, name):
        return self.tables[name]

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        written = {}
        for name, frame in self.tables.items():
            path = os.path.join(out_dir, f"{name}.csv")
            frame.to_csv(path, index=False, float_format="%.17g")
            written[name] = f"{name}.csv"
        doc = {"experiment": self.experiment, "tables": written, **_plain(self.summary)}
        with open(os.path.join(out_dir, "report.yaml"), "w") as fh:
            yaml.safe_dump(doc, fh, sort_keys=False)
        return out_dir

    @classmethod
    def load(cls, out_dir):
        with open(os.path.join(out_dir, "report.yaml")) as fh:
            doc = yaml.safe_load(fh)
        tables = {name: pd.read_csv(os.path.join(out_dir, fname), float_precision="round_trip")
                  for name, fname in doc.pop("tables").items()}
        return cls(experiment=doc.pop("experiment"), summary=doc, tables=tables)
