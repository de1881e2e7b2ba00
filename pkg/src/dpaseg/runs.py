"""Run directories and their manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

from .errors import ConfigurationError

MANIFEST_NAME = "manifest.json"
CONFIG_NAME = "config.txt"
METRICS_NAME = "metrics.csv"
METRICS_COLUMNS = ("epoch", "lr", "loss_S", "loss_T", "n_pseudo", "val_mIOU")


def utc_now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def tree_digest(path):
    """sha256 over a file, or over every file below a directory in sorted order.

    Manifests are skipped: their timestamps are not part of a run's data.
    """
    h = hashlib.sha256()
    if os.path.isfile(path):
        with open(path, "rb") as fh:
            h.update(fh.read())
        return h.hexdigest()
    if not os.path.isdir(path):
        raise ConfigurationError(f"input not found: {path}")
    for root, dirs, files in os.walk(path):
        dirs.sort()
        for name in sorted(files):
            if name == MANIFEST_NAME:
                continue
            full = os.path.join(root, name)
            h.update(os.path.relpath(full, path).encode("utf-8") + b"\0")
            with open(full, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_path: str
    config_text: str
    seed: int
    inputs: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    input_digests: dict = field(default_factory=dict)
    run_id: str = ""
    started: str = ""
    finished: str = ""

    def compute_run_id(self):
        """Short hex digest of everything the outputs depend on."""
        h = hashlib.sha1()
        h.update(self.command.encode("utf-8") + b"\0")
        h.update(self.config_text.encode("utf-8") + b"\0")
        h.update(json.dumps(self.options, sort_keys=True).encode("utf-8") + b"\0")
        for key in sorted(self.input_digests):
            h.update(f"{key}={self.input_digests[key]}\0".encode("utf-8"))
        return h.hexdigest()[:12]

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, MANIFEST_NAME)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    @classmethod
    def load(cls, path):
        if os.path.isdir(path):
            path = os.path.join(path, MANIFEST_NAME)
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigurationError(f"cannot read manifest {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"manifest {path} is not valid JSON: {exc.msg}") from None
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in doc.items() if k in known})


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(path, history_rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for row in history_rows:
            writer.writerow([_cell(row.get(c)) for c in METRICS_COLUMNS])


def read_metrics_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
