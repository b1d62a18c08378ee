"""CSV/JSON export of training records and bundle manifests.

Floats are written with ``repr`` so parsing returns the identical value;
missing entries are empty cells.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os

import numpy as np

from ..optim import TrainRecord


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def _parse(s: str):
    if s == "":
        return None
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def rows_to_csv(rows: list, columns: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    return buf.getvalue()


def record_to_csv(rec: TrainRecord) -> str:
    return rows_to_csv(rec.rows, rec.columns)


def record_from_csv(text: str, meta=None) -> TrainRecord:
    rd = csv.reader(io.StringIO(text))
    header = next(rd)
    rows = []
    for line in rd:
        rows.append({c: _parse(v) for c, v in zip(header, line)})
    return TrainRecord(rows=rows, columns=list(header), meta=dict(meta or {}))


def rows_equal(a: list, b: list) -> bool:
    """Row-wise equality that treats nan as equal to nan."""
    if len(a) != len(b):
        return False
    for ra, rb in zip(a, b):
        if set(k for k, v in ra.items() if v is not None) != set(k for k, v in rb.items() if v is not None):
            return False
        for k, v in ra.items():
            w = rb.get(k)
            if isinstance(v, float) and isinstance(w, float) and math.isnan(v) and math.isnan(w):
                continue
            if v != w or type(v) is not type(w):
                return False
    return True


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Bundle:
    """Output directory that hashes every file it writes."""

    def __init__(self, root: str):
        self.root = root
        self.files: dict = {}
        self.notes: list = []
        os.makedirs(root, exist_ok=True)

    def write_text(self, name: str, text: str) -> str:
        path = os.path.join(self.root, name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        self.files[name] = sha256_file(path)
        return path

    def note(self, msg: str) -> None:
        self.notes.append(msg)

    def manifest(self, extra=None) -> dict:
        m = {"files": dict(sorted(self.files.items())), "notes": list(self.notes)}
        if extra:
            m.update(extra)
        return m

    def write_manifest(self, extra=None) -> str:
        path = os.path.join(self.root, "manifest.json")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(dumps(self.manifest(extra)))
        return path


def verify_manifest(root: str) -> list:
    """Names whose on-disk hash differs from the manifest (empty when intact)."""
    with open(os.path.join(root, "manifest.json")) as fh:
        m = json.load(fh)
    bad = []
    for name, digest in m["files"].items():
        p = os.path.join(root, name)
        if not os.path.isfile(p) or sha256_file(p) != digest:
            bad.append(name)
    return bad
