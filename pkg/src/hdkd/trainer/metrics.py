"""Newline-delimited ``key=value`` metric records."""
from __future__ import annotations

import numpy as np


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def format_record(rec: dict) -> str:
    return " ".join(f"{k}={_fmt(v)}" for k, v in rec.items())


def _parse_value(s: str):
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def parse_record(line: str) -> dict:
    out = {}
    for tok in line.split():
        k, _, v = tok.partition("=")
        out[k] = _parse_value(v)
    return out


class MetricsLog:
    def __init__(self, path: str | None = None):
        self.records: list[dict] = []
        self.path = path
        if path:
            open(path, "w").close()

    def log(self, **rec) -> dict:
        self.records.append(rec)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(format_record(rec) + "\n")
        return rec

    def of_kind(self, kind: str) -> list:
        return [r for r in self.records if r.get("kind") == kind]

    def text(self) -> str:
        return "".join(format_record(r) + "\n" for r in self.records)


def read_metrics(path: str) -> list:
    with open(path) as fh:
        return [parse_record(line) for line in fh if line.strip()]
