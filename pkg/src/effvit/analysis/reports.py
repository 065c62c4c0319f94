"""Shared serialization helpers for analyzer reports."""

from __future__ import annotations

import json

import numpy as np


def _plain(o):
    if isinstance(o, dict):
        return {str(k): _plain(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_plain(v) for v in o]
    if isinstance(o, np.ndarray):
        return _plain(o.tolist())
    if isinstance(o, np.generic):
        return o.item()
    return o


def dumps(d: dict) -> str:
    return json.dumps(_plain(d), indent=2, sort_keys=True) + "\n"


def fmt(v: float | None, digits: int = 6) -> str:
    return "-" if v is None else f"{v:.{digits}f}"
