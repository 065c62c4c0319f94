"""Per-head maximum cosine similarity of attention maps within each block."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from effvit.analysis.reports import dumps, fmt
from effvit.errors import InputError
from effvit.model.nn import AttentionTrace


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise InputError("cosine similarity of a zero attention map is undefined")
    return float(np.clip(float(np.dot(a, b)) / (na * nb), -1.0, 1.0))


@dataclass
class SimilarityReport:
    # each block: {"label": str, "heads": [max-cos per head], "mean": float | None}
    blocks: list[dict] = field(default_factory=list)

    @property
    def overall_mean(self) -> float | None:
        means = [b["mean"] for b in self.blocks if b["mean"] is not None]
        return float(np.mean(means)) if means else None

    @property
    def coverage(self) -> float:
        return sum(b["mean"] is not None for b in self.blocks) / len(self.blocks) if self.blocks else 0.0

    def to_dict(self) -> dict:
        return {"blocks": self.blocks, "overall_mean": self.overall_mean, "coverage": self.coverage}

    def to_json(self) -> str:
        return dumps(self.to_dict())

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("block,head,max_cos\n")
        for i, b in enumerate(self.blocks):
            for j, v in enumerate(b["heads"]):
                buf.write(f"{i},{j},{v!r}\n")
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'block':<6}{'label':<28}{'heads':>6}{'mean max-cos':>16}"]
        for i, b in enumerate(self.blocks):
            lines.append(f"{i:<6}{b['label']:<28}{len(b['heads']):>6}{fmt(b['mean']):>16}")
        lines.append(f"overall mean {fmt(self.overall_mean)}  (coverage {self.coverage:.2f})")
        return "\n".join(lines) + "\n"


def max_cosine_per_head(maps: list[np.ndarray]) -> list[float]:
    """Each map is batch-averaged and flattened; returns max cosine to any other head."""
    vecs = [np.asarray(m, dtype=np.float64).mean(axis=0).ravel() for m in maps]
    h = len(vecs)
    sim = np.full((h, h), -np.inf)
    for i in range(h):
        for j in range(i + 1, h):
            sim[i, j] = sim[j, i] = cosine(vecs[i], vecs[j])
    return [float(sim[i].max()) for i in range(h)] if h > 1 else []


def head_similarity(trace: AttentionTrace) -> SimilarityReport:
    if not trace.blocks:
        raise InputError("attention trace is empty")
    report = SimilarityReport()
    for b in trace.blocks:
        vals = max_cosine_per_head(b["maps"])
        report.blocks.append({"label": b["label"], "heads": vals,
                              "mean": float(np.mean(vals)) if vals else None})
    return report
