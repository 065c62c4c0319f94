"""Side-by-side head-similarity reports for cascaded-group vs full-feature attention."""

from __future__ import annotations

from dataclasses import dataclass

from effvit.analysis.reports import dumps
from effvit.analysis.similarity import SimilarityReport, head_similarity
from effvit.core import tensor as T
from effvit.core.rng import Rng
from effvit.model.network import build_model
from effvit.model.nn import AttentionTrace
from effvit.model.spec import ModelSpec, get_spec


@dataclass
class PairedSimilarity:
    cga: SimilarityReport
    mhsa: SimilarityReport
    partial: bool

    def to_dict(self) -> dict:
        return {"cga": self.cga.to_dict(), "mhsa": self.mhsa.to_dict(), "partial_coverage": self.partial}

    def to_json(self) -> str:
        return dumps(self.to_dict())

    def to_text(self) -> str:
        lines = [f"{'block':<6}{'label':<28}{'cga':>12}{'mhsa':>12}"]
        for i, (a, b) in enumerate(zip(self.cga.blocks, self.mhsa.blocks)):
            fa = "-" if a["mean"] is None else f"{a['mean']:.6f}"
            fb = "-" if b["mean"] is None else f"{b['mean']:.6f}"
            lines.append(f"{i:<6}{a['label']:<28}{fa:>12}{fb:>12}")
        if self.partial:
            lines.append("note: single-head stages have no similarity entry (partial coverage)")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        rows = ["variant,block,head,max_cos"]
        for tag, rep in (("cga", self.cga), ("mhsa", self.mhsa)):
            for i, b in enumerate(rep.blocks):
                rows += [f"{tag},{i},{j},{v!r}" for j, v in enumerate(b["heads"])]
        return "\n".join(rows) + "\n"


def traced_similarity(model, x) -> SimilarityReport:
    trace = AttentionTrace()
    with T.no_checks():
        model(x, trace=trace)
    return head_similarity(trace)


def compare_attention_variants(spec: ModelSpec | str, seed: int = 42, batch: int = 2, *,
                               shared_mhsa: bool = False) -> PairedSimilarity:
    """Build both attention variants from one seed and trace them on one random batch.

    Weights for each model come from ``Rng(seed)``; the batch, uniform in
    [-1, 1], from ``Rng(seed + 1)``. No pass/fail is implied: untrained
    weights carry no accuracy meaning.
    """
    spec = get_spec(spec)
    cga = build_model(spec, Rng(seed), attention="cga")
    mhsa = build_model(spec, Rng(seed), attention="mhsa", shared_heads=shared_mhsa)
    r = spec.input_resolution
    x = T.uniform((batch, 3, r, r), Rng((seed + 1) % 2**64), -1, 1)
    a, b = traced_similarity(cga, x), traced_similarity(mhsa, x)
    return PairedSimilarity(a, b, partial=min(spec.heads) < 2)
