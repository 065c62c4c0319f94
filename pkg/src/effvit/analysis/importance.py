"""First-order Taylor channel importance: |sum over a channel's weights of weight * grad|."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from effvit.analysis.reports import dumps
from effvit.core import tensor as T
from effvit.core.tensor import Tensor
from effvit.errors import ParameterError, StateError
from effvit.model import nn
from effvit.model.network import Model


def channel_scores(weight: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One score per output channel (axis 0), aggregated over every other axis."""
    prod = weight.astype(np.float64) * grad.astype(np.float64)
    return np.abs(prod.reshape(prod.shape[0], -1).sum(axis=1))


_HEAD_QKV = re.compile(r"(?P<block>.*)\.attn\.heads\.(?P<head>\d+)\.qkv\.conv\.weight$")
_FFN = re.compile(r"(?P<block>.*?)\.(?P<sub>(?:pre_|post_|pre\.|post\.)ffn\d+)\.pw1\.conv\.weight$")


def classify(name: str) -> str:
    if _HEAD_QKV.match(name):
        return "qkv"
    if ".qdw." in name:
        return "q_dw"
    if ".attn.proj." in name:
        return "attn_proj"
    if "ffn" in name and ".pw1." in name:
        return "ffn"
    if "ffn" in name and ".pw2." in name:
        return "ffn_out"
    if re.search(r"(^|\.)(pre_|post_)?dw\d*\.conv", name):
        return "token_mixer"
    if name.startswith("patch_embed"):
        return "embed"
    if ".merge." in name:
        return "subsample"
    if name.startswith("head"):
        return "classifier"
    return "other"


@dataclass
class ImportanceReport:
    scores: dict[str, np.ndarray] = field(default_factory=dict)
    groups: dict[str, str] = field(default_factory=dict)
    # embedding width of the block each tensor belongs to
    widths: dict[str, int] = field(default_factory=dict)
    loss: float = 0.0
    qk_dim: int | None = None

    def ranking(self, name: str) -> list[int]:
        """Channels of one tensor, most important first (ties keep index order)."""
        return [int(i) for i in np.argsort(-self.scores[name], kind="stable")]

    def channel_groups(self) -> list[tuple[str, str, str, np.ndarray]]:
        """(block, group, tensor, scores) with qkv tensors split into q/k/v channel ranges."""
        out = []
        for name, s in self.scores.items():
            g = self.groups[name]
            if g == "qkv" and self.qk_dim:
                block = _HEAD_QKV.match(name).group("block")
                q = self.qk_dim
                out += [(block, "q", name, s[:q]), (block, "k", name, s[q : 2 * q]),
                        (block, "v", name, s[2 * q :])]
            elif g == "ffn":
                m = _FFN.match(name)
                out.append((m.group("block"), m.group("sub").replace(".", "_"), name, s))
        return out

    def retention(self, keep: float = 0.5) -> dict[str, dict[str, dict[str, float]]]:
        """Globally keep the top ``keep`` fraction of Q/K/V/FFN channels.

        Returns per block and group the channel count before and after, each
        divided by the block's embedding width (the quantity plotted against
        depth when studying where a pruned transformer keeps its width).
        """
        entries = self.channel_groups()
        if not entries:
            return {}
        pooled = np.sort(np.concatenate([e[3] for e in entries]))[::-1]
        n_keep = int(round(keep * len(pooled)))
        thresh = pooled[n_keep - 1] if n_keep > 0 else np.inf
        out: dict[str, dict[str, dict[str, float]]] = {}
        for block, group, name, s in entries:
            width = self.widths.get(name, 1)
            d = out.setdefault(block, {}).setdefault(group, {"before": 0.0, "after": 0.0})
            d["before"] += len(s) / width
            d["after"] += int((s >= thresh).sum()) / width
        return out

    def to_dict(self, keep: float = 0.5) -> dict:
        return {
            "loss": self.loss,
            "tensors": {n: {"group": self.groups[n], "scores": self.scores[n],
                            "ranking": self.ranking(n)} for n in self.scores},
            "retention": {"keep": keep, "blocks": self.retention(keep)},
        }

    def to_json(self, keep: float = 0.5) -> str:
        return dumps(self.to_dict(keep))

    def to_text(self, keep: float = 0.5) -> str:
        lines = [f"loss {self.loss:.6f}", f"{'tensor':<48}{'group':<12}{'ch':>5}{'max':>12}{'mean':>12}"]
        for n, s in self.scores.items():
            lines.append(f"{n:<48}{self.groups[n]:<12}{len(s):>5}{s.max():>12.4e}{s.mean():>12.4e}")
        lines.append(f"retention at keep={keep}:")
        for block, groups in self.retention(keep).items():
            parts = ", ".join(f"{g} {v['before']:.2f}->{v['after']:.2f}" for g, v in groups.items())
            lines.append(f"  {block}: {parts}")
        return "\n".join(lines) + "\n"


def taylor_importance(model: nn.Module, x: Tensor, labels, *, loss_scale: float = 1.0) -> ImportanceReport:
    """Score every conv/linear output channel from one train-mode forward/backward.

    Works on an f64 copy, so the caller's running statistics and ``.grad`` are
    untouched. Scores are sums of w*g that cancel heavily; in f32 they carry
    large relative error and scaling the loss reorders near-ties.
    """
    params = list(model.named_params())
    if not any(t.requires_grad for _, t in params):
        raise StateError("model has no trainable parameters; gradients are unavailable")
    if isinstance(model, Model) and x.shape[0] < 2:
        # the head BatchNorm normalizes over the batch axis, which is degenerate at B=1
        raise ParameterError("importance scoring on a full model needs a batch of at least 2")
    work = model.astype("f64")
    work.zero_grad()
    x = Tensor(np.asarray(x.data, dtype=np.float64))
    with T.record() as graph:
        logits = work(x, ctx=nn.Ctx(mode="train"))
        loss = T.cross_entropy(logits, labels)
        if loss_scale != 1.0:
            loss = T.scale(loss, loss_scale)
    T.backward(graph, loss)
    report = ImportanceReport(loss=loss.item())
    width = 1
    for name, mod in work.named_modules():
        if isinstance(mod, nn.GroupAttention):
            report.qk_dim, width = mod.qk_dim, mod.dim
        if isinstance(mod, (nn.Conv2d, nn.Linear)):
            w = mod.weight
            g = w.grad.data if w.grad is not None else np.zeros(w.shape)
            pname = f"{name}.weight" if name else "weight"
            report.scores[pname] = channel_scores(w.data, g)
            report.groups[pname] = classify(pname)
            report.widths[pname] = mod.cin if report.groups[pname] == "ffn" else width
    return report
