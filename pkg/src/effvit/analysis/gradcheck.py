"""Analytic-vs-finite-difference gradient checking for modules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from effvit.analysis.reports import dumps
from effvit.core import tensor as T
from effvit.core.rng import Rng
from effvit.core.tensor import Tensor
from effvit.errors import ContractError
from effvit.model import nn


REL_FLOOR = 1e-3


def rel_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """|a - b| / max(|a|, |b|, REL_FLOOR).

    The floor only matters for gradients that are exactly zero analytically
    (e.g. a shift of K, which softmax cancels), where the finite difference
    returns pure roundoff and an unfloored ratio would be ~1.
    """
    return np.abs(a - b) / np.maximum(REL_FLOOR, np.maximum(np.abs(a), np.abs(b)))


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[dict] = field(default_factory=list)  # {"name", "max_rel", "mean_rel", "n"}
    label: str = ""

    @property
    def max_rel(self) -> float:
        return max((e["max_rel"] for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel < self.tolerance

    def to_dict(self) -> dict:
        return {"label": self.label, "tolerance": self.tolerance, "passed": self.passed,
                "max_rel": self.max_rel, "entries": self.entries}

    def to_json(self) -> str:
        return dumps(self.to_dict())

    def to_text(self) -> str:
        lines = [f"gradcheck {self.label} (tol {self.tolerance:g}): {'PASS' if self.passed else 'FAIL'}"]
        for e in self.entries:
            lines.append(f"  {e['name']:<40} n={e['n']:<6} max={e['max_rel']:.3e} mean={e['mean_rel']:.3e}")
        return "\n".join(lines) + "\n"


def _call(module, x: Tensor, mode: str) -> Tensor:
    if isinstance(module, nn.Module):
        return module(x, ctx=nn.Ctx(mode=mode))
    return module(x)


def gradcheck(module, x: Tensor, tolerance: float = 1e-4, *, mode: str = "infer",
              params: dict[str, Tensor] | None = None,
              loss_fn: Callable[[Tensor], Tensor] | None = None,
              eps: float = 1e-5, seed: int = 0, check_input: bool = True,
              label: str = "") -> GradCheckReport:
    """Compare backward() against central differences on every parameter and the input.

    ``module`` is a :class:`Module` or any callable ``f(x) -> Tensor`` (pass its
    leaves through ``params``). The default loss is ``sum(out * R)`` with a
    fixed random ``R``, so ops whose plain sum has zero gradient (BN, softmax)
    are still exercised.
    """
    if params is None:
        params = dict(module.named_params()) if isinstance(module, nn.Module) else {}
    for name, t in [("input", x), *params.items()]:
        if t.dtype != np.float64:
            raise ContractError(f"gradcheck requires f64 tensors; {name} is {t.dtype}")
    buffers = [t for _, t in module.named_buffers()] if isinstance(module, nn.Module) else []
    saved = [b.data.copy() for b in buffers]

    probe: dict[str, np.ndarray] = {}

    def loss_of(xt: Tensor) -> Tensor:
        out = _call(module, xt, mode)
        if loss_fn is not None:
            loss = loss_fn(out)
        else:
            if "R" not in probe:
                probe["R"] = Rng(seed).uniform(out.size, -1, 1).reshape(out.shape)
            loss = T.reduce_sum(T.mul(out, Tensor(probe["R"], dtype="f64")))
        if loss.size != 1:
            raise ContractError(f"loss wrapper returned shape {loss.shape}, expected a scalar")
        return loss

    xt = Tensor(x.data.copy(), requires_grad=True)
    for t in params.values():
        t.grad = None
    with T.record() as graph:
        loss = loss_of(xt)
    T.backward(graph, loss)

    report = GradCheckReport(tolerance, label=label)
    targets = ([("input", xt)] if check_input else []) + list(params.items())
    for name, t in targets:
        analytic = t.grad.data if t.grad is not None else np.zeros(t.shape)
        if name == "input":
            numeric = T.finite_diff_grad(lambda v: loss_of(v), xt, eps).data
        else:
            original = t.data

            def f(v, t=t):
                t.data = v.data
                return loss_of(xt)

            try:
                numeric = T.finite_diff_grad(f, Tensor(original.copy()), eps).data
            finally:
                t.data = original
        err = rel_error(analytic, numeric)
        report.entries.append({"name": name, "n": int(err.size), "max_rel": float(err.max()),
                               "mean_rel": float(err.mean())})
    for b, s in zip(buffers, saved):
        b.data[...] = s
    return report


# Small f64 cases shared by the CLI and the test-suite.

TOY_CASES = ("linear", "conv2d", "conv2d_s2", "depthwise", "depthwise_s2", "batchnorm_train",
             "softmax", "cga", "sandwich", "subsample")


class _Softmax(nn.Module):
    def forward(self, x, ctx):
        return T.softmax_lastdim(x)

    def macs(self, shape):
        return shape, 0


def _randomize_bn(module: nn.Module, rng: Rng) -> None:
    for _, m in module.named_modules():
        if isinstance(m, nn.BatchNorm):
            m.weight.data[...] = rng.uniform(m.c, 0.5, 1.5)
            m.bias.data[...] = rng.uniform(m.c, -0.5, 0.5)
            m.running_mean.data[...] = rng.uniform(m.c, -0.5, 0.5)
            m.running_var.data[...] = rng.uniform(m.c, 0.5, 1.5)


def _scale_weights(module: nn.Module, rng: Rng) -> None:
    # std 0.02 init makes the attention nearly uniform; use O(1) weights for a sharper check
    for name, t in module.named_params():
        if name.endswith("weight") and t.ndim >= 2:
            fan_in = int(np.prod(t.shape[1:]))
            t.data[...] = rng.uniform(t.size, -1, 1).reshape(t.shape) * np.sqrt(3.0 / fan_in)


def toy_case(name: str, seed: int = 0) -> tuple[nn.Module, Tensor, str]:
    """Return (module, input, mode) for one named gradcheck case, all in f64."""
    rng = Rng(seed)
    kw = dict(rng=rng, dtype="f64")
    if name == "linear":
        mod, shape, mode = nn.Linear(5, 4, **kw), (3, 5), "infer"
    elif name == "conv2d":
        mod, shape, mode = nn.Conv2d(3, 4, 3, 1, 1, bias=True, **kw), (2, 3, 5, 5), "infer"
    elif name == "conv2d_s2":
        mod, shape, mode = nn.Conv2d(3, 4, 3, 2, 1, bias=True, **kw), (2, 3, 7, 7), "infer"
    elif name == "depthwise":
        mod, shape, mode = nn.Conv2d(4, 4, 3, 1, 1, groups=4, **kw), (2, 4, 5, 5), "infer"
    elif name == "depthwise_s2":
        mod, shape, mode = nn.Conv2d(4, 4, 3, 2, 1, groups=4, **kw), (2, 4, 7, 7), "infer"
    elif name == "batchnorm_train":
        mod, shape, mode = nn.BatchNorm(3, dtype="f64"), (4, 3, 3, 3), "train"
    elif name == "softmax":
        mod, shape, mode = _Softmax(), (3, 6), "infer"
    elif name == "cga":
        mod, shape, mode = nn.GroupAttention(8, 2, qk_dim=4, **kw), (1, 8, 4, 4), "infer"
    elif name == "sandwich":
        mod, shape, mode = nn.SandwichBlock(8, 2, qk_dim=4, **kw), (1, 8, 4, 4), "infer"
    elif name == "subsample":
        mod, shape, mode = nn.SubsampleBlock(8, 16, **kw), (2, 8, 4, 4), "infer"
    else:
        raise ValueError(f"unknown gradcheck case {name!r}; expected one of {TOY_CASES}")
    _scale_weights(mod, rng)
    _randomize_bn(mod, rng)
    x = T.uniform(shape, rng, -2, 2, dtype="f64")
    return mod, x, mode


def check_case(name: str, tolerance: float = 1e-4, seed: int = 0) -> GradCheckReport:
    mod, x, mode = toy_case(name, seed)
    return gradcheck(mod, x, tolerance, mode=mode, seed=seed, label=name)
