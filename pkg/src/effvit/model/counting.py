"""Parameter and multiply-accumulate accounting.

One MAC counts as one FLOP. Convolutions, linear layers and the two attention
matmuls (QK^T and AV) are counted; BN, activations, softmax and additions are not.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from effvit.core import tensor as T
from effvit.model.nn import GroupAttention, Module


def count_params(module: Module) -> int:
    """Learnable scalars: conv/linear weights and biases, BN gamma/beta. Running stats excluded."""
    return int(sum(t.size for _, t in module.named_params()))


def count_flops(model: Module, resolution: int | None = None, batch: int = 1) -> int:
    if resolution is None:
        resolution = model.spec.input_resolution
    _, n = model.macs((batch, 3, resolution, resolution))
    return int(n)


def traced_macs(module: Module, x: T.Tensor, **call_kwargs) -> int:
    """Count MACs by observing the ops a real forward executes.

    Independent of the analytic :meth:`Module.macs` walk; the two must agree.
    """
    total = 0

    def hook(name, category, dt, inputs, out):
        nonlocal total
        if name == "conv2d":
            total += out.size * int(np.prod(inputs[1].shape[1:]))
        elif name == "linear":
            total += out.size * inputs[1].shape[1]
        elif name == "matmul":
            total += out.size * inputs[0].shape[-1]

    with T.op_hook(hook):
        module(x, **call_kwargs)
    return total


def qkv_projection_params(attn: GroupAttention) -> int:
    """Q, K and V projection weights of one attention module (BN excluded)."""
    return attn.qkv_weight_count()


@dataclass
class CountReport:
    variant: str
    resolution: int
    params: int
    flops: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["params_M"] = round(self.params / 1e6, 3)
        d["flops_M"] = round(self.flops / 1e6, 1)
        return d

    def to_text(self) -> str:
        return (f"params  {self.params} ({self.params / 1e6:.2f}M)\n"
                f"flops   {self.flops} ({self.flops / 1e6:.1f}M MACs @ {self.resolution})\n")


def count_report(model: Module, variant: str = "custom", resolution: int | None = None) -> CountReport:
    r = resolution or model.spec.input_resolution
    return CountReport(variant, r, count_params(model), count_flops(model, r))
