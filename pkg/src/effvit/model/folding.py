"""Fold inference-mode BatchNorm into adjacent conv/linear layers."""

from __future__ import annotations

import copy

import numpy as np

from effvit.core.tensor import Tensor
from effvit.errors import StructureError
from effvit.model.nn import BatchNorm, Conv2d, Linear, Module, Sequential


def _bn_affine(bn: BatchNorm) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (scale, shift) so that bn(x) == scale * x + shift, in f64."""
    s = bn.weight.data.astype(np.float64) / np.sqrt(bn.running_var.data.astype(np.float64) + bn.eps)
    return s, bn.bias.data.astype(np.float64) - bn.running_mean.data.astype(np.float64) * s


def _set_weights(layer, w: np.ndarray, b: np.ndarray) -> None:
    dt = layer.weight.dtype
    layer.weight = Tensor(w.astype(dt), requires_grad=True)
    layer.bias = Tensor(b.astype(dt), requires_grad=True)


def _bias_or_zero(layer) -> np.ndarray:
    if layer.has_bias:
        return layer.bias.data.astype(np.float64)
    return np.zeros(layer.weight.shape[0])


def fold_into_previous(layer: Conv2d | Linear, bn: BatchNorm) -> None:
    s, t = _bn_affine(bn)
    w = layer.weight.data.astype(np.float64)
    shape = (-1,) + (1,) * (w.ndim - 1)
    _set_weights(layer, w * s.reshape(shape), _bias_or_zero(layer) * s + t)


def fold_into_next(bn: BatchNorm, layer: Linear) -> None:
    s, t = _bn_affine(bn)
    w = layer.weight.data.astype(np.float64)
    _set_weights(layer, w * s[None, :], _bias_or_zero(layer) + w @ t)


def _fold_sequence(seq: Sequential) -> None:
    items = list(seq.children())
    out: list[tuple[str, Module]] = []
    i = 0
    while i < len(items):
        name, m = items[i]
        if isinstance(m, BatchNorm):
            prev = out[-1][1] if out else None
            nxt = items[i + 1][1] if i + 1 < len(items) else None
            if isinstance(prev, (Conv2d, Linear)):
                fold_into_previous(prev, m)
            elif isinstance(nxt, Linear):
                fold_into_next(m, nxt)
            else:
                raise StructureError(f"BatchNorm {name!r} has no adjacent conv/linear to fold into")
            i += 1
            continue
        out.append((name, m))
        i += 1
    seq.replace_children(out)


def fold_bn(model: Module) -> Module:
    """Return a copy of ``model`` with every BatchNorm absorbed.

    A BN is folded into the conv/linear directly before it in the same
    sequence, or else into a linear directly after it. Any BN left over is a
    :class:`StructureError`.
    """
    new = copy.deepcopy(model)
    for _, mod in list(new.named_modules()):
        if isinstance(mod, Sequential):
            _fold_sequence(mod)
    for name, mod in new.named_modules():
        if isinstance(mod, BatchNorm):
            raise StructureError(f"BatchNorm at {name or '<root>'} has no foldable neighbour")
    if hasattr(new, "folded"):
        new.folded = True
    return new
