"""Layer modules and the EfficientViT building blocks.

A :class:`Module` owns named parameters (learnable tensors), buffers (BN
running statistics) and child modules, all kept in assignment order so that
registry names and RNG draw order are stable. Every module also reports its
multiply-accumulate count analytically through :meth:`Module.macs`.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from effvit.core import tensor as T
from effvit.core.rng import Rng
from effvit.core.tensor import Tensor
from effvit.errors import ShapeError

WEIGHT_STD = 0.02


@dataclass
class Ctx:
    mode: str = "infer"
    trace: "AttentionTrace | None" = None
    momentum: float = 0.1


class AttentionTrace:
    """Post-softmax attention maps captured during one forward pass.

    ``blocks`` is a list of ``{"label": str, "maps": [array [B, N, N] per head]}``.
    With ``record_inputs`` the per-head attention inputs (after the cascade
    addition) are kept under ``"inputs"`` as well.
    """

    def __init__(self, record_inputs: bool = False):
        self.blocks: list[dict] = []
        self.record_inputs = record_inputs

    def begin_block(self, label: str) -> None:
        self.blocks.append({"label": label, "maps": [], "inputs": []})

    def add_map(self, attn: np.ndarray) -> None:
        self.blocks[-1]["maps"].append(np.array(attn))

    def add_input(self, x: np.ndarray) -> None:
        if self.record_inputs:
            self.blocks[-1]["inputs"].append(np.array(x))

    def __len__(self) -> int:
        return len(self.blocks)

    def max_row_error(self) -> float:
        errs = [np.abs(m.sum(axis=-1) - 1).max() for b in self.blocks for m in b["maps"]]
        return float(max(errs)) if errs else 0.0


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and name not in self._buffers:
            self._params[name] = value
        elif isinstance(value, Tensor):
            self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __delattr__(self, name):
        for d in (self._params, self._buffers, self._children):
            d.pop(name, None)
        object.__delattr__(self, name)

    def register_buffer(self, name: str, t: Tensor) -> None:
        self._buffers[name] = t
        object.__setattr__(self, name, t)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(list(self._children.items()))

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, t in mod._params.items():
                yield (f"{mod_name}.{name}" if mod_name else name), t

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, t in mod._buffers.items():
                yield (f"{mod_name}.{name}" if mod_name else name), t

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        """Parameters followed by buffers; the order used by weight files."""
        yield from self.named_params()
        yield from self.named_buffers()

    def params(self) -> dict[str, Tensor]:
        return dict(self.named_params())

    def zero_grad(self) -> None:
        for _, t in self.named_params():
            t.grad = None

    def astype(self, dtype) -> "Module":
        """Deep copy with every parameter and buffer cast to ``dtype``."""
        dt = T.as_dtype(dtype)
        new = copy.deepcopy(self)
        for _, mod in new.named_modules():
            for d in (mod._params, mod._buffers):
                for name, t in list(d.items()):
                    nt = Tensor(t.data.astype(dt), requires_grad=t.requires_grad)
                    d[name] = nt
                    object.__setattr__(mod, name, nt)
        return new

    def __call__(self, x: Tensor, ctx: Ctx | None = None) -> Tensor:
        return self.forward(x, ctx or Ctx())

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        raise NotImplementedError

    def macs(self, shape: tuple[int, ...]) -> tuple[tuple[int, ...], int]:
        """Return (output shape, multiply-accumulate count) for an input of ``shape``."""
        raise NotImplementedError


def _param(shape, rng: Rng | None, dtype, fill: str) -> Tensor:
    if fill == "normal":
        return T.trunc_normal(shape, rng, WEIGHT_STD, dtype, requires_grad=True)
    return T.tensor_new(shape, fill, dtype=dtype, requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, pad=0, groups=1, bias=False, *, rng=None, dtype="f32"):
        super().__init__()
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.pad, self.groups = stride, pad, groups
        self.weight = _param((cout, cin // groups, k, k), rng, dtype, "normal")
        if bias:
            self.bias = _param((cout,), rng, dtype, "zeros")

    @property
    def has_bias(self) -> bool:
        return "bias" in self._params

    def forward(self, x, ctx):
        return T.conv2d(x, self.weight, self._params.get("bias"), self.stride, self.pad, self.groups)

    def macs(self, shape):
        b, _, h, w = shape
        ho = T.conv_out_extent(h, self.k, self.stride, self.pad)
        wo = T.conv_out_extent(w, self.k, self.stride, self.pad)
        return (b, self.cout, ho, wo), b * self.cout * (self.cin // self.groups) * self.k * self.k * ho * wo


class Linear(Module):
    def __init__(self, cin, cout, bias=True, *, rng=None, dtype="f32"):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.weight = _param((cout, cin), rng, dtype, "normal")
        if bias:
            self.bias = _param((cout,), rng, dtype, "zeros")

    @property
    def has_bias(self) -> bool:
        return "bias" in self._params

    def forward(self, x, ctx):
        return T.linear(x, self.weight, self._params.get("bias"))

    def macs(self, shape):
        return shape[:-1] + (self.cout,), int(np.prod(shape[:-1])) * self.cin * self.cout


class BatchNorm(Module):
    def __init__(self, c, eps=1e-5, *, dtype="f32"):
        super().__init__()
        self.c, self.eps = c, eps
        self.weight = _param((c,), None, dtype, "ones")
        self.bias = _param((c,), None, dtype, "zeros")
        self.register_buffer("running_mean", T.zeros((c,), dtype))
        self.register_buffer("running_var", T.ones((c,), dtype))

    def forward(self, x, ctx):
        return T.batchnorm(x, self.weight, self.bias, self.running_mean, self.running_var,
                           ctx.mode, ctx.momentum, self.eps)

    def macs(self, shape):
        return shape, 0


class ReLU(Module):
    def forward(self, x, ctx):
        return T.relu(x)

    def macs(self, shape):
        return shape, 0


class GlobalAvgPool(Module):
    def forward(self, x, ctx):
        return T.global_avg_pool(x)

    def macs(self, shape):
        return shape[:2], 0


class Sequential(Module):
    def __init__(self, *mods, **named):
        super().__init__()
        for i, m in enumerate(mods):
            setattr(self, str(i), m)
        for name, m in named.items():
            setattr(self, name, m)

    def __iter__(self):
        return iter(self._children.values())

    def __len__(self):
        return len(self._children)

    def __getitem__(self, i):
        return list(self._children.values())[i]

    def replace_children(self, items: list[tuple[str, Module]]) -> None:
        for name in list(self._children):
            delattr(self, name)
        for name, m in items:
            setattr(self, name, m)

    def forward(self, x, ctx):
        for m in self:
            x = m(x, ctx)
        return x

    def macs(self, shape):
        total = 0
        for m in self:
            shape, n = m.macs(shape)
            total += n
        return shape, total


def conv_bn(cin, cout, k=1, stride=1, pad=0, groups=1, *, rng, dtype="f32") -> Sequential:
    return Sequential(conv=Conv2d(cin, cout, k, stride, pad, groups, rng=rng, dtype=dtype),
                      bn=BatchNorm(cout, dtype=dtype))


def token_mixer(c, k=3, *, rng, dtype="f32") -> Sequential:
    """Depthwise k x k conv + BN: the local token-interaction sublayer."""
    return conv_bn(c, c, k, 1, k // 2, groups=c, rng=rng, dtype=dtype)


def ffn(c, ratio=2, *, rng, dtype="f32") -> Sequential:
    h = int(c * ratio)
    return Sequential(pw1=conv_bn(c, h, rng=rng, dtype=dtype), act=ReLU(),
                      pw2=conv_bn(h, c, rng=rng, dtype=dtype))


class SqueezeExcite(Module):
    def __init__(self, c, rd, *, rng, dtype="f32"):
        super().__init__()
        self.c = c
        self.reduce = Conv2d(c, rd, 1, bias=True, rng=rng, dtype=dtype)
        self.expand = Conv2d(rd, c, 1, bias=True, rng=rng, dtype=dtype)

    def forward(self, x, ctx):
        s = T.reshape(T.global_avg_pool(x), (x.shape[0], self.c, 1, 1))
        s = T.sigmoid(self.expand(T.relu(self.reduce(s, ctx)), ctx))
        return T.mul(x, s)

    def macs(self, shape):
        b = shape[0]
        _, n1 = self.reduce.macs((b, self.c, 1, 1))
        _, n2 = self.expand.macs((b, self.reduce.cout, 1, 1))
        return shape, n1 + n2


class AttentionHead(Module):
    def __init__(self, in_dim, qk_dim, v_dim, dw_kernel, *, rng, dtype="f32"):
        super().__init__()
        self.qk_dim, self.v_dim = qk_dim, v_dim
        self.qkv = conv_bn(in_dim, 2 * qk_dim + v_dim, rng=rng, dtype=dtype)
        self.qdw = token_mixer(qk_dim, dw_kernel, rng=rng, dtype=dtype)

    def forward(self, x, ctx):
        b, _, h, w = x.shape
        n = h * w
        q, k, v = T.split_channels(self.qkv(x, ctx), [self.qk_dim, self.qk_dim, self.v_dim])
        q = self.qdw(q, ctx)
        q = T.reshape(q, (b, self.qk_dim, n))
        k = T.reshape(k, (b, self.qk_dim, n))
        v = T.reshape(v, (b, self.v_dim, n))
        attn = T.matmul(T.transpose_last2(q), k)
        attn = T.softmax_lastdim(T.scale(attn, self.qk_dim ** -0.5))
        if ctx.trace is not None:
            ctx.trace.add_map(attn.data)
        out = T.matmul(v, T.transpose_last2(attn))
        return T.reshape(out, (b, self.v_dim, h, w))

    def macs(self, shape):
        b, _, h, w = shape
        n = h * w
        s, n1 = self.qkv.macs(shape)
        _, n2 = self.qdw.macs((b, self.qk_dim, h, w))
        return (b, self.v_dim, h, w), n1 + n2 + b * n * n * (self.qk_dim + self.v_dim)


class GroupAttention(Module):
    """Multi-head attention in either of two input layouts.

    ``kind="cga"``: head j sees the j-th channel split of the input; with
    ``cascade`` it sees that split plus head j-1's output. ``kind="mhsa"``:
    every head projects the full input. Both use per-head V width C/h, so the
    concatenated head outputs are C wide before the output projection.
    """

    def __init__(self, dim, heads, qk_dim=16, kind="cga", cascade=True, dw_kernel=3, *,
                 rng, dtype="f32"):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"attention width {dim} not divisible by {heads} heads")
        if kind not in ("cga", "mhsa"):
            raise ValueError(f"unknown attention kind {kind!r}")
        self.dim, self.num_heads, self.qk_dim = dim, heads, qk_dim
        self.kind, self.cascade = kind, cascade and kind == "cga"
        self.label = ""
        d = dim // heads
        in_dim = d if kind == "cga" else dim
        self.heads = Sequential(*[AttentionHead(in_dim, qk_dim, d, dw_kernel, rng=rng, dtype=dtype)
                                  for _ in range(heads)])
        self.proj = conv_bn(dim, dim, rng=rng, dtype=dtype)

    def forward(self, x, ctx):
        if x.shape[1] != self.dim:
            raise ShapeError(f"attention expects {self.dim} channels, got {x.shape[1]}")
        if ctx.trace is not None:
            ctx.trace.begin_block(self.label)
        feats = T.split_channels(x, self.num_heads) if self.kind == "cga" else [x] * self.num_heads
        outs = []
        for j, head in enumerate(self.heads):
            feat = feats[j]
            if j > 0 and self.cascade:
                feat = T.add(feat, outs[-1])
            if ctx.trace is not None:
                ctx.trace.add_input(feat.data)
            outs.append(head(feat, ctx))
        y = outs[0] if len(outs) == 1 else T.concat_channels(outs)
        return self.proj(y, ctx)

    def macs(self, shape):
        b, c, h, w = shape
        in_shape = (b, c // self.num_heads if self.kind == "cga" else c, h, w)
        total = sum(head.macs(in_shape)[1] for head in self.heads)
        _, n = self.proj.macs(shape)
        return shape, total + n

    def qkv_weight_count(self) -> int:
        return sum(head.qkv.conv.weight.size for head in self.heads)


class ResidualStack(Module):
    """Children applied in order, each as ``x + child(x)``."""

    def forward(self, x, ctx):
        for _, m in self.children():
            x = T.add(x, m(x, ctx))
        return x

    def macs(self, shape):
        return shape, sum(m.macs(shape)[1] for _, m in self.children())


class SandwichBlock(ResidualStack):
    """n_ffn x (token mixer, FFN), one attention, n_ffn x (token mixer, FFN); all residual."""

    def __init__(self, dim, heads, qk_dim=16, ffn_ratio=2, n_ffn=1, dw_kernel=3, kind="cga",
                 cascade=True, *, rng, dtype="f32"):
        super().__init__()
        for i in range(n_ffn):
            setattr(self, f"pre_dw{i}", token_mixer(dim, dw_kernel, rng=rng, dtype=dtype))
            setattr(self, f"pre_ffn{i}", ffn(dim, ffn_ratio, rng=rng, dtype=dtype))
        self.attn = GroupAttention(dim, heads, qk_dim, kind, cascade, dw_kernel, rng=rng, dtype=dtype)
        for i in range(n_ffn):
            setattr(self, f"post_dw{i}", token_mixer(dim, dw_kernel, rng=rng, dtype=dtype))
            setattr(self, f"post_ffn{i}", ffn(dim, ffn_ratio, rng=rng, dtype=dtype))


SUBSAMPLE_EXPANSION = 4
SE_RATIO = 0.25


def inverted_residual(cin, cout, expansion=SUBSAMPLE_EXPANSION, *, rng, dtype="f32") -> Sequential:
    """1x1 expand, 3x3 depthwise stride 2, squeeze-excite, 1x1 project. No skip."""
    e = cin * expansion
    return Sequential(
        expand=conv_bn(cin, e, rng=rng, dtype=dtype), act1=ReLU(),
        dw=conv_bn(e, e, 3, 2, 1, groups=e, rng=rng, dtype=dtype), act2=ReLU(),
        se=SqueezeExcite(e, int(e * SE_RATIO), rng=rng, dtype=dtype),
        project=conv_bn(e, cout, rng=rng, dtype=dtype),
    )


class SubsampleBlock(Module):
    def __init__(self, cin, cout, ffn_ratio=2, n_ffn=1, dw_kernel=3, *, rng, dtype="f32"):
        super().__init__()
        self.pre = ResidualStack()
        for i in range(n_ffn):
            setattr(self.pre, f"dw{i}", token_mixer(cin, dw_kernel, rng=rng, dtype=dtype))
            setattr(self.pre, f"ffn{i}", ffn(cin, ffn_ratio, rng=rng, dtype=dtype))
        self.merge = inverted_residual(cin, cout, rng=rng, dtype=dtype)
        self.post = ResidualStack()
        for i in range(n_ffn):
            setattr(self.post, f"dw{i}", token_mixer(cout, dw_kernel, rng=rng, dtype=dtype))
            setattr(self.post, f"ffn{i}", ffn(cout, ffn_ratio, rng=rng, dtype=dtype))

    def forward(self, x, ctx):
        return self.post(self.merge(self.pre(x, ctx), ctx), ctx)

    def macs(self, shape):
        shape, n1 = self.pre.macs(shape)
        shape, n2 = self.merge.macs(shape)
        shape, n3 = self.post.macs(shape)
        return shape, n1 + n2 + n3


class PatchEmbed(Sequential):
    """Four 3x3 stride-2 conv+BN layers, 3 -> C/8 -> C/4 -> C/2 -> C, ReLU between."""

    def __init__(self, c1, *, rng, dtype="f32"):
        if c1 % 8:
            raise ShapeError(f"patch embedding width {c1} must be divisible by 8")
        widths = [3, c1 // 8, c1 // 4, c1 // 2, c1]
        mods = []
        for i in range(4):
            mods.append(conv_bn(widths[i], widths[i + 1], 3, 2, 1, rng=rng, dtype=dtype))
            if i < 3:
                mods.append(ReLU())
        super().__init__(*mods)

    def forward(self, x, ctx):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"patch embedding expects [B,3,R,R], got {x.shape}")
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise ShapeError(f"input resolution {x.shape[2]}x{x.shape[3]} not divisible by 16")
        return super().forward(x, ctx)
