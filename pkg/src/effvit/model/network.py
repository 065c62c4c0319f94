"""The full EfficientViT-M network and its builder."""

from __future__ import annotations

import copy

from effvit.core import tensor as T
from effvit.core.rng import Rng
from effvit.core.tensor import Tensor
from effvit.errors import ShapeError, StateError
from effvit.model.nn import (
    AttentionTrace,
    BatchNorm,
    Ctx,
    GlobalAvgPool,
    GroupAttention,
    Linear,
    Module,
    PatchEmbed,
    SandwichBlock,
    Sequential,
    SubsampleBlock,
)
from effvit.model.spec import ModelSpec, get_spec


class Model(Module):
    def __init__(self, spec: ModelSpec, rng: Rng, attention="cga", cascade=True, dtype="f32"):
        super().__init__()
        spec = spec.validate()
        self.spec = spec
        self.attention, self.cascade = attention, cascade
        self.mode = "infer"
        self.folded = False
        c, ll, h = spec.widths, spec.depths, spec.heads
        kw = dict(qk_dim=spec.qk_dim, ffn_ratio=spec.ffn_ratio, n_ffn=spec.n_ffn,
                  dw_kernel=spec.dw_kernel, kind=attention, cascade=cascade, rng=rng, dtype=dtype)
        self.patch_embed = PatchEmbed(c[0], rng=rng, dtype=dtype)
        stages, subs = [], []
        for i in range(3):
            if i > 0:
                subs.append(SubsampleBlock(c[i - 1], c[i], spec.ffn_ratio, spec.n_ffn, spec.dw_kernel,
                                           rng=rng, dtype=dtype))
            stages.append(Sequential(*[SandwichBlock(c[i], h[i], **kw) for _ in range(ll[i])]))
        self.stages = Sequential(*stages)
        self.subsamples = Sequential(*subs)
        self.head = Sequential(pool=GlobalAvgPool(), bn=BatchNorm(c[2], dtype=dtype),
                               fc=Linear(c[2], spec.num_classes, rng=rng, dtype=dtype))
        for name, mod in self.named_modules():
            if isinstance(mod, GroupAttention):
                mod.label = name

    def train(self) -> "Model":
        self.mode = "train"
        return self

    def eval(self) -> "Model":
        self.mode = "infer"
        return self

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        r = self.spec.input_resolution
        if x.ndim != 4 or x.shape[1:] != (3, r, r):
            raise ShapeError(f"model expects [B,3,{r},{r}], got {x.shape}")
        if ctx.mode == "train" and self.folded:
            raise StateError("a BN-folded model cannot run in train mode")
        x = self.patch_embed(x, ctx)
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = self.subsamples[i - 1](x, ctx)
            x = stage(x, ctx)
        return self.head(x, ctx)

    def __call__(self, x: Tensor, mode: str | None = None, trace: AttentionTrace | None = None,
                 ctx: Ctx | None = None) -> Tensor:
        if ctx is None:
            ctx = Ctx(mode=mode or self.mode, trace=trace)
        return self.forward(x, ctx)

    def macs(self, shape):
        shape, total = self.patch_embed.macs(shape)
        for i, stage in enumerate(self.stages):
            if i > 0:
                shape, n = self.subsamples[i - 1].macs(shape)
                total += n
            shape, n = stage.macs(shape)
            total += n
        shape, n = self.head.macs(shape)
        return shape, total + n

    def attention_modules(self) -> list[GroupAttention]:
        return [m for _, m in self.named_modules() if isinstance(m, GroupAttention)]


def build_model(variant: str | ModelSpec, rng: Rng | int = 0, *, attention: str = "cga",
                cascade: bool = True, dtype: str = "f32", shared_heads: bool = False) -> Model:
    """Instantiate a variant ("M0".."M5") or an explicit :class:`ModelSpec`.

    ``attention="mhsa"`` builds the full-feature multi-head baseline instead of
    cascaded group attention. ``shared_heads`` copies head 0's weights into
    every other head of each attention module.
    """
    spec = get_spec(variant)
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    model = Model(spec, rng, attention, cascade, dtype)
    if shared_heads:
        share_head_weights(model)
    return model


def share_head_weights(model: Module) -> None:
    for _, mod in model.named_modules():
        if isinstance(mod, GroupAttention):
            first = mod.heads[0]
            for name in list(mod.heads._children)[1:]:
                setattr(mod.heads, name, copy.deepcopy(first))


def model_forward(model: Model, x: Tensor, mode: str = "infer", trace: AttentionTrace | None = None) -> Tensor:
    return model(x, mode=mode, trace=trace)
