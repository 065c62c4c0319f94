"""EfficientViT layers, blocks, the M0-M5 builder, counting, folding and weight files."""

from effvit.model.counting import CountReport, count_flops, count_params, count_report, qkv_projection_params, traced_macs
from effvit.model.folding import fold_bn
from effvit.model.network import Model, build_model, model_forward, share_head_weights
from effvit.model.nn import AttentionTrace, Ctx, GroupAttention, SandwichBlock, SubsampleBlock
from effvit.model.spec import VARIANTS, ModelSpec, get_spec
from effvit.model.weights import load_config, load_weights, save_config, save_weights

__all__ = [
    "AttentionTrace", "CountReport", "Ctx", "GroupAttention", "Model", "ModelSpec", "SandwichBlock",
    "SubsampleBlock", "VARIANTS", "build_model", "count_flops", "count_params", "count_report",
    "fold_bn", "get_spec", "load_config", "load_weights", "model_forward", "qkv_projection_params",
    "save_config", "save_weights", "share_head_weights", "traced_macs",
]
