"""From-scratch EfficientViT-M inference/autodiff engine and analysis toolkit."""

__version__ = "0.1.0"
