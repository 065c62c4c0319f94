"""Architecture hyperparameters and the six published variants."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from effvit.errors import SpecError


@dataclass(frozen=True)
class ModelSpec:
    widths: tuple[int, int, int]
    depths: tuple[int, int, int]
    heads: tuple[int, int, int]
    qk_dim: int = 16
    ffn_ratio: int = 2
    n_ffn: int = 1
    input_resolution: int = 224
    num_classes: int = 1000
    dw_kernel: int = 3

    def __post_init__(self):
        for name in ("widths", "depths", "heads"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))

    def validate(self) -> "ModelSpec":
        if not (len(self.widths) == len(self.depths) == len(self.heads) == 3):
            raise SpecError("widths, depths and heads must each list three stages")
        if min(self.widths + self.depths + self.heads) < 1:
            raise SpecError("widths, depths and heads must be positive")
        for i, (c, h) in enumerate(zip(self.widths, self.heads)):
            if c % h:
                raise SpecError(f"stage {i + 1}: width {c} not divisible by {h} heads")
        for a, b in zip(self.widths, self.widths[1:]):
            if b < a or b > 2 * a:
                raise SpecError(f"stage widths {self.widths} must be nondecreasing with ratio <= 2")
        if self.widths[0] % 8:
            raise SpecError(f"first-stage width {self.widths[0]} must be divisible by 8")
        if self.input_resolution < 16 or self.input_resolution % 16:
            raise SpecError(f"input resolution {self.input_resolution} must be a positive multiple of 16")
        if self.qk_dim < 1 or self.ffn_ratio < 1 or self.n_ffn < 1 or self.num_classes < 1:
            raise SpecError("qk_dim, ffn_ratio, n_ffn and num_classes must be positive")
        if self.dw_kernel < 1 or self.dw_kernel % 2 == 0:
            raise SpecError(f"dw_kernel must be odd, got {self.dw_kernel}")
        return self

    def to_json(self) -> str:
        d = asdict(self)
        for k in ("widths", "depths", "heads"):
            d[k] = list(d[k])
        return json.dumps(d, indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        try:
            d = json.loads(text)
            return cls(**d).validate()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, SpecError):
                raise
            raise SpecError(f"invalid model config: {exc}") from exc


VARIANTS: dict[str, ModelSpec] = {
    "M0": ModelSpec((64, 128, 192), (1, 2, 3), (4, 4, 4)),
    "M1": ModelSpec((128, 144, 192), (1, 2, 3), (2, 3, 3)),
    "M2": ModelSpec((128, 192, 224), (1, 2, 3), (4, 3, 2)),
    "M3": ModelSpec((128, 240, 320), (1, 2, 3), (4, 3, 4)),
    "M4": ModelSpec((128, 256, 384), (1, 2, 3), (4, 4, 4)),
    "M5": ModelSpec((192, 288, 384), (1, 3, 4), (3, 3, 4)),
}


def get_spec(variant: str | ModelSpec) -> ModelSpec:
    if isinstance(variant, ModelSpec):
        return variant.validate()
    if variant not in VARIANTS:
        raise SpecError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    return VARIANTS[variant].validate()
