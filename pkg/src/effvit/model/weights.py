"""Weights files and model config documents.

A weights file is ``b"EVTW"``, a little-endian u32 byte length, a UTF-8 JSON
manifest, then one EVT1 blob per manifest entry in manifest order::

    {"folded": false, "attention": "cga", "cascade": true,
     "tensors": [{"name": ..., "dtype": "f32", "shape": [...]}, ...]}

The config document is the :class:`ModelSpec` fields as a JSON object.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

from effvit.core import evt1
from effvit.core.rng import Rng
from effvit.core.tensor import DTYPE_NAMES, Tensor
from effvit.errors import InputError
from effvit.model.folding import fold_bn
from effvit.model.network import Model, build_model
from effvit.model.spec import ModelSpec

MAGIC = b"EVTW"


def encode_weights(model: Model) -> bytes:
    entries, blobs = [], []
    for name, t in model.named_tensors():
        entries.append({"name": name, "dtype": DTYPE_NAMES[t.dtype], "shape": list(t.shape)})
        blobs.append(evt1.encode(t))
    manifest = {"folded": bool(model.folded), "attention": model.attention,
                "cascade": bool(model.cascade), "tensors": entries}
    head = json.dumps(manifest, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs)


def save_weights(model: Model, path) -> None:
    Path(path).write_bytes(encode_weights(model))


def decode_weights(buf: bytes) -> tuple[dict, list[tuple[str, Tensor]]]:
    if buf[:4] != MAGIC:
        raise InputError(f"bad weights magic {bytes(buf[:4])!r}, expected {MAGIC!r}", 0)
    if len(buf) < 8:
        raise InputError("truncated weights header", 4)
    (n,) = struct.unpack_from("<I", buf, 4)
    try:
        manifest = json.loads(bytes(buf[8 : 8 + n]).decode())
        entries = manifest["tensors"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise InputError(f"unreadable weights manifest: {exc}", 8) from exc
    pos = 8 + n
    out = []
    for e in entries:
        start = pos
        t, pos = evt1.decode_from(buf, pos)
        if DTYPE_NAMES[t.dtype] != e["dtype"] or list(t.shape) != list(e["shape"]):
            raise InputError(f"tensor {e['name']!r} does not match its manifest entry", start)
        out.append((e["name"], t))
    if pos != len(buf):
        raise InputError(f"{len(buf) - pos} trailing bytes after last tensor", pos)
    return manifest, out


def load_weights(path, spec: ModelSpec) -> Model:
    """Rebuild the model structure for ``spec`` and fill it from a weights file."""
    manifest, tensors = decode_weights(Path(path).read_bytes())
    dtype = tensors[0][1].dtype if tensors else "f32"
    model = build_model(spec, Rng(0), attention=manifest.get("attention", "cga"),
                        cascade=manifest.get("cascade", True), dtype=DTYPE_NAMES.get(dtype, "f32"))
    if manifest.get("folded"):
        model = fold_bn(model)
    assign_tensors(model, tensors)
    return model


def assign_tensors(model: Model, tensors: list[tuple[str, Tensor]]) -> None:
    slots = {}
    for mod_name, mod in model.named_modules():
        for d, is_param in ((mod._params, True), (mod._buffers, False)):
            for name in d:
                slots[f"{mod_name}.{name}" if mod_name else name] = (mod, name, is_param)
    names = [n for n, _ in tensors]
    if sorted(names) != sorted(slots):
        missing = sorted(set(slots) - set(names))[:3]
        extra = sorted(set(names) - set(slots))[:3]
        raise InputError(f"weights do not match model structure (missing {missing}, unexpected {extra})")
    for name, t in tensors:
        mod, attr, is_param = slots[name]
        current = (mod._params if is_param else mod._buffers)[attr]
        if current.shape != t.shape:
            raise InputError(f"tensor {name!r} has shape {t.shape}, model expects {current.shape}")
        new = Tensor(t.data.copy(), requires_grad=is_param)
        if is_param:
            setattr(mod, attr, new)
        else:
            mod.register_buffer(attr, new)


def save_config(spec: ModelSpec, path) -> None:
    Path(path).write_text(spec.to_json())


def load_config(path) -> ModelSpec:
    return ModelSpec.from_json(Path(path).read_text())
