"""JSON checkpoints for static and dynamic counting models.

Parameter values are written with 17 significant digits so a load/save
round trip is bit exact, and the same model always serializes to the same bytes.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .featx import StaticModel, new_static_model
from .seqnet import BiLstmStack, LstmStack

FORMAT = "lapsecount-ckpt/1"


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _dump(obj, indent=0) -> str:
    """json.dumps, except float arrays under "values" keep 17 significant digits."""
    pad = " " * indent
    if isinstance(obj, dict):
        items = []
        for k, v in obj.items():
            if k == "values":
                body = "[" + ",".join(_fmt(x) for x in v) + "]"
            else:
                body = _dump(v, indent + 1)
            items.append(f"{pad} {json.dumps(k)}: {body}")
        return "{\n" + ",\n".join(items) + f"\n{pad}}}" if items else "{}"
    if isinstance(obj, (list, tuple)) and obj and isinstance(obj[0], dict):
        return "[\n" + ",\n".join(pad + " " + _dump(v, indent + 1) for v in obj) + f"\n{pad}]"
    return json.dumps(obj, sort_keys=True)


def model_params(static: StaticModel, recurrent=None) -> list:
    params = static.params()
    if recurrent is not None:
        params = params + recurrent.params()
    return params


def save_checkpoint(path, arch: dict, static: StaticModel, recurrent=None, seed: int = 0,
                    training: dict | None = None, config: dict | None = None) -> str:
    doc = {
        "format": FORMAT,
        "arch": arch,
        "seed": seed,
        "training": training or {},
        "config": config or {},
        "params": [{"name": p.name, "shape": list(p.value.shape), "values": p.value.reshape(-1).tolist()}
                   for p in model_params(static, recurrent)],
    }
    text = _dump(doc) + "\n"
    Path(path).write_text(text)
    return text


def load_checkpoint(path):
    """Return (doc, static_model, recurrent_model_or_None)."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {doc.get('format')!r}")
    arch = doc["arch"]
    static = new_static_model(arch["extractor"], 0, arch.get("window", 50))
    recurrent = None
    if arch.get("mode") == "dynamic":
        cls = BiLstmStack if arch["model"].startswith("bilstm") else LstmStack
        recurrent = cls(arch["m"], arch.get("hidden", 30))
    by_name = {p["name"]: p for p in doc["params"]}
    for p in model_params(static, recurrent):
        stored = by_name.pop(p.name, None)
        if stored is None:
            raise ValueError(f"{path}: missing parameter {p.name}")
        val = np.asarray(stored["values"], dtype=np.float64).reshape(stored["shape"])
        if val.shape != p.value.shape:
            raise ValueError(f"{path}: {p.name} shape {val.shape} != {p.value.shape}")
        p.value[...] = val
    if by_name:
        raise ValueError(f"{path}: unexpected parameters {sorted(by_name)}")
    return doc, static, recurrent
