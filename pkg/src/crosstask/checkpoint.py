"""Self-describing model checkpoints.

A checkpoint is a zip archive with two kinds of entries:

- ``config.json`` — UTF-8 JSON: ``format_version`` (1), the model family,
  the full model config, the build seed, and optional recorded task losses
  for loss-gated models;
- ``params/<name>.npy`` — one numpy v1.0 ``.npy`` entry per parameter,
  little-endian float64, named exactly as in the parameter store.

Both formats are stable and documented here bit-exactly: readers may rely on
numpy's ``.npy`` format spec and ordinary JSON.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

from .errors import ConfigError
from .model import ModelConfig

FORMAT_VERSION = 1


def save_checkpoint(path, model) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "family": model.family,
        "model_config": model.config.to_dict(),
        "seed": getattr(model, "seed", 0),
        "gate_kind": getattr(model, "gate_kind", None),
        "kind": getattr(model, "kind", None),
        "static_gate_inputs": (
            None if getattr(model, "static_gate_inputs", None) is None
            else [float(x) for x in model.static_gate_inputs]),
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("config.json", json.dumps(meta, indent=2, sort_keys=True))
        for name, values in model.state_dict().items():
            buffer = io.BytesIO()
            np.save(buffer, values.astype("<f8"), allow_pickle=False)
            zf.writestr(f"params/{name}.npy", buffer.getvalue())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("config.json").decode("utf-8"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ConfigError(
                f"unsupported checkpoint format {meta.get('format_version')!r}")
        params = {}
        for entry in zf.namelist():
            if entry.startswith("params/") and entry.endswith(".npy"):
                name = entry[len("params/"):-len(".npy")]
                params[name] = np.load(io.BytesIO(zf.read(entry)),
                                       allow_pickle=False)
    return meta, params


def load_model(path):
    """Rebuild the model a checkpoint describes and restore its parameters."""
    from .variants import VariantSpec, build

    meta, params = read_checkpoint(path)
    config = ModelConfig.from_dict(meta["model_config"])
    spec = VariantSpec(family=meta["family"])
    model = build(spec, config, seed=meta.get("seed", 0))
    model.load_state_dict(params)
    if meta.get("static_gate_inputs") is not None:
        model.static_gate_inputs = np.asarray(meta["static_gate_inputs"])
    return model


def describe(path) -> dict:
    """Summary for the inspect command: config plus parameter inventory."""
    meta, params = read_checkpoint(path)
    inventory = [{"name": name, "shape": list(values.shape),
                  "norm": float(np.linalg.norm(values))}
                 for name, values in sorted(params.items())]
    return {"meta": meta, "parameters": inventory,
            "parameter_count": int(sum(v.size for v in params.values()))}
