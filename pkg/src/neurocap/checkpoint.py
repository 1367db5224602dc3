"""Checkpoint files: a JSON manifest plus one blob of little-endian 32-bit
floats, concatenated in manifest order.

The manifest records the format version, the full training config, every
named tensor with shape and dtype, the optimizer state layout, and the rng
position. Batch draws are keyed by absolute step index, so the rng position
is just the next step number. Saving, loading, and saving again produces
byte-identical files.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig, config_from_dict, config_to_dict
from .datagen import ANSWER_TABLE
from .tensor import ParameterError, ShapeError
from .textgen import AnswerHead, QaModels, Vocab
from .train import build_mbm_model, build_models

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "tensors.bin"


@dataclass
class CheckpointBundle:
    model: object
    cfg: TrainConfig
    next_step: int
    optimizer_state: dict = field(default=None, repr=False)


def _entry(name: str, arr: np.ndarray) -> dict:
    return {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)}


def _named_tensors(model) -> list:
    named = list(model.named_parameters())
    names = [n for n, _ in named]
    if len(names) != len(set(names)):
        raise ParameterError("duplicate tensor names in model")
    return named


def save_checkpoint(out_dir, model, cfg: TrainConfig, next_step: int,
                    optimizer=None) -> str:
    """Write manifest.json and tensors.bin under out_dir.

    model is anything with named_parameters (the masked-reconstruction model
    for the pretrain stage, the full alignment bundle otherwise). optimizer
    may be an AdamW instance or a previously loaded state dict; omit it for
    inference-only checkpoints.
    """
    named = _named_tensors(model)
    manifest = {
        "format_version": FORMAT_VERSION,
        "stage": cfg.stage,
        "config": config_to_dict(cfg),
        "next_step": int(next_step),
        "tensors": [_entry(n, p.data) for n, p in named],
        "optimizer": None,
    }
    chunks = []
    for name, p in named:
        if p.data.dtype != np.float32:
            raise ParameterError(
                f"blob stores 32-bit floats; parameter {name!r} is {p.data.dtype}")
        chunks.append(np.asarray(p.data, dtype="<f4").tobytes())
    if optimizer is not None:
        state = (optimizer.state_arrays()
                 if hasattr(optimizer, "state_arrays") else dict(optimizer))
        stored = {n: np.asarray(a, dtype="<f4") for n, a in state.items()}
        manifest["optimizer"] = [_entry(n, a) for n, a in stored.items()]
        chunks.extend(a.tobytes() for a in stored.values())
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    with open(os.path.join(out_dir, BLOB_NAME), "wb") as f:
        f.write(b"".join(chunks))
    return out_dir


def _read_blob(blob: bytes, entries, offset: int):
    """Parse arrays per manifest entries; raises before any model mutation."""
    out = []
    for e in entries:
        count = int(np.prod(e["shape"], dtype=np.int64)) if e["shape"] else 1
        end = offset + 4 * count
        if end > len(blob):
            raise ShapeError(
                f"blob truncated at tensor {e['name']!r}: "
                f"need {end} bytes, file has {len(blob)}")
        arr = np.frombuffer(blob, dtype="<f4", count=count,
                            offset=offset).reshape(e["shape"])
        out.append(arr)
        offset = end
    return out, offset


def load_checkpoint(in_dir) -> CheckpointBundle:
    """Rebuild the model from the config echo and restore every tensor.

    The blob is validated in full before anything is written into the model,
    so a truncated or oversized file never yields a partial load.
    """
    with open(os.path.join(in_dir, MANIFEST_NAME), encoding="utf-8") as f:
        manifest = json.load(f)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ParameterError(
            f"checkpoint format version {version!r}, this build reads "
            f"{FORMAT_VERSION}")
    cfg = config_from_dict(manifest["config"])
    if cfg.stage == "pretrain":
        model = build_mbm_model(cfg.model, seed=cfg.seed)
    elif cfg.stage == "finetune_qa":
        model = QaModels(build_models(cfg.model, Vocab.default(), seed=cfg.seed),
                         AnswerHead(cfg.model.dec_hidden, ANSWER_TABLE))
    else:
        model = build_models(cfg.model, Vocab.default(), seed=cfg.seed)
    named = dict(_named_tensors(model))
    if set(named) != {e["name"] for e in manifest["tensors"]}:
        raise ShapeError("checkpoint tensor names do not match the model "
                         "built from the config echo")

    with open(os.path.join(in_dir, BLOB_NAME), "rb") as f:
        blob = f.read()
    arrays, offset = _read_blob(blob, manifest["tensors"], 0)
    opt_entries = manifest.get("optimizer") or []
    opt_arrays, offset = _read_blob(blob, opt_entries, offset)
    if offset != len(blob):
        raise ShapeError(f"blob has {len(blob) - offset} trailing bytes")

    for e, arr in zip(manifest["tensors"], arrays):
        p = named[e["name"]]
        if tuple(arr.shape) != p.data.shape:
            raise ShapeError(
                f"tensor {e['name']!r} has shape {tuple(arr.shape)} in the "
                f"checkpoint but {p.data.shape} in the model")
        p.data[...] = arr
    optimizer_state = None
    if opt_entries:
        optimizer_state = {e["name"]: a.copy()
                           for e, a in zip(opt_entries, opt_arrays)}
    return CheckpointBundle(model=model, cfg=cfg,
                            next_step=int(manifest["next_step"]),
                            optimizer_state=optimizer_state)
