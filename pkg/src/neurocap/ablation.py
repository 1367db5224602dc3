"""The ten-setting evaluation grid: stand-in tower width (base or large),
pretraining corpus (all, half, or none), and encoder freeze policy, each run
end to end from a JSON config file and reported as one fixed-width row.

Grid layout: rows 1-5 use the base width and rows 6-10 the large width; odd
rows within each half freeze the encoder whole, even rows train its last
blocks, and the final row of each half skips pretraining and trains the
encoder fully. "half" pretrains on the first half of the train-split voxels
to model a smaller corpus.

Run as a module: python3 -m neurocap.ablation --data DIR [--configs DIR].
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .config import (
    FreezePolicy,
    ModelConfig,
    TrainConfig,
    config_from_dict,
    config_to_dict,
    default_tail_blocks,
    stage_defaults,
)
from .datagen import Dataset
from .mbm import MbmTrainConfig, pretrain
from .metrics import (
    EvalRecord,
    evaluate,
    format_metric_table,
    two_way_identification,
)
from .tensor import ParameterError
from .textgen import Vocab, generate_caption
from .train import align_train, build_mbm_model, build_models, embed_split

SIZES = {"base": 64, "large": 128}
CORPORA = ("all", "half", "none")

ABLATION_MODEL = ModelConfig(n_voxels=256, d_img=32)
PRETRAIN_STEPS = 200
ALIGN_STEPS = 150


@dataclass(frozen=True)
class AblationRow:
    row_id: int
    size: str
    corpus: str
    freeze_kind: str


def _grid() -> tuple:
    rows = []
    for half, size in ((0, "base"), (5, "large")):
        rows.append(AblationRow(half + 1, size, "all", "frozen_whole"))
        rows.append(AblationRow(half + 2, size, "all", "frozen_partly"))
        rows.append(AblationRow(half + 3, size, "half", "frozen_whole"))
        rows.append(AblationRow(half + 4, size, "half", "frozen_partly"))
        rows.append(AblationRow(half + 5, size, "none", "none"))
    return tuple(rows)


ABLATION_GRID = _grid()


def row_label(row: AblationRow) -> str:
    freeze = {"frozen_whole": "whole", "frozen_partly": "partly",
              "none": "unfrozen"}[row.freeze_kind]
    return f"{row.row_id:>2} {row.size[0].upper()}/{row.corpus}/{freeze}"


def row_config(row: AblationRow, model_cfg: ModelConfig = ABLATION_MODEL,
               pretrain_steps: int = PRETRAIN_STEPS,
               align_steps: int = ALIGN_STEPS, seed=0) -> dict:
    """Everything one run needs, as a JSON-ready dict."""
    mcfg = replace(model_cfg, embed_width=SIZES[row.size])
    if row.freeze_kind == "frozen_partly":
        freeze = FreezePolicy(kind="frozen_partly",
                              k_trainable=default_tail_blocks(mcfg.enc_layers))
    else:
        freeze = FreezePolicy(kind=row.freeze_kind)
    out = {
        "id": row.row_id,
        "label": row_label(row),
        "pretrain_corpus": row.corpus,
        "pretrain": None,
        "align": config_to_dict(stage_defaults(
            "align", model=mcfg, steps=align_steps, seed=seed, freeze=freeze)),
    }
    if row.corpus != "none":
        out["pretrain"] = config_to_dict(stage_defaults(
            "pretrain", model=mcfg, steps=pretrain_steps, seed=seed))
    return out


def write_ablation_configs(out_dir, **kwargs) -> list:
    """Write id01.json .. id10.json; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for row in ABLATION_GRID:
        path = os.path.join(out_dir, f"id{row.row_id:02d}.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(row_config(row, **kwargs), f, sort_keys=True, indent=2)
            f.write("\n")
        paths.append(path)
    return paths


def load_ablation_config(path) -> dict:
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    for key in ("id", "label", "pretrain_corpus", "align"):
        if key not in raw:
            raise ParameterError(f"ablation config {path} lacks {key!r}")
    if raw["pretrain_corpus"] not in CORPORA:
        raise ParameterError(
            f"pretrain_corpus must be one of {CORPORA}, "
            f"got {raw['pretrain_corpus']!r}")
    if (raw["pretrain_corpus"] == "none") != (raw.get("pretrain") is None):
        raise ParameterError(
            "pretrain config must be present exactly when a corpus is named")
    cfg = dict(raw)
    cfg["align"] = config_from_dict(raw["align"])
    if raw["pretrain"] is not None:
        cfg["pretrain"] = config_from_dict(raw["pretrain"])
        if cfg["pretrain"].model != cfg["align"].model:
            raise ParameterError("pretrain and align stages disagree on model")
    return cfg


def corpus_voxels(dataset: Dataset, corpus: str) -> np.ndarray:
    ids = np.asarray(dataset.train_ids)
    if corpus == "half":
        ids = ids[: max(1, len(ids) // 2)]
    return dataset.voxels[ids]


def score_models(dataset: Dataset, models) -> dict:
    """Caption metrics over the test split plus the 2-way column."""
    records = []
    for i in dataset.test_ids:
        cand = generate_caption(dataset.voxels[int(i)], models)
        records.append(EvalRecord(cand, tuple(dataset.caption_refs(int(i)))))
    scores = dict(evaluate(records).corpus)
    f, t = embed_split(dataset, models, dataset.test_ids)
    scores["CLIP"] = two_way_identification(f, t, seed=0)
    return scores


def run_ablation_config(dataset: Dataset, cfg: dict) -> dict:
    align_cfg: TrainConfig = cfg["align"]
    mcfg = align_cfg.model
    if dataset.manifest.n_voxels != mcfg.n_voxels:
        raise ParameterError(
            f"dataset has {dataset.manifest.n_voxels} voxels, config wants "
            f"{mcfg.n_voxels}")
    if dataset.manifest.d_img != mcfg.d_img:
        raise ParameterError(
            f"dataset features are {dataset.manifest.d_img}-d, config wants "
            f"{mcfg.d_img}")
    pretrained = None
    if cfg["pretrain"] is not None:
        pre: TrainConfig = cfg["pretrain"]
        pretrained = build_mbm_model(mcfg, seed=pre.seed)
        voxels = corpus_voxels(dataset, cfg["pretrain_corpus"])
        pretrain(voxels, pretrained,
                 MbmTrainConfig(lr=pre.lr, weight_decay=pre.weight_decay,
                                betas=pre.betas, batch_size=pre.batch_size),
                 pre.steps, pre.seed)
    models = build_models(mcfg, Vocab.default(), seed=align_cfg.seed,
                          pretrained=pretrained)
    align_train(dataset, models, align_cfg)
    return score_models(dataset, models)


def run_ablation(dataset: Dataset, config_paths) -> tuple:
    """Run every config; returns (report text, [(label, scores), ...])."""
    rows = []
    for path in config_paths:
        cfg = load_ablation_config(path)
        rows.append((cfg["label"], run_ablation_config(dataset, cfg)))
    return format_metric_table(rows), rows


def main(argv=None) -> int:
    import argparse

    from .datagen import load_dataset

    parser = argparse.ArgumentParser(
        prog="neurocap.ablation",
        description="Run the ten-setting grid and print the metric table.")
    parser.add_argument("--data", required=True, help="generated dataset dir")
    parser.add_argument("--configs", help="dir of ablation JSON files "
                                          "(default: write and use bundled settings)")
    parser.add_argument("--out", help="also write the report to this file")
    args = parser.parse_args(argv)

    dataset = load_dataset(args.data)
    if args.configs:
        paths = sorted(
            os.path.join(args.configs, n) for n in os.listdir(args.configs)
            if n.endswith(".json"))
        if not paths:
            parser.error(f"no .json configs under {args.configs}")
    else:
        paths = write_ablation_configs(
            os.path.join(os.path.dirname(args.data) or ".", "ablation_configs"))
    report, _ = run_ablation(dataset, paths)
    print(report)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(report + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
