"""Command-line front end.

Subcommands cover the full pipeline: gen-data, pretrain, align-train,
finetune-qa, caption, qa, eval. Training subcommands read a TrainConfig as
JSON via --config, with --seed and --steps overriding the file; the
NEUROCAP_SEED environment variable fills in when no --seed flag is given.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import datagen
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, config_from_json, stage_defaults
from .mbm import MbmTrainConfig, pretrain
from .metrics import (
    EvalRecord,
    evaluate,
    format_metric_row,
    two_way_identification,
)
from .tensor import ParameterError
from .textgen import (
    AnswerHead,
    QaModels,
    Vocab,
    answer_question,
    finetune_qa,
    generate_caption,
)
from .train import align_train, build_mbm_model, build_models, embed_split


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; 2 is reserved for runtime failures
    here, so usage problems print the valid flags and exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _env_seed():
    raw = os.environ.get("NEUROCAP_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ParameterError(f"NEUROCAP_SEED must be an integer, got {raw!r}")


def _resolve_config(args, stage: str) -> TrainConfig:
    """Config file (or stage defaults), then flag > env for the seed."""
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as f:
            cfg = config_from_json(f.read())
        if cfg.stage != stage:
            raise ParameterError(
                f"config file is for stage {cfg.stage!r}, expected {stage!r}")
    else:
        cfg = stage_defaults(stage)
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    seed = args.seed if args.seed is not None else _env_seed()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _check_dims(cfg: TrainConfig, ds, want_d_img: bool = True):
    m = ds.manifest
    if cfg.model.n_voxels != m.n_voxels or (
            want_d_img and cfg.model.d_img != m.d_img):
        raise ParameterError(
            f"dataset is {m.n_voxels} voxels / {m.d_img}-d features but the "
            f"model config wants {cfg.model.n_voxels} / {cfg.model.d_img}; "
            f"pass a matching --config")


def _load_stage(path, stage: str):
    bundle = load_checkpoint(path)
    if bundle.cfg.stage != stage:
        raise ParameterError(
            f"checkpoint {path} is from stage {bundle.cfg.stage!r}, "
            f"a {stage!r} checkpoint is required")
    return bundle


def _final(trace) -> float:
    return trace[-1] if trace else float("nan")


def _cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else _env_seed() or 0
    datagen.gen_dataset(args.n, args.voxels, args.d_img, seed, args.out)
    print(f"wrote {args.n} samples ({args.voxels} voxels, "
          f"{args.d_img}-d features, seed {seed}) to {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _resolve_config(args, "pretrain")
    ds = datagen.load_dataset(args.data)
    _check_dims(cfg, ds, want_d_img=False)
    model = build_mbm_model(cfg.model, seed=cfg.seed)
    trace = pretrain(
        ds.voxels[np.asarray(ds.train_ids)], model,
        MbmTrainConfig(lr=cfg.lr, weight_decay=cfg.weight_decay,
                       betas=cfg.betas, batch_size=cfg.batch_size),
        cfg.steps, cfg.seed)
    save_checkpoint(args.out, model, cfg, next_step=cfg.steps)
    print(f"pretrained {cfg.steps} steps, final masked mse {_final(trace):.6f}")
    print(f"checkpoint: {args.out}")
    return 0


def _cmd_align_train(args) -> int:
    cfg = _resolve_config(args, "align")
    pretrained = None
    if args.init:
        init = _load_stage(args.init, "pretrain")
        if not getattr(args, "config", None):
            cfg = replace(cfg, model=init.cfg.model)
        elif init.cfg.model != cfg.model:
            raise ParameterError(
                "pretraining checkpoint and --config disagree on model dims")
        pretrained = init.model
    ds = datagen.load_dataset(args.data)
    _check_dims(cfg, ds)
    models = build_models(cfg.model, Vocab.default(), seed=cfg.seed,
                          pretrained=pretrained)
    res = align_train(ds, models, cfg)
    save_checkpoint(args.out, models, cfg, next_step=cfg.steps,
                    optimizer=res.optimizer)
    print(f"aligned {cfg.steps} steps, "
          f"final total loss {_final(res.traces['total']):.6f}")
    print(f"checkpoint: {args.out}")
    return 0


def _qa_samples(ds, ids):
    samples = []
    for i in ids:
        for q, a in ds.qa(int(i)):
            samples.append((ds.voxels[int(i)], q, datagen.answer_id(a)))
    return samples


def _cmd_finetune_qa(args) -> int:
    cfg = _resolve_config(args, "finetune_qa")
    align = _load_stage(args.ckpt, "align")
    if not getattr(args, "config", None):
        cfg = replace(cfg, model=align.cfg.model)
    elif align.cfg.model != cfg.model:
        raise ParameterError(
            "alignment checkpoint and --config disagree on model dims")
    ds = datagen.load_dataset(args.data)
    _check_dims(cfg, ds)
    models = align.model
    head = AnswerHead(cfg.model.dec_hidden, datagen.ANSWER_TABLE)
    trace = finetune_qa(_qa_samples(ds, ds.train_ids), models, head,
                        cfg.steps, cfg.seed, lr=cfg.lr,
                        weight_decay=cfg.weight_decay,
                        batch_size=cfg.batch_size)
    save_checkpoint(args.out, QaModels(models, head), cfg, next_step=cfg.steps)
    print(f"tuned answer head {cfg.steps} steps, "
          f"final loss {_final(trace):.6f}")
    print(f"checkpoint: {args.out}")
    return 0


def _cmd_caption(args) -> int:
    bundle = _load_stage(args.ckpt, "align")
    ds = datagen.load_dataset(args.data)
    _check_dims(bundle.cfg, ds)
    with open(args.out, "w", encoding="utf-8") as f:
        for i in ds.test_ids:
            cap = generate_caption(ds.voxels[int(i)], bundle.model,
                                   max_len=args.max_len)
            f.write(json.dumps({"id": int(i), "caption": cap}) + "\n")
    print(f"wrote {len(ds.test_ids)} captions to {args.out}")
    return 0


def _cmd_qa(args) -> int:
    bundle = _load_stage(args.ckpt, "finetune_qa")
    ds = datagen.load_dataset(args.data)
    _check_dims(bundle.cfg, ds)
    if not 0 <= args.fmri_id < ds.manifest.n_samples:
        raise ParameterError(
            f"--fmri-id {args.fmri_id} outside dataset of "
            f"{ds.manifest.n_samples} samples")
    voxels = ds.voxels[args.fmri_id]
    qa = bundle.model
    for line in sys.stdin:
        question = line.strip()
        if not question:
            continue
        answer, scores = answer_question(voxels, question, qa.models, qa.head)
        print(f"{answer}\t{float(scores.max()):.6f}", flush=True)
    return 0


def _cmd_eval(args) -> int:
    ds = datagen.load_dataset(args.data)
    records, ids = [], []
    with open(args.pred, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            i = int(row["id"])
            if not 0 <= i < ds.manifest.n_samples:
                raise ParameterError(f"prediction id {i} outside dataset")
            ids.append(i)
            records.append(EvalRecord(row["caption"],
                                      tuple(ds.caption_refs(i))))
    if not records:
        raise ParameterError(f"no predictions in {args.pred}")
    scores = dict(evaluate(records).corpus)
    if args.ckpt:
        bundle = _load_stage(args.ckpt, "align")
        _check_dims(bundle.cfg, ds)
        f, t = embed_split(ds, bundle.model, ids)
        scores["CLIP"] = two_way_identification(f, t, seed=0)
    print(format_metric_row(scores, label=args.label))
    return 0


def build_parser():
    parser = _Parser(prog="neurocap",
                     description="Synthetic fMRI captioning pipeline.")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="COMMAND")
    subs = {}

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_,
                           prog=f"{parser.prog} {name}")
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("gen-data", _cmd_gen_data, "generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=512, help="number of samples")
    p.add_argument("--voxels", type=int, default=512, help="voxels per sample")
    p.add_argument("--d-img", type=int, default=64,
                   help="image feature dimension")
    p.add_argument("--seed", type=int, help="generation seed")

    def train_flags(p):
        p.add_argument("--config", help="TrainConfig JSON file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--steps", type=int, help="override the step count")

    p = add("pretrain", _cmd_pretrain,
            "masked-reconstruction pretraining of the voxel encoder")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint directory")
    train_flags(p)

    p = add("align-train", _cmd_align_train,
            "contrastive + caption training of the full model")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--init", help="pretraining checkpoint to start from")
    train_flags(p)

    p = add("finetune-qa", _cmd_finetune_qa,
            "train the answer-classification head")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", required=True, help="alignment checkpoint")
    p.add_argument("--out", required=True, help="checkpoint directory")
    train_flags(p)

    p = add("caption", _cmd_caption, "caption the held-out test split")
    p.add_argument("--ckpt", required=True, help="alignment checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--max-len", type=int, default=16,
                   help="maximum caption length")

    p = add("qa", _cmd_qa, "answer questions about one sample interactively")
    p.add_argument("--ckpt", required=True, help="QA checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--fmri-id", type=int, required=True,
                   help="sample index to question")

    p = add("eval", _cmd_eval, "score generated captions against references")
    p.add_argument("--pred", required=True, help="captions JSONL")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", help="alignment checkpoint for the CLIP column")
    p.add_argument("--label", default="run", help="row label in the report")

    return parser, subs


def main(argv=None) -> int:
    parser, subs = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            subs[args.command].error(
                f"unrecognized arguments: {' '.join(extra)}")
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
