"""Stage configs, freeze policies, and the alignment training loop."""

from dataclasses import replace

import numpy as np
import pytest

from neurocap import train as tr
from neurocap.config import (
    FreezePolicy,
    ModelConfig,
    TrainConfig,
    config_from_dict,
    config_from_json,
    config_to_dict,
    config_to_json,
    default_tail_blocks,
    stage_defaults,
)
from neurocap.optim import AdamW
from neurocap.tensor import ParameterError
from neurocap.textgen import TokenSequence, Vocab


@pytest.fixture
def models(tiny_cfg):
    return tr.build_models(tiny_cfg, Vocab.default(), seed=4)


def small_align_cfg(tiny_cfg, **kw):
    kw.setdefault("steps", 4)
    kw.setdefault("batch_size", 8)
    kw.setdefault("seed", 9)
    return stage_defaults("align", model=tiny_cfg, **kw)


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------


def test_default_tail_blocks_scaling():
    assert default_tail_blocks(3) == 2
    assert default_tail_blocks(6) == 3
    assert default_tail_blocks(24) == 10
    with pytest.raises(ParameterError):
        default_tail_blocks(0)


def test_freeze_policy_validation():
    with pytest.raises(ParameterError):
        FreezePolicy(kind="sometimes")
    with pytest.raises(ParameterError):
        FreezePolicy(kind="frozen_partly", k_trainable=0)
    with pytest.raises(ParameterError):
        FreezePolicy(kind="none", k_trainable=2)
    assert FreezePolicy(kind="frozen_partly", k_trainable=2).k_trainable == 2


def test_stage_default_values():
    a = stage_defaults("align")
    assert (a.lr, a.weight_decay, a.batch_size) == (1e-4, 0.1, 32)
    assert (a.loss_weights.fmri_image, a.loss_weights.fmri_text,
            a.loss_weights.caption) == (1.0, 1.0, 20.0)
    p = stage_defaults("pretrain")
    assert (p.lr, p.weight_decay, p.steps, p.batch_size) == (5e-5, 0.05, 2000, 16)
    q = stage_defaults("finetune_qa")
    assert (q.lr, q.weight_decay) == (1e-6, 0.1)
    assert stage_defaults("align", steps=7).steps == 7
    with pytest.raises(ParameterError):
        stage_defaults("deploy")


def test_train_config_validation():
    ok = dict(stage="align", lr=1e-4, weight_decay=0.1, betas=(0.9, 0.95),
              steps=10, batch_size=4)
    TrainConfig(**ok)
    for bad in (dict(stage="warmup"), dict(mode="bimodal"), dict(lr=0.0),
                dict(batch_size=0), dict(steps=-1)):
        with pytest.raises(ParameterError):
            TrainConfig(**{**ok, **bad})


def test_config_json_roundtrip():
    cfg = stage_defaults("align", seed=5, mode="fmri-text-only",
                         freeze=FreezePolicy(kind="frozen_partly", k_trainable=2))
    assert config_from_json(config_to_json(cfg)) == cfg
    d = config_to_dict(cfg)
    assert config_to_dict(config_from_dict(d)) == d
    assert config_to_json(config_from_json(config_to_json(cfg))) == config_to_json(cfg)
    assert isinstance(config_from_dict(d).betas, tuple)


# ---------------------------------------------------------------------------
# freeze policies
# ---------------------------------------------------------------------------


def names_of(d):
    return set(d)


def test_apply_freeze_none_trains_all_but_towers(models):
    trainable, frozen = tr.apply_freeze(models, FreezePolicy())
    assert any(n.startswith("encoder.blocks.0.") for n in trainable)
    assert any(n.startswith("patch.") for n in trainable)
    assert "temperature.log_temp" in trainable
    assert all(not n.startswith(("image_enc.", "text_enc.")) for n in trainable)
    assert all(n.startswith(("image_enc.", "text_enc.")) for n in frozen)


def test_apply_freeze_whole_keeps_heads_training(models):
    trainable, frozen = tr.apply_freeze(models, FreezePolicy(kind="frozen_whole"))
    assert not any(n.startswith(("patch.", "encoder.")) for n in trainable)
    assert any(n.startswith("projector.") for n in trainable)
    assert any(n.startswith("decoder.") for n in trainable)
    assert "temperature.log_temp" in trainable
    assert any(n.startswith("encoder.blocks.0.") for n in frozen)


def test_apply_freeze_partly_trains_exactly_last_k(models):
    policy = FreezePolicy(kind="frozen_partly", k_trainable=2)
    trainable, frozen = tr.apply_freeze(models, policy)
    assert any(n.startswith("encoder.blocks.1.") for n in trainable)
    assert any(n.startswith("encoder.blocks.2.") for n in trainable)
    assert not any(n.startswith("encoder.blocks.0.") for n in trainable)
    assert not any(n.startswith("encoder.ln_out.") for n in trainable)
    assert not any(n.startswith("patch.") for n in trainable)
    assert names_of(trainable).isdisjoint(names_of(frozen))
    every = dict(models.named_parameters())
    assert names_of(trainable) | names_of(frozen) == set(every)


def test_apply_freeze_k_exceeding_depth(models):
    with pytest.raises(ParameterError):
        tr.apply_freeze(models, FreezePolicy(kind="frozen_partly", k_trainable=4))


def test_apply_freeze_sets_requires_grad(models):
    tr.apply_freeze(models, FreezePolicy(kind="frozen_whole"))
    assert all(not p.requires_grad
               for _, p in models.encoder.named_parameters())
    tr.apply_freeze(models, FreezePolicy())
    assert all(p.requires_grad for _, p in models.encoder.named_parameters())


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


def test_caption_batch_modes(tiny_ds, models):
    ids = np.asarray(tiny_ds.train_ids[:4])
    tri = tr.caption_batch(tiny_ds, ids, models.vocab, "tri-modal")
    assert tri.image_feats is not None and tri.image_feats.shape == (4, 16)
    assert all(isinstance(s, TokenSequence) for s in tri.tokens)
    solo = tr.caption_batch(tiny_ds, ids, models.vocab, "fmri-text-only")
    assert solo.image_feats is None
    assert solo.fmri.shape == (4, 64)


def test_embed_split_unit_norm(tiny_ds, models):
    f, t = tr.embed_split(tiny_ds, models, tiny_ds.test_ids)
    n = len(tiny_ds.test_ids)
    assert f.shape == (n, 16) and t.shape == (n, 16)
    assert np.linalg.norm(f, axis=1) == pytest.approx(np.ones(n), abs=1e-5)
    assert np.linalg.norm(t, axis=1) == pytest.approx(np.ones(n), abs=1e-5)


def test_build_models_shares_pretrained_tensors(tiny_cfg):
    mbm = tr.build_mbm_model(tiny_cfg, seed=4)
    models = tr.build_models(tiny_cfg, Vocab.default(), seed=4, pretrained=mbm)
    assert models.patch.proj.weight is mbm.patch.proj.weight
    assert models.encoder.blocks[0] is mbm.encoder.blocks[0]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def test_align_train_rejects_other_stages(tiny_ds, models, tiny_cfg):
    cfg = stage_defaults("pretrain", model=tiny_cfg)
    with pytest.raises(ParameterError):
        tr.align_train(tiny_ds, models, cfg)


def test_align_train_start_step_bounds(tiny_ds, models, tiny_cfg):
    cfg = small_align_cfg(tiny_cfg)
    for bad in (-1, 5):
        with pytest.raises(ParameterError):
            tr.align_train(tiny_ds, models, cfg, start_step=bad)


def test_align_train_deterministic(tiny_ds, tiny_cfg):
    cfg = small_align_cfg(tiny_cfg)
    runs = []
    for _ in range(2):
        models = tr.build_models(tiny_cfg, Vocab.default(), seed=4)
        res = tr.align_train(tiny_ds, models, cfg)
        runs.append((res.traces,
                     {n: p.data.copy() for n, p in models.named_parameters()}))
    assert runs[0][0] == runs[1][0]
    for name in runs[0][1]:
        assert np.array_equal(runs[0][1][name], runs[1][1][name]), name


def test_align_train_traces_and_result(tiny_ds, models, tiny_cfg):
    cfg = small_align_cfg(tiny_cfg, steps=5)
    res = tr.align_train(tiny_ds, models, cfg)
    assert res.steps == 5
    assert isinstance(res.optimizer, AdamW) and res.optimizer.t == 5
    assert set(res.traces) == {"total", "caption", "fmri_text",
                               "fmri_image", "sigma"}
    assert all(len(v) == 5 for v in res.traces.values())


def test_traces_recombine_to_total(tiny_ds, models, tiny_cfg):
    cfg = small_align_cfg(tiny_cfg, steps=5)
    w = cfg.loss_weights
    res = tr.align_train(tiny_ds, models, cfg)
    for s in range(5):
        total = (w.fmri_image * res.traces["fmri_image"][s]
                 + w.fmri_text * res.traces["fmri_text"][s]
                 + w.caption * res.traces["caption"][s])
        assert res.traces["total"][s] == pytest.approx(total, rel=1e-6)


def test_text_only_traces_recombine(tiny_ds, models, tiny_cfg):
    cfg = small_align_cfg(tiny_cfg, steps=3, mode="fmri-text-only")
    w = cfg.loss_weights
    res = tr.align_train(tiny_ds, models, cfg)
    assert "fmri_image" not in res.traces
    for s in range(3):
        total = (w.fmri_text * res.traces["fmri_text"][s]
                 + w.caption * res.traces["caption"][s])
        assert res.traces["total"][s] == pytest.approx(total, rel=1e-6)


def test_frozen_params_bit_identical_through_training(tiny_ds, models, tiny_cfg):
    cfg = small_align_cfg(tiny_cfg, steps=4,
                          freeze=FreezePolicy(kind="frozen_whole"))
    _, frozen = tr.apply_freeze(models, cfg.freeze)
    before = {n: p.data.copy() for n, p in frozen.items()}
    tr.align_train(tiny_ds, models, cfg)
    for name, p in frozen.items():
        assert np.array_equal(before[name], p.data), name


def test_partial_freeze_moves_only_tail_blocks(tiny_ds, models, tiny_cfg):
    cfg = small_align_cfg(tiny_cfg, steps=4,
                          freeze=FreezePolicy(kind="frozen_partly", k_trainable=1))
    before = {n: p.data.copy() for n, p in models.named_parameters()}
    tr.align_train(tiny_ds, models, cfg)
    after = dict(models.named_parameters())
    assert np.array_equal(before["encoder.blocks.0.attn.wq.weight"],
                          after["encoder.blocks.0.attn.wq.weight"].data)
    assert not np.array_equal(before["encoder.blocks.2.attn.wq.weight"],
                              after["encoder.blocks.2.attn.wq.weight"].data)
