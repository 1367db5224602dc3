"""Masked brain modeling tests: mask arithmetic, loss restriction to masked
rows, a small overfit run, and trace determinism."""

import numpy as np
import pytest

from neurocap import tensor as T
from neurocap.mbm import (
    MaskPlan,
    MbmModel,
    MbmTrainConfig,
    apply_mask,
    make_mask,
    masked_mse_eval,
    mbm_forward,
    mbm_loss,
    pretrain,
    zscored_patches,
)
from neurocap.nn import BlockConfig
from neurocap.optim import DivergenceError
from neurocap.tensor import ParameterError, ShapeError, Tensor


def tiny_model(n_voxels=64, patch=16, seed=0, dtype=np.float64):
    return MbmModel(
        n_voxels, patch,
        encoder=BlockConfig(hidden=16, heads=2, layers=2, ff_mult=2),
        decoder=BlockConfig(hidden=8, heads=2, layers=1, ff_mult=2),
        seed=seed, dtype=dtype,
    )


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


def test_mask_count_at_default_ratio():
    plan = make_mask(8, 0.75, seed=0)
    assert len(plan.masked_ids) == 6
    assert plan.masked_ids == tuple(sorted(set(plan.masked_ids)))


def test_mask_clamps_to_leave_one_visible():
    assert len(make_mask(2, 0.9, seed=1).masked_ids) == 1
    assert len(make_mask(2, 0.01, seed=1).masked_ids) == 1
    # floor(0.75 * 983) for the full-scale patch count
    assert len(make_mask(983, 0.75, seed=2).masked_ids) == 737


def test_mask_determinism():
    assert make_mask(32, 0.75, seed=7).masked_ids == make_mask(32, 0.75, seed=7).masked_ids
    assert make_mask(32, 0.75, seed=7).masked_ids != make_mask(32, 0.75, seed=8).masked_ids


def test_mask_parameter_validation():
    with pytest.raises(ParameterError):
        make_mask(1, 0.5, seed=0)
    with pytest.raises(ParameterError):
        make_mask(8, 0.0, seed=0)
    with pytest.raises(ParameterError):
        make_mask(8, 1.0, seed=0)
    with pytest.raises(ParameterError):
        MaskPlan(8, (0, 1, 2, 3, 4, 5, 9), 0.75)  # out of range
    with pytest.raises(ParameterError):
        MaskPlan(8, (0, 1), 0.75)  # wrong count


def test_apply_mask_zeroes_exactly_the_masked_rows():
    plan = make_mask(8, 0.75, seed=3)
    patches = np.random.default_rng(4).normal(size=(8, 16))
    out = apply_mask(patches, plan)
    masked = list(plan.masked_ids)
    kept = [i for i in range(8) if i not in masked]
    assert np.all(out[masked] == 0.0)
    assert np.array_equal(out[kept], patches[kept])
    assert np.array_equal(apply_mask(out, plan), out)  # idempotent


def test_apply_mask_rejects_mismatched_plan():
    with pytest.raises(ShapeError):
        apply_mask(np.zeros((4, 16)), make_mask(8, 0.75, seed=0))


# ---------------------------------------------------------------------------
# model / forward / loss
# ---------------------------------------------------------------------------


def test_encoder_must_be_deeper_than_decoder():
    with pytest.raises(ParameterError):
        MbmModel(64, 16,
                 encoder=BlockConfig(hidden=16, heads=2, layers=1),
                 decoder=BlockConfig(hidden=8, heads=2, layers=1))


def test_forward_reconstructs_full_length():
    model = tiny_model()
    voxels = np.random.default_rng(5).normal(size=64)
    for seed in range(3):
        plan = make_mask(4, 0.5, seed=seed)
        recon = mbm_forward(voxels, plan, model)
        assert recon.shape == (4, 16)
        assert np.all(np.isfinite(recon.data))


def test_loss_is_zero_when_recon_equals_target():
    plan = make_mask(4, 0.5, seed=0)
    target = np.random.default_rng(6).normal(size=(4, 16))
    assert mbm_loss(Tensor(target), target, plan).item() == 0.0


def test_loss_hand_case():
    # one masked patch [1, 2] vs target [0, 0] -> (1 + 4) / 2 = 2.5
    plan = MaskPlan(2, (0,), 0.5)
    recon = Tensor([[1.0, 2.0], [9.0, 9.0]])
    target = np.array([[0.0, 0.0], [-3.0, 7.0]])
    assert mbm_loss(recon, target, plan).item() == pytest.approx(2.5, abs=1e-12)


def test_loss_ignores_unmasked_rows():
    plan = make_mask(4, 0.5, seed=1)
    target = np.random.default_rng(7).normal(size=(4, 16))
    recon = np.random.default_rng(8).normal(size=(4, 16))
    base = mbm_loss(Tensor(recon), target, plan).item()
    perturbed = target.copy()
    for i in range(4):
        if i not in plan.masked_ids:
            perturbed[i] += 100.0
    assert mbm_loss(Tensor(recon), perturbed, plan).item() == base


def test_unmasked_rows_get_zero_gradient():
    plan = make_mask(4, 0.5, seed=2)
    recon = Tensor(np.random.default_rng(9).normal(size=(4, 16)), requires_grad=True)
    loss = mbm_loss(recon, np.zeros((4, 16)), plan)
    T.backward(loss)
    for i in range(4):
        if i in plan.masked_ids:
            assert np.any(recon.grad[i] != 0.0)
        else:
            assert np.all(recon.grad[i] == 0.0)


def test_two_patch_toy_finite_diff():
    model = tiny_model(n_voxels=32, patch=16)
    plan = MaskPlan(2, (1,), 0.5)
    voxels = np.random.default_rng(10).normal(size=32)
    target = zscored_patches(model, voxels)
    start = Tensor(apply_mask(target, plan), requires_grad=True)
    err = T.finite_diff_check(
        lambda p: mbm_loss(model.reconstruct(p), target, plan), start)
    assert err < 1e-4


def test_zscored_patches_normalizes_per_sample():
    model = tiny_model()
    voxels = np.random.default_rng(11).normal(3.0, 5.0, size=(2, 64))
    patches = zscored_patches(model, voxels)
    flat = patches.reshape(2, -1)
    np.testing.assert_allclose(flat.mean(axis=1), 0.0, atol=1e-6)
    np.testing.assert_allclose(flat.std(axis=1), 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def test_zero_steps_leaves_model_unchanged():
    model = tiny_model(dtype=np.float32)
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    trace = pretrain(np.random.default_rng(12).normal(size=(8, 64)), model,
                     MbmTrainConfig(), steps=0, seed=0)
    assert trace == []
    for n, p in model.named_parameters():
        assert np.array_equal(p.data, before[n])


def _structured_voxels(n=8, v=64, seed=7):
    from neurocap import datagen as dg

    lats = [dg.make_latent(seed, i) for i in range(n)]
    return np.stack([
        dg.latent_to_voxels(l, dg.sample_seeds(seed, i)[0], v)
        for i, l in enumerate(lats)
    ])


def overfit_model(seed=0):
    return MbmModel(
        64, 16,
        encoder=BlockConfig(hidden=32, heads=2, layers=2, ff_mult=2),
        decoder=BlockConfig(hidden=16, heads=2, layers=1, ff_mult=2),
        seed=seed, dtype=np.float32,
    )


def test_pretrain_is_deterministic_and_overfits_eight_samples():
    voxels = _structured_voxels()
    cfg = MbmTrainConfig(lr=3e-3, batch_size=8, mask_ratio=0.5)

    model_a = overfit_model()
    trace_a = pretrain(voxels, model_a, cfg, steps=800, seed=42)
    model_b = overfit_model()
    trace_b = pretrain(voxels, model_b, cfg, steps=800, seed=42)

    assert trace_a == trace_b
    for (na, pa), (_, pb) in zip(model_a.named_parameters(),
                                 model_b.named_parameters()):
        assert pa.data.tobytes() == pb.data.tobytes(), na

    mse, baseline = masked_mse_eval(model_a, voxels, ratio=0.5, seed=99)
    assert mse < 0.10 * baseline, (mse, baseline)


def test_loss_trace_quartile_drop():
    voxels = _structured_voxels(seed=8)
    model = overfit_model(seed=1)
    trace = pretrain(voxels, model, MbmTrainConfig(lr=3e-3, batch_size=8),
                     steps=400, seed=1)
    q = len(trace) // 4
    assert np.mean(trace[-q:]) < 0.5 * np.mean(trace[:q])


def test_pretrain_rejects_empty_dataset():
    with pytest.raises(ParameterError):
        pretrain(np.zeros((0, 64)), tiny_model(), MbmTrainConfig(), steps=1, seed=0)


def test_divergence_reports_step_index():
    model = tiny_model(dtype=np.float32)
    voxels = np.random.default_rng(15).normal(size=(8, 64))
    cfg = MbmTrainConfig(lr=1e18, clip_norm=1e20)  # force a blow-up
    with pytest.raises(DivergenceError) as exc:
        pretrain(voxels, model, cfg, steps=50, seed=0)
    assert exc.value.step >= 0
