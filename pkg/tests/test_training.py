import numpy as np
import pytest
import torch

from dentarrange.errors import ConfigError
from dentarrange.geometry import quat_angle
from dentarrange.network import DTAN
from dentarrange.synthgen import ARCH_WIDTH_LABELS, ArchSpec, generate_case
from dentarrange.training import (
    CaseArrays,
    TrainConfig,
    arch_sweep,
    augment_batch,
    evaluate_model,
    expand_targets,
    qcanon,
    qconj,
    qmat,
    qmul,
    random_rotations,
    rotate_about,
    side_widths,
    slerp_identity,
    train,
)

BASE = ArchSpec(points_per_tooth=48, dense_points=300)
TINY_MODEL = {"feature_dim": 16, "global_dim": 32, "mlp_widths": [16, 16], "head_hidden": 32}


@pytest.fixture(scope="module")
def cases():
    return [generate_case(i, seed=3, base=BASE) for i in range(6)]


@pytest.fixture(scope="module")
def arrays(cases):
    return CaseArrays.from_cases(cases, n_points=16, dense_points=48)


def tiny_config(**kw):
    base = dict(epochs=2, batch_size=4, n_points=16, dense_points=48, model=dict(TINY_MODEL), seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_quaternion_helpers_agree_with_rotation_matrices():
    rng = np.random.default_rng(0)
    a, b = random_rotations(rng, (5,), 90.0), random_rotations(rng, (5,), 90.0)
    np.testing.assert_allclose(qmat(qmul(a, b)), qmat(a) @ qmat(b), atol=1e-12)
    np.testing.assert_allclose(qmat(qconj(a)), np.swapaxes(qmat(a), -1, -2), atol=1e-12)
    half = slerp_identity(a, 0.5)
    np.testing.assert_allclose(qcanon(qmul(half, half)), qcanon(a), atol=1e-12)
    angles = [np.degrees(quat_angle(q)) for q in random_rotations(rng, (2000,), 30.0)]
    assert max(angles) <= 30.0 + 1e-9


def test_arrays_ground_truth_is_consistent(arrays):
    # rotating each input prefix about its barycenter and shifting by gt_t lands on the target prefix
    n = arrays.n_points
    centers = arrays.initial[:, :, :n].mean(axis=2)
    moved = rotate_about(arrays.initial, arrays.gt_q, centers, arrays.gt_t)
    assert np.abs(moved - arrays.target).max() < 1e-6


@pytest.mark.parametrize("mix", [(1.0, 0.0), (0.0, 1.0), (0.0, 0.0)])
def test_augmented_ground_truth_is_consistent(arrays, mix):
    cfg = tiny_config(p_naive=mix[0], p_staging=mix[1])
    idx = np.arange(len(arrays))
    initial, gt_q = augment_batch(arrays, idx, np.random.default_rng(5), cfg)
    n = arrays.n_points
    centers = initial[:, :, :n].mean(axis=2)
    t = arrays.target[:, :, :n].mean(axis=2) - centers
    moved = rotate_about(initial, gt_q, centers, t)
    assert np.abs(moved - arrays.target).max() < 1e-6
    if mix == (0.0, 0.0):
        assert np.array_equal(initial, arrays.initial)


def test_expansion_moves_targets_and_arch_width_together(arrays):
    cfg = tiny_config(expansion_mm=2.0)
    idx = np.arange(len(arrays))
    target, widths = expand_targets(arrays, idx, np.random.default_rng(6), cfg)
    delta = target - arrays.target
    assert not delta[..., 1:].any()
    for j, label in enumerate(arrays.labels):
        if label % 10 < 4:
            assert not delta[:, j].any()
        else:
            assert np.abs(delta[:, j, :, 0]).max() <= 2.0
    # the conditioning vector moves exactly as the measured barycenter x does
    slots = [arrays.labels.index(k) for k in ARCH_WIDTH_LABELS]
    shift = delta[..., 0][:, slots].mean(axis=2)
    assert np.allclose(widths - arrays.arch_width, shift)
    same, same_widths = expand_targets(arrays, idx, np.random.default_rng(6), tiny_config())
    assert np.array_equal(same, arrays.target) and np.array_equal(same_widths, arrays.arch_width)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ConfigError):
        TrainConfig(p_naive=0.7, p_staging=0.7)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3, "bogus": 1})
    with pytest.raises(ConfigError):
        TrainConfig(model={"nonsense": 3})
    cfg = tiny_config()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_training_is_deterministic(cases):
    a = train(cases, tiny_config())
    b = train(cases, tiny_config())
    assert a.history == b.history
    for (ka, va), (kb, vb) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(va, vb)
    assert [r["step"] for r in a.history] == list(range(1, 5))
    assert len(a.epoch_losses) == 2


def test_smoke_run_gives_loadable_checkpoint(cases, tmp_path):
    result = train(cases, tiny_config(epochs=1, lambda_c=0.0))
    result.model.save(tmp_path / "m.pt")
    loaded = DTAN.load(tmp_path / "m.pt")
    report, motions = evaluate_model(loaded, cases[:2], 16)
    assert len(motions) == 2 and np.isfinite(report.me_point)
    result.write_loss_csv(tmp_path / "loss.csv")
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "step,epoch,L_r,L_p,L_f,L_c,total"


def test_training_reduces_loss(cases):
    result = train(cases, tiny_config(epochs=25, p_naive=0.0, p_staging=0.0))
    assert result.epoch_losses[-1] < result.epoch_losses[0]


def test_arch_sweep_requires_conditional_model(cases):
    result = train(cases, tiny_config(epochs=1))
    with pytest.raises(ConfigError):
        arch_sweep(result.model, cases, [(0.0, 0.0)], 16)
    cond = train(cases, tiny_config(epochs=1, model={**TINY_MODEL, "conditional": True}))
    rows = arch_sweep(cond.model, cases[:2], [(0.0, 0.0), (2.0, -2.0)], 16)
    assert len(rows) == 2
    assert set(rows[0]) >= {"delta_left", "delta_right", "width_left", "width_right", "width", "asymmetry"}
    assert result.model.config.arch_mean is None


def test_conditional_training_records_arch_width_statistics(cases, arrays):
    cond = train(arrays, tiny_config(epochs=1, expansion_mm=2.0, model={**TINY_MODEL, "conditional": True}))
    config = cond.model.config
    assert np.allclose(config.arch_mean, arrays.arch_width.mean(axis=0))
    spread = np.sqrt(arrays.arch_width.var(axis=0) + 4.0 / 3.0)
    assert np.allclose(config.arch_spread, np.maximum(spread, 0.5))


def test_side_widths_of_target(cases):
    left, right = side_widths(cases[0].target)
    assert left > 0 and right > 0
