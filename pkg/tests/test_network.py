import numpy as np
import pytest
import torch

from dentarrange.errors import ShapeError
from dentarrange.geometry import apply_motion
from dentarrange.losses import reconstruct_loss
from dentarrange.network import DTAN, EncoderConfig, apply_motion_torch, predict
from dentarrange.synthgen import generate_neat

from fdcheck import TOL, relative_error

SMALL = dict(feature_dim=8, global_dim=16, mlp_widths=(8, 8), head_hidden=16, attention_heads=4, arch_hidden=8)


def small_model(conditional=False, seed=0, randomize_head=True):
    model = DTAN(EncoderConfig(**SMALL, conditional=conditional, seed=seed)).double()
    if randomize_head:
        # the zero-initialized head would block every upstream gradient
        gen = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            final = model.regressor[-1]
            final.weight.copy_(torch.randn(final.weight.shape, generator=gen, dtype=torch.float64) * 0.1)
    return model


def teeth(seed=0, L=4, N=32):
    gen = torch.Generator().manual_seed(seed)
    offsets = torch.arange(L, dtype=torch.float64)[:, None, None] * torch.tensor([6.0, 1.0, 0.0], dtype=torch.float64)
    return (torch.randn(1, L, N, 3, generator=gen, dtype=torch.float64) * 2 + offsets).clone()


def weighted_sum(*tensors, seed=7):
    gen = torch.Generator().manual_seed(seed)
    total = 0.0
    for t in tensors:
        total = total + (t * torch.randn(t.shape, generator=gen, dtype=t.dtype)).sum()
    return total


# -- invariances --------------------------------------------------------------


def test_local_encoders_are_point_permutation_invariant():
    model = small_model()
    pts = teeth()
    perm = torch.randperm(32, generator=torch.Generator().manual_seed(3))
    a = model.encode_local(pts)
    b = model.encode_local(pts[..., perm, :])
    for x, y in zip(a, b):
        assert torch.equal(x, y)


def test_f_geo_translation_invariant_and_f_pos_not():
    model = small_model()
    pts = teeth()
    shifted = pts.clone()
    shifted[0, 1] += torch.tensor([1.5, -2.0, 0.5], dtype=torch.float64)
    g0, p0 = model.encode_local(pts)
    g1, p1 = model.encode_local(shifted)
    torch.testing.assert_close(g0, g1, rtol=0, atol=1e-12)
    assert not torch.allclose(p0[0, 1], p1[0, 1])


def test_global_encoder_pooling_properties():
    model = small_model()
    pts = teeth()
    f = model.encode_global(pts)
    assert torch.equal(f, model.encode_global(pts[:, [2, 0, 3, 1]]))
    dup = torch.cat([pts, pts[:, :, :1]], dim=2)
    torch.testing.assert_close(f, model.encode_global(dup, centers=pts.mean(dim=-2)), rtol=0, atol=0)
    moved = pts.clone()
    moved[0, 2] += 1.0
    assert not torch.allclose(f, model.encode_global(moved))


def test_propagation_single_token_and_equivariance():
    model = small_model()
    f_geo, f_pos = model.encode_local(teeth())
    h_geo, h_pos = model.propagate(f_geo[:, :1], f_pos[:, :1])
    assert torch.isfinite(h_geo).all() and torch.isfinite(h_pos).all()
    perm = [3, 1, 0, 2]
    a = model.propagate(f_geo, f_pos)
    b = model.propagate(f_geo[:, perm], f_pos[:, perm])
    for x, y in zip(a, b):
        torch.testing.assert_close(x[:, perm], y, rtol=0, atol=1e-12)


def test_projection_shape_and_determinism():
    model = small_model()
    g = torch.randn(1, 16, dtype=torch.float64)
    h = torch.randn(1, 1, 8, dtype=torch.float64).expand(1, 3, 8)
    out = model.project(g, h, h)
    assert out.shape == (1, 3, 8)
    torch.testing.assert_close(out[0, 0], out[0, 1], rtol=0, atol=0)


def test_identity_initialization():
    model = DTAN(EncoderConfig(**SMALL)).double()
    pts = teeth()
    out = model(pts)
    torch.testing.assert_close(out["q"], torch.tensor([1.0, 0, 0, 0], dtype=torch.float64).expand(1, 4, 4))
    assert torch.equal(out["t"], torch.zeros(1, 4, 3, dtype=torch.float64))
    moved = apply_motion_torch(pts, out["q"], out["t"], out["centers"])
    torch.testing.assert_close(moved, pts, rtol=0, atol=1e-12)


def test_quaternions_unit_with_nonnegative_w():
    model = small_model()
    q = model(teeth(seed=4))["q"]
    torch.testing.assert_close(q.norm(dim=-1), torch.ones(1, 4, dtype=torch.float64), rtol=0, atol=1e-6)
    assert (q[..., 0] >= 0).all()


def test_arch_embedding():
    model = small_model(conditional=True)
    x1 = torch.linspace(-20, 20, 12, dtype=torch.float64)[None]
    f = model.encode_global(teeth())
    assert not torch.allclose(model.embed_arch_width(x1), model.embed_arch_width(x1 + 2))
    with torch.no_grad():
        for p in model.arch_embedding.parameters():
            p.zero_()
    torch.testing.assert_close(f + model.embed_arch_width(x1), f, rtol=0, atol=0)


def test_arch_width_standardization():
    mean, spread = tuple(np.linspace(-20, 20, 12)), (2.0,) * 12
    plain = DTAN(EncoderConfig(**SMALL, conditional=True)).double()
    standard = DTAN(EncoderConfig(**SMALL, conditional=True, arch_mean=mean, arch_spread=spread)).double()
    standard.load_state_dict(plain.state_dict())
    x = torch.tensor(mean, dtype=torch.float64)[None]
    # the standardized model sees (x - mean) / spread where the plain one sees x * coord_scale
    torch.testing.assert_close(standard.embed_arch_width(x + 4.0), plain.embed_arch_width(torch.full((1, 12), 20.0, dtype=torch.float64)))
    with pytest.raises(ValueError):
        EncoderConfig(conditional=True, arch_mean=(0.0,) * 11)
    with pytest.raises(ValueError):
        EncoderConfig(conditional=True, arch_mean=mean, arch_spread=(0.0,) * 12)
    assert EncoderConfig(**standard.config.to_dict()) == standard.config


def test_ema_update_examples():
    model = small_model()
    online = list(model.geo_encoder.parameters()) + list(model.pos_encoder.parameters())
    target = list(model.target_parameters())
    with torch.no_grad():
        for p in online:
            p.fill_(1.0)
        for p in target:
            p.zero_()
    model.ema_update(0.99)
    for p in target:
        torch.testing.assert_close(p, torch.full_like(p, 0.01))
    for k in range(2, 40):
        model.ema_update(0.99)
        expected = 1 - 0.99**k
        for p in target:
            torch.testing.assert_close(p, torch.full_like(p, expected))
    model.ema_update(0.0)
    for p, o in zip(target, online):
        assert torch.equal(p, o)
    with pytest.raises(ValueError):
        model.ema_update(1.0)


def test_forward_covers_input_labels():
    neat = generate_neat()
    from dentarrange.geometry import Dentition, fps_sample

    dent = Dentition.from_clouds({k: fps_sample(neat[k].cloud, 16) for k in (11, 12, 21, 31)})
    motions, bundle = predict(DTAN(EncoderConfig(**SMALL)), dent)
    assert sorted(motions) == dent.labels
    moved = dent.moved(motions)
    for k in dent.labels:
        np.testing.assert_allclose(moved[k].cloud, apply_motion(dent[k].cloud, motions[k]))
        np.testing.assert_allclose(moved[k].cloud, dent[k].cloud, atol=1e-5)
    assert set(bundle["f_geo"]) == set(dent.labels)


def test_forward_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        small_model()(torch.zeros(4, 32, 3, dtype=torch.float64))


def test_checkpoint_round_trip(tmp_path):
    model = small_model(conditional=True)
    model.save(tmp_path / "m.pt")
    loaded = DTAN.load(tmp_path / "m.pt")
    assert loaded.config == model.config
    for (ka, a), (kb, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert ka == kb and torch.equal(a, b)


# -- finite-difference checks at C = 8, N = 32, 4 teeth -------------------------


def params(module):
    return [p for p in module.parameters() if p.requires_grad]


def test_fd_local_encoders():
    model = small_model()
    pts = teeth()
    fn = lambda: weighted_sum(*model.encode_local(pts))
    assert relative_error(fn, params(model.geo_encoder) + params(model.pos_encoder)) < TOL
    pts.requires_grad_(True)
    assert relative_error(fn, [pts]) < TOL


def test_fd_global_encoder():
    model = small_model()
    pts = teeth()
    fn = lambda: weighted_sum(model.encode_global(pts))
    assert relative_error(fn, params(model.global_encoder)) < TOL
    pts.requires_grad_(True)
    assert relative_error(fn, [pts]) < TOL


def test_fd_propagators():
    model = small_model()
    f_geo, f_pos = (f.detach().requires_grad_(True) for f in model.encode_local(teeth()))
    fn = lambda: weighted_sum(*model.propagate(f_geo, f_pos))
    assert relative_error(fn, [f_geo, f_pos]) < TOL
    assert relative_error(fn, params(model.geo_propagator) + params(model.pos_propagator)) < TOL


def test_fd_projector():
    model = small_model()
    gen = torch.Generator().manual_seed(5)
    g = torch.randn(1, 16, generator=gen, dtype=torch.float64, requires_grad=True)
    h1 = torch.randn(1, 4, 8, generator=gen, dtype=torch.float64, requires_grad=True)
    h2 = torch.randn(1, 4, 8, generator=gen, dtype=torch.float64, requires_grad=True)
    fn = lambda: weighted_sum(model.project(g, h1, h2))
    assert relative_error(fn, [g, h1, h2]) < TOL
    assert relative_error(fn, params(model.projector)) < TOL


def test_fd_regressor():
    model = small_model()
    gen = torch.Generator().manual_seed(6)
    inputs = [torch.randn(1, 4, d, generator=gen, dtype=torch.float64, requires_grad=True) for d in (8, 3, 8, 8)]
    fn = lambda: weighted_sum(*model.regress_motion(*inputs))
    assert relative_error(fn, inputs) < TOL
    assert relative_error(fn, params(model.regressor)) < TOL


def test_fd_arch_embedding():
    model = small_model(conditional=True)
    x = torch.linspace(-20, 20, 12, dtype=torch.float64)[None].requires_grad_(True)
    fn = lambda: weighted_sum(model.embed_arch_width(x))
    assert relative_error(fn, [x] + params(model.arch_embedding)) < TOL


def moved_points(model, pts, arch_width=None):
    out = model(pts, arch_width=arch_width)
    return apply_motion_torch(pts, out["q"], out["t"], out["centers"])


def test_fd_reconstruct_loss_wrt_regressor():
    model = small_model()
    pts = teeth(seed=1)
    target = pts + 0.5
    fn = lambda: reconstruct_loss(moved_points(model, pts), target)
    assert relative_error(fn, params(model.regressor)) < TOL


@pytest.mark.parametrize("conditional", [False, True])
def test_fd_full_pipeline(conditional):
    model = small_model(conditional=conditional)
    pts = teeth(seed=2)
    x = torch.linspace(-20, 20, 12, dtype=torch.float64)[None] if conditional else None
    fn = lambda: weighted_sum(moved_points(model, pts, x))
    assert relative_error(fn, params(model)) < TOL
    pts.requires_grad_(True)
    assert relative_error(fn, [pts]) < TOL
