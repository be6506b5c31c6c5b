import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dentarrange.errors import EmptyInput, ShapeError
from dentarrange.geometry import Dentition, RigidMotion, quat_from_axis_angle, quat_normalize
from dentarrange.losses import reconstruct_loss
from dentarrange.metrics import (
    evaluate_cases,
    gap_overlap_stats,
    me_point,
    me_trans_rotat,
    pct_auc,
    rotation_error_deg,
)
from dentarrange.synthgen import ArchSpec, generate_case, generate_neat
from dentarrange.training import identity_motions

from shapes import box_surface


def brute_force_auc(errors, max_k=3.0, step=0.01):
    total = 0.0
    count = 0
    for i in range(1, int(round(max_k / step)) + 1):
        k = i * step
        total += sum(1 for e in errors if e < k) / len(errors)
        count += 1
    return 100.0 * total / count


def dentition(seed=0):
    rng = np.random.default_rng(seed)
    return Dentition.from_clouds({11: rng.normal(size=(12, 3)), 21: rng.normal(size=(12, 3)) + [4, 0, 0]})


def test_me_point_examples():
    d = dentition()
    assert me_point(d, d) == 0.0
    shifted = d.with_clouds({k: c + [0, 1.0, 0] for k, c in d.clouds().items()})
    assert me_point(shifted, d) == pytest.approx(1.0)
    other = dentition(1)
    assert me_point(other, d) == pytest.approx(reconstruct_loss(other, d), abs=1e-12)
    with pytest.raises(ShapeError):
        me_point(Dentition.from_clouds({11: d[11].cloud}), d)


def test_me_trans_rotat_examples():
    rng = np.random.default_rng(2)
    gt = {k: RigidMotion(quat_normalize(rng.normal(size=4)), rng.normal(size=3), rng.normal(size=3)) for k in (11, 12)}
    assert me_trans_rotat(gt, gt) == pytest.approx((0.0, 0.0), abs=1e-12)
    off = {k: RigidMotion(m.q, m.translation + [3.0, 4.0, 0.0], m.center) for k, m in gt.items()}
    assert me_trans_rotat(off, gt)[0] == pytest.approx(5.0)
    ten = quat_from_axis_angle([0, 0, 1], np.radians(10.0))
    assert rotation_error_deg(ten, [1, 0, 0, 0]) == pytest.approx(10.0, abs=1e-6)
    assert rotation_error_deg(-ten, [1, 0, 0, 0]) == pytest.approx(10.0, abs=1e-6)
    with pytest.raises(ShapeError):
        me_trans_rotat({11: gt[11]}, gt)


def test_me_trans_is_center_independent():
    rng = np.random.default_rng(3)
    m = RigidMotion(quat_normalize(rng.normal(size=4)), rng.normal(size=3), rng.normal(size=3))
    assert me_trans_rotat({11: m.recentered([5.0, 1.0, -2.0])}, {11: m}) == pytest.approx((0.0, 0.0), abs=1e-9)


def test_pct_auc_examples():
    curve, auc = pct_auc([0.0, 0.0])
    assert auc == 100.0
    assert len(curve) == 300 and curve[0][0] == pytest.approx(0.01) and curve[-1][0] == pytest.approx(3.0)
    assert pct_auc([3.5, 10.0])[1] == 0.0
    assert pct_auc([0.5, 2.5])[1] == pytest.approx(brute_force_auc([0.5, 2.5]), abs=1e-9)
    with pytest.raises(EmptyInput):
        pct_auc([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 4.0), min_size=1, max_size=20))
def test_pct_auc_matches_brute_force(errors):
    curve, auc = pct_auc(errors)
    assert auc == pytest.approx(brute_force_auc(errors), abs=1e-9)
    fractions = [f for _, f in curve]
    assert all(b >= a for a, b in zip(fractions, fractions[1:]))


def box_row(gap, seed=0):
    rng = np.random.default_rng(seed)
    a = box_surface(rng, [0, 0, 0], [1, 1, 1], 2000)
    b = box_surface(rng, [1 + gap, 0, 0], [2 + gap, 1, 1], 2000)
    return Dentition.from_clouds({11: a, 12: b})


def test_gap_stats_examples():
    stats = gap_overlap_stats(box_row(1.0))
    assert stats.count_over == 1
    assert stats.mean_abs == pytest.approx(1.0, abs=0.6)
    touching = gap_overlap_stats(box_row(0.0))
    assert touching.count_over == 0


def test_gap_stats_of_neat_dentition():
    neat = generate_neat()
    stats = gap_overlap_stats(neat)
    assert stats.count_over == 0
    assert stats.max_abs <= 0.6
    assert not stats.unsupported


def test_gap_stats_rigid_invariance():
    d = box_row(0.8, seed=4)
    m = RigidMotion(quat_normalize([0.9, 0.1, -0.3, 0.2]), [3.0, -1.0, 2.0], [0.5, 0.5, 0.5])
    a = gap_overlap_stats(d)
    b = gap_overlap_stats(d.transformed(m))
    assert a.mean_abs == pytest.approx(b.mean_abs, abs=0.6)
    assert a.count_over == b.count_over


def test_far_pairs_count_as_unsupported():
    # a ring of radius 40 mm around the barycenter axis stays off even the enlarged grid
    rng = np.random.default_rng(5)
    angle = np.linspace(0, 2 * np.pi, 200, endpoint=False)
    ring = np.column_stack([np.full_like(angle, 10.0), 40 * np.cos(angle), 40 * np.sin(angle)])
    d = Dentition.from_clouds({11: box_surface(rng, [0, 0, 0], [1, 1, 1], 200) - 0.5, 12: ring})
    stats = gap_overlap_stats(d)
    assert stats.unsupported == [(11, 12)]
    assert stats.count_over == 1


@pytest.fixture(scope="module")
def cases():
    base = ArchSpec(points_per_tooth=64, dense_points=400)
    return [generate_case(i, seed=11, base=base) for i in range(3)]


def test_ground_truth_predictions_score_perfectly(cases):
    report = evaluate_cases(cases, [c.gt_motions for c in cases])
    assert report.me_point < 1e-9 and report.me_trans < 1e-9 and report.me_rotat < 1e-5
    assert report.auc == 100.0


def test_identity_predictions_match_before_statistics(cases):
    report = evaluate_cases(cases, identity_motions(cases))
    before = np.mean([me_point(c.initial, c.target) for c in cases])
    assert report.me_point == pytest.approx(before, abs=1e-12)
    trans = np.mean([np.mean([np.linalg.norm(m.translation) for m in c.gt_motions.values()]) for c in cases])
    assert report.me_trans == pytest.approx(trans, abs=1e-9)
    assert sorted(report.to_dict()) == sorted(evaluate_cases(cases, identity_motions(cases)).to_dict())
    assert report.to_json() == evaluate_cases(cases, identity_motions(cases)).to_json()


def test_per_tooth_pct_mode(cases):
    per_case = evaluate_cases(cases, identity_motions(cases))
    per_tooth = evaluate_cases(cases, identity_motions(cases), per_tooth=True)
    assert per_case.me_point == per_tooth.me_point
    assert per_case.auc != per_tooth.auc
