"""Arrangement accuracy metrics and gap/overlap statistics."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .collision import DEFAULT_INTERVAL, DEFAULT_RESOLUTION, collide
from .errors import EmptyInput, NoOverlapSupport, ShapeError
from .geometry import Dentition, apply_motion, quat_normalize

PCT_MAX_MM = 3.0
PCT_STEP_MM = 0.01
GAP_THRESHOLD_MM = 0.5


def _check_correspondence(predicted: Dentition, target: Dentition) -> None:
    if set(predicted.labels) != set(target.labels):
        raise ShapeError(f"label sets differ: {sorted(predicted.labels)} vs {sorted(target.labels)}")
    for label in target.labels:
        if predicted[label].cloud.shape != target[label].cloud.shape:
            raise ShapeError(f"tooth {label}: point counts differ")


def per_tooth_point_error(predicted: Dentition, target: Dentition) -> dict[int, float]:
    _check_correspondence(predicted, target)
    return {
        label: float(np.linalg.norm(predicted[label].cloud - target[label].cloud, axis=1).mean())
        for label in target.labels
    }


def me_point(predicted: Dentition, target: Dentition) -> float:
    """Mean point-wise Euclidean distance, averaged per tooth then over teeth."""
    return float(np.mean(list(per_tooth_point_error(predicted, target).values())))


def rotation_error_deg(q_pred, q_true) -> float:
    """Geodesic angle between two rotations, in degrees."""
    dot = abs(float(np.dot(quat_normalize(q_pred), quat_normalize(q_true))))
    return float(np.degrees(2.0 * np.arccos(min(1.0, dot))))


def me_trans_rotat(predicted: dict, ground_truth: dict) -> tuple[float, float]:
    if set(predicted) != set(ground_truth):
        raise ShapeError("motion label sets differ")
    if not predicted:
        raise EmptyInput("no motions to compare")
    labels = sorted(ground_truth)
    # compare translations about the ground-truth rotation center
    aligned = {k: predicted[k].recentered(ground_truth[k].center) for k in labels}
    trans = [np.linalg.norm(aligned[k].translation - ground_truth[k].translation) for k in labels]
    rot = [rotation_error_deg(predicted[k].q, ground_truth[k].q) for k in labels]
    return float(np.mean(trans)), float(np.mean(rot))


def pct_thresholds(max_k: float = PCT_MAX_MM, step: float = PCT_STEP_MM) -> np.ndarray:
    count = int(round(max_k / step))
    return np.arange(1, count + 1) * step


def pct_auc(errors, max_k: float = PCT_MAX_MM, step: float = PCT_STEP_MM) -> tuple[list[tuple[float, float]], float]:
    """PCT@K for K = step, 2 step, ..., max_k (strictly below K) and AUC in [0, 100]."""
    errors = np.asarray(list(errors), dtype=np.float64)
    if errors.size == 0:
        raise EmptyInput("no errors to summarize")
    ks = pct_thresholds(max_k, step)
    fractions = (errors[None, :] < ks[:, None]).mean(axis=1)
    return [(float(k), float(f)) for k, f in zip(ks, fractions)], float(100.0 * fractions.mean())


@dataclass
class GapStats:
    mean_abs: float
    max_abs: float
    count_over: int
    values: dict = field(default_factory=dict)
    unsupported: list = field(default_factory=list)


def pair_separation(cloud_u, cloud_v, interval=DEFAULT_INTERVAL, resolution=DEFAULT_RESOLUTION, max_resolution=200):
    """Collision value, enlarging the grid until the clouds share a cell (or giving up)."""
    rows, cols = resolution
    while True:
        try:
            return collide(cloud_u, cloud_v, interval, (rows, cols)).c_uv
        except NoOverlapSupport:
            if rows >= max_resolution and cols >= max_resolution:
                raise
            rows, cols = min(2 * rows, max_resolution), min(2 * cols, max_resolution)


def gap_overlap_stats(
    dentition: Dentition,
    motions: dict | None = None,
    pairs: str = "neighbor",
    threshold: float = GAP_THRESHOLD_MM,
    interval: float = DEFAULT_INTERVAL,
    resolution=DEFAULT_RESOLUTION,
) -> GapStats:
    """Signed separations of adjacent teeth measured with the collision function.

    Pairs that share no grid cell even on an enlarged grid are far apart; they
    count as over the threshold and are listed in ``unsupported``.
    """
    clouds = dentition.clouds()
    if motions:
        clouds = {k: apply_motion(c, motions[k]) if k in motions else c for k, c in clouds.items()}
    if pairs == "neighbor":
        pair_list = sorted(dentition.neighbor_pairs)
    elif pairs == "all":
        pair_list = dentition.pairs()
    else:
        raise ValueError(f"unknown pair set {pairs!r}")
    values, unsupported = {}, []
    for u, v in pair_list:
        try:
            values[(u, v)] = pair_separation(clouds[u], clouds[v], interval, resolution)
        except NoOverlapSupport:
            unsupported.append((u, v))
    mags = np.abs(np.array(list(values.values()))) if values else np.zeros(0)
    return GapStats(
        mean_abs=float(mags.mean()) if mags.size else 0.0,
        max_abs=float(mags.max()) if mags.size else 0.0,
        count_over=int((mags > threshold).sum()) + len(unsupported),
        values=values,
        unsupported=unsupported,
    )


@dataclass
class EvalReport:
    me_point: float
    me_trans: float
    me_rotat: float
    pct_curve: list
    auc: float
    gap_stats: dict
    per_case: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def write_pct_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold_mm", "fraction"])
            writer.writerows(self.pct_curve)


def evaluate_cases(cases, predicted_motions, per_tooth: bool = False, gap_pairs: str = "neighbor") -> EvalReport:
    """Score predicted motions against case records (objects with initial/target/gt_motions)."""
    if not cases:
        raise EmptyInput("no cases to evaluate")
    per_case, pct_errors = [], []
    for case, motions in zip(cases, predicted_motions):
        predicted = case.initial.moved(motions)
        tooth_err = per_tooth_point_error(predicted, case.target)
        trans, rot = me_trans_rotat(motions, case.gt_motions)
        gaps = gap_overlap_stats(predicted, pairs=gap_pairs)
        point = float(np.mean(list(tooth_err.values())))
        per_case.append({
            "me_point": point, "me_trans": trans, "me_rotat": rot,
            "gap_mean_abs": gaps.mean_abs, "gap_max_abs": gaps.max_abs, "gap_count": gaps.count_over,
        })
        pct_errors.extend(tooth_err.values() if per_tooth else [point])
    curve, auc = pct_auc(pct_errors)

    def mean(key):
        return float(np.mean([row[key] for row in per_case]))

    return EvalReport(
        me_point=mean("me_point"),
        me_trans=mean("me_trans"),
        me_rotat=mean("me_rotat"),
        pct_curve=curve,
        auc=auc,
        gap_stats={
            "mean_abs_d": mean("gap_mean_abs"),
            "max_abs_d": mean("gap_max_abs"),
            "count_pairs_abs_d_gt_0_5": mean("gap_count"),
        },
        per_case=per_case,
    )
