"""Training losses: reconstruction, quaternion parameter, feature consistency, collision."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .collision import DEFAULT_INTERVAL, DEFAULT_RESOLUTION, dentition_batch_collision_values
from .errors import CannotRearrange, DegenerateFeature, NonFiniteLoss, ShapeError
from .geometry import LABEL_INDEX, Dentition, Tooth, category


@dataclass(frozen=True)
class LossWeights:
    lambda_r: float = 0.5
    lambda_p: float = 20.0
    lambda_f: float = 1.0
    lambda_c: float = 2.0

    def __post_init__(self):
        if min(self.lambda_r, self.lambda_p, self.lambda_f, self.lambda_c) < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def _masked_mean(values: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is None:
        return values.mean()
    mask = mask.to(values.dtype)
    return (values * mask).sum() / mask.sum().clamp_min(1.0)


def _dentition_stack(predicted: Dentition, target: Dentition):
    if set(predicted.labels) != set(target.labels):
        raise ShapeError("predicted and target label sets differ")
    labels = target.labels
    shapes = {predicted[k].cloud.shape for k in labels} | {target[k].cloud.shape for k in labels}
    if len(shapes) != 1:
        raise ShapeError("teeth must share one point count for index correspondence")
    pred = torch.as_tensor(np.stack([predicted[k].cloud for k in labels]))
    tgt = torch.as_tensor(np.stack([target[k].cloud for k in labels]))
    return pred.unsqueeze(0), tgt.unsqueeze(0)


def reconstruct_loss(predicted, target, mask=None, squared: bool = False):
    """Mean distance between corresponding points, per tooth then over teeth.

    Accepts two dentitions (returns a float) or tensors ``(B, L, N, 3)`` with an
    optional tooth mask ``(B, L)``.
    """
    if isinstance(predicted, Dentition):
        return float(reconstruct_loss(*_dentition_stack(predicted, target), squared=squared))
    if predicted.shape != target.shape:
        raise ShapeError(f"shape mismatch {tuple(predicted.shape)} vs {tuple(target.shape)}")
    diff = predicted - target
    d = (diff**2).sum(-1) if squared else torch.linalg.vector_norm(diff, dim=-1)
    return _masked_mean(d.mean(-1), mask)


def canonical_quat(q: torch.Tensor) -> torch.Tensor:
    return torch.where(q[..., :1] < 0, -q, q)


def parameter_loss(q_pred, q_true, mask=None):
    """Mean quaternion distance after sign canonicalization (w >= 0).

    Accepts label-keyed dicts of quaternions/motions or tensors ``(..., 4)``.
    """
    if isinstance(q_pred, dict):
        if set(q_pred) != set(q_true):
            raise ShapeError("predicted and target label sets differ")
        labels = sorted(q_true)

        def as_q(v):
            return np.asarray(getattr(v, "q", v), dtype=np.float64)

        a = torch.as_tensor(np.stack([as_q(q_pred[k]) for k in labels]))
        b = torch.as_tensor(np.stack([as_q(q_true[k]) for k in labels]))
        return float(parameter_loss(a, b))
    diff = canonical_quat(q_pred) - canonical_quat(q_true)
    return _masked_mean(torch.linalg.vector_norm(diff, dim=-1), mask)


def _unit(x: torch.Tensor, name: str) -> torch.Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    if torch.any(norm < 1e-12):
        raise DegenerateFeature(f"{name} has a zero-norm feature vector")
    return x / norm


def consistency_loss(f_geo, geo_pos, geo_neg, f_proj, pos_pos, pos_neg, mask=None):
    """Contrastive agreement of online features with target-encoder features.

    Positives are the same teeth in the ground truth; negatives are ground-truth
    teeth of a different category. All inputs are ``(..., C)``; target-side
    features are detached.
    """
    def sim(a, b, name):
        return (_unit(a, name) * _unit(b.detach(), name)).sum(-1)

    per_tooth = 0.25 * (
        2.0 - sim(f_geo, geo_pos, "geometric")
        + sim(f_geo, geo_neg, "geometric")
        + 2.0 - sim(f_proj, pos_pos, "positional")
        + sim(f_proj, pos_neg, "positional")
    )
    return _masked_mean(per_tooth, mask)


def negative_permutation(labels, seed) -> dict[int, int]:
    """Map each label to a source label of a different category, as a seeded permutation."""
    labels = sorted(labels)
    cats = [category(k) for k in labels]
    n = len(labels)
    counts = {c: cats.count(c) for c in set(cats)}
    if len(counts) < 2 or max(counts.values()) * 2 > n:
        raise CannotRearrange(f"no cross-category rearrangement exists for categories {counts}")
    rng = np.random.default_rng(seed)
    cost = rng.uniform(size=(n, n))
    same = np.array([[a == b for b in cats] for a in cats])
    cost[same] = 1e6
    rows, cols = linear_sum_assignment(cost)
    if same[rows, cols].any():
        raise CannotRearrange("assignment could not avoid same-category swaps")
    return {labels[r]: labels[c] for r, c in zip(rows, cols)}


def make_negative_pairs(dentition: Dentition, seed) -> Dentition:
    """Dentition whose tooth ``l`` carries the cloud of a tooth from another category."""
    perm = negative_permutation(dentition.labels, seed)
    return Dentition(
        {k: Tooth(k, dentition[perm[k]].cloud) for k in dentition.labels},
        dentition.neighbor_pairs,
        dentition.occlusal_pairs,
    )


def negative_index(labels, seed) -> list[int]:
    """Slot indices (into ``labels`` order) of each slot's negative partner."""
    perm = negative_permutation(labels, seed)
    pos = {k: i for i, k in enumerate(labels)}
    return [pos[perm[k]] for k in labels]


def pair_index_tensors(pairs, labels=None):
    order = LABEL_INDEX if labels is None else {k: i for i, k in enumerate(labels)}
    u = torch.tensor([order[a] for a, _ in pairs], dtype=torch.long)
    v = torch.tensor([order[b] for _, b in pairs], dtype=torch.long)
    return u, v


def batch_collision_loss(points, pair_u, pair_v, mask=None, interval=DEFAULT_INTERVAL, resolution=DEFAULT_RESOLUTION):
    """Per-case mean of ``c**2`` over the pair graph, averaged over the batch.

    ``points`` is ``(B, L, N, 3)``; ``pair_u``/``pair_v`` index the slot dimension.
    Returns ``(loss, c, supported)`` with ``c`` of shape ``(B, P)``.
    """
    B, P = points.shape[0], len(pair_u)
    c, supported = dentition_batch_collision_values(points, pair_u, pair_v, interval, resolution)
    present = torch.ones(B, P, dtype=torch.bool) if mask is None else mask[:, pair_u] & mask[:, pair_v]
    weight = present.to(c.dtype)
    per_case = (c**2 * weight).sum(1) / weight.sum(1).clamp_min(1.0)
    return per_case.mean(), c, supported & present


def total_loss(l_r, l_p, l_f, l_c, weights: LossWeights = LossWeights()):
    values = [l_r, l_p, l_f, l_c]
    for name, v in zip(("reconstruct", "parameter", "consistency", "collision"), values):
        if not math.isfinite(float(v.detach() if torch.is_tensor(v) else v)):
            raise NonFiniteLoss(f"{name} loss is not finite: {float(v)}")
    return weights.lambda_r * l_r + weights.lambda_p * l_p + weights.lambda_f * l_f + weights.lambda_c * l_c
