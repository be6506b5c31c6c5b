"""Training loop, batched augmentation, evaluation and the two experiment sweeps."""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .collision import DEFAULT_INTERVAL, DEFAULT_RESOLUTION
from .errors import ConfigError, EmptyInput, NonFiniteLoss
from .geometry import RigidMotion, default_neighbor_pairs, default_occlusal_pairs, position, quadrant, quat_normalize
from .losses import (
    LossWeights,
    batch_collision_loss,
    consistency_loss,
    negative_index,
    pair_index_tensors,
    parameter_loss,
    reconstruct_loss,
    total_loss,
)
from .metrics import evaluate_cases
from .network import DTAN, EncoderConfig, apply_motion_torch
from .synthgen import ARCH_WIDTH_LABELS, CALIBRATED_SEVERITY, LEFT_WIDTH_LABELS, MAX_ROTATION_DEG, arch_width_of, offset_arch_width

LOSS_COLUMNS = ("step", "epoch", "L_r", "L_p", "L_f", "L_c", "total")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    optimizer: str = "adam"
    lr: float = 2e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    cosine_schedule: bool = True
    grad_clip: float = 10.0
    n_points: int = 64
    # points per tooth for the reconstruction and collision terms; the collision
    # value is only meaningful on dense clouds
    dense_points: int = 512
    lambda_r: float = 0.5
    lambda_p: float = 20.0
    lambda_f: float = 1.0
    lambda_c: float = 2.0
    interval: float = DEFAULT_INTERVAL
    resolution: tuple = DEFAULT_RESOLUTION
    # augmentation mix: the rest of the probability mass keeps the stored initial pose
    p_naive: float = 0.4
    p_staging: float = 0.4
    aug_severity: float = CALIBRATED_SEVERITY
    stage_noise_deg: float = 3.0
    stage_noise_mm: float = 0.2
    # conditional model only: random per-side outward shift of the target posterior teeth
    expansion_mm: float = 0.0
    seed: int = 0
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        self.resolution = tuple(int(r) for r in self.resolution)
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.n_points < 1:
            raise ConfigError("epochs, batch_size and n_points must be positive")
        if self.dense_points < self.n_points:
            raise ConfigError("dense_points must be at least n_points")
        if self.p_naive < 0 or self.p_staging < 0 or self.p_naive + self.p_staging > 1:
            raise ConfigError("augmentation probabilities must be non-negative and sum to at most 1")
        try:
            self.encoder_config()
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from exc

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_r, self.lambda_p, self.lambda_f, self.lambda_c)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(**{"seed": self.seed, **self.model})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# batched quaternions (numpy, ``(..., 4)`` in w, x, y, z order)


def qmul(a, b):
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], -1)


def qconj(q):
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def qmat(q):
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], -1).reshape(*q.shape[:-1], 3, 3)


def qcanon(q):
    return np.where(q[..., :1] < 0, -q, q)


def random_rotations(rng, shape, max_deg):
    """Axis uniform on the sphere, angle uniform in ``[-max_deg, max_deg]``."""
    axis = rng.normal(size=(*shape, 3))
    axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.deg2rad(rng.uniform(-max_deg, max_deg, shape))
    return qcanon(np.concatenate([np.cos(half)[..., None], np.sin(half)[..., None] * axis], -1))


def slerp_identity(q, s):
    """Fraction ``s`` (broadcast over leading dims) of each rotation, from the identity."""
    q = qcanon(q)
    vec = q[..., 1:]
    sin_half = np.linalg.norm(vec, axis=-1)
    half = np.arctan2(sin_half, q[..., 0])
    axis = np.divide(vec, sin_half[..., None], out=np.zeros_like(vec), where=sin_half[..., None] > 1e-15)
    half_s = half * s
    return np.concatenate([np.cos(half_s)[..., None], np.sin(half_s)[..., None] * axis], -1)


def rotate_about(points, q, center, t=None):
    """points (..., N, 3) rotated by q (..., 4) about center (..., 3), then shifted by t."""
    out = np.einsum("...ij,...nj->...ni", qmat(q), points - center[..., None, :]) + center[..., None, :]
    return out if t is None else out + t[..., None, :]


# ---------------------------------------------------------------------------
# data


@dataclass
class CaseArrays:
    """Cases stacked in slot order.

    Clouds keep their first ``D`` points (FPS order, so every prefix is itself a
    farthest-point subset); the network sees the first ``n_points`` of them.
    """

    initial: np.ndarray  # (S, L, D, 3)
    target: np.ndarray  # (S, L, D, 3)
    gt_q: np.ndarray  # (S, L, 4), maps initial to target
    gt_t: np.ndarray  # (S, L, 3), about the barycenters of the network input
    arch_width: np.ndarray  # (S, 12)
    labels: list
    n_points: int

    @classmethod
    def from_cases(cls, cases, n_points: int, dense_points: int | None = None) -> "CaseArrays":
        if not cases:
            raise EmptyInput("no cases")
        labels = cases[0].target.labels
        fewest = None
        for case in cases:
            if case.target.labels != labels or case.initial.labels != labels:
                raise ConfigError("all cases must carry the same teeth")
            counts = [len(case.initial[k].cloud) for k in labels] + [len(case.target[k].cloud) for k in labels]
            fewest = min(counts) if fewest is None else min(fewest, *counts)
        if fewest < n_points:
            raise ConfigError(f"network input needs {n_points} points per tooth, dataset teeth have {fewest}")
        dense = fewest if dense_points is None else min(int(dense_points), fewest)
        dense = max(dense, n_points)
        initial = np.stack([[c.initial[k].cloud[:dense] for k in labels] for c in cases])
        target = np.stack([[c.target[k].cloud[:dense] for k in labels] for c in cases])
        gt_q = np.stack([[quat_normalize(c.gt_motions[k].q) for k in labels] for c in cases])
        # rotation and target alone fix the translation about the input barycenter
        gt_t = target[:, :, :n_points].mean(axis=2) - initial[:, :, :n_points].mean(axis=2)
        arch = np.stack([np.asarray(c.arch_width, dtype=np.float64) for c in cases])
        return cls(initial, target, gt_q, gt_t, arch, list(labels), int(n_points))

    def __len__(self) -> int:
        return len(self.initial)

    @property
    def inputs(self) -> np.ndarray:
        return self.initial[:, :, :self.n_points]


def augment_batch(arrays: CaseArrays, idx, rng: np.random.Generator, cfg: TrainConfig):
    """Fresh initial poses for the cases ``idx``; returns ``(initial, gt_q)``.

    Per case one of: the stored pose, a naive re-perturbation of the target, or
    an interpolated stage with small noise.
    """
    target = arrays.target[idx]
    initial = arrays.initial[idx].copy()
    gt_q = arrays.gt_q[idx].copy()
    B, L = gt_q.shape[:2]
    draw = rng.uniform(size=B)
    naive = draw < cfg.p_naive
    staging = (draw >= cfg.p_naive) & (draw < cfg.p_naive + cfg.p_staging)

    if naive.any():
        tgt = target[naive]
        q = random_rotations(rng, tgt.shape[:2], MAX_ROTATION_DEG * cfg.aug_severity)
        t = rng.normal(0.0, cfg.aug_severity, (*tgt.shape[:2], 3))
        initial[naive] = rotate_about(tgt, q, tgt[:, :, :arrays.n_points].mean(axis=2), t)
        gt_q[naive] = qcanon(qconj(q))
    if staging.any():
        init = initial[staging]
        q_gt = gt_q[staging]
        s = rng.uniform(size=(len(init), 1))
        q_s = slerp_identity(q_gt, s)
        centers = init[:, :, :arrays.n_points].mean(axis=2)
        staged = rotate_about(init, q_s, centers, s[..., None] * arrays.gt_t[idx][staging])
        q_n = random_rotations(rng, init.shape[:2], cfg.stage_noise_deg)
        t_n = rng.normal(0.0, cfg.stage_noise_mm, (*init.shape[:2], 3))
        initial[staging] = rotate_about(staged, q_n, staged[:, :, :arrays.n_points].mean(axis=2), t_n)
        # new initial -> stage -> stored initial -> target
        gt_q[staging] = qcanon(qmul(q_gt, qmul(qconj(q_s), qconj(q_n))))
    return initial, gt_q


def expand_targets(arrays: CaseArrays, idx, rng: np.random.Generator, cfg: TrainConfig):
    """Targets and arch widths with the posterior teeth of each side moved outward.

    Each side gets its own offset drawn from ``[-expansion_mm, expansion_mm]``;
    the arch width vector moves with it, so it is the only input that tells the
    network how wide to build the arch. Rotations are untouched.
    """
    target = arrays.target[idx].copy()
    widths = arrays.arch_width[idx].copy()
    if cfg.expansion_mm <= 0:
        return target, widths
    deltas = rng.uniform(-cfg.expansion_mm, cfg.expansion_mm, (len(target), 2))
    for j, label in enumerate(arrays.labels):
        if position(label) >= 4:
            left = quadrant(label) in (1, 4)
            target[:, j, :, 0] += np.where(left, -deltas[:, 0], deltas[:, 1])[:, None]
    widths = np.stack([offset_arch_width(x, dl, dr) for x, (dl, dr) in zip(widths, deltas)])
    return target, widths


def arch_standardized(config: EncoderConfig, arrays: CaseArrays, expansion_mm: float = 0.0) -> EncoderConfig:
    """Fill the arch width mean/spread of a conditional config from the training cases.

    The spread includes the variance added by the expansion offsets; it never
    drops below half a millimetre.
    """
    if not config.conditional or config.arch_mean is not None:
        return config
    mean = arrays.arch_width.mean(axis=0)
    spread = np.sqrt(arrays.arch_width.var(axis=0) + expansion_mm ** 2 / 3.0)
    return EncoderConfig(**{**config.to_dict(), "arch_mean": mean.tolist(), "arch_spread": np.maximum(spread, 0.5).tolist()})


def pair_slots(labels, pairs):
    return pair_index_tensors(pairs, labels)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: DTAN
    history: list
    epoch_losses: list
    seconds: float

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
            writer.writeheader()
            writer.writerows(self.history)


def _optimizer(cfg: TrainConfig, params):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def train(train_cases, cfg: TrainConfig, log=None, epoch_callback=None) -> TrainResult:
    """Fit a model; ``train_cases`` is a list of case records or a ``CaseArrays``."""
    if isinstance(train_cases, CaseArrays):
        arrays = train_cases
        if arrays.n_points != cfg.n_points:
            raise ConfigError(f"arrays hold {arrays.n_points}-point inputs, config asks for {cfg.n_points}")
    else:
        arrays = CaseArrays.from_cases(train_cases, cfg.n_points, cfg.dense_points)
    model = DTAN(arch_standardized(cfg.encoder_config(), arrays, cfg.expansion_mm))
    model.train()
    weights = cfg.weights
    opt = _optimizer(cfg, model.online_parameters())
    steps_per_epoch = -(-len(arrays) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    sched = None
    if cfg.cosine_schedule:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps)

    pairs = sorted(default_neighbor_pairs(arrays.labels) | default_occlusal_pairs(arrays.labels))
    pair_u, pair_v = pair_slots(arrays.labels, pairs)
    conditional = model.config.conditional
    dtype = torch.float32
    history, epoch_losses = [], []
    start = time.perf_counter()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(arrays))
        totals = []
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            init_np, gt_q_np = augment_batch(arrays, idx, rng, cfg)
            target_np, aw_np = expand_targets(arrays, idx, rng, cfg) if conditional else (arrays.target[idx], None)
            dense = torch.as_tensor(init_np, dtype=dtype)
            points = dense[:, :, :cfg.n_points]
            target = torch.as_tensor(target_np, dtype=dtype)
            gt_q = torch.as_tensor(gt_q_np, dtype=dtype)
            aw = torch.as_tensor(aw_np, dtype=dtype) if conditional else None

            out = model(points, arch_width=aw)
            moved = apply_motion_torch(dense, out["q"], out["t"], out["centers"])
            l_r = reconstruct_loss(moved, target)
            l_p = parameter_loss(out["q"], gt_q)
            geo_pos, pos_pos = model.encode_target(target[:, :, :cfg.n_points])
            neg = torch.as_tensor(np.stack([
                negative_index(arrays.labels, [cfg.seed, epoch, int(i)]) for i in idx
            ]))
            gather = neg.unsqueeze(-1).expand(-1, -1, geo_pos.shape[-1])
            l_f = consistency_loss(
                out["f_geo"], geo_pos, geo_pos.gather(1, gather),
                out["f_proj"], pos_pos, pos_pos.gather(1, gather),
            )
            if weights.lambda_c > 0:
                l_c, _, _ = batch_collision_loss(moved, pair_u, pair_v, None, cfg.interval, cfg.resolution)
            else:
                with torch.no_grad():
                    l_c, _, _ = batch_collision_loss(moved, pair_u, pair_v, None, cfg.interval, cfg.resolution)
            try:
                loss = total_loss(l_r, l_p, l_f, l_c, weights)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"step {step + 1} (epoch {epoch}): {exc}") from exc

            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.online_parameters(), cfg.grad_clip)
            opt.step()
            if sched is not None:
                sched.step()
            model.ema_update()
            step += 1
            row = {
                "step": step, "epoch": epoch, "L_r": l_r.item(), "L_p": l_p.item(),
                "L_f": l_f.item(), "L_c": l_c.item(), "total": loss.item(),
            }
            history.append(row)
            totals.append(row["total"])
        epoch_losses.append(float(np.mean(totals)))
        if log is not None:
            log(f"epoch {epoch}/{cfg.epochs} loss {epoch_losses[-1]:.4f} ({time.perf_counter() - start:.0f}s)")
        if epoch_callback is not None:
            epoch_callback(epoch, model)
    model.eval()
    return TrainResult(model, history, epoch_losses, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# inference and evaluation


def predict_arrays(model: DTAN, points: np.ndarray, labels, arch_width=None, batch_size: int = 32) -> list[dict]:
    """Motions for stacked inputs ``(S, L, N, 3)``; one label->RigidMotion map per case."""
    model.eval()
    dtype = next(model.parameters()).dtype
    results = []
    with torch.no_grad():
        for b in range(0, len(points), batch_size):
            pts = torch.as_tensor(points[b:b + batch_size], dtype=dtype)
            aw = None
            if arch_width is not None:
                aw = torch.as_tensor(np.asarray(arch_width)[b:b + batch_size], dtype=dtype)
            out = model(pts, arch_width=aw)
            q = out["q"].double().numpy()
            t = out["t"].double().numpy()
            c = out["centers"].double().numpy()
            for i in range(len(pts)):
                results.append({
                    label: RigidMotion(quat_normalize(q[i, j]), t[i, j], c[i, j]) for j, label in enumerate(labels)
                })
    return results


def predict_cases(model: DTAN, cases, n_points: int, arch_width=None) -> list[dict]:
    """Motions predicted from each case's first ``n_points`` points per tooth."""
    arrays = CaseArrays.from_cases(cases, n_points, n_points)
    if model.config.conditional and arch_width is None:
        arch_width = arrays.arch_width
    return predict_arrays(model, arrays.inputs, arrays.labels, arch_width)


def identity_motions(cases) -> list[dict]:
    return [{k: RigidMotion.identity(t.barycenter) for k, t in case.initial.teeth.items()} for case in cases]


def evaluate_model(model: DTAN, cases, n_points: int, **kwargs):
    motions = predict_cases(model, cases, n_points)
    return evaluate_cases(cases, motions, **kwargs), motions


def sweep_lambda_c(train_cases, test_cases, cfg: TrainConfig, values, log=None) -> list[dict]:
    """One training run per collision weight; gap statistics of held-out predictions."""
    rows = []
    arrays = CaseArrays.from_cases(train_cases, cfg.n_points, cfg.dense_points)
    for value in values:
        run = TrainConfig.from_dict({**cfg.to_dict(), "lambda_c": float(value)})
        result = train(arrays, run, log=log)
        report, _ = evaluate_model(result.model, test_cases, run.n_points)
        rows.append({
            "lambda_c": float(value),
            "mean_abs_d": report.gap_stats["mean_abs_d"],
            "max_abs_d": report.gap_stats["max_abs_d"],
            "count_pairs_abs_d_gt_0_5": report.gap_stats["count_pairs_abs_d_gt_0_5"],
            "me_point": report.me_point,
            "auc": report.auc,
        })
    return rows


def side_widths(dentition) -> tuple[float, float]:
    """Mean |x| of the left-side and right-side premolar/molar barycenters."""
    x = arch_width_of(dentition)
    left = [abs(v) for label, v in zip(ARCH_WIDTH_LABELS, x) if label in LEFT_WIDTH_LABELS]
    right = [abs(v) for label, v in zip(ARCH_WIDTH_LABELS, x) if label not in LEFT_WIDTH_LABELS]
    return float(np.mean(left)), float(np.mean(right))


def arch_sweep(model: DTAN, cases, deltas, n_points: int) -> list[dict]:
    """Predictions conditioned on each case's arch width offset by ``(delta_left, delta_right)``."""
    if not model.config.conditional:
        raise ConfigError("arch-width sweeps need a model trained with arch conditioning")
    arrays = CaseArrays.from_cases(cases, n_points, n_points)
    rows = []
    for delta_left, delta_right in deltas:
        widths = np.stack([offset_arch_width(x, delta_left, delta_right) for x in arrays.arch_width])
        motions = predict_arrays(model, arrays.inputs, arrays.labels, widths)
        measured = [side_widths(case.initial.moved(m)) for case, m in zip(cases, motions)]
        left = float(np.mean([m[0] for m in measured]))
        right = float(np.mean([m[1] for m in measured]))
        rows.append({
            "delta_left": float(delta_left),
            "delta_right": float(delta_right),
            "width_left": left,
            "width_right": right,
            "width": left + right,
            "asymmetry": left - right,
        })
    return rows


__all__ = [
    "CaseArrays", "TrainConfig", "TrainResult", "augment_batch", "arch_sweep", "expand_targets",
    "evaluate_model", "identity_motions", "predict_arrays", "predict_cases", "side_widths",
    "sweep_lambda_c", "train",
]
