"""Synthetic dentitions, malocclusion, staging interpolation and augmentation.

Each tooth is a curved slab: the set ``C(s) + o N(s) + z e_z`` where ``C`` is a
parabolic arch curve, ``s`` runs over the tooth's arc-length interval, ``o`` over
its buccolingual depth and ``z`` over its height. Consecutive teeth share the
cutting plane at their common arc length, so neighbors touch face to face, and
upper/lower teeth meet on the occlusal plane ``z = 0``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InfeasibleSpec, MissingAnchor, RangeError
from .geometry import (
    ALL_LABELS,
    Dentition,
    RigidMotion,
    Tooth,
    apply_motion,
    fps_sample,
    normalize_case,
    quat_conjugate,
    quat_from_axis_angle,
    quat_multiply,
    quat_normalize,
    slerp_from_identity,
)

# index = FDI position - 1
UPPER_WIDTHS = (8.5, 6.6, 7.6, 7.0, 6.6, 10.2, 9.2)
LOWER_WIDTHS = (5.4, 5.9, 6.9, 7.0, 7.2, 11.0, 10.4)
UPPER_DEPTHS = (7.0, 6.2, 8.0, 9.2, 9.0, 11.2, 10.8)
LOWER_DEPTHS = (5.9, 6.1, 7.3, 7.6, 8.2, 10.4, 10.0)
HEIGHTS = (23.5, 22.0, 27.0, 22.5, 22.0, 20.5, 20.0)

UPPER_WIDTH_LABELS = (14, 15, 16, 24, 25, 26)
LOWER_WIDTH_LABELS = (34, 35, 36, 44, 45, 46)
ARCH_WIDTH_LABELS = UPPER_WIDTH_LABELS + LOWER_WIDTH_LABELS
# quadrants 1 and 4 sit at negative x
LEFT_WIDTH_LABELS = (14, 15, 16, 44, 45, 46)

MAX_ROTATION_DEG = 30.0
# severity at which synthetic cases start about 3 mm (mean point error) from their target
CALIBRATED_SEVERITY = 1.2


@dataclass(frozen=True)
class ArchSpec:
    """Parameters of one neat synthetic dentition.

    The arch curve on each side is ``y = depth * (1 - (x / half_width)**2)``;
    quadrants 1 and 4 use ``half_width_left`` (negative x), 2 and 3 ``half_width_right``.
    """

    half_width_left: float = 27.0
    half_width_right: float = 27.0
    depth: float = 30.0
    tooth_scale: float = 1.0
    height_scale: float = 1.0
    jaw_gap: float = 0.0
    points_per_tooth: int = 512
    dense_points: int = 3000
    seed: int = 0
    upper_widths: tuple = UPPER_WIDTHS
    lower_widths: tuple = LOWER_WIDTHS
    upper_depths: tuple = UPPER_DEPTHS
    lower_depths: tuple = LOWER_DEPTHS
    heights: tuple = HEIGHTS

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class _ArchCurve:
    """One side of the arch, parameterized by arc length from the midline."""

    def __init__(self, half_width: float, depth: float, sign: float, x_max: float):
        self.a = depth / half_width**2
        self.depth = depth
        self.sign = sign
        xs = np.linspace(0.0, x_max, 20001)
        slope = -2.0 * self.a * xs
        seg = np.sqrt(1.0 + slope**2)
        self.xs = xs
        self.s = np.concatenate([[0.0], np.cumsum(0.5 * (seg[1:] + seg[:-1]) * np.diff(xs))])

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def frame(self, s):
        """Point, unit tangent (away from the midline), outward normal and curvature."""
        x = np.interp(s, self.s, self.xs)
        slope = -2.0 * self.a * x
        norm = np.sqrt(1.0 + slope**2)
        px = self.sign * x
        py = self.depth - self.a * x**2
        tangent = np.stack([self.sign / norm, slope / norm], -1)
        # normal (-dy/dx, 1) in world coordinates, pointing away from the arch interior
        normal = np.stack([self.sign * (-slope) / norm, 1.0 / norm], -1)
        curvature = 2.0 * self.a / norm**3
        return np.stack([px, py], -1), tangent, normal, curvature


def _slab_surface(curve: _ArchCurve, s0, s1, depth, z0, z1, count, rng) -> np.ndarray:
    """Area-uniform samples on the boundary of one curved slab."""
    half = depth / 2.0
    kmax = float(curve.frame(np.array([s0, s1]))[3].max())
    grow = 1.0 + kmax * half
    length, height = s1 - s0, z1 - z0
    areas = np.array([depth * height, depth * height, length * height * grow,
                      length * height * grow, length * depth * grow, length * depth * grow])
    counts = rng.multinomial(count, areas / areas.sum())
    chunks = []
    for face, m in enumerate(counts):
        if face < 2:
            s = np.full(m, s0 if face == 0 else s1)
            o = rng.uniform(-half, half, m)
            z = rng.uniform(z0, z1, m)
        else:
            # rejection on the (1 + kappa * o) area element
            s_acc, o_acc = [], []
            need = m
            while need > 0:
                s = rng.uniform(s0, s1, 2 * need + 8)
                if face in (2, 3):
                    o = np.full_like(s, half if face == 2 else -half)
                    z = None
                else:
                    o = rng.uniform(-half, half, len(s))
                kappa = curve.frame(s)[3]
                keep = rng.uniform(0, grow, len(s)) < 1.0 + kappa * o
                s_acc.append(s[keep][:need])
                o_acc.append(o[keep][:need])
                need -= len(s_acc[-1])
            s = np.concatenate(s_acc)
            o = np.concatenate(o_acc)
            if face in (2, 3):
                z = rng.uniform(z0, z1, m)
            else:
                z = np.full(m, z1 if face == 4 else z0)
        point, _, normal, _ = curve.frame(s)
        xy = point + o[:, None] * normal
        chunks.append(np.column_stack([xy, z]))
    return np.concatenate(chunks)


def tooth_dimensions(spec: ArchSpec, label: int) -> tuple[float, float, float]:
    """(mesiodistal width, buccolingual depth, height) in mm."""
    q, p = divmod(label, 10)
    upper = q in (1, 2)
    width = (spec.upper_widths if upper else spec.lower_widths)[p - 1] * spec.tooth_scale
    depth = (spec.upper_depths if upper else spec.lower_depths)[p - 1] * spec.tooth_scale
    return width, depth, spec.heights[p - 1] * spec.height_scale


def generate_neat(spec: ArchSpec = ArchSpec()) -> Dentition:
    """28 attached teeth along a parabolic arch, in the normalized case frame."""
    rng = np.random.default_rng(spec.seed)
    symmetric = spec.half_width_left == spec.half_width_right
    clouds = {}
    for q in (1, 4, 2, 3):
        if symmetric and q in (2, 3):
            for p in range(1, 8):
                clouds[q * 10 + p] = clouds[{2: 1, 3: 4}[q] * 10 + p] * np.array([-1.0, 1.0, 1.0])
            continue
        half_width = spec.half_width_left if q in (1, 4) else spec.half_width_right
        if half_width <= 0 or spec.depth <= 0:
            raise InfeasibleSpec("arch half width and depth must be positive")
        sign = -1.0 if q in (1, 4) else 1.0
        curve = _ArchCurve(half_width, spec.depth, sign, x_max=1.6 * half_width)
        dims = [tooth_dimensions(spec, q * 10 + p) for p in range(1, 8)]
        ends = np.concatenate([[0.0], np.cumsum([w for w, _, _ in dims])])
        if ends[-1] > curve.length:
            raise InfeasibleSpec(
                f"quadrant {q} needs {ends[-1]:.1f} mm of arch but the curve offers {curve.length:.1f} mm"
            )
        min_radius = half_width**2 / (2.0 * spec.depth)
        if max(d for _, d, _ in dims) / 2.0 >= min_radius:
            raise InfeasibleSpec("teeth are deeper than the arch curvature allows")
        for p in range(1, 8):
            _, depth, height = dims[p - 1]
            if q in (1, 2):
                z0, z1 = spec.jaw_gap / 2.0, spec.jaw_gap / 2.0 + height
            else:
                z0, z1 = -spec.jaw_gap / 2.0 - height, -spec.jaw_gap / 2.0
            dense = _slab_surface(curve, ends[p - 1], ends[p], depth, z0, z1, spec.dense_points, rng)
            clouds[q * 10 + p] = fps_sample(dense, spec.points_per_tooth)
    neat, _ = normalize_case(Dentition.from_clouds(clouds))
    return neat


def sample_arch_spec(rng: np.random.Generator, base: ArchSpec = ArchSpec(), variation: float = 1.0) -> ArchSpec:
    """Per-case anatomical variety around ``base``, including mild left/right asymmetry."""
    mean_half = base.half_width_left + rng.normal(0.0, 1.5 * variation)
    asym = rng.normal(0.0, 0.8 * variation)
    return replace(
        base,
        half_width_left=mean_half - asym,
        half_width_right=mean_half + asym,
        depth=base.depth + rng.normal(0.0, 2.0 * variation),
        tooth_scale=base.tooth_scale * (1.0 + rng.normal(0.0, 0.04 * variation)),
        height_scale=base.height_scale * (1.0 + rng.normal(0.0, 0.05 * variation)),
        seed=int(rng.integers(2**31)),
    )


def arch_width_of(dentition: Dentition) -> np.ndarray:
    """Signed x of the premolar/first-molar barycenters: 6 upper then 6 lower entries."""
    missing = [label for label in ARCH_WIDTH_LABELS if label not in dentition]
    if missing:
        raise MissingAnchor(f"arch width needs teeth {missing}")
    return np.array([dentition[label].barycenter[0] for label in ARCH_WIDTH_LABELS])


def offset_arch_width(x, delta_left: float, delta_right: float) -> np.ndarray:
    """Move the left-side and right-side entries outward (positive) or inward by the deltas."""
    x = np.asarray(x, dtype=np.float64).copy()
    for i, label in enumerate(ARCH_WIDTH_LABELS):
        delta = delta_left if label in LEFT_WIDTH_LABELS else delta_right
        x[i] += delta * (-1.0 if label in LEFT_WIDTH_LABELS else 1.0)
    return x


# ---------------------------------------------------------------------------
# cases


@dataclass
class CaseRecord:
    initial: Dentition
    target: Dentition
    gt_motions: dict[int, RigidMotion]
    arch_width: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.arch_width is None:
            self.arch_width = arch_width_of(self.target)


def random_rotation(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(-max_deg, max_deg))
    if angle == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    return quat_from_axis_angle(axis, angle)


def _record_from_rotations(target: Dentition, initial_clouds: dict, rotations: dict) -> CaseRecord:
    """Build the record given initial clouds and the rotation that carried target to initial."""
    motions = {}
    for label, tooth in target.teeth.items():
        c_init = initial_clouds[label].mean(axis=0)
        motions[label] = RigidMotion(
            quat_normalize(quat_conjugate(rotations[label])), tooth.barycenter - c_init, c_init
        )
    return CaseRecord(target.with_clouds(initial_clouds), target, motions)


def malocclude(neat: Dentition, severity: float = 1.0, seed: int = 0, translation_sigma: float = 1.0) -> CaseRecord:
    """Perturb each tooth about its barycenter; ground truth holds the inverse motions."""
    rng = np.random.default_rng(seed)
    clouds, rotations = {}, {}
    for label, tooth in neat.teeth.items():
        q = random_rotation(rng, MAX_ROTATION_DEG * severity)
        t = rng.normal(0.0, translation_sigma, 3) * severity
        if severity == 0:
            q, t = np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3)
        clouds[label] = apply_motion(tooth.cloud, RigidMotion(q, t, tooth.barycenter))
        rotations[label] = q
    return _record_from_rotations(neat, clouds, rotations)


def stage_motion(motion: RigidMotion, s: float) -> RigidMotion:
    return RigidMotion(slerp_from_identity(motion.q, s), s * motion.translation, motion.center)


def interpolate_stage(record: CaseRecord, s: float) -> Dentition:
    """Intermediate pose at fraction ``s`` of every ground-truth motion."""
    if not 0.0 <= s <= 1.0:
        raise RangeError(f"stage fraction {s} is outside [0, 1]")
    if s == 0.0:
        return record.initial
    return record.initial.moved({k: stage_motion(m, s) for k, m in record.gt_motions.items()})


def augment(
    record: CaseRecord,
    policy: str = "staging",
    seed: int = 0,
    stage: float | None = None,
    noise_deg: float = 3.0,
    noise_mm: float = 0.2,
    max_deg: float = MAX_ROTATION_DEG,
    translation_sigma: float = 1.0,
) -> CaseRecord:
    """New initial pose with the same target.

    ``naive`` draws a fresh perturbation of the target (angle within ``max_deg``,
    Gaussian translation). ``staging`` picks a stage at fraction ``stage`` (uniform
    when None) and adds a small perturbation on top.
    """
    rng = np.random.default_rng(seed)
    target = record.target
    clouds, rotations = {}, {}
    if policy == "naive":
        for label, tooth in target.teeth.items():
            q = random_rotation(rng, max_deg)
            t = rng.normal(0.0, translation_sigma, 3)
            clouds[label] = apply_motion(tooth.cloud, RigidMotion(q, t, tooth.barycenter))
            rotations[label] = q
    elif policy == "staging":
        s = float(rng.uniform()) if stage is None else float(stage)
        staged = interpolate_stage(record, s)
        for label, tooth in staged.teeth.items():
            gt = record.gt_motions[label]
            qn = random_rotation(rng, noise_deg) if noise_deg > 0 else np.array([1.0, 0.0, 0.0, 0.0])
            tn = rng.normal(0.0, noise_mm, 3) if noise_mm > 0 else np.zeros(3)
            clouds[label] = apply_motion(tooth.cloud, RigidMotion(qn, tn, tooth.barycenter))
            # target -> initial -> stage -> noise
            q_stage = slerp_from_identity(gt.q, s)
            rotations[label] = quat_multiply(qn, quat_multiply(q_stage, quat_conjugate(gt.q)))
    else:
        raise ValueError(f"unknown augmentation policy {policy!r}")
    out = _record_from_rotations(target, clouds, rotations)
    out.arch_width = record.arch_width
    return out


def case_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def generate_case(index: int, seed: int = 0, severity: float = CALIBRATED_SEVERITY, base: ArchSpec = ArchSpec(), variation: float = 1.0) -> CaseRecord:
    rng = case_seed(seed, index)
    spec = sample_arch_spec(rng, base, variation)
    neat = generate_neat(spec)
    return malocclude(neat, severity, seed=int(rng.integers(2**31)))


# ---------------------------------------------------------------------------
# dataset on disk


DEFAULT_SPLITS = {"train": 200, "val": 28, "test": 56}


def write_case(case_dir, record: CaseRecord) -> None:
    from .io import write_manifest, write_ply

    case_dir = Path(case_dir)
    (case_dir / "initial").mkdir(parents=True, exist_ok=True)
    (case_dir / "target").mkdir(parents=True, exist_ok=True)
    paths = {}
    for label in record.initial.labels:
        paths[label] = case_dir / "initial" / f"{label}.ply"
        write_ply(paths[label], record.initial[label].cloud)
        write_ply(case_dir / "target" / f"{label}.ply", record.target[label].cloud)
    write_manifest(
        case_dir / "manifest.json",
        paths,
        record.gt_motions,
        extra={"target": {str(k): f"target/{k}.ply" for k in record.target.labels},
               "arch_width": record.arch_width.tolist()},
    )


def read_case(case_dir) -> CaseRecord:
    from .io import read_manifest, read_ply

    case_dir = Path(case_dir)
    initial, motions = read_manifest(case_dir / "manifest.json")
    doc = json.loads((case_dir / "manifest.json").read_text())
    target = Dentition.from_clouds({int(k): read_ply(case_dir / v) for k, v in doc["target"].items()})
    return CaseRecord(initial, target, motions, np.asarray(doc["arch_width"], dtype=np.float64))


def generate_dataset(out_dir, seed: int = 0, splits: dict | None = None, severity: float = CALIBRATED_SEVERITY,
                     base: ArchSpec = ArchSpec(), variation: float = 1.0) -> dict:
    """Write one directory per case plus a ``dataset.json`` descriptor."""
    splits = dict(DEFAULT_SPLITS if splits is None else splits)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = 0
    lists = {}
    for split, count in splits.items():
        names = []
        for _ in range(int(count)):
            name = f"case_{index:05d}"
            write_case(out_dir / name, generate_case(index, seed, severity, base, variation))
            names.append(name)
            index += 1
        lists[split] = names
    descriptor = {
        "seed": int(seed),
        "severity": float(severity),
        "variation": float(variation),
        "spec": base.to_dict(),
        "splits": lists,
        "labels": list(ALL_LABELS),
    }
    (out_dir / "dataset.json").write_text(json.dumps(descriptor, indent=1, sort_keys=True))
    return descriptor


def load_split(dataset_dir, split: str) -> list[CaseRecord]:
    dataset_dir = Path(dataset_dir)
    descriptor = json.loads((dataset_dir / "dataset.json").read_text())
    return [read_case(dataset_dir / name) for name in descriptor["splits"][split]]


def tooth_label_order() -> list[int]:
    return list(ALL_LABELS)


def mirror_x(dentition: Dentition) -> Dentition:
    """Reflect across x = 0 and swap quadrants 1<->2 and 3<->4."""
    swap = {1: 2, 2: 1, 3: 4, 4: 3}
    teeth = {}
    for label, tooth in dentition.teeth.items():
        q, p = divmod(label, 10)
        new = swap[q] * 10 + p
        teeth[new] = Tooth(new, tooth.cloud * np.array([-1.0, 1.0, 1.0]))
    return Dentition(teeth)
