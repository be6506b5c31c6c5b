"""Point clouds, FDI tooth labels, dentitions and quaternion rigid motions.

All coordinates are millimetres. A point cloud is an ``(n, 3)`` float64 array.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numba
import numpy as np

from .errors import (
    DegenerateQuaternion,
    EmptyInput,
    InsufficientPoints,
    InvalidMotion,
    MissingAnchor,
    ShapeError,
)

QUAT_EPS = 1e-8
UNIT_TOL = 1e-6

UPPER_QUADRANTS = (1, 2)
LOWER_QUADRANTS = (3, 4)
ALL_LABELS: tuple[int, ...] = tuple(q * 10 + i for q in (1, 2, 3, 4) for i in range(1, 8))
LABEL_INDEX = {label: i for i, label in enumerate(ALL_LABELS)}

# second FDI digit -> category
CATEGORIES = {1: "incisor", 2: "incisor", 3: "cuspid", 4: "bicuspid", 5: "bicuspid", 6: "molar", 7: "molar"}
CENTRAL_INCISORS = (11, 21, 31, 41)


def validate_label(label: int) -> int:
    label = int(label)
    quadrant, position = divmod(label, 10)
    if quadrant not in (1, 2, 3, 4) or position not in range(1, 8):
        raise ValueError(f"invalid FDI label {label}")
    return label


def quadrant(label: int) -> int:
    return validate_label(label) // 10


def position(label: int) -> int:
    return validate_label(label) % 10


def category(label: int) -> str:
    return CATEGORIES[position(label)]


def jaw(label: int) -> str:
    return "upper" if quadrant(label) in UPPER_QUADRANTS else "lower"


def occlusal_partner(label: int) -> int:
    """The biting counterpart in the opposite jaw (same side, same position)."""
    q, p = divmod(validate_label(label), 10)
    return {1: 4, 2: 3, 3: 2, 4: 1}[q] * 10 + p


def as_cloud(points) -> np.ndarray:
    cloud = np.asarray(points, dtype=np.float64)
    if cloud.ndim == 1 and cloud.size == 3:
        cloud = cloud.reshape(1, 3)
    if cloud.ndim != 2 or cloud.shape[1] != 3:
        raise ShapeError(f"expected an (n, 3) point array, got shape {cloud.shape}")
    if cloud.shape[0] == 0:
        raise EmptyInput("point cloud is empty")
    if not np.all(np.isfinite(cloud)):
        raise ValueError("point cloud has non-finite coordinates")
    return cloud


def barycenter(cloud) -> np.ndarray:
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.size == 0:
        raise EmptyInput("barycenter of an empty cloud")
    return as_cloud(cloud).mean(axis=0)


# ---------------------------------------------------------------------------
# quaternions, (w, x, y, z) order


def quat_normalize(raw) -> np.ndarray:
    q = np.asarray(raw, dtype=np.float64).reshape(4)
    norm = np.linalg.norm(q)
    if not norm > QUAT_EPS:
        raise DegenerateQuaternion(f"quaternion norm {norm:g} is too small to normalize")
    q = q / norm
    if q[0] < 0:
        q = -q
    return q


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return quat_normalize(np.concatenate([[np.cos(half)], np.sin(half) * axis]))


def quat_angle(q) -> float:
    """Rotation angle in radians, in [0, pi]."""
    w = min(1.0, abs(float(np.asarray(q)[0])))
    return 2.0 * float(np.arccos(w))


def quat_log(q) -> np.ndarray:
    """Rotation vector (axis * angle) of a unit quaternion."""
    q = quat_normalize(q)
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-15:
        return np.zeros(3)
    return v / s * 2.0 * np.arctan2(s, q[0])


def slerp_from_identity(q, s: float) -> np.ndarray:
    """Point at fraction ``s`` along the shortest arc from the identity to ``q``."""
    rotvec = quat_log(q)
    angle = np.linalg.norm(rotvec)
    if angle < 1e-15:
        return np.array([1.0, 0.0, 0.0, 0.0])
    return quat_from_axis_angle(rotvec / angle, s * angle)


# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class RigidMotion:
    """Rotation ``q`` about ``center`` followed by ``translation``.

    Maps ``p`` to ``R(q) (p - center) + center + translation``.
    """

    q: np.ndarray
    translation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=np.float64).reshape(4))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)) -> "RigidMotion":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), np.asarray(center, dtype=np.float64))

    def check(self) -> None:
        if abs(np.linalg.norm(self.q) - 1.0) > UNIT_TOL:
            raise InvalidMotion(f"quaternion norm {np.linalg.norm(self.q):.9f} is not 1")

    def inverse(self) -> "RigidMotion":
        # the moved center is the fixed point of the inverse rotation
        return RigidMotion(quat_conjugate(self.q), -self.translation, self.center + self.translation)

    def canonical(self) -> "RigidMotion":
        return RigidMotion(quat_normalize(self.q), self.translation, self.center)

    def recentered(self, center) -> "RigidMotion":
        """The same rigid map expressed about another rotation center."""
        center = np.asarray(center, dtype=np.float64)
        rot = quat_to_matrix(self.q)
        return RigidMotion(self.q, self.translation + (rot - np.eye(3)) @ (center - self.center), center)

    def to_dict(self) -> dict:
        return {"q": self.q.tolist(), "t": self.translation.tolist(), "c": self.center.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidMotion":
        return cls(d["q"], d["t"], d.get("c", (0.0, 0.0, 0.0)))


def apply_motion(cloud, motion: RigidMotion) -> np.ndarray:
    cloud = as_cloud(cloud)
    motion.check()
    if np.array_equal(motion.q, [1.0, 0.0, 0.0, 0.0]) and not motion.translation.any():
        return cloud.copy()
    rot = quat_to_matrix(motion.q)
    return (cloud - motion.center) @ rot.T + motion.center + motion.translation


@dataclass(frozen=True)
class Tooth:
    label: int
    cloud: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "label", validate_label(self.label))
        object.__setattr__(self, "cloud", as_cloud(self.cloud))

    @cached_property
    def barycenter(self) -> np.ndarray:
        return self.cloud.mean(axis=0)

    @property
    def category(self) -> str:
        return category(self.label)

    def moved(self, motion: RigidMotion) -> "Tooth":
        return Tooth(self.label, apply_motion(self.cloud, motion))


def default_neighbor_pairs(labels) -> set[tuple[int, int]]:
    present = set(labels)
    pairs = set()
    for q in (1, 2, 3, 4):
        for p in range(1, 7):
            a, b = q * 10 + p, q * 10 + p + 1
            if a in present and b in present:
                pairs.add((a, b))
    for a, b in ((11, 21), (31, 41)):
        if a in present and b in present:
            pairs.add((a, b))
    return pairs


def default_occlusal_pairs(labels) -> set[tuple[int, int]]:
    present = set(labels)
    pairs = set()
    for label in present:
        partner = occlusal_partner(label)
        if partner in present:
            pairs.add(tuple(sorted((label, partner))))
    return pairs


@dataclass(frozen=True)
class Dentition:
    """Teeth of one case keyed by FDI label, with the neighbor and occlusal pair graphs.

    Pairs are stored as ``(smaller_label, larger_label)``.
    """

    teeth: dict[int, Tooth]
    neighbor_pairs: frozenset = field(default=None)
    occlusal_pairs: frozenset = field(default=None)

    def __post_init__(self):
        teeth = {validate_label(k): v for k, v in sorted(self.teeth.items())}
        if len(teeth) > 28:
            raise ValueError("a dentition holds at most 28 teeth")
        for label, tooth in teeth.items():
            if tooth.label != label:
                raise ValueError(f"tooth keyed {label} carries label {tooth.label}")
        object.__setattr__(self, "teeth", teeth)
        nbr = default_neighbor_pairs(teeth) if self.neighbor_pairs is None else self.neighbor_pairs
        occ = default_occlusal_pairs(teeth) if self.occlusal_pairs is None else self.occlusal_pairs
        nbr = frozenset(tuple(sorted(p)) for p in nbr)
        occ = frozenset(tuple(sorted(p)) for p in occ)
        for a, b in nbr:
            if jaw(a) != jaw(b):
                raise ValueError(f"neighbor pair {(a, b)} spans both jaws")
        for a, b in occ:
            if jaw(a) == jaw(b):
                raise ValueError(f"occlusal pair {(a, b)} lies in one jaw")
        object.__setattr__(self, "neighbor_pairs", nbr)
        object.__setattr__(self, "occlusal_pairs", occ)

    @classmethod
    def from_clouds(cls, clouds: dict) -> "Dentition":
        return cls({int(k): Tooth(int(k), v) for k, v in clouds.items()})

    @property
    def labels(self) -> list[int]:
        return list(self.teeth)

    def __len__(self) -> int:
        return len(self.teeth)

    def __getitem__(self, label: int) -> Tooth:
        return self.teeth[label]

    def __contains__(self, label) -> bool:
        return label in self.teeth

    def pairs(self) -> list[tuple[int, int]]:
        """Neighbor and occlusal pairs in a fixed order."""
        return sorted(self.neighbor_pairs | self.occlusal_pairs)

    def clouds(self) -> dict[int, np.ndarray]:
        return {k: t.cloud for k, t in self.teeth.items()}

    def barycenters(self) -> dict[int, np.ndarray]:
        return {k: t.barycenter for k, t in self.teeth.items()}

    def with_clouds(self, clouds: dict) -> "Dentition":
        return Dentition(
            {k: Tooth(k, clouds[k]) for k in self.teeth},
            self.neighbor_pairs,
            self.occlusal_pairs,
        )

    def moved(self, motions: dict) -> "Dentition":
        """Apply a per-tooth motion; teeth without an entry stay put."""
        return self.with_clouds(
            {k: apply_motion(t.cloud, motions[k]) if k in motions else t.cloud for k, t in self.teeth.items()}
        )

    def transformed(self, motion: RigidMotion) -> "Dentition":
        return self.with_clouds({k: apply_motion(t.cloud, motion) for k, t in self.teeth.items()})


def center_cloud(tooth) -> np.ndarray:
    """Barycenter-centered copy of a tooth's cloud (or of a bare cloud)."""
    cloud = tooth.cloud if isinstance(tooth, Tooth) else as_cloud(tooth)
    centered = cloud - cloud.mean(axis=0)
    # one correction pass pulls the residual mean to rounding level
    return centered - centered.mean(axis=0)


@numba.njit(cache=True)
def _fps_order(cloud, first, n):
    count = cloud.shape[0]
    order = np.empty(n, dtype=np.int64)
    min_d2 = np.empty(count)
    order[0] = first
    for k in range(count):
        dx = cloud[k, 0] - cloud[first, 0]
        dy = cloud[k, 1] - cloud[first, 1]
        dz = cloud[k, 2] - cloud[first, 2]
        min_d2[k] = dx * dx + dy * dy + dz * dz
    for i in range(1, n):
        best = 0
        for k in range(1, count):
            if min_d2[k] > min_d2[best]:
                best = k
        order[i] = best
        for k in range(count):
            dx = cloud[k, 0] - cloud[best, 0]
            dy = cloud[k, 1] - cloud[best, 1]
            dz = cloud[k, 2] - cloud[best, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < min_d2[k]:
                min_d2[k] = d2
    return order


def fps_sample(cloud, n: int) -> np.ndarray:
    """Farthest point sampling seeded at the lexicographically smallest point.

    Ties on the farthest distance go to the lowest index.
    """
    cloud = as_cloud(cloud)
    if n > len(cloud):
        raise InsufficientPoints(f"cannot sample {n} points from a cloud of {len(cloud)}")
    if n <= 0:
        raise ValueError("sample count must be positive")
    first = int(np.lexsort(cloud.T[::-1])[0])
    return cloud[_fps_order(np.ascontiguousarray(cloud), first, int(n))]


def normalize_case(dentition: Dentition) -> tuple[Dentition, RigidMotion]:
    """Translate a case so the origin sits at the center of the four central incisors.

    Orientation is assumed to be canonical already (x across the arch, y anterior,
    z occlusal toward the upper jaw); only the translation is estimated.
    """
    missing = [label for label in CENTRAL_INCISORS if label not in dentition]
    if missing:
        raise MissingAnchor(f"normalization needs central incisors, missing {missing}")
    origin = np.mean([dentition[label].barycenter for label in CENTRAL_INCISORS], axis=0)
    motion = RigidMotion(np.array([1.0, 0.0, 0.0, 0.0]), -origin, np.zeros(3))
    return dentition.transformed(motion), motion
