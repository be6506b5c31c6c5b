"""Approximate signed gap/overlap between two point clouds via mid-plane depth maps.

A grid is laid on the plane that bisects the segment between the two barycenters.
Every point is projected onto the plane and attached to each grid point within
``interval / sqrt(2)``. Per cell, cloud ``u`` keeps its largest and cloud ``v`` its
smallest signed distance along the normal (which points from ``u`` to ``v``). The
collision value is the smallest ``beta_v - beta_u`` over cells both clouds reach:
negative means the clouds interpenetrate by that depth, positive is a gap.

Gradients only flow through the signed distances of the two active points; the
plane and the cell memberships are treated as constants.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numba
import numpy as np
import torch

from .errors import DegeneratePair, NoOverlapSupport
from .geometry import Dentition, apply_motion, as_cloud

DEFAULT_INTERVAL = 0.3
DEFAULT_RESOLUTION = (50, 50)
MIN_BARYCENTER_DISTANCE = 1e-6


def tangent_frame(normal) -> tuple[np.ndarray, np.ndarray]:
    n = np.asarray(normal, dtype=np.float64)
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(n)))] = 1.0
    e1 = np.cross(axis, n)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return e1, e2


@dataclass(frozen=True)
class GridPlane:
    origin: np.ndarray
    normal: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    interval: float = DEFAULT_INTERVAL
    resolution: tuple[int, int] = DEFAULT_RESOLUTION

    @property
    def radius(self) -> float:
        return self.interval / np.sqrt(2.0)

    @property
    def extent(self) -> tuple[float, float]:
        rows, cols = self.resolution
        return ((rows - 1) * self.interval, (cols - 1) * self.interval)

    def cell_offsets(self) -> tuple[np.ndarray, np.ndarray]:
        """In-plane coordinates of the grid rows (along e1) and columns (along e2)."""
        rows, cols = self.resolution
        return (
            (np.arange(rows) - (rows - 1) / 2.0) * self.interval,
            (np.arange(cols) - (cols - 1) / 2.0) * self.interval,
        )

    def grid_points(self) -> np.ndarray:
        ri, cj = self.cell_offsets()
        return self.origin + ri[:, None, None] * self.e1 + cj[None, :, None] * self.e2

    def to_dict(self) -> dict:
        return {
            "origin": self.origin.tolist(),
            "normal": self.normal.tolist(),
            "e1": self.e1.tolist(),
            "e2": self.e2.tolist(),
            "interval": self.interval,
            "resolution": list(self.resolution),
        }


def build_plane(cloud_u, cloud_v, interval: float = DEFAULT_INTERVAL, resolution=DEFAULT_RESOLUTION) -> GridPlane:
    cu = as_cloud(cloud_u).mean(axis=0)
    cv = as_cloud(cloud_v).mean(axis=0)
    d = cv - cu
    dist = np.linalg.norm(d)
    if dist <= MIN_BARYCENTER_DISTANCE:
        raise DegeneratePair(f"barycenters are {dist:.3g} mm apart; the mid-plane is undefined")
    n = d / dist
    e1, e2 = tangent_frame(n)
    rows, cols = resolution
    return GridPlane(0.5 * (cu + cv), n, e1, e2, float(interval), (int(rows), int(cols)))


def _memberships(plane: GridPlane, cloud: np.ndarray):
    """(point index, flat cell index, signed distance) for every point/cell contact."""
    rows, cols = plane.resolution
    rel = cloud - plane.origin
    sd = rel @ plane.normal
    x = rel @ plane.e1
    y = rel @ plane.e2
    i0 = np.floor(x / plane.interval + (rows - 1) / 2.0).astype(np.int64)
    j0 = np.floor(y / plane.interval + (cols - 1) / 2.0).astype(np.int64)
    r2 = plane.radius**2
    idx, cells, dists = [], [], []
    k = np.arange(len(cloud))
    for di in (0, 1):
        for dj in (0, 1):
            i = i0 + di
            j = j0 + dj
            dx = x - (i - (rows - 1) / 2.0) * plane.interval
            dy = y - (j - (cols - 1) / 2.0) * plane.interval
            ok = (dx * dx + dy * dy <= r2) & (i >= 0) & (i < rows) & (j >= 0) & (j < cols)
            idx.append(k[ok])
            cells.append(i[ok] * cols + j[ok])
            dists.append(sd[ok])
    return np.concatenate(idx), np.concatenate(cells), np.concatenate(dists)


def _extreme_map(plane: GridPlane, cloud: np.ndarray, largest: bool):
    rows, cols = plane.resolution
    idx, cells, sd = _memberships(plane, cloud)
    depth = np.full(rows * cols, np.nan)
    arg = np.full(rows * cols, -1, dtype=np.int64)
    if len(idx):
        # per cell: extreme distance first, lowest point index on ties
        order = np.lexsort((idx, -sd if largest else sd, cells))
        first = np.ones(len(order), dtype=bool)
        first[1:] = cells[order][1:] != cells[order][:-1]
        pick = order[first]
        depth[cells[pick]] = sd[pick]
        arg[cells[pick]] = idx[pick]
    return depth.reshape(rows, cols), arg.reshape(rows, cols)


@dataclass(frozen=True)
class DepthMaps:
    """Per-cell extreme signed distances; NaN marks an empty cell, -1 an absent index."""

    beta_u: np.ndarray
    beta_v: np.ndarray
    argmax_u: np.ndarray
    argmin_v: np.ndarray

    @property
    def joint(self) -> np.ndarray:
        return ~np.isnan(self.beta_u) & ~np.isnan(self.beta_v)


def depth_maps(plane: GridPlane, cloud_u, cloud_v) -> DepthMaps:
    beta_u, arg_u = _extreme_map(plane, as_cloud(cloud_u), largest=True)
    beta_v, arg_v = _extreme_map(plane, as_cloud(cloud_v), largest=False)
    return DepthMaps(beta_u, beta_v, arg_u, arg_v)


@dataclass(frozen=True)
class CollisionReport:
    plane: GridPlane
    maps: DepthMaps
    c_uv: float
    active_cell: tuple[int, int]
    active_points: tuple[int, int]
    n_u: int
    n_v: int

    def to_dict(self) -> dict:
        def grid(a):
            return [[None if np.isnan(v) else float(v) for v in row] for row in a]

        return {
            "plane": self.plane.to_dict(),
            "beta_u": grid(self.maps.beta_u),
            "beta_v": grid(self.maps.beta_v),
            "c_uv": self.c_uv,
            "active_cell": list(self.active_cell),
            "active_points": list(self.active_points),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def collision_value(plane: GridPlane, maps: DepthMaps, n_u: int = 0, n_v: int = 0) -> CollisionReport:
    joint = maps.joint
    if not joint.any():
        raise NoOverlapSupport(
            "no grid cell is reached by both clouds; the pair lies outside the grid extent "
            f"({plane.extent[0]:.2f} x {plane.extent[1]:.2f} mm), try a larger resolution or interval"
        )
    diff = np.where(joint, maps.beta_v - maps.beta_u, np.inf)
    flat = int(np.argmin(diff))  # first minimum in row-major order
    row, col = divmod(flat, plane.resolution[1])
    return CollisionReport(
        plane=plane,
        maps=maps,
        c_uv=float(diff[row, col]),
        active_cell=(row, col),
        active_points=(int(maps.argmax_u[row, col]), int(maps.argmin_v[row, col])),
        n_u=n_u,
        n_v=n_v,
    )


def collide(cloud_u, cloud_v, interval: float = DEFAULT_INTERVAL, resolution=DEFAULT_RESOLUTION) -> CollisionReport:
    """Plane, depth maps and collision value for one ordered pair."""
    u = as_cloud(cloud_u)
    v = as_cloud(cloud_v)
    plane = build_plane(u, v, interval, resolution)
    return collision_value(plane, depth_maps(plane, u, v), len(u), len(v))


def collision_loss(report: CollisionReport) -> float:
    return report.c_uv**2


def collision_backward(report: CollisionReport) -> tuple[np.ndarray, np.ndarray]:
    """Subgradient of ``c_uv**2`` with respect to every point of ``u`` and ``v``."""
    grad_u = np.zeros((report.n_u, 3))
    grad_v = np.zeros((report.n_v, 3))
    iu, iv = report.active_points
    g = 2.0 * report.c_uv * report.plane.normal
    grad_u[iu] = -g
    grad_v[iv] = g
    return grad_u, grad_v


@dataclass
class DentitionCollision:
    loss: float
    grads: dict[int, np.ndarray]
    values: dict[tuple[int, int], float]
    unsupported: list[tuple[int, int]]
    normalizer: int


def dentition_collision_loss(
    dentition: Dentition,
    motions: dict | None = None,
    interval: float = DEFAULT_INTERVAL,
    resolution=DEFAULT_RESOLUTION,
    pairs=None,
) -> DentitionCollision:
    """Mean squared collision value over the neighbor and occlusal pair graph.

    Each unordered pair enters the double sum twice (once from each side), and the
    normalizer counts both directions, so the result is the mean of ``c**2`` over
    supported-or-not pairs. Pairs without a shared grid cell contribute zero and
    are listed in ``unsupported``. Gradients are with respect to the moved points.
    """
    clouds = dentition.clouds()
    if motions:
        clouds = {k: apply_motion(c, motions[k]) if k in motions else c for k, c in clouds.items()}
    pairs = dentition.pairs() if pairs is None else sorted(tuple(sorted(p)) for p in pairs)
    normalizer = 2 * len(pairs)
    grads = {k: np.zeros_like(c) for k, c in clouds.items()}
    values, unsupported = {}, []
    total = 0.0
    for u, v in pairs:
        try:
            report = collide(clouds[u], clouds[v], interval, resolution)
        except NoOverlapSupport:
            unsupported.append((u, v))
            continue
        values[(u, v)] = report.c_uv
        total += 2.0 * collision_loss(report)
        gu, gv = collision_backward(report)
        grads[u] += 2.0 * gu / normalizer
        grads[v] += 2.0 * gv / normalizer
    loss = total / normalizer if normalizer else 0.0
    return DentitionCollision(loss, grads, values, unsupported, normalizer)


# ---------------------------------------------------------------------------
# batched torch path used inside training


@numba.njit(cache=True)
def _active_indices(pu, pv, interval, rows, cols):
    """Per ordered pair: active point of u, active point of v, unit normal, supported flag.

    Same plane, membership and tie rules as :func:`collide`, looped over a batch.
    """
    B, N, M = pu.shape[0], pu.shape[1], pv.shape[1]
    ncell = rows * cols
    r2 = (interval / np.sqrt(2.0)) ** 2
    half_r = (rows - 1) / 2.0
    half_c = (cols - 1) / 2.0
    iu = np.zeros(B, np.int64)
    iv = np.zeros(B, np.int64)
    normals = np.zeros((B, 3))
    supported = np.zeros(B, np.bool_)
    beta_u = np.empty(ncell)
    beta_v = np.empty(ncell)
    arg_u = np.empty(ncell, np.int64)
    arg_v = np.empty(ncell, np.int64)
    for b in range(B):
        cu = np.zeros(3)
        cv = np.zeros(3)
        for k in range(N):
            for a in range(3):
                cu[a] += pu[b, k, a]
        for k in range(M):
            for a in range(3):
                cv[a] += pv[b, k, a]
        cu /= N
        cv /= M
        d = cv - cu
        dist = np.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
        if dist <= MIN_BARYCENTER_DISTANCE:
            continue
        n = d / dist
        a = np.zeros(3)
        a[np.argmin(np.abs(n))] = 1.0
        e1 = np.cross(a, n)
        e1 /= np.sqrt(e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2])
        e2 = np.cross(n, e1)
        o0 = 0.5 * (cu[0] + cv[0])
        o1 = 0.5 * (cu[1] + cv[1])
        o2 = 0.5 * (cu[2] + cv[2])
        normals[b] = n
        beta_u[:] = -np.inf
        beta_v[:] = np.inf
        arg_u[:] = -1
        arg_v[:] = -1
        for side in range(2):
            pts = pu[b] if side == 0 else pv[b]
            for k in range(pts.shape[0]):
                r0 = pts[k, 0] - o0
                r1 = pts[k, 1] - o1
                r2_ = pts[k, 2] - o2
                sd = r0 * n[0] + r1 * n[1] + r2_ * n[2]
                x = r0 * e1[0] + r1 * e1[1] + r2_ * e1[2]
                y = r0 * e2[0] + r1 * e2[1] + r2_ * e2[2]
                i0 = int(np.floor(x / interval + half_r))
                j0 = int(np.floor(y / interval + half_c))
                for di in range(2):
                    for dj in range(2):
                        i = i0 + di
                        j = j0 + dj
                        if i < 0 or i >= rows or j < 0 or j >= cols:
                            continue
                        dx = x - (i - half_r) * interval
                        dy = y - (j - half_c) * interval
                        if dx * dx + dy * dy > r2:
                            continue
                        cell = i * cols + j
                        # strict comparisons keep the lowest point index on ties
                        if side == 0:
                            if arg_u[cell] < 0 or sd > beta_u[cell]:
                                beta_u[cell] = sd
                                arg_u[cell] = k
                        else:
                            if arg_v[cell] < 0 or sd < beta_v[cell]:
                                beta_v[cell] = sd
                                arg_v[cell] = k
        best = np.inf
        best_cell = -1
        for cell in range(ncell):
            if arg_u[cell] >= 0 and arg_v[cell] >= 0:
                diff = beta_v[cell] - beta_u[cell]
                if best_cell < 0 or diff < best:
                    best = diff
                    best_cell = cell
        if best_cell >= 0:
            supported[b] = True
            iu[b] = arg_u[best_cell]
            iv[b] = arg_v[best_cell]
    return iu, iv, normals, supported


def batch_collision_values(
    points_u: torch.Tensor,
    points_v: torch.Tensor,
    interval: float = DEFAULT_INTERVAL,
    resolution=DEFAULT_RESOLUTION,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Collision values for a batch of ordered pairs, ``(B, N, 3)`` and ``(B, M, 3)``.

    Returns ``(c, supported)``. ``c`` is differentiable with respect to both point
    tensors and is zero where ``supported`` is False (degenerate pair or no shared
    cell). The active points are found without gradient tracking; ``c`` is then the
    difference of their signed distances along the (constant) normal, so autograd
    yields the same subgradient as :func:`collision_backward`.
    """
    rows, cols = int(resolution[0]), int(resolution[1])
    pu = np.ascontiguousarray(points_u.detach().cpu().numpy(), dtype=np.float64)
    pv = np.ascontiguousarray(points_v.detach().cpu().numpy(), dtype=np.float64)
    iu, iv, normals, supported = _active_indices(pu, pv, float(interval), rows, cols)
    b = torch.arange(points_u.shape[0])
    n = torch.as_tensor(normals, dtype=points_u.dtype)
    c = ((points_v[b, torch.as_tensor(iv)] - points_u[b, torch.as_tensor(iu)]) * n).sum(-1)
    supported = torch.as_tensor(supported)
    c = torch.where(supported, c, torch.zeros_like(c))
    return c, supported


def dentition_batch_collision_values(points: torch.Tensor, pair_u, pair_v, interval=DEFAULT_INTERVAL, resolution=DEFAULT_RESOLUTION):
    """Collision values for every listed pair of every case in ``points`` ``(B, L, N, 3)``.

    ``pair_u``/``pair_v`` index the tooth dimension. Returns ``(c, supported)`` of
    shape ``(B, P)``; only the two active points per pair enter the autograd graph.
    """
    B, L, N, _ = points.shape
    pair_u = np.asarray(pair_u, dtype=np.int64)
    pair_v = np.asarray(pair_v, dtype=np.int64)
    P = len(pair_u)
    arr = points.detach().cpu().numpy().astype(np.float64)
    pu = np.ascontiguousarray(arr[:, pair_u].reshape(B * P, N, 3))
    pv = np.ascontiguousarray(arr[:, pair_v].reshape(B * P, N, 3))
    iu, iv, normals, supported = _active_indices(pu, pv, float(interval), int(resolution[0]), int(resolution[1]))
    case = torch.arange(B).repeat_interleave(P)
    slot_u = torch.as_tensor(np.tile(pair_u, B))
    slot_v = torch.as_tensor(np.tile(pair_v, B))
    n = torch.as_tensor(normals, dtype=points.dtype)
    c = ((points[case, slot_v, torch.as_tensor(iv)] - points[case, slot_u, torch.as_tensor(iu)]) * n).sum(-1)
    supported = torch.as_tensor(supported)
    c = torch.where(supported, c, torch.zeros_like(c))
    return c.reshape(B, P), supported.reshape(B, P)
