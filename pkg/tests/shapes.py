"""Analytic test shapes: area-uniform samples on box and L-shaped surfaces."""
import numpy as np


def box_surface(rng, lo, hi, n):
    """``n`` points uniformly distributed over the surface of the box ``[lo, hi]``."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    size = hi - lo
    # faces: (fixed axis, side)
    faces = [(a, s) for a in range(3) for s in (0, 1)]
    areas = np.array([np.prod(np.delete(size, a)) for a, _ in faces])
    counts = rng.multinomial(n, areas / areas.sum())
    out = []
    for (axis, side), m in zip(faces, counts):
        pts = lo + rng.uniform(size=(m, 3)) * size
        pts[:, axis] = hi[axis] if side else lo[axis]
        out.append(pts)
    return np.concatenate(out)


def l_shape_surface(rng, origin, n, arm=4.0, thickness=1.5, depth=3.0):
    """Surface of an L-shaped prism (non-convex) whose outer corner sits at ``origin``.

    The L lies in the y-z plane: a vertical arm along +z and a horizontal arm
    along +y, both ``thickness`` thick, extruded ``depth`` along +x.
    """
    origin = np.asarray(origin, dtype=np.float64)
    # union of two boxes, keeping only points on the union's boundary
    a_lo, a_hi = np.array([0, 0, 0.0]), np.array([depth, thickness, arm])
    b_lo, b_hi = np.array([0, 0, 0.0]), np.array([depth, arm, thickness])
    pts = []
    while sum(len(p) for p in pts) < n:
        for lo, hi, other_lo, other_hi in ((a_lo, a_hi, b_lo, b_hi), (b_lo, b_hi, a_lo, a_hi)):
            cand = box_surface(rng, lo, hi, n)
            inside_other = np.all((cand > other_lo + 1e-9) & (cand < other_hi - 1e-9), axis=1)
            pts.append(cand[~inside_other])
    cloud = np.concatenate(pts)
    cloud = cloud[rng.permutation(len(cloud))[:n]]
    return cloud + origin
