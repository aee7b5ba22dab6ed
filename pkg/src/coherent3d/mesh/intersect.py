import numpy as np

from .trimesh import TriMesh


def _segments_hit_triangles(p0, p1, tri, eps=1e-12):
    """Vectorized segment/triangle test (Moller-Trumbore); pairs are row-aligned."""
    d = p1 - p0
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    h = np.cross(d, e2)
    a = np.einsum("ij,ij->i", e1, h)
    ok = np.abs(a) > eps
    f = np.where(ok, 1.0 / np.where(ok, a, 1.0), 0.0)
    s = p0 - tri[:, 0]
    u = f * np.einsum("ij,ij->i", s, h)
    q = np.cross(s, e1)
    v = f * np.einsum("ij,ij->i", d, q)
    t = f * np.einsum("ij,ij->i", e2, q)
    return ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t >= 0) & (t <= 1)


def count_triangle_intersections(a: TriMesh, b: TriMesh, chunk: int = 2048) -> int:
    """Number of intersecting (triangle of ``a``, triangle of ``b``) pairs.

    Two non-coplanar triangles intersect iff an edge of one pierces the other.
    """
    ta, tb = a.triangles(), b.triangles()
    lo = np.maximum(ta.min(axis=(0, 1)), tb.min(axis=(0, 1)))
    hi = np.minimum(ta.max(axis=(0, 1)), tb.max(axis=(0, 1)))
    if np.any(lo > hi):
        return 0
    ka = np.all((ta.max(axis=1) >= lo) & (ta.min(axis=1) <= hi), axis=1)
    kb = np.all((tb.max(axis=1) >= lo) & (tb.min(axis=1) <= hi), axis=1)
    ta, tb = ta[ka], tb[kb]
    amin, amax = ta.min(axis=1), ta.max(axis=1)
    bmin, bmax = tb.min(axis=1), tb.max(axis=1)
    total = 0
    for s in range(0, len(ta), chunk):
        ov = np.all((amin[s:s + chunk, None] <= bmax[None]) & (amax[s:s + chunk, None] >= bmin[None]), axis=2)
        ia, ib = np.nonzero(ov)
        if len(ia) == 0:
            continue
        A, B = ta[s + ia], tb[ib]
        hit = np.zeros(len(ia), dtype=bool)
        for i, j in ((0, 1), (1, 2), (2, 0)):
            hit |= _segments_hit_triangles(A[:, i], A[:, j], B)
            hit |= _segments_hit_triangles(B[:, i], B[:, j], A)
        total += int(hit.sum())
    return total
