"""Ray-parity inside tests and voxelization for watertight meshes.

Rays are cast along +x.  A ray that grazes a triangle edge or vertex (any
barycentric coordinate within ``TIE_EPS``) is ambiguous; those points are
re-tested after rotating mesh and points by a seeded random rotation, which
is equivalent to re-casting with a jittered direction.
"""
from __future__ import annotations

import numpy as np

from ..core import VoxelLattice, as_points, axis_angle_to_matrix
from ..exceptions import InvalidInputError, NonWatertightError
from .trimesh import OccupancyGrid, TriMesh

TIE_EPS = 1e-10
MAX_RECASTS = 8


def _check_mesh(mesh: TriMesh) -> None:
    if mesh.is_empty():
        raise InvalidInputError("mesh has no faces")
    if not mesh.is_watertight():
        raise NonWatertightError("inside test requires a watertight mesh")


def _x_ray_hits(tri: np.ndarray, pts: np.ndarray):
    """Parity of +x ray crossings and an ambiguity flag per point.

    ``tri`` is ``(F, 3, 3)``; points are processed per triangle against the
    slab of points whose y lies in the triangle's y-range.
    """
    n = len(pts)
    count = np.zeros(n, dtype=np.int64)
    ambiguous = np.zeros(n, dtype=bool)
    order = np.argsort(pts[:, 1], kind="stable")
    ys = pts[order, 1]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ylo = np.minimum(np.minimum(a[:, 1], b[:, 1]), c[:, 1])
    yhi = np.maximum(np.maximum(a[:, 1], b[:, 1]), c[:, 1])
    zlo = np.minimum(np.minimum(a[:, 2], b[:, 2]), c[:, 2])
    zhi = np.maximum(np.maximum(a[:, 2], b[:, 2]), c[:, 2])
    i0 = np.searchsorted(ys, ylo - TIE_EPS, side="left")
    i1 = np.searchsorted(ys, yhi + TIE_EPS, side="right")
    # 2D (y, z) edge data
    d = (b[:, 1] - a[:, 1]) * (c[:, 2] - a[:, 2]) - (c[:, 1] - a[:, 1]) * (b[:, 2] - a[:, 2])
    for f in np.nonzero(i1 > i0)[0]:
        cand = order[i0[f]:i1[f]]
        p = pts[cand]
        zm = (p[:, 2] >= zlo[f] - TIE_EPS) & (p[:, 2] <= zhi[f] + TIE_EPS)
        if not zm.any():
            continue
        cand = cand[zm]
        p = p[zm]
        if abs(d[f]) < 1e-300:
            # triangle parallel to the ray: any ray touching it is ambiguous
            continue
        ay, az = a[f, 1], a[f, 2]
        l1 = ((p[:, 1] - ay) * (c[f, 2] - az) - (c[f, 1] - ay) * (p[:, 2] - az)) / d[f]
        l2 = ((b[f, 1] - ay) * (p[:, 2] - az) - (p[:, 1] - ay) * (b[f, 2] - az)) / d[f]
        l0 = 1.0 - l1 - l2
        lo = np.minimum(np.minimum(l0, l1), l2)
        inside = lo > TIE_EPS
        edge = (lo >= -TIE_EPS) & ~inside
        x = l0 * a[f, 0] + l1 * b[f, 0] + l2 * c[f, 0]
        ahead = x > p[:, 0]
        hit = inside & ahead
        count[cand[hit]] += 1
        ambiguous[cand[edge & (x >= p[:, 0] - TIE_EPS)]] = True
        # point lying on the surface itself
        ambiguous[cand[inside & (np.abs(x - p[:, 0]) <= TIE_EPS)]] = True
    return (count % 2) == 1, ambiguous


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis_angle_to_matrix(axis * rng.uniform(0.3, 2.8))


def point_inside(mesh: TriMesh, p, seed: int = 0) -> np.ndarray:
    """Inside test for one point ``(3,)`` (returns bool) or many ``(N, 3)`` (returns array)."""
    _check_mesh(mesh)
    single = np.ndim(p) == 1
    pts = as_points(p)
    tri = mesh.triangles()
    inside, amb = _x_ray_hits(tri, pts)
    rng = np.random.default_rng(seed)
    todo = np.nonzero(amb)[0]
    for _ in range(MAX_RECASTS):
        if len(todo) == 0:
            break
        R = _random_rotation(rng)
        res, amb2 = _x_ray_hits(tri @ R.T, pts[todo] @ R.T)
        inside[todo] = res
        todo = todo[amb2]
    return bool(inside[0]) if single else inside


def voxelize(mesh: TriMesh, lattice: VoxelLattice, seed: int = 0) -> OccupancyGrid:
    """Binary occupancy: 1 at lattice nodes inside the mesh, else 0.

    Uses column scan-conversion along x: each triangle's crossings with the
    x-parallel node lines through its (y, z) footprint are toggled into a
    parity volume.  Columns with grazing hits fall back to :func:`point_inside`.
    """
    _check_mesh(mesh)
    nx, ny, nz = lattice.shape
    o, h = lattice.origin, lattice.cell
    tri = mesh.triangles()
    toggles = np.zeros((nx + 1, ny, nz), dtype=np.int64)
    bad_cols = np.zeros((ny, nz), dtype=bool)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    d = (b[:, 1] - a[:, 1]) * (c[:, 2] - a[:, 2]) - (c[:, 1] - a[:, 1]) * (b[:, 2] - a[:, 2])
    jlo = np.ceil((np.minimum(np.minimum(a[:, 1], b[:, 1]), c[:, 1]) - o[1]) / h[1] - 1e-9).astype(np.int64)
    jhi = np.floor((np.maximum(np.maximum(a[:, 1], b[:, 1]), c[:, 1]) - o[1]) / h[1] + 1e-9).astype(np.int64)
    klo = np.ceil((np.minimum(np.minimum(a[:, 2], b[:, 2]), c[:, 2]) - o[2]) / h[2] - 1e-9).astype(np.int64)
    khi = np.floor((np.maximum(np.maximum(a[:, 2], b[:, 2]), c[:, 2]) - o[2]) / h[2] + 1e-9).astype(np.int64)
    jlo, klo = np.maximum(jlo, 0), np.maximum(klo, 0)
    jhi, khi = np.minimum(jhi, ny - 1), np.minimum(khi, nz - 1)
    nj, nk = jhi - jlo + 1, khi - klo + 1
    ok = (nj > 0) & (nk > 0)
    faces = np.nonzero(ok)[0]
    counts = nj[faces] * nk[faces]
    fid = np.repeat(faces, counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    J = jlo[fid] + local // nk[fid]
    K = klo[fid] + local % nk[fid]
    py = o[1] + J * h[1]
    pz = o[2] + K * h[2]
    A, B, C, D = a[fid], b[fid], c[fid], d[fid]
    parallel = np.abs(D) < 1e-300
    Ds = np.where(parallel, 1.0, D)
    l1 = ((py - A[:, 1]) * (C[:, 2] - A[:, 2]) - (C[:, 1] - A[:, 1]) * (pz - A[:, 2])) / Ds
    l2 = ((B[:, 1] - A[:, 1]) * (pz - A[:, 2]) - (py - A[:, 1]) * (B[:, 2] - A[:, 2])) / Ds
    l0 = 1.0 - l1 - l2
    lo = np.minimum(np.minimum(l0, l1), l2)
    hit = (lo > TIE_EPS) & ~parallel
    graze = (lo >= -TIE_EPS) & ~hit & ~parallel
    bad_cols[J[graze], K[graze]] = True
    x = l0 * A[:, 0] + l1 * B[:, 0] + l2 * C[:, 0]
    # nodes with x_i < x get one more crossing ahead of them
    xi = np.ceil((x[hit] - o[0]) / h[0]).astype(np.int64)
    on_node = np.abs((x[hit] - o[0]) / h[0] - np.round((x[hit] - o[0]) / h[0])) < 1e-9
    bad_cols[J[hit][on_node], K[hit][on_node]] = True
    xi = np.clip(xi, 0, nx)
    np.add.at(toggles, (xi, J[hit], K[hit]), 1)
    # crossings ahead of node i = number of crossings with index > i
    ahead = np.cumsum(toggles[::-1], axis=0)[::-1][1:]
    occ = (ahead % 2 == 1)
    if bad_cols.any():
        jj, kk = np.nonzero(bad_cols)
        ii = np.arange(nx)
        idx = np.stack(np.meshgrid(ii, jj, indexing="ij"), -1).reshape(-1, 2)
        kidx = np.broadcast_to(kk, (nx, len(kk))).reshape(-1)
        pts = o + np.stack([idx[:, 0], idx[:, 1], kidx], 1) * h
        res = point_inside(mesh, pts, seed=seed)
        occ[idx[:, 0], idx[:, 1], kidx] = res
    return OccupancyGrid(lattice, occ.astype(np.float64))
