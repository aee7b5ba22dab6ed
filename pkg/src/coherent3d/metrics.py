"""Reconstruction metrics: Chamfer distance, point-to-surface error, 3D and 2D IoU."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .core import as_points
from .exceptions import InvalidInputError
from .mesh.io import save_obj
from .mesh.sampling import sample_surface
from .mesh.trimesh import OccupancyGrid, TriMesh
from .render import rasterize

log = logging.getLogger(__name__)

CM = 100.0  # reports give lengths in scene units x 100 (centimeters)


def _nonempty(p, name):
    p = as_points(p)
    if len(p) == 0:
        raise InvalidInputError(f"{name} is empty")
    return p


def chamfer(a, b) -> float:
    """Symmetric mean of nearest-neighbor distances, ``(mean_a d(a,B) + mean_b d(b,A)) / 2``."""
    a, b = _nonempty(a, "first point set"), _nonempty(b, "second point set")
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return 0.5 * (float(da.mean()) + float(db.mean()))


def chamfer_bruteforce(a, b, chunk: int = 1024) -> float:
    """O(n*m) reference for :func:`chamfer`."""
    a, b = _nonempty(a, "first point set"), _nonempty(b, "second point set")

    def nearest(p, q):
        out = np.empty(len(p))
        for s in range(0, len(p), chunk):
            d = np.linalg.norm(p[s:s + chunk, None, :] - q[None, :, :], axis=2)
            out[s:s + chunk] = d.min(axis=1)
        return out

    return 0.5 * (float(nearest(a, b).mean()) + float(nearest(b, a).mean()))


def point_triangle_distance(p, tri) -> np.ndarray:
    """Exact distance from points ``(N, 3)`` to triangles ``(N, 3, 3)`` (row-aligned)."""
    p = np.asarray(p, dtype=np.float64)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac, ap = b - a, c - a, p - a
    dot = lambda x, y: np.einsum("ij,ij->i", x, y)  # noqa: E731
    d1, d2 = dot(ab, ap), dot(ac, ap)
    bp = p - b
    d3, d4 = dot(ab, bp), dot(ac, bp)
    cp = p - c
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    closest = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def put(mask, q):
        m = mask & ~done
        closest[m] = q[m]
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), a)
        put((d3 >= 0) & (d4 <= d3), b)
        put((d6 >= 0) & (d5 <= d6), c)
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        den = 1.0 / (va + vb + vc)
        v, w = vb * den, vc * den
        put(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    return np.linalg.norm(p - closest, axis=1)


def distance_to_mesh(points, mesh: TriMesh, k: int = 8) -> np.ndarray:
    """Exact unsigned distance from each point to the surface of ``mesh``.

    Triangles are indexed by centroid; the ``k`` nearest give an upper bound
    ``u`` and every triangle whose centroid lies within ``u + r_max`` (largest
    centroid-to-vertex radius) is then tested exactly.
    """
    pts = _nonempty(points, "points")
    if mesh.is_empty():
        raise InvalidInputError("mesh is empty")
    tri = mesh.triangles()
    cen = tri.mean(axis=1)
    rmax = float(np.max(np.linalg.norm(tri - cen[:, None], axis=2)))
    tree = cKDTree(cen)
    k = min(k, len(tri))
    _, nn = tree.query(pts, k=k)
    nn = nn.reshape(len(pts), k)
    rows = np.repeat(np.arange(len(pts)), k)
    ub = point_triangle_distance(pts[rows], tri[nn.ravel()]).reshape(len(pts), k).min(axis=1)
    out = ub.copy()
    cands = tree.query_ball_point(pts, ub + rmax + 1e-12)
    counts = np.array([len(c) for c in cands])
    rows = np.repeat(np.arange(len(pts)), counts)
    cols = np.concatenate([np.asarray(c, dtype=np.int64) for c in cands]) if len(rows) else np.zeros(0, np.int64)
    for s in range(0, len(rows), 1 << 20):
        r, c = rows[s:s + (1 << 20)], cols[s:s + (1 << 20)]
        d = point_triangle_distance(pts[r], tri[c])
        np.minimum.at(out, r, d)
    return out


def distance_to_mesh_bruteforce(points, mesh: TriMesh) -> np.ndarray:
    pts = _nonempty(points, "points")
    tri = mesh.triangles()
    out = np.empty(len(pts))
    for i, p in enumerate(pts):
        out[i] = point_triangle_distance(np.broadcast_to(p, (len(tri), 3)), tri).min()
    return out


@dataclass
class P2SResult:
    vertex_mean: float
    sample_mean: float
    per_vertex: np.ndarray = field(repr=False)


def p2s(recon: TriMesh, gt: TriMesh, n_samples: int = 10_000, seed: int = 0) -> P2SResult:
    """Point-to-surface error of ``recon`` against ``gt`` over vertices and surface samples."""
    if recon.is_empty() or gt.is_empty():
        raise InvalidInputError("p2s needs non-empty meshes")
    per_vertex = distance_to_mesh(recon.vertices, gt)
    samples = sample_surface(recon, n_samples, seed=seed) if n_samples > 0 else recon.vertices
    return P2SResult(float(per_vertex.mean()), float(distance_to_mesh(samples, gt).mean()), per_vertex)


def save_error_map(recon: TriMesh, per_vertex, path, vmax: float | None = None) -> None:
    """Vertex-colored OBJ: red where the error is zero, blue at the maximum."""
    from .mesh.io import error_colors

    save_obj(recon, path, colors=error_colors(per_vertex, vmax))


def iou3d(a: OccupancyGrid, b: OccupancyGrid, iso: float = 0.5) -> float:
    if not a.lattice.same_as(b.lattice):
        raise InvalidInputError("iou3d needs grids on the same lattice")
    x, y = a.values >= iso, b.values >= iso
    union = np.count_nonzero(x | y)
    if union == 0:
        log.info("iou3d: both grids empty; defined as 1.0")
        return 1.0
    return np.count_nonzero(x & y) / union


def mask_iou(a, b) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if a.shape != b.shape:
        raise InvalidInputError("masks differ in shape")
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def iou2d(recon, gt_instance_maps, cameras, n_instances: int | None = None) -> tuple:
    """Mean per-view, per-instance silhouette IoU of a composed reconstruction.

    ``recon`` is a list of ``(TriMesh or None, RigidTransform)`` in GT
    instance order; a ``None`` mesh (failed reconstruction) scores 0 in
    every view where the instance is visible.  Returns ``(mean, table)``
    with ``table[k][n-1]`` the IoU of instance ``n`` in view ``k``.
    """
    n = len(recon) if n_instances is None else n_instances
    table = np.zeros((len(cameras), n))
    present = [(m if m is not None else TriMesh.empty(), T) for m, T in recon]
    for k, (cam, gmap) in enumerate(zip(cameras, gt_instance_maps)):
        _, imap = rasterize(present, cam)
        for j in range(1, n + 1):
            if j > len(recon) or recon[j - 1][0] is None:
                log.info("iou2d: instance %d missing from reconstruction", j)
                table[k, j - 1] = 0.0 if np.any(np.asarray(gmap) == j) else 1.0
                continue
            table[k, j - 1] = mask_iou(imap == j, np.asarray(gmap) == j)
    return float(table.mean()), table


@dataclass
class MetricReport:
    """Scene-level metrics; lengths in centimeters (scene units x 100)."""

    cd: float
    p2s: float
    p2s_samples: float
    iou3d: float
    iou2d: float
    per_instance: list = field(default_factory=list)
    units: str = "cm (scene units x 100)"

    def __post_init__(self):
        for name in ("iou3d", "iou2d"):
            v = getattr(self, name)
            if not (np.isnan(v) or 0.0 <= v <= 1.0):
                raise InvalidInputError(f"{name} must lie in [0, 1]")

    def to_dict(self) -> dict:
        return _clean(asdict(self))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def table(self) -> str:
        rows = [("CD", self.cd), ("P2S (vertices)", self.p2s), ("P2S (samples)", self.p2s_samples),
                ("3D IoU", self.iou3d), ("2D IoU", self.iou2d)]
        lines = [f"{'metric':<16}{'value':>10}"]
        lines += [f"{k:<16}{v:>10.4f}" for k, v in rows]
        lines.append(f"lengths in {self.units}")
        return "\n".join(lines)


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def evaluate_person(recon: TriMesh, gt: TriMesh, recon_grid: OccupancyGrid | None = None,
                    gt_grid: OccupancyGrid | None = None, n_samples: int = 5000, seed: int = 0) -> dict:
    """Per-person CD, P2S and 3D IoU (lengths in scene units)."""
    a = sample_surface(recon, n_samples, seed=seed)
    b = sample_surface(gt, n_samples, seed=seed + 1)
    res = p2s(recon, gt, n_samples, seed=seed + 2)
    out = {"cd": chamfer(a, b), "p2s": res.vertex_mean, "p2s_samples": res.sample_mean}
    if recon_grid is not None and gt_grid is not None:
        out["iou3d"] = iou3d(recon_grid, gt_grid)
    return out
