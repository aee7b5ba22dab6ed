"""Deterministic software rasterization and a differentiable soft-silhouette renderer.

Pixel ``(row, col)`` samples the image plane at ``(col + 0.5, row + 0.5)``.
Depth images hold camera-space z with ``+inf`` for background; instance maps
hold 0 for background and ``1..K`` for the scene entries in order.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import diff
from .core import Camera, RigidTransform, VoxelLattice, trilinear_weights
from .exceptions import InvalidInputError
from .mesh.trimesh import TriMesh, concatenate

NEAR = 1e-3
EDGE_EPS = 1e-9


@dataclass
class Fragments:
    """Per-pixel winning surface: depth, instance id, face index (within its mesh) and barycentrics."""

    depth: np.ndarray
    instance: np.ndarray
    face: np.ndarray
    bary: np.ndarray
    intensity: np.ndarray


def rasterize_fragments(scene, cam: Camera) -> Fragments:
    """Z-buffer ``scene`` (a list of ``(TriMesh, RigidTransform)``) into ``cam``.

    Ties in depth go to the lower instance id, then the lower face index,
    so the result does not depend on the order triangles are visited.
    Triangles with a vertex closer than ``NEAR`` to the camera plane are
    dropped (no near-plane clipping).
    """
    H, W = cam.height, cam.width
    depth = np.full(H * W, np.inf)
    inst = np.zeros(H * W, dtype=np.int64)
    face = np.full(H * W, -1, dtype=np.int64)
    bary = np.zeros((H * W, 3))
    intensity = np.zeros(H * W)
    meshes = [m.transformed(T) for m, T in scene]
    def result():
        return Fragments(depth.reshape(H, W), inst.reshape(H, W), face.reshape(H, W),
                         bary.reshape(H, W, 3), intensity.reshape(H, W))

    if not meshes or all(m.is_empty() for m in meshes):
        return result()
    world, src = concatenate(meshes)
    local_face = np.concatenate([np.arange(m.n_faces) for m in meshes])
    vc = cam.to_camera(world.vertices)
    tri = vc[world.faces]  # (F, 3, 3) camera space
    z = tri[..., 2]
    keep = np.all(z > NEAR, axis=1)
    tri, z, src, local_face = tri[keep], z[keep], src[keep], local_face[keep]
    u = cam.fx * tri[..., 0] / z + cam.cx
    v = cam.fy * tri[..., 1] / z + cam.cy
    c0 = np.maximum(np.ceil(u.min(axis=1) - 0.5), 0).astype(np.int64)
    c1 = np.minimum(np.floor(u.max(axis=1) - 0.5), W - 1).astype(np.int64)
    r0 = np.maximum(np.ceil(v.min(axis=1) - 0.5), 0).astype(np.int64)
    r1 = np.minimum(np.floor(v.max(axis=1) - 0.5), H - 1).astype(np.int64)
    nc, nr = c1 - c0 + 1, r1 - r0 + 1
    area = (u[:, 1] - u[:, 0]) * (v[:, 2] - v[:, 0]) - (u[:, 2] - u[:, 0]) * (v[:, 1] - v[:, 0])
    ok = (nc > 0) & (nr > 0) & (np.abs(area) > 1e-12)
    fids = np.nonzero(ok)[0]
    if len(fids) == 0:
        return result()
    counts = nc[fids] * nr[fids]
    f = np.repeat(fids, counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    col = c0[f] + local % nc[f]
    row = r0[f] + local // nc[f]
    px, py = col + 0.5, row + 0.5
    U, V, A = u[f], v[f], area[f]
    b0 = ((U[:, 1] - px) * (V[:, 2] - py) - (U[:, 2] - px) * (V[:, 1] - py)) / A
    b1 = ((U[:, 2] - px) * (V[:, 0] - py) - (U[:, 0] - px) * (V[:, 2] - py)) / A
    b2 = 1.0 - b0 - b1
    inside = (b0 >= -EDGE_EPS) & (b1 >= -EDGE_EPS) & (b2 >= -EDGE_EPS)
    f, col, row, b0, b1, b2 = f[inside], col[inside], row[inside], b0[inside], b1[inside], b2[inside]
    if len(f) == 0:
        return result()
    Z = z[f]
    inv_z = b0 / Z[:, 0] + b1 / Z[:, 1] + b2 / Z[:, 2]
    d = 1.0 / inv_z
    pix = row * W + col
    ids = src[f] + 1
    order = np.lexsort((local_face[f], ids, d, pix))
    first = order[np.r_[True, pix[order][1:] != pix[order][:-1]]]
    p = pix[first]
    depth[p] = d[first]
    inst[p] = ids[first]
    face[p] = local_face[f[first]]
    # perspective-correct barycentrics
    pb = np.stack([b0[first] / Z[first, 0], b1[first] / Z[first, 1], b2[first] / Z[first, 2]], 1) * d[first, None]
    bary[p] = pb
    t = tri[f[first]]
    n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    ray = np.stack([(col[first] + 0.5 - cam.cx) / cam.fx, (row[first] + 0.5 - cam.cy) / cam.fy,
                    np.ones(len(first))], 1)
    ray /= np.linalg.norm(ray, axis=1, keepdims=True)
    intensity[p] = 0.25 + 0.75 * np.abs(np.sum(n * ray, axis=1))
    return result()


def rasterize(scene, cam: Camera):
    """Return ``(depth, instance_map)`` for ``scene`` seen from ``cam``."""
    fr = rasterize_fragments(scene, cam)
    return fr.depth, fr.instance


def hit_points(fragments: Fragments, meshes) -> np.ndarray:
    """Local-frame surface point under every foreground pixel (NaN for background)."""
    H, W = fragments.depth.shape
    out = np.full((H, W, 3), np.nan)
    for k, mesh in enumerate(meshes, start=1):
        m = fragments.instance == k
        if not m.any():
            continue
        t = mesh.triangles()[fragments.face[m]]
        out[m] = np.einsum("ni,nij->nj", fragments.bary[m], t)
    return out


def _check_instance(imap, n, n_instances):
    top = int(np.max(imap, initial=0)) if n_instances is None else int(n_instances)
    if not isinstance(n, (int, np.integer)) or n < 1 or n > top:
        raise InvalidInputError(f"unknown instance id {n!r} (valid: 1..{top})")


def instance_silhouette(imap, n: int, n_instances: int | None = None) -> np.ndarray:
    """Binary silhouette (float 0/1) of the visible pixels of instance ``n``."""
    _check_instance(imap, n, n_instances)
    return (np.asarray(imap) == n).astype(np.float64)


def visibility_mask(imap, n: int, n_instances: int | None = None) -> np.ndarray:
    """Pixels where instance ``n`` is the front-most surface."""
    _check_instance(imap, n, n_instances)
    return np.asarray(imap) == n


# ---------------------------------------------------------------- soft silhouettes

@dataclass
class SilhouetteOperator:
    """Sparse ray-march sampling of a lattice for one camera.

    ``weights`` maps flat grid values to ray samples; samples of pixel ``p``
    occupy rows ``offsets[p]:offsets[p + 1]``.
    """

    weights: sp.csr_matrix
    offsets: np.ndarray
    image_shape: tuple
    lattice: VoxelLattice

    @property
    def n_samples(self) -> np.ndarray:
        return np.diff(self.offsets)


def silhouette_operator(lattice: VoxelLattice, placement: RigidTransform, cam: Camera,
                        step: float | None = None) -> SilhouetteOperator:
    """Precompute ray samples through ``lattice`` placed in the world by ``placement``."""
    if step is None:
        step = 0.5 * float(np.min(lattice.cell))
    if step > 0.5 * float(np.min(lattice.cell)) + 1e-15:
        raise InvalidInputError("ray-march step must not exceed half the cell size")
    origin, dirs = cam.pixel_rays()
    inv = placement.inverse()
    o = inv.apply(origin)
    d = inv.apply_vectors(dirs)
    lo, hi = lattice.bounds()
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo - o) / d
        tb = (hi - o) / d
    tmin = np.nanmax(np.where(np.isnan(ta), -np.inf, np.minimum(ta, tb)), axis=1)
    tmax = np.nanmin(np.where(np.isnan(tb), np.inf, np.maximum(ta, tb)), axis=1)
    tmin = np.maximum(tmin, 0.0)
    hit = tmax > tmin
    n = np.where(hit, np.ceil((tmax - tmin) / step), 0).astype(np.int64)
    offsets = np.concatenate([[0], np.cumsum(n)])
    pix = np.repeat(np.arange(len(n)), n)
    k = np.arange(offsets[-1]) - np.repeat(offsets[:-1], n)
    seg = np.repeat(tmax - tmin, n) / np.repeat(np.maximum(n, 1), n)
    t = np.repeat(tmin, n) + (k + 0.5) * seg
    pts = o + t[:, None] * d[pix]
    idx, w = trilinear_weights(lattice, pts, mode="clamp")
    rows = np.repeat(np.arange(len(pts)), 8)
    W = sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(len(pts), lattice.size))
    return SilhouetteOperator(W, offsets, (cam.height, cam.width), lattice)


def soft_silhouette(grid_values, op: SilhouetteOperator, tau: float = 0.05):
    """Differentiable silhouette ``(H, W)`` of occupancy values under ``op``.

    Each pixel is the log-mean-exp smooth maximum (temperature ``tau``) of its
    ray samples, clamped to ``[0, 1]``; rays that miss the lattice give 0.
    ``grid_values`` may be a :class:`~coherent3d.diff.Var`.
    """
    if tau <= 0:
        raise InvalidInputError("temperature must be positive")
    flat = diff.reshape(grid_values, (-1,))
    s = diff.sparse_matmul(op.weights, flat)
    sil = diff.segment_logmeanexp(s, op.offsets, tau)
    return diff.reshape(diff.clip(sil, 0.0, 1.0), op.image_shape)


def hard_silhouette(grid_values, op: SilhouetteOperator) -> np.ndarray:
    """Non-differentiable ray-march maximum, for comparison with :func:`soft_silhouette`."""
    s = op.weights @ np.ravel(diff.value_of(grid_values))
    out = np.zeros(len(op.offsets) - 1)
    nz = op.n_samples > 0
    out[nz] = np.maximum.reduceat(s, op.offsets[:-1][nz])
    return np.clip(out, 0, 1).reshape(op.image_shape)


# ---------------------------------------------------------------- image IO

def write_pfm(path, image) -> None:
    """Single-channel little-endian PFM; rows are stored bottom-to-top."""
    img = np.asarray(image, dtype="<f4")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0].strip() != b"Pf":
        raise InvalidInputError(f"{path}: not a single-channel PFM")
    w, h = (int(x) for x in parts[1].split())
    scale = float(parts[2])
    dt = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(parts[3][: 4 * w * h], dtype=dt).reshape(h, w)
    return img[::-1].astype(np.float64)


def write_pgm(path, image) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        if img.min(initial=0) < 0 or img.max(initial=0) > 255:
            raise InvalidInputError("PGM values must fit in 8 bits")
        img = img.astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise InvalidInputError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval > 255:
        raise InvalidInputError(f"{path}: 16-bit PGM not supported")
    return np.frombuffer(data[m.end(): m.end() + w * h], dtype=np.uint8).reshape(h, w).copy()


def silhouette_to_u8(sil) -> np.ndarray:
    return np.round(np.clip(np.asarray(sil, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
