from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import RigidTransform, VoxelLattice
from ..exceptions import InvalidInputError

DEGENERATE_AREA = 1e-12


@dataclass
class TriMesh:
    """Indexed triangle mesh.

    ``vertex_scalar`` optionally carries one value per vertex (error maps).
    ``boundary_clipped`` is set by marching cubes when the surface was cut
    by the lattice boundary.
    """

    vertices: np.ndarray
    faces: np.ndarray
    vertex_scalar: np.ndarray | None = None
    boundary_clipped: bool = False

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InvalidInputError("face index out of range")
        if self.vertex_scalar is not None:
            self.vertex_scalar = np.asarray(self.vertex_scalar, dtype=np.float64).reshape(-1)
            if len(self.vertex_scalar) != len(self.vertices):
                raise InvalidInputError("vertex_scalar length must match vertex count")

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangles(self) -> np.ndarray:
        """``(F, 3, 3)`` corner coordinates."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        t = self.triangles()
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def signed_volume(self) -> float:
        t = self.triangles()
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def edge_counts(self):
        """Unique undirected edges and how many faces use each."""
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def is_watertight(self) -> bool:
        if self.is_empty():
            return False
        _, counts = self.edge_counts()
        return bool(np.all(counts == 2))

    def transformed(self, T: RigidTransform) -> "TriMesh":
        return TriMesh(T.apply(self.vertices), self.faces.copy(), self.vertex_scalar)

    def copy(self) -> "TriMesh":
        return TriMesh(self.vertices.copy(), self.faces.copy(),
                       None if self.vertex_scalar is None else self.vertex_scalar.copy(),
                       self.boundary_clipped)

    def cleaned(self, weld_tol: float = 0.0) -> "TriMesh":
        """Weld vertices closer than ``weld_tol``, drop degenerate faces and unused vertices."""
        v, f = self.vertices, self.faces
        if weld_tol > 0 and len(v):
            key = np.round(v / weld_tol).astype(np.int64)
            _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
            v = v[first]
            f = inv.reshape(-1)[f]
        mesh = TriMesh(v, f)
        distinct = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
        keep = (mesh.face_areas() > DEGENERATE_AREA) & distinct
        f = f[keep]
        used = np.zeros(len(v), dtype=bool)
        used[f.ravel()] = True
        remap = np.cumsum(used) - 1
        scalar = None
        if self.vertex_scalar is not None and weld_tol == 0:
            scalar = self.vertex_scalar[used]
        return TriMesh(v[used], remap[f], scalar, self.boundary_clipped)


def concatenate(meshes) -> tuple[TriMesh, np.ndarray]:
    """Concatenate meshes; returns the mesh and a per-face source index."""
    verts, faces, ids = [], [], []
    off = 0
    for k, m in enumerate(meshes):
        verts.append(m.vertices)
        faces.append(m.faces + off)
        ids.append(np.full(len(m.faces), k, dtype=np.int64))
        off += len(m.vertices)
    if not verts:
        return TriMesh.empty(), np.zeros(0, dtype=np.int64)
    return TriMesh(np.vstack(verts), np.vstack(faces)), np.concatenate(ids)


def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> TriMesh:
    """Axis-aligned box, 12 outward-facing triangles."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    c = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=np.float64)
    v = lo + c * (hi - lo)
    # corner index = 4x + 2y + z
    f = np.array([
        [0, 1, 3], [0, 3, 2],  # x = lo
        [4, 6, 7], [4, 7, 5],  # x = hi
        [0, 4, 5], [0, 5, 1],  # y = lo
        [2, 3, 7], [2, 7, 6],  # y = hi
        [0, 2, 6], [0, 6, 4],  # z = lo
        [1, 5, 7], [1, 7, 3],  # z = hi
    ])
    return TriMesh(v, f)


def icosphere(center=(0.0, 0.0, 0.0), radius: float = 1.0, subdivisions: int = 3) -> TriMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
                  [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
                  [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
                  [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        e = np.sort(f[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        uniq, inv = np.unique(e, axis=0, return_inverse=True)
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = inv.reshape(-1, 3) + len(v)
        v = np.vstack([v, mid])
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        ab, bc, ca = m[:, 0], m[:, 1], m[:, 2]
        f = np.concatenate([np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
                            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1)])
    return TriMesh(np.asarray(center, dtype=np.float64) + radius * v, f)


@dataclass
class OccupancyGrid:
    """Dense occupancy values in ``[0, 1]`` on the nodes of a lattice."""

    lattice: VoxelLattice
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != self.lattice.shape:
            if vals.size == self.lattice.size:
                vals = vals.reshape(self.lattice.shape)
            else:
                raise InvalidInputError(f"values shape {vals.shape} does not match lattice {self.lattice.shape}")
        if not np.all(np.isfinite(vals)):
            raise InvalidInputError("occupancy values must be finite")
        if vals.min(initial=0.0) < 0.0 or vals.max(initial=0.0) > 1.0:
            raise InvalidInputError("occupancy values must lie in [0, 1]")
        self.values = vals

    @classmethod
    def zeros(cls, lattice: VoxelLattice) -> "OccupancyGrid":
        return cls(lattice, np.zeros(lattice.shape))

    def sample(self, p, mode: str = "clamp") -> np.ndarray:
        from ..core import trilinear_sample
        return trilinear_sample(self.lattice, self.values, p, mode)

    def occupied(self, iso: float = 0.5) -> np.ndarray:
        return self.values >= iso

    def pooled(self, factor: int = 2) -> "OccupancyGrid":
        """Average-pool ``factor``-wide node blocks; trailing nodes of odd shapes are dropped."""
        lat = self.lattice.coarsen(factor)
        v = self.values[: lat.shape[0] * factor, : lat.shape[1] * factor, : lat.shape[2] * factor]
        v = v.reshape(lat.shape[0], factor, lat.shape[1], factor, lat.shape[2], factor).mean(axis=(1, 3, 5))
        return OccupancyGrid(lat, v)

    def to_bytes_header(self) -> dict:
        return {"lattice": self.lattice.to_dict(), "dtype": "<f4", "order": "C"}

    def save(self, path) -> None:
        """Raw little-endian float32 volume plus ``<path>.json`` header."""
        import json
        from pathlib import Path

        path = Path(path)
        self.values.astype("<f4").tofile(path)
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(self.to_bytes_header(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "OccupancyGrid":
        import json
        from pathlib import Path

        path = Path(path)
        hdr = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        lat = VoxelLattice.from_dict(hdr["lattice"])
        return cls(lat, np.fromfile(path, dtype="<f4").astype(np.float64).reshape(lat.shape))
