from __future__ import annotations

import numpy as np

from ..exceptions import InvalidInputError
from ._mc_tables import CORNERS, EDGES, TRIANGLES
from .trimesh import OccupancyGrid, TriMesh

# keeps edge vertices off lattice nodes so no two edges share a vertex
EDGE_T_EPS = 1e-3

_EDGE_START = CORNERS[EDGES[:, 0]]
_EDGE_AXIS = np.argmax(CORNERS[EDGES[:, 1]] - CORNERS[EDGES[:, 0]] != 0, axis=1)
# table edges may run "backwards" (e.g. edge 2 goes from corner 2 to 3)
_EDGE_FLIP = (CORNERS[EDGES[:, 1]] - CORNERS[EDGES[:, 0]]).sum(axis=1) < 0
_EDGE_LOW = np.where(_EDGE_FLIP[:, None], CORNERS[EDGES[:, 1]], _EDGE_START)


def marching_cubes(grid: OccupancyGrid, iso: float = 0.5) -> TriMesh:
    """Extract the ``iso`` level set of ``grid`` as a triangle mesh.

    Vertices are placed by linear interpolation along crossing edges and
    shared between neighbouring cells, so a surface that stays inside the
    lattice comes out watertight.  Faces are wound with normals pointing
    toward lower values (outward for occupancy).  If any boundary node is at
    or above ``iso`` the surface is cut open and ``boundary_clipped`` is set.
    """
    if not 0.0 < iso < 1.0:
        raise InvalidInputError("iso must lie strictly between 0 and 1")
    vals = np.asarray(grid.values, dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise InvalidInputError("grid values must be finite")
    nx, ny, nz = vals.shape
    lat = grid.lattice
    below = vals < iso
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for k, (dx, dy, dz) in enumerate(CORNERS):
        case |= below[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz].astype(np.int64) << k
    active = np.nonzero((case != 0) & (case != 255))
    above = ~below
    clipped = bool(above[0].any() or above[-1].any() or above[:, 0].any() or above[:, -1].any()
                   or above[:, :, 0].any() or above[:, :, -1].any())
    if len(active[0]) == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), boundary_clipped=clipped)
    cells = np.stack(active, axis=1)
    rows = TRIANGLES[case[active]]
    tri_edges, tri_cells = [], []
    for t in range(5):
        m = rows[:, 3 * t] >= 0
        if not m.any():
            continue
        tri_edges.append(rows[m, 3 * t: 3 * t + 3])
        tri_cells.append(cells[m])
    tri_edges = np.concatenate(tri_edges)
    tri_cells = np.concatenate(tri_cells)
    # global edge id = 3 * flat(low node) + axis
    low = tri_cells[:, None, :] + _EDGE_LOW[tri_edges]
    gid = 3 * ((low[..., 0] * ny + low[..., 1]) * nz + low[..., 2]) + _EDGE_AXIS[tri_edges]
    uniq, inv = np.unique(gid.ravel(), return_inverse=True)
    node = uniq // 3
    axis = uniq % 3
    i0 = np.stack([node // (ny * nz), (node // nz) % ny, node % nz], axis=1)
    i1 = i0.copy()
    i1[np.arange(len(i1)), axis] += 1
    f0 = vals[i0[:, 0], i0[:, 1], i0[:, 2]]
    f1 = vals[i1[:, 0], i1[:, 1], i1[:, 2]]
    t = np.clip((iso - f0) / (f1 - f0), EDGE_T_EPS, 1.0 - EDGE_T_EPS)
    pos = i0 + t[:, None] * (i1 - i0)
    verts = lat.origin + pos * lat.cell
    faces = inv.reshape(-1, 3)
    return TriMesh(verts, faces, boundary_clipped=clipped)
