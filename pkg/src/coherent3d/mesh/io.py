from __future__ import annotations

from pathlib import Path

import numpy as np

from ..exceptions import ObjParseError
from .trimesh import TriMesh


def _face_index(tok: str, n_vertices: int) -> int:
    i = int(tok.split("/")[0])
    return i - 1 if i > 0 else n_vertices + i


def load_obj(path) -> TriMesh:
    """Read an ASCII OBJ; polygons are fan-triangulated and vertex colors ignored."""
    path = Path(path)
    verts, faces = [], []
    with path.open("r") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.split("#", 1)[0].split()
            if not s:
                continue
            tag = s[0]
            try:
                if tag == "v":
                    if len(s) < 4:
                        raise ValueError("vertex needs 3 coordinates")
                    verts.append([float(x) for x in s[1:4]])
                elif tag == "f":
                    if len(s) < 4:
                        raise ValueError("face needs at least 3 vertices")
                    idx = [_face_index(t, len(verts)) for t in s[1:]]
                    if min(idx) < 0 or max(idx) >= len(verts):
                        raise ValueError("face references undefined vertex")
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
            except ValueError as e:
                raise ObjParseError(path, lineno, str(e)) from None
    v = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    if v.size and not np.all(np.isfinite(v)):
        raise ObjParseError(path, 0, "non-finite vertex coordinate")
    return TriMesh(v, np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def error_colors(scalar, vmax: float | None = None) -> np.ndarray:
    """Red for zero error blending to blue at ``vmax``."""
    s = np.asarray(scalar, dtype=np.float64)
    top = float(vmax) if vmax else float(s.max(initial=0.0))
    a = np.clip(s / top, 0.0, 1.0) if top > 0 else np.zeros_like(s)
    return np.stack([1.0 - a, np.zeros_like(a), a], axis=1)


def save_obj(mesh: TriMesh, path, colors=None) -> None:
    """Write an ASCII OBJ; ``vertex_scalar`` (or explicit ``colors``) become vertex colors."""
    path = Path(path)
    if colors is None and mesh.vertex_scalar is not None:
        colors = error_colors(mesh.vertex_scalar)
    lines = []
    if colors is None:
        lines.extend(f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices)
    else:
        lines.extend(f"v {x:.17g} {y:.17g} {z:.17g} {r:.4f} {g:.4f} {b:.4f}"
                     for (x, y, z), (r, g, b) in zip(mesh.vertices, np.asarray(colors)))
    lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces)
    path.write_text("\n".join(lines) + "\n")
