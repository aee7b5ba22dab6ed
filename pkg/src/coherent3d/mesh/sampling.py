import numpy as np

from ..exceptions import InvalidInputError
from .trimesh import TriMesh


def sample_surface(mesh: TriMesh, n: int, seed=0, return_faces: bool = False):
    """Area-weighted uniform samples on the surface; deterministic for a given seed."""
    if n < 1:
        raise InvalidInputError("need at least one sample")
    if mesh.is_empty():
        raise InvalidInputError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise InvalidInputError("mesh has zero surface area")
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    t = mesh.triangles()[face]
    pts = (1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1] + (r1 * r2)[:, None] * t[:, 2]
    return (pts, face) if return_faces else pts
