from .inside import point_inside, voxelize
from .io import load_obj, save_obj
from .marching_cubes import marching_cubes
from .sampling import sample_surface
from .trimesh import OccupancyGrid, TriMesh, box_mesh, concatenate, icosphere

__all__ = ["TriMesh", "OccupancyGrid", "box_mesh", "icosphere", "concatenate", "load_obj", "save_obj",
           "point_inside", "voxelize", "sample_surface", "marching_cubes"]
