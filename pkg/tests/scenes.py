"""Shared three-figure scene for the pose and coherency tests."""
import numpy as np

from coherent3d.core import RigidTransform
from coherent3d.pose import PoseProblem
from coherent3d.render import hit_points, rasterize_fragments
from coherent3d.synthscene import FigureSpec, build_camera_rig, generate_figure


class RowScene:
    """Three figures staggered along the optical axis of one camera, overlapping in the image."""

    def __init__(self, n_figures=3):
        self.meshes = [generate_figure(FigureSpec.random(s)) for s in (11, 12, 13)][:n_figures]
        self.transforms = [RigidTransform.from_axis_angle([0, 0.3, 0], [-0.3, 0, 0.0]),
                           RigidTransform.from_axis_angle([0, -0.5, 0], [0.25, 0, -1.2]),
                           RigidTransform.from_axis_angle([0, 2.0, 0], [-0.1, 0, -2.4])][:n_figures]
        self.cameras = build_camera_rig(1, radius=5.0)
        self.frags = rasterize_fragments(list(zip(self.meshes, self.transforms)), self.cameras[0])
        self.hits = hit_points(self.frags, self.meshes)
        self.gt_maps = [self.frags.instance]

    def problems(self, depth_shift=None, n_points=300, seed=0):
        """Dense correspondences per person; ``depth_shift`` moves a person's observed depth toward the camera."""
        rng = np.random.default_rng(seed)
        shift = depth_shift or {}
        cam, fr = self.cameras[0], self.frags
        out = []
        for j in range(1, len(self.meshes) + 1):
            rr, cc = np.nonzero(fr.instance == j)
            sel = rng.choice(len(rr), size=min(n_points, len(rr)), replace=False)
            rr, cc = rr[sel], cc[sel]
            y = cam.unproject(cc + 0.5, rr + 0.5, fr.depth[rr, cc] - shift.get(j, 0.0))
            out.append(PoseProblem(self.hits[rr, cc], y, gt=self.transforms[j - 1]))
        return out
