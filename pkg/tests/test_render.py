import numpy as np
import pytest

from coherent3d import diff
from coherent3d.core import Camera, RigidTransform, VoxelLattice
from coherent3d.exceptions import InvalidInputError
from coherent3d.mesh import TriMesh, box_mesh
from coherent3d.render import (hard_silhouette, instance_silhouette, rasterize, read_pfm, read_pgm,
                               silhouette_operator, soft_silhouette, visibility_mask, write_pfm, write_pgm)

CAM = Camera(50.0, 50.0, 50.0, 50.0, 100, 100)  # identity extrinsics, looking down +z


def square(x0, x1, y0, y1, z):
    v = [[x0, y0, z], [x1, y0, z], [x1, y1, z], [x0, y1, z]]
    return TriMesh(v, [[0, 1, 2], [0, 2, 3]])


def test_half_frame_square():
    # at z=1 the frame spans x in [-1, 1]; cover x in [0, 2] (right half)
    _, imap = rasterize([(square(0, 2, -2, 2, 1.0), RigidTransform())], CAM)
    assert np.all(imap[:, 50:] == 1)
    assert np.all(imap[:, :50] == 0)


def test_occlusion_front_square_wins():
    scene = [(square(-0.5, 0.5, -0.5, 0.5, 1.0), RigidTransform()), (square(-2, 2, -2, 2, 2.0), RigidTransform())]
    depth, imap = rasterize(scene, CAM)
    assert imap[50, 50] == 1 and depth[50, 50] == pytest.approx(1.0)
    assert imap[50, 10] == 2 and depth[50, 10] == pytest.approx(2.0)


def test_rasterize_is_order_independent():
    a = (square(-0.5, 0.7, -0.5, 0.5, 1.5), RigidTransform())
    b = (square(-1, 1, -1, 0.2, 1.0), RigidTransform())
    _, m1 = rasterize([a, b], CAM)
    _, m2 = rasterize([b, a], CAM)
    assert np.array_equal(m1, np.array([0, 2, 1])[m2])


def test_depth_ties_go_to_lower_id():
    a = (square(-0.5, 0.5, -0.5, 0.5, 1.0), RigidTransform())
    b = (square(-1, 1, -1, 1, 1.0), RigidTransform())
    _, m = rasterize([a, b], CAM)
    assert m[50, 50] == 1 and m[50, 10] == 2


def test_empty_scene():
    depth, imap = rasterize([], CAM)
    assert np.all(np.isinf(depth)) and not imap.any()
    depth, imap = rasterize([(TriMesh.empty(), RigidTransform())], CAM)
    assert np.all(np.isinf(depth))


def test_fully_offscreen_scene():
    depth, imap = rasterize([(square(50, 51, 50, 51, 1.0), RigidTransform())], CAM)
    assert np.all(np.isinf(depth)) and not imap.any()


def test_depth_is_perspective_correct():
    # plane tilted in depth: z = 2 + x
    m = TriMesh([[-1, -1, 1], [1, -1, 3], [1, 1, 3], [-1, 1, 1]], [[0, 1, 2], [0, 2, 3]])
    depth, imap = rasterize([(m, RigidTransform())], CAM)
    rr, cc = np.nonzero(imap == 1)
    u = (cc + 0.5 - 50) / 50
    z = 2 / (1 - u)  # intersection of the pixel ray x = u z with z = 2 + x
    assert np.allclose(depth[rr, cc], z, atol=1e-9)


def test_silhouette_and_visibility():
    scene = [(square(-1, 0, -1, 1, 1.0), RigidTransform()), (square(-1, 1, -1, 1, 2.0), RigidTransform())]
    _, imap = rasterize(scene, CAM)
    full = rasterize([scene[1]], CAM)[1] == 1
    vis = visibility_mask(imap, 2)
    assert np.count_nonzero(vis) == pytest.approx(0.5 * np.count_nonzero(full), abs=100)
    assert np.array_equal(instance_silhouette(imap, 1) > 0, imap == 1)
    with pytest.raises(InvalidInputError):
        instance_silhouette(imap, 0)
    with pytest.raises(InvalidInputError):
        visibility_mask(imap, 3)


def small_operator():
    lat = VoxelLattice.from_bounds([-0.3, -0.3, -0.3], [0.3, 0.3, 0.3], 5)
    cam = Camera.from_fov(12, 12, 40.0, RigidTransform(np.eye(3), [0, 0, 2.0]))
    return lat, silhouette_operator(lat, RigidTransform(), cam)


def test_soft_silhouette_zero_grid():
    lat, op = small_operator()
    assert not soft_silhouette(np.zeros(lat.shape), op).any()


def test_soft_silhouette_full_grid_lower_bound():
    lat, op = small_operator()
    tau = 0.05
    sil = soft_silhouette(np.ones(lat.shape), op, tau)
    hit = op.n_samples.reshape(op.image_shape) > 0
    bound = 1 - tau * np.log(op.n_samples.reshape(op.image_shape)[hit])
    assert np.all(sil[hit] >= bound - 1e-12)
    assert np.allclose(sil[hit], 1.0)


def test_soft_silhouette_approaches_hard_max(rng):
    lat, op = small_operator()
    g = rng.random(lat.shape) * 0.9
    hard = hard_silhouette(g, op)
    gaps = [np.max(np.abs(soft_silhouette(g, op, t) - hard)) for t in (0.1, 0.01, 0.001)]
    assert gaps[0] > gaps[1] > gaps[2]


def test_soft_silhouette_gradient(rng):
    lat, op = small_operator()
    g0 = rng.uniform(0.05, 0.9, lat.size)
    weights = rng.random(op.image_shape)
    rep = diff.grad_check(lambda g: diff.sum(soft_silhouette(g, op, 0.1) * weights), g0)
    assert rep.passed, rep.summary()


def test_pfm_pgm_round_trip(tmp_path, rng):
    img = rng.random((7, 5))
    img[0, 0] = np.inf
    write_pfm(tmp_path / "d.pfm", img)
    back = read_pfm(tmp_path / "d.pfm")
    assert np.array_equal(back[np.isfinite(img)], img[np.isfinite(img)].astype(np.float32))
    assert np.isinf(back[0, 0])
    u8 = rng.integers(0, 256, (6, 9)).astype(np.uint8)
    write_pgm(tmp_path / "i.pgm", u8)
    assert np.array_equal(read_pgm(tmp_path / "i.pgm"), u8)


def test_box_render_matches_projection():
    m = box_mesh([-0.25, -0.25, 1.75], [0.25, 0.25, 2.25])
    depth, imap = rasterize([(m, RigidTransform())], CAM)
    # front face at z = 1.75 spans |x| <= 0.25 -> |u - 50| <= 50 * 0.25 / 1.75
    half = 50 * 0.25 / 1.75
    cols = np.nonzero(imap[50])[0]
    assert abs(cols.min() + 0.5 - (50 - half)) <= 1 and abs(cols.max() + 0.5 - (50 + half)) <= 1
    assert depth[50, 50] == pytest.approx(1.75)
