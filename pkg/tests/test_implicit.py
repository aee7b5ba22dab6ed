import numpy as np
import pytest

from coherent3d import diff
from coherent3d.core import Camera, RigidTransform, VoxelLattice, bilinear_sample, look_at, trilinear_sample
from coherent3d.exceptions import InvalidInputError, ReconstructionFailedError
from coherent3d.implicit import (DEPTH_RANGE, ImplicitRefiner, RefineItem, extract_features, grid_pyramid,
                                 grid_to_mesh, largest_component, loss_gt, reconstruct_person,
                                 sample_training_points)
from coherent3d.mesh import OccupancyGrid, box_mesh, icosphere, voxelize
from coherent3d.render import rasterize_fragments
from coherent3d.synthscene import RenderedView
from coherent3d.voxelnet import PersonCrop, filled_depth, make_crops


def sphere_crop(size=48):
    """A sphere of radius 0.3 at the origin seen by one camera at distance 3 along -z."""
    mesh = icosphere(radius=0.3, subdivisions=3)
    lat = VoxelLattice.from_bounds([-0.5] * 3, [0.5] * 3, 12)
    cam = Camera.from_fov(size, size, 30.0, look_at([0, 0, -3.0], [0, 0, 0]))
    fr = rasterize_fragments([(mesh, RigidTransform())], cam)
    view = RenderedView(cam, fr.depth, fr.instance, fr.intensity, 1)
    return mesh, PersonCrop(lat, RigidTransform(), [view], 1, voxelize(mesh, lat))


def test_features_at_occupied_voxel_on_silhouette():
    mesh, crop = sphere_crop()
    lat = crop.lattice
    grid = OccupancyGrid(lat, np.ones(lat.shape))
    f = extract_features(np.array([[0.0, 0.0, 0.0]]), grid_pyramid(grid), crop)
    assert np.allclose(f.voxel, 1.0)
    assert f.image[0, 1] == 1.0
    assert not f.absent[0]


def test_signed_depth_sign_convention():
    mesh, crop = sphere_crop()
    grid = crop.target
    # the visible surface point on the optical axis is at z = -0.3; go 0.2 behind it
    p = np.array([[0.0, 0.0, -0.3 + 0.2], [0.0, 0.0, -0.3 - 0.2]])
    d = extract_features(p, grid_pyramid(grid), crop).signed_depth
    assert d[0] == pytest.approx(0.2, abs=2e-3)
    assert d[1] == pytest.approx(-0.2, abs=2e-3)


def test_features_match_independent_recomputation(small_scene, rng):
    scene, meshes, views = small_scene
    crop = make_crops(scene, views, meshes, resolution=16)[1]
    pyr = grid_pyramid(crop.target)
    lo, hi = crop.lattice.bounds()
    p = lo + rng.random((1000, 3)) * (hi - lo)
    f = extract_features(p, pyr, crop).values

    view = views[0]
    cam = view.camera
    ref = np.zeros((1000, 8))
    for s in range(3):
        ref[:, s] = trilinear_sample(pyr[s].lattice, pyr[s].values, p)
    w = crop.placement.apply(p)
    pc = w @ cam.extrinsics.rotation.T + cam.extrinsics.translation
    u = cam.fx * pc[:, 0] / pc[:, 2] + cam.cx
    v = cam.fy * pc[:, 1] / pc[:, 2] + cam.cy
    ok = (u >= 0) & (u <= cam.width) & (v >= 0) & (v <= cam.height)
    D = filled_depth(view.depth)
    d_img = bilinear_sample(D, u[ok], v[ok])
    z0 = (cam.extrinsics.rotation @ crop.placement.translation + cam.extrinsics.translation)[2]
    ref[ok, 3] = bilinear_sample(view.intensity, u[ok], v[ok])
    ref[ok, 4] = bilinear_sample((view.instance == 2).astype(float), u[ok], v[ok])
    ref[ok, 5] = np.clip(d_img - z0, -DEPTH_RANGE, DEPTH_RANGE)
    ref[ok, 6] = np.clip(pc[ok, 2] - d_img, -DEPTH_RANGE, DEPTH_RANGE)
    ref[~ok, 7] = 1
    assert np.max(np.abs(f - ref)) < 1e-12


def test_out_of_image_points_are_flagged():
    mesh, crop = sphere_crop()
    crop = PersonCrop(crop.lattice, RigidTransform(np.eye(3), [5.0, 0, 0]), crop.views, 1, crop.target)
    f = extract_features(np.zeros((1, 3)), grid_pyramid(crop.target), crop)
    assert f.absent[0] and np.all(f.values[0, 3:7] == 0)


def test_sample_balance_on_sphere():
    mesh = icosphere(radius=0.3, subdivisions=4)
    lat = VoxelLattice.from_bounds([-0.5] * 3, [0.5] * 3, 16)
    s = sample_training_points(mesh, lat, 20_000, sigma=0.05, seed=0)
    near = s.labels[s.near_surface].mean()
    assert 0.4 <= near <= 0.6


def test_uniform_samples_match_volume_fraction():
    mesh = box_mesh([-0.2, -0.2, -0.2], [0.2, 0.2, 0.2])
    lat = VoxelLattice.from_bounds([-0.5] * 3, [0.5] * 3, 8)
    s = sample_training_points(mesh, lat, 100_000, seed=1)
    frac = s.labels[~s.near_surface].mean()
    assert abs(frac - 0.4 ** 3) < 0.02


def test_samples_deterministic():
    mesh = icosphere(radius=0.3)
    lat = VoxelLattice.from_bounds([-0.5] * 3, [0.5] * 3, 8)
    a = sample_training_points(mesh, lat, 100, seed=5)
    b = sample_training_points(mesh, lat, 100, seed=5)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.labels, b.labels)


def test_sample_count_must_be_even():
    with pytest.raises(InvalidInputError):
        sample_training_points(icosphere(), VoxelLattice([0, 0, 0], 1.0, (2, 2, 2)), 3)


def test_loss_gt_values_and_gradient(rng):
    assert float(loss_gt(np.array([1.0, 0.0]), [1.0, 0.0])) == 0.0
    assert float(loss_gt(np.array([0.75, 0.25]), [1.0, 0.0])) == 0.25
    labels = (rng.random(6) > 0.5).astype(float)
    rep = diff.grad_check(lambda p: loss_gt(p, labels), rng.uniform(0.1, 0.9, 6))
    assert rep.passed, rep.summary()


def test_largest_component_drops_floaters():
    lat = VoxelLattice.from_bounds([0, 0, 0], [1, 1, 1], 10)
    v = np.zeros(lat.shape)
    v[2:6, 2:6, 2:6] = 1.0
    v[8, 8, 8] = 0.9
    out = largest_component(OccupancyGrid(lat, v))
    assert out.values[8, 8, 8] == 0.0
    assert np.array_equal(out.values[2:6, 2:6, 2:6], v[2:6, 2:6, 2:6])
    assert grid_to_mesh(OccupancyGrid(lat, v)).is_watertight()


def test_empty_grid_fails_reconstruction():
    _, crop = sphere_crop()
    with pytest.raises(ReconstructionFailedError):
        reconstruct_person(crop, OccupancyGrid.zeros(crop.lattice))


@pytest.fixture(scope="module")
def fitted_refiner():
    mesh, crop = sphere_crop()
    item = RefineItem(crop.target, crop, mesh)
    est = ImplicitRefiner(hidden=(16, 16), n_samples=2000, n_steps=60, batch_size=256, random_state=2).fit([item])
    return item, est


def test_refiner_output_lattice_and_determinism(fitted_refiner):
    item, est = fitted_refiner
    g = est.predict(item)
    assert g.lattice.same_as(item.grid.lattice.refine(2))
    again = ImplicitRefiner(hidden=(16, 16), n_samples=2000, n_steps=60, batch_size=256, random_state=2)
    assert np.array_equal(again.fit([item]).predict(item).values, g.values)


def test_refiner_save_load(tmp_path, fitted_refiner):
    item, est = fitted_refiner
    est.save(tmp_path / "r.bin")
    back = ImplicitRefiner.load(tmp_path / "r.bin")
    assert np.array_equal(back.predict(item).values, est.predict(item).values)


def test_feature_mask_zeroes_disabled_groups(fitted_refiner):
    item, _ = fitted_refiner
    p = item.grid.lattice.nodes()[:50]
    f = ImplicitRefiner(features=("voxel",)).item_features(item, p)
    assert np.all(f[:, 3:] == 0) and np.any(f[:, :3] != 0)
    f = ImplicitRefiner(features=("voxel", "depth")).item_features(item, p)
    assert np.all(f[:, 3:6] == 0)
    with pytest.raises(InvalidInputError):
        ImplicitRefiner(features=("normals",)).item_features(item, p)


def test_refiner_needs_ground_truth():
    _, crop = sphere_crop()
    with pytest.raises(InvalidInputError):
        ImplicitRefiner().fit([RefineItem(crop.target, crop, None)])
