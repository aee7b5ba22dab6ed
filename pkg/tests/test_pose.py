import json

import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

from coherent3d import diff
from coherent3d.core import Camera, RigidTransform, geodesic_angle
from coherent3d.exceptions import IllPosedError, InvalidInputError
from coherent3d.metrics import iou2d
from coherent3d.pose import (MisorderedPixelSet, PoseFitter, PoseProblem, add_error, auc_metric, compose_scene,
                             fit_pose, fit_scene_poses, loss_dp, loss_od, misordered_pixels, od_margins,
                             procrustes, random_pose, scene_misorder, write_auc_curve, write_pose_report)
from coherent3d.render import rasterize
from scenes import RowScene


@pytest.fixture(scope="module")
def row():
    return RowScene()


def cloud(rng, n=40):
    return rng.normal(scale=0.3, size=(n, 3))


# ---------------------------------------------------------------- dense pose loss

def test_loss_dp_zero_at_ground_truth(rng):
    T = random_pose(rng)
    p = PoseProblem.from_transform(cloud(rng), T)
    assert float(loss_dp(p, T.axis_angle(), T.translation)) < 1e-12
    assert float(loss_dp(p, np.zeros(3), np.zeros(3))) > 0


def test_loss_dp_constant_offset_is_one(rng):
    p = PoseProblem.from_transform(cloud(rng), RigidTransform())
    assert float(loss_dp(p, np.zeros(3), np.array([1.0, 0.0, 0.0]))) == pytest.approx(1.0, abs=1e-12)


def test_loss_dp_confidence_penalty_at_perfect_pose(rng):
    T = random_pose(rng)
    p = PoseProblem.from_transform(cloud(rng), T, confidence=[0.5, 0.25], w=0.01)
    rv, tr = np.tile(T.axis_angle(), (2, 1)), np.tile(T.translation, (2, 1))
    assert float(loss_dp(p, rv, tr)) == pytest.approx(-0.01 * np.mean(np.log([0.5, 0.25])), abs=1e-15)


def test_loss_dp_gradient(rng):
    p = PoseProblem.from_transform(cloud(rng), random_pose(rng))
    rep = diff.grad_check(lambda th: loss_dp(p, th[:3], th[3:]), rng.normal(scale=0.3, size=6))
    assert rep.passed, rep.summary()


def test_degenerate_model_points():
    line = np.outer(np.linspace(0, 1, 5), [1.0, 2.0, 3.0])
    with pytest.raises(IllPosedError):
        PoseProblem(line, line)
    with pytest.raises(IllPosedError):
        PoseProblem(np.zeros((2, 3)), np.zeros((2, 3)))


# ---------------------------------------------------------------- ordinal depth loss

def one_pixel_set(d_true, d_pred):
    cam = Camera(10.0, 10.0, 5.0, 5.0, 10, 10)
    return MisorderedPixelSet(cam, np.array([55]), np.array([1]), np.array([2]),
                              np.array([[0.0, 0.0, d_true]]), np.array([[0.0, 0.0, d_pred]]))


def test_loss_od_hand_value():
    # the true-front instance rendered 1.0 behind the predicted-front one
    zero = [np.zeros(3), np.zeros(3)]
    assert float(loss_od(one_pixel_set(3.0, 2.0), zero, zero)) == pytest.approx(np.log1p(np.e), abs=1e-12)
    assert float(loss_od(one_pixel_set(3.0, 2.0), zero, zero)) == pytest.approx(1.31326, abs=1e-5)
    # the loss shrinks as the true-front instance is pulled forward
    assert float(loss_od(one_pixel_set(2.0, 3.0), zero, zero)) == pytest.approx(np.log1p(np.exp(-1.0)), abs=1e-12)


def test_loss_od_zero_when_ordering_correct(row):
    for cam, g in zip(row.cameras, row.gt_maps):
        ms = misordered_pixels(row.meshes, row.transforms, cam, g)
        assert len(ms) == 0 and ms.n_overlap > 0
        assert loss_od(ms, [np.zeros(3)] * 3, [np.zeros(3)] * 3) == 0.0


def swapped(row):
    # persons 1 and 2 trade depth, so the overlap is ordered wrongly
    Ts = list(row.transforms)
    a, b = Ts[0], Ts[1]
    Ts[0] = RigidTransform(a.rotation, [a.translation[0], a.translation[1], b.translation[2]])
    Ts[1] = RigidTransform(b.rotation, [b.translation[0], b.translation[1], a.translation[2]])
    return Ts


def test_loss_od_gradient_only_on_overlapping_instances(row, rng):
    Ts = swapped(row)
    ms = misordered_pixels(row.meshes, Ts, row.cameras[0], row.gt_maps[0])
    assert len(ms) > 0
    involved = set(ms.true_front.tolist()) | set(ms.pred_front.tolist())
    rv = [T.axis_angle() for T in Ts]

    def f(t):
        return loss_od(ms, rv, [t[3 * k: 3 * k + 3] for k in range(3)]) * 0.01

    t0 = np.concatenate([T.translation for T in Ts])
    rep = diff.grad_check(f, t0)
    assert rep.passed, rep.summary()
    _, g = diff.value_and_grad(f, t0)
    for k in range(3):
        if k + 1 in involved:
            assert g[3 * k + 2] != 0.0
        else:
            assert np.all(g[3 * k: 3 * k + 3] == 0.0)


def test_loss_od_invariant_to_global_motion(row):
    Ts = swapped(row)
    ms = misordered_pixels(row.meshes, Ts, row.cameras[0], row.gt_maps[0])
    G = RigidTransform.from_axis_angle([0.2, -0.4, 0.1], [0.5, -0.3, 1.0])
    cam = row.cameras[0]
    moved_cam = Camera(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height, cam.extrinsics @ G.inverse())
    moved = MisorderedPixelSet(moved_cam, ms.pixels, ms.true_front, ms.pred_front, ms.hits_true, ms.hits_pred)
    GTs = [G @ T for T in Ts]
    a = float(loss_od(ms, [T.axis_angle() for T in Ts], [T.translation for T in Ts]))
    b = float(loss_od(moved, [T.axis_angle() for T in GTs], [T.translation for T in GTs]))
    assert a == pytest.approx(b, rel=1e-10)
    m = od_margins(ms, [T.axis_angle() for T in Ts], [T.translation for T in Ts])
    assert np.all(m > 0)  # every misordered pixel currently has the true-front instance behind


# ---------------------------------------------------------------- fitting

def test_fit_pose_recovers_small_rotation():
    rng = np.random.default_rng(5)
    T = RigidTransform.from_axis_angle([0, 0, np.radians(10.0)], [0.1, 0, 0])
    fitted, rep = fit_pose(PoseProblem.from_transform(cloud(rng, 200), T))
    assert rep.rotation_error_deg < 0.5 and rep.translation_error < 1e-2
    assert np.degrees(geodesic_angle(fitted.rotation, T.rotation)) == pytest.approx(rep.rotation_error_deg)


def test_fit_pose_at_ground_truth_stops_immediately(rng):
    T = random_pose(rng)
    fitted, rep = fit_pose(PoseProblem.from_transform(cloud(rng), T), init=T)
    assert rep.iterations <= 1 and rep.converged
    assert np.allclose(fitted.matrix34(), T.matrix34(), atol=1e-12)


def test_fit_pose_deterministic(rng):
    p = PoseProblem.from_transform(cloud(rng), random_pose(rng))
    a, ra = fit_pose(p, n_steps=50)
    b, rb = fit_pose(p, n_steps=50)
    assert np.array_equal(a.matrix34(), b.matrix34()) and ra.final_loss == rb.final_loss


def test_fit_pose_reports_nonconvergence(rng):
    _, rep = fit_pose(PoseProblem.from_transform(cloud(rng), random_pose(rng)), n_steps=2)
    assert not rep.converged and rep.iterations == 2


def test_ordinal_loss_fixes_two_figure_depth_order():
    two = RowScene(n_figures=2)
    problems = two.problems()
    Ts = swapped(two)
    bad0, tot0 = scene_misorder(two.meshes, Ts, two.cameras, two.gt_maps)
    assert bad0 / tot0 > 0.5
    out, reps = fit_scene_poses(problems, two.meshes, two.cameras, two.gt_maps, inits=Ts, gamma=0.1,
                                n_rounds=60, steps_per_round=1)
    bad, tot = scene_misorder(two.meshes, out, two.cameras, two.gt_maps)
    assert tot > 0 and bad / tot < 0.01
    assert reps[0].misordered_fraction == bad / tot


def test_pose_fitter_estimator(rng):
    T = random_pose(rng)
    p = PoseProblem.from_transform(cloud(rng), T)
    est = PoseFitter(n_steps=600)
    with pytest.raises(NotFittedError):
        est.predict()
    out = est.fit([p]).predict()
    assert add_error(p.model_points, T, out[0]) < 1e-2


# ---------------------------------------------------------------- composition and evaluation

def test_compose_single_identity(tpose):
    _, m = tpose
    scene, rec = compose_scene([(m, RigidTransform())])
    assert np.array_equal(scene.vertices, m.vertices) and np.array_equal(scene.faces, m.faces)
    assert rec[0]["instance"] == 1 and rec[0]["face_count"] == m.n_faces


def test_compose_gt_matches_instance_maps(small_scene):
    scene, meshes, views = small_scene
    persons = list(zip(meshes, scene.transforms))
    _, table = iou2d(persons, [v.instance for v in views], [v.camera for v in views])
    visible = np.array([[np.any(v.instance == j) for j in range(1, len(meshes) + 1)] for v in views])
    assert np.all(table[visible] > 0.95)
    composed, rec = compose_scene(persons)
    assert composed.n_faces == sum(m.n_faces for m in meshes)
    assert [r["face_start"] for r in rec] == list(np.cumsum([0] + [m.n_faces for m in meshes[:-1]]))


def test_rasterization_ignores_person_order(small_scene):
    scene, meshes, views = small_scene
    persons = list(zip(meshes, scene.transforms))
    d1, i1 = rasterize(persons, views[0].camera)
    d2, i2 = rasterize(persons[::-1], views[0].camera)
    n = len(meshes)
    remap = np.where(i2 > 0, n + 1 - i2, 0)
    assert np.array_equal(d1, d2) and np.array_equal(i1, remap)


def test_auc_step_cases():
    assert auc_metric([0.0, 0.0]) == 100.0
    assert auc_metric([0.1, 0.5]) == 0.0
    assert auc_metric([0.05]) == 50.0
    with pytest.raises(InvalidInputError):
        auc_metric([])


def test_auc_monotone(rng):
    e = rng.uniform(0, 0.15, 20)
    base = auc_metric(e)
    for k in range(20):
        worse = e.copy()
        worse[k] += 0.01
        assert auc_metric(worse) <= base


def test_procrustes_and_add(rng):
    T = random_pose(rng, 90.0, 1.0)
    x = cloud(rng)
    R = procrustes(x, T.apply(x))
    assert np.allclose(R.matrix34(), T.matrix34(), atol=1e-10)
    assert add_error(x, T, T) == 0.0
    off = RigidTransform(T.rotation, T.translation + [0.0, 0.02, 0.0])
    assert add_error(x, T, off) == pytest.approx(0.02)


def test_pose_report_and_curve(tmp_path, rng):
    Ts = [random_pose(rng) for _ in range(2)]
    out = write_pose_report(tmp_path / "poses.json", Ts, adds=[0.0, 0.05])
    back = json.loads((tmp_path / "poses.json").read_text())
    assert back == out and back["auc"] == 75.0
    assert np.allclose(np.reshape(back["instances"][1]["R"], (3, 3)), Ts[1].rotation)
    write_auc_curve(tmp_path / "auc.csv", [0.0, 0.05])
    rows = (tmp_path / "auc.csv").read_text().splitlines()
    assert rows[0] == "threshold,accuracy" and len(rows) == 102
