"""End-to-end acceptance checks; each test prints one PASS/FAIL line (also summarized at the end of the run)."""
import json
import time
from pathlib import Path

import numpy as np
from click.testing import CliRunner

from coherent3d import diff
from coherent3d.cli import main
from coherent3d.core import Camera, RigidTransform, VoxelLattice, look_at
from coherent3d.implicit import ImplicitRefiner, RefineItem, grid_to_mesh, loss_gt, refine
from coherent3d.mesh import OccupancyGrid, box_mesh, icosphere, marching_cubes, sample_surface, voxelize
from coherent3d.metrics import (chamfer, chamfer_bruteforce, distance_to_mesh, distance_to_mesh_bruteforce, iou2d,
                                iou3d)
from coherent3d.pose import (MisorderedPixelSet, PoseProblem, add_error, auc_metric, fit_pose, fit_scene_poses,
                             loss_dp, loss_od, misordered_pixels, procrustes, random_pose, scene_misorder)
from coherent3d.render import rasterize_fragments, silhouette_operator, soft_silhouette
from coherent3d.synthscene import FigureSpec, RenderedView, generate_figure
from coherent3d.voxelnet import PersonCrop, loss_3d, loss_mv, loss_os
from scenes import RowScene

ROOT = Path(__file__).resolve().parents[1]


# ---------------------------------------------------------------- random loss instances

def inst_l3d(rng):
    n = int(rng.integers(3, 9))
    gt = (rng.random(n) > 0.5).astype(float)
    return lambda p: loss_3d([p[:n], p[n:]], gt), rng.uniform(0.05, 0.95, 2 * n)


def inst_lm(rng):
    n, k = int(rng.integers(2, 7)), int(rng.integers(2, 4))
    return lambda p: loss_mv([p[i * n:(i + 1) * n] for i in range(k)]), rng.random(k * n)


def inst_los(rng):
    lat = VoxelLattice.from_bounds([-0.3] * 3, [0.3] * 3, 4)
    eye = rng.normal(size=3)
    eye = 2.0 * eye / np.linalg.norm(eye)
    cam = Camera.from_fov(8, 8, 40.0, look_at(eye, [0, 0, 0]))
    op = silhouette_operator(lat, RigidTransform(), cam)
    S = (rng.random(op.image_shape) > 0.5).astype(float)
    m = rng.random(op.image_shape) > 0.3

    def f(g):
        return loss_os([diff.reshape(g, lat.shape)], [op], [S], [m], tau=0.1)

    return f, rng.uniform(0.1, 0.9, lat.size)


def inst_lgt(rng):
    n = int(rng.integers(3, 12))
    labels = (rng.random(n) > 0.5).astype(float)
    return lambda p: loss_gt(p, labels), rng.uniform(0.05, 0.95, n)


def inst_ldp(rng):
    p = PoseProblem.from_transform(rng.normal(scale=0.3, size=(30, 3)), random_pose(rng))
    return lambda th: loss_dp(p, th[:3], th[3:]), rng.normal(scale=0.3, size=6)


def inst_lod(rng):
    K, n = 3, 12
    eye = rng.normal(size=3)
    cam = Camera.from_fov(16, 16, 40.0, look_at(4.0 * eye / np.linalg.norm(eye), [0, 0, 0]))
    true = rng.integers(1, K + 1, n)
    pred = (true + rng.integers(1, K, n) - 1) % K + 1
    ms = MisorderedPixelSet(cam, np.arange(n), true, pred, rng.normal(scale=0.3, size=(n, 3)),
                            rng.normal(scale=0.3, size=(n, 3)))

    def f(th):
        return loss_od(ms, [th[3 * k: 3 * k + 3] for k in range(K)], [th[9 + 3 * k: 12 + 3 * k] for k in range(K)])

    return f, rng.normal(scale=0.3, size=6 * K)


LOSSES = {"L_3D": inst_l3d, "L_M": inst_lm, "L_OS": inst_los, "L_GT": inst_lgt, "L_DP": inst_ldp, "L_OD": inst_lod}


def test_gradient_suite(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    failures = {}
    for name, make in LOSSES.items():
        for _ in range(20):
            f, x = make(rng)
            rep = diff.grad_check(f, x, h=1e-5, tol=1e-4)
            if not rep.passed:
                failures.setdefault(name, []).append(rep.summary())
    dt = time.perf_counter() - t0
    ok = not failures and dt < 60
    verdict(1, "gradient suite", ok, f"6 losses x 20 instances, failures={sorted(failures)}, {dt:.1f}s")
    assert ok, failures


# ---------------------------------------------------------------- zero at optimum

def test_zero_at_optimum(verdict, small_scene):
    rng = np.random.default_rng(7)
    gt = (rng.random((4, 5, 6)) > 0.5).astype(float)
    g = rng.random((4, 4, 4))
    lat = VoxelLattice.from_bounds([-0.3] * 3, [0.3] * 3, 4)
    op = silhouette_operator(lat, RigidTransform(), Camera.from_fov(10, 10, 40.0, look_at([0, 0, -2.0], [0, 0, 0])))
    T = random_pose(rng)
    problem = PoseProblem.from_transform(rng.normal(size=(30, 3)), T)
    scene, meshes, views = small_scene
    od = 0.0
    for v in views:
        ms = misordered_pixels(meshes, scene.transforms, v.camera, v.instance)
        od += float(loss_od(ms, [t.axis_angle() for t in scene.transforms],
                            [t.translation for t in scene.transforms]))
    values = {
        "L_3D": float(loss_3d([gt, gt], gt)),
        "L_M": float(loss_mv([g, g.copy(), g.copy()])),
        "L_OS": float(loss_os([g], [op], [soft_silhouette(g, op, 0.05)], [np.ones(op.image_shape)])),
        "L_GT": float(loss_gt(gt.ravel(), gt.ravel())),
        "L_DP": float(loss_dp(problem, T.axis_angle(), T.translation)),
        "L_OD": od,
    }
    ok = all(v < 1e-5 for v in values.values())
    verdict(2, "zero at optimum", ok, ", ".join(f"{k}={v:.1e}" for k, v in values.items()))
    assert ok, values


# ---------------------------------------------------------------- metrics

def shell_bounds(h):
    """IoU of two unit cubes offset by 0.5 along x after every face moves in or out by ``h``."""
    out = []
    for s in (-h, h):
        e = 1 + 2 * s
        inter = (0.5 + 2 * s) * e * e
        out.append(inter / (2 * e ** 3 - inter))
    return min(out), max(out)


def test_metric_oracles(verdict):
    rng = np.random.default_rng(3)
    cd_err = max(abs(chamfer(a, b) - chamfer_bruteforce(a, b))
                 for a, b in ((rng.normal(size=(500, 3)), rng.normal(size=(rng.integers(50, 500), 3)))
                              for _ in range(10)))
    mesh = icosphere(radius=0.4, subdivisions=2)
    p = rng.normal(scale=0.6, size=(500, 3))
    p2s_err = float(np.max(np.abs(distance_to_mesh(p, mesh) - distance_to_mesh_bruteforce(p, mesh))))
    lat = VoxelLattice.from_bounds([-0.25] * 3, [1.75] * 3, 64)
    iou = iou3d(voxelize(box_mesh([0, 0, 0], [1, 1, 1]), lat), voxelize(box_mesh([0.5, 0, 0], [1.5, 1, 1]), lat))
    lo, hi = shell_bounds(lat.cell[0])
    aucs = (auc_metric([0.0, 0.0]), auc_metric([0.05]), auc_metric([0.1, 0.3]))
    ok = cd_err < 1e-9 and p2s_err < 1e-9 and lo <= iou <= hi and aucs == (100.0, 50.0, 0.0)
    verdict(3, "metric oracles", ok, f"chamfer err {cd_err:.1e}, p2s err {p2s_err:.1e}, "
                                     f"iou3d {iou:.4f} in [{lo:.4f}, {hi:.4f}], AUC {aucs}")
    assert ok


# ---------------------------------------------------------------- marching cubes

def test_marching_cubes(verdict):
    lat = VoxelLattice.from_bounds([-0.5] * 3, [0.5] * 3, 64)
    d = np.linalg.norm(lat.nodes(), axis=1).reshape(lat.shape)
    ramp = OccupancyGrid(lat, np.clip(0.5 + (0.3 - d) / (4 * lat.cell[0]), 0, 1))
    area = marching_cubes(ramp).area()
    area_err = abs(area - 1.1310) / 1.1310
    watertight = all(marching_cubes(ramp, iso).is_watertight() for iso in (0.1, 0.3, 0.5, 0.7, 0.9))
    rng = np.random.default_rng(0)
    small = VoxelLattice.from_bounds([0, 0, 0], [1, 1, 1], 12)
    for _ in range(10):
        v = rng.random(small.shape)
        v[0], v[-1], v[:, 0], v[:, -1], v[:, :, 0], v[:, :, -1] = 0, 0, 0, 0, 0, 0
        watertight &= marching_cubes(OccupancyGrid(small, v), float(rng.uniform(0.2, 0.8))).is_watertight()
    vlat = VoxelLattice.from_bounds([-0.5] * 3, [0.5] * 3, 48)
    src = icosphere([0.02, 0, -0.03], 0.3, 4)
    m = marching_cubes(voxelize(src, vlat))
    cells = chamfer(sample_surface(m, 5000, seed=0), sample_surface(src, 5000, seed=1)) / vlat.cell[0]
    ok = area_err < 0.02 and watertight and cells < 1.5
    verdict(4, "marching cubes", ok, f"area {area:.4f} ({100 * area_err:.2f}% off), watertight={watertight}, "
                                     f"voxelize->extract CD {cells:.2f} cells")
    assert ok


# ---------------------------------------------------------------- single-figure overfit

def test_overfit_single_figure(verdict):
    t0 = time.perf_counter()
    spec = FigureSpec.default(1.75, shoulder_l=1.2, shoulder_r=1.1, elbow_l=0.3, knee_r=0.3, hip_r=0.2)
    mesh = generate_figure(spec)
    lo, hi = mesh.bounds()
    cell = ((hi - lo) + 0.12).max() / 31
    lat = VoxelLattice((lo + hi) / 2 - cell * 31 / 2, cell, (32, 32, 32))
    stage1 = voxelize(mesh, lat)
    cam = Camera.from_fov(256, 256, 40, look_at([0.5, 1.2, 3.0], [0, 0.9, 0]))
    fr = rasterize_fragments([(mesh, RigidTransform())], cam)
    crop = PersonCrop(lat, RigidTransform(), [RenderedView(cam, fr.depth, fr.instance, fr.intensity, 1)], 1, stage1)
    est, fine = refine(RefineItem(stage1, crop, mesh), ImplicitRefiner(n_steps=5000, n_samples=10_000))
    l_gt = float(np.mean([r["l_gt"] for r in est.loss_curve_[-100:]]))

    def cd(m):
        return chamfer(sample_surface(m, 20_000, seed=1), sample_surface(mesh, 20_000, seed=2))

    cd1, cd2 = cd(grid_to_mesh(stage1)), cd(grid_to_mesh(fine))
    dt = time.perf_counter() - t0
    ok = l_gt < 0.05 and cd2 < 0.02 and cd2 < cd1 and dt < 600
    verdict(5, "overfit", ok, f"L_GT {l_gt:.4f}, refined CD {cd2:.4f} vs stage-1 {cd1:.4f}, {dt:.0f}s")
    assert ok


# ---------------------------------------------------------------- pose

def test_pose_recovery(verdict):
    x = sample_surface(generate_figure(FigureSpec.default(1.75, shoulder_l=1.2, shoulder_r=1.2)), 200, seed=0)
    rng = np.random.default_rng(0)
    good = 0
    for _ in range(50):
        _, rep = fit_pose(PoseProblem.from_transform(x, random_pose(rng, 30.0, 0.3)))
        good += rep.rotation_error_deg < 0.5 and rep.translation_error < 1e-2
    T = random_pose(rng)
    auc = auc_metric([add_error(x, T, T)])
    ok = good >= 48 and auc == 100.0
    verdict(6, "pose recovery", ok, f"{good}/50 within 0.5 deg / 0.01, AUC(perfect) {auc}")
    assert ok


def test_coherency(verdict):
    row = RowScene()
    cams, gts = row.cameras, row.gt_maps

    def run(problems, gamma, learn_confidence=False):
        inits = [procrustes(p.model_points, p.targets) for p in problems]
        Ts, _ = fit_scene_poses(problems, row.meshes, cams, gts, inits, gamma=gamma, n_rounds=150,
                                steps_per_round=1, lr=0.02, decay=0.998, optimize_confidence=learn_confidence)
        bad, tot = scene_misorder(row.meshes, Ts, cams, gts)
        return Ts, bad / tot

    Ts, _ = run(row.problems(), 0.1)
    _, table = iou2d(list(zip(row.meshes, Ts)), gts, cams)
    sets = [misordered_pixels(row.meshes, Ts, c, g) for c, g in zip(cams, gts)]
    l_od = sum(float(loss_od(s, [T.axis_angle() for T in Ts], [T.translation for T in Ts])) for s in sets)
    # person 2's observed depth is pulled 1.6 toward the camera, contradicting the instance map;
    # both runs learn per-person confidence so the corrupted dense evidence can be down-weighted
    adversarial = row.problems({2: 1.6})
    _, wrong0 = run(adversarial, 0.0, True)
    _, wrong1 = run(adversarial, 0.1, True)
    ok = bool(np.all(table > 0.9)) and l_od == 0.0 and wrong0 > 0.10 and wrong1 < 0.10
    verdict(7, "coherency", ok, f"per-instance 2D IoU {np.round(table.ravel(), 3).tolist()}, L_OD {l_od}; "
                                f"adversarial misordered {100 * wrong0:.1f}% (gamma=0) "
                                f"vs {100 * wrong1:.1f}% (gamma=0.1)")
    assert ok


# ---------------------------------------------------------------- toy benchmark

def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


def test_ablation_ordering(verdict, tmp_path, monkeypatch):
    monkeypatch.setenv("COHERENT3D_OUTPUT", str(tmp_path))
    cfg = ROOT / "configs" / "toy.yaml"
    assert invoke("dataset", "--config", cfg).exit_code == 0
    r = invoke("ablate", "--config", cfg)
    assert r.exit_code == 0, r.output
    rows = {x["variant"]: x for x in json.loads((tmp_path / "ablation" / "ablation.json").read_text())["rows"]}
    full = rows["Proposed"]["cd"]
    others = {k: rows[k]["cd"] for k in ("W/o L_OS", "W/o Implicit", "Implicit with 3D & Depth",
                                         "Implicit with 3D & RGB")}
    ok = all(full is not None and v is not None and full <= v for v in others.values())
    detail = f"Proposed CD {full:.3f} vs " + ", ".join(f"{k} {v:.3f}" for k, v in others.items())
    verdict(8, "ablation ordering", ok, detail)
    assert ok, (tmp_path / "ablation" / "ablation.txt").read_text()


TINY = """\
dataset: {n_scenes: 4, n_views: 2, image_size: 64}
voxel: {resolution: 16, n_steps: 20, hidden: [16, 16]}
implicit: {n_steps: 50, n_samples: 2000, batch_size: 512, hidden: [32, 32], max_train_persons: 3}
pose: {n_rounds: 10, n_points: 100}
eval: {n_samples: 1000}
ablate: {n_scenes: 1}
"""


def run_all(root: Path, cfg: Path):
    commands = [("dataset",), ("train-voxel",), ("refine",)]
    commands += [(c, "--scene", "scene_000") for c in ("pipeline", "pose", "compose", "eval")]
    commands += [("ablate",)]
    for c in commands:
        r = CliRunner().invoke(main, [c[0], "--config", str(cfg), "--seed", "3", *c[1:]],
                               env={"COHERENT3D_OUTPUT": str(root)}, catch_exceptions=False)
        assert r.exit_code == 0, (c, r.output)
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_determinism(verdict, tmp_path):
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text(TINY)
    a = run_all(tmp_path / "a", cfg)
    b = run_all(tmp_path / "b", cfg)
    differ = sorted(str(k) for k in set(a) | set(b) if a.get(k) != b.get(k))
    kinds = sorted({k.suffix for k in a})
    ok = not differ and any(str(k).endswith(".bin.json") for k in a) and any(k.name == "report.json" for k in a)
    verdict(9, "determinism", ok, f"{len(a)} files ({' '.join(kinds)}) compared byte for byte, differing: {differ}")
    assert ok, differ

