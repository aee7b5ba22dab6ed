"""End-to-end orchestration used by the command line: dataset generation,
stage training, per-scene reconstruction, pose fitting, composition,
evaluation and the ablation harness.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config
from .core import RigidTransform
from .exceptions import InvalidInputError, ReconstructionFailedError
from .implicit import ImplicitRefiner, RefineItem, grid_to_mesh
from .mesh.inside import voxelize
from .mesh.io import load_obj, save_obj
from .mesh.sampling import sample_surface
from .metrics import MetricReport, evaluate_person, iou2d, p2s, save_error_map
from .pose import (PoseProblem, add_error, compose_scene, fit_scene_poses, procrustes,
                   write_auc_curve, write_pose_report)
from .render import hit_points, rasterize_fragments
from .synthscene import (dump_json, export_scene, generate_scene, load_scene, load_scene_meshes, load_views,
                         split_scene_ids)
from .voxelnet import OccupancyPredictor, PersonCrop, person_lattice, write_curve

log = logging.getLogger(__name__)

INDEX_SCHEMA = "coherent3d.dataset/1"
ABLATION_VARIANTS = (
    ("Proposed", dict(disable_los=False, disable_implicit=False, features=["voxel", "image", "depth"])),
    ("W/o L_OS & Implicit", dict(disable_los=True, disable_implicit=True, features=["voxel", "image", "depth"])),
    ("W/o Implicit", dict(disable_los=False, disable_implicit=True, features=["voxel", "image", "depth"])),
    ("W/o L_OS", dict(disable_los=True, disable_implicit=False, features=["voxel", "image", "depth"])),
    ("Implicit with 3D & Depth", dict(disable_los=False, disable_implicit=False, features=["voxel", "depth"])),
    ("Implicit with 3D & RGB", dict(disable_los=False, disable_implicit=False, features=["voxel", "image"])),
)


# ---------------------------------------------------------------- dataset

def scene_ids(n: int) -> list:
    return [f"scene_{i:03d}" for i in range(n)]


def build_dataset(cfg: RunConfig, out_dir) -> dict:
    """Generate ``cfg.dataset.n_scenes`` scenes under ``out_dir`` plus ``index.json``."""
    d = cfg.dataset
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = scene_ids(d.n_scenes)
    split = split_scene_ids(ids, d.train_fraction, seed=cfg.seed)
    rig = dict(radius=d.rig_radius, height=d.rig_height, target=[0.0, 0.9, 0.0],
               image_size=[d.image_size, d.image_size], fov_deg=d.fov_deg)
    a = d.arena_half_width
    records = []
    for i, sid in enumerate(ids):
        rng = np.random.default_rng([cfg.seed, i])
        n_persons = int(rng.integers(d.min_persons, d.max_persons + 1))
        scene = generate_scene(sid, int(rng.integers(2**31)), n_persons, d.n_views, (-a, a, -a, a), rig, split[sid])
        rec = export_scene(scene, out_dir)
        rec["path"] = str(Path("scenes") / sid)
        records.append(rec)
    index = {"schema": INDEX_SCHEMA, "seed": cfg.seed, "train_fraction": d.train_fraction, "scenes": records}
    dump_json(index, out_dir / "index.json")
    return index


def load_index(dataset_dir) -> dict:
    p = Path(dataset_dir) / "index.json"
    if not p.exists():
        raise InvalidInputError(f"no dataset index at {p}")
    return json.loads(p.read_text())


def split_ids(dataset_dir, split: str) -> list:
    return [r["scene_id"] for r in load_index(dataset_dir)["scenes"] if r["split"] == split]


@dataclass
class SceneBundle:
    scene: object
    views: list
    meshes: list
    path: Path


def load_bundle(dataset_dir, scene_id: str) -> SceneBundle:
    path = Path(dataset_dir) / "scenes" / scene_id
    if not (path / "manifest.json").exists():
        raise InvalidInputError(f"unknown scene id {scene_id!r} in {dataset_dir}")
    return SceneBundle(load_scene(path), load_views(path), load_scene_meshes(path), path)


def bundle_crops(b: SceneBundle, resolution: int, with_targets: bool = True, seed: int = 0) -> list:
    lat = person_lattice(resolution)
    crops = []
    for j, T in enumerate(b.scene.transforms, start=1):
        target = voxelize(b.meshes[j - 1], lat, seed=seed) if with_targets else None
        crops.append(PersonCrop(lat, T, b.views, j, target))
    return crops


# ---------------------------------------------------------------- training

def make_predictor(cfg: RunConfig, disable_los: bool | None = None) -> OccupancyPredictor:
    v, lc = cfg.voxel, cfg.loss
    off = cfg.toggles.disable_los if disable_los is None else disable_los
    return OccupancyPredictor(hidden=tuple(v.hidden), n_freqs=v.n_freqs, n_steps=v.n_steps, lr=v.lr,
                              decay=v.decay, alpha=lc.alpha, beta=0.0 if off else lc.beta, lam=lc.lam,
                              tau=v.tau, random_state=cfg.seed)


def make_refiner(cfg: RunConfig, features=None) -> ImplicitRefiner:
    c = cfg.implicit
    feats = tuple(cfg.toggles.features if features is None else features)
    return ImplicitRefiner(hidden=tuple(c.hidden), features=feats, n_samples=c.n_samples, sigma=c.sigma,
                           n_steps=c.n_steps, batch_size=c.batch_size, lr=c.lr, decay=c.decay,
                           random_state=cfg.seed)


def training_crops(cfg: RunConfig, dataset_dir, limit: int | None = None) -> tuple:
    crops, meshes = [], []
    for sid in split_ids(dataset_dir, "train"):
        b = load_bundle(dataset_dir, sid)
        crops.extend(bundle_crops(b, cfg.voxel.resolution, seed=cfg.seed))
        meshes.extend(b.meshes)
        if limit is not None and len(crops) >= limit:
            break
    if limit is not None:
        crops, meshes = crops[:limit], meshes[:limit]
    if not crops:
        raise InvalidInputError("dataset has no training scenes")
    return crops, meshes


def train_voxel(cfg: RunConfig, dataset_dir, out_dir, disable_los: bool | None = None) -> OccupancyPredictor:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    crops, _ = training_crops(cfg, dataset_dir, cfg.implicit.max_train_persons)
    pred = make_predictor(cfg, disable_los).fit(crops)
    pred.save(out_dir / "voxel.bin")
    write_curve(out_dir / "voxel_loss.csv", pred.loss_curve_, ["step", "crop", "total", "l3d", "lm", "los"])
    return pred


def stage1_grid(cfg: RunConfig, crop: PersonCrop, predictor, mesh=None):
    if "voxel" in cfg.oracle or predictor is None:
        if mesh is None:
            raise InvalidInputError("oracle stage 1 needs the ground-truth mesh")
        return crop.target if crop.target is not None else voxelize(mesh, crop.lattice, seed=cfg.seed)
    return predictor.predict([crop])[0]


def train_refiner(cfg: RunConfig, dataset_dir, out_dir, predictor=None, features=None) -> ImplicitRefiner:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    crops, meshes = training_crops(cfg, dataset_dir, cfg.implicit.max_train_persons)
    items = [RefineItem(stage1_grid(cfg, c, predictor, m), c, m, cfg.implicit.view_index)
             for c, m in zip(crops, meshes)]
    ref = make_refiner(cfg, features).fit(items)
    ref.save(out_dir / "implicit.bin")
    write_curve(out_dir / "implicit_loss.csv", ref.loss_curve_, ["step", "l_gt"])
    return ref


# ---------------------------------------------------------------- poses

def pose_problems(cfg: RunConfig, b: SceneBundle) -> list:
    """Dense correspondences per person: observed depth back-projected (targets) paired with
    the person-frame surface point under each pixel, taken from the dataset rendering."""
    rng = np.random.default_rng([cfg.seed, 7])
    xs = [[] for _ in b.meshes]
    ys = [[] for _ in b.meshes]
    items = list(zip(b.meshes, b.scene.transforms))
    for view in b.views:
        fr = rasterize_fragments(items, view.camera)
        hp = hit_points(fr, b.meshes)
        for j in range(1, len(b.meshes) + 1):
            rr, cc = np.nonzero((view.instance == j) & np.isfinite(view.depth))
            if len(rr) == 0:
                continue
            xs[j - 1].append(hp[rr, cc])
            ys[j - 1].append(view.camera.unproject(cc + 0.5, rr + 0.5, view.depth[rr, cc]))
    problems = []
    for j, (x, y) in enumerate(zip(xs, ys)):
        if not x:
            problems.append(None)
            continue
        x, y = np.concatenate(x), np.concatenate(y)
        sel = np.sort(rng.choice(len(x), size=min(cfg.pose.n_points, len(x)), replace=False))
        problems.append(PoseProblem(x[sel], y[sel], w=cfg.loss.w, gt=b.scene.transforms[j]))
    return problems


def fit_poses(cfg: RunConfig, b: SceneBundle, meshes) -> tuple:
    """Transforms for every person; GT when pose is an oracle stage or no pixels are visible."""
    gts = list(b.scene.transforms)
    if "pose" in cfg.oracle:
        return gts, None
    probs = pose_problems(cfg, b)
    idx = [k for k, p in enumerate(probs) if p is not None and meshes[k] is not None]
    out = list(gts)
    reports = [None] * len(gts)
    if idx:
        p = cfg.pose
        inits = [procrustes(probs[k].model_points, probs[k].targets) for k in idx]
        Ts, reps = fit_scene_poses([probs[k] for k in idx], [meshes[k] for k in idx],
                                   [v.camera for v in b.views], [_remap(v.instance, idx) for v in b.views],
                                   inits, cfg.loss.gamma, p.n_rounds, p.steps_per_round, p.lr, p.decay,
                                   p.optimize_confidence)
        for k, T, r in zip(idx, Ts, reps):
            out[k] = T
            reports[k] = r
    return out, reports


def _remap(imap, idx):
    """Instance map restricted to persons ``idx`` and renumbered ``1..len(idx)``."""
    lut = np.zeros(int(max(imap.max(), max(idx) + 1)) + 1, dtype=np.int64)
    for new, k in enumerate(idx, start=1):
        lut[k + 1] = new
    return lut[imap]


# ---------------------------------------------------------------- per-scene pipeline

def reconstruct_scene(cfg: RunConfig, b: SceneBundle, predictor=None, refiner=None,
                      disable_implicit: bool | None = None) -> list:
    """Per-person ``(mesh or None, grid or None, error message or None)`` in the person frame.

    With ``"implicit"`` among the oracle stages the final mesh is the ground-truth mesh itself.
    """
    off = cfg.toggles.disable_implicit if disable_implicit is None else disable_implicit
    crops = bundle_crops(b, cfg.voxel.resolution, with_targets="voxel" in cfg.oracle, seed=cfg.seed)
    out = []
    for crop, mesh in zip(crops, b.meshes):
        if "implicit" in cfg.oracle:
            lat = crop.lattice if off else crop.lattice.refine(2)
            out.append((mesh, voxelize(mesh, lat, seed=cfg.seed), None))
            continue
        try:
            grid = stage1_grid(cfg, crop, predictor, mesh)
            if not off:
                if refiner is None:
                    raise InvalidInputError("implicit refinement enabled but no trained decoder given")
                grid = refiner.predict(RefineItem(grid, crop, None, cfg.implicit.view_index))
            out.append((grid_to_mesh(grid), grid, None))
        except ReconstructionFailedError as e:
            log.warning("person %d: %s", crop.person, e)
            out.append((None, None, str(e)))
    return out


def evaluate_scene(cfg: RunConfig, b: SceneBundle, recon: list, transforms: list) -> tuple:
    """MetricReport plus per-person ADD errors."""
    per, cds, p2ss, p2ss_s, ious = [], [], [], [], []
    adds = []
    for j, ((mesh, grid, err), gt_mesh) in enumerate(zip(recon, b.meshes), start=1):
        T_gt = b.scene.transforms[j - 1]
        x = sample_surface(gt_mesh, 500, seed=cfg.seed + j)
        adds.append(add_error(x, T_gt, transforms[j - 1]))
        if mesh is None:
            per.append({"instance": j, "failed": err, "add": adds[-1]})
            continue
        gt_grid = voxelize(gt_mesh, grid.lattice, seed=cfg.seed)
        m = evaluate_person(mesh, gt_mesh, grid, gt_grid, cfg.eval.n_samples, seed=cfg.seed)
        m = {"instance": j, "cd": 100 * m["cd"], "p2s": 100 * m["p2s"], "p2s_samples": 100 * m["p2s_samples"],
             "iou3d": m["iou3d"], "add": adds[-1]}
        per.append(m)
        cds.append(m["cd"])
        p2ss.append(m["p2s"])
        p2ss_s.append(m["p2s_samples"])
        ious.append(m["iou3d"])
    placed = [(mesh, T) for (mesh, _, _), T in zip(recon, transforms)]
    i2d, _ = iou2d(placed, [v.instance for v in b.views], [v.camera for v in b.views])
    nan = float("nan")
    report = MetricReport(float(np.mean(cds)) if cds else nan, float(np.mean(p2ss)) if p2ss else nan,
                          float(np.mean(p2ss_s)) if p2ss_s else nan, float(np.mean(ious)) if ious else nan,
                          i2d, per)
    return report, adds


def run_pipeline(cfg: RunConfig, dataset_dir, scene_id: str, out_dir, predictor=None, refiner=None) -> MetricReport:
    b = load_bundle(dataset_dir, scene_id)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    recon = reconstruct_scene(cfg, b, predictor, refiner)
    meshes = [r[0] for r in recon]
    transforms, reports = fit_poses(cfg, b, meshes)
    report, adds = evaluate_scene(cfg, b, recon, transforms)
    for j, ((mesh, _, _), per) in enumerate(zip(recon, report.per_instance), start=1):
        if mesh is None:
            continue
        save_obj(mesh, out_dir / f"person_{j}.obj")
        save_error_map(mesh, p2s(mesh, b.meshes[j - 1], 0).per_vertex, out_dir / f"person_{j}_error.obj")
    scene_mesh, records = compose_scene([(m, T) for m, T in zip(meshes, transforms) if m is not None])
    save_obj(scene_mesh, out_dir / "scene.obj")
    dump_json({"instances": records}, out_dir / "composition.json")
    write_pose_report(out_dir / "poses.json", transforms, adds,
                      None if reports is None or None in reports else reports, cfg.pose.auc_max_threshold)
    write_auc_curve(out_dir / "auc.csv", adds, cfg.pose.auc_max_threshold)
    report.to_json(out_dir / "report.json")
    (out_dir / "report.txt").write_text(report.table() + "\n")
    (out_dir / "config.json").write_text(dump_config(cfg))
    return report


def compose_from_dir(run_dir, poses_json=None):
    """Compose ``person_<j>.obj`` meshes of a run directory with the transforms in its pose report."""
    run_dir = Path(run_dir)
    poses = json.loads(Path(poses_json or run_dir / "poses.json").read_text())
    persons = []
    for e in poses["instances"]:
        p = run_dir / f"person_{e['instance']}.obj"
        if p.exists():
            R = np.asarray(e["R"]).reshape(3, 3)
            persons.append((load_obj(p), RigidTransform(R, e["t"])))
    mesh, records = compose_scene(persons)
    save_obj(mesh, run_dir / "scene.obj")
    dump_json({"instances": records}, run_dir / "composition.json")
    return mesh, records


def evaluate_run_dir(cfg: RunConfig, dataset_dir, scene_id: str, run_dir) -> MetricReport:
    """Re-evaluate the person meshes and poses stored in a run directory against ground truth."""
    b = load_bundle(dataset_dir, scene_id)
    run_dir = Path(run_dir)
    p = run_dir / "poses.json"
    if not p.exists():
        raise InvalidInputError(f"no pose report at {p}")
    poses = json.loads(p.read_text())
    transforms = [RigidTransform(np.asarray(e["R"]).reshape(3, 3), e["t"]) for e in poses["instances"]]
    if len(transforms) != len(b.meshes):
        raise InvalidInputError("pose report and scene disagree on the number of persons")
    lat = person_lattice(cfg.voxel.resolution)
    if not cfg.toggles.disable_implicit:
        lat = lat.refine(2)
    recon = []
    for j in range(1, len(b.meshes) + 1):
        mp = run_dir / f"person_{j}.obj"
        if not mp.exists():
            recon.append((None, None, "missing mesh"))
            continue
        mesh = load_obj(mp)
        recon.append((mesh, voxelize(mesh, lat, seed=cfg.seed), None))
    report, _ = evaluate_scene(cfg, b, recon, transforms)
    report.to_json(run_dir / "report.json")
    (run_dir / "report.txt").write_text(report.table() + "\n")
    return report


# ---------------------------------------------------------------- ablation

def ablation_scenes(cfg: RunConfig, dataset_dir) -> list:
    ids = split_ids(dataset_dir, "test")[: cfg.ablate.n_scenes]
    if len(ids) < cfg.ablate.n_scenes:
        raise InvalidInputError(f"need {cfg.ablate.n_scenes} test scenes, dataset has {len(ids)}")
    return ids


def _nanmean(xs) -> float:
    x = np.asarray(xs, dtype=np.float64)
    x = x[np.isfinite(x)]
    return float(x.mean()) if x.size else float("nan")


def run_ablation(cfg: RunConfig, dataset_dir, out_dir) -> list:
    """Run every variant on the fixed test scenes; returns table rows in variant order.

    Stage-1 predictors are trained once per L_OS setting and decoders once
    per (L_OS setting, feature set); variants share them where identical.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = ablation_scenes(cfg, dataset_dir)
    predictors, refiners = {}, {}
    rows = []
    for name, tog in ABLATION_VARIANTS:
        row = {"variant": name}
        try:
            los_off = tog["disable_los"]
            if los_off not in predictors and "voxel" not in cfg.oracle:
                predictors[los_off] = train_voxel(cfg, dataset_dir, out_dir / f"voxel_los{int(not los_off)}", los_off)
            pred = predictors.get(los_off)
            ref = None
            if not tog["disable_implicit"]:
                key = (los_off, tuple(tog["features"]))
                if key not in refiners:
                    tag = f"implicit_los{int(not los_off)}_{'-'.join(tog['features'])}"
                    refiners[key] = train_refiner(cfg, dataset_dir, out_dir / tag, pred, tog["features"])
                ref = refiners[key]
            vcfg = cfg.with_updates(toggles=tog)
            reps = []
            for sid in ids:
                b = load_bundle(dataset_dir, sid)
                recon = reconstruct_scene(vcfg, b, pred, ref, tog["disable_implicit"])
                rep, _ = evaluate_scene(vcfg, b, recon, list(b.scene.transforms))
                reps.append(rep)
            row.update(cd=_nanmean([r.cd for r in reps]), p2s=_nanmean([r.p2s for r in reps]),
                       iou3d=_nanmean([r.iou3d for r in reps]), iou2d=_nanmean([r.iou2d for r in reps]), failed=None)
        except Exception as e:  # a failed cell is marked, the table is still emitted
            log.exception("ablation variant %s failed", name)
            row.update(cd=None, p2s=None, iou3d=None, iou2d=None, failed=f"{type(e).__name__}: {e}")
        rows.append(row)
    dump_json({"scenes": ids, "units": "cm (scene units x 100)", "rows": rows}, out_dir / "ablation.json")
    (out_dir / "ablation.txt").write_text(ablation_table(rows) + "\n")
    return rows


def ablation_table(rows) -> str:
    lines = [f"{'variant':<28}{'CD':>9}{'P2S':>9}{'3DIoU':>9}{'2DIoU':>9}"]
    for r in rows:
        if r.get("failed"):
            lines.append(f"{r['variant']:<28}  FAILED: {r['failed']}")
        else:
            lines.append(f"{r['variant']:<28}{r['cd']:>9.3f}{r['p2s']:>9.3f}{r['iou3d']:>9.3f}{r['iou2d']:>9.3f}")
    return "\n".join(lines)
