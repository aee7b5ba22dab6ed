"""Command line: ``coherent3d <subcommand> [--config PATH] [--seed N] [--oracle voxel,pose,implicit]``.

Outputs go under the configured output root (``output_root`` key, else the
``COHERENT3D_OUTPUT`` environment variable, else ``./runs``):

    <root>/dataset/              scenes and index.json
    <root>/models/               voxel.bin, implicit.bin (+ .json headers, loss CSVs)
    <root>/scenes/<scene id>/    per-person OBJs, error maps, scene.obj, poses.json, report.*
    <root>/ablation/             ablation.json, ablation.txt
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import pipeline as pl
from .config import dump_config, load_config
from .exceptions import InvalidInputError
from .implicit import ImplicitRefiner
from .mesh.io import load_obj
from .pose import write_auc_curve, write_pose_report
from .voxelnet import OccupancyPredictor

log = logging.getLogger("coherent3d")


class Layout:
    def __init__(self, cfg):
        self.cfg = cfg
        self.root = cfg.output_dir()

    @property
    def dataset(self) -> Path:
        return self.root / "dataset"

    @property
    def models(self) -> Path:
        return self.root / "models"

    def scene(self, sid) -> Path:
        return self.root / "scenes" / sid

    def predictor(self):
        if "voxel" in self.cfg.oracle:
            return None
        p = self.models / "voxel.bin"
        if not p.exists():
            raise InvalidInputError(f"no trained voxel model at {p}; run train-voxel or use --oracle voxel")
        return OccupancyPredictor.load(p)

    def refiner(self):
        if self.cfg.toggles.disable_implicit:
            return None
        p = self.models / "implicit.bin"
        if not p.exists():
            raise InvalidInputError(f"no trained decoder at {p}; run refine or disable implicit refinement")
        return ImplicitRefiner.load(p)


def _parse_oracle(_ctx, _param, value):
    if not value:
        return None
    items = [v.strip() for v in value.split(",") if v.strip()]
    bad = sorted(set(items) - {"voxel", "pose", "implicit"})
    if bad:
        raise click.BadParameter(f"unknown stage(s) {bad}; choose from voxel, pose, implicit")
    return items


def _common(f):
    f = click.option("--oracle", callback=_parse_oracle, default=None,
                     help="Comma-separated stages replaced by ground truth: voxel, pose, implicit.")(f)
    f = click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None, help="Override the config seed.")(f)
    f = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
                     help="YAML or JSON run configuration.")(f)
    return f


def _layout(config_path, seed, oracle) -> Layout:
    over = {}
    if seed is not None:
        over["seed"] = seed
    if oracle is not None:
        over["oracle"] = oracle
    return Layout(load_config(config_path, over))


def _run(fn):
    """Run ``fn`` and turn any failure into a message and exit code 1."""
    try:
        fn()
    except (InvalidInputError, RuntimeError, OSError, ValueError, KeyError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Multi-person reconstruction with coherent scene composition."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@_common
def dataset(config_path, seed, oracle):
    """Generate the synthetic multi-person dataset."""
    def go():
        lay = _layout(config_path, seed, oracle)
        idx = pl.build_dataset(lay.cfg, lay.dataset)
        (lay.dataset / "config.json").write_text(dump_config(lay.cfg))
        n_train = sum(r["split"] == "train" for r in idx["scenes"])
        click.echo(f"{len(idx['scenes'])} scenes ({n_train} train) in {lay.dataset}")
    _run(go)


@main.command("train-voxel")
@_common
def train_voxel(config_path, seed, oracle):
    """Train the stage-1 voxel occupancy predictor."""
    def go():
        lay = _layout(config_path, seed, oracle)
        pred = pl.train_voxel(lay.cfg, lay.dataset, lay.models)
        click.echo(f"voxel model: {lay.models / 'voxel.bin'} (final loss {pred.loss_curve_[-1]['total']:.4f})")
    _run(go)


@main.command()
@_common
def refine(config_path, seed, oracle):
    """Train the implicit refinement decoder on stage-1 outputs."""
    def go():
        lay = _layout(config_path, seed, oracle)
        ref = pl.train_refiner(lay.cfg, lay.dataset, lay.models, lay.predictor())
        click.echo(f"decoder: {lay.models / 'implicit.bin'} (final L_GT {ref.loss_curve_[-1]['l_gt']:.4f})")
    _run(go)


@main.command()
@_common
@click.option("--scene", "scene_id", required=True, help="Scene id, e.g. scene_035.")
def pose(config_path, seed, oracle, scene_id):
    """Fit 6DOF poses for a scene, using person meshes of its run directory when present."""
    def go():
        lay = _layout(config_path, seed, oracle)
        b = pl.load_bundle(lay.dataset, scene_id)
        out = lay.scene(scene_id)
        out.mkdir(parents=True, exist_ok=True)
        meshes = []
        for j, gt in enumerate(b.meshes, start=1):
            p = out / f"person_{j}.obj"
            meshes.append(load_obj(p) if p.exists() else gt)
        transforms, reports = pl.fit_poses(lay.cfg, b, meshes)
        x = [pl.sample_surface(m, 500, seed=lay.cfg.seed + j) for j, m in enumerate(b.meshes, start=1)]
        adds = [pl.add_error(xi, T, Tp) for xi, T, Tp in zip(x, b.scene.transforms, transforms)]
        thr = lay.cfg.pose.auc_max_threshold
        rep = write_pose_report(out / "poses.json", transforms, adds,
                                None if reports is None or None in reports else reports, thr)
        write_auc_curve(out / "auc.csv", adds, thr)
        click.echo(f"poses: {out / 'poses.json'} (AUC {rep['auc']:.2f})")
    _run(go)


@main.command()
@_common
@click.option("--scene", "scene_id", required=True)
def compose(config_path, seed, oracle, scene_id):
    """Place the person meshes of a run directory by their poses into scene.obj."""
    def go():
        lay = _layout(config_path, seed, oracle)
        mesh, records = pl.compose_from_dir(lay.scene(scene_id))
        click.echo(f"scene mesh: {len(records)} persons, {mesh.n_faces} faces")
    _run(go)


@main.command("eval")
@_common
@click.option("--scene", "scene_id", required=True)
def eval_(config_path, seed, oracle, scene_id):
    """Evaluate a run directory against ground truth and write report.json/report.txt."""
    def go():
        lay = _layout(config_path, seed, oracle)
        click.echo(pl.evaluate_run_dir(lay.cfg, lay.dataset, scene_id, lay.scene(scene_id)).table())
    _run(go)


@main.command("pipeline")
@_common
@click.option("--scene", "scene_id", required=True)
def pipeline_(config_path, seed, oracle, scene_id):
    """Reconstruct, pose, compose and evaluate one scene."""
    def go():
        lay = _layout(config_path, seed, oracle)
        pl.load_bundle(lay.dataset, scene_id)
        report = pl.run_pipeline(lay.cfg, lay.dataset, scene_id, lay.scene(scene_id), lay.predictor(),
                                 lay.refiner())
        click.echo(report.table())
        failed = [p for p in report.per_instance if p.get("failed")]
        if failed:
            click.echo(f"{len(failed)} person(s) failed to reconstruct: "
                       + json.dumps([p["instance"] for p in failed]), err=True)
    _run(go)


@main.command()
@_common
def ablate(config_path, seed, oracle):
    """Run the ablation variants on the fixed test scenes and print the table."""
    def go():
        lay = _layout(config_path, seed, oracle)
        rows = pl.run_ablation(lay.cfg, lay.dataset, lay.root / "ablation")
        click.echo(pl.ablation_table(rows))
    _run(go)


if __name__ == "__main__":
    main()
