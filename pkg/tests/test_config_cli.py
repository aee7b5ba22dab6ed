import json

import pytest
import yaml
from click.testing import CliRunner

from coherent3d.cli import main
from coherent3d.config import OUTPUT_ENV, RunConfig, dump_config, load_config
from coherent3d.exceptions import InvalidInputError

TINY = {
    "dataset": {"n_scenes": 4, "n_views": 2, "image_size": 64},
    "voxel": {"resolution": 16, "n_steps": 20, "hidden": [16, 16]},
    "implicit": {"n_steps": 50, "n_samples": 2000, "batch_size": 512, "hidden": [32, 32], "max_train_persons": 3},
    "pose": {"n_rounds": 10, "n_points": 100},
    "eval": {"n_samples": 1000},
    "ablate": {"n_scenes": 1},
}


def write_config(path, **extra):
    path.write_text(yaml.safe_dump({**TINY, **extra}))
    return path


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


def test_defaults_validate():
    cfg = RunConfig()
    assert cfg.loss.lam == 0.7 and cfg.loss.gamma == 0.1 and cfg.loss.w == 0.001
    assert load_config(None) == cfg


def test_unknown_key_rejected(tmp_path):
    (tmp_path / "c.yaml").write_text("voxel: {resolutoin: 8}\n")
    with pytest.raises(InvalidInputError, match="resolutoin"):
        load_config(tmp_path / "c.yaml")


def test_person_count_bound(tmp_path):
    (tmp_path / "c.yaml").write_text("dataset: {max_persons: 11}\n")
    with pytest.raises(InvalidInputError):
        load_config(tmp_path / "c.yaml")


def test_config_dump_round_trip(tmp_path):
    cfg = load_config(write_config(tmp_path / "c.yaml"))
    (tmp_path / "d.json").write_text(dump_config(cfg))
    assert load_config(tmp_path / "d.json") == cfg


def test_output_root_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
    assert RunConfig().output_dir() == tmp_path
    assert RunConfig(output_root="x").output_dir().name == "x"


@pytest.fixture(scope="module")
def run_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.yaml", output_root=str(root / "out"))
    for cmd in ("dataset", "train-voxel", "refine"):
        r = invoke(cmd, "--config", cfg)
        assert r.exit_code == 0, r.output
    return root, cfg


def test_dataset_layout_and_rerun_identical(run_root, tmp_path):
    root, cfg = run_root
    index = json.loads((root / "out" / "dataset" / "index.json").read_text())
    assert len(index["scenes"]) == 4
    other = write_config(tmp_path / "cfg.yaml", output_root=str(tmp_path / "out"))
    assert invoke("dataset", "--config", other).exit_code == 0
    a = sorted(p.relative_to(root / "out" / "dataset") for p in (root / "out" / "dataset").rglob("*") if p.is_file())
    b = sorted(p.relative_to(tmp_path / "out" / "dataset") for p in (tmp_path / "out" / "dataset").rglob("*")
               if p.is_file())
    assert a == b
    for rel in a:
        assert (root / "out" / "dataset" / rel).read_bytes() == (tmp_path / "out" / "dataset" / rel).read_bytes()


def test_models_written(run_root):
    root, _ = run_root
    names = ("voxel.bin", "voxel.bin.json", "implicit.bin", "implicit.bin.json", "voxel_loss.csv", "implicit_loss.csv")
    for name in names:
        assert (root / "out" / "models" / name).exists(), name


def test_missing_scene_fails_cleanly(run_root):
    _, cfg = run_root
    r = invoke("pipeline", "--config", cfg, "--scene", "nope")
    assert r.exit_code != 0 and "unknown scene id" in r.output


def test_bad_oracle_name_rejected(run_root):
    _, cfg = run_root
    r = invoke("pipeline", "--config", cfg, "--scene", "scene_000", "--oracle", "shape")
    assert r.exit_code != 0


def test_oracle_pipeline_reproduces_silhouettes(run_root):
    root, cfg = run_root
    r = invoke("pipeline", "--config", cfg, "--scene", "scene_000", "--oracle", "voxel,implicit,pose")
    assert r.exit_code == 0, r.output
    report = json.loads((root / "out" / "scenes" / "scene_000" / "report.json").read_text())
    assert report["iou2d"] > 0.95


def test_stepwise_commands(run_root):
    root, cfg = run_root
    assert invoke("pipeline", "--config", cfg, "--scene", "scene_001").exit_code == 0
    run = root / "out" / "scenes" / "scene_001"
    for name in ("scene.obj", "composition.json", "poses.json", "auc.csv", "report.json", "report.txt"):
        assert (run / name).exists(), name
    for cmd in ("pose", "compose", "eval"):
        r = invoke(cmd, "--config", cfg, "--scene", "scene_001")
        assert r.exit_code == 0, r.output


def test_ablate_table(run_root):
    root, cfg = run_root
    r = invoke("ablate", "--config", cfg)
    assert r.exit_code == 0, r.output
    rows = json.loads((root / "out" / "ablation" / "ablation.json").read_text())["rows"]
    assert [x["variant"] for x in rows][0] == "Proposed" and len(rows) == 6
    assert "Implicit with 3D & Depth" in (root / "out" / "ablation" / "ablation.txt").read_text()
