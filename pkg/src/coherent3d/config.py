"""Run configuration: a validated, documented schema loaded from YAML or JSON.

Unknown keys are rejected at every level.  The output root defaults to
``./runs`` and can be overridden with the ``COHERENT3D_OUTPUT`` environment
variable or the ``output_root`` key.
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .exceptions import InvalidInputError

OUTPUT_ENV = "COHERENT3D_OUTPUT"
FeatureGroup = Literal["voxel", "image", "depth"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetConfig(_Strict):
    n_scenes: int = Field(50, ge=1)
    min_persons: int = Field(2, ge=2, le=10)
    max_persons: int = Field(4, ge=2, le=10)
    n_views: int = Field(4, ge=1)
    image_size: int = Field(128, ge=8)
    fov_deg: float = Field(45.0, gt=0, lt=180)
    rig_radius: float = Field(6.0, gt=0)
    rig_height: float = 1.2
    arena_half_width: float = Field(2.0, gt=0)
    train_fraction: float = Field(0.7, gt=0, lt=1)

    @model_validator(mode="after")
    def _persons(self):
        if self.min_persons > self.max_persons:
            raise ValueError("min_persons must not exceed max_persons")
        return self


class LossConstants(_Strict):
    alpha: float = Field(0.2, ge=0)
    beta: float = Field(0.1, ge=0)
    gamma: float = Field(0.1, ge=0)
    w: float = Field(0.001, ge=0)
    lam: float = Field(0.7, gt=0, lt=1)


class VoxelConfig(_Strict):
    resolution: int = Field(24, ge=4)
    hidden: list[int] = [64, 64, 64]
    n_freqs: int = Field(4, ge=0)
    n_steps: int = Field(300, ge=1)
    lr: float = Field(5e-3, gt=0)
    decay: float = Field(0.999, gt=0, le=1)
    tau: float = Field(0.05, gt=0)


class ImplicitConfig(_Strict):
    hidden: list[int] = [128, 128, 64]
    n_samples: int = Field(10_000, ge=2)
    sigma: float = Field(0.01, gt=0)
    n_steps: int = Field(3000, ge=1)
    batch_size: int = Field(2048, ge=1)
    lr: float = Field(1e-2, gt=0)
    decay: float = Field(0.9995, gt=0, le=1)
    view_index: int = Field(0, ge=0)
    max_train_persons: int = Field(12, ge=1)


class PoseConfig(_Strict):
    n_points: int = Field(300, ge=3)
    n_rounds: int = Field(100, ge=1)
    steps_per_round: int = Field(1, ge=1)
    lr: float = Field(0.02, gt=0)
    decay: float = Field(0.998, gt=0, le=1)
    optimize_confidence: bool = False
    auc_max_threshold: float = Field(0.10, gt=0)


class AblationToggles(_Strict):
    disable_los: bool = False
    disable_implicit: bool = False
    features: list[FeatureGroup] = ["voxel", "image", "depth"]


class AblateConfig(_Strict):
    n_scenes: int = Field(5, ge=1)
    seeds: list[int] = [0, 1, 2, 3, 4]


class EvalConfig(_Strict):
    n_samples: int = Field(5000, ge=1)


class RunConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2**64)
    output_root: str | None = None
    oracle: list[Literal["voxel", "pose", "implicit"]] = []
    dataset: DatasetConfig = DatasetConfig()
    loss: LossConstants = LossConstants()
    voxel: VoxelConfig = VoxelConfig()
    implicit: ImplicitConfig = ImplicitConfig()
    pose: PoseConfig = PoseConfig()
    toggles: AblationToggles = AblationToggles()
    ablate: AblateConfig = AblateConfig()
    eval: EvalConfig = EvalConfig()

    def output_dir(self) -> Path:
        root = self.output_root or os.environ.get(OUTPUT_ENV) or "runs"
        return Path(root)

    def with_updates(self, **kw) -> "RunConfig":
        data = self.model_dump()
        data.update(kw)
        return RunConfig.model_validate(data)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML/JSON config (or defaults when ``path`` is None) and validate it."""
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = json.loads(text) if str(path).endswith(".json") else (yaml.safe_load(text) or {})
        if not isinstance(data, dict):
            raise InvalidInputError(f"{path}: config must be a mapping")
    if overrides:
        data = {**data, **overrides}
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise InvalidInputError(f"invalid config: {e}") from None


def dump_config(cfg: RunConfig) -> str:
    """JSON snapshot of the settings; the output location is left out so relocated runs compare equal."""
    return json.dumps(cfg.model_dump(exclude={"output_root"}), indent=2, sort_keys=True) + "\n"
