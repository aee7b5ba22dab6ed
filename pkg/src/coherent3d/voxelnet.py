"""Stage 1: per-view voxel occupancy prediction and its three training losses.

The predictor is a per-voxel perceptron.  For every view it maps a voxel
center's positional encoding plus the view's silhouette and relative depth
at the center's projection to an occupancy probability, giving one grid per
view.  Training combines the class-balanced occupancy loss, the multi-view
consistency loss and the visibility-masked silhouette loss.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import diff
from .core import RigidTransform, VoxelLattice, bilinear_sample
from .exceptions import DivergenceError, InvalidInputError
from .mesh.inside import voxelize
from .mesh.trimesh import OccupancyGrid, TriMesh
from .render import SilhouetteOperator, silhouette_operator, soft_silhouette

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
PERSON_BOUNDS = (np.array([-0.8, -0.05, -0.8]), np.array([0.8, 2.05, 0.8]))
DEPTH_CLIP = 0.5


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.2
    beta: float = 0.1
    gamma: float = 0.1
    lam: float = 0.7
    w: float = 0.001
    n_views: int = 4

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.w) < 0:
            raise InvalidInputError("loss weights must be non-negative")
        if not 0 < self.lam < 1:
            raise InvalidInputError("class balance must lie in (0, 1)")
        if self.n_views < 1:
            raise InvalidInputError("need at least one view")


def person_lattice(resolution: int = 32, bounds=PERSON_BOUNDS) -> VoxelLattice:
    """Person-local crop lattice with ``resolution`` nodes along the vertical axis."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    cell = (hi[1] - lo[1]) / (resolution - 1)
    shape = tuple(int(n) for n in np.ceil((hi - lo) / cell - 1e-9).astype(int) + 1)
    return VoxelLattice(lo, cell, shape)


# ---------------------------------------------------------------- losses

def _grid_shape(g):
    return np.shape(diff.value_of(g))


def loss_3d(preds, gt, lam: float = 0.7):
    """Class-balanced binary cross-entropy, averaged over voxels and views."""
    preds = list(preds)
    target = np.asarray(gt.values if isinstance(gt, OccupancyGrid) else gt, dtype=np.float64)
    if not preds:
        raise InvalidInputError("no predictions")
    for p in preds:
        if _grid_shape(p) != target.shape:
            raise InvalidInputError(f"prediction shape {_grid_shape(p)} != target {target.shape}")
    total = 0.0
    for p in preds:
        q = diff.clip(p, PROB_EPS, 1.0 - PROB_EPS)
        bce = lam * target * diff.log(q) + (1.0 - lam) * (1.0 - target) * diff.log(1.0 - q)
        total = total - diff.mean(bce)
    return total * (1.0 / len(preds))


def loss_mv(preds, to_view=None, lattice: VoxelLattice | None = None):
    """Mean squared disagreement between view grids after resampling to the canonical frame.

    ``to_view[k]`` maps canonical coordinates into view ``k``'s grid frame
    (``None`` means the grids are already canonical).  Summed over unordered
    view pairs and normalized by voxel and pair counts.
    """
    preds = list(preds)
    if len(preds) < 2:
        log.info("multi-view loss needs at least two views; returning 0")
        return 0.0
    shape = _grid_shape(preds[0])
    if any(_grid_shape(p) != shape for p in preds):
        raise InvalidInputError("view grids must share a shape")
    if to_view is not None:
        if lattice is None:
            raise InvalidInputError("resampling needs the grid lattice")
        nodes = lattice.nodes()
        preds = [p if T is None else diff.trilinear_sample(p, lattice, T.apply(nodes), mode="clamp")
                 for p, T in zip(preds, to_view)]
    flat = [diff.reshape(p, (-1,)) for p in preds]
    total, pairs = 0.0, 0
    for i in range(len(flat)):
        for j in range(i + 1, len(flat)):
            total = total + diff.mean(diff.square(flat[i] - flat[j]))
            pairs += 1
    return total * (1.0 / pairs)


def visibility_indicator(instance_map, n: int) -> np.ndarray:
    """Pixels where person ``n`` is not hidden behind another person."""
    imap = np.asarray(instance_map)
    return (imap == n) | (imap == 0)


def loss_os(grids, operators, silhouettes, masks, tau: float = 0.05):
    """Visibility-masked L1 between soft-rendered and observed silhouettes.

    One entry per (view, person) pair in each list: the predicted grid, its
    :class:`SilhouetteOperator`, the observed silhouette and the mask.
    Averaged over pixels, then over pairs.
    """
    grids, operators, silhouettes, masks = list(grids), list(operators), list(silhouettes), list(masks)
    if not (len(grids) == len(operators) == len(silhouettes) == len(masks)) or not grids:
        raise InvalidInputError("need one grid, operator, silhouette and mask per term")
    total = 0.0
    for g, op, S, m in zip(grids, operators, silhouettes, masks):
        S = np.asarray(S, dtype=np.float64)
        m = np.asarray(m, dtype=np.float64)
        if S.shape != op.image_shape or m.shape != op.image_shape:
            raise InvalidInputError(f"silhouette/mask shape must be {op.image_shape}")
        Shat = soft_silhouette(g, op, tau)
        total = total + diff.mean(m * diff.absolute(S - Shat))
    return total * (1.0 / len(grids))


# ---------------------------------------------------------------- person crops

@dataclass
class PersonCrop:
    """One person seen in several views, with its crop lattice in the person frame.

    ``placement`` maps the crop (person-local) frame to the world.
    """

    lattice: VoxelLattice
    placement: RigidTransform
    views: list
    person: int
    target: OccupancyGrid | None = None

    def __post_init__(self):
        if not self.views:
            raise InvalidInputError("a crop needs at least one view")


def make_crops(scene, views, meshes=None, resolution: int = 32, with_targets: bool = True, seed: int = 0):
    """Crops for every person of ``scene`` using ground-truth placements (crop oracle)."""
    crops = []
    lat = person_lattice(resolution)
    for j, T in enumerate(scene.transforms, start=1):
        target = None
        if with_targets:
            target = voxelize(meshes[j - 1], lat, seed=seed)
        crops.append(PersonCrop(lat, T, list(views), j, target))
    return crops


def positional_encoding(p, lattice: VoxelLattice, n_freqs: int = 4) -> np.ndarray:
    """``[q, sin(2^k pi q), cos(2^k pi q)]`` of coordinates normalized to ``[-1, 1]``."""
    lo, hi = lattice.bounds()
    q = 2.0 * (np.asarray(p) - lo) / (hi - lo) - 1.0
    out = [q]
    for k in range(n_freqs):
        out.append(np.sin((2.0**k) * np.pi * q))
        out.append(np.cos((2.0**k) * np.pi * q))
    return np.concatenate(out, axis=1)


def filled_depth(depth) -> np.ndarray:
    """Depth image with background replaced by a finite far value."""
    d = np.asarray(depth, dtype=np.float64)
    fin = np.isfinite(d)
    far = (d[fin].max() if fin.any() else 0.0) + 1.0
    return np.where(fin, d, far)


def view_features(crop: PersonCrop, k: int, n_freqs: int = 4) -> np.ndarray:
    """Per-voxel inputs for view ``k``: encoding, silhouette, clipped relative depth."""
    view = crop.views[k]
    nodes = crop.lattice.nodes()
    pc = view.camera.to_camera(crop.placement.apply(nodes))
    z = pc[:, 2]
    zs = np.where(z > 1e-6, z, 1e-6)
    u = view.camera.fx * pc[:, 0] / zs + view.camera.cx
    v = view.camera.fy * pc[:, 1] / zs + view.camera.cy
    sil = (np.asarray(view.instance) == crop.person).astype(np.float64)
    s = bilinear_sample(sil, u, v, mode="zero")
    d = bilinear_sample(filled_depth(view.depth), u, v, mode="clamp")
    rel = np.clip(z - d, -DEPTH_CLIP, DEPTH_CLIP) / DEPTH_CLIP
    return np.concatenate([positional_encoding(nodes, crop.lattice, n_freqs), s[:, None], rel[:, None]], axis=1)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params, header: dict) -> None:
    """Flat little-endian float64 parameter vector plus ``<path>.json`` header."""
    path = Path(path)
    np.asarray(params, dtype="<f8").tofile(path)
    hdr = dict(header, n_params=int(np.size(params)), dtype="<f8")
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(hdr, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    path = Path(path)
    hdr = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    params = np.fromfile(path, dtype="<f8")
    if params.size != hdr["n_params"]:
        raise InvalidInputError(f"{path}: expected {hdr['n_params']} parameters, found {params.size}")
    return params, hdr


def write_curve(path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(columns)
        for r in rows:
            wr.writerow([r[c] if isinstance(r[c], int) else f"{r[c]:.10g}" for c in columns])


# ---------------------------------------------------------------- predictor

class OccupancyPredictor(BaseEstimator):
    """Per-voxel perceptron occupancy predictor trained on person crops.

    ``fit`` takes a list of :class:`PersonCrop` with targets; ``predict``
    returns one :class:`OccupancyGrid` per crop (the mean of the per-view
    grids, see :meth:`predict_views`).
    """

    def __init__(self, hidden=(64, 64, 64), n_freqs: int = 4, n_steps: int = 300, lr: float = 5e-3,
                 decay: float = 0.999, alpha: float = 0.2, beta: float = 0.1, lam: float = 0.7,
                 tau: float = 0.05, compute_dtype: str = "float32", random_state: int = 0):
        self.hidden = hidden
        self.n_freqs = n_freqs
        self.n_steps = n_steps
        self.lr = lr
        self.decay = decay
        self.alpha = alpha
        self.beta = beta
        self.lam = lam
        self.tau = tau
        self.compute_dtype = compute_dtype
        self.random_state = random_state

    @property
    def n_inputs(self) -> int:
        return 3 + 6 * self.n_freqs + 2

    @property
    def sizes(self):
        return [self.n_inputs, *self.hidden, 1]

    def architecture(self) -> dict:
        return {"kind": "per-voxel-mlp", "sizes": list(self.sizes), "activation": "tanh",
                "output": "logistic", "n_freqs": self.n_freqs}

    def _view_probs(self, params, feats, shape):
        if self.compute_dtype != "float64":
            params = diff.astype(params, self.compute_dtype)
            feats = feats.astype(self.compute_dtype)
        logits = diff.astype(diff.mlp_apply(params, feats, self.sizes), np.float64)
        return diff.reshape(diff.sigmoid(logits), shape)

    def _prepare(self, crop: PersonCrop):
        feats = [view_features(crop, k, self.n_freqs) for k in range(len(crop.views))]
        ops, sils, masks = [], [], []
        if self.beta > 0:
            for view in crop.views:
                ops.append(silhouette_operator(crop.lattice, crop.placement, view.camera))
                sils.append((np.asarray(view.instance) == crop.person).astype(np.float64))
                masks.append(visibility_indicator(view.instance, crop.person))
        return feats, ops, sils, masks

    def _loss(self, params, crop, prep):
        feats, ops, sils, masks = prep
        preds = [self._view_probs(params, f, crop.lattice.shape) for f in feats]
        l3 = loss_3d(preds, crop.target, self.lam)
        lm = loss_mv(preds) if self.alpha > 0 else 0.0
        los = loss_os(preds, ops, sils, masks, self.tau) if self.beta > 0 else 0.0
        total = l3 + self.alpha * lm + self.beta * los
        return total, (l3, lm, los)

    def fit(self, crops, y=None):
        crops = list(crops)
        if not crops:
            raise InvalidInputError("no training crops")
        if any(c.target is None for c in crops):
            raise InvalidInputError("training crops need target grids")
        rng = np.random.default_rng(self.random_state)
        params = diff.mlp_init(self.sizes, rng)
        opt = diff.Adam(lr=self.lr, decay=self.decay)
        preps = [self._prepare(c) for c in crops]
        curve = []
        order = np.array([], dtype=np.int64)
        for step in range(self.n_steps):
            if len(order) == 0:
                order = rng.permutation(len(crops))
            i, order = int(order[0]), order[1:]
            tape = diff.Tape()
            theta = tape.var(params)
            total, parts = self._loss(theta, crops[i], preps[i])
            vals = [float(diff.value_of(x)) for x in (total, *parts)]
            if not np.all(np.isfinite(vals)):
                raise DivergenceError(f"voxel stage diverged at step {step}: total={vals[0]} "
                                      f"L3D={vals[1]} LM={vals[2]} LOS={vals[3]}")
            g = diff.backward(total)[theta]
            params = opt.step(params, g)
            curve.append({"step": step, "crop": i, "total": vals[0], "l3d": vals[1], "lm": vals[2],
                          "los": vals[3]})
        self.params_ = params
        self.loss_curve_ = curve
        return self

    def predict_views(self, crop: PersonCrop) -> np.ndarray:
        """Per-view occupancy grids, shape ``(n_views, *lattice.shape)``."""
        check_is_fitted(self, "params_")
        feats = [view_features(crop, k, self.n_freqs) for k in range(len(crop.views))]
        return np.stack([self._view_probs(self.params_, f, crop.lattice.shape) for f in feats])

    def predict(self, crops) -> list:
        return [OccupancyGrid(c.lattice, self.predict_views(c).mean(axis=0)) for c in crops]

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        header = {"architecture": self.architecture(), "params": _jsonable(self.get_params()),
                  "step": len(self.loss_curve_)}
        save_checkpoint(path, self.params_, header)

    @classmethod
    def load(cls, path) -> "OccupancyPredictor":
        params, hdr = load_checkpoint(path)
        kw = dict(hdr["params"])
        kw["hidden"] = tuple(kw["hidden"])
        est = cls(**kw)
        est.params_ = params
        est.loss_curve_ = []
        return est


def _jsonable(d: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def train_voxel_stage(predictor: OccupancyPredictor, crops, cfg: LossConfig | None = None):
    """Fit ``predictor`` (loss weights from ``cfg`` when given); returns ``(params, curve, grids)``."""
    if cfg is not None:
        predictor.set_params(alpha=cfg.alpha, beta=cfg.beta, lam=cfg.lam)
    predictor.fit(crops)
    return predictor.params_, predictor.loss_curve_, predictor.predict(crops)


def oracle_grid(mesh: TriMesh, lattice: VoxelLattice, seed: int = 0) -> OccupancyGrid:
    """Ground-truth voxelization standing in for a trained stage 1."""
    return voxelize(mesh, lattice, seed=seed)


def loss_config_dict(cfg: LossConfig) -> dict:
    return asdict(cfg)
