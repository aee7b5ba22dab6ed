"""Stage 2: implicit occupancy refinement of a stage-1 voxel grid.

A per-point decoder maps hybrid features to occupancy:

* voxel features: the stage-1 grid sampled trilinearly at full, half and
  quarter resolution (3 values);
* image features: intensity, silhouette and depth of the input view sampled
  bilinearly at the point's projection (3 values);
* signed depth: point camera depth minus the observed depth at its
  projection, positive behind the visible surface (1 value);
* an absence flag set when the point projects outside the image, in which
  case the image and depth features are zero.

The decoder is trained with the L1 loss against inside/outside labels and
evaluated on a lattice twice as fine as stage 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import diff
from .core import VoxelLattice, bilinear_sample, trilinear_sample
from .exceptions import DivergenceError, InvalidInputError, ReconstructionFailedError
from .mesh.inside import point_inside
from .mesh.marching_cubes import marching_cubes
from .mesh.sampling import sample_surface
from .mesh.trimesh import OccupancyGrid, TriMesh
from .voxelnet import PersonCrop, filled_depth, load_checkpoint, save_checkpoint

N_FEATURES = 8
FEATURE_NAMES = ("vox_full", "vox_half", "vox_quarter", "intensity", "silhouette", "depth", "signed_depth",
                 "absent")
FEATURE_GROUPS = {"voxel": (0, 1, 2), "image": (3, 4, 5), "depth": (6,)}
DEPTH_RANGE = 1.0


def grid_pyramid(grid: OccupancyGrid, levels: int = 3) -> list:
    """``levels`` grids, each a 2x average-pooling of the previous one."""
    pyr = [grid]
    for _ in range(levels - 1):
        pyr.append(pyr[-1].pooled(2))
    return pyr


@dataclass
class HybridFeatures:
    """Feature matrix ``(N, 8)`` in :data:`FEATURE_NAMES` order."""

    values: np.ndarray

    @property
    def voxel(self):
        return self.values[:, 0:3]

    @property
    def image(self):
        return self.values[:, 3:6]

    @property
    def signed_depth(self):
        return self.values[:, 6]

    @property
    def absent(self):
        return self.values[:, 7].astype(bool)


def extract_features(points, pyramid, crop: PersonCrop, view_index: int = 0) -> HybridFeatures:
    """Hybrid features of person-local ``points`` for the crop's input view."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.zeros((len(pts), N_FEATURES))
    for s, g in enumerate(pyramid[:3]):
        out[:, s] = trilinear_sample(g.lattice, g.values, pts, mode="clamp")
    view = crop.views[view_index]
    cam = view.camera
    pc = cam.to_camera(crop.placement.apply(pts))
    z = pc[:, 2]
    front = z > 1e-6
    zs = np.where(front, z, 1.0)
    u = cam.fx * pc[:, 0] / zs + cam.cx
    v = cam.fy * pc[:, 1] / zs + cam.cy
    inside = front & (u >= 0) & (u <= cam.width) & (v >= 0) & (v <= cam.height)
    depth = filled_depth(view.depth)
    z_ref = float(np.ravel(cam.to_camera(crop.placement.translation))[2])
    sil = (np.asarray(view.instance) == crop.person).astype(np.float64)
    ui, vi = u[inside], v[inside]
    d_img = bilinear_sample(depth, ui, vi, mode="clamp")
    out[inside, 3] = bilinear_sample(view.intensity, ui, vi, mode="clamp")
    out[inside, 4] = bilinear_sample(sil, ui, vi, mode="clamp")
    out[inside, 5] = np.clip(d_img - z_ref, -DEPTH_RANGE, DEPTH_RANGE)
    out[inside, 6] = np.clip(z[inside] - d_img, -DEPTH_RANGE, DEPTH_RANGE)
    out[~inside, 7] = 1.0
    return HybridFeatures(out)


@dataclass
class SampleSet:
    points: np.ndarray
    labels: np.ndarray
    near_surface: np.ndarray

    def __len__(self):
        return len(self.points)


def sample_training_points(mesh: TriMesh, lattice: VoxelLattice, n: int, sigma: float = 0.01,
                           seed: int = 0) -> SampleSet:
    """Half jittered surface samples (std ``sigma`` x bbox diagonal), half uniform in the lattice box."""
    if n < 2 or n % 2:
        raise InvalidInputError("sample count must be even and positive")
    if sigma <= 0:
        raise InvalidInputError("sigma must be positive")
    rng = np.random.default_rng(seed)
    lo, hi = mesh.bounds()
    diag = float(np.linalg.norm(hi - lo))
    surf = sample_surface(mesh, n // 2, seed=int(rng.integers(2**31)))
    near = surf + rng.normal(scale=sigma * diag, size=surf.shape)
    llo, lhi = lattice.bounds()
    near = np.clip(near, llo, lhi)
    uni = llo + rng.random((n // 2, 3)) * (lhi - llo)
    pts = np.concatenate([near, uni])
    labels = point_inside(mesh, pts, seed=seed).astype(np.float64)
    flag = np.r_[np.ones(n // 2, bool), np.zeros(n // 2, bool)]
    return SampleSet(pts, labels, flag)


def loss_gt(pred, labels):
    """Mean absolute error between predicted occupancies and labels."""
    labels = np.asarray(labels, dtype=np.float64)
    if np.shape(diff.value_of(pred)) != labels.shape:
        raise InvalidInputError("prediction and label lengths differ")
    return diff.mean(diff.absolute(pred - labels))


@dataclass
class RefineItem:
    """Training/evaluation unit: stage-1 grid, the crop it belongs to, optional ground truth."""

    grid: OccupancyGrid
    crop: PersonCrop
    mesh: TriMesh | None = None
    view_index: int = 0


class ImplicitRefiner(BaseEstimator):
    """Per-point occupancy decoder over hybrid features.

    ``features`` selects the enabled groups among ``"voxel"``, ``"image"``,
    ``"depth"``; disabled channels are zeroed so the architecture is fixed.
    """

    def __init__(self, hidden=(128, 128, 64), features=("voxel", "image", "depth"), n_samples: int = 10_000,
                 sigma: float = 0.01, n_steps: int = 3000, batch_size: int = 2048, lr: float = 1e-2,
                 decay: float = 0.9995, compute_dtype: str = "float32", random_state: int = 0):
        self.hidden = hidden
        self.features = features
        self.n_samples = n_samples
        self.sigma = sigma
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr = lr
        self.decay = decay
        self.compute_dtype = compute_dtype
        self.random_state = random_state

    @property
    def sizes(self):
        return [N_FEATURES, *self.hidden, 1]

    def _mask(self) -> np.ndarray:
        unknown = set(self.features) - set(FEATURE_GROUPS)
        if unknown:
            raise InvalidInputError(f"unknown feature groups {sorted(unknown)}")
        keep = np.zeros(N_FEATURES)
        for g in self.features:
            keep[list(FEATURE_GROUPS[g])] = 1.0
        keep[7] = 1.0 if ("image" in self.features or "depth" in self.features) else 0.0
        return keep

    def item_features(self, item: RefineItem, points) -> np.ndarray:
        f = extract_features(points, grid_pyramid(item.grid), item.crop, item.view_index).values
        return f * self._mask()

    def decode(self, params, feats):
        if self.compute_dtype != "float64":
            params = diff.astype(params, self.compute_dtype)
            feats = np.asarray(feats).astype(self.compute_dtype)
        logits = diff.astype(diff.mlp_apply(params, feats, self.sizes), np.float64)
        return diff.sigmoid(diff.reshape(logits, (-1,)))

    def fit(self, items, y=None):
        items = list(items)
        if not items or any(it.mesh is None for it in items):
            raise InvalidInputError("refiner training needs items with ground-truth meshes")
        rng = np.random.default_rng(self.random_state)
        X, Y = [], []
        for it in items:
            s = sample_training_points(it.mesh, it.grid.lattice, self.n_samples, self.sigma,
                                       seed=int(rng.integers(2**31)))
            X.append(self.item_features(it, s.points))
            Y.append(s.labels)
        X, Y = np.concatenate(X), np.concatenate(Y)
        params = diff.mlp_init(self.sizes, rng)
        opt = diff.Adam(lr=self.lr, decay=self.decay)
        curve = []
        bs = min(self.batch_size, len(X))
        order = np.array([], dtype=np.int64)
        for step in range(self.n_steps):
            if len(order) < bs:
                order = np.concatenate([order, rng.permutation(len(X))])
            idx, order = order[:bs], order[bs:]
            tape = diff.Tape()
            theta = tape.var(params)
            loss = loss_gt(self.decode(theta, X[idx]), Y[idx])
            val = float(loss.value)
            if not np.isfinite(val):
                raise DivergenceError(f"implicit decoder diverged at step {step} (loss {val})")
            params = opt.step(params, diff.backward(loss)[theta])
            curve.append({"step": step, "l_gt": val})
        self.params_ = params
        self.loss_curve_ = curve
        self.train_features_, self.train_labels_ = X, Y
        return self

    def predict_points(self, item: RefineItem, points) -> np.ndarray:
        check_is_fitted(self, "params_")
        feats = self.item_features(item, points)
        out = np.empty(len(feats))
        for s in range(0, len(feats), 65536):
            out[s:s + 65536] = self.decode(self.params_, feats[s:s + 65536])
        return out

    def predict(self, item: RefineItem, factor: int = 2) -> OccupancyGrid:
        """Decoder evaluated on the stage-1 lattice refined by ``factor``."""
        fine = item.grid.lattice.refine(factor)
        return OccupancyGrid(fine, self.predict_points(item, fine.nodes()).reshape(fine.shape))

    def architecture(self) -> dict:
        return {"kind": "implicit-decoder", "sizes": list(self.sizes), "activation": "tanh",
                "output": "logistic", "features": list(FEATURE_NAMES)}

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        p = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()}
        save_checkpoint(path, self.params_, {"architecture": self.architecture(), "params": p,
                                             "step": len(self.loss_curve_)})

    @classmethod
    def load(cls, path) -> "ImplicitRefiner":
        params, hdr = load_checkpoint(path)
        kw = dict(hdr["params"])
        kw["hidden"], kw["features"] = tuple(kw["hidden"]), tuple(kw["features"])
        est = cls(**kw)
        est.params_ = params
        est.loss_curve_ = []
        return est


def refine(item: RefineItem, refiner: ImplicitRefiner):
    """Train ``refiner`` on ``item`` and return ``(refiner, refined grid)``."""
    refiner.fit([item])
    return refiner, refiner.predict(item)


def largest_component(grid: OccupancyGrid, iso: float = 0.5) -> OccupancyGrid:
    """Zero every above-iso node outside the largest 6-connected above-iso component."""
    labels, n = ndimage.label(grid.values >= iso)
    if n <= 1:
        return grid
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    stray = (labels > 0) & (labels != int(np.argmax(sizes)))
    return OccupancyGrid(grid.lattice, np.where(stray, 0.0, grid.values))


def grid_to_mesh(grid: OccupancyGrid, iso: float = 0.5, keep_largest: bool = True) -> TriMesh:
    if not np.any(grid.values >= iso):
        raise ReconstructionFailedError("occupancy grid has no voxel above the iso level")
    if keep_largest:
        grid = largest_component(grid, iso)
    return marching_cubes(grid, iso)


def reconstruct_person(crop: PersonCrop, stage1, refiner: ImplicitRefiner | None = None,
                       view_index: int = 0) -> tuple:
    """Stage 1, optional refinement and marching cubes; returns ``(mesh, grid)`` in the person frame.

    ``stage1`` is either a fitted :class:`~coherent3d.voxelnet.OccupancyPredictor`
    or a precomputed :class:`OccupancyGrid` (oracle substitute).
    """
    grid = stage1 if isinstance(stage1, OccupancyGrid) else stage1.predict([crop])[0]
    if not np.any(grid.values >= 0.5):
        raise ReconstructionFailedError(f"person {crop.person}: stage-1 grid is empty")
    if refiner is not None:
        grid = refiner.predict(RefineItem(grid, crop, None, view_index))
    return grid_to_mesh(grid), grid
