"""6DOF placement of person-local reconstructions.

Poses are found by direct gradient-based minimization of the dense pose
loss, optionally coupled across persons by the ordinal depth loss, which
penalizes pixels where the composed scene puts the wrong person in front.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import diff
from .core import Camera, RigidTransform, as_points, geodesic_angle
from .exceptions import IllPosedError, InvalidInputError
from .mesh.trimesh import TriMesh, concatenate
from .render import rasterize_fragments

log = logging.getLogger(__name__)

CONF_MIN = 1e-6


# ---------------------------------------------------------------- problems

def check_model_points(x) -> np.ndarray:
    x = as_points(x)
    if len(x) < 3:
        raise IllPosedError("need at least 3 model points")
    s = np.linalg.svd(x - x.mean(axis=0), compute_uv=False)
    if s[1] <= 1e-9 * max(s[0], 1e-300):
        raise IllPosedError("model points are collinear")
    return x


@dataclass
class PoseProblem:
    """Model points ``x_j`` (person frame) and their targets ``R x_j + t`` (scene frame).

    ``confidence`` holds one value per pose hypothesis (its length is U).
    """

    model_points: np.ndarray
    targets: np.ndarray
    confidence: np.ndarray = field(default_factory=lambda: np.ones(1))
    w: float = 0.001
    gt: RigidTransform | None = None

    def __post_init__(self):
        self.model_points = check_model_points(self.model_points)
        self.targets = as_points(self.targets)
        if self.targets.shape != self.model_points.shape:
            raise InvalidInputError("one target per model point required")
        self.confidence = np.clip(np.atleast_1d(np.asarray(self.confidence, dtype=np.float64)), CONF_MIN, 1.0)
        if self.w < 0:
            raise InvalidInputError("w must be non-negative")

    @classmethod
    def from_transform(cls, model_points, T: RigidTransform, **kw) -> "PoseProblem":
        x = check_model_points(model_points)
        return cls(x, T.apply(x), gt=T, **kw)

    @property
    def n_hypotheses(self) -> int:
        return len(self.confidence)


def transform_points(rotvec, trans, x):
    """``R(rotvec) x + t`` for points ``x`` (Var-aware)."""
    R = diff.rodrigues(rotvec)
    return diff.matmul(x, diff.transpose(R)) + trans


def loss_dp(problem: PoseProblem, rotvecs, translations, confidence=None):
    """Dense pose loss over U hypotheses.

    ``(1/U) sum_i [ c_i * mean_j ||y_j - (R_i x_j + t_i)|| - w log c_i ]`` with
    ``y_j`` the targets.  ``rotvecs`` / ``translations`` have shape ``(U, 3)``
    (or ``(3,)`` for one hypothesis).
    """
    rv = rotvecs if np.ndim(diff.value_of(rotvecs)) == 2 else diff.reshape(rotvecs, (1, 3))
    tr = translations if np.ndim(diff.value_of(translations)) == 2 else diff.reshape(translations, (1, 3))
    U = np.shape(diff.value_of(rv))[0]
    c = problem.confidence if confidence is None else confidence
    if np.shape(diff.value_of(c)) != (U,):
        raise InvalidInputError(f"need {U} confidences")
    total = 0.0
    for i in range(U):
        pred = transform_points(rv[i], tr[i], problem.model_points)
        dist = diff.mean(diff.norm(problem.targets - pred, axis=1))
        total = total + c[i] * dist - problem.w * diff.log(c[i])
    return total * (1.0 / U)


@dataclass
class MisorderedPixelSet:
    """Pixels whose predicted front instance differs from the observed one.

    ``hits_true`` / ``hits_pred`` are the person-frame surface points of the
    observed-front and predicted-front instances under each pixel.
    """

    camera: Camera
    pixels: np.ndarray
    true_front: np.ndarray
    pred_front: np.ndarray
    hits_true: np.ndarray
    hits_pred: np.ndarray
    n_overlap: int = 0

    def __len__(self):
        return len(self.pixels)


def instance_fragments(meshes, transforms, cam: Camera) -> list:
    """Fragments of every instance rasterized on its own."""
    return [rasterize_fragments([(m, T)], cam) for m, T in zip(meshes, transforms)]


def misordered_pixels(meshes, transforms, cam: Camera, gt_instance_map) -> MisorderedPixelSet:
    """Find overlap pixels where the composed prediction contradicts the observed front instance."""
    gt = np.asarray(gt_instance_map).ravel()
    frs = instance_fragments(meshes, transforms, cam)
    K = len(meshes)
    depth = np.stack([f.depth.ravel() for f in frs])  # (K, P)
    covered = np.isfinite(depth)
    overlap = covered.sum(axis=0) >= 2
    pred = np.argmin(np.where(covered, depth, np.inf), axis=0) + 1
    true = gt
    ok_true = (true >= 1) & (true <= K)
    true_idx = np.clip(true - 1, 0, K - 1)
    true_cov = covered[true_idx, np.arange(len(true))]
    sel = overlap & ok_true & true_cov & (pred != true)
    pix = np.nonzero(sel)[0]
    n_overlap = int(np.count_nonzero(overlap & ok_true & true_cov))

    def hits(inst):
        out = np.zeros((len(pix), 3))
        for k in range(K):
            m = inst == k + 1
            if not m.any():
                continue
            fr = frs[k]
            p = pix[m]
            t = meshes[k].triangles()[fr.face.ravel()[p]]
            out[m] = np.einsum("ni,nij->nj", fr.bary.reshape(-1, 3)[p], t)
        return out

    return MisorderedPixelSet(cam, pix, true[pix], pred[pix], hits(true[pix]), hits(pred[pix]), n_overlap)


def _camera_depth(cam: Camera, rotvec, trans, x):
    world = transform_points(rotvec, trans, x)
    Rc = cam.extrinsics.rotation
    tc = cam.extrinsics.translation
    return diff.matmul(world, Rc[2]) + tc[2]


def od_margins(mset: MisorderedPixelSet, rotvecs, translations):
    """Per-pixel ``D_true(i) - D_pred(i)`` at the current poses."""
    n = len(mset)
    order, pieces = [], []
    for which, inst, hits in ((0, mset.true_front, mset.hits_true), (1, mset.pred_front, mset.hits_pred)):
        for k in np.unique(inst):
            m = np.nonzero(inst == k)[0]
            pieces.append(_camera_depth(mset.camera, rotvecs[int(k) - 1], translations[int(k) - 1], hits[m]))
            order.append(m + which * n)
    d = diff.concat(pieces, axis=0)
    inv = np.empty(2 * n, dtype=np.int64)
    inv[np.concatenate(order)] = np.arange(2 * n)
    return d[inv[:n]] - d[inv[n:]]


def loss_od(mset: MisorderedPixelSet, rotvecs, translations):
    """Ordinal depth loss ``sum_i log(1 + exp(D_true(i) - D_pred(i)))`` over misordered pixels.

    ``D_k(i)`` is the camera depth of instance ``k``'s surface point under
    pixel ``i`` at pose ``(rotvecs[k-1], translations[k-1])``; the surface
    points are held fixed at the values found by rasterization.
    """
    if len(mset) == 0:
        return 0.0
    return diff.sum(diff.softplus(od_margins(mset, rotvecs, translations)))


# ---------------------------------------------------------------- fitting

@dataclass
class FitReport:
    final_loss: float
    iterations: int
    converged: bool
    rotation_error_deg: float | None = None
    translation_error: float | None = None
    confidence: list = field(default_factory=list)
    misordered_fraction: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


@dataclass
class _PoseState:
    rotvec: np.ndarray
    trans: np.ndarray
    log_conf: np.ndarray
    opt: diff.Adam

    def transform(self, U_pick: int | None = None) -> RigidTransform:
        i = int(np.argmax(self.log_conf)) if U_pick is None else U_pick
        return RigidTransform.from_axis_angle(self.rotvec[i], self.trans[i])

    def pack(self) -> np.ndarray:
        return np.concatenate([self.rotvec.ravel(), self.trans.ravel(), self.log_conf])

    def unpack(self, theta):
        U = len(self.log_conf)
        self.rotvec = theta[: 3 * U].reshape(U, 3)
        self.trans = theta[3 * U: 6 * U].reshape(U, 3)
        self.log_conf = theta[6 * U:]


def _init_state(problem: PoseProblem, init: RigidTransform | None, lr: float, decay: float) -> _PoseState:
    init = RigidTransform.identity() if init is None else init
    U = problem.n_hypotheses
    rv = np.tile(init.axis_angle(), (U, 1))
    tr = np.tile(init.translation, (U, 1))
    return _PoseState(rv, tr, np.log(problem.confidence), diff.Adam(lr=lr, decay=decay))


def _split(theta, U):
    rv = diff.reshape(theta[: 3 * U], (U, 3))
    tr = diff.reshape(theta[3 * U: 6 * U], (U, 3))
    return rv, tr, theta[6 * U:]


def _person_loss(theta, problem, optimize_confidence, od_sets=(), k=None, others=None, gamma=0.0):
    U = problem.n_hypotheses
    rv, tr, s = _split(theta, U)
    conf = diff.exp(diff.clip(s, np.log(CONF_MIN), 0.0)) if optimize_confidence else problem.confidence
    total = loss_dp(problem, rv, tr, conf)
    if gamma > 0 and od_sets:
        rots = [rv[0] if j == k else o[0] for j, o in enumerate(others)]
        trs = [tr[0] if j == k else o[1] for j, o in enumerate(others)]
        for ms in od_sets:
            total = total + gamma * loss_od(ms, rots, trs)
    return total


def _conf_penalty(problem, theta, optimize_confidence) -> float:
    s = theta[6 * problem.n_hypotheses:] if optimize_confidence else np.log(problem.confidence)
    return float(-problem.w * np.mean(np.clip(s, np.log(CONF_MIN), 0.0)))


def fit_pose(problem: PoseProblem, init: RigidTransform | None = None, n_steps: int = 400, lr: float = 0.02,
             decay: float = 0.99, tol: float = 1e-9, optimize_confidence: bool = False):
    """Minimize the dense pose loss from ``init`` (identity by default); returns ``(transform, report)``."""
    state = _init_state(problem, init, lr, decay)
    theta = state.pack()
    it = 0
    val = np.inf
    for it in range(n_steps + 1):
        tape = diff.Tape()
        th = tape.var(theta)
        loss = _person_loss(th, problem, optimize_confidence)
        val = float(loss.value)
        if val <= tol - problem.w * np.mean(np.log(problem.confidence)) or it == n_steps:
            break
        theta = state.opt.step(theta, diff.backward(loss)[th])
    state.unpack(theta)
    T = state.transform()
    conf = [float(v) for v in np.exp(np.minimum(state.log_conf, 0.0))]
    rep = FitReport(val, it, val <= max(1e-3, tol), confidence=conf)
    if problem.gt is not None:
        rep.rotation_error_deg = float(np.degrees(geodesic_angle(T.rotation, problem.gt.rotation)))
        rep.translation_error = float(np.linalg.norm(T.translation - problem.gt.translation))
    return T, rep


def scene_misorder(meshes, transforms, cameras, gt_maps) -> tuple:
    """Misordered and total overlap pixel counts summed over views."""
    bad = tot = 0
    for cam, g in zip(cameras, gt_maps):
        ms = misordered_pixels(meshes, transforms, cam, g)
        bad += len(ms)
        tot += ms.n_overlap
    return bad, tot


def fit_scene_poses(problems, meshes, cameras, gt_maps, inits=None, gamma: float = 0.1, n_rounds: int = 30,
                    steps_per_round: int = 10, lr: float = 0.02, decay: float = 0.995,
                    optimize_confidence: bool = False, tol: float = 1e-6):
    """Joint fit of all persons: deterministic round-robin over persons, each update
    minimizing its dense pose loss plus ``gamma`` times the ordinal depth loss of
    every view (misordered pixels recomputed at the start of each person's turn).

    A person whose loss (without the confidence penalty) is at most ``tol`` is
    left untouched for that turn, so already-consistent poses do not drift.
    """
    K = len(problems)
    if not (len(meshes) == K and len(cameras) == len(gt_maps)):
        raise InvalidInputError("need one mesh per problem and one instance map per camera")
    inits = [None] * K if inits is None else inits
    states = [_init_state(p, T, lr, decay) for p, T in zip(problems, inits)]
    thetas = [s.pack() for s in states]
    losses = np.zeros(K)
    for _ in range(n_rounds):
        for k in range(K):
            for j in range(K):
                states[j].unpack(thetas[j])
            cur = [s.transform(0) for s in states]
            sets = [misordered_pixels(meshes, cur, cam, g) for cam, g in zip(cameras, gt_maps)] if gamma > 0 else []
            sets = [s for s in sets if len(s)]
            others = [(s.rotvec[0], s.trans[0]) for s in states]
            for _ in range(steps_per_round):
                tape = diff.Tape()
                th = tape.var(thetas[k])
                loss = _person_loss(th, problems[k], optimize_confidence, sets, k, others, gamma)
                losses[k] = float(loss.value)
                if losses[k] <= tol + _conf_penalty(problems[k], thetas[k], optimize_confidence):
                    break
                thetas[k] = states[k].opt.step(thetas[k], diff.backward(loss)[th])
    for s, th in zip(states, thetas):
        s.unpack(th)
    transforms = [s.transform(0) for s in states]
    bad, tot = scene_misorder(meshes, transforms, cameras, gt_maps)
    reports = []
    for k, (p, T) in enumerate(zip(problems, transforms)):
        rep = FitReport(float(losses[k]), n_rounds * steps_per_round, True,
                        confidence=[float(v) for v in np.exp(np.minimum(states[k].log_conf, 0.0))],
                        misordered_fraction=bad / tot if tot else 0.0)
        if p.gt is not None:
            rep.rotation_error_deg = float(np.degrees(geodesic_angle(T.rotation, p.gt.rotation)))
            rep.translation_error = float(np.linalg.norm(T.translation - p.gt.translation))
        reports.append(rep)
    return transforms, reports


class PoseFitter(BaseEstimator):
    """Estimator wrapper: ``fit`` solves the pose problems, ``predict`` returns the transforms."""

    def __init__(self, n_steps: int = 400, lr: float = 0.02, decay: float = 0.99, gamma: float = 0.1,
                 n_rounds: int = 30, steps_per_round: int = 10, optimize_confidence: bool = False):
        self.n_steps = n_steps
        self.lr = lr
        self.decay = decay
        self.gamma = gamma
        self.n_rounds = n_rounds
        self.steps_per_round = steps_per_round
        self.optimize_confidence = optimize_confidence

    def fit(self, problems, y=None, meshes=None, cameras=None, gt_maps=None, inits=None):
        problems = list(problems)
        if meshes is not None and self.gamma > 0:
            self.transforms_, self.reports_ = fit_scene_poses(
                problems, meshes, cameras, gt_maps, inits, self.gamma, self.n_rounds, self.steps_per_round,
                self.lr, self.decay ** (1.0 / max(self.steps_per_round, 1)), self.optimize_confidence)
        else:
            inits = [None] * len(problems) if inits is None else inits
            out = [fit_pose(p, T, self.n_steps, self.lr, self.decay, optimize_confidence=self.optimize_confidence)
                   for p, T in zip(problems, inits)]
            self.transforms_ = [o[0] for o in out]
            self.reports_ = [o[1] for o in out]
        return self

    def predict(self, problems=None) -> list:
        check_is_fitted(self, "transforms_")
        return list(self.transforms_)


# ---------------------------------------------------------------- composition and evaluation

def compose_scene(persons):
    """Concatenate ``(local mesh, transform)`` pairs into one scene mesh.

    Returns ``(mesh, records)``; each record names the instance id, its face
    range in the scene mesh and its transform.  No scale is applied.
    """
    persons = list(persons)
    placed = [m.transformed(T) for m, T in persons]
    scene, _ = concatenate(placed) if placed else (TriMesh.empty(), None)
    records, off = [], 0
    for j, (m, T) in enumerate(persons, start=1):
        records.append({"instance": j, "face_start": off, "face_count": m.n_faces,
                        "transform": T.matrix34().ravel().tolist()})
        off += m.n_faces
    return scene, records


def add_error(model_points, T_gt: RigidTransform, T_pred: RigidTransform) -> float:
    """Mean distance between model points under the two transforms."""
    x = as_points(model_points)
    return float(np.mean(np.linalg.norm(T_gt.apply(x) - T_pred.apply(x), axis=1)))


def auc_metric(errors, max_threshold: float = 0.10) -> float:
    """Area under accuracy-vs-threshold on ``[0, max_threshold]``, scaled to ``[0, 100]``.

    With accuracy ``a(s) = fraction of errors below s`` the normalized area is
    the mean of ``max(0, 1 - e / max_threshold)``, evaluated in closed form.
    """
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise InvalidInputError("empty test set")
    if max_threshold <= 0:
        raise InvalidInputError("max threshold must be positive")
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise InvalidInputError("errors must be finite and non-negative")
    return float(100.0 * np.mean(np.clip(1.0 - e / max_threshold, 0.0, 1.0)))


def auc_curve(errors, max_threshold: float = 0.10, n: int = 101):
    e = np.asarray(errors, dtype=np.float64).ravel()
    s = np.linspace(0.0, max_threshold, n)
    return s, (e[None, :] < s[:, None]).mean(axis=1)


def write_pose_report(path, transforms, adds=None, reports=None, max_threshold: float = 0.10) -> dict:
    entries = []
    for j, T in enumerate(transforms, start=1):
        e = {"instance": j, "R": T.rotation.ravel().tolist(), "t": T.translation.tolist()}
        if adds is not None:
            e["add"] = adds[j - 1]
        if reports is not None:
            e["iterations"] = reports[j - 1].iterations
            e["final_loss"] = reports[j - 1].final_loss
        entries.append(e)
    out = {"instances": entries, "auc_max_threshold": max_threshold}
    if adds is not None and len(adds):
        out["auc"] = auc_metric(adds, max_threshold)
    Path(path).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return out


def write_auc_curve(path, errors, max_threshold: float = 0.10) -> None:
    s, a = auc_curve(errors, max_threshold)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["threshold", "accuracy"])
        for x, y in zip(s, a):
            wr.writerow([f"{x:.6g}", f"{y:.6g}"])


def procrustes(x, y) -> RigidTransform:
    """Least-squares rigid transform mapping points ``x`` onto ``y`` (Kabsch)."""
    x, y = check_model_points(x), as_points(y)
    mx, my = x.mean(axis=0), y.mean(axis=0)
    U, _, Vt = np.linalg.svd((x - mx).T @ (y - my))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, my - R @ mx)


def random_pose(rng: np.random.Generator, max_angle_deg: float = 30.0, max_trans: float = 0.3) -> RigidTransform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = np.radians(rng.uniform(0.0, max_angle_deg))
    d = rng.normal(size=3)
    t = d / np.linalg.norm(d) * max_trans * rng.uniform(0.0, 1.0) ** (1 / 3)
    return RigidTransform.from_axis_angle(axis * ang, t)
