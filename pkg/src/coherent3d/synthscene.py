"""Procedural multi-person scenes: capsule figures, collision-free placement,
camera rigs, rendering and on-disk export.

Figures are modelled in a local frame with y up, feet at ``y = 0`` and the
body facing +z.  The surface is the union of capsules (head sphere, neck,
torso, clavicles, pelvis, two-segment limbs) extracted from the union's
distance field with marching cubes, which makes every figure watertight.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import Camera, RigidTransform, VoxelLattice, look_at
from .exceptions import ArenaTooSmallError, InvalidInputError
from .mesh.io import load_obj, save_obj
from .mesh.marching_cubes import marching_cubes
from .mesh.trimesh import OccupancyGrid, TriMesh
from .render import Fragments, instance_silhouette, rasterize_fragments, silhouette_to_u8, write_pfm, write_pgm

MANIFEST_SCHEMA = "coherent3d.scene/1"
JOINTS = ("shoulder_l", "shoulder_r", "elbow_l", "elbow_r", "hip_l", "hip_r", "knee_l", "knee_r")


@dataclass(frozen=True)
class FigureSpec:
    """Shape and articulation of one capsule figure; lengths in scene units, angles in radians.

    Shoulder angles lower the arm from the horizontal T-pose, elbows bend the
    forearm forward, hips swing the thigh forward and knees bend the shin
    backward.
    """

    seed: int = 0
    height: float = 1.75
    head_radius: float = 0.112
    neck_radius: float = 0.0525
    torso_radius: float = 0.14
    torso_length: float = 0.3325
    arm_radius: float = 0.056
    upper_arm_length: float = 0.2975
    forearm_length: float = 0.28
    leg_radius: float = 0.07875
    thigh_length: float = 0.42875
    shin_length: float = 0.42875
    hip_half_width: float = 0.097222
    shoulder_l: float = 0.0
    shoulder_r: float = 0.0
    elbow_l: float = 0.0
    elbow_r: float = 0.0
    hip_l: float = 0.0
    hip_r: float = 0.0
    knee_l: float = 0.0
    knee_r: float = 0.0
    angle_clamp: float = 2.0
    cells_per_height: int = 72

    @property
    def cell(self) -> float:
        return self.height / self.cells_per_height

    @classmethod
    def default(cls, height: float = 1.75, seed: int = 0, **angles) -> "FigureSpec":
        """T-pose figure with standard proportions for ``height``."""
        H = height
        cell = H / 72
        return cls(seed=seed, height=H, head_radius=0.064 * H, neck_radius=0.03 * H, torso_radius=0.08 * H,
                   torso_length=0.19 * H, arm_radius=0.032 * H, upper_arm_length=0.17 * H,
                   forearm_length=0.16 * H, leg_radius=0.045 * H, thigh_length=0.245 * H,
                   shin_length=0.245 * H, hip_half_width=round(0.055 * H / cell) * cell, **angles)

    @classmethod
    def random(cls, seed: int, height_range=(1.5, 2.0)) -> "FigureSpec":
        """Random proportions and a moderate random pose, valid by construction."""
        rng = np.random.default_rng(seed)
        for _ in range(100):
            H = float(rng.uniform(*height_range))
            base = cls.default(H, seed)
            s = lambda: float(rng.uniform(0.9, 1.1))  # noqa: E731
            spec = FigureSpec(
                seed=seed, height=H, head_radius=base.head_radius * s(), neck_radius=base.neck_radius,
                torso_radius=base.torso_radius * s(), torso_length=base.torso_length,
                arm_radius=base.arm_radius * s(), upper_arm_length=base.upper_arm_length,
                forearm_length=base.forearm_length, leg_radius=base.leg_radius * s(),
                thigh_length=base.thigh_length, shin_length=base.shin_length,
                hip_half_width=base.hip_half_width,
                shoulder_l=float(rng.uniform(0.8, 1.35)), shoulder_r=float(rng.uniform(0.8, 1.35)),
                elbow_l=float(rng.uniform(0.0, 1.0)), elbow_r=float(rng.uniform(0.0, 1.0)),
                hip_l=float(rng.uniform(-0.3, 0.4)), hip_r=float(rng.uniform(-0.3, 0.4)),
                knee_l=float(rng.uniform(0.0, 0.5)), knee_r=float(rng.uniform(0.0, 0.5)),
            )
            try:
                spec.validate()
                return spec
            except InvalidInputError:
                continue
        raise InvalidInputError(f"could not draw a valid figure for seed {seed}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "FigureSpec":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def validate(self) -> None:
        if not 1.5 <= self.height <= 2.0:
            raise InvalidInputError(f"figure height {self.height} outside [1.5, 2.0]")
        for name in JOINTS:
            if abs(getattr(self, name)) > self.angle_clamp:
                raise InvalidInputError(f"joint angle {name} exceeds clamp {self.angle_clamp}")
        for f in fields(self):
            if f.name.endswith(("radius", "length")) and getattr(self, f.name) <= 0:
                raise InvalidInputError(f"{f.name} must be positive")
        if self.neck_length < self.head_radius + self.torso_radius:
            raise InvalidInputError("proportions leave no room for the neck")
        segs = self.capsules()
        for a, b in _non_adjacent_pairs():
            (p0, p1, r0), (q0, q1, r1) = segs[a], segs[b]
            if segment_distance(p0, p1, q0, q1) < r0 + r1:
                raise InvalidInputError(f"self-intersecting articulation: {a} touches {b}")

    @property
    def hip_y(self) -> float:
        return self.leg_radius + self.shin_length + self.thigh_length

    @property
    def chest_y(self) -> float:
        return self.hip_y + self.torso_length

    @property
    def neck_length(self) -> float:
        return self.height - self.head_radius - self.chest_y

    def skeleton(self) -> dict:
        """Joint positions (and limb segment midpoints) in the local frame."""
        J = {}
        sx = self.torso_radius + self.arm_radius + 0.02
        J["pelvis"] = np.array([0.0, self.hip_y, 0.0])
        J["chest"] = np.array([0.0, self.chest_y, 0.0])
        J["head"] = np.array([0.0, self.height - self.head_radius, 0.0])
        for side, sgn in (("l", 1.0), ("r", -1.0)):
            a = getattr(self, f"shoulder_{side}")
            e = getattr(self, f"elbow_{side}")
            h = getattr(self, f"hip_{side}")
            k = getattr(self, f"knee_{side}")
            sh = np.array([sgn * sx, self.chest_y, 0.0])
            u = np.array([sgn * np.cos(a), -np.sin(a), 0.0])
            el = sh + self.upper_arm_length * u
            fdir = np.cos(e) * u + np.sin(e) * np.array([0.0, 0.0, 1.0])
            wr = el + self.forearm_length * fdir
            hp = np.array([sgn * self.hip_half_width, self.hip_y, 0.0])
            kn = hp + self.thigh_length * np.array([0.0, -np.cos(h), np.sin(h)])
            an = kn + self.shin_length * np.array([0.0, -np.cos(h - k), np.sin(h - k)])
            J.update({f"shoulder_{side}": sh, f"elbow_{side}": el, f"wrist_{side}": wr,
                      f"hip_{side}": hp, f"knee_{side}": kn, f"ankle_{side}": an,
                      f"shin_mid_{side}": 0.5 * (kn + an), f"thigh_mid_{side}": 0.5 * (hp + kn)})
        return J

    def capsules(self) -> dict:
        """Named capsules ``(p0, p1, radius)``."""
        J = self.skeleton()
        C = {
            "head": (J["head"], J["head"], self.head_radius),
            "neck": (J["chest"], J["head"], self.neck_radius),
            "torso": (J["pelvis"], J["chest"], self.torso_radius),
            "pelvis": (J["hip_l"], J["hip_r"], self.leg_radius),
        }
        for s in ("l", "r"):
            C[f"clavicle_{s}"] = (J["chest"], J[f"shoulder_{s}"], self.arm_radius)
            C[f"upper_arm_{s}"] = (J[f"shoulder_{s}"], J[f"elbow_{s}"], self.arm_radius)
            C[f"forearm_{s}"] = (J[f"elbow_{s}"], J[f"wrist_{s}"], self.arm_radius)
            C[f"thigh_{s}"] = (J[f"hip_{s}"], J[f"knee_{s}"], self.leg_radius)
            C[f"shin_{s}"] = (J[f"knee_{s}"], J[f"ankle_{s}"], self.leg_radius)
        return C


_ADJACENT = {
    frozenset(p) for p in [
        ("head", "neck"), ("neck", "torso"), ("torso", "pelvis"),
        ("neck", "clavicle_l"), ("neck", "clavicle_r"), ("torso", "clavicle_l"), ("torso", "clavicle_r"),
        ("clavicle_l", "clavicle_r"), ("clavicle_l", "upper_arm_l"), ("clavicle_r", "upper_arm_r"),
        ("upper_arm_l", "forearm_l"), ("upper_arm_r", "forearm_r"),
        ("pelvis", "thigh_l"), ("pelvis", "thigh_r"), ("torso", "thigh_l"), ("torso", "thigh_r"),
        ("thigh_l", "shin_l"), ("thigh_r", "shin_r"),
    ]
}


def _non_adjacent_pairs():
    names = list(FigureSpec().capsules())
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if frozenset((a, b)) not in _ADJACENT:
                yield a, b


def segment_distance(p0, p1, q0, q1) -> float:
    """Closest distance between segments ``p0p1`` and ``q0q1``."""
    d1, d2, r = p1 - p0, q1 - q0, p0 - q0
    a, e, f = d1 @ d1, d2 @ d2, d2 @ r
    if a <= 1e-15 and e <= 1e-15:
        return float(np.linalg.norm(r))
    if a <= 1e-15:
        s, t = 0.0, np.clip(f / e, 0.0, 1.0)
    else:
        c = d1 @ r
        if e <= 1e-15:
            t, s = 0.0, np.clip(-c / a, 0.0, 1.0)
        else:
            b = d1 @ d2
            den = a * e - b * b
            s = np.clip((b * f - c * e) / den, 0.0, 1.0) if den > 1e-15 else 0.0
            t = (b * s + f) / e
            if t < 0:
                t, s = 0.0, np.clip(-c / a, 0.0, 1.0)
            elif t > 1:
                t, s = 1.0, np.clip((b - c) / a, 0.0, 1.0)
    return float(np.linalg.norm(p0 + d1 * s - (q0 + d2 * t)))


def _capsule_sdf(p, a, b, r):
    ab = b - a
    denom = ab @ ab
    if denom < 1e-15:
        return np.linalg.norm(p - a, axis=1) - r
    t = np.clip((p - a) @ ab / denom, 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1) - r


def generate_figure(spec: FigureSpec) -> TriMesh:
    """Watertight union-of-capsules mesh for ``spec``; deterministic."""
    spec.validate()
    caps = list(spec.capsules().values())
    h = spec.cell
    pts = np.array([c for p0, p1, _ in caps for c in (p0, p1)])
    rmax = max(r for *_, r in caps)
    lo = pts.min(axis=0) - rmax - 2 * h
    hi = pts.max(axis=0) + rmax + 2 * h
    # x and z nodes on multiples of h; y nodes half a cell off, so the head
    # top (y = height) and the soles (y = 0) fall mid-edge
    ilo = np.floor(lo / h).astype(int)
    ihi = np.ceil(hi / h).astype(int)
    origin = np.array([ilo[0] * h, (ilo[1] - 0.5) * h, ilo[2] * h])
    shape = tuple(int(n) for n in (ihi - ilo + 1))
    lattice = VoxelLattice(origin, h, shape)
    nodes = lattice.nodes()
    sdf = np.full(len(nodes), np.inf)
    for p0, p1, r in caps:
        sdf = np.minimum(sdf, _capsule_sdf(nodes, p0, p1, r))
    field = np.clip(0.5 - sdf / (4 * h), 0.0, 1.0)
    mesh = marching_cubes(OccupancyGrid(lattice, field.reshape(shape)), 0.5)
    if mesh.boundary_clipped or not mesh.is_watertight():
        raise InvalidInputError("figure surface is not closed")
    return mesh


def horizontal_radius(mesh: TriMesh) -> float:
    """Radius of the vertical cylinder about the local y axis bounding ``mesh``."""
    return float(np.max(np.hypot(mesh.vertices[:, 0], mesh.vertices[:, 2])))


def place_figures(figures, arena=(-2.0, 2.0, -2.0, 2.0), seed: int = 0, count: int | None = None,
                  margin: float = 0.05, budget: int = 10_000) -> list:
    """Ground-plane positions and yaws with pairwise-disjoint bounding cylinders.

    ``arena`` is ``(xmin, xmax, zmin, zmax)``.  Raises
    :class:`ArenaTooSmallError` when ``budget`` rejection tries run out.
    """
    figures = list(figures)
    count = len(figures) if count is None else count
    if count > len(figures):
        raise InvalidInputError("count exceeds number of figures")
    rng = np.random.default_rng(seed)
    xmin, xmax, zmin, zmax = arena
    placed, centers, radii = [], [], []
    tries = 0
    for mesh in figures[:count]:
        r = horizontal_radius(mesh)
        while True:
            tries += 1
            if tries > budget:
                raise ArenaTooSmallError(f"placed {len(placed)} of {count} figures within {budget} tries")
            x = rng.uniform(xmin + r, xmax - r) if xmax - xmin > 2 * r else np.inf
            z = rng.uniform(zmin + r, zmax - r) if zmax - zmin > 2 * r else np.inf
            yaw = rng.uniform(0.0, 2 * np.pi)
            if not (np.isfinite(x) and np.isfinite(z)):
                continue
            c = np.array([x, z])
            if all(np.linalg.norm(c - c2) > r + r2 + margin for c2, r2 in zip(centers, radii)):
                break
        centers.append(c)
        radii.append(r)
        placed.append(RigidTransform.from_axis_angle([0.0, yaw, 0.0], [x, 0.0, z]))
    return placed


def build_camera_rig(n_views: int, radius: float = 6.0, height: float = 1.2, target=(0.0, 0.9, 0.0),
                     image_size=(128, 128), fov_deg: float = 45.0) -> list:
    """``n_views`` cameras equally spaced in azimuth (starting on +z) looking at ``target``."""
    if n_views < 1:
        raise InvalidInputError("need at least one view")
    target = np.asarray(target, dtype=np.float64)
    w, h = image_size
    cams = []
    for k in range(n_views):
        az = 2 * np.pi * k / n_views
        eye = np.array([target[0] + radius * np.sin(az), height, target[2] + radius * np.cos(az)])
        cams.append(Camera.from_fov(w, h, fov_deg, look_at(eye, target)))
    return cams


def camera_azimuth(cam: Camera, target=(0.0, 0.9, 0.0)) -> float:
    c = cam.center - np.asarray(target)
    return float(np.degrees(np.arctan2(c[0], c[2])) % 360.0)


@dataclass
class SceneSpec:
    scene_id: str
    seed: int
    figures: list
    transforms: list
    cameras: list
    rig: dict = field(default_factory=dict)
    split: str = "train"

    def __post_init__(self):
        if len(self.figures) != len(self.transforms):
            raise InvalidInputError("one transform per figure required")
        if not 2 <= len(self.figures) <= 10:
            raise InvalidInputError(f"scene needs 2..10 figures, got {len(self.figures)}")
        if not self.cameras:
            raise InvalidInputError("scene needs at least one camera")

    @property
    def n_persons(self) -> int:
        return len(self.figures)

    def meshes(self) -> list:
        return [generate_figure(f) for f in self.figures]


@dataclass
class RenderedView:
    camera: Camera
    depth: np.ndarray
    instance: np.ndarray
    intensity: np.ndarray
    n_instances: int
    fragments: Fragments | None = None

    def silhouette(self, n: int) -> np.ndarray:
        return instance_silhouette(self.instance, n, self.n_instances)

    def visibility(self, n: int) -> np.ndarray:
        if 1 <= n <= self.n_instances:
            return self.instance == n
        return instance_silhouette(self.instance, n, self.n_instances)


def generate_scene(scene_id, seed: int, n_persons: int = 3, n_views: int = 4, arena=(-2.0, 2.0, -2.0, 2.0),
                   rig: dict | None = None, split: str = "train") -> SceneSpec:
    rig = dict(radius=6.0, height=1.2, target=[0.0, 0.9, 0.0], image_size=[128, 128], fov_deg=45.0) | (rig or {})
    rng = np.random.default_rng(seed)
    specs = [FigureSpec.random(int(rng.integers(2**31))) for _ in range(n_persons)]
    meshes = [generate_figure(s) for s in specs]
    transforms = place_figures(meshes, arena, seed=int(rng.integers(2**31)))
    cams = build_camera_rig(n_views, rig["radius"], rig["height"], rig["target"], tuple(rig["image_size"]),
                            rig["fov_deg"])
    return SceneSpec(str(scene_id), int(seed), specs, transforms, cams, rig, split)


def render_scene(scene: SceneSpec, meshes=None, keep_fragments: bool = False) -> list:
    meshes = scene.meshes() if meshes is None else meshes
    items = list(zip(meshes, scene.transforms))
    views = []
    for cam in scene.cameras:
        fr = rasterize_fragments(items, cam)
        views.append(RenderedView(cam, fr.depth, fr.instance, fr.intensity, scene.n_persons,
                                  fr if keep_fragments else None))
    return views


def scene_manifest(scene: SceneSpec) -> dict:
    n = scene.n_persons
    return {
        "schema": MANIFEST_SCHEMA,
        "scene_id": scene.scene_id,
        "seed": scene.seed,
        "split": scene.split,
        "units": "meter",
        "rig": scene.rig,
        "cameras": [c.to_dict() for c in scene.cameras],
        "persons": [
            {"id": j + 1, "obj": f"person_{j + 1}.obj", "figure": f.to_dict(),
             "transform": T.matrix34().ravel().tolist()}
            for j, (f, T) in enumerate(zip(scene.figures, scene.transforms))
        ],
        "views": [
            {"index": k, "depth": f"view_{k}.pfm", "instance": f"view_{k}.pgm",
             "intensity": f"view_{k}_intensity.pgm",
             "silhouettes": [f"view_{k}_sil_{j}.pgm" for j in range(1, n + 1)]}
            for k in range(len(scene.cameras))
        ],
    }


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def export_scene(scene: SceneSpec, out_dir, meshes=None) -> dict:
    """Write one scene under ``out_dir/scenes/<id>/`` and return its record."""
    root = Path(out_dir) / "scenes" / scene.scene_id
    try:
        root.mkdir(parents=True, exist_ok=True)
        meshes = scene.meshes() if meshes is None else meshes
        for j, m in enumerate(meshes, start=1):
            save_obj(m, root / f"person_{j}.obj")
        for k, view in enumerate(render_scene(scene, meshes)):
            write_pfm(root / f"view_{k}.pfm", view.depth)
            write_pgm(root / f"view_{k}.pgm", view.instance.astype(np.uint8))
            write_pgm(root / f"view_{k}_intensity.pgm", silhouette_to_u8(view.intensity))
            for j in range(1, scene.n_persons + 1):
                write_pgm(root / f"view_{k}_sil_{j}.pgm", silhouette_to_u8(view.silhouette(j)))
        manifest = scene_manifest(scene)
        dump_json(manifest, root / "manifest.json")
    except OSError as e:
        raise OSError(f"failed writing scene to {root}: {e}") from e
    return {"scene_id": scene.scene_id, "path": str(root), "split": scene.split, "n_persons": scene.n_persons}


def load_scene(scene_dir) -> SceneSpec:
    m = json.loads((Path(scene_dir) / "manifest.json").read_text())
    if m.get("schema") != MANIFEST_SCHEMA:
        raise InvalidInputError(f"{scene_dir}: unknown manifest schema {m.get('schema')!r}")
    persons = sorted(m["persons"], key=lambda p: p["id"])
    return SceneSpec(
        m["scene_id"], m["seed"], [FigureSpec.from_dict(p["figure"]) for p in persons],
        [RigidTransform.from_matrix34(p["transform"]) for p in persons],
        [Camera.from_dict(c) for c in m["cameras"]], m.get("rig", {}), m.get("split", "train"))


def load_scene_meshes(scene_dir) -> list:
    m = json.loads((Path(scene_dir) / "manifest.json").read_text())
    return [load_obj(Path(scene_dir) / p["obj"]) for p in sorted(m["persons"], key=lambda p: p["id"])]


def load_views(scene_dir) -> list:
    """Rendered views as stored on disk (depth, instance map, intensity)."""
    from .render import read_pfm, read_pgm

    scene_dir = Path(scene_dir)
    m = json.loads((scene_dir / "manifest.json").read_text())
    n = len(m["persons"])
    views = []
    for v, c in zip(m["views"], m["cameras"]):
        views.append(RenderedView(Camera.from_dict(c), read_pfm(scene_dir / v["depth"]),
                                  read_pgm(scene_dir / v["instance"]).astype(np.int64),
                                  read_pgm(scene_dir / v["intensity"]) / 255.0, n))
    return views


def split_scene_ids(ids, train_fraction: float = 0.7, seed: int = 0) -> dict:
    """Deterministic disjoint train/test assignment by scene id."""
    ids = list(ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(train_fraction * len(ids)))
    return {ids[i]: ("train" if r < n_train else "test") for r, i in enumerate(order)}
