"""Geometric primitives: rigid transforms, pinhole cameras, voxel lattices.

Points are plain ``numpy`` arrays of shape ``(3,)`` or ``(N, 3)``; one scene
unit is one meter.  Cameras follow the computer-vision convention: x right,
y down, z forward (the camera looks down +z).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import BehindCameraError, InvalidInputError, OutOfRangeError

BEHIND_EPS = 1e-9


def as_points(p) -> np.ndarray:
    """Coerce to a float64 ``(N, 3)`` array and check finiteness."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidInputError(f"expected points of shape (N, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("points must be finite")
    return arr


def skew(w) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_to_matrix(w) -> np.ndarray:
    """Rodrigues map from an axis-angle 3-vector to a rotation matrix."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < 1e-6:
        # second-order series; exact to double precision at this size
        a = 1.0 - theta**2 / 6.0
        b = 0.5 - theta**2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * (K @ K)


def matrix_to_quaternion(R) -> np.ndarray:
    """Rotation matrix to unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_axis_angle(R) -> np.ndarray:
    """Inverse Rodrigues map; the returned angle lies in ``[0, pi]``."""
    q = matrix_to_quaternion(R)
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-15:
        return np.zeros(3)
    theta = 2.0 * np.arctan2(s, q[0])
    return v / s * theta


def geodesic_angle(R1, R2) -> float:
    """Angle in radians of the relative rotation ``R1^T R2``."""
    return float(np.linalg.norm(matrix_to_axis_angle(np.asarray(R1).T @ np.asarray(R2))))


def orthonormalize(R) -> np.ndarray:
    """Project onto SO(3) via SVD."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True)
class RigidTransform:
    """``x -> R x + t``; ``compose(a, b)`` applies ``b`` first."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidInputError("transform must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvalidInputError("rotation is not special-orthogonal")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_axis_angle(cls, w, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(axis_angle_to_matrix(w), t)

    @classmethod
    def from_quaternion(cls, q, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(quaternion_to_matrix(q), t)

    @classmethod
    def from_matrix34(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=np.float64).reshape(3, 4)
        try:
            return cls(M[:, :3], M[:, 3])
        except InvalidInputError:
            return cls(orthonormalize(M[:, :3]), M[:, 3])

    def matrix34(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    def quaternion(self) -> np.ndarray:
        return matrix_to_quaternion(self.rotation)

    def axis_angle(self) -> np.ndarray:
        return matrix_to_axis_angle(self.rotation)

    def apply(self, p) -> np.ndarray:
        """Transform a point ``(3,)`` or a point set ``(N, 3)``."""
        arr = np.asarray(p, dtype=np.float64)
        out = arr.reshape(-1, 3) @ self.rotation.T + self.translation
        return out.reshape(arr.shape)

    def apply_vectors(self, v) -> np.ndarray:
        arr = np.asarray(v, dtype=np.float64)
        return (arr.reshape(-1, 3) @ self.rotation.T).reshape(arr.shape)

    def compose(self, other: "RigidTransform", renormalize: bool = False) -> "RigidTransform":
        R = self.rotation @ other.rotation
        if renormalize:
            R = orthonormalize(R)
        return RigidTransform(R, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def to_dict(self) -> dict:
        return {"matrix34": self.matrix34().ravel().tolist()}

    @classmethod
    def from_dict(cls, d) -> "RigidTransform":
        return cls.from_matrix34(np.asarray(d["matrix34"], dtype=np.float64))


def transform_point(T: RigidTransform, p) -> np.ndarray:
    return T.apply(p)


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> RigidTransform:
    """World-to-camera transform for a camera at ``eye`` looking at ``target``.

    ``up`` is the world up direction; image y points along ``-up``.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(right)
    if n < 1e-12:
        raise InvalidInputError("up vector is parallel to the viewing direction")
    right /= n
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])  # rows: camera axes in world coordinates
    return RigidTransform(orthonormalize(R), -R @ eye)


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError("image size must be positive")

    @classmethod
    def from_fov(cls, width, height, fov_deg, extrinsics=None) -> "Camera":
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, int(width), int(height),
                   extrinsics if extrinsics is not None else RigidTransform())

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return self.extrinsics.inverse().translation

    def to_camera(self, p) -> np.ndarray:
        return self.extrinsics.apply(p)

    def project(self, p, check: bool = True):
        """Return ``(u, v, z)`` arrays for world points ``p``.

        With ``check`` set, any point at camera depth ``<= 1e-9`` raises
        :class:`BehindCameraError`; otherwise those entries come back as NaN.
        """
        pc = self.to_camera(as_points(p))
        z = pc[:, 2]
        behind = z <= BEHIND_EPS
        if check and np.any(behind):
            raise BehindCameraError(f"{int(behind.sum())} point(s) behind the camera")
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(behind, np.nan, self.fx * pc[:, 0] / z + self.cx)
            v = np.where(behind, np.nan, self.fy * pc[:, 1] / z + self.cy)
        return u, v, z

    def unproject(self, u, v, z) -> np.ndarray:
        u, v, z = (np.asarray(a, dtype=np.float64) for a in (u, v, z))
        pc = np.stack([(u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z], axis=-1)
        return self.extrinsics.inverse().apply(pc)

    def pixel_rays(self):
        """World-space origin and unit directions through every pixel center, row-major."""
        js, is_ = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        d = np.stack([(js - self.cx) / self.fx, (is_ - self.cy) / self.fy, np.ones_like(js)], -1).reshape(-1, 3)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        inv = self.extrinsics.inverse()
        return inv.translation, inv.apply_vectors(d)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "extrinsics": self.extrinsics.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), RigidTransform.from_dict(d["extrinsics"]))


def project_point(cam: Camera, p):
    """Project a single world point; returns ``(u, v, z)`` floats."""
    u, v, z = cam.project(p)
    return float(u[0]), float(v[0]), float(z[0])


@dataclass(frozen=True)
class VoxelLattice:
    """Regular grid of sample nodes ``origin + index * cell``.

    Values of an occupancy grid live on the nodes; each node stands for the
    voxel centered on it.
    """

    origin: np.ndarray
    cell: np.ndarray
    shape: tuple

    def __post_init__(self):
        o = np.array(self.origin, dtype=np.float64).reshape(3)
        c = np.broadcast_to(np.asarray(self.cell, dtype=np.float64), (3,)).copy()
        s = tuple(int(n) for n in np.broadcast_to(np.asarray(self.shape), (3,)))
        if np.any(c <= 0):
            raise InvalidInputError("cell size must be positive")
        if min(s) < 2:
            raise InvalidInputError("lattice resolution must be >= 2 per axis")
        o.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "cell", c)
        object.__setattr__(self, "shape", s)

    @classmethod
    def from_bounds(cls, lo, hi, shape) -> "VoxelLattice":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        shape = np.broadcast_to(np.asarray(shape), (3,))
        return cls(lo, (hi - lo) / (shape - 1), tuple(shape))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.cell * (np.asarray(self.shape) - 1)

    def bounds(self):
        return self.origin.copy(), self.upper

    def index_to_world(self, idx) -> np.ndarray:
        return self.origin + np.asarray(idx, dtype=np.float64) * self.cell

    def world_to_index(self, p) -> np.ndarray:
        """Continuous lattice coordinates of world points."""
        return (np.asarray(p, dtype=np.float64) - self.origin) / self.cell

    def nodes(self) -> np.ndarray:
        """All node positions, ``(size, 3)``, C-order over ``shape``."""
        axes = [self.origin[a] + self.cell[a] * np.arange(self.shape[a]) for a in range(3)]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack(g, -1).reshape(-1, 3)

    def contains(self, p, tol: float = 1e-12) -> np.ndarray:
        q = self.world_to_index(p)
        hi = np.asarray(self.shape) - 1
        return np.all((q >= -tol) & (q <= hi + tol), axis=-1)

    def coarsen(self, factor: int = 2) -> "VoxelLattice":
        """Lattice whose nodes sit at the centers of ``factor``-wide node blocks."""
        shape = tuple(n // factor for n in self.shape)
        return VoxelLattice(self.origin + 0.5 * (factor - 1) * self.cell, self.cell * factor, shape)

    def refine(self, factor: int = 2) -> "VoxelLattice":
        shape = tuple((n - 1) * factor + 1 for n in self.shape)
        return VoxelLattice(self.origin, self.cell / factor, shape)

    def same_as(self, other: "VoxelLattice") -> bool:
        return (self.shape == other.shape and np.allclose(self.origin, other.origin, atol=1e-12)
                and np.allclose(self.cell, other.cell, atol=1e-12))

    def to_dict(self) -> dict:
        return {"origin": self.origin.tolist(), "cell": self.cell.tolist(), "shape": list(self.shape)}

    @classmethod
    def from_dict(cls, d) -> "VoxelLattice":
        return cls(d["origin"], d["cell"], tuple(d["shape"]))


def trilinear_weights(lattice: VoxelLattice, p, mode: str = "clamp"):
    """Corner indices and weights for trilinear sampling.

    Returns ``(idx, w)`` with shapes ``(N, 8)``; ``idx`` are flat C-order node
    indices.  ``mode`` is ``"clamp"`` (clamp coordinates to the lattice box),
    ``"zero"`` (corners outside the lattice contribute zero) or ``"error"``.
    """
    q = lattice.world_to_index(as_points(p))
    shape = np.asarray(lattice.shape)
    hi = shape - 1
    if mode == "error":
        if np.any(q < -1e-9) or np.any(q > hi + 1e-9):
            raise OutOfRangeError("sample point outside lattice bounds")
        q = np.clip(q, 0, hi)
    elif mode == "clamp":
        q = np.clip(q, 0, hi)
    elif mode != "zero":
        raise InvalidInputError(f"unknown out-of-bounds mode {mode!r}")
    base = np.floor(q).astype(np.int64)
    if mode != "zero":
        base = np.minimum(base, hi - 1)
    f = q - base
    idx = np.empty((len(q), 8), dtype=np.int64)
    w = np.empty((len(q), 8))
    valid = np.ones((len(q), 8), dtype=bool)
    k = 0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                c = base + (dx, dy, dz)
                w[:, k] = ((f[:, 0] if dx else 1 - f[:, 0]) * (f[:, 1] if dy else 1 - f[:, 1])
                           * (f[:, 2] if dz else 1 - f[:, 2]))
                inside = np.all((c >= 0) & (c <= hi), axis=1)
                valid[:, k] = inside
                c = np.clip(c, 0, hi)
                idx[:, k] = (c[:, 0] * shape[1] + c[:, 1]) * shape[2] + c[:, 2]
                k += 1
    w = np.where(valid, w, 0.0)
    return idx, w


def trilinear_sample(lattice: VoxelLattice, field, p, mode: str = "clamp") -> np.ndarray:
    """Trilinearly interpolate ``field`` (shaped like ``lattice``) at world points ``p``."""
    values = np.asarray(field, dtype=np.float64)
    if values.shape != lattice.shape:
        raise InvalidInputError(f"field shape {values.shape} does not match lattice {lattice.shape}")
    idx, w = trilinear_weights(lattice, p, mode)
    out = np.sum(values.ravel()[idx] * w, axis=1)
    return out if np.ndim(p) > 1 else out[0]


def bilinear_weights(height: int, width: int, u, v, mode: str = "clamp"):
    """Bilinear weights for sampling an image at continuous pixel coordinates.

    Pixel ``(row, col)`` is centered at ``(col + 0.5, row + 0.5)``.
    """
    x = np.asarray(u, dtype=np.float64) - 0.5
    y = np.asarray(v, dtype=np.float64) - 0.5
    if mode == "clamp":
        x = np.clip(x, 0, width - 1)
        y = np.clip(y, 0, height - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    if mode == "clamp":
        x0 = np.minimum(x0, max(width - 2, 0))
        y0 = np.minimum(y0, max(height - 2, 0))
    fx = x - x0
    fy = y - y0
    idx = np.empty(x.shape + (4,), dtype=np.int64)
    w = np.empty(x.shape + (4,))
    k = 0
    for dy in (0, 1):
        for dx in (0, 1):
            cx = x0 + dx
            cy = y0 + dy
            wk = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
            ok = (cx >= 0) & (cx < width) & (cy >= 0) & (cy < height)
            w[..., k] = np.where(ok, wk, 0.0)
            idx[..., k] = np.clip(cy, 0, height - 1) * width + np.clip(cx, 0, width - 1)
            k += 1
    return idx, w


def bilinear_sample(image, u, v, mode: str = "clamp") -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    idx, w = bilinear_weights(img.shape[0], img.shape[1], u, v, mode)
    return np.sum(img.ravel()[idx] * w, axis=-1)
