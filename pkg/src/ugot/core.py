"""Domain types, validation and geometry helpers shared across the package."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

QUAT_KEEP_TOL = 1e-6
QUAT_REJECT_TOL = 1e-3


class ValidationError(ValueError):
    """Raised when an input violates a domain invariant."""


class ConfigError(ValueError):
    """Raised for invalid configuration values (bad K, unknown preset, ...)."""


class NumericalError(FloatingPointError):
    """Raised when a computation produces non-finite values."""

    def __init__(self, message, term=None, pixel=None):
        super().__init__(message)
        self.term = term
        self.pixel = pixel


def _vec(values, n, name):
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.shape != (n,):
        raise ValidationError(f"{name} must have {n} components, got {arr.shape[0]}")
    return tuple(float(v) for v in arr)


@dataclass(frozen=True)
class GaussianPrimitive:
    """One anisotropic 3D Gaussian. Rotation is a (w, x, y, z) quaternion."""

    position: tuple
    scale: tuple
    rotation: tuple
    color: tuple
    opacity: float

    def __post_init__(self):
        object.__setattr__(self, "position", _vec(self.position, 3, "position"))
        object.__setattr__(self, "scale", _vec(self.scale, 3, "scale"))
        object.__setattr__(self, "rotation", _vec(self.rotation, 4, "rotation"))
        object.__setattr__(self, "color", _vec(self.color, 3, "color"))
        object.__setattr__(self, "opacity", float(self.opacity))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a world-to-camera rigid pose.

    Camera space looks down +z; pixel (row i, col j) has its center at
    (j + 0.5, i + 0.5) in image coordinates.
    """

    rotation: np.ndarray
    translation: np.ndarray
    focal: float
    principal_point: tuple
    width: int
    height: int
    near: float = 0.1
    far: float = 10.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "principal_point", _vec(self.principal_point, 2, "principal_point"))
        object.__setattr__(self, "focal", float(self.focal))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "near", float(self.near))
        object.__setattr__(self, "far", float(self.far))
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("camera width and height must be positive")
        if not 0 < self.near < self.far:
            raise ValidationError(f"need 0 < near < far, got near={self.near} far={self.far}")
        if self.focal <= 0:
            raise ValidationError("focal length must be positive")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValidationError("camera rotation must be orthonormal with det=+1")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0), **kwargs):
        """Build a camera at ``eye`` looking at ``target`` (image y points down)."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(rotation=R, translation=-R @ eye, **kwargs)

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def to_dict(self):
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "focal": self.focal,
            "principal_point": list(self.principal_point),
            "width": self.width,
            "height": self.height,
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_dict(cls, d):
        _reject_unknown(d, {"rotation", "translation", "focal", "principal_point",
                            "width", "height", "near", "far"}, "camera")
        return cls(**d)


@dataclass(frozen=True)
class Scene:
    gaussians: tuple
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "gaussians", tuple(self.gaussians))
        object.__setattr__(self, "background", _vec(self.background, 3, "background"))

    def __len__(self):
        return len(self.gaussians)

    def to_params(self, dtype=torch.float64):
        return GaussianParams.from_scene(self, dtype=dtype)


@dataclass
class GaussianParams:
    """Column-major tensor view of a scene used by the differentiable paths."""

    position: torch.Tensor  # (N, 3)
    scale: torch.Tensor  # (N, 3)
    rotation: torch.Tensor  # (N, 4)
    color: torch.Tensor  # (N, 3)
    opacity: torch.Tensor  # (N,)
    background: torch.Tensor = field(default_factory=lambda: torch.zeros(3, dtype=torch.float64))

    GROUPS = ("position", "scale", "rotation", "color", "opacity")

    @classmethod
    def from_scene(cls, scene, dtype=torch.float64):
        if len(scene) == 0:
            return cls(*(torch.zeros((0, k), dtype=dtype) for k in (3, 3, 4, 3)),
                       torch.zeros(0, dtype=dtype), torch.tensor(scene.background, dtype=dtype))
        gs = scene.gaussians
        rot = np.array([ingest_quaternion(g.rotation) for g in gs])
        return cls(
            position=torch.tensor([g.position for g in gs], dtype=dtype),
            scale=torch.tensor([g.scale for g in gs], dtype=dtype),
            rotation=torch.tensor(rot, dtype=dtype),
            color=torch.tensor([g.color for g in gs], dtype=dtype),
            opacity=torch.tensor([g.opacity for g in gs], dtype=dtype),
            background=torch.tensor(scene.background, dtype=dtype),
        )

    def to_scene(self):
        arrays = [getattr(self, k).detach().cpu().double().numpy() for k in self.GROUPS]
        gs = [GaussianPrimitive(*(a[i] for a in arrays)) for i in range(len(self))]
        return Scene(gs, tuple(self.background.detach().cpu().double().tolist()))

    def __len__(self):
        return self.position.shape[0]

    def tensors(self):
        return [getattr(self, k) for k in self.GROUPS]

    def clone(self, requires_grad=False):
        out = GaussianParams(*(t.detach().clone() for t in self.tensors()),
                             background=self.background.detach().clone())
        if requires_grad:
            for t in out.tensors():
                t.requires_grad_(True)
        return out


def ingest_quaternion(q):
    """Return ``q`` unchanged if unit within 1e-6, renormalized if within 1e-3."""
    q = np.asarray(q, dtype=np.float64)
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) <= QUAT_KEEP_TOL:
        return q
    if abs(norm - 1.0) <= QUAT_REJECT_TOL:
        return q / norm
    raise ValidationError(f"quaternion {q.tolist()} has norm {norm:.6g}, not unit")


def quaternion_to_matrix(q):
    """Rotation matrix of a (w, x, y, z) quaternion; works on numpy or torch (..., 4)."""
    if isinstance(q, torch.Tensor):
        q = q / q.norm(dim=-1, keepdim=True)
        w, x, y, z = q.unbind(-1)
        rows = [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
                2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
                2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]
        return torch.stack(rows, -1).reshape(*q.shape[:-1], 3, 3)
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quaternion(R):
    """(w, x, y, z) unit quaternion of a proper rotation matrix, with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def covariance_from_scale_rotation(scale, rotation):
    """Sigma = R diag(s^2) R^T for one Gaussian (numpy) or a batch (torch, (N, 3)/(N, 4))."""
    if isinstance(scale, torch.Tensor):
        M = quaternion_to_matrix(rotation) * scale[..., None, :]
        return M @ M.transpose(-1, -2)
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0):
        raise ValidationError("scale components must be positive")
    R = quaternion_to_matrix(ingest_quaternion(rotation))
    M = R * scale[None, :]
    return M @ M.T


@dataclass(frozen=True)
class Violation:
    index: int
    field: str
    message: str


def validate_scene(scene: Scene) -> list:
    """Every invariant violation in ``scene``; an empty list means ok."""
    out = []
    if not (all(0.0 <= c <= 1.0 for c in scene.background)):
        out.append(Violation(-1, "background", "background color outside [0, 1]"))
    for i, g in enumerate(scene.gaussians):
        values = g.position + g.scale + g.rotation + g.color + (g.opacity,)
        if not all(np.isfinite(values)):
            out.append(Violation(i, "finite", "non-finite parameter"))
            continue
        norm = float(np.linalg.norm(g.rotation))
        if abs(norm - 1.0) > QUAT_REJECT_TOL:
            out.append(Violation(i, "rotation", f"quaternion norm {norm:.6g} is not 1"))
        if min(g.scale) <= 0:
            out.append(Violation(i, "scale", "scale components must be > 0"))
        if not 0.0 <= g.opacity <= 1.0:
            out.append(Violation(i, "opacity", f"opacity {g.opacity} outside [0, 1]"))
        if not all(0.0 <= c <= 1.0 for c in g.color):
            out.append(Violation(i, "color", "color outside [0, 1]"))
    return out


def check_image(img, channels=None, name="image"):
    """Validate an (H, W) or (H, W, C) image-like array and return it as float64."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise ValidationError(f"{name} must be 2D or 3D, got shape {arr.shape}")
    c = 1 if arr.ndim == 2 else arr.shape[2]
    if channels is not None and c != channels:
        raise ValidationError(f"{name} must have {channels} channel(s), got {c}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def _reject_unknown(d, allowed, what):
    if not isinstance(d, dict):
        raise ValidationError(f"{what} must be a JSON object")
    extra = set(d) - set(allowed)
    if extra:
        raise ValidationError(f"unknown {what} field(s): {sorted(extra)}")
    missing = set(allowed) - set(d)
    return missing


_GAUSSIAN_FIELDS = ("position", "scale", "rotation", "color", "opacity")


def scene_to_dict(scene: Scene) -> dict:
    return {
        "background": list(scene.background),
        "gaussians": [
            {"position": list(g.position), "scale": list(g.scale), "rotation": list(g.rotation),
             "color": list(g.color), "opacity": g.opacity}
            for g in scene.gaussians
        ],
    }


def scene_from_dict(d) -> Scene:
    missing = _reject_unknown(d, {"background", "gaussians"}, "scene")
    if missing:
        raise ValidationError(f"missing scene field(s): {sorted(missing)}")
    gs = []
    for i, gd in enumerate(d["gaussians"]):
        missing = _reject_unknown(gd, _GAUSSIAN_FIELDS, f"gaussian[{i}]")
        if missing:
            raise ValidationError(f"gaussian[{i}] missing field(s): {sorted(missing)}")
        rot = ingest_quaternion(gd["rotation"])
        gs.append(GaussianPrimitive(gd["position"], gd["scale"], rot, gd["color"], gd["opacity"]))
    return Scene(gs, d["background"])


def scene_to_json(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), indent=1)


def scene_from_json(text: str) -> Scene:
    return scene_from_dict(json.loads(text))


def cameras_to_json(cameras: Iterable[Camera], split: Sequence[str] | None = None) -> str:
    cams = [c.to_dict() for c in cameras]
    if split is not None:
        for c, s in zip(cams, split):
            c["split"] = s
    return json.dumps({"cameras": cams}, indent=1)


def cameras_from_json(text: str):
    """Return (cameras, splits) from a camera JSON document."""
    d = json.loads(text)
    _reject_unknown(d, {"cameras"}, "camera file")
    cams, splits = [], []
    for c in d["cameras"]:
        c = dict(c)
        splits.append(c.pop("split", "train"))
        cams.append(Camera.from_dict(c))
    return cams, splits
