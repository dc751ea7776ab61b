"""Synthetic ground truth, depth-prior corruption and scale/shift alignment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import Camera, ConfigError, GaussianPrimitive, Scene, ValidationError, matrix_to_quaternion

PRESETS = ("boxes", "spheres", "layers")


@dataclass(frozen=True)
class NoiseRegion:
    rect: tuple  # (x0, y0, x1, y1) as fractions of the image width/height
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "rect", tuple(float(v) for v in self.rect))
        if len(self.rect) != 4:
            raise ConfigError("noise region rect needs 4 values (x0, y0, x1, y1)")
        if self.sigma < 0:
            raise ConfigError("noise sigma must be >= 0")

    def mask(self, height, width):
        x0, y0, x1, y1 = self.rect
        xs = (np.arange(width) + 0.5) / width
        ys = (np.arange(height) + 0.5) / height
        return ((ys >= y0) & (ys < y1))[:, None] & ((xs >= x0) & (xs < x1))[None, :]


@dataclass(frozen=True)
class NoiseProfile:
    """Spatially varying depth-prior error, in far-normalized depth units."""

    base_sigma: float = 0.0
    regions: tuple = ()
    bias_amplitude: float = 0.0
    bias_frequency: float = 1.5  # cycles across the image

    def __post_init__(self):
        regions = tuple(r if isinstance(r, NoiseRegion) else NoiseRegion(**r) for r in self.regions)
        object.__setattr__(self, "regions", regions)
        if self.base_sigma < 0:
            raise ConfigError("base_sigma must be >= 0")
        if self.bias_amplitude < 0:
            raise ConfigError("bias_amplitude must be >= 0")

    @classmethod
    def zero(cls):
        return cls()

    @classmethod
    def two_region(cls, clean=0.0, noisy=0.5):
        """Clean left half, noisy right half."""
        return cls(base_sigma=clean, regions=(NoiseRegion((0.5, 0.0, 1.0, 1.0), noisy),))

    def sigma_map(self, height, width):
        sig = np.full((height, width), float(self.base_sigma))
        for r in self.regions:
            sig[r.mask(height, width)] = r.sigma
        return sig

    def to_dict(self):
        return {
            "base_sigma": self.base_sigma,
            "regions": [{"rect": list(r.rect), "sigma": r.sigma} for r in self.regions],
            "bias_amplitude": self.bias_amplitude,
            "bias_frequency": self.bias_frequency,
        }


@dataclass
class DepthPrior:
    depth: np.ndarray  # (H, W) far-normalized
    sigma_map: np.ndarray  # (H, W) noise level used to corrupt the prior
    uncertainty: Optional[np.ndarray] = None
    scale: float = 1.0
    shift: float = 0.0

    def aligned(self):
        return self.scale * self.depth + self.shift


@dataclass
class PresetScene:
    scene: Scene
    cameras: list
    splits: list = field(default_factory=list)

    @property
    def train_cameras(self):
        return [c for c, s in zip(self.cameras, self.splits) if s == "train"]

    @property
    def eval_cameras(self):
        return [c for c, s in zip(self.cameras, self.splits) if s == "eval"]


# ---------------------------------------------------------------------------
# preset geometry
# ---------------------------------------------------------------------------


def _texture(base, s, t, phase):
    base = np.asarray(base, dtype=np.float64)
    pattern = 0.22 * np.sin(2 * np.pi * (1.5 * s + phase)) * np.cos(2 * np.pi * (1.2 * t - phase))
    ramp = 0.12 * (s - 0.5) * np.array([1.0, -0.5, 0.3])
    return np.clip(base + pattern + ramp, 0.0, 1.0)


class _Plane:
    def __init__(self, center, u_axis, v_axis, half_u, half_v, color, phase=0.0):
        self.center = np.asarray(center, dtype=np.float64)
        self.u = np.asarray(u_axis, dtype=np.float64)
        self.v = np.asarray(v_axis, dtype=np.float64)
        self.half_u, self.half_v = half_u, half_v
        self.color, self.phase = color, phase

    @property
    def area(self):
        return 4 * self.half_u * self.half_v

    def sample(self, n, rng):
        if n <= 0:
            return []
        aspect = self.half_u / self.half_v
        nu = max(1, int(round(np.sqrt(n * aspect))))
        nv = max(1, int(np.ceil(n / nu)))
        du, dv = 2 * self.half_u / nu, 2 * self.half_v / nv
        cells = [(i, j) for j in range(nv) for i in range(nu)]
        pick = sorted(rng.choice(len(cells), size=n, replace=False)) if n < len(cells) else range(len(cells))
        normal = np.cross(self.u, self.v)
        R = np.stack([self.u, self.v, normal], axis=1)
        q = matrix_to_quaternion(R)
        out = []
        for c in pick:
            i, j = cells[c]
            s = (i + 0.5 + rng.uniform(-0.2, 0.2)) / nu
            t = (j + 0.5 + rng.uniform(-0.2, 0.2)) / nv
            pos = self.center + (2 * s - 1) * self.half_u * self.u + (2 * t - 1) * self.half_v * self.v
            scale = (0.7 * du, 0.7 * dv, 0.12 * min(du, dv))
            out.append(GaussianPrimitive(pos, scale, q, _texture(self.color, s, t, self.phase), 0.95))
        return out


class _Sphere:
    def __init__(self, center, radius, color, phase=0.0):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = radius
        self.color, self.phase = color, phase

    @property
    def area(self):
        return 4 * np.pi * self.radius ** 2

    def sample(self, n, rng):
        if n <= 0:
            return []
        out = []
        spacing = np.sqrt(self.area / n)
        golden = np.pi * (3.0 - np.sqrt(5.0))
        for k in range(n):
            y = 1 - 2 * (k + 0.5) / n
            r = np.sqrt(max(0.0, 1 - y * y))
            th = golden * k + rng.uniform(-0.1, 0.1)
            normal = np.array([np.cos(th) * r, y, np.sin(th) * r])
            helper = np.array([0.0, 1.0, 0.0]) if abs(normal[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
            u = np.cross(helper, normal)
            u /= np.linalg.norm(u)
            v = np.cross(normal, u)
            q = matrix_to_quaternion(np.stack([u, v, normal], axis=1))
            pos = self.center + self.radius * normal
            scale = (0.6 * spacing, 0.6 * spacing, 0.12 * spacing)
            s, t = 0.5 + np.arctan2(normal[2], normal[0]) / (2 * np.pi), 0.5 + 0.5 * y
            out.append(GaussianPrimitive(pos, scale, q, _texture(self.color, s, t, self.phase), 0.95))
        return out


_EX, _EY, _EZ = np.eye(3)


def _box_faces(center, half, color, phase):
    c = np.asarray(center, dtype=np.float64)
    hx, hy, hz = half
    return [
        _Plane(c - hz * _EZ, _EX, _EY, hx, hy, color, phase),  # faces the cameras
        _Plane(c - hx * _EX, _EZ, _EY, hz, hy, np.asarray(color) * 0.8, phase + 0.3),
        _Plane(c + hx * _EX, -_EZ, _EY, hz, hy, np.asarray(color) * 0.8, phase + 0.6),
        _Plane(c - hy * _EY, _EX, _EZ, hx, hz, np.asarray(color) * 0.9, phase + 0.1),
        _Plane(c + hy * _EY, _EX, -_EZ, hx, hz, np.asarray(color) * 0.7, phase + 0.2),
    ]


def _surfaces(name):
    wall = _Plane((0.0, 0.0, 1.6), _EX, _EY, 4.6, 3.4, (0.55, 0.6, 0.7), 0.0)
    if name == "layers":
        return [wall,
                _Plane((-0.3, -0.1, 0.3), _EX, _EY, 1.3, 1.1, (0.85, 0.45, 0.25), 0.4),
                _Plane((0.5, 0.3, -0.9), _EX, _EY, 0.6, 0.7, (0.25, 0.75, 0.35), 0.7)]
    if name == "boxes":
        return ([wall]
                + _box_faces((-0.8, 0.2, 0.4), (0.6, 0.8, 0.5), (0.8, 0.35, 0.3), 0.2)
                + _box_faces((0.9, -0.2, -0.3), (0.5, 0.5, 0.5), (0.3, 0.45, 0.85), 0.5))
    if name == "spheres":
        return [wall,
                _Sphere((-0.7, 0.1, 0.3), 0.8, (0.85, 0.5, 0.3), 0.1),
                _Sphere((0.8, -0.3, -0.4), 0.55, (0.3, 0.75, 0.5), 0.6)]
    raise ConfigError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}")


def _allocate(count, areas):
    areas = np.asarray(areas, dtype=np.float64)
    raw = count * areas / areas.sum()
    base = np.floor(raw).astype(int)
    rest = count - base.sum()
    for i in np.argsort(-(raw - base), kind="stable")[:rest]:
        base[i] += 1
    return base


def default_cameras(size=64, n_train=3, n_eval=5, radius=4.5):
    """Train cameras on a horizontal arc; eval cameras between and beside them."""
    focal = 1.1 * size
    common = dict(focal=focal, principal_point=(size / 2, size / 2), width=size, height=size,
                  near=0.1, far=10.0)
    train_angles = np.linspace(-20, 20, n_train) if n_train > 1 else np.array([0.0])
    eval_angles = np.linspace(-16, 16, n_eval) + 2.0
    cams, splits = [], []
    for split, angles, lift in (("train", train_angles, 0.0), ("eval", eval_angles, 0.25)):
        for k, a in enumerate(np.radians(angles)):
            y = lift * (1 if k % 2 else -1)
            eye = (radius * np.sin(a), y, -radius * np.cos(a))
            cams.append(Camera.look_at(eye, (0.0, 0.0, 0.2), **common))
            splits.append(split)
    return cams, splits


def preset_scene(name, gaussian_count, seed=0, size=64, n_train=3, n_eval=5) -> PresetScene:
    """Deterministic synthetic scene with known geometry and its camera rig."""
    if int(gaussian_count) < 1:
        raise ConfigError("gaussian_count must be >= 1")
    if n_eval < 5:
        raise ConfigError("need at least 5 held-out cameras")
    surfaces = _surfaces(name)
    rng = np.random.default_rng(seed)
    counts = _allocate(int(gaussian_count), [s.area for s in surfaces])
    gaussians = []
    for surf, n in zip(surfaces, counts):
        gaussians.extend(surf.sample(int(n), rng))
    cams, splits = default_cameras(size, n_train, n_eval)
    return PresetScene(Scene(gaussians, (0.0, 0.0, 0.0)), cams, splits)


# ---------------------------------------------------------------------------
# prior corruption and alignment
# ---------------------------------------------------------------------------


def bias_field(height, width, amplitude, frequency, rng):
    """Smooth additive field: a few random low-frequency sinusoids, peak ~ amplitude."""
    ys, xs = np.meshgrid((np.arange(height) + 0.5) / height, (np.arange(width) + 0.5) / width,
                         indexing="ij")
    field_ = np.zeros((height, width))
    for _ in range(3):
        th = rng.uniform(0, 2 * np.pi)
        ph = rng.uniform(0, 2 * np.pi)
        f = frequency * rng.uniform(0.5, 1.0)
        field_ += np.sin(2 * np.pi * f * (np.cos(th) * xs + np.sin(th) * ys) + ph)
    return amplitude * field_ / 3.0


def corrupt_depth(gt_depth, profile: NoiseProfile, seed=0) -> DepthPrior:
    """prior = gt + N(0, sigma(x, y)^2) + bias field; returns the sigma map too."""
    gt = np.asarray(gt_depth, dtype=np.float64)
    H, W = gt.shape
    sig = profile.sigma_map(H, W)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((H, W))
    prior = gt + sig * noise
    if profile.bias_amplitude > 0:
        prior = prior + bias_field(H, W, profile.bias_amplitude, profile.bias_frequency, rng)
    return DepthPrior(depth=prior, sigma_map=sig)


def scale_align(prior_depth, rendered_depth, mask=None, min_pixels=16):
    """Least-squares (s, t) minimizing sum_mask (s * prior + t - rendered)^2."""
    p = np.asarray(prior_depth, dtype=np.float64)
    r = np.asarray(rendered_depth, dtype=np.float64)
    if p.shape != r.shape:
        raise ValidationError(f"shape mismatch: {p.shape} vs {r.shape}")
    m = np.ones(p.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if int(m.sum()) < min_pixels:
        raise ValidationError(f"alignment mask covers {int(m.sum())} pixels, need >= {min_pixels}")
    pm, rm = p[m], r[m]
    p_mean, r_mean = pm.mean(), rm.mean()
    var = np.mean((pm - p_mean) ** 2)
    if var <= 1e-18 * max(1.0, p_mean ** 2):
        return 1.0, float(np.mean(rm - pm))
    s = np.mean((pm - p_mean) * (rm - r_mean)) / var
    return float(s), float(r_mean - s * p_mean)


class ScaleShiftAligner(TransformerMixin, BaseEstimator):
    """Affine alignment of a relative depth map onto a reference depth map.

    ``fit(prior, reference)`` learns (scale_, shift_); ``transform(prior)``
    applies them.
    """

    def __init__(self, min_pixels=16):
        self.min_pixels = min_pixels

    def fit(self, X, y, mask=None):
        self.scale_, self.shift_ = scale_align(X, y, mask, self.min_pixels)
        return self

    def transform(self, X):
        check_is_fitted(self, ("scale_", "shift_"))
        return self.scale_ * np.asarray(X, dtype=np.float64) + self.shift_
