"""Per-pixel uncertainty from the instability of a denoising trajectory.

No diffusion network is run here.  :func:`simulate_trajectory` produces
trajectories whose per-pixel instability tracks a prescribed noise level,
which is the only property the downstream loss relies on.
"""

from __future__ import annotations

import numpy as np

from .core import ValidationError


def _as_trajectory(traj):
    arr = np.asarray(traj, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None, None]
    if arr.ndim != 3:
        raise ValidationError(f"trajectory must be (T+1, H, W), got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise ValidationError("a trajectory needs at least 2 iterates")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("trajectory contains non-finite values")
    return arr


def mirror(img):
    """Horizontal flip of an (H, W) or (..., H, W) array."""
    return np.asarray(img)[..., ::-1]


def change_count(traj, threshold=None):
    """Mean absolute change between consecutive iterates z_T .. z_0.

    ``traj`` is ordered (z_T, ..., z_0), shape (T+1, H, W).  With
    ``threshold`` set, increments smaller than it are ignored.
    """
    z = _as_trajectory(traj)
    steps = z.shape[0] - 1
    inc = np.abs(np.diff(z, axis=0))
    if threshold is not None:
        inc = np.where(inc >= threshold, inc, 0.0)
    return inc.sum(axis=0) / steps


def mirror_average(traj_image, traj_mirrored, threshold=None):
    """U = (c(traj_I) + M(c(traj_M(I)))) / 2 with M the horizontal flip."""
    a = _as_trajectory(traj_image)
    b = _as_trajectory(traj_mirrored)
    if a.shape[1:] != b.shape[1:]:
        raise ValidationError(f"trajectory sizes differ: {a.shape[1:]} vs {b.shape[1:]}")
    return (change_count(a, threshold) + mirror(change_count(b, threshold))) / 2.0


def simulate_trajectory(gt_depth, sigma_map, steps=20, seed=0, floor=0.05, start_sigma=None):
    """Synthetic denoising trajectory z_T, ..., z_0 around ``gt_depth``.

    The start z_T = gt + N(0, sigma_max^2) uses one level for every pixel
    (``start_sigma``, default the map maximum).  Later iterates are
    gt + N(0, (sigma * max(t/T, floor))^2) per pixel, so the noise shrinks
    linearly towards a floor.  Noise for iterate t comes from its own Philox
    stream keyed by (seed, t).
    """
    gt = np.asarray(gt_depth, dtype=np.float64)
    sigma = np.asarray(sigma_map, dtype=np.float64)
    if gt.shape != sigma.shape:
        raise ValidationError(f"gt {gt.shape} and sigma map {sigma.shape} differ in shape")
    if int(steps) < 1:
        raise ValidationError("steps must be >= 1")
    if np.any(sigma < 0):
        raise ValidationError("sigma map must be non-negative")
    T = int(steps)
    s_max = float(sigma.max()) if start_sigma is None else float(start_sigma)
    if s_max < 0:
        raise ValidationError("start_sigma must be non-negative")
    out = np.empty((T + 1,) + gt.shape)
    for i, t in enumerate(range(T, -1, -1)):
        rng = np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(t)]))
        scale = s_max if t == T else sigma * max(t / T, floor)
        out[i] = gt + scale * rng.standard_normal(gt.shape)
    return out


def estimate_uncertainty(gt_depth, sigma_map, steps=20, seed=0, threshold=None):
    """Full pipeline: simulate trajectories for the view and its mirror, then average.

    The trajectory is a fixed function of (input maps, seed), like a seeded
    denoiser, so the mirror identity U(M(I)) = M(U(I)) holds bit-exactly.
    """
    gt = np.asarray(gt_depth, dtype=np.float64)
    sigma = np.asarray(sigma_map, dtype=np.float64)
    traj = simulate_trajectory(gt, sigma, steps, seed)
    traj_m = simulate_trajectory(mirror(gt), mirror(sigma), steps, seed)
    return mirror_average(traj, traj_m, threshold)
