"""Entropic optimal transport: Sinkhorn, the Dirac-target closed form and patch losses."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import ConfigError, ValidationError


class SinkhornWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class DiscreteDistribution:
    supports: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.supports, dtype=np.float64).reshape(-1)
        a = np.asarray(self.masses, dtype=np.float64).reshape(-1)
        if x.shape != a.shape:
            raise ValidationError("supports and masses must have the same length")
        if np.any(a < 0) or abs(a.sum() - 1.0) > 1e-9:
            raise ValidationError(f"masses must be non-negative and sum to 1 (sum={a.sum()})")
        object.__setattr__(self, "supports", x)
        object.__setattr__(self, "masses", a)

    @classmethod
    def dirac(cls, value):
        return cls([value], [1.0])


@dataclass
class OTProblem:
    source: DiscreteDistribution
    target: DiscreteDistribution
    cost_exponent: int = 2
    epsilon: float = 0.05
    cost: np.ndarray | None = None  # explicit cost matrix overrides |x - y|^p
    plan: np.ndarray | None = field(default=None)

    def cost_matrix(self):
        if self.cost is not None:
            return np.asarray(self.cost, dtype=np.float64)
        if self.cost_exponent not in (1, 2):
            raise ConfigError("cost_exponent must be 1 or 2")
        diff = self.source.supports[:, None] - self.target.supports[None, :]
        return np.abs(diff) ** self.cost_exponent


@dataclass
class SinkhornResult:
    distance: float  # <T, C> under the regularized plan
    plan: np.ndarray
    n_iter: int
    converged: bool
    marginal_error: float
    objective: float = float("nan")  # <T, C> - eps * H(T)


def entropic_objective(plan, cost, epsilon):
    """<T, C> - eps * H(T) with H(T) = -sum T ln T (0 ln 0 = 0)."""
    plan = np.asarray(plan, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(plan > 0, plan * np.log(plan), 0.0)
    return float((plan * cost).sum() + epsilon * plogp.sum())


def sinkhorn_log(a, b, C, epsilon, max_iters=200, tol=1e-7):
    """Log-domain Sinkhorn on torch tensors; differentiable by unrolling.

    Returns (plan, n_iter, marginal_error).  Zero-mass entries must be removed
    by the caller.
    """
    if not epsilon > 0:
        raise ConfigError("epsilon must be > 0")
    log_a, log_b = torch.log(a), torch.log(b)
    f = torch.zeros_like(a)
    g = torch.zeros_like(b)
    err = float("inf")
    it = 0
    for it in range(1, int(max_iters) + 1):
        f = epsilon * (log_a - torch.logsumexp((g[None, :] - C) / epsilon, dim=1))
        g = epsilon * (log_b - torch.logsumexp((f[:, None] - C) / epsilon, dim=0))
        plan = torch.exp((f[:, None] + g[None, :] - C) / epsilon)
        # columns are exact after the g update; rows carry the violation
        err = float((plan.sum(1) - a).abs().max())
        if err < tol:
            break
    plan = torch.exp((f[:, None] + g[None, :] - C) / epsilon)
    return plan, it, err


def sinkhorn_batched(a, b, C, epsilon, iters=50):
    """Fixed-length unrolled log-domain Sinkhorn over a batch.

    a: (B, n), b: (B, m), C: (B, n, m); returns plans (B, n, m).  A fixed
    iteration count keeps the autograd graph independent of the data.
    """
    if not epsilon > 0:
        raise ConfigError("epsilon must be > 0")
    log_a = torch.log(a.clamp(min=1e-300))
    log_b = torch.log(b.clamp(min=1e-300))
    f = torch.zeros_like(a)
    g = torch.zeros_like(b)
    for _ in range(int(iters)):
        f = epsilon * (log_a - torch.logsumexp((g[:, None, :] - C) / epsilon, dim=2))
        g = epsilon * (log_b - torch.logsumexp((f[:, :, None] - C) / epsilon, dim=1))
    return torch.exp((f[:, :, None] + g[:, None, :] - C) / epsilon)


def sinkhorn(problem: OTProblem, max_iters=200, tol=1e-7) -> SinkhornResult:
    """Solve the entropic OT problem; warns (does not fail) on non-convergence."""
    a = problem.source.masses
    b = problem.target.masses
    C = problem.cost_matrix()
    rows, cols = a > 0, b > 0
    Ct = torch.from_numpy(C[np.ix_(rows, cols)])
    plan_s, n_iter, err = sinkhorn_log(torch.from_numpy(a[rows]), torch.from_numpy(b[cols]), Ct,
                                       problem.epsilon, max_iters, tol)
    plan = np.zeros_like(C)
    plan[np.ix_(rows, cols)] = plan_s.numpy()
    converged = err < tol
    if not converged:
        warnings.warn(f"sinkhorn did not converge in {max_iters} iterations "
                      f"(marginal error {err:.3g})", SinkhornWarning, stacklevel=2)
    problem.plan = plan
    return SinkhornResult(float((plan * C).sum()), plan, n_iter, converged, err,
                          entropic_objective(plan, C, problem.epsilon))


def ot_dirac(samples, weights, target, cost_exponent=2):
    """Transport cost from weighted samples to a single target value.

    With a Dirac target the marginal constraints force the plan to equal the
    sample weights, so the entropic term is a constant and is dropped.
    Broadcasts over leading dimensions: samples/weights (..., n), target (...).
    """
    if isinstance(samples, torch.Tensor) or isinstance(weights, torch.Tensor):
        samples = torch.as_tensor(samples)
        weights = torch.as_tensor(weights, dtype=samples.dtype)
        target = torch.as_tensor(target, dtype=samples.dtype)
        diff = (samples - target[..., None]).abs()
        return (weights * diff ** cost_exponent).sum(-1)
    samples = np.asarray(samples, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return (weights * np.abs(samples - target[..., None]) ** cost_exponent).sum(-1)


@dataclass(frozen=True)
class PatchLayout:
    """Non-overlapping square tiling with a global offset; border patches shrink."""

    side: int
    offset: tuple = (0, 0)  # (row, col), each in [0, side)
    s1: int = 4
    s2: int = 16

    def __post_init__(self):
        if self.side < 1:
            raise ConfigError("patch side must be >= 1")

    @classmethod
    def draw(cls, rng, s1=4, s2=16):
        if not 1 <= s1 <= s2:
            raise ConfigError(f"need 1 <= s1 <= s2, got {s1}, {s2}")
        side = int(rng.integers(s1, s2 + 1))
        off = rng.integers(0, side, size=2)
        return cls(side, (int(off[0]), int(off[1])), s1, s2)

    @classmethod
    def pixelwise(cls):
        return cls(1, (0, 0), 1, 1)

    def labels(self, height, width):
        """(H, W) patch ids numbered row-major, and the patch count."""
        oy, ox = self.offset
        by = (np.arange(height) - oy + self.side) // self.side
        bx = (np.arange(width) - ox + self.side) // self.side
        raw = by[:, None] * (bx.max() + 1) + bx[None, :]
        _, inv = np.unique(raw.reshape(-1), return_inverse=True)
        inv = inv.reshape(height, width)
        return inv, int(inv.max()) + 1


@dataclass
class PatchStats:
    values: torch.Tensor  # (Np, n) patch means of each sample stream
    weights: torch.Tensor  # (Np, n) patch-mean sample weights, renormalized
    valid: torch.Tensor  # (Np,) patches with at least one valid pixel
    labels: np.ndarray  # (H, W)


def _patch_sum(x, labels_t, n_patches):
    out = torch.zeros((n_patches,) + x.shape[1:], dtype=x.dtype)
    return out.index_add(0, labels_t, x)


def patch_aggregate(values, weights, valid, layout: PatchLayout) -> PatchStats:
    """Patch means of per-pixel samples and sample weights over valid pixels.

    values, weights: (H, W, n); valid: (H, W) bool.
    """
    H, W, n = values.shape
    labels, n_patches = layout.labels(H, W)
    lab = torch.from_numpy(labels.reshape(-1))
    m = valid.reshape(-1).to(values.dtype)
    cnt = _patch_sum(m, lab, n_patches)
    ok = cnt > 0
    denom = cnt.clamp(min=1)[:, None]
    vals = _patch_sum(values.reshape(-1, n) * m[:, None], lab, n_patches) / denom
    wts = _patch_sum(weights.reshape(-1, n) * m[:, None], lab, n_patches) / denom
    wsum = wts.sum(-1, keepdim=True)
    wts = torch.where(ok[:, None], wts / wsum.clamp(min=1e-300), torch.zeros_like(wts))
    return PatchStats(vals, wts, ok, labels)


def patch_softmax(uncertainty, valid, labels, n_patches):
    """softmax(-U) within each patch over valid pixels; (H, W) numpy weights."""
    u = np.asarray(uncertainty, dtype=np.float64).reshape(-1)
    lab = labels.reshape(-1)
    m = np.asarray(valid).reshape(-1)
    umin = np.full(n_patches, np.inf)
    np.minimum.at(umin, lab[m], u[m])
    e = np.where(m, np.exp(-(u - umin[lab])), 0.0)
    s = np.zeros(n_patches)
    np.add.at(s, lab, e)
    w = np.where(m, e / np.where(s[lab] > 0, s[lab], 1.0), 0.0)
    return w.reshape(labels.shape)


def ugot_loss(samples, prior_depth, uncertainty=None, layout: PatchLayout | None = None,
              rng=None, cost_exponent=2, prior_valid=None, s1=4, s2=16, return_details=False,
              solver="dirac", epsilon=0.05, sinkhorn_iters=20):
    """Uncertainty-guided patch-wise OT loss between depth samples and a prior.

    Per patch the softmax(-U) weights form weighted means of every sample
    stream and of the prior; the loss is the mean over patches of the Dirac
    transport cost with patch-mean sample weights.  A fresh random layout is
    drawn from ``rng`` when none is given.  ``uncertainty=None`` means uniform.
    ``solver="sinkhorn"`` obtains the plan from unrolled Sinkhorn iterations
    instead of the closed form; both give the same value and gradient.
    """
    if solver not in ("dirac", "sinkhorn"):
        raise ConfigError(f"unknown OT solver {solver!r}")
    values, sw, valid = samples.values, samples.weights, samples.valid
    H, W, n = values.shape
    prior = torch.as_tensor(prior_depth, dtype=values.dtype)
    if prior.shape != (H, W):
        raise ConfigError(f"prior shape {tuple(prior.shape)} does not match samples {(H, W)}")
    if uncertainty is None:
        uncertainty = np.zeros((H, W))
    uncertainty = np.asarray(uncertainty, dtype=np.float64)
    if uncertainty.shape != (H, W):
        raise ConfigError(f"uncertainty shape {uncertainty.shape} does not match samples {(H, W)}")
    if layout is None:
        if rng is None:
            raise ConfigError("need either a patch layout or an rng to draw one")
        layout = PatchLayout.draw(rng, s1, s2)
    ok = valid & torch.isfinite(prior)
    if prior_valid is not None:
        ok = ok & torch.as_tensor(prior_valid, dtype=torch.bool)
    labels, n_patches = layout.labels(H, W)
    wpix = torch.from_numpy(patch_softmax(uncertainty, ok.numpy(), labels, n_patches)).to(values.dtype)
    lab = torch.from_numpy(labels.reshape(-1))
    prior_z = torch.where(ok, prior, torch.zeros_like(prior))
    d_u = _patch_sum((values * wpix[..., None]).reshape(-1, n), lab, n_patches)
    gt_u = _patch_sum((prior_z * wpix).reshape(-1), lab, n_patches)
    stats = patch_aggregate(values, sw, ok, layout)
    if solver == "dirac":
        per_patch = ot_dirac(d_u, stats.weights, gt_u, cost_exponent)
    else:
        C = ((d_u - gt_u[:, None]).abs() ** cost_exponent)[..., None]
        a = torch.where(stats.valid[:, None], stats.weights, torch.full_like(stats.weights, 1.0 / n))
        plan = sinkhorn_batched(a, torch.ones_like(gt_u)[:, None], C, epsilon, sinkhorn_iters)
        per_patch = (plan * C).sum((1, 2))
    pv = stats.valid
    if not bool(pv.any()):
        loss = values.sum() * 0.0
    else:
        loss = per_patch[pv].mean()
    if return_details:
        return loss, {"layout": layout, "per_patch": per_patch, "pixel_weights": wpix,
                      "patch_valid": pv}
    return loss
