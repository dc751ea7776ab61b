"""Gradients of the total loss with respect to every Gaussian parameter.

Differentiation is reverse mode through torch autograd; the compositing step
has a hand-written vector-Jacobian product (see :mod:`ugot.renderer`).
:func:`finite_difference_check` is the independent oracle for both.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .core import Camera, GaussianParams, NumericalError, Scene, ValidationError
from .losses import LossConfig, total_loss
from .renderer import render

GROUPS = GaussianParams.GROUPS


@dataclass
class View:
    """One supervised camera: target image plus an optional depth prior."""

    camera: Camera
    image: np.ndarray  # (H, W, 3)
    prior: object = None  # DepthPrior or None
    prior_valid: Optional[np.ndarray] = None


@dataclass
class ParamGradient:
    position: np.ndarray  # (N, 3)
    scale: np.ndarray  # (N, 3)
    rotation: np.ndarray  # (N, 4), tangent to the unit quaternion
    color: np.ndarray  # (N, 3)
    opacity: np.ndarray  # (N,)

    def __getitem__(self, group):
        return getattr(self, group)

    def flat(self):
        return np.concatenate([getattr(self, g).reshape(-1) for g in GROUPS])

    def is_finite(self):
        return all(np.all(np.isfinite(getattr(self, g))) for g in GROUPS)


@dataclass
class LossResult:
    loss: float
    grad: ParamGradient
    terms: list = field(default_factory=list)  # per-view LossTerms (detached floats)
    structures: list = field(default_factory=list)


def as_params(scene) -> GaussianParams:
    if isinstance(scene, Scene):
        return scene.to_params()
    if isinstance(scene, GaussianParams):
        return scene
    raise ValidationError(f"expected Scene or GaussianParams, got {type(scene).__name__}")


def tangent_project(q, g):
    """Remove the component of ``g`` along the unit quaternion direction of ``q``.

    The renderer normalizes quaternions, so the raw partial is already
    tangent; the projection only strips rounding residue.
    """
    qn = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return g - (g * qn).sum(-1, keepdims=True) * qn


def _first_bad_pixel(out):
    for t in (out.color, out.depth[..., None]):
        bad = ~torch.isfinite(t.detach()).all(-1)
        if bool(bad.any()):
            r, c = np.argwhere(bad.numpy())[0]
            return int(r), int(c)
    return None


def _forward(params, views, cfg: LossConfig, iteration, structures=None):
    """Mean total loss over views; returns (loss tensor, terms, structures, outputs)."""
    if len(views) == 0:
        raise ValidationError("training batch is empty")
    total = None
    terms, structs, outs = [], [], []
    for k, v in enumerate(views):
        st = None if structures is None else structures[k]
        out = render(params, v.camera, cfg.K, structure=st)
        t = total_loss(out, torch.as_tensor(np.asarray(v.image), dtype=out.color.dtype), v.prior,
                       cfg, iteration=iteration, far=v.camera.far, prior_valid=v.prior_valid,
                       stream=k)
        if not bool(torch.isfinite(t.total.detach())):
            bad = [name for name in ("color", "dn", "ot")
                   if not bool(torch.isfinite(getattr(t, name).detach()))]
            term = bad[0] if bad else "total"
            pixel = _first_bad_pixel(out)
            raise NumericalError(f"non-finite loss in term {term!r} of view {k} at pixel {pixel}",
                                 term=term, pixel=pixel)
        total = t.total if total is None else total + t.total
        terms.append(t)
        structs.append(out.structure)
        outs.append(out)
    return total / len(views), terms, structs, outs


def loss_and_grad(scene, views, cfg: LossConfig, iteration=0, masks=None,
                  structures=None) -> LossResult:
    """Total loss (mean over views) and its gradient for every parameter group.

    ``masks`` maps a group name to False to zero that group's gradient.
    ``structures`` freezes the per-view contributor lists and top-K slots.
    Gumbel noise and patch layouts are keyed by (sampler seed, iteration, view).
    """
    params = as_params(scene).clone(requires_grad=True)
    loss, terms, structs, _ = _forward(params, views, cfg, iteration, structures)
    loss.backward()
    grads = {}
    for g in GROUPS:
        t = getattr(params, g)
        arr = np.zeros(tuple(t.shape)) if t.grad is None else t.grad.detach().numpy().copy()
        if masks is not None and not masks.get(g, True):
            arr[:] = 0.0
        grads[g] = arr
    grads["rotation"] = tangent_project(params.rotation.detach().numpy(), grads["rotation"])
    pg = ParamGradient(**grads)
    if not pg.is_finite():
        raise NumericalError("non-finite gradient", term="gradient")
    return LossResult(float(loss.detach()), pg, terms, structs)


def loss_value(scene, views, cfg: LossConfig, iteration=0, structures=None):
    with torch.no_grad():
        loss, _, _, _ = _forward(as_params(scene), views, cfg, iteration, structures)
    return float(loss)


@dataclass
class FDReport:
    max_rel_error: float
    entries: list  # (group, gaussian, component, analytic, numeric, rel_error)

    def __float__(self):
        return self.max_rel_error


def relative_error(a, f, floor=1e-8):
    return abs(a - f) / max(abs(a), abs(f), floor)


def finite_difference_check(scene, views, cfg: LossConfig, h=1e-4, sample_count=64, seed=0,
                            iteration=0, floor=1e-8) -> FDReport:
    """Compare analytic gradients with central differences on sampled parameters.

    Randomness (Gumbel noise, patch layout) is keyed by the iteration and is
    therefore identical across the perturbed evaluations.  The discrete render
    choices (contributor lists, top-K membership) are frozen at the unperturbed
    point so that the loss is smooth in the perturbation.  Parameters are drawn
    among Gaussians that contribute to at least one pixel.
    """
    if not h > 0:
        raise ValidationError("h must be > 0")
    params = as_params(scene).clone()
    with torch.no_grad():
        _, _, structs, _ = _forward(params, views, cfg, iteration)
    res = loss_and_grad(params, views, cfg, iteration, structures=structs)

    seen = np.zeros(len(params), dtype=bool)
    for st in structs:
        L = st.idx.shape[1]
        used = st.idx[np.arange(L)[None, :] < st.counts[:, None]]
        seen[used] = True
    cand = []
    for g in GROUPS:
        width = 1 if g == "opacity" else getattr(params, g).shape[1]
        for i in np.flatnonzero(seen):
            for c in range(width):
                cand.append((g, int(i), c))
    if not cand:
        return FDReport(0.0, [])
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(cand), size=min(int(sample_count), len(cand)), replace=False)

    entries = []
    for j in sorted(pick.tolist()):
        g, i, c = cand[j]
        vals = []
        for sgn in (1.0, -1.0):
            p = params.clone()
            t = getattr(p, g)
            if g == "opacity":
                t[i] += sgn * h
            else:
                t[i, c] += sgn * h
            vals.append(loss_value(p, views, cfg, iteration, structs))
        fd = (vals[0] - vals[1]) / (2 * h)
        a = res.grad[g][i] if g == "opacity" else res.grad[g][i, c]
        entries.append((g, i, c, float(a), float(fd), relative_error(float(a), fd, floor)))
    return FDReport(max(e[5] for e in entries), entries)

