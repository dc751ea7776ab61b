"""Loss terms: RGB reconstruction, normalized-patch depth L2, OT depth loss and their sum."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .core import ConfigError, ValidationError
from .metrics import ssim
from .sampler import SamplerConfig, sample_depths
from .transport import PatchLayout, ugot_loss

OT_MODES = ("none", "pixel", "patch", "ugot")


@dataclass(frozen=True)
class OTConfig:
    mode: str = "ugot"  # none | pixel | patch | ugot
    cost_exponent: int = 2
    epsilon: float = 0.05  # sinkhorn solver only; the forced plan makes it a constant
    s1: int = 4
    s2: int = 16
    solver: str = "dirac"  # dirac (closed form) | sinkhorn (unrolled iterations)

    def __post_init__(self):
        if self.solver not in ("dirac", "sinkhorn"):
            raise ConfigError(f"unknown OT solver {self.solver!r}")
        if self.mode not in OT_MODES:
            raise ConfigError(f"unknown OT mode {self.mode!r}; expected one of {OT_MODES}")
        if self.cost_exponent not in (1, 2):
            raise ConfigError("cost_exponent must be 1 or 2")
        if not 1 <= self.s1 <= self.s2:
            raise ConfigError("need 1 <= s1 <= s2")


@dataclass(frozen=True)
class LossConfig:
    lambda_ssim: float = 0.2
    lambda1: float = 0.1  # normalized-patch depth L2
    lambda2: float = 0.1  # OT depth loss
    lambda3: float = 1.0  # color
    dn_patch_side: int = 8
    K: int = 20
    gamma_reserved: float = 0.1  # declared alongside tau but never used by any term
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    ot: OTConfig = field(default_factory=OTConfig)

    def __post_init__(self):
        for name in ("lambda_ssim", "lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if int(self.K) < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if int(self.dn_patch_side) < 2:
            raise ConfigError("dn_patch_side must be >= 2")

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class LossTerms:
    total: torch.Tensor
    color: torch.Tensor
    dn: torch.Tensor
    ot: torch.Tensor
    layout: PatchLayout | None = None

    def weighted(self, cfg):
        """Weighted (color, dn, ot) contributions; they sum to ``total``."""
        return cfg.lambda3 * self.color, cfg.lambda1 * self.dn, cfg.lambda2 * self.ot

    def as_floats(self):
        return {"loss": float(self.total), "l_color": float(self.color),
                "l_dn": float(self.dn), "l_ot": float(self.ot)}


def _tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def rgb_loss(rendered, target, lam=0.2):
    """(1 - lam) * L1 + lam * (1 - SSIM) / 2."""
    r = _tensor(rendered)
    t = _tensor(target, r)
    if tuple(r.shape) != tuple(t.shape):
        raise ValidationError(f"shape mismatch: {tuple(r.shape)} vs {tuple(t.shape)}")
    l1 = (r - t).abs().mean()
    if lam == 0:
        return l1
    return (1 - lam) * l1 + lam * (1 - ssim(r, t)) / 2


def dn_depth_loss(rendered_depth, prior_depth, patch_side=8, mask=None):
    """Mean over non-overlapping patches of the MSE between z-normalized patches.

    Border remainders that do not fill a whole patch are ignored, as are
    patches touching a pixel outside ``mask``.
    """
    r = _tensor(rendered_depth)
    p = _tensor(prior_depth, r)
    if tuple(r.shape) != tuple(p.shape):
        raise ValidationError(f"shape mismatch: {tuple(r.shape)} vs {tuple(p.shape)}")
    s = int(patch_side)
    if s < 2:
        raise ConfigError("patch_side must be >= 2")
    H, W = r.shape
    hh, ww = (H // s) * s, (W // s) * s
    if hh == 0 or ww == 0:
        return r.sum() * 0.0

    def patches(x):
        return x[:hh, :ww].reshape(hh // s, s, ww // s, s).permute(0, 2, 1, 3).reshape(-1, s * s)

    def znorm(x):
        mu = x.mean(-1, keepdim=True)
        sd = ((x - mu) ** 2).mean(-1, keepdim=True).sqrt()
        return (x - mu) / (sd + 1e-6)

    rp, pp = patches(r), patches(torch.where(torch.isfinite(p), p, torch.zeros_like(p)))
    per = ((znorm(rp) - znorm(pp)) ** 2).mean(-1)
    ok = torch.isfinite(patches(p)).all(-1)
    if mask is not None:
        ok = ok & patches(torch.as_tensor(mask, dtype=torch.bool)).all(-1)
    if not bool(ok.any()):
        return r.sum() * 0.0
    return per[ok].mean()


def total_loss(render_output, target, prior, cfg: LossConfig, iteration=0, rng=None,
               far=1.0, prior_valid=None, layout=None, stream=0) -> LossTerms:
    """lambda1 * L_dn + lambda2 * L_ot + lambda3 * L_color with the term breakdown.

    ``prior`` is a :class:`~ugot.priors.DepthPrior` (or an object with
    ``aligned()`` and ``uncertainty``) in far-normalized units; rendered
    depths are divided by ``far`` before any depth term.  ``rng`` draws the
    random patch layout for the OT term unless ``layout`` fixes it.
    """
    color = rgb_loss(render_output.color, target, cfg.lambda_ssim)
    zero = color * 0.0
    dn, ot = zero, zero
    used_layout = None
    if prior is not None and (cfg.lambda1 > 0 or cfg.lambda2 > 0):
        prior_depth = torch.as_tensor(prior.aligned(), dtype=render_output.depth.dtype)
        if cfg.lambda1 > 0:
            dn = dn_depth_loss(render_output.depth / far, prior_depth, cfg.dn_patch_side,
                               mask=prior_valid)
        if cfg.lambda2 > 0 and cfg.ot.mode != "none":
            samples = sample_depths(render_output.topk_depths / far, render_output.topk_weights,
                                    render_output.topk_valid, cfg.sampler, iteration, stream=stream)
            mode = cfg.ot.mode
            unc = prior.uncertainty if mode == "ugot" else None
            if mode == "ugot" and unc is None:
                raise ConfigError("ugot mode needs an uncertainty map on the prior")
            if mode == "pixel":
                used_layout = PatchLayout.pixelwise()
            elif layout is not None:
                used_layout = layout
            else:
                if rng is None:
                    rng = np.random.default_rng([cfg.sampler.seed, int(iteration), int(stream)])
                used_layout = PatchLayout.draw(rng, cfg.ot.s1, cfg.ot.s2)
            ot = ugot_loss(samples, prior_depth, unc, used_layout,
                           cost_exponent=cfg.ot.cost_exponent, prior_valid=prior_valid,
                           solver=cfg.ot.solver, epsilon=cfg.ot.epsilon)
    total = cfg.lambda1 * dn + cfg.lambda2 * ot + cfg.lambda3 * color
    return LossTerms(total, color, dn, ot, used_layout)
