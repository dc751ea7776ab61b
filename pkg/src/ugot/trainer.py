"""Training loop, experiment construction, checkpoints and ablation grids."""

from __future__ import annotations

import csv
import io as _io
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autodiff import View, loss_and_grad
from .core import (ConfigError, GaussianParams, GaussianPrimitive, NumericalError, Scene,
                   ValidationError, scene_from_json, scene_to_json, validate_scene)
from .losses import LossConfig, total_loss
from .metrics import depth_rmse, psnr, ssim
from .priors import NoiseProfile, corrupt_depth, preset_scene
from .renderer import render
from .uncertainty import estimate_uncertainty

VARIANTS = ("l2-only", "ot-pixel", "ot-patch", "ot-ugot", "ugot-no-l2")
CSV_HEADER = ("iteration", "loss", "l_color", "l_dn", "l_ot", "psnr", "ssim", "depth_rmse")
OPT_MAGIC = b"UGOPT1"
OPACITY_FLOOR = 1e-4


def variant_loss_config(base: LossConfig, variant: str) -> LossConfig:
    """Map a variant name onto the OT mode, zeroing the term the variant drops.

    Weights set in ``base`` are otherwise kept, so lambda1 = lambda2 = 0 gives
    a color-only run under any variant.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    mode = {"l2-only": "none", "ot-pixel": "pixel", "ot-patch": "patch",
            "ot-ugot": "ugot", "ugot-no-l2": "ugot"}[variant]
    return replace(base,
                   lambda1=0.0 if variant == "ugot-no-l2" else base.lambda1,
                   lambda2=0.0 if variant == "l2-only" else base.lambda2,
                   ot=replace(base.ot, mode=mode))


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    lr_position: float = 1.6e-4 * 5.0  # reference ratio times the scene extent
    lr_scale: float = 1e-3
    lr_rotation: float = 1e-3
    lr_color: float = 1e-2
    lr_opacity: float = 1e-2
    seed: int = 0
    eval_every: int = 250
    checkpoint_path: Optional[str] = None
    variant: str = "ot-ugot"
    gaussian_count: int = 300
    init_bounds: tuple = ((-2.8, -2.2, -1.2), (2.8, 2.2, 1.8))
    init_scale: tuple = (0.08, 0.2)
    scale_floor: float = 1e-3
    # per-group gradient masks; a group listed here is frozen
    frozen_groups: tuple = ()

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise ConfigError("iterations must be >= 1")
        if int(self.eval_every) < 1:
            raise ConfigError("eval_every must be >= 1")
        for g in GaussianParams.GROUPS:
            if not getattr(self, f"lr_{g}") > 0:
                raise ConfigError(f"lr_{g} must be > 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for g in self.frozen_groups:
            if g not in GaussianParams.GROUPS:
                raise ConfigError(f"unknown parameter group {g!r}")

    def lrs(self):
        return {g: float(getattr(self, f"lr_{g}")) for g in GaussianParams.GROUPS}

    def masks(self):
        return {g: g not in self.frozen_groups for g in GaussianParams.GROUPS}


@dataclass
class RunRecord:
    rows: list = field(default_factory=list)  # dicts keyed by CSV_HEADER
    per_view: list = field(default_factory=list)  # (iteration, view, psnr, ssim, depth_rmse)

    def append(self, row):
        if self.rows and row["iteration"] <= self.rows[-1]["iteration"]:
            raise ValidationError("iteration column must increase")
        self.rows.append(row)

    def final(self):
        return self.rows[-1] if self.rows else None

    def to_csv(self):
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r["iteration"]] + [_fmt(r[k]) for k in CSV_HEADER[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.DictReader(_io.StringIO(text)))
        if not rows:
            raise ValidationError("run CSV has no rows")
        if tuple(rows[0].keys()) != CSV_HEADER:
            raise ValidationError(f"unexpected CSV header {tuple(rows[0].keys())}")
        rec = cls()
        for r in rows:
            rec.append({k: (int(v) if k == "iteration" else float(v)) for k, v in r.items()})
        return rec

    def summary(self):
        f = self.final()
        return {"psnr": f["psnr"], "ssim": f["ssim"], "depth_rmse": f["depth_rmse"]}


def _fmt(x):
    return repr(float(x))


# ---------------------------------------------------------------------------
# initialization and experiments
# ---------------------------------------------------------------------------


def init_gaussians(count, bounds, seed=0, scale_range=(0.08, 0.2), opacity=0.1,
                   background=(0.0, 0.0, 0.0)) -> Scene:
    """Uniform positions in a box, uniform scales/colors, rotations near identity."""
    if int(count) < 1:
        raise ConfigError("count must be >= 1")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi < lo) or not np.all(np.isfinite(lo + hi)):
        raise ConfigError(f"invalid bounds box {bounds}")
    s_lo, s_hi = scale_range
    if not 0 < s_lo <= s_hi:
        raise ConfigError("scale range must satisfy 0 < lo <= hi")
    rng = np.random.default_rng(seed)
    n = int(count)
    pos = lo + (hi - lo) * rng.random((n, 3))
    scl = rng.uniform(s_lo, s_hi, (n, 3))
    q = np.array([1.0, 0.0, 0.0, 0.0]) + 0.2 * rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q *= np.where(q[:, :1] < 0, -1.0, 1.0)
    col = rng.random((n, 3))
    gs = [GaussianPrimitive(pos[i], scl[i], q[i], col[i], opacity) for i in range(n)]
    return Scene(gs, background)


@dataclass
class Experiment:
    """Everything a training run consumes: supervised views plus held-out ground truth."""

    gt_scene: Scene
    views: list  # training View objects (image + prior)
    eval_cameras: list
    eval_images: list
    eval_depths: list
    eval_masks: list
    preset: str = "layers"


def build_experiment(preset="layers", gt_count=600, seed=0, size=64, profile=None,
                     trajectory_steps=20, n_train=3, n_eval=5) -> Experiment:
    """Preset scene, ground-truth renders, corrupted priors and their uncertainty maps.

    The ground-truth scene depends only on the preset; ``seed`` drives the prior
    noise and the uncertainty simulator.
    """
    profile = NoiseProfile.two_region() if profile is None else profile
    ps = preset_scene(preset, gt_count, seed=0, size=size, n_train=n_train, n_eval=n_eval)
    views = []
    for k, cam in enumerate(ps.train_cameras):
        with torch.no_grad():
            out = render(ps.scene, cam)
        gt = out.depth.numpy() / cam.far
        prior = corrupt_depth(gt, profile, seed=int(seed) * 1000 + k)
        prior.uncertainty = estimate_uncertainty(gt, prior.sigma_map, trajectory_steps,
                                                 seed=int(seed) * 1000 + 100 + 2 * k)
        views.append(View(cam, out.color.numpy(), prior, out.alpha_sum.numpy() > 0.5))
    ev_img, ev_d, ev_m = [], [], []
    for cam in ps.eval_cameras:
        with torch.no_grad():
            out = render(ps.scene, cam)
        ev_img.append(out.color.numpy())
        ev_d.append(out.depth.numpy())
        ev_m.append(out.alpha_sum.numpy() > 0.5)
    return Experiment(ps.scene, views, ps.eval_cameras, ev_img, ev_d, ev_m, preset)


def evaluate_scene(params, exp: Experiment, K=20):
    """Per-view (psnr, ssim, depth_rmse) on the held-out cameras."""
    out = []
    with torch.no_grad():
        for cam, img, d, m in zip(exp.eval_cameras, exp.eval_images, exp.eval_depths,
                                  exp.eval_masks):
            r = render(params, cam, K)
            c = r.color.numpy()
            # depth error in far-normalized units
            out.append((psnr(c, img), float(ssim(c, img)),
                        depth_rmse(r.depth.numpy() / cam.far, d / cam.far, m)))
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_optimizer_state(path, optimizer: torch.optim.Adam, iteration):
    """UGOPT1 layout: magic, uint32 header length, JSON header, float64 payloads."""
    header = {"iteration": int(iteration), "groups": []}
    blobs = []
    for pg in optimizer.param_groups:
        (p,) = pg["params"]
        st = optimizer.state.get(p, {})
        entry = {"name": pg["name"], "lr": pg["lr"], "shape": list(p.shape),
                 "step": float(st["step"]) if "step" in st else 0.0, "has_state": bool(st)}
        header["groups"].append(entry)
        if st:
            blobs.append(st["exp_avg"].detach().numpy().astype("<f8").tobytes())
            blobs.append(st["exp_avg_sq"].detach().numpy().astype("<f8").tobytes())
    hb = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(OPT_MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(blobs))


def load_optimizer_state(path, optimizer: torch.optim.Adam):
    raw = Path(path).read_bytes()
    if raw[:6] != OPT_MAGIC:
        raise ValidationError(f"{path}: not a UGOPT1 file")
    (n,) = struct.unpack_from("<I", raw, 6)
    header = json.loads(raw[10:10 + n])
    off = 10 + n
    by_name = {pg["name"]: pg for pg in optimizer.param_groups}
    for entry in header["groups"]:
        pg = by_name[entry["name"]]
        (p,) = pg["params"]
        if list(p.shape) != entry["shape"]:
            raise ValidationError(f"{path}: shape mismatch for group {entry['name']}")
        if not entry["has_state"]:
            continue
        size = 8 * p.numel()
        m = np.frombuffer(raw[off:off + size], dtype="<f8").reshape(p.shape).copy()
        v = np.frombuffer(raw[off + size:off + 2 * size], dtype="<f8").reshape(p.shape).copy()
        off += 2 * size
        optimizer.state[p] = {"step": torch.tensor(entry["step"]),
                              "exp_avg": torch.from_numpy(m), "exp_avg_sq": torch.from_numpy(v)}
    return header["iteration"]


def save_checkpoint(prefix, params: GaussianParams, optimizer, iteration):
    """Write ``<prefix>.scene.json`` and ``<prefix>.ugopt``; returns both paths."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    sp = prefix.with_name(prefix.name + ".scene.json")
    op = prefix.with_name(prefix.name + ".ugopt")
    sp.write_text(scene_to_json(params.to_scene()))
    save_optimizer_state(op, optimizer, iteration)
    return sp, op


class TrainingAborted(RuntimeError):
    def __init__(self, message, checkpoint=None, cause=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.cause = cause


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _make_optimizer(params: GaussianParams, cfg: TrainConfig):
    lrs = cfg.lrs()
    groups = [{"params": [getattr(params, g)], "lr": lrs[g], "name": g}
              for g in GaussianParams.GROUPS]
    return torch.optim.Adam(groups, betas=(0.9, 0.999), eps=1e-15, foreach=False)


@torch.no_grad()
def _project_constraints(params: GaussianParams, cfg: TrainConfig):
    params.scale.clamp_(min=cfg.scale_floor)
    params.opacity.clamp_(OPACITY_FLOOR, 1.0)
    params.color.clamp_(0.0, 1.0)
    # rows already unit to rounding are left alone so an untouched Gaussian stays bit-identical
    n = params.rotation.norm(dim=1, keepdim=True)
    moved = (n - 1.0).abs() > 4 * torch.finfo(n.dtype).eps
    params.rotation.copy_(torch.where(moved, params.rotation / n, params.rotation))


def _eval_row(params, exp, loss_cfg, iteration, record):
    with torch.no_grad():
        acc = {"loss": 0.0, "l_color": 0.0, "l_dn": 0.0, "l_ot": 0.0}
        for k, v in enumerate(exp.views):
            out = render(params, v.camera, loss_cfg.K)
            t = total_loss(out, torch.as_tensor(v.image), v.prior, loss_cfg, iteration=iteration,
                           far=v.camera.far, prior_valid=v.prior_valid, stream=k)
            for key, val in t.as_floats().items():
                acc[key] += val / len(exp.views)
    per = evaluate_scene(params, exp, loss_cfg.K)
    for j, (p, s, d) in enumerate(per):
        record.per_view.append((iteration, j, p, s, d))
    row = {"iteration": int(iteration), **acc,
           "psnr": float(np.mean([p[0] for p in per])),
           "ssim": float(np.mean([p[1] for p in per])),
           "depth_rmse": float(np.mean([p[2] for p in per]))}
    record.append(row)
    return row


def train(scene, exp: Experiment, cfg: TrainConfig, loss_cfg: Optional[LossConfig] = None,
          resume: Optional[str] = None, stop_at: Optional[int] = None, progress=None):
    """Optimize ``scene`` against the experiment's training views.

    Returns (final Scene, RunRecord).  One training view per iteration, chosen
    by a generator keyed by (seed, iteration); Gumbel noise and patch layouts
    are keyed the same way, so (config, seed) fixes every output.  ``resume``
    is a checkpoint prefix written by :func:`save_checkpoint`.  ``stop_at``
    ends the loop early (without the final eval row), for checkpoint tests.
    """
    loss_cfg = variant_loss_config(loss_cfg or LossConfig(), cfg.variant)
    loss_cfg = replace(loss_cfg, sampler=replace(loss_cfg.sampler, seed=int(cfg.seed)))
    if loss_cfg.lambda1 > 0 or loss_cfg.lambda2 > 0:
        if any(v.prior is None for v in exp.views):
            raise ConfigError(f"variant {cfg.variant} needs a depth prior on every view")
    start = 0
    if resume is not None:
        scene = scene_from_json(Path(str(resume) + ".scene.json").read_text())
    params = (scene.to_params() if isinstance(scene, Scene) else scene).clone()
    for t in params.tensors():
        t.requires_grad_(True)
    opt = _make_optimizer(params, cfg)
    if resume is not None:
        start = load_optimizer_state(str(resume) + ".ugopt", opt)
    record = RunRecord()
    masks = cfg.masks()
    end = int(cfg.iterations) if stop_at is None else min(int(stop_at), int(cfg.iterations))

    def abort(err, it):
        ck = cfg.checkpoint_path or "abort_checkpoint"
        paths = save_checkpoint(ck, params.clone(), opt, it)
        raise TrainingAborted(f"non-finite loss at iteration {it}: {err}", str(paths[0]), err)

    for it in range(start, end):
        if it % cfg.eval_every == 0:
            _eval_row(params, exp, loss_cfg, it, record)
            bad = validate_scene(params.to_scene())
            if bad:
                raise ValidationError(f"scene invariant broken at iteration {it}: {bad[0]}")
            if progress:
                progress(record.rows[-1])
        k = int(np.random.default_rng([int(cfg.seed), it]).integers(len(exp.views)))
        try:
            res = loss_and_grad(params, [exp.views[k]], loss_cfg, iteration=it, masks=masks)
        except NumericalError as err:
            abort(err, it)
        opt.zero_grad(set_to_none=False)
        for g in GaussianParams.GROUPS:
            getattr(params, g).grad = torch.from_numpy(res.grad[g])
        opt.step()
        _project_constraints(params, cfg)
        if cfg.checkpoint_path and (it + 1) % cfg.eval_every == 0:
            save_checkpoint(cfg.checkpoint_path, params.clone(), opt, it + 1)
    if stop_at is None or end == int(cfg.iterations):
        if not record.rows or record.rows[-1]["iteration"] != end:
            _eval_row(params, exp, loss_cfg, end, record)
    final = params.clone().to_scene()
    return final, record


# ---------------------------------------------------------------------------
# ablation and top-K sweep
# ---------------------------------------------------------------------------

ABLATION_HEADER = ("preset", "variant", "seed", "psnr", "ssim", "depth_rmse")


def ablate(presets, variants, seeds, cfg: TrainConfig, loss_cfg: Optional[LossConfig] = None,
           profile=None, gt_count=600, size=64, progress=None, keep_scenes=False):
    """Run the (preset x variant x seed) grid; returns (per-run rows, aggregate rows).

    With ``keep_scenes`` each run row also carries its trained ``scene`` and
    the ``experiment`` it was trained on.
    """
    variants = list(variants)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; expected one of {VARIANTS}")
    runs = []
    for preset in presets:
        for seed in seeds:
            exp = build_experiment(preset, gt_count, seed, size, profile)
            init = init_gaussians(cfg.gaussian_count, cfg.init_bounds, seed, cfg.init_scale)
            for v in variants:
                c = replace(cfg, variant=v, seed=int(seed), checkpoint_path=None)
                scene, rec = train(init, exp, c, loss_cfg)
                f = rec.final()
                runs.append({"preset": preset, "variant": v, "seed": int(seed), "psnr": f["psnr"],
                             "ssim": f["ssim"], "depth_rmse": f["depth_rmse"]})
                if keep_scenes:
                    runs[-1].update(scene=scene, experiment=exp)
                if progress:
                    progress(runs[-1])
    agg = []
    for preset in presets:
        for v in variants:
            sel = [r for r in runs if r["preset"] == preset and r["variant"] == v]
            row = {"preset": preset, "variant": v, "seed": "mean±std"}
            for key in ("psnr", "ssim", "depth_rmse"):
                vals = np.array([r[key] for r in sel])
                sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
                row[key] = f"{vals.mean():.6g}±{sd:.3g}"
            agg.append(row)
    return runs, agg


def ablation_csv(runs, agg):
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=ABLATION_HEADER, lineterminator="\n")
    w.writeheader()
    for r in runs:
        w.writerow({k: (_fmt(r[k]) if k in ("psnr", "ssim", "depth_rmse") else r[k])
                    for k in ABLATION_HEADER})
    for r in agg:
        w.writerow(r)
    return buf.getvalue()


def captured_weight_sweep(scene, cameras, Ks=(1, 5, 10, 20, 40)):
    """Mean over cameras of the blend-weight fraction captured by the top-K lists."""
    out = []
    with torch.no_grad():
        outs = [render(scene, cam, max(Ks)) for cam in cameras]
        for K in Ks:
            fr = []
            for o in outs:
                total = float(o.weights.sum())
                fr.append(float(o.topk_weights[..., :K].sum()) / total if total > 0 else 0.0)
            out.append(float(np.mean(fr)))
    return out


# ---------------------------------------------------------------------------
# estimator facade
# ---------------------------------------------------------------------------


class GaussianSplatModel(BaseEstimator):
    """Estimator wrapper: ``fit(experiment)`` trains, ``predict(cameras)`` renders."""

    def __init__(self, variant="ot-ugot", iterations=2000, gaussian_count=300, seed=0,
                 lr_position=TrainConfig.lr_position, lr_scale=1e-3, lr_rotation=1e-3,
                 lr_color=1e-2, lr_opacity=1e-2, eval_every=250, K=20):
        self.variant = variant
        self.iterations = iterations
        self.gaussian_count = gaussian_count
        self.seed = seed
        self.lr_position = lr_position
        self.lr_scale = lr_scale
        self.lr_rotation = lr_rotation
        self.lr_color = lr_color
        self.lr_opacity = lr_opacity
        self.eval_every = eval_every
        self.K = K

    def _configs(self):
        cfg = TrainConfig(iterations=self.iterations, lr_position=self.lr_position,
                          lr_scale=self.lr_scale, lr_rotation=self.lr_rotation,
                          lr_color=self.lr_color, lr_opacity=self.lr_opacity, seed=self.seed,
                          eval_every=self.eval_every, variant=self.variant,
                          gaussian_count=self.gaussian_count)
        return cfg, LossConfig(K=self.K)

    def fit(self, X: Experiment, y=None, init: Optional[Scene] = None):
        if not isinstance(X, Experiment):
            raise ValidationError("fit expects an Experiment")
        cfg, loss_cfg = self._configs()
        if init is None:
            init = init_gaussians(cfg.gaussian_count, cfg.init_bounds, cfg.seed, cfg.init_scale)
        self.scene_, self.record_ = train(init, X, cfg, loss_cfg)
        return self

    def predict(self, X):
        """Rendered (H, W, 3) images for a list of cameras."""
        check_is_fitted(self, "scene_")
        with torch.no_grad():
            return [render(self.scene_, cam, self.K).color.numpy() for cam in X]

    def predict_depth(self, X):
        check_is_fitted(self, "scene_")
        with torch.no_grad():
            return [render(self.scene_, cam, self.K).depth.numpy() for cam in X]

    def score(self, X: Experiment, y=None):
        """Mean held-out PSNR."""
        check_is_fitted(self, "scene_")
        return float(np.mean([p for p, _, _ in evaluate_scene(self.scene_, X, self.K)]))
