"""Command-line entry point: ``ugot <command> ...``.

Exit codes: 0 ok, 2 usage/config, 3 I/O, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import io as uio
from .config import ExperimentConfig, load_config
from .core import (ConfigError, NumericalError, ValidationError, cameras_from_json,
                   cameras_to_json, scene_from_json, scene_to_json)
from .metrics import evaluate
from .priors import PRESETS, NoiseProfile, corrupt_depth, preset_scene
from .renderer import render
from .trainer import (VARIANTS, RunRecord, TrainingAborted, ablate, ablation_csv,
                      build_experiment, init_gaussians, train)
from .uncertainty import estimate_uncertainty

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("ugot")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _prepare_dir(path, force):
    """Create an output directory; refuse to reuse a non-empty one without --force."""
    p = Path(path)
    if p.exists() and (not p.is_dir() or any(p.iterdir())):
        if not force:
            raise FileExistsError(f"{p} exists; pass --force to overwrite")
        if p.is_dir():
            shutil.rmtree(p)
        else:
            p.unlink()
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_seed(out, seed):
    (Path(out) / "seed.txt").write_text(f"{int(seed)}\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_init_scene(args):
    if args.preset not in PRESETS:
        raise ConfigError(f"unknown preset {args.preset!r}; valid presets: {', '.join(PRESETS)}")
    out = _prepare_dir(args.out, args.force)
    ps = preset_scene(args.preset, args.count, seed=args.seed, size=args.size)
    (out / "scene.json").write_text(scene_to_json(ps.scene))
    (out / "cameras.json").write_text(cameras_to_json(ps.cameras, ps.splits))
    _write_seed(out, args.seed)
    print(f"wrote {out / 'scene.json'} and {out / 'cameras.json'}")


def _noise_profile(spec):
    if spec in (None, "two-region"):
        return NoiseProfile.two_region()
    if spec == "zero":
        return NoiseProfile.zero()
    p = Path(spec)
    if not p.exists():
        raise ConfigError(f"noise profile {spec!r} is neither 'two-region', 'zero' nor a file")
    from .config import config_from_dict
    import yaml

    return config_from_dict({"noise": yaml.safe_load(p.read_text())}).noise


def cmd_prior(args):
    scene = scene_from_json(Path(args.scene).read_text())
    cams, splits = cameras_from_json(Path(args.camera).read_text())
    profile = _noise_profile(args.noise_profile)
    out = _prepare_dir(args.out_dir, args.force)
    picked = [(k, c) for k, (c, s) in enumerate(zip(cams, splits)) if s == "train"] or \
        list(enumerate(cams))
    for k, cam in picked:
        with torch.no_grad():
            r = render(scene, cam)
        gt = r.depth.numpy() / cam.far
        prior = corrupt_depth(gt, profile, seed=args.seed * 1000 + k)
        unc = estimate_uncertainty(gt, prior.sigma_map, args.trajectory_steps,
                                   seed=args.seed * 1000 + 100 + 2 * k)
        stem = f"view{k:02d}"
        uio.write_ugd1(out / f"{stem}_gt_depth.ugd", gt)
        uio.write_ugd1(out / f"{stem}_prior_depth.ugd", prior.depth)
        uio.write_ugd1(out / f"{stem}_sigma.ugd", prior.sigma_map)
        uio.write_ugd1(out / f"{stem}_uncertainty.ugd", unc)
        uio.write_png(out / f"{stem}_prior_depth.png", prior.depth, 0.0, 1.0)
        uio.write_png(out / f"{stem}_uncertainty.png", unc)
    _write_seed(out, args.seed)
    print(f"wrote priors for {len(picked)} view(s) to {out}")


def _write_run_outputs(out, cfg: ExperimentConfig, exp, scene, record):
    (out / "run.csv").write_text(record.to_csv())
    (out / "scene.json").write_text(scene_to_json(scene))
    (out / "config.yaml").write_text(cfg.to_yaml())
    uio.write_json(out / "summary.json", record.summary())
    rd, gd = out / "renders", out / "gt"
    rd.mkdir()
    gd.mkdir()
    with torch.no_grad():
        for j, cam in enumerate(exp.eval_cameras):
            r = render(scene, cam)
            uio.write_png(rd / f"eval{j:02d}.png", r.color.numpy())
            uio.write_ugd1(rd / f"eval{j:02d}_depth.ugd", r.depth.numpy())
            uio.write_png(gd / f"eval{j:02d}.png", exp.eval_images[j])
            uio.write_ugd1(gd / f"eval{j:02d}_depth.ugd",
                           np.where(exp.eval_masks[j], exp.eval_depths[j], np.nan))


def cmd_train(args):
    cfg = load_config(args.config, args.set)
    variant = args.variant or cfg.train.variant
    out = _prepare_dir(args.out_dir or cfg.out_dir, args.force)
    tcfg = cfg.train_config(variant=variant,
                            checkpoint_path=str(out / "checkpoint" / "last"))
    exp = build_experiment(cfg.preset, cfg.gt_count, cfg.seed, cfg.size, cfg.noise,
                           cfg.trajectory_steps)
    init = init_gaussians(tcfg.gaussian_count, tcfg.init_bounds, cfg.seed, tcfg.init_scale)
    _write_seed(out, cfg.seed)

    def progress(row):
        log.info("iter %d loss %.5f psnr %.3f depth_rmse %.4f", row["iteration"], row["loss"],
                 row["psnr"], row["depth_rmse"])

    try:
        scene, record = train(init, exp, tcfg, cfg.loss_config(), progress=progress)
    except TrainingAborted as err:
        print(f"training aborted: {err}; last finite state in {err.checkpoint}", file=sys.stderr)
        return EXIT_NUMERICAL
    # the periodic checkpoint is only needed for aborts
    shutil.rmtree(out / "checkpoint", ignore_errors=True)
    _write_run_outputs(out, replace(cfg, train=replace(cfg.train, variant=variant)), exp, scene,
                       record)
    print(f"final psnr {record.final()['psnr']:.3f} ssim {record.final()['ssim']:.4f} "
          f"depth_rmse {record.final()['depth_rmse']:.4f}; outputs in {out}")
    return EXIT_OK


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as err:
        raise ConfigError(f"bad integer list {text!r}") from err


def cmd_ablate(args):
    cfg = load_config(args.config, args.set)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if len(variants) < 1:
        raise ConfigError("need at least one variant")
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; expected one of {', '.join(VARIANTS)}")
    seeds = _int_list(args.seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    out = _prepare_dir(args.out_dir or cfg.out_dir, args.force)

    def progress(r):
        log.info("%s seed %d: psnr %.3f depth_rmse %.4f", r["variant"], r["seed"], r["psnr"],
                 r["depth_rmse"])

    runs, agg = ablate([cfg.preset], variants, seeds, cfg.train_config(), cfg.loss_config(),
                       cfg.noise, cfg.gt_count, cfg.size, progress=progress)
    (out / "ablation.csv").write_text(ablation_csv(runs, agg))
    (out / "config.yaml").write_text(cfg.to_yaml())
    _write_seed(out, cfg.seed)
    sys.stdout.write(ablation_csv(runs, agg))
    return EXIT_OK


def _views(d):
    d = Path(d)
    if not d.is_dir():
        raise FileNotFoundError(f"{d} is not a directory")
    return sorted(p.name for p in d.glob("*.png"))


def cmd_eval(args):
    pred, gt = _views(args.pred_dir), _views(args.gt_dir)
    if len(pred) != len(gt) or not pred:
        raise UsageError(f"view count mismatch: {len(pred)} predicted vs {len(gt)} ground truth")
    if pred != gt:
        raise UsageError("predicted and ground-truth view names differ")
    rows = []
    for name in pred:
        pi = uio.read_png(Path(args.pred_dir) / name)[..., :3]
        gi = uio.read_png(Path(args.gt_dir) / name)[..., :3]
        stem = name[:-4]
        pd_, gd_ = Path(args.pred_dir) / f"{stem}_depth.ugd", Path(args.gt_dir) / f"{stem}_depth.ugd"
        if pd_.exists() and gd_.exists():
            gdm = uio.read_ugd1(gd_)
            rep = evaluate(pi, gi, uio.read_ugd1(pd_), np.nan_to_num(gdm), np.isfinite(gdm))
        else:
            rep = evaluate(pi, gi)
        rows.append({"view": stem, **rep.to_dict()})
    agg = {k: float(np.mean([r[k] for r in rows])) for k in ("psnr", "ssim", "depth_rmse")}
    result = {"views": rows, "aggregate": agg}
    if args.out:
        uio.write_json(args.out, result)
    for r in rows:
        print(f"{r['view']}: psnr {r['psnr']:.3f} ssim {r['ssim']:.4f} depth_rmse {r['depth_rmse']:.4f}")
    print(f"aggregate: psnr {agg['psnr']:.3f} ssim {agg['ssim']:.4f} depth_rmse {agg['depth_rmse']:.4f}")
    return EXIT_OK


def cmd_plot(args):
    text = Path(args.run_csv).read_text()
    try:
        rec = RunRecord.from_csv(text)
    except (ValidationError, KeyError, ValueError) as err:
        raise UsageError(f"{args.run_csv}: {err}") from err
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    it = [r["iteration"] for r in rec.rows]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), dpi=80)
    for key in ("loss", "l_color", "l_dn", "l_ot"):
        axes[0].plot(it, [r[key] for r in rec.rows], marker="o", label=key)
    axes[0].set_xlabel("iteration")
    axes[0].set_title("loss terms")
    axes[0].legend()
    axes[1].plot(it, [r["psnr"] for r in rec.rows], marker="o", color="tab:green")
    axes[1].set_xlabel("iteration")
    axes[1].set_title("held-out PSNR (dB)")
    fig.tight_layout()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the PNG byte-stable
    fig.savefig(args.out, format="png", metadata={"Software": None})
    plt.close(fig)
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="ugot", description="Uncertainty-guided OT depth supervision for 3D Gaussians")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("init-scene", help="write a preset scene and its cameras")
    s.add_argument("--preset", required=True, help=f"one of {', '.join(PRESETS)}")
    s.add_argument("--count", type=int, default=600)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_init_scene)

    s = sub.add_parser("prior", help="corrupted depth priors and uncertainty maps per view")
    s.add_argument("--scene", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--noise-profile", default="two-region",
                   help="'two-region', 'zero' or a YAML file with a noise section")
    s.add_argument("--trajectory-steps", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_prior)

    for name, helptext in (("train", "train one variant"), ("ablate", "run a variant x seed grid")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", help="experiment YAML file (defaults apply when omitted)")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. train.iterations=500")
        s.add_argument("--out-dir")
        s.add_argument("--force", action="store_true")
        if name == "train":
            s.add_argument("--variant", choices=VARIANTS)
            s.set_defaults(func=cmd_train)
        else:
            s.add_argument("--variants", required=True, help="comma-separated variant names")
            s.add_argument("--seeds", required=True, help="comma-separated integer seeds")
            s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("eval", help="metrics between predicted and ground-truth view folders")
    s.add_argument("--pred-dir", required=True)
    s.add_argument("--gt-dir", required=True)
    s.add_argument("--out", help="write the metric JSON here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot", help="loss and PSNR curves from a run CSV")
    s.add_argument("--run-csv", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        code = args.func(args)
        return EXIT_OK if code is None else code
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValidationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, TrainingAborted) as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
