import hashlib
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from ugot.cli import main
from ugot.config import ExperimentConfig, config_from_dict, load_config
from ugot.core import ConfigError
from ugot.io import read_json, read_ugd1, write_png

TINY = ["--set", "gt_count=100", "--set", "size=32", "--set", "train.iterations=4",
        "--set", "train.eval_every=2", "--set", "train.gaussian_count=20"]


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# --------------------------------------------------------------------------- config


def test_config_defaults_and_round_trip(tmp_path):
    cfg = load_config()
    assert cfg == ExperimentConfig()
    path = tmp_path / "c.yaml"
    path.write_text(cfg.to_yaml())
    assert load_config(path) == cfg


def test_config_rejects_unknown_keys():
    for bad in ({"colour": 1}, {"train": {"lr": 1}}, {"sampler": {"seed": 3}},
                {"noise": {"regions": [{"rect": [0, 0, 1, 1], "sigma": 0.1, "x": 1}]}}):
        with pytest.raises(ConfigError):
            config_from_dict(bad)


def test_config_overrides():
    cfg = load_config(overrides=["train.iterations=7", "ot.mode=patch", "sampler.tau=0.5",
                                 "noise.base_sigma=0.02", "seed=3"])
    assert cfg.train.iterations == 7 and cfg.loss.ot.mode == "patch"
    assert cfg.loss.sampler.tau == 0.5 and cfg.noise.base_sigma == 0.02
    assert cfg.train_config().seed == 3 and cfg.loss_config().sampler.seed == 3
    with pytest.raises(ConfigError):
        load_config(overrides=["train.iterations"])


# --------------------------------------------------------------------------- init-scene / prior


def test_init_scene(tmp_path, capsys):
    out = tmp_path / "s"
    args = ["init-scene", "--preset", "layers", "--count", "500", "--seed", "7", "--size", "32",
            "--out", str(out)]
    assert main(args) == 0
    assert {p.name for p in out.iterdir()} == {"scene.json", "cameras.json", "seed.txt"}
    first = tree_digest(out)
    assert main(args) == 3
    assert main(args + ["--force"]) == 0 and tree_digest(out) == first
    assert main(["init-scene", "--preset", "pyramids", "--out", str(tmp_path / "x")]) == 2
    assert "boxes, spheres, layers" in capsys.readouterr().err
    assert main(["init-scene", "--bogus"]) == 2


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert main(["init-scene", "--preset", "layers", "--count", "300", "--size", "32",
                 "--out", str(out), "--force"]) == 0
    return out


def test_prior_zero_profile_equals_gt(scene_dir, tmp_path):
    out = tmp_path / "p"
    assert main(["prior", "--scene", str(scene_dir / "scene.json"), "--camera",
                 str(scene_dir / "cameras.json"), "--noise-profile", "zero", "--out-dir", str(out)]) == 0
    gts = sorted(out.glob("*_gt_depth.ugd"))
    assert len(gts) == 3
    for gt in gts:
        prior = gt.with_name(gt.name.replace("_gt_", "_prior_"))
        assert prior.read_bytes() == gt.read_bytes()


def test_prior_default_profile_brighter_in_noisy_half(scene_dir, tmp_path):
    out = tmp_path / "p"
    assert main(["prior", "--scene", str(scene_dir / "scene.json"), "--camera",
                 str(scene_dir / "cameras.json"), "--out-dir", str(out)]) == 0
    for png in sorted(out.glob("*_uncertainty.png")):
        img = np.asarray(Image.open(png), dtype=float)
        assert img[:, 16:].mean() > img[:, :16].mean()
    u = read_ugd1(next(out.glob("*_uncertainty.ugd")))
    assert u.shape == (32, 32) and np.all(u >= 0)


def test_prior_missing_scene_is_io_error(scene_dir, tmp_path):
    assert main(["prior", "--scene", str(tmp_path / "none.json"), "--camera",
                 str(scene_dir / "cameras.json"), "--out-dir", str(tmp_path / "p")]) == 3


# --------------------------------------------------------------------------- train / ablate


def test_train_outputs_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--variant", "l2-only", "--out-dir", str(a)] + TINY) == 0
    assert main(["train", "--variant", "l2-only", "--out-dir", str(b)] + TINY) == 0
    assert tree_digest(a) == tree_digest(b)
    summary = read_json(a / "summary.json")
    assert set(summary) == {"psnr", "ssim", "depth_rmse"}
    lines = (a / "run.csv").read_text().splitlines()
    assert len(lines) - 1 == 4 // 2 + 1
    assert (a / "seed.txt").read_text() == "0\n"
    assert len(list((a / "renders").glob("*.png"))) == 5
    cfg = load_config(a / "config.yaml")
    assert cfg.train.variant == "l2-only" and cfg.train.iterations == 4


def test_train_bad_config(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: {iterations: 0}\n")
    assert main(["train", "--config", str(bad), "--out-dir", str(tmp_path / "o")]) == 2
    bad.write_text("nonsense: 1\n")
    assert main(["train", "--config", str(bad), "--out-dir", str(tmp_path / "o")]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.yaml"), "--out-dir",
                 str(tmp_path / "o")]) == 3


def test_ablate_row_count(tmp_path, capsys):
    out = tmp_path / "ab"
    assert main(["ablate", "--variants", "l2-only,ot-ugot", "--seeds", "1,2,3", "--out-dir", str(out),
                 "--set", "train.iterations=2", "--set", "train.eval_every=2"] + TINY[:4]) == 0
    rows = (out / "ablation.csv").read_text().splitlines()
    assert len(rows) == 1 + 6 + 2
    assert sum("mean±std" in r for r in rows) == 2
    assert main(["ablate", "--variants", "l2-only,nope", "--seeds", "1",
                 "--out-dir", str(tmp_path / "x")]) == 2


# --------------------------------------------------------------------------- eval / plot


def test_eval_identical_dirs(tmp_path, capsys):
    rng = np.random.default_rng(0)
    for d in ("pred", "gt"):
        (tmp_path / d).mkdir()
    for k in range(2):
        img = rng.uniform(0, 1, (16, 16, 3))
        for d in ("pred", "gt"):
            write_png(tmp_path / d / f"v{k}.png", img)
    out = tmp_path / "m.json"
    assert main(["eval", "--pred-dir", str(tmp_path / "pred"), "--gt-dir", str(tmp_path / "gt"),
                 "--out", str(out)]) == 0
    res = read_json(out)
    assert [r["psnr"] for r in res["views"]] == [99.0, 99.0] and res["aggregate"]["ssim"] == 1.0
    (tmp_path / "gt" / "v1.png").unlink()
    assert main(["eval", "--pred-dir", str(tmp_path / "pred"), "--gt-dir", str(tmp_path / "gt")]) == 2


def test_plot(tmp_path):
    header = "iteration,loss,l_color,l_dn,l_ot,psnr,ssim,depth_rmse"
    rows = [f"{250 * i},{1 / (i + 1)},0.1,0.01,0.02,{10 + i},0.5,0.05" for i in range(9)]
    csv = tmp_path / "run.csv"
    csv.write_text("\n".join([header] + rows) + "\n")
    png = tmp_path / "fig" / "curves.png"
    assert main(["plot", "--run-csv", str(csv), "--out", str(png)]) == 0
    assert png.stat().st_size > 0 and Image.open(png).size[0] >= 640
    csv.write_text("")
    assert main(["plot", "--run-csv", str(csv), "--out", str(png)]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "ugot.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "init-scene" in res.stdout
