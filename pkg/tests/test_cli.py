import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from tiface import cli, images
from tiface.checkpoint import load_checkpoint
from tiface.dataset import load_dataset


def digest(root):
    """Hash of every artifact except the config echo, which records the output path."""
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "config.json":
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def run(*args):
    return cli.main([str(a) for a in args])


TINY_TRAIN = ("--steps", 4, "--resolution", 8, "--milestones", "", "--batch", 64, "--q", 16, "--log-every", 2)


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    assert run("synth", "--out", out, "--cameras", 4, "--resolution", 24, "--held-out-count", 1, "--seed", 7) == 0
    return out


@pytest.fixture(scope="module")
def trained(synth, tmp_path_factory):
    runs = {}
    for branch in ("tface", "iface"):
        out = tmp_path_factory.mktemp(branch)
        assert run("train", "--data", synth, "--out", out, "--branch", branch, *TINY_TRAIN) == 0
        runs[branch] = out
    return runs


class TestSynth:
    def test_default_counts(self):
        d = cli.DEFAULTS["synth"]
        assert (d["cameras"], d["held_out_count"], d["resolution"]) == (20, 4, 128)

    def test_deterministic(self, synth, tmp_path):
        assert run("synth", "--out", tmp_path / "b", "--cameras", 4, "--resolution", 24, "--held-out-count", 1,
                   "--seed", 7) == 0
        assert digest(synth) == digest(tmp_path / "b")

    def test_one_camera_rejected_before_writing(self, tmp_path):
        assert run("synth", "--out", tmp_path / "x", "--cameras", 1) == 2
        assert not (tmp_path / "x").exists()

    def test_config_echo(self, synth):
        cfg = json.loads((synth / "config.json").read_text())
        assert cfg["command"] == "synth" and cfg["seed"] == 7


class TestConfig:
    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"cameras": 3, "bogus": 1}))
        assert run("synth", "--out", tmp_path / "o", "--config", tmp_path / "c.json") == 2
        assert not (tmp_path / "o").exists()

    def test_flags_override_file(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"cameras": 3, "resolution": 16}))
        cfg = cli.resolve_config("synth", {"config": str(tmp_path / "c.json"), "out": "x", "cameras": 5})
        assert (cfg["cameras"], cfg["resolution"]) == (5, 16)

    def test_missing_required(self):
        assert run("train", "--branch", "tface") == 2

    def test_bad_config_file(self, tmp_path):
        (tmp_path / "c.json").write_text("[1, 2]")
        assert run("synth", "--out", tmp_path / "o", "--config", tmp_path / "c.json") == 2


def _preset(name):
    cfg = cli.resolve_config("train", {"data": "d", "out": "o", "preset": name})
    return cli.resolve_schedule(cfg)


class TestPresets:
    def test_paper_tface(self):
        branch, s = _preset("paper-tface")
        assert branch == "tface"
        assert s.total_steps == 50000 and s.batch_rays == 4096
        assert s.init_resolution == 128 and s.upsample_milestones[-1][1] == 300
        assert [m for m, _ in s.upsample_milestones] == [2000, 3000, 4000, 5500, 7000]
        assert (s.lr_tensor, s.lr_decoder) == (0.02, 0.001)
        assert (s.beta1, s.beta2, s.optimizer) == (0.9, 0.99, "adam")

    def test_paper_iface(self):
        branch, s = _preset("paper-iface")
        assert branch == "iface"
        assert (s.total_steps, s.optimizer, s.lr_tensor) == (20000, "adamw", 0.01)
        assert s.batch_rays[:2] == (256, 8192) and (s.beta1, s.beta2) == (0.9, 0.99)

    def test_branch_conflict(self):
        cfg = cli.resolve_config("train", {"data": "d", "out": "o", "preset": "paper-iface", "branch": "tface"})
        with pytest.raises(cli.ConfigError):
            cli.resolve_schedule(cfg)

    def test_desk_defaults(self):
        cfg = cli.resolve_config("train", {"data": "d", "out": "o", "branch": "tface"})
        _, s = cli.resolve_schedule(cfg)
        assert s.total_steps == 2000 and s.init_resolution == 32 and s.upsample_milestones[-1][1] == 96
        cfg = cli.resolve_config("train", {"data": "d", "out": "o", "branch": "iface"})
        assert cli.resolve_schedule(cfg)[1].total_steps == 1500


class TestTrain:
    def test_outputs(self, trained):
        for branch, out in trained.items():
            f, _, header = load_checkpoint(out / "checkpoint.npz")
            assert header["extra"]["branch"] == branch and header["extra"]["steps"] == 4
            rows = list(csv.reader(open(out / "loss_log.csv")))
            assert rows[0][0] == "step" and len(rows) == 3
            assert json.loads((out / "config.json").read_text())["resolved_branch"] == branch

    def test_deterministic(self, synth, trained, tmp_path):
        assert run("train", "--data", synth, "--out", tmp_path, "--branch", "tface", *TINY_TRAIN) == 0
        for name in ("checkpoint.npz", "loss_log.csv"):
            assert (tmp_path / name).read_bytes() == (trained["tface"] / name).read_bytes()

    def test_missing_masks_names_flag(self, synth, tmp_path, capsys):
        bare = tmp_path / "bare"
        bare.mkdir()
        for name in ("poses.txt", "dataset.json"):
            (bare / name).write_bytes((synth / name).read_bytes())
        (bare / "images").mkdir()
        for p in (synth / "images").iterdir():
            (bare / "images" / p.name).write_bytes(p.read_bytes())
        assert run("train", "--data", bare, "--out", tmp_path / "o", "--branch", "tface", *TINY_TRAIN) == 2
        assert "--masks" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()
        assert run("train", "--data", bare, "--out", tmp_path / "o", "--branch", "tface", "--mask-mode", "none",
                   *TINY_TRAIN) == 0

    def test_bad_mask_mode(self, synth, tmp_path):
        assert run("train", "--data", synth, "--out", tmp_path / "o", "--branch", "iface", "--mask-mode", "l2") == 2
        assert not (tmp_path / "o").exists()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_runtime_error_exit_code(self, synth, tmp_path):
        assert run("train", "--data", synth, "--out", tmp_path / "o", "--branch", "tface", "--lr-tensor", "1e300",
                   *TINY_TRAIN) == 3


class TestRender:
    def test_zero_step_background(self, synth, tmp_path):
        assert run("train", "--data", synth, "--out", tmp_path / "t", "--branch", "tface", "--steps", 0,
                   "--resolution", 8, "--milestones", "") == 0
        assert run("render", "--checkpoint", tmp_path / "t" / "checkpoint.npz", "--data", synth,
                   "--out", tmp_path / "r", "--background", 0.4) == 0
        (png,) = (tmp_path / "r").glob("*_rgb.png")
        assert np.max(np.abs(images.read_rgb(png) - 0.4)) <= 1.5 / 255

    def test_deterministic(self, synth, trained, tmp_path):
        for k in ("a", "b"):
            assert run("render", "--checkpoint", trained["iface"] / "checkpoint.npz", "--data", synth,
                       "--out", tmp_path / k, "--views", "all", "--q", 16) == 0
        assert digest(tmp_path / "a") == digest(tmp_path / "b")

    def test_iface_outputs(self, synth, trained, tmp_path):
        assert run("render", "--checkpoint", trained["iface"] / "checkpoint.npz", "--data", synth,
                   "--out", tmp_path, "--q", 16) == 0
        name = load_dataset(synth).names[load_dataset(synth).held_out[0]]
        for kind in ("rgb", "depth", "normal"):
            assert (tmp_path / f"{name}_{kind}.png").exists()

    def test_missing_checkpoint(self, synth, tmp_path):
        assert run("render", "--checkpoint", tmp_path / "nope.npz", "--data", synth, "--out", tmp_path / "o") == 2


class TestMaskgenEnsembleEval:
    def test_maskgen_three_values(self, synth, tmp_path):
        assert run("maskgen", "--data", synth, "--out", tmp_path, "--erode", 3, "--dilate", 3) == 0
        tri = images.read_trimap(next((tmp_path / "trimaps").glob("*.png")))
        from PIL import Image
        raw = np.asarray(Image.open(next((tmp_path / "trimaps").glob("*.png"))))
        assert set(np.unique(raw)) == {0, 128, 255} and tri.shape == (24, 24)

    def test_ensemble_identity_copy(self, synth, trained, tmp_path):
        assert run("render", "--checkpoint", trained["tface"] / "checkpoint.npz", "--data", synth,
                   "--out", tmp_path / "r", "--q", 16) == 0
        assert run("ensemble", "--inputs", tmp_path / "r", "--weights", 1.0, "--out", tmp_path / "e") == 0
        for p in (tmp_path / "r").glob("*_rgb.png"):
            assert (tmp_path / "e" / p.name).read_bytes() == p.read_bytes()

    def test_ensemble_default_weights_and_sum(self, tmp_path):
        assert cli.DEFAULTS["ensemble"]["weights"] == [0.1, 0.6, 0.3]
        for k in "abc":
            (tmp_path / k).mkdir()
        assert run("ensemble", "--inputs", *(tmp_path / k for k in "ab"), "--weights", 0.5, 0.6,
                   "--out", tmp_path / "o") == 2

    def test_eval_identical(self, synth, tmp_path):
        ref = tmp_path / "ref"
        ref.mkdir()
        for p in (synth / "images").glob("*.png"):
            (ref / p.name).write_bytes(p.read_bytes())
        assert run("eval", "--renders", ref, "--reference", ref, "--masks", synth / "masks",
                   "--out", tmp_path / "o") == 0
        s = json.loads((tmp_path / "o" / "summary.json").read_text())
        assert s["mean"]["psnr_full"] == 99.0 and s["mean"]["ssim_full"] == 1.0
        assert s["mean"]["psnr_masked"] == 99.0
        rows = list(csv.reader(open(tmp_path / "o" / "report.csv")))
        assert tuple(rows[0]) == ("view", "psnr_full", "ssim_full", "psnr_masked", "ssim_masked")


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "tiface", "synth", "--out", tmp_path / "d", "--cameras", "0"],
                         capture_output=True, text=True)
    assert out.returncode == 2 and "cameras" in out.stderr
