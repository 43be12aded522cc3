import csv

import numpy as np
import pytest

from tiface import iface, optim, scenesynth, tface, training
from tiface.checkpoint import load_checkpoint
from tiface.dataset import load_dataset
from tiface.errors import InputDomainError, TrainingError


def _small(branch, steps):
    if branch == "tface":
        s = optim.desk_tface_schedule(steps)
        s.init_resolution = 12
        s.upsample_milestones = [(m, 12 + 2 * (i + 1)) for i, (m, _) in enumerate(s.upsample_milestones)]
        s.batch_rays = 128
        return s, tface.tface_loss_config()
    s = optim.desk_iface_schedule(steps)
    s.init_resolution = 12
    s.batch_rays = (64, 256, 2048)
    return s, iface.iface_loss_config()


@pytest.fixture(scope="module")
def ds(tiny_dataset):
    return load_dataset(tiny_dataset)


@pytest.mark.parametrize("branch", ["tface", "iface"])
def test_zero_steps_returns_initial_field(ds, branch, tmp_path):
    sch, cfg = _small(branch, 0)
    init = training.init_field(branch, sch, ds.aabb, 5)
    res = training.run_training(branch, ds, sch, cfg, seed=5, checkpoint_path=tmp_path / "c.npz")
    for k, v in init.params().items():
        assert res.field.params()[k].tobytes() == v.tobytes()
    f, _, header = load_checkpoint(tmp_path / "c.npz")
    assert header["extra"]["steps"] == 0
    for k, v in init.params().items():
        assert f.params()[k].tobytes() == v.tobytes()


@pytest.mark.parametrize("branch,mode", [("tface", "l2"), ("iface", "bce")])
def test_deterministic_logs(ds, branch, mode, tmp_path):
    sch, cfg = _small(branch, 12)
    sch.log_every = 4
    a = training.run_training(branch, ds, sch, cfg, seed=3, mask_mode=mode, log_path=tmp_path / "a.csv")
    b = training.run_training(branch, ds, sch, cfg, seed=3, mask_mode=mode, log_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    for k, v in a.field.params().items():
        assert b.field.params()[k].tobytes() == v.tobytes()
    c = training.run_training(branch, ds, sch, cfg, seed=4, mask_mode=mode)
    assert c.log != a.log


def test_log_format(ds, tmp_path):
    sch, cfg = _small("tface", 10)
    sch.log_every = 3
    training.run_training("tface", ds, sch, cfg, mask_mode="ce", log_path=tmp_path / "l.csv")
    rows = list(csv.reader(open(tmp_path / "l.csv")))
    assert tuple(rows[0]) == training.LOG_COLUMNS
    assert [int(r[0]) for r in rows[1:]] == [3, 6, 9, 10]
    assert all(int(r[-1]) == 128 for r in rows[1:])


def test_upsample_happens(ds):
    sch, cfg = _small("tface", 30)
    res = training.run_training("tface", ds, sch, cfg)
    assert res.field.resolution == (sch.upsample_milestones[-1][1],) * 3


def test_dynamic_batch_moves(ds):
    sch, cfg = _small("iface", 3)
    res = training.run_training("iface", ds, sch, cfg, mask_mode="bce")
    lo, hi, _ = sch.batch_rays
    assert all(lo <= r[-1] <= hi for r in res.log)


def test_inv_std_floor(ds):
    sch, cfg = _small("iface", 2)
    f = training.init_field("iface", sch, ds.aabb, 0, inv_std=iface.INV_STD_FLOOR)
    res = training.run_training("iface", ds, sch, cfg, field=f)
    assert res.field.inv_std[0] >= iface.INV_STD_FLOOR


def test_non_finite_aborts_with_snapshot(ds, tmp_path):
    sch, cfg = _small("tface", 5)
    f = training.init_field("tface", sch, ds.aabb, 0)
    f.sh_map[0, 0] = np.nan
    with pytest.raises(TrainingError, match="snapshot"):
        training.run_training("tface", ds, sch, cfg, field=f, checkpoint_path=tmp_path / "c.npz")
    assert list(tmp_path.glob("c_abort_*.npz"))


def test_mask_mode_validation(ds):
    sch, cfg = _small("iface", 1)
    with pytest.raises(InputDomainError):
        training.run_training("iface", ds, sch, cfg, mask_mode="l2")
    with pytest.raises(InputDomainError):
        training.run_training("nerf", ds, sch, cfg)


def test_composite_target():
    rgb = np.array([[1.0, 0.5, 0.0], [0.2, 0.2, 0.2]])
    out = training.composite_target(rgb, np.array([1.0, 0.0]), 0.3)
    np.testing.assert_array_equal(out, [[1.0, 0.5, 0.0], [0.3, 0.3, 0.3]])


def test_render_view_shapes(ds):
    sch, _ = _small("iface", 0)
    f = training.init_field("iface", sch, ds.aabb, 0)
    rgb, op, depth, normal = training.render_view(f, ds.cameras[0], 16)
    assert rgb.shape == (32, 32, 3) and op.shape == depth.shape == (32, 32) and normal.shape == (32, 32, 3)
    assert training.render_view(training.init_field("tface", _small("tface", 0)[0], ds.aabb, 0),
                                ds.cameras[0], 8)[3] is None


def test_overfit_single_view(tmp_path):
    scene = scenesynth.default_scene(2, 32, halos=False, subject="sphere")
    scenesynth.export_dataset(scene, scene.rig, (32, 32), tmp_path / "ds", held_out=[1])
    one = load_dataset(tmp_path / "ds")
    sch = optim.desk_tface_schedule(500)
    sch.batch_rays = 256
    sch.q_count = 32
    res = training.run_training("tface", one, sch, tface.tface_loss_config(), mask_mode="rgba")
    rgb, *_ = training.render_view(res.field, one.cameras[0], sch.q_count)
    mse = np.mean((rgb - one.images[0]) ** 2)
    assert 10 * np.log10(1 / mse) > 30.0
