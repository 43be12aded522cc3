import numpy as np
import pytest

from tiface.checkpoint import load_checkpoint, save_checkpoint
from tiface.errors import InputDomainError
from tiface.iface import init_sdf_field
from tiface.npzio import save_npz
from tiface.optim import AdamState, adam_step
from tiface.tface import init_vm_field

AABB = np.array([[-1.0] * 3, [1.0] * 3])


def _trained_state(field, rng):
    st = AdamState(beta2=0.95, weight_decay=0.01)
    params = field.params()
    adam_step(st, params, {k: rng.normal(size=v.shape) for k, v in params.items()})
    return st


@pytest.mark.parametrize("kind", ["tface", "iface"])
def test_round_trip_bit_exact(tmp_path, rng, kind):
    if kind == "tface":
        f = init_vm_field((5, 6, 7), AABB, 2, 3, seed=1, density_scale=7.0)
    else:
        f = init_sdf_field((5, 6, 7), AABB, seed=1, inv_std=12.5)
    f.meta["note"] = "x"
    st = _trained_state(f, rng)
    save_checkpoint(tmp_path / "c.npz", f, st, extra={"steps": 3})
    g, st2, header = load_checkpoint(tmp_path / "c.npz")
    assert type(g) is type(f) and header["extra"] == {"steps": 3} and g.meta == {"note": "x"}
    assert tuple(g.resolution) == tuple(f.resolution)
    for k, v in f.params().items():
        assert g.params()[k].tobytes() == v.tobytes()
    assert st2.step_count == 1 and st2.beta2 == 0.95 and st2.weight_decay == 0.01
    for k in st.first_moment:
        assert st2.first_moment[k].tobytes() == st.first_moment[k].tobytes()
        assert st2.second_moment[k].tobytes() == st.second_moment[k].tobytes()
    if kind == "tface":
        assert (g.density_shift, g.density_scale) == (f.density_shift, f.density_scale)


def test_save_is_byte_identical(tmp_path):
    f = init_vm_field((4, 4, 4), AABB, seed=2)
    save_checkpoint(tmp_path / "a.npz", f)
    save_checkpoint(tmp_path / "b.npz", f)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


def test_without_state(tmp_path):
    save_checkpoint(tmp_path / "a.npz", init_sdf_field((4, 4, 4), AABB))
    _, st, _ = load_checkpoint(tmp_path / "a.npz")
    assert st is None


def test_foreign_npz(tmp_path):
    save_npz(tmp_path / "x.npz", a=np.zeros(3))
    with pytest.raises(InputDomainError):
        load_checkpoint(tmp_path / "x.npz")


def test_npz_readable_by_numpy(tmp_path):
    save_npz(tmp_path / "x.npz", a=np.arange(5.0), b=np.eye(2, dtype=np.float32))
    with np.load(tmp_path / "x.npz") as z:
        np.testing.assert_array_equal(z["a"], np.arange(5.0))
        assert z["b"].dtype == np.float32
