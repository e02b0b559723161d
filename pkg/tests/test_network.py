import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pinnda import autodiff as ad
from pinnda import network as nw

from conftest import max_rel_err


@pytest.mark.parametrize(
    "arch,count",
    [
        (nw.MLPArchitecture(2, 1, 1, 20), 81),
        (nw.MLPArchitecture(2, 1, 4, 24), 1897),
        (nw.MLPArchitecture(101, 1, 4, 20), 3321),
    ],
)
def test_param_count(arch, count):
    assert nw.param_count(arch) == count
    assert nw.init(arch, 0).shape == (count,)


@given(st.integers(1, 6), st.integers(1, 3), st.integers(1, 5), st.integers(1, 12))
def test_param_count_matches_layout(d, m, depth, width):
    arch = nw.MLPArchitecture(d, m, depth, width)
    assert nw.param_count(arch) == len(nw.flatten(nw.unflatten(nw.init(arch, 1), arch)))


def test_init_deterministic_and_bounded():
    arch = nw.MLPArchitecture(3, 2, 3, 16)
    a, b = nw.init(arch, 42), nw.init(arch, 42)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, nw.init(arch, 43))
    for (w, bias), (d_in, d_out) in zip(nw.unflatten(a, arch), zip(arch.layer_sizes[:-1], arch.layer_sizes[1:])):
        assert np.all(np.abs(w) <= np.sqrt(6.0 / (d_in + d_out)))
        assert not np.any(bias)


def test_init_mean_zero():
    arch = nw.MLPArchitecture(10, 1, 4, 24)
    w = np.concatenate([nw.init(arch, s)[nw.weight_mask(arch)] for s in range(6)])
    assert len(w) >= 10_000
    assert abs(w.mean()) <= 3 * w.std() / np.sqrt(len(w))


def test_zero_parameters_give_zero_jet(rng):
    arch = nw.MLPArchitecture(2, 1, 3, 8)
    x = rng.random((5, 2))
    theta = np.zeros(nw.param_count(arch))
    assert not np.any(nw.forward(theta, arch, x))
    jet = nw.forward_jet(theta, arch, x)
    assert not np.any(jet.value.value) and not np.any(jet.d1.value) and not np.any(jet.d2.value)


def test_hand_set_tanh_network(rng):
    arch = nw.MLPArchitecture(2, 1, 1, 1)
    theta = nw.flatten([(np.array([[1.0, 0.0]]), np.zeros(1)), (np.array([[1.0]]), np.zeros(1))])
    x = rng.uniform(-2, 2, (10, 2))
    np.testing.assert_allclose(nw.forward(theta, arch, x)[:, 0], np.tanh(x[:, 0]), rtol=1e-15)


def test_linear_network_has_no_curvature(rng):
    arch = nw.MLPArchitecture(3, 2, 3, 5, activation="identity")
    jet = nw.forward_jet(nw.init(arch, 1), arch, rng.random((6, 3)))
    np.testing.assert_allclose(jet.d2.value, 0.0, atol=1e-15)


@pytest.mark.parametrize("activation", ["tanh", "sigmoid"])
def test_forward_equals_jet_value_bitwise(activation, rng):
    arch = nw.MLPArchitecture(3, 3, 4, 20, activation)
    theta = nw.init(arch, 7)
    x = rng.random((64, 3))
    assert nw.forward(theta, arch, x).tobytes() == nw.forward_jet(theta, arch, x).value.value.tobytes()
    assert nw.forward(theta, arch, x).tobytes() == nw.forward_nodes(ad.constant(theta), arch, x).value.tobytes()


def test_jet_laplacian_matches_five_point_stencil(rng):
    arch = nw.MLPArchitecture(2, 1, 2, 20)
    theta = nw.init(arch, 3)
    x = rng.uniform(0.1, 0.9, (40, 2))
    h = 1e-3
    f = lambda p: nw.forward(theta, arch, p)[:, 0]  # noqa: E731
    e1, e2 = np.array([h, 0.0]), np.array([0.0, h])
    lap_fd = (f(x + e1) + f(x - e1) + f(x + e2) + f(x - e2) - 4 * f(x)) / h**2
    lap = nw.forward_jet(theta, arch, x).d2.value[:, :, 0].sum(axis=0)
    assert max_rel_err(lap, lap_fd, floor=1e-2) <= 1e-4


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_output_finite(a, b):
    arch = nw.MLPArchitecture(2, 1, 2, 4)
    theta = nw.init(arch, 0) * 50
    assert np.all(np.isfinite(nw.forward(theta, arch, np.array([[a, b]]))))


def test_architecture_validation():
    with pytest.raises(ValueError):
        nw.MLPArchitecture(0)
    with pytest.raises(ValueError):
        nw.MLPArchitecture(2, activation="relu")


def test_weight_mask_excludes_biases():
    arch = nw.MLPArchitecture(2, 1, 1, 3)
    assert nw.weight_mask(arch).tolist() == [True] * 6 + [False] * 3 + [True] * 3 + [False]


def test_checkpoint_roundtrip(tmp_path):
    arch = nw.MLPArchitecture(2, 3, 2, 5)
    theta = nw.init(arch, 8)
    path = nw.save_checkpoint(tmp_path / "c.npz", arch, theta, {"problem": "stokes"})
    arch2, theta2, extra = nw.load_checkpoint(path)
    assert arch2 == arch and theta2.tobytes() == theta.tobytes() and extra == {"problem": "stokes"}


def test_checkpoint_rejects_foreign_format(tmp_path):
    path = tmp_path / "bad.npz"
    with open(path, "wb") as fh:
        np.savez(fh, theta=np.zeros(3), meta=np.array(json.dumps({"format": "other"})))
    with pytest.raises(ValueError):
        nw.load_checkpoint(path)
