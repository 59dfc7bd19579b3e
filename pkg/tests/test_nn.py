import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gandensity import nn
from gandensity.nn import CheckpointError, LayerSpec, NetworkSpec, ParameterSet, ShapeError


def single_layer(w, activation="identity", b=None):
    w = np.asarray(w, dtype=float)
    spec = NetworkSpec(w.shape[1], (LayerSpec(w.shape[0], activation),))
    b = np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=float)
    return spec, ParameterSet([w], [b])


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


def tanh_net(seed=3, widths=(4, 16, 16, 6), std=1.0):
    spec = NetworkSpec(widths[0], tuple(LayerSpec(w, "tanh") for w in widths[1:-1])
                       + (LayerSpec(widths[-1], "identity"),))
    params = nn.init_parameters(spec, seed, std=std, fan_in=True)
    rng = np.random.default_rng(seed)
    params.biases = [rng.normal(0, 0.3, b.shape) for b in params.biases]
    return spec, params


# -- specs ---------------------------------------------------------------------

def test_layer_spec_rejects_bad_slope_and_activation():
    with pytest.raises(ValueError):
        LayerSpec(3, "leaky_relu", slope=1.0)
    with pytest.raises(ValueError):
        LayerSpec(3, "leaky_relu", slope=0.0)
    with pytest.raises(ValueError):
        LayerSpec(3, "swish")
    with pytest.raises(ValueError):
        LayerSpec(0)


def test_mismatched_layer_widths_rejected_before_init():
    with pytest.raises(ValueError):
        NetworkSpec(2, (LayerSpec(4, "tanh"), LayerSpec(3, in_dim=5)))
    with pytest.raises(ValueError):
        NetworkSpec(2, ())


def test_parameter_check_catches_wrong_shapes():
    spec = NetworkSpec.mlp(2, (3,), 1)
    params = nn.init_parameters(spec, 0)
    params.weights[0] = np.zeros((3, 3))
    with pytest.raises(ShapeError):
        params.check(spec)


# -- init ------------------------------------------------------------------------

def test_init_entries_within_five_sigma_and_zero_bias():
    spec, _ = single_layer(np.eye(2))
    params = nn.init_parameters(spec, 7)
    assert np.all(np.abs(params.weights[0]) <= 0.1)
    assert np.all(params.biases[0] == 0.0)


def test_init_is_deterministic_per_seed():
    spec = NetworkSpec.mlp(3, (5, 5), 2)
    a, b = nn.init_parameters(spec, 42), nn.init_parameters(spec, 42)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    c = nn.init_parameters(spec, 43)
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_init_std_matches_point_zero_two():
    spec = NetworkSpec.mlp(200, (), 200)
    w = nn.init_parameters(spec, 0).weights[0]
    # 40k draws: the sample std is within 2% of 0.02 with overwhelming probability
    assert abs(w.std() - 0.02) < 0.02 * 0.02


# -- forward ----------------------------------------------------------------------

def test_forward_identity_and_relu_examples():
    spec, params = single_layer(np.eye(2))
    out, _ = nn.forward(spec, params, np.array([1.5, -2.0]))
    assert out.tolist() == [1.5, -2.0]
    spec, params = single_layer(np.eye(2), "relu")
    out, _ = nn.forward(spec, params, np.array([1.5, -2.0]))
    assert out.tolist() == [1.5, 0.0]


PINNED_2_8_3 = [0.6524225514251184, -0.15343317019543878, -0.8074177580875086]


def test_forward_regression_pin_with_scalar_recomputation():
    spec = NetworkSpec.mlp(2, (8,), 3, "tanh", "tanh")
    params = nn.init_parameters(spec, 11, std=1.0)
    out, trace = nn.forward(spec, params, np.array([0.3, 0.7]))
    # independent recomputation, one scalar at a time
    a = [0.3, 0.7]
    for w, b in zip(params.weights, params.biases):
        a = [math.tanh(sum(w[i, j] * a[j] for j in range(len(a))) + b[i]) for i in range(w.shape[0])]
    np.testing.assert_allclose(out, a, rtol=0, atol=1e-14)
    np.testing.assert_allclose(out, PINNED_2_8_3, rtol=0, atol=1e-14)
    assert len(trace.pre) == len(trace.post) == 2


def test_forward_rejects_dimension_mismatch():
    spec = NetworkSpec.mlp(3, (4,), 2)
    params = nn.init_parameters(spec, 0)
    with pytest.raises(ShapeError):
        nn.forward(spec, params, np.zeros(2))
    with pytest.raises(ShapeError):
        nn.forward(spec, params, np.zeros((5, 4)))


def test_forward_batch_matches_single_and_is_deterministic():
    spec, params = tanh_net()
    x = np.random.default_rng(0).standard_normal((7, 4))
    batch, _ = nn.forward(spec, params, x)
    again, _ = nn.forward(spec, params, x)
    assert np.array_equal(batch, again)
    for i in range(7):
        np.testing.assert_allclose(nn.predict(spec, params, x[i]), batch[i], rtol=0, atol=1e-15)


def test_all_activations_evaluate():
    h = np.array([-2.0, 0.0, 3.0])
    for act in nn.ACTIVATIONS:
        spec, params = single_layer(np.eye(3), act)
        out = nn.predict(spec, params, h)
        assert out.shape == (3,) and np.all(np.isfinite(out))
    spec, params = single_layer(np.eye(1), "sigmoid")
    assert nn.predict(spec, params, np.array([800.0]))[0] == 1.0
    assert nn.predict(spec, params, np.array([-800.0]))[0] == 0.0


finite = st.floats(-10, 10, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), finite, finite)
def test_affine_networks_are_linear_without_bias(seed, alpha, beta):
    spec = NetworkSpec(3, (LayerSpec(5), LayerSpec(2)))
    params = nn.init_parameters(spec, seed, std=1.0)
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(3), rng.standard_normal(3)
    lhs = nn.predict(spec, params, alpha * x + beta * y)
    rhs = alpha * nn.predict(spec, params, x) + beta * nn.predict(spec, params, y)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * (1 + abs(alpha) + abs(beta)))


# -- backward -----------------------------------------------------------------------

def test_backward_identity_network():
    spec, params = single_layer(np.eye(2))
    _, trace = nn.forward(spec, params, np.array([0.4, -1.0]))
    g_in, _ = nn.backward(spec, params, trace, np.array([1.0, 0.0]))
    assert g_in.tolist() == [1.0, 0.0]


def test_backward_linear_weight_gradient_is_outer_product():
    w = np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 2.0]])
    spec, params = single_layer(w)
    x, g = np.array([0.2, -0.3, 0.9]), np.array([1.5, -0.5])
    _, trace = nn.forward(spec, params, x)
    g_in, grads = nn.backward(spec, params, trace, g)
    np.testing.assert_array_equal(grads.weights[0], np.outer(g, x))
    np.testing.assert_array_equal(grads.biases[0], g)
    np.testing.assert_allclose(g_in, w.T @ g)


def test_backward_rejects_mismatched_gradient_shape():
    spec, params = tanh_net()
    _, trace = nn.forward(spec, params, np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        nn.backward(spec, params, trace, np.zeros((2, 5)))


def _loss(spec, params, x, target):
    out = nn.predict(spec, params, x)
    return 0.5 * float(np.sum((out - target) ** 2))


def test_backward_matches_finite_differences():
    spec, params = tanh_net(seed=5)
    rng = np.random.default_rng(1)
    x, target = rng.standard_normal((6, 4)), rng.standard_normal((6, 6))
    out, trace = nn.forward(spec, params, x)
    g_in, grads = nn.backward(spec, params, trace, out - target)
    h = 1e-5
    for li in range(len(spec.layers)):
        for arr, grad in ((params.weights[li], grads.weights[li]), (params.biases[li], grads.biases[li])):
            fd = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                keep = arr[idx]
                arr[idx] = keep + h
                up = _loss(spec, params, x, target)
                arr[idx] = keep - h
                down = _loss(spec, params, x, target)
                arr[idx] = keep
                fd[idx] = (up - down) / (2 * h)
            assert rel_err(grad, fd) < 1e-6
    fd_in = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd_in[idx] = (_loss(spec, params, xp, target) - _loss(spec, params, xm, target)) / (2 * h)
    assert rel_err(g_in, fd_in) < 1e-6


def test_partial_backward_from_hidden_layer():
    spec, params = tanh_net(seed=2)
    x = np.random.default_rng(2).standard_normal((3, 4))
    _, trace = nn.forward(spec, params, x)
    feat = trace.post[0]
    g = np.ones_like(feat)
    g_in, grads = nn.backward(spec, params, trace, g, from_layer=0)
    # only the first layer receives gradient
    assert np.any(grads.weights[0] != 0)
    assert all(np.all(w == 0) for w in grads.weights[1:])
    d = 1.0 - feat ** 2
    np.testing.assert_allclose(g_in, (g * d) @ params.weights[0], rtol=1e-13)


# -- Jacobians ------------------------------------------------------------------------

def test_jacobian_of_affine_map_is_its_matrix():
    a = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.25]])
    spec, params = single_layer(a, b=[1.0, -2.0, 0.0])
    z = np.array([0.3, -0.8])
    np.testing.assert_array_equal(nn.jacobian_analytic(spec, params, z), a)
    np.testing.assert_allclose(nn.jacobian_finite_diff(spec, params, z, 0.37), a, atol=1e-14)


def test_jacobian_of_duplication():
    spec, params = single_layer(np.array([[1.0], [1.0]]))
    np.testing.assert_array_equal(nn.jacobian_analytic(spec, params, np.array([0.7])), [[1.0], [1.0]])


def test_jacobian_of_4_to_16_mlp_matches_finite_differences():
    spec, params = tanh_net(seed=9, widths=(4, 24, 16))
    z = np.random.default_rng(9).standard_normal(4)
    ja = nn.jacobian_analytic(spec, params, z)
    assert ja.shape == (16, 4)
    assert rel_err(ja, nn.jacobian_finite_diff(spec, params, z, 1e-4)) < 1e-5


def test_finite_difference_error_is_second_order():
    spec, params = tanh_net(seed=4, widths=(3, 12, 5), std=2.0)
    z = np.array([0.2, -0.4, 0.9])
    ja = nn.jacobian_analytic(spec, params, z)
    e1 = np.max(np.abs(nn.jacobian_finite_diff(spec, params, z, 1e-3) - ja))
    e2 = np.max(np.abs(nn.jacobian_finite_diff(spec, params, z, 5e-4) - ja))
    assert 3.5 < e1 / e2 < 4.5


def test_finite_difference_rejects_nonpositive_step():
    spec, params = tanh_net()
    with pytest.raises(ValueError):
        nn.jacobian_finite_diff(spec, params, np.zeros(4), h=0.0)
    with pytest.raises(ValueError):
        nn.jacobian_finite_diff(spec, params, np.zeros(4), h=-1e-3)


def test_kinks_use_right_derivative():
    for act, expected in (("relu", 1.0), ("leaky_relu", 1.0)):
        spec, params = single_layer(np.eye(1), act)
        assert nn.jacobian_analytic(spec, params, np.array([0.0]))[0, 0] == expected
    spec, params = single_layer(np.eye(1), "leaky_relu")
    assert nn.jacobian_analytic(spec, params, np.array([-1.0]))[0, 0] == 0.2


def test_jacobian_batch_matches_pointwise():
    spec, params = tanh_net(seed=1)
    z = np.random.default_rng(1).standard_normal((5, 4))
    batch = nn.jacobian_batch(spec, params, z)
    for i in range(5):
        np.testing.assert_allclose(batch[i], nn.jacobian_analytic(spec, params, z[i]), atol=1e-15)


# -- checkpoints ------------------------------------------------------------------------

spec_strategy = st.builds(
    lambda n, widths, acts: NetworkSpec(n, tuple(LayerSpec(w, a, 0.1) for w, a in zip(widths, acts))),
    st.integers(1, 6), st.lists(st.integers(1, 7), min_size=1, max_size=4),
    st.lists(st.sampled_from(nn.ACTIVATIONS), min_size=4, max_size=4))


@settings(max_examples=40, deadline=None)
@given(spec_strategy, st.integers(0, 1000), st.text(max_size=12))
def test_checkpoint_round_trip_is_bit_exact(spec, seed, role):
    params = nn.init_parameters(spec, seed, std=3.0)
    params.biases = [np.random.default_rng(seed).standard_normal(b.shape) for b in params.biases]
    blob = nn.dump_parameters(spec, params, role)
    spec2, params2, role2 = nn.parse_parameters(blob)
    assert spec2 == spec and role2 == role
    for a, b in zip(params.arrays(), params2.arrays()):
        assert a.tobytes() == b.tobytes()
    assert nn.dump_parameters(spec2, params2, role2) == blob


def test_checkpoint_file_round_trip(tmp_path):
    spec, params = tanh_net()
    path = tmp_path / "net.bin"
    nn.save_parameters(path, spec, params, "generator")
    spec2, params2, role = nn.load_parameters(path)
    assert role == "generator" and spec2 == spec
    assert all(np.array_equal(a, b) for a, b in zip(params.arrays(), params2.arrays()))


def test_checkpoint_errors_name_the_problem():
    spec, params = tanh_net()
    blob = nn.dump_parameters(spec, params, "g")
    with pytest.raises(CheckpointError, match="byte offset"):
        nn.parse_parameters(blob[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        nn.parse_parameters(blob + b"\0")
    with pytest.raises(CheckpointError, match="magic"):
        nn.parse_parameters(b"XXXXXXXX" + blob[8:])
    with pytest.raises(CheckpointError, match="version"):
        nn.parse_parameters(blob[:8] + struct.pack("<I", 99) + blob[12:])


def test_checkpoint_rejects_corrupt_layer_codes():
    spec = NetworkSpec(2, (LayerSpec(3, "tanh"),))
    blob = bytearray(nn.dump_parameters(spec, nn.init_parameters(spec, 0), ""))
    # header: magic(8) version(4) role length(4) role(0) spec header(8), then kind, activation
    blob[8 + 4 + 4 + 8 + 1] = 250
    with pytest.raises(CheckpointError, match="activation"):
        nn.parse_parameters(bytes(blob))


def test_checkpoint_little_endian_payload():
    spec, params = single_layer(np.array([[1.5]]), b=[-2.0])
    blob = nn.dump_parameters(spec, params, "")
    assert blob.endswith(struct.pack("<d", 1.5) + struct.pack("<d", -2.0))
