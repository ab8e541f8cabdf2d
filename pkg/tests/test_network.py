import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snnconv import network as nw
from snnconv.errors import ShapeError, UnsupportedLayerError

from conftest import random_mlp


# -- naive reference evaluator (explicit loops, float64) ---------------------

def naive_linear(x, w, b):
    x = x.reshape(-1)
    out = np.zeros(w.shape[0])
    for k in range(w.shape[0]):
        acc = float(b[k])
        for j in range(w.shape[1]):
            acc += float(w[k, j]) * float(x[j])
        out[k] = acc
    return out


def naive_conv(x, w, b, stride, pad, groups=1):
    c, h, wd = x.shape
    cout, cg, k, _ = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((cout, ho, wo))
    per_group = cout // groups
    for o in range(cout):
        g = o // per_group
        for y in range(ho):
            for z in range(wo):
                acc = float(b[o])
                for ci in range(cg):
                    for i in range(k):
                        for j in range(k):
                            acc += float(w[o, ci, i, j]) * xp[g * cg + ci, y * stride + i, z * stride + j]
                out[o, y, z] = acc
    return out


def naive_forward(net, x):
    h = np.asarray(x, dtype=np.float64)
    for layer in net.layers:
        p = layer.params
        if layer.kind == "Linear":
            h = naive_linear(h, p["w"], p["b"])
        elif layer.kind in ("Conv2D", "StridedConv2D"):
            h = naive_conv(h, p["w"], p["b"], p["stride"], p["padding"], p["groups"])
        elif layer.kind == "ReLU":
            h = np.array([max(0.0, v) for v in h.reshape(-1)]).reshape(h.shape)
        elif layer.kind == "AvgPool2D":
            k, s = p["kernel"], p["stride"]
            c, hh, ww = h.shape
            out = np.zeros((c, (hh - k) // s + 1, (ww - k) // s + 1))
            for ci in range(c):
                for y in range(out.shape[1]):
                    for z in range(out.shape[2]):
                        out[ci, y, z] = h[ci, y * s:y * s + k, z * s:z * s + k].mean()
            h = out
        else:
            raise NotImplementedError(layer.kind)
    return h


# -- forward -----------------------------------------------------------------

def test_forward_identity_relu():
    net = nw.NetworkGraph([nw.linear([[1, 0], [0, 1]], [0, 0]), nw.relu()], (2,))
    out = nw.forward(net, np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(out[-1], [0.0, 2.0])


def test_forward_scalar_affine():
    net = nw.NetworkGraph([nw.linear([[0.5]], [0.1]), nw.relu()], (1,))
    np.testing.assert_allclose(nw.forward(net, np.array([0.4]))[-1], [0.3], atol=1e-7)


def test_forward_matches_naive_mlp(rng):
    net = random_mlp(rng, [6, 5, 4, 3])
    for _ in range(5):
        x = rng.normal(size=6)
        np.testing.assert_allclose(nw.forward(net, x)[-1], naive_forward(net, x), atol=1e-6)


def test_forward_matches_naive_convnet(rng):
    net = nw.NetworkGraph([
        nw.conv2d(rng.normal(0, 0.4, (3, 2, 3, 3)), rng.normal(0, 0.1, 3), padding=1),
        nw.relu(),
        nw.avgpool2d(2),
        nw.conv2d(rng.normal(0, 0.4, (3, 1, 2, 2)), rng.normal(0, 0.1, 3), stride=2, groups=3, strided=True),
        nw.relu(),
        nw.linear(rng.normal(0, 0.3, (2, 3 * 2 * 2)), rng.normal(0, 0.1, 2)),
    ], (2, 8, 8))
    for _ in range(3):
        x = rng.uniform(size=(2, 8, 8))
        np.testing.assert_allclose(nw.forward(net, x)[-1], naive_forward(net, x), atol=1e-5)


def test_forward_batched_equals_per_sample(rng):
    net = random_mlp(rng, [4, 8, 2])
    xs = rng.normal(size=(7, 4)).astype(np.float32)
    batched = nw.predict(net, xs)
    for i in range(7):
        np.testing.assert_allclose(batched[i], nw.predict(net, xs[i]), atol=1e-6)


def test_forward_deterministic(rng):
    net = random_mlp(rng, [5, 7, 3])
    x = rng.normal(size=5)
    a, b = nw.forward(net, x), nw.forward(net, x)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_forward_shape_mismatch_names_layer():
    net = nw.NetworkGraph([nw.linear(np.ones((3, 2))), nw.relu(), nw.linear(np.ones((1, 4)))], (2,))
    with pytest.raises(ShapeError) as err:
        nw.forward(net, np.zeros(2))
    assert err.value.index == 2


def test_forward_wrong_input_shape():
    net = nw.NetworkGraph([nw.relu()], (3,))
    with pytest.raises(ShapeError):
        nw.forward(net, np.zeros(4))


# -- validate ----------------------------------------------------------------

def test_validate_empty_echoes_input():
    assert nw.validate(nw.NetworkGraph([], (1, 8, 8))) == [(1, 8, 8)]


def test_validate_padding_preserves_spatial():
    net = nw.NetworkGraph([nw.conv2d(np.zeros((1, 1, 3, 3)), padding=1)], (1, 8, 8))
    assert nw.validate(net) == [(1, 8, 8)]


def test_validate_linear_width_mismatch():
    net = nw.NetworkGraph([nw.linear(np.zeros((8, 4))), nw.relu(), nw.linear(np.zeros((2, 10)))], (4,))
    with pytest.raises(ShapeError) as err:
        nw.validate(net)
    assert err.value.index == 2
    assert err.value.expected == (10,) and err.value.actual == (8,)


def test_validate_transposed_and_upsample():
    net = nw.NetworkGraph([
        nw.conv_transpose2d(np.ones((2, 1, 2, 2)), stride=2, groups=2),
        nw.upsample2d(2),
        nw.maxpool2d(2),
    ], (2, 3, 3))
    assert nw.validate(net) == [(2, 6, 6), (2, 12, 12), (2, 6, 6)]


def test_layer_param_invariants():
    with pytest.raises(ValueError):
        nw.batchnorm([0.0], [0.0])
    with pytest.raises(ValueError):
        nw.quant_relu(0)
    with pytest.raises(ValueError):
        nw.quant_relu(4, offset=1.0)
    with pytest.raises(ValueError):
        nw.linear(np.zeros((2, 3)), np.zeros(3))


def test_graph_is_immutable(rng):
    net = random_mlp(rng, [3, 2])
    with pytest.raises(ValueError):
        net.layers[0].params["w"][0, 0] = 5.0
    with pytest.raises(TypeError):
        net.layers[0].params["w"] = None


# -- backward ----------------------------------------------------------------

def _loss_and_grad(net, x, target):
    out = nw.predict(net, x)
    diff = out - target
    return 0.5 * float(np.sum(diff.astype(np.float64) ** 2)), diff


def _numeric_grad(net, x, target, li, key, h=1e-3):
    layer = net.layers[li]
    base = np.array(layer.params[key], dtype=np.float64)
    g = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        vals = []
        for sign in (1, -1):
            arr = base.copy()
            arr[idx] += sign * h
            layers = list(net.layers)
            layers[li] = layer.with_params(**{key: arr})
            vals.append(_loss_and_grad(net.with_layers(layers), x, target)[0])
        g[idx] = (vals[0] - vals[1]) / (2 * h)
    return g


def _check_gradients(net, x, target, tol=1e-2):
    _, dy = _loss_and_grad(net, x, target)
    grads = nw.backward(net, x, dy)
    checked = 0
    for li, g in enumerate(grads):
        for key, analytic in g.items():
            numeric = _numeric_grad(net, x, target, li, key)
            denom = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-3)
            rel = np.abs(numeric - analytic).max() / denom
            assert rel < tol, (li, key, rel)
            checked += 1
    assert checked > 0


def test_backward_linear_mse_closed_form(rng):
    w = rng.normal(size=(2, 3))
    b = rng.normal(size=2)
    net = nw.NetworkGraph([nw.linear(w, b)], (3,))
    x = rng.normal(size=(5, 3)).astype(np.float32)
    y = rng.normal(size=(5, 2)).astype(np.float32)
    pred = nw.predict(net, x)
    grads = nw.backward(net, x, pred - y)
    w32, b32 = net.layers[0]["w"].astype(np.float64), net.layers[0]["b"].astype(np.float64)
    resid = x.astype(np.float64) @ w32.T + b32 - y
    np.testing.assert_allclose(grads[0]["w"], resid.T @ x, atol=1e-5)
    np.testing.assert_allclose(grads[0]["b"], resid.sum(axis=0), atol=1e-5)


def test_backward_finite_difference_mlp(rng):
    net = random_mlp(rng, [3, 4, 2])
    _check_gradients(net, rng.normal(size=(4, 3)).astype(np.float32), rng.normal(size=(4, 2)))


def test_backward_finite_difference_conv_layers(rng):
    net = nw.NetworkGraph([
        nw.conv2d(rng.normal(0, 0.5, (2, 1, 3, 3)), rng.normal(0, 0.1, 2), padding=1),
        nw.relu(),
        nw.avgpool2d(2),
        nw.conv2d(rng.normal(0, 0.5, (2, 1, 2, 2)), rng.normal(0, 0.1, 2), stride=2, groups=2, strided=True),
        nw.upsample2d(2),
        nw.conv_transpose2d(rng.normal(0, 0.5, (2, 1, 2, 2)), rng.normal(0, 0.1, 2), stride=2, groups=2),
        nw.identity(),
        nw.linear(rng.normal(0, 0.3, (2, 2 * 4 * 4)), rng.normal(0, 0.1, 2)),
    ], (1, 4, 4))
    _check_gradients(net, rng.uniform(size=(2, 1, 4, 4)).astype(np.float32), rng.normal(size=(2, 2)))


def test_backward_finite_difference_dense_transposed(rng):
    net = nw.NetworkGraph([
        nw.conv_transpose2d(rng.normal(0, 0.5, (2, 3, 3, 3)), rng.normal(0, 0.1, 3), stride=2, padding=1),
        nw.linear(rng.normal(0, 0.3, (2, 3 * 5 * 5)), rng.normal(0, 0.1, 2)),
    ], (2, 3, 3))
    _check_gradients(net, rng.uniform(size=(2, 2, 3, 3)).astype(np.float32), rng.normal(size=(2, 2)))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), hidden=st.integers(1, 6))
def test_backward_property_random_small_mlps(seed, hidden):
    rng = np.random.default_rng(seed)
    net = random_mlp(rng, [3, hidden, 2])
    _check_gradients(net, rng.normal(size=(3, 3)).astype(np.float32), rng.normal(size=(3, 2)))


def test_quant_relu_straight_through():
    net = nw.NetworkGraph([nw.quant_relu(10)], (4,))
    x = np.array([0.1, 0.55, 0.99, 0.3], dtype=np.float32)
    up = np.array([1.0, -2.0, 3.0, 0.5], dtype=np.float32)
    dx, _ = nw.layer_backward(net.layers[0], x[None], None, up[None])
    np.testing.assert_array_equal(dx[0], up)
    x_out = np.array([-0.5, 0.0, 1.0, 2.0], dtype=np.float32)
    dx, _ = nw.layer_backward(net.layers[0], x_out[None], None, up[None])
    np.testing.assert_array_equal(dx[0], 0)


@pytest.mark.parametrize("layer", [nw.maxpool2d(2), nw.batchnorm([0.0], [1.0])])
def test_backward_rejects_untrainable(layer):
    net = nw.NetworkGraph([layer], (1, 4, 4))
    with pytest.raises(UnsupportedLayerError):
        nw.backward(net, np.zeros((1, 4, 4)), np.zeros(nw.validate(net)[-1]))


def test_maxpool_routed_gradient_when_enabled(rng):
    net = nw.NetworkGraph([nw.maxpool2d(2), nw.linear(rng.normal(size=(1, 4)))], (1, 4, 4))
    x = rng.uniform(size=(1, 4, 4)).astype(np.float32)
    grads = nw.backward(net, x, np.ones(1), pool_grad=True)
    assert grads[0] == {} and grads[1]["w"].shape == (1, 4)


# -- activation invariants ---------------------------------------------------

def test_relu_nonnegative(rng):
    net = nw.NetworkGraph([nw.relu()], (50,))
    assert np.all(nw.predict(net, rng.normal(size=50)) >= 0)


@settings(max_examples=50, deadline=None)
@given(
    xs=st.lists(st.floats(-1e30, 1e30), min_size=1, max_size=20),
    levels=st.integers(1, 300),
    clip=st.sampled_from([1.0, 0.5, 2.0]),
)
def test_quant_relu_on_grid(xs, levels, clip):
    net = nw.NetworkGraph([nw.quant_relu(levels, 0.5, clip)], (len(xs),))
    out = nw.predict(net, np.array(xs, dtype=np.float32)).astype(np.float64)
    assert np.all(out >= 0) and np.all(out <= clip)
    on_grid = np.isclose(out * levels, np.round(out * levels), atol=1e-3) | (out == clip)
    assert np.all(on_grid)
