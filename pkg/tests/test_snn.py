import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snnconv import network as nw, snn as sim
from snnconv.errors import ConversionError, SimulationError

from conftest import random_mlp


def normalized(net, calib_max=None):
    sites = net.activation_indices()
    return net.with_meta(normalization={"sites": sites}, calib_max=calib_max or [1.0] * len(sites))


def identity_net(n=1):
    return normalized(nw.NetworkGraph([nw.linear(np.eye(n)), nw.relu()], (n,)))


def spike_steps(v0):
    snn = sim.convert(identity_net(), v0=v0)
    steps = []
    for t in range(1, 11):
        if sim.step(snn, np.array([[0.35]]))[0][0, 0]:
            steps.append(t)
    return steps


def test_spike_times_v0_zero():
    assert spike_steps(0.0) == [3, 6, 9]


def test_spike_times_v0_half():
    assert spike_steps(0.5) == [2, 5, 8, 10]


@pytest.mark.parametrize("v0, rate", [(0.0, 0.3), (0.5, 0.4)])
def test_run_identity_rate(v0, rate):
    _, out = sim.run(sim.convert(identity_net(), v0=v0), np.array([0.35]), 10)
    assert out[0] == pytest.approx(rate)


def test_zero_input_keeps_v0_and_never_fires(rng):
    net = normalized(random_mlp(rng, [3, 5, 4]).with_layers(
        [nw.linear(np.abs(rng.normal(size=(5, 3)))), nw.relu(), nw.linear(np.abs(rng.normal(size=(4, 5)))), nw.relu()]))
    snn = sim.convert(net, v0=0.5)
    trace, out = sim.run(snn, np.zeros(3), 50)
    assert all(c.sum() == 0 for c in trace.counts)
    assert all(np.all(v == 0.5) for v in trace.v_final)
    assert np.all(out == 0)


def test_convert_copies_weights_bit_identically(rng):
    net = normalized(random_mlp(rng, [3, 4, 2]))
    snn = sim.convert(net)
    ann = [(k, layer.params[k]) for layer in net.layers for k in ("w", "b") if k in layer.params]
    assert len(snn.weights()) == len(ann)
    for (ka, a), (kb, b) in zip(ann, snn.weights()):
        assert ka == kb and a.tobytes() == b.tobytes()


def test_single_linear_relu_has_one_site():
    snn = sim.convert(identity_net(2))
    assert len(snn.sites) == 1 and snn.readout == "spike-count"
    assert snn.site_layers == [1]


def test_maxpool_refused_unless_avg_fallback():
    net = normalized(nw.NetworkGraph([nw.conv2d(np.ones((1, 1, 1, 1))), nw.relu(), nw.maxpool2d(2)], (1, 4, 4)))
    with pytest.raises(ConversionError, match="MaxPool2D"):
        sim.convert(net)
    snn = sim.convert(net, maxpool="avg", readout="membrane-accumulate")
    assert snn.accumulator.layers[0].kind == "AvgPool2D"


def test_bn_refused(rng):
    net = nw.NetworkGraph([nw.linear(np.eye(2)), nw.batchnorm(np.zeros(2), np.ones(2), np.ones(2), np.zeros(2))], (2,))
    with pytest.raises(ConversionError, match="BatchNorm"):
        sim.convert(net)


def test_unnormalized_warns_or_errors(rng):
    net = random_mlp(rng, [2, 3, 2])
    with pytest.warns(UserWarning):
        sim.convert(net)
    with pytest.raises(ConversionError):
        sim.convert(net, strict=True)
    over = normalized(nw.NetworkGraph([nw.linear(np.eye(2)), nw.relu()], (2,)), calib_max=[3.0])
    with pytest.raises(ConversionError, match="layer 1"):
        sim.convert(over, strict=True)


def test_readout_modes(rng):
    net = normalized(random_mlp(rng, [3, 4, 2]))
    snn = sim.convert(net)
    assert snn.readout == "membrane-accumulate" and snn.accumulator.layer_index == 2
    with pytest.raises(ConversionError):
        sim.convert(net, readout="spike-count")
    ends_in_act = identity_net(2)
    acc = sim.convert(ends_in_act, readout="membrane-accumulate")
    assert acc.sites == [] and acc.accumulator is not None


def test_membrane_accumulate_output_is_mean_increment(rng):
    net = normalized(random_mlp(rng, [3, 4, 2]))
    snn = sim.convert(net)
    x = rng.random(3)
    trace, out = sim.run(snn, x, 64)
    w, b = net.layers[2]["w"].astype(float), net.layers[2]["b"].astype(float)
    np.testing.assert_allclose(out, w @ trace.rates[0] + b, atol=1e-12)


def test_invalid_v0_and_T():
    with pytest.raises(ValueError):
        sim.convert(identity_net(), v0=1.0)
    snn = sim.convert(identity_net())
    with pytest.raises(SimulationError):
        sim.run(snn, np.array([0.1]), 0)
    with pytest.raises(SimulationError):
        sim.run(snn, np.zeros(3), 4)


def test_non_finite_increment_names_layer():
    net = normalized(nw.NetworkGraph([nw.linear([[1.0]]), nw.relu()], (1,)))
    with pytest.raises(SimulationError, match="layer 1"):
        sim.run(sim.convert(net), np.array([np.inf]), 3)


def test_reset_makes_runs_repeatable(rng):
    snn = sim.convert(normalized(random_mlp(rng, [3, 6, 4, 2])), v0=0.5)
    x = rng.random((5, 3))
    a, _ = sim.run(snn, x, 40)
    b, _ = sim.run(snn, x, 40)
    for ca, cb, va, vb in zip(a.counts, b.counts, a.v_final, b.v_final):
        np.testing.assert_array_equal(ca, cb)
        np.testing.assert_array_equal(va, vb)


def test_reset_on_fresh_network_is_noop(rng):
    snn = sim.convert(normalized(random_mlp(rng, [3, 4, 2])), v0=0.5)
    before = [s.V.copy() for s in snn.sites]
    sim.reset_states(snn)
    for v, s in zip(before, snn.sites):
        np.testing.assert_array_equal(v, s.V)
    assert all(np.all(c == 0) for c in snn.counts)


def test_batched_equals_single(rng):
    snn = sim.convert(normalized(random_mlp(rng, [3, 6, 2])))
    x = rng.random((4, 3))
    batch, out = sim.run(snn, x, 32)
    for i in range(4):
        single, o = sim.run(snn, x[i], 32)
        np.testing.assert_array_equal(single.counts[0], batch.counts[0][i])
        np.testing.assert_allclose(o, out[i])


def test_bernoulli_encoder_is_seeded(rng):
    snn = sim.convert(identity_net(3))
    x = np.array([0.0, 0.5, 1.0])
    a, _ = sim.run(snn, x, 200, encoder="bernoulli", seed=4)
    b, _ = sim.run(snn, x, 200, encoder="bernoulli", seed=4)
    np.testing.assert_array_equal(a.counts[0], b.counts[0])
    assert a.counts[0][0] == 0 and a.counts[0][2] == 200


def test_spike_encoder_checks_length():
    snn = sim.convert(identity_net(2))
    with pytest.raises(SimulationError):
        sim.run(snn, np.zeros((3, 2)), 4, encoder="spikes")


def test_record_spikes(rng):
    snn = sim.convert(identity_net(1), v0=0.0)
    trace, _ = sim.run(snn, np.array([0.35]), 10, record_spikes=True)
    fired = [t + 1 for t, sp in enumerate(trace.spikes) if sp[0][0]]
    assert fired == [3, 6, 9]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 0.5]), st.integers(1, 80))
def test_rates_are_discrete_and_conserved(seed, v0, T):
    rng = np.random.default_rng(seed)
    snn = sim.convert(normalized(random_mlp(rng, [4, 6, 5, 3])), v0=v0)
    trace, _ = sim.run(snn, rng.random((3, 4)), T, debug=True)
    for n, r in zip(trace.counts, trace.rates):
        assert n.min() >= 0 and n.max() <= T
        assert np.all((r >= 0) & (r <= 1))
    assert max(trace.conservation_error()) <= 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 0.5]))
def test_membrane_upper_bound(seed, v0):
    # per-step drive within [-1, 1]: V never exceeds V_th + max |U| after a step
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(6, 4))
    w /= np.abs(w).sum(axis=1, keepdims=True)
    snn = sim.convert(normalized(nw.NetworkGraph([nw.linear(w), nw.relu()], (4,))), v0=v0)
    sim.reset_states(snn, 1)
    worst = 0.0
    for _ in range(50):
        x = rng.random((1, 4))
        worst = max(worst, float(np.abs(snn.stages[0].apply(x)).max()))
        sim.step(snn, x)
        assert snn.sites[0].V.max() < snn.v_th + worst


def test_trace_csv_and_binary_round_trip(rng, tmp_path):
    snn = sim.convert(normalized(random_mlp(rng, [3, 4, 2])))
    trace, _ = sim.run(snn, rng.random((2, 3)), 16)
    sim.write_trace_csv(trace, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "sample,layer,neuron,N,r,V_T" and len(lines) == 1 + 2 * 4
    sim.write_trace_binary(trace, tmp_path / "t.bin")
    back = sim.read_trace_binary(tmp_path / "t.bin")
    assert back["T"] == 16 and back["site_layers"] == [1]
    np.testing.assert_array_equal(back["counts"][0], trace.counts[0])
    np.testing.assert_array_equal(back["v_final"][0], trace.v_final[0])
    single = trace.sample(0)
    sim.write_trace_binary(single, tmp_path / "s.bin")
    np.testing.assert_array_equal(sim.read_trace_binary(tmp_path / "s.bin")["counts"][0][0], single.counts[0])


def test_corrupt_trace_binary(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nope" + bytes(40))
    with pytest.raises(SimulationError):
        sim.read_trace_binary(tmp_path / "x.bin")
