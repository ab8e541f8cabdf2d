import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snnconv import network as nw, snn as sim, spikeio
from snnconv.errors import StreamFormatError


def test_integrate_constant_035():
    stream = spikeio.encode_integrate(np.full((3, 5), 0.35), 1.0, T=10)
    counts = stream.spikes().sum(axis=0)
    assert np.all(counts == 3)
    np.testing.assert_allclose(spikeio.reconstruct_gray(stream), 0.3)


def test_black_and_white_images():
    black = spikeio.encode_integrate(np.zeros((4, 4)), 1.0, T=7)
    assert not any(black.payload)
    assert np.all(spikeio.reconstruct_gray(black) == 0)
    white = spikeio.encode_integrate(np.ones((4, 4)), 1.0, T=7)
    assert white.spikes().all()


def test_out_of_range_intensity_is_an_error():
    with pytest.raises(ValueError):
        spikeio.encode_integrate(np.full((2, 2), 1.1))
    with pytest.raises(ValueError):
        spikeio.encode_bernoulli(np.full((2, 2), -0.1))
    with pytest.raises(ValueError):
        spikeio.encode_integrate(np.zeros((2, 2)), threshold=0)


def test_bernoulli_extremes_and_rate():
    assert not spikeio.encode_bernoulli(np.zeros((2, 2)), seed=1, T=50).spikes().any()
    assert spikeio.encode_bernoulli(np.ones((2, 2)), seed=1, T=50).spikes().all()
    rate = spikeio.encode_bernoulli(np.full((1, 1), 0.5), seed=3, T=10_000).rates()[0, 0]
    assert abs(rate - 0.5) <= 0.02


def test_bernoulli_seeded():
    a = spikeio.encode_bernoulli(np.full((3, 3), 0.3), seed=9, T=20)
    assert a == spikeio.encode_bernoulli(np.full((3, 3), 0.3), seed=9, T=20)
    assert a.seed == 9 and a.encoder == "bernoulli"


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.sampled_from([0.25, 0.5, 1.0]), st.integers(1, 200))
def test_reconstruction_error_bound(intensity, threshold, T):
    # at most one spike per step, so the bound needs intensity <= threshold
    intensity *= threshold
    stream = spikeio.encode_integrate(np.full((2, 3), intensity), threshold, T=T)
    err = np.abs(spikeio.reconstruct_gray(stream) - intensity)
    assert err.max() <= threshold / T + 1e-9


def test_bright_pixels_saturate_below_threshold_scale():
    stream = spikeio.encode_integrate(np.ones((1, 1)), 0.25, T=8)
    assert stream.spikes().all()
    assert spikeio.reconstruct_gray(stream)[0, 0] == pytest.approx(0.25)


def test_frames_are_held_evenly():
    frames = np.stack([np.zeros((1, 1)), np.ones((1, 1))])
    sp = spikeio.encode_integrate(frames, 1.0, T=4).spikes()[:, 0, 0]
    assert sp.tolist() == [False, False, True, True]


def test_header_layout_and_lsb_first(tmp_path):
    spikes = np.zeros((1, 3, 3), dtype=bool)
    spikes[0, 0, 0] = True   # pixel 0 -> bit 0 of byte 0
    spikes[0, 2, 2] = True   # pixel 8 -> bit 0 of byte 1
    stream = spikeio.SpikeStream.from_spikes(spikes, "integrate", 1.0)
    data = stream.to_bytes()
    assert data[:4] == b"SPKS"
    assert len(data) == 32 + 2
    assert data[32:] == bytes([0b00000001, 0b00000001])
    spikeio.write_spk(stream, tmp_path / "a.spk")
    assert (tmp_path / "a.spk").read_bytes() == data


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_spk_round_trip_is_byte_identical(w, h, T, seed):
    spikes = np.random.default_rng(seed).random((T, h, w)) < 0.4
    stream = spikeio.SpikeStream.from_spikes(spikes, "bernoulli", 1.0, seed)
    back = spikeio.SpikeStream.from_bytes(stream.to_bytes())
    assert back.to_bytes() == stream.to_bytes()
    np.testing.assert_array_equal(back.spikes(), spikes)


@pytest.mark.parametrize("corrupt", [
    lambda d: b"XXXX" + d[4:],
    lambda d: d[:4] + b"\x02\x00" + d[6:],
    lambda d: d[:6] + b"\x07" + d[7:],
    lambda d: d[:-1],
    lambda d: d[:10],
    lambda d: d[:-1] + bytes([d[-1] | 0x80]),   # padding bit set (3x3 frame leaves 7 spare bits)
])
def test_corrupt_streams_are_rejected(corrupt):
    stream = spikeio.SpikeStream.from_spikes(np.zeros((2, 3, 3), dtype=bool), "integrate", 1.0)
    with pytest.raises(StreamFormatError):
        spikeio.SpikeStream.from_bytes(corrupt(stream.to_bytes()))


def test_stream_rates_feed_the_simulator_exactly():
    frame = np.random.default_rng(0).random((4, 5))
    stream = spikeio.encode_integrate(frame, 1.0, T=32)
    n = 20
    net = nw.NetworkGraph([nw.linear(np.eye(n)), nw.relu()], (n,), {"normalization": {"sites": [1]}, "calib_max": [1.0]})
    x = stream.spikes().reshape(32, n).astype(float)
    for v0 in (0.0, 0.5):
        trace, _ = sim.run(sim.convert(net, v0=v0), x, 32, encoder="spikes")
        np.testing.assert_array_equal(trace.rates[0], stream.rates().reshape(-1))


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(1).random((6, 9))
    spikeio.write_pgm(img, tmp_path / "a.pgm")
    back = spikeio.read_pgm(tmp_path / "a.pgm")
    assert back.shape == (6, 9)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12
    spikeio.write_pgm(img, tmp_path / "b.pgm", maxval=65535)
    assert np.abs(spikeio.read_pgm(tmp_path / "b.pgm") - img).max() <= 0.5 / 65535 + 1e-12


def test_pgm_with_comment(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255]))
    np.testing.assert_array_equal(spikeio.read_pgm(tmp_path / "c.pgm"), [[0.0, 1.0]])
    (tmp_path / "d.pgm").write_bytes(b"P2\n2 1\n255\n0 255\n")
    with pytest.raises(StreamFormatError):
        spikeio.read_pgm(tmp_path / "d.pgm")


def test_scene_generator_contract():
    frames, labels = spikeio.synth_detection_scene(5, 50)
    again, labels2 = spikeio.synth_detection_scene(5, 50)
    np.testing.assert_array_equal(frames, again)
    np.testing.assert_array_equal(labels, labels2)
    size = spikeio.SCENE_SIZE
    assert frames.shape == (50, size, size) and frames.min() >= 0 and frames.max() <= 1
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for img, (cx, cy, w, h, cls) in zip(frames, labels):
        assert cx - w / 2 >= 0 and cy - h / 2 >= 0 and cx + w / 2 <= size and cy + h / 2 <= size
        assert cls in (0, 1)
        inside = (np.abs(xx - cx) < w / 2 - 1) & (np.abs(yy - cy) < h / 2 - 1)
        box = (np.abs(xx - cx) <= w / 2) & (np.abs(yy - cy) <= h / 2)
        assert img[inside].mean() >= img[~box].mean() + 0.3
