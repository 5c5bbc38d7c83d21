import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pumptwin.errors import ValidationError
from pumptwin.signal import (MultiChannelSignal, RngStream, Signal, add_gaussian_noise,
                             cyclic_shift, linear_resample, read_signal_csv, remove_mean,
                             resample_array, segment_windows, stack_channels, write_signal_csv)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
samples = arrays(np.float64, st.integers(1, 200), elements=finite)


def sig(x, fs=100.0):
    return Signal(np.asarray(x, dtype=float), fs)


def test_signal_rejects_bad_input():
    with pytest.raises(ValidationError):
        Signal(np.array([]), 10.0)
    with pytest.raises(ValidationError):
        Signal(np.array([1.0, np.nan]), 10.0)
    with pytest.raises(ValidationError):
        Signal(np.array([1.0]), 0.0)


def test_multichannel_alignment():
    a, b = sig([1, 2, 3]), sig([4, 5, 6])
    assert stack_channels([a, b]).shape == (2, 3)
    with pytest.raises(ValidationError):
        MultiChannelSignal((a, sig([1, 2])))
    with pytest.raises(ValidationError):
        MultiChannelSignal((a, sig([1, 2, 3], fs=50.0)))


def test_remove_mean_examples():
    assert np.array_equal(remove_mean(sig([1, 2, 3])).samples, [-1, 0, 1])
    assert np.all(remove_mean(sig([7.5] * 10)).samples == 0)


@given(samples)
def test_remove_mean_properties(x):
    s = sig(x)
    out = remove_mean(s)
    rms = np.sqrt(np.mean(x ** 2))
    assert abs(out.samples.mean()) <= 1e-9 * max(rms, 1e-300) + 1e-300
    assert len(out) == len(s) and out.sample_rate == s.sample_rate
    np.testing.assert_allclose(remove_mean(out).samples, out.samples, atol=1e-12 * max(rms, 1.0))
    # relative amplitudes preserved: differences are untouched
    np.testing.assert_allclose(np.diff(out.samples), np.diff(x), atol=1e-9 * max(rms, 1.0))


def test_cyclic_shift_examples():
    assert list(cyclic_shift(sig([1, 2, 3, 4]), 1).samples) == [2, 3, 4, 1]
    s = sig([3, 1, 2])
    assert np.array_equal(cyclic_shift(s, 0).samples, s.samples)
    with pytest.raises(IndexError):
        cyclic_shift(s, 3)
    with pytest.raises(IndexError):
        cyclic_shift(s, -1)


@given(samples, st.data())
def test_cyclic_shift_properties(x, data):
    s = sig(x)
    k = data.draw(st.integers(0, len(x) - 1))
    out = cyclic_shift(s, k)
    assert sorted(out.samples) == sorted(x)
    assert out.samples.mean() == pytest.approx(x.mean(), rel=1e-9, abs=1e-6)
    for i in range(len(x)):
        assert out.samples[i] == x[(i + k) % len(x)]
    back = cyclic_shift(out, (len(x) - k) % len(x))
    assert np.array_equal(back.samples, x)


def test_noise_zero_and_determinism():
    s = sig(np.linspace(0, 1, 50))
    assert np.array_equal(add_gaussian_noise(s, 0.0, 3).samples, s.samples)
    a = add_gaussian_noise(s, 0.2, 11).samples
    b = add_gaussian_noise(s, 0.2, 11).samples
    assert np.array_equal(a, b)
    assert not np.array_equal(a, add_gaussian_noise(s, 0.2, 12).samples)
    with pytest.raises(ValidationError):
        add_gaussian_noise(s, -0.1, 0)


def test_noise_statistics():
    n = 10 ** 6
    s = sig(np.zeros(n))
    d = add_gaussian_noise(s, 0.1, 2024).samples
    assert 0.0995 <= d.std() <= 0.1005
    assert abs(d.mean()) < 5 * 0.1 / np.sqrt(n)


def test_rng_stream_is_documented_philox_box_muller():
    r = RngStream(5)
    z = r.normal(4)
    u = np.random.Generator(np.random.Philox(5)).random(4).reshape(2, 2)
    rad = np.sqrt(-2 * np.log1p(-u[:, 0]))
    expect = np.empty(4)
    expect[0::2] = rad * np.cos(2 * np.pi * u[:, 1])
    expect[1::2] = rad * np.sin(2 * np.pi * u[:, 1])
    assert np.array_equal(z, expect)
    with pytest.raises(ValidationError):
        RngStream(-1)
    with pytest.raises(ValidationError):
        RngStream(2 ** 64)


@given(st.integers(0, 2 ** 64 - 1), st.integers(1, 60))
def test_rng_permutation_and_integers(seed, n):
    r = RngStream(seed)
    p = r.permutation(n)
    assert sorted(p) == list(range(n))
    ks = r.integers(3, 9, size=100)
    assert ks.min() >= 3 and ks.max() < 9
    assert np.array_equal(RngStream(seed).spawn(1).uniform(5), RngStream(seed).spawn(1).uniform(5))


def test_segment_windows_examples():
    fs = 51200
    s = Signal(np.zeros(int(9.6 * fs)), fs)
    assert len(segment_windows(s, 3072, 3072)) == 160
    assert len(segment_windows(sig(np.arange(8)), 8, 3)) == 1
    w = segment_windows(sig(np.arange(10)), 4, 3)
    assert [x.samples[0] for x in w] == [0, 3, 6]
    assert all(len(x) == 4 for x in w)
    with pytest.raises(ValidationError):
        segment_windows(sig(np.arange(3)), 4, 1)
    with pytest.raises(ValidationError):
        segment_windows(sig(np.arange(5)), 2, 0)


@given(samples, st.data())
def test_segment_windows_reconstruct_prefix(x, data):
    w = data.draw(st.integers(1, len(x)))
    hop = data.draw(st.integers(1, len(x)))
    parts = segment_windows(sig(x), w, hop)
    assert len(parts) == (len(x) - w) // hop + 1
    tiles = segment_windows(sig(x), w, w)
    cat = np.concatenate([p.samples for p in tiles])
    assert np.array_equal(cat, x[:cat.size])


def test_linear_resample_examples():
    assert np.allclose(linear_resample(sig([0.0, 2.0]), 3).samples, [0, 1, 2])
    s = sig([3.0, 1.0, 4.0, 1.0])
    assert np.array_equal(linear_resample(s, 4).samples, s.samples)
    with pytest.raises(ValidationError):
        linear_resample(s, 1)
    r = linear_resample(sig(np.arange(5.0), fs=10.0), 9)
    assert (len(r) - 1) / r.sample_rate == pytest.approx(0.4)


@given(arrays(np.float64, st.integers(2, 50), elements=st.floats(0, 1e3)), st.integers(2, 300))
def test_linear_resample_monotone_and_endpoints(x, n):
    x = np.cumsum(x)
    y = resample_array(x, n)
    assert y[0] == x[0] and y[-1] == pytest.approx(x[-1], rel=1e-12, abs=1e-9)
    assert np.all(np.diff(y) >= -1e-9 * max(1.0, abs(x[-1])))


def test_resample_array_axis():
    img = np.arange(12.0).reshape(3, 4)
    out = resample_array(img, 7, axis=0)
    assert out.shape == (7, 4)
    np.testing.assert_allclose(out[::3], img)


def test_csv_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    s = Signal(rng.normal(size=257) * 1e5 + 9e6, 51200.0, start_time=0.125,
               channel_id="p1", unit="Pa")
    p = write_signal_csv(s, tmp_path / "s.csv")
    assert p.read_text().splitlines()[0] == "time_s,value"
    back = read_signal_csv(p)
    assert np.array_equal(back.samples, s.samples)
    assert (back.sample_rate, back.start_time, back.channel_id, back.unit) == \
        (s.sample_rate, s.start_time, s.channel_id, s.unit)
