import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pumptwin.errors import ShapeError, ValidationError
from pumptwin.pump import PumpGeometry, default_faults, generate_source
from pumptwin.signal import Signal
from pumptwin.tfr import (IMAGE_SIZE, SpectroImage, Spectrogram, SSTConfig, crop_band, cwt,
                          dataset_scale_k, postprocess_spectrogram, read_spec, spectro_image, sst,
                          synchrosqueeze, write_pgm, write_spec)

FS = 51200.0
N = 6144
PERIODIC = SSTConfig(padding="periodic")


def tone(f=150.0, amp=1.0, n=N):
    t = np.arange(n) / FS
    return Signal(amp * np.cos(2 * np.pi * f * t), FS)


def nearest(freqs, f):
    return int(np.argmin(np.abs(np.log(freqs / f))))


def band_share(power, k, half):
    return power[max(0, k - half):k + half + 1].sum() / power.sum()


def test_config_validation():
    for bad in (dict(voices_per_octave=4), dict(freq_min=100, freq_max=50), dict(epsilon=0),
                dict(wavelet="haar"), dict(padding="zero")):
        with pytest.raises(ValidationError):
            SSTConfig(**bad)


def test_band_beyond_nyquist_rejected():
    with pytest.raises(ValidationError):
        cwt(Signal(np.zeros(N), 2000.0), SSTConfig(freq_max=1600.0))


def test_short_signal_rejected_with_reflect_padding():
    with pytest.raises(ValidationError):
        cwt(Signal(np.zeros(500), FS), SSTConfig())


def test_tone_ridge_and_amplitude():
    coef = cwt(tone(), PERIODIC)
    mag = np.abs(coef.W).mean(axis=1)
    k = nearest(coef.freqs, 150.0)
    assert abs(int(np.argmax(mag)) - k) <= 1
    assert mag.max() == pytest.approx(0.5, rel=0.02)


def test_cwt_is_linear_and_zero_preserving():
    a = cwt(tone(), PERIODIC).W
    b = cwt(tone(amp=-2.5), PERIODIC).W
    np.testing.assert_allclose(b, -2.5 * a, rtol=1e-10, atol=1e-12)
    z = cwt(Signal(np.zeros(N), FS), PERIODIC).W
    assert np.all(z == 0)


def test_sst_concentrates_a_tone():
    cfg = PERIODIC
    coef = cwt(tone(), cfg)
    sg = synchrosqueeze(coef, cfg)
    k = nearest(sg.freq_axis, 150.0)
    sst_power = (sg.magnitudes ** 2).sum(axis=1)
    cwt_power = (np.abs(coef.W) ** 2).sum(axis=1)
    assert band_share(sst_power, k, 1) >= 0.9
    assert band_share(sst_power, k, 1) > band_share(cwt_power, k, 1)


def test_cwt_concentration_at_eight_voices():
    cfg = SSTConfig(voices_per_octave=8, padding="periodic")
    coef = cwt(tone(), cfg)
    k = nearest(coef.freqs, 150.0)
    cwt_power = (np.abs(coef.W) ** 2).sum(axis=1)
    assert band_share(cwt_power, k, 2) >= 0.6
    sst_power = (synchrosqueeze(coef, cfg).magnitudes ** 2).sum(axis=1)
    assert band_share(sst_power, k, 1) > band_share(cwt_power, k, 1)


def test_sst_tracks_a_linear_chirp():
    n = int(0.5 * FS)
    t = np.arange(n) / FS
    f0, f1 = 100.0, 300.0
    rate = (f1 - f0) / t[-1]
    x = np.cos(2 * np.pi * (f0 * t + 0.5 * rate * t ** 2))
    cfg = SSTConfig(freq_min=50.0, freq_max=1600.0)
    sg = sst(Signal(x, FS), cfg)
    cols = np.arange(int(0.1 * n), int(0.9 * n), 512)
    for c in cols:
        ridge = int(np.argmax(sg.magnitudes[:, c]))
        assert abs(ridge - nearest(sg.freq_axis, f0 + rate * t[c])) <= 1


def test_threshold_above_all_coefficients_gives_empty_spectrogram():
    cfg = SSTConfig(padding="periodic", epsilon=10.0)
    assert np.all(sst(tone(), cfg).magnitudes == 0)


def test_reassigned_magnitude_bounded_by_cwt():
    coef = cwt(tone() .with_samples(tone().samples + np.cos(2 * np.pi * 450 * np.arange(N) / FS)),
               PERIODIC)
    sg = synchrosqueeze(coef, PERIODIC)
    assert sg.magnitudes.sum() <= np.abs(coef.W).sum() * (1 + 1e-12)


def test_spectrogram_validation():
    with pytest.raises(ShapeError):
        Spectrogram(np.zeros((3, 4)), np.arange(1, 4.0), np.arange(5.0))
    with pytest.raises(ValidationError):
        Spectrogram(-np.ones((2, 2)), np.arange(1, 3.0), np.arange(2.0))
    with pytest.raises(ValidationError):
        Spectrogram(np.ones((2, 2)), np.array([2.0, 1.0]), np.arange(2.0))


def flat_sg(values, fmax=1600.0, nf=40, nt=30):
    f = np.geomspace(10.0, fmax, nf)
    return Spectrogram(np.broadcast_to(values, (nf, nt)).copy(), f, np.arange(nt) / FS)


def test_crop_at_ten_pumping_frequencies():
    g = PumpGeometry()
    sg = crop_band(flat_sg(0.0), 10 * g.pumping_frequency)
    assert 10 * g.pumping_frequency == pytest.approx(1500.0)
    assert sg.freq_axis[-1] <= 1500.0 * (1 + 1e-9)
    with pytest.raises(ValidationError):
        crop_band(flat_sg(0.0, fmax=1000.0), 1500.0)


@pytest.mark.parametrize("nf,nt", [(40, 30), (300, 7000), (12, 3)])
def test_image_shape_contract_and_zero_case(nf, nt):
    img = postprocess_spectrogram(flat_sg(0.0, nf=nf, nt=nt), 150.0, 1.0)
    assert img.shape == (IMAGE_SIZE, IMAGE_SIZE)
    np.testing.assert_allclose(img, 1.0)


@settings(max_examples=20)
@given(hnp.arrays(np.float64, (12, 5), elements=st.floats(0, 5)),
       hnp.arrays(np.float64, (12, 5), elements=st.floats(0, 2)))
def test_postprocessing_is_monotone(s2, extra):
    f = np.geomspace(10.0, 1600.0, 12)
    s1 = s2 + extra
    i1 = postprocess_spectrogram(Spectrogram(s1, f, np.arange(5.0)), 150.0, 0.5, size=32)
    i2 = postprocess_spectrogram(Spectrogram(s2, f, np.arange(5.0)), 150.0, 0.5, size=32)
    assert np.all(i1 >= i2 - 1e-12 * np.abs(i2))


def test_scale_k_maps_percentile_to_one():
    sg = flat_sg(np.linspace(0, 4, 30)[None, :])
    k = dataset_scale_k([sg], 150.0, percentile=100.0)
    assert k == pytest.approx(0.25)
    assert dataset_scale_k([flat_sg(0.0)], 150.0) == 1.0


def test_slipper_fault_adds_a_shaft_frequency_band():
    g = PumpGeometry()
    faults = default_faults(g)
    cfg = SSTConfig(padding="periodic", freq_min=10.0, freq_max=1600.0)

    def shaft_band(label):
        q = generate_source(g, faults[label], FS, 2).signal
        sg = sst(q.with_samples(q.samples - q.samples.mean()), cfg)
        k = nearest(sg.freq_axis, g.shaft_frequency)
        return (sg.magnitudes[k - 2:k + 3] ** 2).sum()

    assert shaft_band("S") > 1e3 * max(shaft_band("H"), 1e-300)


def test_spec_and_pgm_files(tmp_path):
    img = spectro_image([flat_sg(np.linspace(0, 1, 30)[None, :])] * 2, 150.0, 1.0, size=16)
    assert isinstance(img, SpectroImage) and img.channels == 2
    path = write_spec(img.pixels, tmp_path / "a.spec")
    raw = path.read_bytes()
    assert raw[:4] == b"SPEC" and len(raw) == 16 + 4 * 2 * 16 * 16
    np.testing.assert_allclose(read_spec(path), img.pixels.astype(np.float32))
    pgm = write_pgm(img.pixels[0], tmp_path / "a.pgm").read_bytes()
    assert pgm.startswith(b"P5\n16 16\n255\n")
    with pytest.raises(ValidationError):
        read_spec(write_pgm(img.pixels[0], tmp_path / "b.pgm"))
    with pytest.raises(ShapeError):
        SpectroImage(np.zeros((1, 8, 9)))
