import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pumptwin.errors import ValidationError
from pumptwin.pump import (FaultSpec, PumpGeometry, default_faults, dip_profile, generate_source,
                           ideal_flow_ripple, inject_fault, samples_per_rev, shaft_angle)

G = PumpGeometry()
FS = 51200.0


def spectrum(x, fs):
    X = np.abs(np.fft.rfft(x - x.mean())) / len(x)
    f = np.fft.rfftfreq(len(x), 1 / fs)
    return f, X


def test_geometry_constants():
    assert G.pumping_frequency == pytest.approx(150.0)
    assert G.shaft_frequency == pytest.approx(1000 / 60)
    assert samples_per_rev(G, FS) == 3072
    with pytest.raises(ValidationError):
        PumpGeometry(n_pistons=1)
    with pytest.raises(ValidationError):
        PumpGeometry(speed=0)
    with pytest.raises(ValidationError):
        samples_per_rev(G, 50001.0)


def test_ideal_ripple_fundamental_and_mean():
    q = ideal_flow_ripple(G, FS, 2)
    f, X = spectrum(q.samples, FS)
    assert f[np.argmax(X)] == pytest.approx(150.0)
    assert q.samples.mean() == pytest.approx(G.mean_flow, rel=1e-3)
    assert np.all(q.samples > 0)
    one = ideal_flow_ripple(G, FS, 1).samples
    assert np.array_equal(q.samples, np.tile(one, 2))


def test_ideal_ripple_period_is_pumping_period():
    q = ideal_flow_ripple(G, FS, 1).samples
    # 341.33 samples per pumping period, so piston edges land off-grid: allow that leakage
    f, X = spectrum(np.tile(q, 4), FS)
    energy = X ** 2
    harmonic = np.isclose(np.mod(f + 1e-9, G.pumping_frequency), 0, atol=1e-6) | \
        np.isclose(np.mod(f, G.pumping_frequency), G.pumping_frequency, atol=1e-6)
    assert energy[~harmonic].sum() <= 1e-6 * energy.sum()


def test_many_pistons_flatten_the_ripple():
    q = ideal_flow_ripple(PumpGeometry(n_pistons=99, backflow_fraction=0.0), 99 * 1000 / 60 * 64, 1).samples
    assert np.ptp(q) / q.mean() < 1e-3


def test_undersampled_rate_rejected():
    with pytest.raises(ValidationError):
        ideal_flow_ripple(G, 40 * 150.0, 1)
    with pytest.raises(ValidationError):
        ideal_flow_ripple(G, FS, 0)


def test_fault_spec_validation():
    with pytest.raises(ValidationError):
        FaultSpec("S", 0.3, 0.05, ())
    with pytest.raises(ValidationError):
        FaultSpec("C1", 0.3, 0.05, (0.1,))
    with pytest.raises(ValidationError):
        FaultSpec("S", 1.0, 0.05, (0.1,))
    with pytest.raises(ValidationError):
        FaultSpec("S", 0.3, 1.0, (0.1,))
    with pytest.raises(ValidationError):
        FaultSpec("X")
    f = FaultSpec("C2", (0.2, 0.3), 0.05, (0.0, 1.0))
    assert FaultSpec.from_dict(f.to_dict()) == f


def test_default_faults_dip_counts():
    f = default_faults(G)
    assert len(f["H"].dip_phases) == 0 and len(f["S"].dip_phases) == 1
    assert all(len(f[k].dip_phases) == 2 for k in ("C1", "C2", "C"))
    assert f["C1"].depths[0] < f["C"].depths[0] < f["C2"].depths[0]


def test_healthy_injection_is_identity():
    q = ideal_flow_ripple(G, FS, 1)
    assert np.array_equal(inject_fault(q, G, FaultSpec("H")).samples, q.samples)


def count_excursions(q, ideal, threshold):
    below = (ideal - q) > threshold
    # cyclic run count
    starts = below & ~np.roll(below, 1)
    return int(starts.sum())


def test_slipper_dip_count():
    ideal = ideal_flow_ripple(G, FS, 3)
    f = FaultSpec("S", 0.3, 0.06, (G.tdc_angle(0),))
    q = inject_fault(ideal, G, f)
    assert count_excursions(q.samples, ideal.samples, 0.25 * 0.3 * G.mean_flow) == 3
    assert q.samples.mean() < ideal.samples.mean()


def test_dip_depth_at_centre():
    ideal = ideal_flow_ripple(G, FS, 1)
    phase = G.tdc_angle(2)
    f = FaultSpec("S", 0.3, 0.06, (phase,))
    phi = shaft_angle(ideal, G)
    k = int(np.argmin(np.abs(np.angle(np.exp(1j * (phi - phase))))))
    removed = ideal.samples[k] - inject_fault(ideal, G, f).samples[k]
    assert removed == pytest.approx(0.3 * G.mean_flow, rel=1e-3)


def test_cylinder_severity_ordering():
    ideal = ideal_flow_ripple(G, FS, 1)
    ph = (G.tdc_angle(0), G.tdc_angle(4))
    c1 = inject_fault(ideal, G, FaultSpec("C1", 0.2, 0.05, ph)).samples
    c2 = inject_fault(ideal, G, FaultSpec("C2", 0.5, 0.05, ph)).samples
    assert c2.min() < c1.min()
    assert count_excursions(c1, ideal.samples, 0.25 * 0.2 * G.mean_flow) == 2


@given(st.floats(0.0, 0.999), st.floats(0.01, 0.99), st.floats(0, 2 * math.pi))
def test_injection_never_negative(depth, width, phase):
    ideal = ideal_flow_ripple(G, FS, 1)
    q = inject_fault(ideal, G, FaultSpec("S", depth, width, (phase,)))
    assert np.all(q.samples >= 0)
    assert np.all(dip_profile(shaft_angle(ideal, G), G, FaultSpec("S", depth, width, (phase,))) >= 0)


def test_generate_source_contract():
    s = generate_source(G, FaultSpec("H"), FS, 1)
    assert len(s.signal) == 3072 and s.label == "H"
    a = generate_source(G, default_faults(G)["S"], FS, 2).signal.samples
    b = generate_source(G, default_faults(G)["S"], FS, 2).signal.samples
    assert np.array_equal(a, b)


def band_energy(x, f0, fs):
    f, X = spectrum(x, fs)
    k = np.argmin(np.abs(f - f0))
    return X[k] ** 2


def test_fault_signatures_in_spectrum():
    n = 4
    faults = default_faults(G)
    h = generate_source(G, faults["H"], FS, n).signal.samples
    s = generate_source(G, faults["S"], FS, n).signal.samples
    c = generate_source(G, faults["C2"], FS, n).signal.samples
    f1 = G.shaft_frequency
    ref = band_energy(h, G.pumping_frequency, FS)
    assert band_energy(h, f1, FS) < 1e-20 * ref
    assert band_energy(s, f1, FS) > 1e-6 * ref
    # two dips per revolution at opposite-ish pistons: even harmonics carry energy
    assert band_energy(c, 2 * f1, FS) > 1e-6 * ref
    assert band_energy(c, 4 * f1, FS) > 1e-8 * ref
