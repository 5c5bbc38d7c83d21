import numpy as np
import pytest

from pumptwin.errors import IllPosedError, ValidationError
from pumptwin.signal import Signal
from pumptwin.virtual_sensor import (InverseProblem, PinnConfig, estimate_flow_pinn,
                                     estimate_flow_wave_decomposition, steady_flow_from_pressure,
                                     write_flow_csv)
from pumptwin.workbench import periodic_pressures, quick_config, source_revolution

CFG = quick_config()
PLANT = CFG.plant_params
FS = CFG.sample_rate


def problem(window, params=PLANT):
    return InverseProblem(params, tuple((x, Signal(ch, FS)) for x, ch in zip(params.sensors, window)))


@pytest.fixture(scope="module")
def plant_runs():
    out = {}
    for lbl in ("H", "S", "C"):
        q = source_revolution(CFG, lbl).samples
        out[lbl] = (q, periodic_pressures(CFG, PLANT, source_revolution(CFG, lbl), 1))
    return out


def rmse_over_ptp(est, true):
    return np.sqrt(np.mean((est - true) ** 2)) / np.ptp(true)


@pytest.mark.parametrize("label", ["H", "S", "C"])
def test_wave_decomposition_round_trip(plant_runs, label):
    q, p = plant_runs[label]
    est = estimate_flow_wave_decomposition(problem(p)).samples
    assert rmse_over_ptp(est, q) <= 0.02


def test_constant_pressures_give_mean_flow():
    q_mean = 2.5e-4
    p_end = PLANT.p_set + (q_mean / PLANT.kv) ** 2
    const = np.full((2, 3072), p_end)
    est = estimate_flow_wave_decomposition(problem(const)).samples
    expected = steady_flow_from_pressure(PLANT, PLANT.sensors[-1], p_end)
    assert np.allclose(est, est.mean())
    assert est.mean() == pytest.approx(expected, rel=0.01)


def test_mean_follows_orifice_law(plant_runs):
    q, p = plant_runs["H"]
    est = estimate_flow_wave_decomposition(problem(p)).samples
    expected = steady_flow_from_pressure(PLANT, PLANT.sensors[-1], float(p[-1].mean()))
    assert est.mean() == pytest.approx(expected, rel=0.01)
    assert est.mean() == pytest.approx(q.mean(), rel=0.01)


def test_zero_friction_linearity(plant_runs):
    _, p1 = plant_runs["H"]
    _, p2 = plant_runs["S"]
    a, b = 0.7, -1.3

    def ripple(p):
        est = estimate_flow_wave_decomposition(problem(p), friction=False).samples
        return est - est.mean()

    mixed = ripple(a * p1 + b * p2)
    np.testing.assert_allclose(mixed, a * ripple(p1) + b * ripple(p2),
                               atol=1e-9 * np.abs(ripple(p1)).max())


def count_dips(est, ref, threshold):
    below = (ref - est) > threshold
    return int((below & ~np.roll(below, 1)).sum())


def test_cylinder_fault_estimate_shows_two_dips(plant_runs):
    _, ph = plant_runs["H"]
    _, pc = plant_runs["C"]
    healthy = estimate_flow_wave_decomposition(problem(ph)).samples
    fault = estimate_flow_wave_decomposition(problem(pc)).samples
    depth = CFG.faults["C"].depths[0] * CFG.pump.mean_flow
    assert count_dips(fault, healthy, 0.4 * depth) == 2
    slipper = estimate_flow_wave_decomposition(problem(plant_runs["S"][1])).samples
    assert count_dips(slipper, healthy, 0.4 * CFG.faults["S"].depths[0] * CFG.pump.mean_flow) == 1


def test_ill_posed_configurations():
    p = np.zeros((2, 3072))
    close = PLANT.with_sensors((0.4167, 0.4167 + 0.01))
    with pytest.raises(IllPosedError):
        estimate_flow_wave_decomposition(problem(p, close))
    split = PLANT.with_sensors((0.4167, 6.5))
    with pytest.raises(IllPosedError):
        estimate_flow_wave_decomposition(problem(p, split))
    single = InverseProblem(PLANT, ((0.4167, Signal(np.zeros(100), FS)),))
    with pytest.raises(IllPosedError):
        estimate_flow_wave_decomposition(single)


def test_problem_validation():
    s = Signal(np.zeros(100), FS)
    with pytest.raises(ValidationError):
        InverseProblem(PLANT, ())
    with pytest.raises(ValidationError):
        InverseProblem(PLANT, ((0.4, s), (2.5, Signal(np.zeros(99), FS))))
    with pytest.raises(ValidationError):
        InverseProblem(PLANT, ((0.4, s), (2.5, s)), estimation_window=(0.0, 1.0))
    with pytest.raises(ValidationError):
        PinnConfig(steps=0)


def test_estimation_window_selects_whole_revolutions(plant_runs):
    q, p = plant_runs["H"]
    two = np.tile(p, 2)
    prob = InverseProblem(PLANT, tuple((x, Signal(ch, FS)) for x, ch in zip(PLANT.sensors, two)),
                          estimation_window=(3072 / FS, 6144 / FS))
    est = estimate_flow_wave_decomposition(prob)
    assert len(est) == 3072 and est.start_time == pytest.approx(3072 / FS)
    assert rmse_over_ptp(est.samples, q) <= 0.02


def test_pinn_short_run_is_deterministic_and_reports_losses(plant_runs, tmp_path):
    _, p = plant_runs["H"]
    cfg = PinnConfig(steps=20, n_interior=256, n_boundary=32, width=16, hidden_layers=2,
                     harmonics=12)
    a = estimate_flow_pinn(problem(p), cfg, seed=3)
    b = estimate_flow_pinn(problem(p), cfg, seed=3)
    assert np.array_equal(a.flow.samples, b.flow.samples)
    assert len(a.flow) == 3072
    assert len(a.initial_losses) == 3 and len(a.relative_losses()) == 3
    assert a.history[-1][0] == 20
    rows = a.write_loss_csv(tmp_path / "loss.csv").read_text().splitlines()
    assert rows[0] == "step,data,pde,bc,total"
    assert write_flow_csv(a.flow, tmp_path / "q.csv").exists()
