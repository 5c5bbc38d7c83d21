"""Inverse transient analysis: fit pipeline parameters to healthy sensor pressures.

The per-sensor residual is the squared L2 distance between measured and
simulated pressure after dropping the start-up transient and removing each
signal's mean. Sensors are combined by a weighted sum and minimised with
differential evolution (rand/1/bin, synchronous generations) followed by a
bounded Nelder-Mead polish.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .errors import CalibrationError, NumericalError, ValidationError
from .moc import (PipelineParams, build_grid, param_names, params_from_vector,
                  params_to_vector, sample_sensor, simulate)
from .signal import RngStream, Signal

log = logging.getLogger(__name__)


@dataclass
class CalibrationProblem:
    measured: list                      # [(sensor_index, Signal)]
    inlet_flow_healthy: Signal
    prior: PipelineParams
    bounds: dict                        # name -> (lo, hi); parameters absent are fixed
    fixed_mask: tuple = ()              # names pinned at their prior value
    weights: tuple | None = None
    pumping_frequency: float = 150.0
    substeps: int = 2
    discard_time: float | None = None   # default: 5 travel times at the slowest bounded speeds

    def __post_init__(self):
        if not self.measured:
            raise ValidationError("calibration needs at least one measured sensor")
        fs = self.inlet_flow_healthy.sample_rate
        for idx, s in self.measured:
            if s.sample_rate != fs:
                raise ValidationError("measured signals must share the inlet flow's sample rate")
            if not 0 <= idx < len(self.prior.sensors):
                raise ValidationError(f"sensor index {idx} out of range")
            if len(s) != len(self.inlet_flow_healthy):
                raise ValidationError("measured signals must match the inlet flow length")
        names = param_names(self.prior)
        for k, (lo, hi) in self.bounds.items():
            if k not in names:
                raise ValidationError(f"unknown parameter {k!r}; expected one of {names}")
            if lo > hi:
                raise ValidationError(f"bounds for {k} are inverted: {lo} > {hi}")
        if self.discard_time is None:
            self.discard_time = 5.0 * self._max_travel_time()

    @property
    def names(self) -> list[str]:
        return param_names(self.prior)

    @property
    def free(self) -> list[str]:
        return [k for k in self.names
                if k in self.bounds and k not in self.fixed_mask and self.bounds[k][0] < self.bounds[k][1]]

    def _max_travel_time(self) -> float:
        t = 0.0
        for i, s in enumerate(self.prior.segments, start=1):
            L = self.bounds.get(f"L{i}", (s.length, s.length))[1]
            a = self.bounds.get(f"a{i}", (s.wave_speed, s.wave_speed))[0]
            t += max(L, s.length) / min(a, s.wave_speed)
        return t

    def full_vector(self, free_values) -> np.ndarray:
        v = params_to_vector(self.prior)
        names = self.names
        for k, (lo, hi) in self.bounds.items():
            if k not in self.fixed_mask and lo == hi:
                v[names.index(k)] = lo
        for k, val in zip(self.free, free_values):
            v[names.index(k)] = val
        return v

    def window(self) -> slice:
        fs = self.inlet_flow_healthy.sample_rate
        n = len(self.inlet_flow_healthy)
        period = fs / self.pumping_frequency
        start = int(math.ceil(self.discard_time * fs))
        n_periods = int((n - start) // period)
        if n_periods < 1:
            raise ValidationError("record too short: no full pumping period after the discard time")
        length = int(round(n_periods * period))
        return slice(n - length, n)

    def signal_energy(self) -> float:
        w = self.window()
        return float(sum(np.sum((s.samples[w] - s.samples[w].mean()) ** 2) for _, s in self.measured))

    def to_dict(self) -> dict:
        return {
            "prior": self.prior.to_dict(),
            "bounds": {k: list(v) for k, v in self.bounds.items()},
            "fixed_mask": list(self.fixed_mask), "weights": self.weights,
            "pumping_frequency": self.pumping_frequency, "substeps": self.substeps,
            "discard_time": self.discard_time,
            "sample_rate": self.inlet_flow_healthy.sample_rate,
            "inlet_flow": self.inlet_flow_healthy.samples.tolist(),
            "measured": [{"sensor_index": i, "samples": s.samples.tolist()} for i, s in self.measured],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationProblem":
        fs = float(d["sample_rate"])
        inlet = Signal(np.array(d["inlet_flow"]), fs, channel_id="Q_out", unit="m3/s")
        meas = [(int(m["sensor_index"]), Signal(np.array(m["samples"]), fs)) for m in d["measured"]]
        return cls(meas, inlet, PipelineParams.from_dict(d["prior"]),
                   {k: tuple(v) for k, v in d["bounds"].items()}, tuple(d.get("fixed_mask", ())),
                   tuple(d["weights"]) if d.get("weights") else None,
                   float(d.get("pumping_frequency", 150.0)), int(d.get("substeps", 2)),
                   d.get("discard_time"))


@dataclass
class CalibrationResult:
    theta_star: PipelineParams
    objective_history: list = field(default_factory=list)   # (iteration, residuals, scalarized)
    evaluations: int = 0
    best_objective: float = math.inf
    signal_energy: float = 1.0
    free_names: tuple = ()

    @property
    def relative_objective(self) -> float:
        return self.best_objective / self.signal_energy

    def to_dict(self) -> dict:
        return {
            "theta_star": self.theta_star.to_dict(), "evaluations": self.evaluations,
            "best_objective": self.best_objective, "signal_energy": self.signal_energy,
            "free_names": list(self.free_names),
            "objective_history": [{"iteration": i, "residuals": list(map(float, r)), "scalarized": float(v)}
                                  for i, r, v in self.objective_history],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationResult":
        hist = [(h["iteration"], tuple(h["residuals"]), h["scalarized"]) for h in d["objective_history"]]
        return cls(PipelineParams.from_dict(d["theta_star"]), hist, d["evaluations"],
                   d["best_objective"], d["signal_energy"], tuple(d.get("free_names", ())))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "CalibrationResult":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def history_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            n = len(self.objective_history[0][1]) if self.objective_history else 0
            w.writerow(["iteration"] + [f"f_{s + 1}" for s in range(n)] + ["scalarized"])
            for i, r, v in self.objective_history:
                w.writerow([i] + [f"{x:.17g}" for x in r] + [f"{v:.17g}"])
        return path


def objective(theta: PipelineParams, prob: CalibrationProblem) -> np.ndarray:
    """Per-sensor squared residuals; ``inf`` when the forward model fails."""
    try:
        grid = build_grid(theta, prob.inlet_flow_healthy.sample_rate, prob.substeps)
        field_ = simulate(theta, prob.inlet_flow_healthy, grid=grid)
        sims = [sample_sensor(field_, theta.sensors[i], grid).samples for i, _ in prob.measured]
    except NumericalError as exc:
        log.debug("forward model failed: %s", exc)
        return np.full(len(prob.measured), np.inf)
    w = prob.window()
    out = np.empty(len(prob.measured))
    for k, ((_, meas), sim) in enumerate(zip(prob.measured, sims)):
        m = meas.samples[w] - meas.samples[w].mean()
        s = sim[w] - sim[w].mean()
        out[k] = np.sum((m - s) ** 2)
    return out


def scalarize(residuals: np.ndarray, weights=None) -> float:
    w = np.ones_like(residuals) if weights is None else np.asarray(weights, dtype=np.float64)
    v = float(np.dot(w, residuals))
    return v if np.isfinite(v) else math.inf


class _Evaluator:
    def __init__(self, prob: CalibrationProblem, lo, hi, budget):
        self.prob, self.lo, self.hi, self.budget = prob, lo, hi, budget
        self.count = 0
        self.best = math.inf
        self.best_u = None
        self.best_res = None
        self.history = []

    def exhausted(self) -> bool:
        return self.count >= self.budget

    def theta(self, u) -> PipelineParams:
        x = self.lo + np.clip(u, 0.0, 1.0) * (self.hi - self.lo)
        return params_from_vector(self.prob.full_vector(x), self.prob.prior)

    def __call__(self, u) -> float:
        if self.exhausted():
            return math.inf
        self.count += 1
        try:
            theta = self.theta(u)
        except ValidationError:
            return math.inf
        res = objective(theta, self.prob)
        v = scalarize(res, self.prob.weights)
        if v < self.best:
            self.best, self.best_u, self.best_res = v, np.array(u, dtype=np.float64), res
        return v

    def record(self, iteration: int) -> None:
        if self.best_res is not None:
            self.history.append((iteration, tuple(float(r) for r in self.best_res), self.best))


def calibrate(prob: CalibrationProblem, budget: int = 5000, seed: int = 0, *,
              popsize: int = 15, mutation: float = 0.6, crossover: float = 0.9,
              tol: float = 1e-10, polish: bool = True) -> CalibrationResult:
    free = prob.free
    names = prob.names
    energy = prob.signal_energy()
    if not free:
        theta = params_from_vector(prob.full_vector([]), prob.prior)
        res = objective(theta, prob)
        v = scalarize(res, prob.weights)
        if not np.isfinite(v):
            raise CalibrationError("the only admissible point has an infinite objective")
        return CalibrationResult(theta, [(0, tuple(res), v)], 1, v, energy, ())
    if budget < 100:
        raise ValidationError("calibration budget must be at least 100 evaluations")
    lo = np.array([prob.bounds[k][0] for k in free])
    hi = np.array([prob.bounds[k][1] for k in free])
    dim = len(free)
    rng = RngStream(seed)
    ev = _Evaluator(prob, lo, hi, budget)
    npop = popsize * dim
    de_budget = int(0.85 * budget) if polish else budget

    # stratified initial population: one sample per stratum in every coordinate
    pop = (np.stack([rng.permutation(npop) for _ in range(dim)], axis=1)
           + rng.uniform((npop, dim))) / npop
    fit = np.array([ev(u) for u in pop])
    ev.record(0)
    if not np.any(np.isfinite(fit)):
        raise CalibrationError("every initial candidate produced an infinite objective")

    generation = 0
    while ev.count + npop <= de_budget:
        generation += 1
        trials = np.empty_like(pop)
        for i in range(npop):
            choices = [j for j in rng.permutation(npop)[:4] if j != i][:3]
            r1, r2, r3 = choices
            mutant = pop[r1] + mutation * (pop[r2] - pop[r3])
            # reflect out-of-box components back into [0, 1]
            mutant = np.where(mutant < 0, -mutant, mutant)
            mutant = np.where(mutant > 1, 2 - mutant, mutant)
            mutant = np.clip(mutant, 0.0, 1.0)
            cross = rng.uniform(dim) < crossover
            cross[int(rng.integers(0, dim))] = True
            trials[i] = np.where(cross, mutant, pop[i])
        tfit = np.array([ev(u) for u in trials])   # all trials evaluated before any selection
        better = tfit <= fit
        pop[better] = trials[better]
        fit[better] = tfit[better]
        ev.record(generation)
        finite = fit[np.isfinite(fit)]
        if finite.size == npop and (np.std(finite) <= tol * max(abs(np.mean(finite)), 1e-300)
                                    or ev.best <= tol * energy):
            break

    if polish and not ev.exhausted() and ev.best_u is not None:
        remaining = budget - ev.count
        minimize(ev, ev.best_u, method="Nelder-Mead", bounds=[(0.0, 1.0)] * dim,
                 options={"maxfev": remaining, "xatol": 1e-7, "fatol": tol * energy,
                          "initial_simplex": _simplex(ev.best_u, 0.02)})
        ev.record(generation + 1)

    if ev.best_u is None or not np.isfinite(ev.best):
        raise CalibrationError("calibration failed: no finite objective was found")
    theta = ev.theta(ev.best_u)
    log.info("calibration finished: %d evaluations, relative objective %.3e",
             ev.count, ev.best / energy)
    return CalibrationResult(theta, ev.history, ev.count, ev.best, energy, tuple(free))


def _simplex(u0, step):
    dim = u0.size
    simplex = np.tile(u0, (dim + 1, 1))
    for i in range(dim):
        simplex[i + 1, i] = u0[i] + step if u0[i] + step <= 1 else u0[i] - step
    return simplex


def relative_bounds(params: PipelineParams, names, frac: float) -> dict:
    """Symmetric multiplicative box ``[v (1 - frac), v (1 + frac)]`` for each name."""
    v = params_to_vector(params)
    all_names = param_names(params)
    return {k: (v[all_names.index(k)] * (1 - frac), v[all_names.index(k)] * (1 + frac)) for k in names}
