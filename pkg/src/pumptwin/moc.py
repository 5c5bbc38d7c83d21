"""Method-of-characteristics solver for laminar 1D unsteady flow in a pipe chain.

Each segment is discretised at Courant number one: the node count is the
travel time rounded to whole time steps and the wave speed is nudged so that
``a' = L / (n dt)`` exactly. Along ``dx/dt = +a`` and ``dx/dt = -a``::

    C+ :  p_P = p_A + B Q_A - R dx Q_A - B Q_P
    C- :  p_P = p_B - B Q_B + R dx Q_B + B Q_P

with characteristic impedance ``B = rho a / A`` and laminar resistance
``R = 128 rho nu / (pi D^4)``. Junction nodes are shared between adjacent
segments, so pressure and flow continuity hold by construction.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numba
import numpy as np

from .errors import DiscretizationError, NumericalError, ValidationError
from .signal import Signal

MAX_SPEED_ADJUST = 0.02


@dataclass(frozen=True)
class PipeSegment:
    length: float
    diameter: float
    wave_speed: float

    def __post_init__(self):
        if not (self.length > 0 and self.diameter > 0 and self.wave_speed > 0):
            raise ValidationError(f"pipe segment fields must be positive: {self}")

    @property
    def area(self) -> float:
        return math.pi * self.diameter ** 2 / 4.0


@dataclass(frozen=True)
class PipelineParams:
    segments: tuple = (
        PipeSegment(5.953, 19.71e-3, 1022.9),
        PipeSegment(1.144, 23.07e-3, 982.7),
        PipeSegment(1.675, 14.86e-3, 1308.4),
    )
    sensors: tuple = (0.4167, 2.5895)
    kv: float = 4.7e-7          # m^3/(s Pa^0.5)
    p_set: float = 9.484e6      # Pa
    rho: float = 870.0          # kg/m^3
    nu: float = 4.0e-5          # m^2/s

    def __post_init__(self):
        segs = tuple(self.segments)
        if not segs:
            raise ValidationError("pipeline needs at least one segment")
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "sensors", tuple(float(x) for x in self.sensors))
        if not (self.kv > 0 and self.rho > 0 and self.nu > 0):
            raise ValidationError("kv, rho and nu must be positive")
        total = self.total_length
        for x in self.sensors:
            if not 0 <= x <= total:
                raise ValidationError(f"sensor at {x} m lies outside the {total:.4f} m pipeline")

    @property
    def total_length(self) -> float:
        return sum(s.length for s in self.segments)

    def segment_of(self, x: float) -> int:
        edge = 0.0
        for i, s in enumerate(self.segments):
            edge += s.length
            if x <= edge:
                return i
        return len(self.segments) - 1

    def with_sensors(self, sensors) -> "PipelineParams":
        return replace(self, sensors=tuple(sensors))

    def to_dict(self) -> dict:
        return {
            "segments": [{"length": s.length, "diameter": s.diameter, "wave_speed": s.wave_speed}
                         for s in self.segments],
            "sensors": list(self.sensors), "kv": self.kv, "p_set": self.p_set,
            "rho": self.rho, "nu": self.nu,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineParams":
        segs = tuple(PipeSegment(float(s["length"]), float(s["diameter"]), float(s["wave_speed"]))
                     for s in d["segments"])
        base = cls()
        return cls(segs, tuple(d.get("sensors", base.sensors)), float(d.get("kv", base.kv)),
                   float(d.get("p_set", base.p_set)), float(d.get("rho", base.rho)),
                   float(d.get("nu", base.nu)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "PipelineParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- parameter vector used by calibration --------------------------------------

def param_names(params: PipelineParams) -> list[str]:
    m = len(params.segments)
    names = [f"a{i + 1}" for i in range(m)] + [f"D{i + 1}" for i in range(m)]
    names += [f"L{i + 1}" for i in range(m)] + [f"x{j + 1}" for j in range(len(params.sensors))]
    return names + ["kv"]


def params_to_vector(params: PipelineParams) -> np.ndarray:
    segs = params.segments
    return np.array([s.wave_speed for s in segs] + [s.diameter for s in segs]
                    + [s.length for s in segs] + list(params.sensors) + [params.kv])


def params_from_vector(v, template: PipelineParams) -> PipelineParams:
    m, k = len(template.segments), len(template.sensors)
    v = np.asarray(v, dtype=np.float64)
    segs = tuple(PipeSegment(float(v[2 * m + i]), float(v[m + i]), float(v[i])) for i in range(m))
    return replace(template, segments=segs, sensors=tuple(float(x) for x in v[3 * m:3 * m + k]),
                   kv=float(v[3 * m + k]))


# -- physics ---------------------------------------------------------------------

def laminar_resistance(diameter: float, rho: float, nu: float) -> float:
    return 128.0 * rho * nu / (math.pi * diameter ** 4)


def friction_term(Q, seg: PipeSegment, rho: float, nu: float):
    """Steady laminar pressure gradient (Pa/m) for flow ``Q``."""
    return laminar_resistance(seg.diameter, rho, nu) * Q


@dataclass(frozen=True)
class SimulationGrid:
    dt: float
    substeps: int
    nodes_per_segment: tuple      # reaches per segment
    wave_speeds: tuple            # adjusted, Courant exactly 1
    node_x: np.ndarray = field(repr=False)
    node_segment_left: np.ndarray = field(repr=False)   # segment of reach left of node
    node_segment_right: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.node_x.size

    @property
    def output_dt(self) -> float:
        return self.dt * self.substeps

    @property
    def travel_time(self) -> float:
        return self.dt * sum(self.nodes_per_segment)

    @property
    def junction_nodes(self) -> list[int]:
        idx = np.cumsum(self.nodes_per_segment)[:-1]
        return [int(i) for i in idx]


def build_grid(params: PipelineParams, sample_rate: float, substeps: int = 1) -> SimulationGrid:
    if sample_rate <= 0 or substeps < 1:
        raise ValidationError("sample_rate must be positive and substeps >= 1")
    dt = 1.0 / (sample_rate * substeps)
    counts, speeds = [], []
    for i, s in enumerate(params.segments):
        n = int(round(s.length / (s.wave_speed * dt)))
        if n < 1:
            raise DiscretizationError(
                f"segment {i + 1}: dt={dt:.3e} s exceeds its travel time; use a smaller time step")
        a_adj = s.length / (n * dt)
        if abs(a_adj / s.wave_speed - 1.0) > MAX_SPEED_ADJUST:
            raise DiscretizationError(
                f"segment {i + 1}: wave speed adjustment {100 * (a_adj / s.wave_speed - 1):.2f}% "
                f"exceeds {100 * MAX_SPEED_ADJUST:.0f}%; choose a different dt")
        counts.append(n)
        speeds.append(a_adj)
    xs, left, right = [0.0], [-1], []
    x0 = 0.0
    for i, (s, n) in enumerate(zip(params.segments, counts)):
        xs.extend(x0 + s.length * np.arange(1, n + 1) / n)
        left.extend([i] * n)
        right.extend([i] * n)
        x0 += s.length
    right.append(-1)
    return SimulationGrid(dt, int(substeps), tuple(counts), tuple(speeds), np.array(xs),
                          np.array(left), np.array(right))


@dataclass(frozen=True)
class PressureField:
    """Pressure and flow histories at the recorded nodes (rows = time steps)."""
    p: np.ndarray
    Q: np.ndarray
    node_index: np.ndarray
    node_x: np.ndarray
    dt: float
    start_time: float = 0.0

    @property
    def n_steps(self) -> int:
        return self.p.shape[0]

    @property
    def time(self) -> np.ndarray:
        return self.start_time + self.dt * np.arange(self.n_steps)

    def history(self, node: int) -> tuple[np.ndarray, np.ndarray]:
        k = np.searchsorted(self.node_index, node)
        if k >= self.node_index.size or self.node_index[k] != node:
            raise ValidationError(f"node {node} was not recorded")
        return self.p[:, k], self.Q[:, k]

    def to_csv(self, path, x_positions, grid: SimulationGrid) -> Path:
        path = Path(path)
        cols = [sample_sensor(self, x, grid).samples for x in x_positions]
        header = "time_s," + ",".join(f"p_at_{x:.6g}m" for x in x_positions)
        np.savetxt(path, np.column_stack([self.time] + cols), delimiter=",",
                   header=header, comments="", fmt="%.17g")
        return path


def _node_coefficients(params: PipelineParams, grid: SimulationGrid, friction: bool):
    n = grid.n_nodes
    left = np.asarray(grid.node_segment_left)
    right = np.asarray(grid.node_segment_right)
    a = np.asarray(grid.wave_speeds, dtype=np.float64)
    B_seg = np.array([params.rho * a[i] / s.area for i, s in enumerate(params.segments)])
    R_seg = np.array([laminar_resistance(s.diameter, params.rho, params.nu) * a[i] * grid.dt
                      if friction else 0.0 for i, s in enumerate(params.segments)])
    BL, BR, RL, RR = (np.zeros(n) for _ in range(4))
    has_l, has_r = left >= 0, right >= 0
    BL[has_l], RL[has_l] = B_seg[left[has_l]], R_seg[left[has_l]]
    BR[has_r], RR[has_r] = B_seg[right[has_r]], R_seg[right[has_r]]
    return BL, BR, RL, RR


@numba.njit(cache=True)
def _moc_kernel(p, Q, BL, BR, RL, RR, q_in, n_steps, substeps, rec, out_p, out_Q,
                kv, p_set, closed_end):
    n = p.size
    pn = np.empty(n)
    Qn = np.empty(n)
    cl = BL - RL            # C+ coefficient on the upstream neighbour's flow
    cr = BR - RR            # C- coefficient on the downstream neighbour's flow
    inv = np.zeros(n)
    for j in range(1, n - 1):
        inv[j] = 1.0 / (BL[j] + BR[j])
    for k in range(rec.size):
        out_p[0, k] = p[rec[k]]
        out_Q[0, k] = Q[rec[k]]
    kv2 = kv * kv
    B = BL[n - 1]
    for s in range(1, n_steps + 1):
        for j in range(1, n - 1):
            cp = p[j - 1] + cl[j] * Q[j - 1]
            cm = p[j + 1] - cr[j] * Q[j + 1]
            qj = (cp - cm) * inv[j]
            Qn[j] = qj
            pn[j] = cp - BL[j] * qj
        # pump outlet: prescribed flow, C- from node 1
        Qn[0] = q_in[s]
        pn[0] = p[1] - cr[0] * Q[1] + BR[0] * q_in[s]
        # valve: C+ from node n-2 and orifice law, positive root of the quadratic
        cp = p[n - 2] + cl[n - 1] * Q[n - 2]
        if closed_end:
            Qn[n - 1] = 0.0
            pn[n - 1] = cp
        elif cp > p_set:
            qv = 0.5 * (-kv2 * B + np.sqrt(kv2 * kv2 * B * B + 4.0 * kv2 * (cp - p_set)))
            Qn[n - 1] = qv
            pn[n - 1] = cp - B * qv
        else:
            Qn[n - 1] = 0.0
            pn[n - 1] = cp
        p, pn = pn, p
        Q, Qn = Qn, Q
        if s % substeps == 0:
            r = s // substeps
            bad = False
            for k in range(rec.size):
                out_p[r, k] = p[rec[k]]
                out_Q[r, k] = Q[rec[k]]
                if not (np.isfinite(p[rec[k]]) and np.isfinite(Q[rec[k]])):
                    bad = True
            if bad or not (np.isfinite(p[0]) and np.isfinite(p[n - 1])):
                return s
    return -1


def steady_state(params: PipelineParams, grid: SimulationGrid, q_mean: float, friction=True):
    """Discrete steady pressure profile for uniform flow ``q_mean``."""
    p_end = params.p_set + (max(q_mean, 0.0) / params.kv) ** 2
    drop = np.zeros(grid.n_nodes)
    if friction:
        for j in range(grid.n_nodes - 1):
            s = params.segments[grid.node_segment_right[j]]
            dx = grid.wave_speeds[grid.node_segment_right[j]] * grid.dt
            drop[j] = laminar_resistance(s.diameter, params.rho, params.nu) * dx * q_mean
    p = p_end + np.cumsum(drop[::-1])[::-1]
    return p, np.full(grid.n_nodes, float(q_mean))


def sensor_nodes(grid: SimulationGrid, x: float) -> tuple[int, int, float]:
    """Bracketing nodes (j, j+1) and interpolation weight for position ``x``."""
    xs = grid.node_x
    if not xs[0] <= x <= xs[-1]:
        raise ValidationError(f"position {x} m outside the pipeline [0, {xs[-1]:.4f}] m")
    j = int(np.searchsorted(xs, x, side="right") - 1)
    j = min(max(j, 0), xs.size - 2)
    w = (x - xs[j]) / (xs[j + 1] - xs[j])
    return j, j + 1, float(w)


def simulate(params: PipelineParams, inlet_flow: Signal, duration: float | None = None, *,
             substeps: int = 1, record="sensors", downstream: str = "orifice",
             friction: bool = True, initial=None, grid: SimulationGrid | None = None) -> PressureField:
    """Propagate the pump-outlet flow ``inlet_flow`` through the pipeline.

    ``record`` is ``"sensors"`` (nodes bracketing every sensor), ``"all"``, or an
    explicit sequence of node indices. ``initial`` optionally overrides the
    steady initial state with ``(p, Q)`` node arrays.
    """
    fs = inlet_flow.sample_rate
    grid = grid or build_grid(params, fs, substeps)
    n_out = len(inlet_flow) if duration is None else int(round(duration * fs))
    if n_out > len(inlet_flow) or n_out < 2:
        raise ValidationError(
            f"inlet flow covers {len(inlet_flow)} samples but {n_out} were requested")
    if record == "all":
        rec = np.arange(grid.n_nodes)
    elif record == "sensors":
        idx = set()
        for x in params.sensors:
            j0, j1, _ = sensor_nodes(grid, x)
            idx.update((j0, j1))
        rec = np.array(sorted(idx), dtype=np.int64)
    else:
        rec = np.unique(np.asarray(record, dtype=np.int64))
    if downstream not in ("orifice", "closed"):
        raise ValidationError(f"unknown downstream boundary {downstream!r}")

    q = inlet_flow.samples[:n_out]
    sub = grid.substeps
    n_steps = (n_out - 1) * sub
    if sub == 1:
        q_fine = q.copy()
    else:
        q_fine = np.interp(np.arange(n_steps + 1) / sub, np.arange(n_out), q)
    if initial is None:
        # mean of the whole inlet record, so a shorter duration cannot change the start state
        p0, Q0 = steady_state(params, grid, float(inlet_flow.samples.mean()), friction)
    else:
        p0, Q0 = (np.array(a, dtype=np.float64) for a in initial)
    BL, BR, RL, RR = _node_coefficients(params, grid, friction)
    out_p = np.empty((n_out, rec.size))
    out_Q = np.empty((n_out, rec.size))
    status = _moc_kernel(p0, Q0, BL, BR, RL, RR, q_fine, n_steps, sub, rec, out_p, out_Q,
                         params.kv, params.p_set, downstream == "closed")
    if status >= 0:
        raise NumericalError(f"MOC solution became non-finite at internal step {status}")
    return PressureField(out_p, out_Q, rec, grid.node_x[rec], grid.output_dt, inlet_flow.start_time)


def sample_sensor(field: PressureField, x_j: float, grid: SimulationGrid) -> Signal:
    j0, j1, w = sensor_nodes(grid, x_j)
    p0, _ = field.history(j0)
    if w == 0.0:
        y = p0.copy()
    else:
        p1, _ = field.history(j1)
        y = p1.copy() if w == 1.0 else (1.0 - w) * p0 + w * p1
    return Signal(y, 1.0 / field.dt, start_time=field.start_time,
                  channel_id=f"p@{x_j:.4f}m", unit="Pa")


def sensor_pressures(params: PipelineParams, inlet_flow: Signal, duration=None, **kw) -> list[Signal]:
    """Pressure histories at every configured sensor."""
    sub = kw.pop("substeps", 1)
    grid = build_grid(params, inlet_flow.sample_rate, sub)
    field = simulate(params, inlet_flow, duration, grid=grid, **kw)
    return [sample_sensor(field, x, grid) for x in params.sensors]


def acoustic_energy(field: PressureField, params: PipelineParams, grid: SimulationGrid,
                    p_ref: float) -> np.ndarray:
    """Discrete acoustic energy per recorded step (requires ``record="all"``)."""
    if field.node_index.size != grid.n_nodes:
        raise ValidationError("energy needs the full field")
    n = grid.n_nodes
    wgt = np.zeros(n)   # dx * A/(2 rho a^2) and dx * rho/(2A), trapezoid over reaches
    wq = np.zeros(n)
    for j in range(n - 1):
        si = grid.node_segment_right[j]
        s = params.segments[si]
        a = grid.wave_speeds[si]
        dx = a * grid.dt
        cp = dx * s.area / (2 * params.rho * a * a)
        cq = dx * params.rho / (2 * s.area)
        wgt[j] += cp / 2
        wgt[j + 1] += cp / 2
        wq[j] += cq / 2
        wq[j + 1] += cq / 2
    dp = field.p - p_ref
    return dp ** 2 @ wgt + field.Q ** 2 @ wq
