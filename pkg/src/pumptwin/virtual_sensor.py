"""Pump-outlet flow ripple estimated from line pressures of a calibrated pipeline.

Two estimators share one problem description:

* a two-transducer wave decomposition, exact for the linear laminar
  transmission-line model and evaluated per harmonic of a periodic window;
* a physics-informed coordinate network fitted to the sensor pressures,
  the pipe equations and the orifice law.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import IllPosedError, TrainingError, ValidationError
from .moc import PipelineParams, laminar_resistance
from .signal import RngStream, Signal


@dataclass(frozen=True)
class InverseProblem:
    params: PipelineParams
    sensor_pressures: tuple          # ((x_j, Signal), ...)
    estimation_window: tuple | None = None   # (t0, t1) in s; None = whole record

    def __post_init__(self):
        pairs = tuple((float(x), s) for x, s in self.sensor_pressures)
        if not pairs:
            raise ValidationError("need at least one sensor pressure")
        fs, n = pairs[0][1].sample_rate, len(pairs[0][1])
        for x, s in pairs:
            if s.sample_rate != fs or len(s) != n or s.start_time != pairs[0][1].start_time:
                raise ValidationError("sensor records must share sample rate, length and start")
            if not 0 <= x <= self.params.total_length:
                raise ValidationError(f"sensor at {x} m outside the pipeline")
        object.__setattr__(self, "sensor_pressures", tuple(sorted(pairs, key=lambda p: p[0])))
        if self.estimation_window is not None:
            t0, t1 = self.estimation_window
            s = pairs[0][1]
            if not (s.start_time - 1e-12 <= t0 < t1 <= s.start_time + s.duration + 1e-12):
                raise ValidationError(f"window {self.estimation_window} outside the record")

    @property
    def sample_rate(self) -> float:
        return self.sensor_pressures[0][1].sample_rate

    def window_slice(self) -> slice:
        s = self.sensor_pressures[0][1]
        if self.estimation_window is None:
            return slice(0, len(s))
        t0, t1 = self.estimation_window
        a = int(round((t0 - s.start_time) * s.sample_rate))
        b = int(round((t1 - s.start_time) * s.sample_rate))
        return slice(a, b)

    def windowed(self) -> list[tuple[float, np.ndarray]]:
        sl = self.window_slice()
        return [(x, s.samples[sl]) for x, s in self.sensor_pressures]

    @property
    def window_start(self) -> float:
        s = self.sensor_pressures[0][1]
        return s.start_time + self.window_slice().start / s.sample_rate


# -- frequency-domain line model ------------------------------------------------

def _line_constants(params: PipelineParams, i: int, omega: np.ndarray):
    seg = params.segments[i]
    A = seg.area
    R = laminar_resistance(seg.diameter, params.rho, params.nu)
    Zs = 1j * omega * params.rho / A + R
    Ysh = 1j * omega * A / (params.rho * seg.wave_speed ** 2)
    gamma = np.sqrt(Zs * Ysh)
    with np.errstate(divide="ignore", invalid="ignore"):
        Zc = np.where(omega > 0, Zs / gamma, np.inf + 0j)
    return gamma, Zc


def _segment_start(params: PipelineParams, i: int) -> float:
    return sum(s.length for s in params.segments[:i])


def steady_flow_from_pressure(params: PipelineParams, x: float, p_mean: float) -> float:
    """Flow through the orifice implied by mean pressure ``p_mean`` at position ``x``."""
    rd = 0.0   # laminar resistance (Pa s/m^3) between x and the orifice
    edge = 0.0
    for s in params.segments:
        lo, hi = edge, edge + s.length
        overlap = max(0.0, hi - max(lo, x))
        rd += laminar_resistance(s.diameter, params.rho, params.nu) * overlap
        edge = hi
    dp = p_mean - params.p_set
    if dp <= 0:
        return 0.0
    k2 = params.kv ** 2
    # Q^2 + kv^2 rd Q - kv^2 dp = 0, positive root
    return 0.5 * (-k2 * rd + math.sqrt((k2 * rd) ** 2 + 4.0 * k2 * dp))


def estimate_flow_wave_decomposition(prob: InverseProblem, regularization: float = 0.005,
                                     friction: bool = True) -> Signal:
    """Flow at x = 0 from the two outermost sensors of one pipe segment.

    The window is treated as one period of a periodic record, so it should
    span a whole number of shaft revolutions. At each harmonic the forward
    and backward wave amplitudes solve a 2x2 system whose conditioning
    degrades where the sensor spacing is a multiple of half a wavelength;
    Tikhonov damping with relative strength ``regularization`` keeps those
    bins bounded.
    """
    params = prob.params
    if len(prob.sensor_pressures) < 2:
        raise IllPosedError("wave decomposition needs two pressure sensors")
    (x1, p1), (x2, p2) = prob.windowed()[0], prob.windowed()[-1]
    i1, i2 = params.segment_of(x1), params.segment_of(x2)
    if i1 != i2:
        raise IllPosedError("both sensors must lie in one pipe segment")
    seg = params.segments[i1]
    fs = prob.sample_rate
    if abs(x2 - x1) < 2.0 * seg.wave_speed / fs:
        raise IllPosedError(f"sensors {abs(x2 - x1):.4f} m apart, closer than two grid cells")
    if not friction:
        params = _frictionless(params)
    n = p1.size
    omega = 2.0 * np.pi * np.fft.rfftfreq(n, 1.0 / fs)
    P1, P2 = np.fft.rfft(p1), np.fft.rfft(p2)
    gamma, Zc = _line_constants(params, i1, omega)
    x0 = _segment_start(params, i1)
    d1, d2 = x1 - x0, x2 - x0
    M = np.empty((omega.size, 2, 2), dtype=complex)
    M[:, 0, 0], M[:, 0, 1] = np.exp(-gamma * d1), np.exp(gamma * d1)
    M[:, 1, 0], M[:, 1, 1] = np.exp(-gamma * d2), np.exp(gamma * d2)
    U, sv, Vh = np.linalg.svd(M)
    with np.errstate(divide="ignore", invalid="ignore"):
        damp = np.where(sv > 0, sv / (sv ** 2 + (regularization * sv[:, :1]) ** 2), 0.0)
    rhs = np.stack([P1, P2], axis=1)
    coef = np.einsum("kji,kj->ki", U.conj(), rhs) * damp
    FG = np.einsum("kji,kj->ki", Vh.conj(), coef)
    Fw, Gw = FG[:, 0], FG[:, 1]
    Pk = Fw + Gw
    with np.errstate(divide="ignore", invalid="ignore"):
        Qk = np.where(omega > 0, (Fw - Gw) / Zc, 0.0)
    # carry (p, Q) back through any upstream segments to the pump outlet
    for j in range(i1 - 1, -1, -1):
        g, zc = _line_constants(params, j, omega)
        L = params.segments[j].length
        ch, sh = np.cosh(g * L), np.sinh(g * L)
        with np.errstate(divide="ignore", invalid="ignore"):
            Pk, Qk = ch * Pk + zc * sh * Qk, np.where(omega > 0, sh / zc * Pk, 0.0) + ch * Qk
    q_mean = steady_flow_from_pressure(params, x2, float(p2.mean()))
    Qk = np.asarray(Qk, dtype=complex)
    Qk[0] = q_mean * n
    q = np.fft.irfft(Qk, n)
    return Signal(q, fs, start_time=prob.window_start, channel_id="Q_hat@0", unit="m3/s")


def _frictionless(params: PipelineParams) -> PipelineParams:
    # laminar resistance scales with nu, so nu -> 0 removes friction exactly
    from dataclasses import replace
    return replace(params, nu=1e-300)


# -- physics-informed network ------------------------------------------------------

@dataclass
class PinnConfig:
    hidden_layers: int = 4
    width: int = 64
    harmonics: int = 48               # shaft-frequency Fourier features of time
    n_interior: int = 2048            # collocation points per step
    n_boundary: int = 256             # orifice points per step
    w_data: float = 1.0
    w_pde: float = 1.0
    w_bc: float = 1.0
    steps: int = 3000
    lr: float = 2e-3
    fd_dx: float | None = None        # default: total length / 2000
    fd_dt: float | None = None        # default: 1 / (4 * sample rate)
    shaft_frequency: float = 1000.0 / 60.0
    omega_x: float = 20.0             # first-layer frequency over the normalized position

    def __post_init__(self):
        counts = (self.hidden_layers, self.width, self.harmonics, self.n_interior,
                  self.n_boundary, self.steps)
        if any(int(c) < 1 for c in counts):
            raise ValidationError("PINN sizes and counts must be positive")
        if min(self.w_data, self.w_pde, self.w_bc) <= 0 or not self.lr > 0:
            raise ValidationError("loss weights and learning rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PinnResult:
    flow: Signal
    history: list = field(default_factory=list)   # (step, data, pde, bc, total), normalized
    initial_losses: tuple = ()    # (data, pde, bc) on a fixed held-out point set
    final_losses: tuple = ()

    def relative_losses(self) -> tuple:
        return tuple(f / i if i > 0 else 0.0 for f, i in zip(self.final_losses, self.initial_losses))

    def write_loss_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "data", "pde", "bc", "total"])
            for row in self.history:
                w.writerow([row[0]] + [f"{v:.9g}" for v in row[1:]])
        return path


class _SineMLP(torch.nn.Module):
    """Sine-activated MLP of position; first layer frequency ``omega_x`` per unit input."""

    def __init__(self, width: int, depth: int, n_out: int, omega_x: float, gen: torch.Generator):
        super().__init__()
        dims = [1] + [width] * depth
        self.hidden = torch.nn.ModuleList(torch.nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.out = torch.nn.Linear(width, n_out)
        with torch.no_grad():
            for k, lin in enumerate(self.hidden):
                bound = omega_x if k == 0 else math.sqrt(6.0 / lin.in_features)
                lin.weight.uniform_(-bound, bound, generator=gen)
                if k == 0:
                    lin.bias.uniform_(-math.pi, math.pi, generator=gen)
                else:
                    lin.bias.zero_()
            b = math.sqrt(6.0 / width) * 1e-2
            self.out.weight.uniform_(-b, b, generator=gen)
            self.out.bias.zero_()

    def forward(self, z):
        for lin in self.hidden:
            z = torch.sin(lin(z))
        return self.out(z)


class _FlowField:
    """(x, t) -> (p, Q): truncated Fourier series in time with position-dependent coefficients."""

    def __init__(self, net, length, omega_shaft, harmonics, p_mean, p_scale, q_mean, q_scale):
        self.net = net
        self.length = length
        self.K = harmonics
        self.k = torch.arange(1, harmonics + 1, dtype=torch.float64) * omega_shaft
        self.p_mean, self.p_scale = p_mean, p_scale
        self.q_mean, self.q_scale = q_mean, q_scale

    def coefficients(self, x):
        xn = (2.0 * x / self.length - 1.0)[:, None]
        return self.net(xn).view(-1, 2, 2 * self.K + 1)

    def basis(self, t):
        ph = t[:, None] * self.k[None, :]
        return torch.cat([torch.ones_like(t)[:, None], torch.cos(ph), torch.sin(ph)], dim=1)

    def __call__(self, x, t):
        o = (self.coefficients(x) * self.basis(t)[:, None, :]).sum(-1)
        return self.p_mean + self.p_scale * o[:, 0], self.q_mean + self.q_scale * o[:, 1]


def _segment_tables(params: PipelineParams):
    edges = np.cumsum([0.0] + [s.length for s in params.segments])
    cont = np.array([params.rho * s.wave_speed ** 2 / s.area for s in params.segments])
    mom = np.array([s.area / params.rho for s in params.segments])
    res = np.array([laminar_resistance(s.diameter, params.rho, params.nu) for s in params.segments])
    return edges, cont, mom, res


def estimate_flow_pinn(prob: InverseProblem, cfg: PinnConfig = PinnConfig(), seed: int = 0,
                       reference_flow: float | None = None) -> PinnResult:
    """Fit u(x, t) -> (p, Q) to the sensors, pipe equations and orifice law; return Q(0, t).

    Time enters as Fourier features of the shaft frequency, so the network
    represents periodic steady states exactly; the window should span whole
    revolutions. Interior collocation points stay ``fd_dx`` away from segment
    junctions so central differences never straddle a change of pipe.
    """
    params = prob.params
    fs = prob.sample_rate
    data = prob.windowed()
    n = data[0][1].size
    t_axis = prob.window_start + np.arange(n) / fs
    L = params.total_length
    dx = cfg.fd_dx or L / 2000.0
    dt = cfg.fd_dt or 1.0 / (4.0 * fs)
    edges, cont, mom, res = _segment_tables(params)

    p_all = np.concatenate([p for _, p in data])
    p_mean = float(p_all.mean())
    p_scale = float(max(np.std(p_all), 1.0))
    q_mean = reference_flow if reference_flow is not None else steady_flow_from_pressure(
        params, data[-1][0], float(data[-1][1].mean()))
    q_scale = max(p_scale / (params.rho * params.segments[0].wave_speed / params.segments[0].area),
                  1e-12)

    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(int(seed))
    rng = RngStream(seed).spawn(7)
    net = _SineMLP(cfg.width, cfg.hidden_layers, 2 * (2 * cfg.harmonics + 1), cfg.omega_x,
                   gen).double()
    field_ = _FlowField(net, L, 2.0 * math.pi * cfg.shaft_frequency, cfg.harmonics,
                        p_mean, p_scale, q_mean, q_scale)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps, eta_min=cfg.lr * 0.02)

    x_sens = torch.tensor([x for x, _ in data], dtype=torch.float64)
    p_meas = torch.as_tensor(np.stack([p for _, p in data]))
    basis_data = field_.basis(torch.as_tensor(t_axis))
    t_lo, t_hi = t_axis[0], t_axis[-1] + 1.0 / fs

    def interior_points(m, stream=rng):
        # uniform over the pipe, rejecting points within dx of a junction or an end
        x = stream.uniform(2 * m) * L
        ok = np.ones_like(x, dtype=bool)
        for e in edges:
            ok &= np.abs(x - e) > dx
        x = x[ok][:m]
        t = t_lo + stream.uniform(x.size) * (t_hi - t_lo)
        seg = np.clip(np.searchsorted(edges, x) - 1, 0, len(params.segments) - 1)
        return x, t, seg

    def as_t(a):
        return torch.as_tensor(np.asarray(a, dtype=np.float64))

    held_out = RngStream(seed).spawn(8)
    eval_interior = interior_points(4 * cfg.n_interior, held_out)
    eval_boundary = t_lo + held_out.uniform(4 * cfg.n_boundary) * (t_hi - t_lo)

    def losses(interior=None, boundary=None):
        # data: every sensor sample of the window
        c = field_.coefficients(x_sens)[:, 0, :]
        pd = field_.p_mean + field_.p_scale * (c @ basis_data.T)
        l_data = torch.mean(((pd - p_meas) / p_scale) ** 2)
        # pipe equations by central differences
        x, t, seg = interior if interior is not None else interior_points(cfg.n_interior)
        X, T = as_t(x), as_t(t)
        pxp, qxp = field_(X + dx, T)
        pxm, qxm = field_(X - dx, T)
        ptp, qtp = field_(X, T + dt)
        ptm, qtm = field_(X, T - dt)
        _, q0 = field_(X, T)
        dp_dx, dq_dx = (pxp - pxm) / (2 * dx), (qxp - qxm) / (2 * dx)
        dp_dt, dq_dt = (ptp - ptm) / (2 * dt), (qtp - qtm) / (2 * dt)
        r_cont = dp_dt + as_t(cont[seg]) * dq_dx
        r_mom = dq_dt + as_t(mom[seg]) * (dp_dx + as_t(res[seg]) * q0)
        w_ref = 2.0 * math.pi * 150.0
        l_pde = (torch.mean((r_cont / (w_ref * p_scale)) ** 2)
                 + torch.mean((r_mom / (w_ref * q_scale)) ** 2))
        # orifice at the pipe end
        if boundary is None:
            boundary = t_lo + rng.uniform(cfg.n_boundary) * (t_hi - t_lo)
        tb = as_t(boundary)
        pb, qb = field_(torch.full_like(tb, L), tb)
        q_or = params.kv * torch.sqrt(torch.clamp(pb - params.p_set, min=0.0))
        l_bc = torch.mean(((qb - q_or) / q_scale) ** 2)
        return l_data, l_pde, l_bc

    with torch.no_grad():
        init = tuple(max(float(v), 1e-30) for v in losses())
        init_eval = tuple(float(v) for v in losses(eval_interior, eval_boundary))
    history = []
    for step in range(1, cfg.steps + 1):
        opt.zero_grad()
        ld, lp, lb = losses()
        total = (cfg.w_data * ld / init[0] + cfg.w_pde * lp / init[1] + cfg.w_bc * lb / init[2])
        if not torch.isfinite(total):
            raise TrainingError(f"PINN loss became non-finite at step {step}")
        total.backward()
        opt.step()
        sched.step()
        if step == 1 or step % 50 == 0 or step == cfg.steps:
            history.append((step, float(ld.detach()) / init[0], float(lp.detach()) / init[1],
                            float(lb.detach()) / init[2], float(total.detach())))
    with torch.no_grad():
        _, q = field_(torch.zeros(n, dtype=torch.float64), as_t(t_axis))
        final_eval = tuple(float(v) for v in losses(eval_interior, eval_boundary))
    flow = Signal(q.numpy().copy(), fs, start_time=prob.window_start, channel_id="Q_pinn@0",
                  unit="m3/s")
    return PinnResult(flow, history, init_eval, final_eval)


def write_flow_csv(s: Signal, path: str | Path) -> Path:
    from .signal import write_signal_csv
    return write_signal_csv(s, path)
