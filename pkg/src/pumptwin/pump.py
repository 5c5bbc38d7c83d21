"""Kinematic axial-piston pump outlet flow with injectable leakage faults.

The healthy delivery is the superposition of half-wave rectified piston
velocities plus a short compressibility backflow pulse each time a piston
chamber opens to the discharge port. Leakage faults subtract smooth
raised-cosine dips at fixed shaft angles.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .signal import Signal

HEALTH_LABELS = ("H", "S", "C1", "C2")
_DIP_COUNT = {"H": 0, "S": 1, "C1": 2, "C2": 2, "C": 2}


@dataclass(frozen=True)
class PumpGeometry:
    n_pistons: int = 9
    speed: float = 1000.0            # r/min
    piston_area: float = 2.0106e-4   # m^2 (16 mm bore)
    pitch_radius: float = 0.03       # m
    swash_angle: float = math.radians(15.0)
    backflow_fraction: float = 0.03  # backflow volume / piston stroke volume
    backflow_width: float = math.radians(4.0)  # std of the backflow pulse, shaft rad

    def __post_init__(self):
        if self.n_pistons < 2:
            raise ValidationError("a pump needs at least two pistons")
        for name in ("speed", "piston_area", "pitch_radius", "swash_angle", "backflow_width"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if not 0 <= self.backflow_fraction < 1:
            raise ValidationError("backflow_fraction must lie in [0, 1)")

    @property
    def shaft_frequency(self) -> float:
        return self.speed / 60.0

    @property
    def pumping_frequency(self) -> float:
        return self.n_pistons * self.speed / 60.0

    @property
    def omega(self) -> float:
        return 2.0 * math.pi * self.shaft_frequency

    @property
    def stroke_volume(self) -> float:
        return self.piston_area * 2.0 * self.pitch_radius * math.tan(self.swash_angle)

    @property
    def mean_flow(self) -> float:
        return self.n_pistons * self.stroke_volume * (1.0 - self.backflow_fraction) * self.shaft_frequency

    def tdc_angle(self, piston: int) -> float:
        """Shaft angle (rad, in [0, 2 pi)) at which ``piston`` reaches top dead centre."""
        return (math.pi - 2.0 * math.pi * piston / self.n_pistons) % (2.0 * math.pi)

    def to_dict(self) -> dict:
        return dict(n_pistons=self.n_pistons, speed=self.speed, piston_area=self.piston_area,
                    pitch_radius=self.pitch_radius, swash_angle=self.swash_angle,
                    backflow_fraction=self.backflow_fraction, backflow_width=self.backflow_width)


@dataclass(frozen=True)
class FaultSpec:
    label: str = "H"
    dip_depth: float | tuple = 0.0   # fraction of mean flow; scalar or one value per dip
    dip_width: float = 0.05          # fraction of one shaft revolution (full support)
    dip_phases: tuple = ()

    def __post_init__(self):
        if self.label not in _DIP_COUNT:
            raise ValidationError(f"unknown health label {self.label!r}")
        phases = tuple(float(p) for p in self.dip_phases)
        object.__setattr__(self, "dip_phases", phases)
        if len(phases) != _DIP_COUNT[self.label]:
            raise ValidationError(
                f"label {self.label} needs {_DIP_COUNT[self.label]} dips, got {len(phases)}")
        depths = self.depths
        if any(not 0 <= d < 1 for d in depths):
            raise ValidationError("dip depths must lie in [0, 1)")
        if phases and not 0 < self.dip_width < 1:
            raise ValidationError("dip width must lie in (0, 1)")

    @property
    def depths(self) -> tuple:
        if isinstance(self.dip_depth, (tuple, list)):
            if len(self.dip_depth) != len(self.dip_phases):
                raise ValidationError("per-dip depths must match the number of dips")
            return tuple(float(d) for d in self.dip_depth)
        return (float(self.dip_depth),) * len(self.dip_phases)

    def to_dict(self) -> dict:
        d = self.dip_depth
        return dict(label=self.label, dip_depth=list(d) if isinstance(d, (tuple, list)) else d,
                    dip_width=self.dip_width, dip_phases=list(self.dip_phases))

    @classmethod
    def from_dict(cls, d: dict) -> "FaultSpec":
        depth = d.get("dip_depth", 0.0)
        if isinstance(depth, list):
            depth = tuple(depth)
        return cls(d["label"], depth, d.get("dip_width", 0.05), tuple(d.get("dip_phases", ())))


def default_faults(g: PumpGeometry = PumpGeometry(), slipper_piston: int = 0,
                   cylinder_pistons: tuple = (0, 4)) -> dict:
    """Training fault set {H, S, C1, C2} plus the plant cylinder fault under key ``"C"``."""
    s_ph = (g.tdc_angle(slipper_piston),)
    c_ph = tuple(g.tdc_angle(p) for p in cylinder_pistons)
    return {
        "H": FaultSpec("H"),
        "S": FaultSpec("S", 0.35, 0.06, s_ph),
        "C1": FaultSpec("C1", 0.15, 0.05, c_ph),
        "C2": FaultSpec("C2", 0.45, 0.07, c_ph),
        "C": FaultSpec("C", 0.20, 0.05, c_ph),
    }


@dataclass(frozen=True)
class FlowRippleSample:
    signal: Signal
    label: str
    geometry: PumpGeometry
    fault: FaultSpec = field(default_factory=FaultSpec)


def _wrap(phi):
    return (phi + np.pi) % (2.0 * np.pi) - np.pi


def shaft_angle(s: Signal, g: PumpGeometry) -> np.ndarray:
    return g.omega * s.time


def samples_per_rev(g: PumpGeometry, sample_rate: float) -> int:
    n = sample_rate * 60.0 / g.speed
    if abs(n - round(n)) > 1e-6 * n:
        raise ValidationError(
            f"sample rate {sample_rate} Hz does not give an integer number of samples per revolution")
    return int(round(n))


def _kinematic_flow(phi: np.ndarray, g: PumpGeometry) -> np.ndarray:
    k = g.piston_area * g.omega * g.pitch_radius * math.tan(g.swash_angle)
    offsets = 2.0 * np.pi * np.arange(g.n_pistons) / g.n_pistons
    q = np.zeros_like(phi)
    for off in offsets:
        q += np.maximum(np.sin(phi + off), 0.0)
    # backflow: wrapped gaussian at each discharge-port opening, volume per event fixed
    vb = g.backflow_fraction * g.stroke_volume
    sig = g.backflow_width
    norm = vb * g.omega / (sig * math.sqrt(2.0 * math.pi))
    back = np.zeros_like(phi)
    for off in offsets:
        d = _wrap(phi + off)
        for wrap in (-2.0 * np.pi, 0.0, 2.0 * np.pi):
            back += np.exp(-0.5 * ((d + wrap) / sig) ** 2)
    return k * q - norm * back


def ideal_flow_ripple(g: PumpGeometry, sample_rate: float, n_revs: int) -> Signal:
    if sample_rate <= 40.0 * g.pumping_frequency:
        raise ValidationError(
            f"sample rate {sample_rate} Hz too low; need > {40.0 * g.pumping_frequency} Hz")
    if n_revs < 1:
        raise ValidationError("n_revs must be >= 1")
    n1 = samples_per_rev(g, sample_rate)
    t = np.arange(n1) / sample_rate
    one = _kinematic_flow(g.omega * t, g)
    return Signal(np.tile(one, n_revs), sample_rate, channel_id="Q_out", unit="m3/s")


def dip_profile(phi: np.ndarray, g: PumpGeometry, f: FaultSpec) -> np.ndarray:
    """Flow removed by the fault's leakage dips at shaft angles ``phi`` (m^3/s)."""
    out = np.zeros_like(phi, dtype=np.float64)
    half = np.pi * f.dip_width
    for phase, depth in zip(f.dip_phases, f.depths):
        d = _wrap(phi - phase)
        inside = np.abs(d) < half
        out[inside] += depth * g.mean_flow * 0.5 * (1.0 + np.cos(np.pi * d[inside] / half))
    return out


def inject_fault(q: Signal, g: PumpGeometry, f: FaultSpec) -> Signal:
    if f.label == "H" or not f.dip_phases:
        return q.with_samples(q.samples)
    dips = dip_profile(shaft_angle(q, g), g, f)
    # the clamp only engages for extreme depths coinciding with a backflow pulse
    return q.with_samples(np.maximum(q.samples - dips, 0.0))


def generate_source(g: PumpGeometry, f: FaultSpec, sample_rate: float, n_revs: int) -> FlowRippleSample:
    q = inject_fault(ideal_flow_ripple(g, sample_rate, n_revs), g, f)
    return FlowRippleSample(q, f.label, g, f)
