"""Zero-shot diagnosis experiments: twin datasets, the secret plant, runs and reports.

The plant is the pipeline simulator run with the truth parameters plus
sensor noise. The twin sees the plant only through one healthy recording used
for calibration; every training sample is a simulated twin waveform.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .errors import DependencyError, PumpTwinError, ValidationError
from .ita import CalibrationProblem, CalibrationResult, calibrate, relative_bounds
from .moc import PipelineParams, PipeSegment, build_grid, sample_sensor, simulate
from .nn import TrainConfig, architecture, evaluate, save_checkpoint, train
from .pump import FaultSpec, PumpGeometry, default_faults, generate_source, samples_per_rev
from .signal import RngStream, Signal
from .tfr import SSTConfig, dataset_scale_k, postprocess_spectrogram, sst
from .virtual_sensor import InverseProblem, estimate_flow_wave_decomposition

log = logging.getLogger(__name__)

TRAIN_CLASSES = ("H", "S", "C1", "C2")
PLANT_CLASSES = ("H", "S", "C")
DATASET_KINDS = ("uncalibrated-P", "calibrated-P", "flow-Q")
MODALITIES = ("pressure-time", "pressure-sst", "flow-time", "flow-sst")
DEFAULT_LABEL_MAPS = {
    "pressure": {"C1": "C"},   # a slight-cylinder prediction counts for the plant fault
    "flow": {"C2": "C"},       # a severe-cylinder prediction counts for the plant fault
}
CALIBRATION_FREE = ("a1", "a2", "a3", "D1", "D2", "D3", "kv")


def derive_seed(base: int, *keys) -> int:
    """Stable 64-bit seed from a base seed and any JSON-serialisable keys."""
    h = hashlib.sha256(json.dumps([int(base), *keys], sort_keys=True).encode()).digest()
    return int.from_bytes(h[:8], "little")


def perturbed_prior(truth: PipelineParams, frac: float) -> PipelineParams:
    """Wave speeds and diameters off by +/- ``frac`` in an alternating sign pattern."""
    segs = []
    for i, s in enumerate(truth.segments):
        sign = 1.0 if i % 2 == 0 else -1.0
        segs.append(PipeSegment(s.length, s.diameter * (1.0 - sign * frac),
                                s.wave_speed * (1.0 + sign * frac)))
    return replace(truth, segments=tuple(segs))


# -- configuration -------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    plant_params: PipelineParams = field(default_factory=PipelineParams)
    prior_params: PipelineParams | None = None
    prior_perturbation: float = 0.08
    pump: PumpGeometry = field(default_factory=PumpGeometry)
    faults: dict = field(default_factory=default_faults)
    sample_rate: float = 51200.0
    substeps: int = 2
    warmup_revs: int = 4
    samples_per_class: int = 1000
    plant_windows_time: int = 160
    plant_windows_sst: int = 80
    sensor_noise: float = 0.01          # plant sensor sigma / healthy ripple RMS
    train_noise_factor: float = 0.15    # training sigma / plant sensor sigma
    augment_shift: bool = True
    architectures: tuple = ("CNN1D(341@100)",)
    dataset_kinds: tuple = ("uncalibrated-P", "calibrated-P")
    n_runs: int = 10
    seed: int = 0
    modality: str = "pressure-time"
    train: TrainConfig = field(default_factory=TrainConfig)
    image_size: int = 256
    sst_voices: int = 32
    sst_freq_min: float = 10.0
    sst_freq_max: float = 1600.0
    calibration_budget: int = 20000
    calibration_bounds: float = 0.12
    calibration_free: tuple = CALIBRATION_FREE
    calibration_revs: int = 2
    label_maps: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_LABEL_MAPS)))
    gradcam: bool = True
    in_domain: bool = False
    in_domain_epochs: int | None = None

    def __post_init__(self):
        if self.n_runs < 1:
            raise ValidationError("n_runs must be >= 1")
        if self.modality not in MODALITIES:
            raise ValidationError(f"modality must be one of {MODALITIES}")
        for k in self.dataset_kinds:
            if k not in DATASET_KINDS:
                raise ValidationError(f"unknown dataset kind {k!r}")
        if self.prior_params is None:
            self.prior_params = perturbed_prior(self.plant_params, self.prior_perturbation)
        if self.prior_params == self.plant_params:
            raise ValidationError("prior and plant parameters must differ")
        if self.samples_per_class < 1 or self.plant_windows_time < 1 or self.plant_windows_sst < 1:
            raise ValidationError("dataset sizes must be positive")
        missing = [k for k in TRAIN_CLASSES + ("C",) if k not in self.faults]
        if missing:
            raise ValidationError(f"fault set lacks {missing}")
        samples_per_rev(self.pump, self.sample_rate)
        self.architectures = tuple(self.architectures)
        self.dataset_kinds = tuple(self.dataset_kinds)
        self.calibration_free = tuple(self.calibration_free)

    # derived
    @property
    def samples_per_rev(self) -> int:
        return samples_per_rev(self.pump, self.sample_rate)

    @property
    def sst_config(self) -> SSTConfig:
        return SSTConfig(voices_per_octave=self.sst_voices, freq_min=self.sst_freq_min,
                         freq_max=self.sst_freq_max, padding="periodic")

    def to_dict(self) -> dict:
        return {
            "plant_params": self.plant_params.to_dict(),
            "prior_params": self.prior_params.to_dict(),
            "prior_perturbation": self.prior_perturbation,
            "pump": self.pump.to_dict(),
            "faults": {k: f.to_dict() for k, f in sorted(self.faults.items())},
            "train": self.train.to_dict(),
            **{k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()
               if k not in ("plant_params", "prior_params", "prior_perturbation", "pump",
                            "faults", "train")},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        kw = {}
        if "plant_params" in d:
            kw["plant_params"] = PipelineParams.from_dict(d.pop("plant_params"))
        if d.get("prior_params") is not None:
            kw["prior_params"] = PipelineParams.from_dict(d.pop("prior_params"))
        else:
            d.pop("prior_params", None)
        if "pump" in d:
            kw["pump"] = PumpGeometry(**d.pop("pump"))
        if "faults" in d:
            faults = default_faults(kw.get("pump", PumpGeometry()))
            faults.update({k: FaultSpec.from_dict(v) for k, v in d.pop("faults").items()})
            kw["faults"] = faults
        if "train" in d:
            kw["train"] = TrainConfig(**d.pop("train"))
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        for k in ("architectures", "dataset_kinds", "calibration_free"):
            if k in d:
                d[k] = tuple(d[k])
        kw.update(d)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, TypeError, KeyError) as exc:
            raise ValidationError(f"{path}: invalid experiment config ({exc})") from exc

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path


def quick_config(**overrides) -> ExperimentConfig:
    """Desk-scale profile: 200 samples per class, 20 epochs, 3 runs."""
    base = dict(samples_per_class=200, n_runs=3, train=TrainConfig(epochs=20), image_size=64,
                sst_voices=16, calibration_budget=3000, plant_windows_time=60,
                plant_windows_sst=30)
    base.update(overrides)
    return ExperimentConfig(**base)


# -- simulation helpers ------------------------------------------------------------------

def source_revolution(cfg: ExperimentConfig, label: str) -> Signal:
    """One revolution of pump-outlet flow for a training class or the plant fault ``"C"``."""
    return generate_source(cfg.pump, cfg.faults[label], cfg.sample_rate, 1).signal


def periodic_pressures(cfg: ExperimentConfig, params: PipelineParams, source: Signal,
                       n_revs: int) -> np.ndarray:
    """Converged periodic sensor pressures [n_sensors, n_revs * samples_per_rev]."""
    n1 = len(source)
    total = cfg.warmup_revs + n_revs
    q = source.with_samples(np.tile(source.samples, total))
    grid = build_grid(params, cfg.sample_rate, cfg.substeps)
    fld = simulate(params, q, grid=grid)
    out = np.stack([sample_sensor(fld, x, grid).samples for x in params.sensors])
    return out[:, -n_revs * n1:]


def dip_regions(cfg: ExperimentConfig, label: str, pad: int = 0, n_revs: int = 1) -> list[tuple]:
    """Sample intervals of a plant window where the fault's flow dips reach the sensors.

    Each dip support is delayed by the travel time to the nearest sensor at
    its start and to the farthest sensor at its end, widened by ``pad`` on
    both sides, and split where it wraps past the window edge.
    """
    f = cfg.faults[label]
    n1 = cfg.samples_per_rev
    n = n1 * n_revs
    params = cfg.plant_params
    delays = []
    for x in params.sensors:
        t, edge = 0.0, 0.0
        for s in params.segments:
            step = min(max(x - edge, 0.0), s.length)
            t += step / s.wave_speed
            edge += s.length
        delays.append(t * cfg.sample_rate)
    half = 0.5 * f.dip_width * n1
    out = []
    for rev in range(n_revs):
        for phase in f.dip_phases:
            centre = rev * n1 + phase / (2 * np.pi) * n1
            a = int(np.floor(centre - half + min(delays))) - pad
            b = int(np.ceil(centre + half + max(delays))) + pad
            for lo, hi in ((a, b), (a - n, b - n), (a + n, b + n)):
                lo, hi = max(lo, 0), min(hi, n)
                if lo < hi:
                    out.append((lo, hi))
    return sorted(out)


def _ripple_rms(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    return np.sqrt(np.mean((x - x.mean(axis=1, keepdims=True)) ** 2, axis=1))


def prepare_time(window: np.ndarray, ref: np.ndarray) -> np.ndarray:
    w = np.atleast_2d(window)
    return ((w - w.mean(axis=1, keepdims=True)) / ref[:, None]).astype(np.float32)


def window_spectrograms(window: np.ndarray, ref: np.ndarray, cfg: ExperimentConfig):
    w = np.atleast_2d(window)
    w = (w - w.mean(axis=1, keepdims=True)) / ref[:, None]
    return [sst(Signal(ch, cfg.sample_rate), cfg.sst_config) for ch in w]


def prepare_sst(window: np.ndarray, ref: np.ndarray, cfg: ExperimentConfig, scale_k: float) -> np.ndarray:
    sgs = window_spectrograms(window, ref, cfg)
    return np.stack([postprocess_spectrogram(sg, cfg.pump.pumping_frequency, scale_k,
                                             cfg.image_size) for sg in sgs]).astype(np.float32)


def sst_scale_k(windows, ref: np.ndarray, cfg: ExperimentConfig, percentile: float = 99.0) -> float:
    sgs = [sg for w in windows for sg in window_spectrograms(w, ref, cfg)]
    return dataset_scale_k(sgs, cfg.pump.pumping_frequency, percentile)


# -- datasets ---------------------------------------------------------------------------

@dataclass
class LabeledDataset:
    X: np.ndarray
    labels: tuple
    provenance: tuple
    modality: str
    kind: str
    class_names: tuple
    meta: dict = field(default_factory=dict)
    fingerprint: str = ""

    def __post_init__(self):
        self.labels = tuple(self.labels)
        self.provenance = tuple(self.provenance)
        if len(self.X) != len(self.labels) or len(self.labels) != len(self.provenance):
            raise ValidationError("dataset arrays, labels and provenance must align")
        if not self.fingerprint:
            self.fingerprint = self.compute_fingerprint()

    def __len__(self):
        return len(self.labels)

    def label_indices(self) -> np.ndarray:
        return np.array([self.class_names.index(lbl) for lbl in self.labels], dtype=np.int64)

    def compute_fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps({"modality": self.modality, "kind": self.kind,
                             "classes": list(self.class_names), "labels": list(self.labels),
                             "meta": self.meta}, sort_keys=True, default=str).encode())
        h.update(np.ascontiguousarray(self.X, dtype=np.float32).tobytes())
        return h.hexdigest()

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=int)
        return LabeledDataset(self.X[idx], [self.labels[i] for i in idx],
                              [self.provenance[i] for i in idx], self.modality, self.kind,
                              self.class_names, dict(self.meta))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {"labels": list(self.labels), "provenance": list(self.provenance),
                  "modality": self.modality, "kind": self.kind,
                  "class_names": list(self.class_names), "meta": self.meta,
                  "fingerprint": self.fingerprint}
        with open(path, "wb") as fh:
            np.savez(fh, X=self.X, header=np.array(json.dumps(header, sort_keys=True)))
        return path

    @classmethod
    def load(cls, path) -> "LabeledDataset":
        with np.load(path, allow_pickle=False) as z:
            X = z["X"]
            header = json.loads(str(z["header"]))
        ds = cls(X, header["labels"], header["provenance"], header["modality"], header["kind"],
                 tuple(header["class_names"]), header["meta"])
        if ds.fingerprint != header["fingerprint"]:
            raise ValidationError(f"{path}: fingerprint mismatch, file is corrupt")
        return ds


def modality_of(kind: str, representation: str) -> str:
    signal = "flow" if kind == "flow-Q" else "pressure"
    return f"{signal}-{representation}"


def _twin_params(cfg: ExperimentConfig, kind: str, calibration) -> PipelineParams | None:
    if kind == "uncalibrated-P":
        return cfg.prior_params
    if kind == "calibrated-P":
        if calibration is None:
            raise DependencyError("calibrated-P datasets need a calibration result")
        return calibration.theta_star if isinstance(calibration, CalibrationResult) else calibration
    return None


def twin_seed_windows(cfg: ExperimentConfig, kind: str, representation: str,
                      calibration=None) -> dict:
    """One noiseless seed window per training class: {label: array [channels, n]}."""
    n_revs = 1 if representation == "time" else 2
    params = _twin_params(cfg, kind, calibration)
    out = {}
    for lbl in TRAIN_CLASSES:
        src = source_revolution(cfg, lbl)
        if params is None:
            out[lbl] = np.tile(src.samples, n_revs)[None, :]
        else:
            out[lbl] = periodic_pressures(cfg, params, src, n_revs)
    return out


def build_training_dataset(cfg: ExperimentConfig, kind: str, seed: int, calibration=None,
                           representation: str = "time") -> LabeledDataset:
    """Augmented twin dataset for one dataset kind.

    Each sample is the class seed window cyclically shifted by a uniform
    random offset plus white noise of ``train_noise_factor * sensor_noise``
    times the healthy ripple RMS of that channel.
    """
    if kind not in DATASET_KINDS:
        raise ValidationError(f"unknown dataset kind {kind!r}")
    if representation not in ("time", "sst"):
        raise ValidationError("representation must be 'time' or 'sst'")
    seeds = twin_seed_windows(cfg, kind, representation, calibration)
    ref = _ripple_rms(seeds["H"])
    sigma = cfg.train_noise_factor * cfg.sensor_noise * ref
    scale_k = sst_scale_k(seeds.values(), ref, cfg) if representation == "sst" else None
    modality = modality_of(kind, representation)
    X, labels, prov = [], [], []
    root = RngStream(seed)
    for ci, lbl in enumerate(TRAIN_CLASSES):
        rng = root.spawn(ci)
        base = seeds[lbl]
        n = base.shape[1]
        for i in range(cfg.samples_per_class):
            k = int(rng.integers(0, n)) if cfg.augment_shift else 0
            w = np.roll(base, -k, axis=1)
            if cfg.train_noise_factor > 0:
                w = w + sigma[:, None] * rng.normal(w.size).reshape(w.shape)
            X.append(prepare_time(w, ref) if representation == "time"
                     else prepare_sst(w, ref, cfg, scale_k))
            labels.append(lbl)
            prov.append({"origin": "twin", "kind": kind, "class": lbl, "shift": k,
                         "calibration_source": "plant:H" if kind == "calibrated-P" else None})
    meta = {"reference_rms": ref.tolist(), "scale_k": scale_k, "seed": int(seed),
            "noise_sigma": sigma.tolist(), "samples_per_class": cfg.samples_per_class}
    return LabeledDataset(np.stack(X), labels, prov, modality, kind, TRAIN_CLASSES, meta)


def check_zero_shot(ds: LabeledDataset) -> None:
    """Raise if any fault-labelled plant sample entered a training set."""
    for p in ds.provenance:
        if p.get("origin") == "plant" and p.get("class") != "H":
            raise ValidationError(f"plant fault sample {p} found in a training set")
        src = p.get("calibration_source")
        if src is not None and src != "plant:H":
            raise ValidationError(f"twin calibrated on {src}, not on healthy plant data")


@dataclass
class PlantRecordings:
    """Converged noiseless plant sensor pressures per plant class, plus noise levels."""
    pressures: dict          # label -> [n_sensors, n_revs * N]
    sigma: np.ndarray        # sensor noise sigma per channel
    n_revs: int


def plant_recordings(cfg: ExperimentConfig, n_revs: int) -> PlantRecordings:
    pressures = {lbl: periodic_pressures(cfg, cfg.plant_params, source_revolution(cfg, lbl), n_revs)
                 for lbl in PLANT_CLASSES}
    sigma = cfg.sensor_noise * _ripple_rms(pressures["H"])
    return PlantRecordings(pressures, sigma, n_revs)


def plant_windows(cfg: ExperimentConfig, representation: str, seed: int):
    """Noisy plant sensor windows: yields (label, window [n_sensors, n], window index)."""
    n_revs = 1 if representation == "time" else 2
    count = cfg.plant_windows_time if representation == "time" else cfg.plant_windows_sst
    rec = plant_recordings(cfg, n_revs)
    root = RngStream(seed)
    for ci, lbl in enumerate(PLANT_CLASSES):
        rng = root.spawn(100 + ci)
        base = rec.pressures[lbl]
        for i in range(count):
            noise = rng.normal(base.size).reshape(base.shape)
            yield lbl, base + rec.sigma[:, None] * noise, i


def estimate_plant_flow(cfg: ExperimentConfig, params: PipelineParams, window: np.ndarray) -> np.ndarray:
    sigs = [Signal(ch, cfg.sample_rate) for ch in window]
    prob = InverseProblem(params, tuple(zip(params.sensors, sigs)))
    return estimate_flow_wave_decomposition(prob).samples


def build_plant_test_set(cfg: ExperimentConfig, modality: str, seed: int, reference: dict,
                         calibration=None) -> LabeledDataset:
    """Noisy plant windows for classes H, S and the plant cylinder fault C.

    ``reference`` carries the training set's normalisation (``reference_rms``
    and, for spectrogram modalities, ``scale_k``). Flow modalities first
    pass the sensor pressures through the wave-decomposition virtual sensor
    using the calibrated parameters.
    """
    if modality not in MODALITIES:
        raise ValidationError(f"unknown modality {modality!r}")
    signal, representation = modality.split("-")
    params = None
    if signal == "flow":
        params = _twin_params(cfg, "calibrated-P", calibration)
    ref = np.asarray(reference["reference_rms"], dtype=np.float64)
    scale_k = reference.get("scale_k")
    X, labels, prov = [], [], []
    for lbl, w, i in plant_windows(cfg, representation, seed):
        if signal == "flow":
            w = estimate_plant_flow(cfg, params, w)[None, :]
        X.append(prepare_time(w, ref) if representation == "time"
                 else prepare_sst(w, ref, cfg, scale_k))
        labels.append(lbl)
        prov.append({"origin": "plant", "class": lbl, "window": i})
    meta = {"reference_rms": ref.tolist(), "scale_k": scale_k, "seed": int(seed)}
    return LabeledDataset(np.stack(X), labels, prov, modality, "plant", PLANT_CLASSES, meta)


def build_in_domain_set(cfg: ExperimentConfig, representation: str, seed: int) -> LabeledDataset:
    """Plant pressure windows normalised by the plant's own healthy ripple, for the 8:2 control."""
    rec = plant_recordings(cfg, 1 if representation == "time" else 2)
    ref = _ripple_rms(rec.pressures["H"])
    scale_k = (sst_scale_k(rec.pressures.values(), ref, cfg) if representation == "sst" else None)
    return build_plant_test_set(cfg, f"pressure-{representation}", seed,
                                {"reference_rms": ref.tolist(), "scale_k": scale_k})


# -- calibration -----------------------------------------------------------------------------

def plant_calibration_problem(cfg: ExperimentConfig, seed: int | None = None) -> CalibrationProblem:
    """Healthy plant recording from start-up (with sensor noise) against the twin's prior."""
    seed = cfg.seed if seed is None else seed
    src1 = source_revolution(cfg, "H")
    q = src1.with_samples(np.tile(src1.samples, cfg.calibration_revs))
    grid = build_grid(cfg.plant_params, cfg.sample_rate, cfg.substeps)
    fld = simulate(cfg.plant_params, q, grid=grid)
    sigma = plant_recordings(cfg, 1).sigma
    rng = RngStream(derive_seed(seed, "calibration-noise"))
    measured = []
    for j, x in enumerate(cfg.plant_params.sensors):
        s = sample_sensor(fld, x, grid)
        measured.append((j, s.with_samples(s.samples + sigma[j] * rng.normal(len(s)))))
    bounds = relative_bounds(cfg.prior_params, cfg.calibration_free, cfg.calibration_bounds)
    return CalibrationProblem(measured, q, cfg.prior_params, bounds,
                              pumping_frequency=cfg.pump.pumping_frequency,
                              substeps=cfg.substeps)


def run_calibration(cfg: ExperimentConfig, seed: int | None = None) -> CalibrationResult:
    seed = cfg.seed if seed is None else seed
    prob = plant_calibration_problem(cfg, seed)
    return calibrate(prob, budget=cfg.calibration_budget, seed=derive_seed(seed, "calibration"))


# -- experiment ----------------------------------------------------------------------------

def label_map_for(cfg: ExperimentConfig, modality: str) -> dict:
    return dict(cfg.label_maps.get(modality.split("-")[0], {}))


def _checkpoint_digest(state) -> str:
    return hashlib.sha256(state.parameter_vector().tobytes()).hexdigest()


@dataclass
class RunReport:
    config: dict
    calibration: dict | None = None
    cells: dict = field(default_factory=dict)       # "arch|kind" -> cell record
    in_domain: dict = field(default_factory=dict)   # arch -> cell record
    environment: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)   # arrays for figures, not serialised

    def cell(self, arch: str, kind: str) -> dict:
        return self.cells[f"{arch}|{kind}"]

    def accuracies(self, arch: str, kind: str) -> list[float]:
        return [r["accuracy"] for r in self.cell(arch, kind)["runs"] if r.get("error") is None]

    def mean(self, arch: str, kind: str) -> float:
        return self.cell(arch, kind)["mean"]

    def to_dict(self) -> dict:
        return {"config": self.config, "calibration": self.calibration, "cells": self.cells,
                "in_domain": self.in_domain, "environment": self.environment}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(d.get("config", {}), d.get("calibration"), d.get("cells", {}),
                   d.get("in_domain", {}), d.get("environment", {}))


def summarize(accs: list[float]) -> tuple[float, float]:
    if not accs:
        return float("nan"), float("nan")
    a = np.asarray(accs, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def environment_manifest(cfg: ExperimentConfig) -> dict:
    import numba
    import scipy
    import torch
    return {"pumptwin": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "torch": torch.__version__,
            "numba": numba.__version__, "base_seed": cfg.seed, "n_runs": cfg.n_runs}


def _representation(arch: str) -> str:
    spec = architecture(arch)
    return "sst" if spec.dims == 2 else "time"


def _gradcam_examples(state, test: LabeledDataset, per_class: int = 1) -> list[dict]:
    from .gradcam import gradcam
    from .nn import predict
    out = []
    logits = predict(state, test.X)
    for lbl in test.class_names:
        idx = [i for i, l in enumerate(test.labels) if l == lbl][:per_class]
        for i in idx:
            c = int(np.argmax(logits[i]))
            m = gradcam(state, test.X[i], c)
            out.append({"label": lbl, "index": i, "class_index": c, "map": m.values,
                        "input": test.X[i]})
    return out


def run_cell(cfg: ExperimentConfig, arch: str, train_ds: LabeledDataset, test_ds: LabeledDataset,
             seed: int, label_map: dict | None = None, checkpoint_dir: Path | None = None):
    """Train one network on ``train_ds`` and score it on ``test_ds``. Returns (record, state)."""
    check_zero_shot(train_ds)
    spec = architecture(arch, tuple(train_ds.X.shape[1:]), len(train_ds.class_names))
    state = train(spec, train_ds.X, train_ds.label_indices(), cfg.train, seed)
    ev = evaluate(state, test_ds.X, test_ds.labels, train_ds.class_names, label_map)
    rec = {"seed": int(seed), "accuracy": ev.accuracy, "confusion": ev.confusion.tolist(),
           "true_labels": list(ev.true_labels), "predicted_labels": list(ev.predicted_labels),
           "train_fingerprint": train_ds.fingerprint, "test_fingerprint": test_ds.fingerprint,
           "checkpoint_sha256": _checkpoint_digest(state),
           "final_train_acc": state.history[-1][2] if state.history else None, "error": None}
    if checkpoint_dir is not None:
        save_checkpoint(state, Path(checkpoint_dir) / f"{_slug(arch)}_{seed:x}.nnck")
    return rec, state


def _slug(s: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in s).strip("_")


def _run_job(cfg: ExperimentConfig, calibration, run: int, rep: str, kind: str,
             checkpoint_dir: Path | None = None) -> tuple[dict, dict]:
    """All architectures of one representation on one (run, dataset kind) dataset pair."""
    from .nn import configure_torch
    configure_torch()
    archs = [a for a in cfg.architectures if _representation(a) == rep]
    modality = modality_of(kind, rep)
    records, artifacts = {}, {}
    try:
        train_ds = build_training_dataset(cfg, kind, derive_seed(cfg.seed, "train", kind, rep, run),
                                          calibration, rep)
        test_ds = build_plant_test_set(cfg, modality, derive_seed(cfg.seed, "plant", modality, run),
                                       train_ds.meta, calibration)
    except PumpTwinError as exc:
        for arch in archs:
            records[arch] = {"run": run, "accuracy": None, "error": f"{type(exc).__name__}: {exc}"}
        return records, artifacts
    for arch in archs:
        seed = derive_seed(cfg.seed, "net", arch, kind, run)
        try:
            rec, state = run_cell(cfg, arch, train_ds, test_ds, seed,
                                  label_map_for(cfg, modality), checkpoint_dir)
        except PumpTwinError as exc:
            rec, state = {"seed": seed, "accuracy": None,
                          "error": f"{type(exc).__name__}: {exc}"}, None
        rec["run"] = run
        records[arch] = rec
        if run == 0 and state is not None and cfg.gradcam:
            artifacts[f"gradcam|{arch}|{kind}"] = _gradcam_examples(state, test_ds)
    if run == 0:
        artifacts[f"examples|{kind}|{rep}"] = _example_windows(train_ds, test_ds)
    return records, artifacts


def _run_job_packed(args):
    cfg_dict, cal, run, rep, kind, ckpt = args
    return (run, rep, kind), _run_job(ExperimentConfig.from_dict(cfg_dict), cal, run, rep, kind, ckpt)


def run_experiment(cfg: ExperimentConfig, calibration: CalibrationResult | None = None,
                   progress: Callable[[str], None] | None = None,
                   checkpoint_dir: Path | None = None, workers: int = 1) -> RunReport:
    """Every architecture x dataset kind x run, scored on the secret plant.

    Runs share datasets across architectures (same run index, same data) so
    architecture comparisons are paired. Jobs are independent; with
    ``workers > 1`` they run in a process pool and merge by key, so the
    report does not depend on completion order. Failures are recorded per run.
    """
    say = progress or (lambda msg: log.info(msg))
    needs_cal = any(k in ("calibrated-P", "flow-Q") for k in cfg.dataset_kinds)
    if needs_cal and calibration is None:
        say("calibrating twin on healthy plant data")
        calibration = run_calibration(cfg)
    report = RunReport(cfg.to_dict(), environment=environment_manifest(cfg))
    if calibration is not None:
        report.calibration = {
            "theta_star": calibration.theta_star.to_dict(),
            "relative_objective": calibration.relative_objective,
            "evaluations": calibration.evaluations, "free": list(calibration.free_names),
            "history": [[float(h[0]), float(h[2])] for h in calibration.objective_history],
        }
    for arch in cfg.architectures:
        for kind in cfg.dataset_kinds:
            report.cells[f"{arch}|{kind}"] = {"architecture": arch, "kind": kind,
                                              "modality": modality_of(kind, _representation(arch)),
                                              "runs": []}
    reps = sorted({_representation(a) for a in cfg.architectures})
    jobs = [(run, rep, kind) for run in range(cfg.n_runs) for rep in reps for kind in cfg.dataset_kinds]
    results = {}
    if workers > 1 and len(jobs) > 1:
        import multiprocessing as mp
        from concurrent.futures import ProcessPoolExecutor
        packed = [(cfg.to_dict(), calibration, *job, checkpoint_dir) for job in jobs]
        with ProcessPoolExecutor(min(workers, len(jobs)), mp_context=mp.get_context("spawn")) as ex:
            for key, res in ex.map(_run_job_packed, packed):
                results[key] = res
                say(f"job {key} done")
    else:
        for job in jobs:
            results[job] = _run_job(cfg, calibration, *job, checkpoint_dir)
            for arch, rec in results[job][0].items():
                say(f"run {job[0]} {arch} {job[2]}: accuracy {rec['accuracy']}")
    for job in jobs:
        records, artifacts = results[job]
        for arch, rec in records.items():
            report.cells[f"{arch}|{job[2]}"]["runs"].append(rec)
        report.artifacts.update(artifacts)
    for cell in report.cells.values():
        cell["runs"].sort(key=lambda r: r["run"])
        accs = [r["accuracy"] for r in cell["runs"] if r.get("error") is None]
        cell["mean"], cell["std"] = summarize(accs)
        cell["failures"] = sum(1 for r in cell["runs"] if r.get("error") is not None)
    if cfg.in_domain:
        report.in_domain = run_in_domain(cfg, cfg.architectures, progress=say)
    return report


def _example_windows(train_ds: LabeledDataset, test_ds: LabeledDataset) -> dict:
    ex = {}
    for lbl in train_ds.class_names:
        i = train_ds.labels.index(lbl)
        ex[f"twin:{lbl}"] = train_ds.X[i]
    for lbl in test_ds.class_names:
        i = test_ds.labels.index(lbl)
        ex[f"plant:{lbl}"] = test_ds.X[i]
    return ex


def split_indices(n: int, seed: int, train_frac: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    perm = RngStream(seed).permutation(n)
    k = int(round(train_frac * n))
    return np.sort(perm[:k]), np.sort(perm[k:])


def run_in_domain(cfg: ExperimentConfig, architectures, progress: Callable | None = None) -> dict:
    """Train and test on plant windows (8:2 split) for ``n_runs`` runs per architecture.

    The plant set of one run is shared by every architecture of that
    representation. Returns {architecture: cell record}.
    """
    if isinstance(architectures, str):
        architectures = [architectures]
    tcfg = cfg.train if cfg.in_domain_epochs is None else replace(cfg.train, epochs=cfg.in_domain_epochs)
    runs = {a: [] for a in architectures}
    for run in range(cfg.n_runs):
        for rep in sorted({_representation(a) for a in architectures}):
            ds = build_in_domain_set(cfg, rep, derive_seed(cfg.seed, "in-domain", rep, run))
            tr, te = split_indices(len(ds), derive_seed(cfg.seed, "split", rep, run))
            train_ds, test_ds = ds.subset(tr), ds.subset(te)
            for arch in (a for a in architectures if _representation(a) == rep):
                seed = derive_seed(cfg.seed, "net-in-domain", arch, run)
                spec = architecture(arch, tuple(train_ds.X.shape[1:]), len(PLANT_CLASSES))
                state = train(spec, train_ds.X, train_ds.label_indices(), tcfg, seed)
                ev = evaluate(state, test_ds.X, test_ds.labels, PLANT_CLASSES)
                runs[arch].append({"run": run, "seed": seed, "accuracy": ev.accuracy,
                                   "confusion": ev.confusion.tolist(),
                                   "checkpoint_sha256": _checkpoint_digest(state)})
                if progress:
                    progress(f"in-domain run {run} {arch}: accuracy {ev.accuracy}")
    out = {}
    for arch, rs in runs.items():
        mean, std = summarize([r["accuracy"] for r in rs])
        out[arch] = {"architecture": arch, "runs": rs, "mean": mean, "std": std}
    return out


# -- artifacts -------------------------------------------------------------------------------

def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def report_axes(report: RunReport) -> tuple[list, list]:
    """Architectures and dataset kinds in config order, independent of dict order."""
    cells = report.cells.values()
    archs = sorted({c["architecture"] for c in cells})
    kinds = sorted({c["kind"] for c in cells})
    order_a = list(report.config.get("architectures", []))
    order_k = list(report.config.get("dataset_kinds", []))
    archs.sort(key=lambda a: order_a.index(a) if a in order_a else len(order_a))
    kinds.sort(key=lambda k: order_k.index(k) if k in order_k else len(order_k))
    return archs, kinds


def write_accuracy_grid(report: RunReport, path: Path) -> Path:
    archs, kinds = report_axes(report)
    if report.in_domain:
        archs += [a for a in report.in_domain if a not in archs]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["architecture"] + kinds + (["in-domain"] if report.in_domain else []))
        for a in archs:
            row = [a]
            for k in kinds:
                c = report.cells.get(f"{a}|{k}")
                row.append("" if c is None else f"{100 * c['mean']:.2f}±{100 * c['std']:.2f}")
            if report.in_domain:
                c = report.in_domain.get(a)
                row.append("" if c is None else f"{100 * c['mean']:.2f}±{100 * c['std']:.2f}")
            w.writerow(row)
    return path


def write_run_table(report: RunReport, path: Path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["architecture", "kind", "run", "seed", "accuracy", "error"])
        archs, kinds = report_axes(report)
        for c in (report.cells[f"{a}|{k}"] for a in archs for k in kinds if f"{a}|{k}" in report.cells):
            for r in c["runs"]:
                acc = "" if r.get("accuracy") is None else f"{r['accuracy']:.6f}"
                w.writerow([c["architecture"], c["kind"], r.get("run"), r.get("seed"), acc,
                            r.get("error") or ""])
        for a, c in sorted(report.in_domain.items()):
            for r in c["runs"]:
                w.writerow([a, "in-domain", r["run"], r["seed"], f"{r['accuracy']:.6f}", ""])
    return path


def emit_plots(report: RunReport, out_dir) -> dict:
    """Write tables, figures and a manifest of every file with its SHA-256."""
    from . import plots
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write to {out}: {exc}") from exc
    files = [out / "report.json"]
    files[0].write_text(report.to_json())
    if report.cells or report.in_domain:
        files.append(write_accuracy_grid(report, out / "accuracy_grid.csv"))
        files.append(write_run_table(report, out / "accuracy_runs.csv"))
        files += plots.accuracy_figure(report, out / "accuracy.png")
    if report.calibration:
        files += plots.calibration_figure(report.calibration, out / "calibration.png")
    for key, value in sorted(report.artifacts.items()):
        if key.startswith("examples|"):
            files += plots.example_figures(key, value, out)
        elif key.startswith("gradcam|"):
            files += plots.gradcam_figures(key, value, out)
    manifest = {"files": [{"path": p.relative_to(out).as_posix(), "sha256": _sha256_file(p),
                           "bytes": p.stat().st_size} for p in sorted(set(files))]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def save_artifacts(artifacts: dict, path) -> Path:
    """Store report arrays in one ``.npz``; a JSON index keeps labels and order."""
    arrays, index = {}, {}
    for key, value in sorted(artifacts.items()):
        if key.startswith("examples|"):
            names = sorted(value)
            index[key] = {"names": names}
            for j, nm in enumerate(names):
                arrays[f"a{len(arrays)}"] = np.asarray(value[nm])
            index[key]["first"] = len(arrays) - len(names)
        else:
            entries = []
            for m in value:
                entries.append({"label": m["label"], "index": int(m["index"]),
                                "class_index": int(m["class_index"]), "map": f"a{len(arrays)}",
                                "input": f"a{len(arrays) + 1}"})
                arrays[f"a{len(arrays)}"] = np.asarray(m["map"])
                arrays[f"a{len(arrays)}"] = np.asarray(m["input"])
            index[key] = {"entries": entries}
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, index=np.array(json.dumps(index, sort_keys=True)), **arrays)
    return path


def load_artifacts(path) -> dict:
    out = {}
    with np.load(path, allow_pickle=False) as z:
        index = json.loads(str(z["index"]))
        for key, meta in index.items():
            if "names" in meta:
                out[key] = {nm: z[f"a{meta['first'] + j}"] for j, nm in enumerate(meta["names"])}
            else:
                out[key] = [dict(e, map=z[e["map"]], input=z[e["input"]]) for e in meta["entries"]]
    return out
