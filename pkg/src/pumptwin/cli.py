"""Command-line entry point: ``pumptwin <subcommand> [options]``.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import NumericalError, ValidationError

log = logging.getLogger("pumptwin")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", type=Path, default=d, help="experiment config JSON")
    p.add_argument("--seed", type=int, default=d, help="base seed (u64)")
    p.add_argument("--out", type=Path, default=d if suppress else Path("run"),
                   help="output directory")
    p.add_argument("--quick", action="store_true", default=d if suppress else False,
                   help="desk-scale profile: 200 samples/class, 20 epochs, 3 runs")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="pumptwin", description="Digital-twin zero-shot pump fault diagnosis")
    _global_flags(ap, suppress=False)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        return p

    p = cmd("simulate", "simulate sensor pressures for one health state")
    p.add_argument("--fault", default="H", choices=["H", "S", "C1", "C2", "C"])
    p.add_argument("--params", default="plant", help="'plant', 'prior' or a PipelineParams JSON file")
    p.add_argument("--revs", type=int, default=4)

    p = cmd("calibrate", "calibrate the twin on a healthy plant recording")
    p.add_argument("--budget", type=int, default=None)

    p = cmd("gen-dataset", "build a twin training set or a plant test set")
    p.add_argument("--kind", required=True, choices=["uncalibrated-P", "calibrated-P", "flow-Q", "plant"])
    p.add_argument("--representation", default="time", choices=["time", "sst"])
    p.add_argument("--signal", default="pressure", choices=["pressure", "flow"],
                   help="plant test sets only")
    p.add_argument("--calibration", type=Path, help="calibration.json from 'calibrate'")
    p.add_argument("--reference", type=Path, help="training set whose normalisation a plant set reuses")
    p.add_argument("--name", default=None)

    p = cmd("train", "train one architecture on a dataset")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--arch", default="CNN1D(341@100)")
    p.add_argument("--epochs", type=int, default=None)

    p = cmd("eval", "score a checkpoint on a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--label-map", default="auto", choices=["auto", "pressure", "flow", "none"])

    p = cmd("gradcam", "Grad-CAM map for one dataset item")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--class-index", type=int, default=None, help="defaults to the predicted class")

    p = cmd("virtual-sense", "estimate pump-outlet flow from the two sensor pressures")
    p.add_argument("--fault", default="H", choices=["H", "S", "C1", "C2", "C"])
    p.add_argument("--method", default="wave", choices=["wave", "pinn"])
    p.add_argument("--calibration", type=Path, help="use calibrated parameters instead of the truth")
    p.add_argument("--noise", action="store_true", help="add plant sensor noise")
    p.add_argument("--steps", type=int, default=None, help="PINN optimisation steps")

    p = cmd("experiment", "full zero-shot experiment with report and figures")
    p.add_argument("--calibration", type=Path)
    p.add_argument("--in-domain", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--checkpoints", action="store_true", help="keep every trained model")

    p = cmd("plot", "re-render figures and tables from a saved report")
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--artifacts", type=Path, default=None)
    return ap


def load_config(args):
    from .workbench import ExperimentConfig, quick_config
    overrides = {}
    if args.config is not None:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from exc
    if args.quick:
        base = quick_config().to_dict()
        base.pop("prior_params")
        base.update(overrides)
        cfg = ExperimentConfig.from_dict(base)
    else:
        cfg = ExperimentConfig.from_dict(overrides)
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ValidationError("--seed must be an unsigned 64-bit integer")
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _load_calibration(path):
    from .ita import CalibrationResult
    if path is None:
        return None
    try:
        return CalibrationResult.load(path)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read calibration {path}: {exc}") from exc


def _load_dataset(path):
    from .workbench import LabeledDataset
    try:
        return LabeledDataset.load(path)
    except (OSError, KeyError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"cannot read dataset {path}: {exc}") from exc


def _line_figure(path: Path, series: dict, xlabel: str, ylabel: str, fs: float | None = None):
    from .plots import _save, plt
    fig, ax = plt.subplots(figsize=(7, 3))
    for name, y in series.items():
        y = np.asarray(y)
        x = np.arange(y.size) / fs if fs else np.arange(y.size)
        ax.plot(x, y, lw=0.8, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def _write_manifest(out: Path) -> dict:
    import hashlib
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {"files": [{"path": p.relative_to(out).as_posix(),
                           "sha256": hashlib.sha256(p.read_bytes()).hexdigest(),
                           "bytes": p.stat().st_size} for p in files]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


# -- subcommands ---------------------------------------------------------------------

def cmd_simulate(args, cfg, out: Path):
    from .moc import PipelineParams
    from .signal import Signal, write_signal_csv
    from .workbench import periodic_pressures, source_revolution
    if args.params == "plant":
        params = cfg.plant_params
    elif args.params == "prior":
        params = cfg.prior_params
    else:
        try:
            params = PipelineParams.load(args.params)
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read params {args.params}: {exc}") from exc
    if args.revs < 1:
        raise ValidationError("--revs must be >= 1")
    src = source_revolution(cfg, args.fault)
    p = periodic_pressures(cfg, params, src, args.revs)
    q = src.with_samples(np.tile(src.samples, args.revs))
    write_signal_csv(q, out / "inlet_flow.csv")
    for j, ch in enumerate(p):
        write_signal_csv(Signal(ch, cfg.sample_rate, channel_id=f"p{j + 1}", unit="Pa"),
                         out / f"pressure_{j + 1}.csv")
    _line_figure(out / "pressures.png", {f"sensor {j + 1}": ch for j, ch in enumerate(p)},
                 "time (s)", "pressure (Pa)", cfg.sample_rate)
    return {"fault": args.fault, "samples": int(q.samples.size)}


def cmd_calibrate(args, cfg, out: Path):
    from .plots import calibration_figure
    from .workbench import run_calibration
    if args.budget is not None:
        cfg = replace(cfg, calibration_budget=args.budget)
    res = run_calibration(cfg)
    res.save(out / "calibration.json")
    res.history_csv(out / "calibration_history.csv")
    calibration_figure({"history": [[h[0], h[2]] for h in res.objective_history]},
                       out / "calibration.png")
    return {"relative_objective": res.relative_objective, "evaluations": res.evaluations}


def cmd_gen_dataset(args, cfg, out: Path):
    from .workbench import build_plant_test_set, build_training_dataset, derive_seed
    cal = _load_calibration(args.calibration)
    if args.kind == "plant":
        if args.reference is None:
            raise ValidationError("plant test sets need --reference (a training set for normalisation)")
        ref = _load_dataset(args.reference)
        modality = f"{args.signal}-{args.representation}"
        ds = build_plant_test_set(cfg, modality, derive_seed(cfg.seed, "plant", modality, 0),
                                  ref.meta, cal)
    else:
        ds = build_training_dataset(cfg, args.kind, derive_seed(cfg.seed, "train", args.kind,
                                                                args.representation, 0),
                                    cal, args.representation)
    name = args.name or f"{args.kind}_{args.representation}"
    ds.save(out / f"{name}.npz")
    (out / f"{name}.json").write_text(json.dumps(
        {"fingerprint": ds.fingerprint, "n": len(ds), "modality": ds.modality, "kind": ds.kind,
         "shape": list(ds.X.shape), "classes": list(ds.class_names)}, indent=2, sort_keys=True))
    return {"fingerprint": ds.fingerprint, "n": len(ds)}


def cmd_train(args, cfg, out: Path):
    from .nn import architecture, save_checkpoint, train, write_training_log
    from .workbench import check_zero_shot, derive_seed
    ds = _load_dataset(args.dataset)
    check_zero_shot(ds)
    hp = cfg.train if args.epochs is None else replace(cfg.train, epochs=args.epochs)
    spec = architecture(args.arch, tuple(ds.X.shape[1:]), len(ds.class_names))
    state = train(spec, ds.X, ds.label_indices(), hp, derive_seed(cfg.seed, "net", args.arch, ds.kind, 0))
    save_checkpoint(state, out / "model.nnck")
    write_training_log(state, out / "training_log.csv")
    hist = np.asarray(state.history, dtype=np.float64)
    _line_figure(out / "training.png", {"loss": hist[:, 1], "train accuracy": hist[:, 2]},
                 "epoch", "value")
    return {"final_loss": float(hist[-1, 1]), "train_accuracy": float(hist[-1, 2])}


def cmd_eval(args, cfg, out: Path):
    import csv
    from .nn import evaluate, load_checkpoint
    state = load_checkpoint(args.checkpoint)
    ds = _load_dataset(args.dataset)
    if args.label_map == "none":
        lm = {}
    elif args.label_map == "auto":
        lm = dict(cfg.label_maps.get(ds.modality.split("-")[0], {}))
    else:
        lm = dict(cfg.label_maps.get(args.label_map, {}))
    from .workbench import TRAIN_CLASSES, PLANT_CLASSES
    classes = TRAIN_CLASSES if state.spec.n_classes == len(TRAIN_CLASSES) else PLANT_CLASSES
    ev = evaluate(state, ds.X, ds.labels, classes, lm)
    (out / "eval.json").write_text(json.dumps(ev.to_dict(), indent=2, sort_keys=True))
    with open(out / "confusion.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\predicted"] + list(classes))
        for lbl, row in zip(ev.true_labels, ev.confusion):
            w.writerow([lbl] + [int(v) for v in row])
    return {"accuracy": ev.accuracy}


def cmd_gradcam(args, cfg, out: Path):
    from .gradcam import gradcam, write_attribution_csv, write_attribution_spec
    from .nn import load_checkpoint, predict
    from .plots import gradcam_figures
    state = load_checkpoint(args.checkpoint)
    ds = _load_dataset(args.dataset)
    if not 0 <= args.index < len(ds):
        raise ValidationError(f"--index {args.index} outside dataset of {len(ds)} items")
    x = ds.X[args.index]
    c = args.class_index
    if c is None:
        c = int(np.argmax(predict(state, x[None])[0]))
    m = gradcam(state, x, c)
    if m.values.ndim == 1:
        write_attribution_csv(m, out / "gradcam.csv")
    else:
        write_attribution_spec(m, out / "gradcam.spec")
    gradcam_figures(f"gradcam|{state.spec.name}|{ds.kind}",
                    [{"label": ds.labels[args.index], "index": args.index, "class_index": c,
                      "map": m.values, "input": x}], out)
    return {"class_index": c, "label": ds.labels[args.index]}


def cmd_virtual_sense(args, cfg, out: Path):
    from .signal import RngStream, Signal
    from .virtual_sensor import (InverseProblem, PinnConfig, estimate_flow_pinn,
                                 estimate_flow_wave_decomposition, write_flow_csv)
    from .workbench import derive_seed, periodic_pressures, plant_recordings, source_revolution
    cal = _load_calibration(args.calibration)
    params = cal.theta_star if cal is not None else cfg.plant_params
    src = source_revolution(cfg, args.fault)
    p = periodic_pressures(cfg, cfg.plant_params, src, 1)
    if args.noise:
        sigma = plant_recordings(cfg, 1).sigma
        rng = RngStream(derive_seed(cfg.seed, "virtual-sense-noise"))
        p = p + sigma[:, None] * rng.normal(p.size).reshape(p.shape)
    prob = InverseProblem(params, tuple((x, Signal(ch, cfg.sample_rate))
                                        for x, ch in zip(params.sensors, p)))
    summary = {"method": args.method, "fault": args.fault}
    if args.method == "wave":
        q = estimate_flow_wave_decomposition(prob)
    else:
        pc = PinnConfig() if args.steps is None else PinnConfig(steps=args.steps)
        res = estimate_flow_pinn(prob, pc, seed=derive_seed(cfg.seed, "pinn"))
        q = res.flow
        res.write_loss_csv(out / "pinn_losses.csv")
        summary["relative_losses"] = list(res.relative_losses())
    write_flow_csv(q, out / "flow_estimate.csv")
    truth = src.samples
    rmse = float(np.sqrt(np.mean((q.samples - truth) ** 2)) / np.ptp(truth))
    summary["rmse_over_peak_to_peak"] = rmse
    _line_figure(out / "flow_estimate.png", {"true outlet flow": truth, "estimate": q.samples},
                 "time (s)", "flow (m^3/s)", cfg.sample_rate)
    return summary


def cmd_experiment(args, cfg, out: Path):
    from .workbench import emit_plots, run_experiment, save_artifacts
    if args.in_domain:
        cfg = replace(cfg, in_domain=True)
    cal = _load_calibration(args.calibration)
    ckpt = None
    if args.checkpoints:
        ckpt = out / "checkpoints"
        ckpt.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    report = run_experiment(cfg, cal, progress=log.info, checkpoint_dir=ckpt, workers=args.workers)
    save_artifacts(report.artifacts, out / "artifacts.npz")
    manifest = emit_plots(report, out)
    failures = sum(c.get("failures", 0) for c in report.cells.values())
    return {"cells": {k: {"mean": c["mean"], "std": c["std"]} for k, c in report.cells.items()},
            "failures": failures, "files": len(manifest["files"])}


def cmd_plot(args, cfg, out: Path):
    from .workbench import RunReport, emit_plots, load_artifacts
    try:
        report = RunReport.from_dict(json.loads(Path(args.report).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read report {args.report}: {exc}") from exc
    art = args.artifacts
    if art is None and (Path(args.report).parent / "artifacts.npz").exists():
        art = Path(args.report).parent / "artifacts.npz"
    if art is not None:
        report.artifacts = load_artifacts(art)
    manifest = emit_plots(report, out)
    return {"files": len(manifest["files"])}


COMMANDS = {
    "simulate": cmd_simulate, "calibrate": cmd_calibrate, "gen-dataset": cmd_gen_dataset,
    "train": cmd_train, "eval": cmd_eval, "gradcam": cmd_gradcam,
    "virtual-sense": cmd_virtual_sense, "experiment": cmd_experiment, "plot": cmd_plot,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        from .nn import configure_torch
        configure_torch()
        cfg = load_config(args)
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ValidationError(f"cannot create output directory {out}: {exc}") from exc
        summary = COMMANDS[args.command](args, cfg, out)
        if args.command != "experiment" and args.command != "plot":
            _write_manifest(out)
        print(json.dumps(summary, sort_keys=True, default=float))
        return EXIT_OK
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
