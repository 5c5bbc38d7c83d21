import csv
import json

import numpy as np
import pytest

from pumptwin.errors import DependencyError, ValidationError
from pumptwin.ita import CalibrationResult
from pumptwin.nn import TrainConfig, architecture, predict, train
from pumptwin.workbench import (PLANT_CLASSES, TRAIN_CLASSES, ExperimentConfig, LabeledDataset,
                                RunReport, build_in_domain_set, build_plant_test_set,
                                build_training_dataset, check_zero_shot, derive_seed, dip_regions,
                                emit_plots, load_artifacts, perturbed_prior, quick_config,
                                run_experiment, save_artifacts, split_indices, summarize)


def tiny(**kw):
    base = dict(samples_per_class=6, plant_windows_time=4, plant_windows_sst=2, image_size=40,
                n_runs=2, train=TrainConfig(epochs=2, batch_size=8))
    base.update(kw)
    return quick_config(**base)


def oracle_calibration(cfg):
    return CalibrationResult(cfg.plant_params, [(0, (0.0, 0.0), 0.0)], 1, 0.0, 1.0, ())


def test_config_validation_and_round_trip(tmp_path):
    cfg = tiny()
    back = ExperimentConfig.load(cfg.save(tmp_path / "c.json"))
    assert back.to_dict() == cfg.to_dict()
    with pytest.raises(ValidationError):
        ExperimentConfig(n_runs=0)
    with pytest.raises(ValidationError):
        ExperimentConfig(modality="vibration-time")
    with pytest.raises(ValidationError):
        ExperimentConfig(prior_params=ExperimentConfig().plant_params)
    with pytest.raises(ValidationError):
        ExperimentConfig.from_dict({"epochs_typo": 3})
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ValidationError):
        ExperimentConfig.load(tmp_path / "bad.json")


def test_prior_differs_by_alternating_eight_percent():
    cfg = ExperimentConfig()
    for i, (p, t) in enumerate(zip(cfg.prior_params.segments, cfg.plant_params.segments)):
        sign = 1 if i % 2 == 0 else -1
        assert p.wave_speed == pytest.approx(t.wave_speed * (1 + sign * 0.08))
        assert p.diameter == pytest.approx(t.diameter * (1 - sign * 0.08))
    assert perturbed_prior(cfg.plant_params, 0.0) == cfg.plant_params


def test_derive_seed_is_stable_and_key_sensitive():
    assert derive_seed(0, "a", 1) == derive_seed(0, "a", 1)
    assert len({derive_seed(0, "a", 1), derive_seed(0, "a", 2), derive_seed(1, "a", 1)}) == 3
    assert 0 <= derive_seed(5, "x") < 2 ** 64


def test_training_set_size_and_layout():
    cfg = tiny(samples_per_class=1000)
    assert 4 * cfg.samples_per_class == 4000
    small = tiny(samples_per_class=5)
    ds = build_training_dataset(small, "uncalibrated-P", seed=1)
    assert len(ds) == 20 and ds.X.shape == (20, 2, 3072) and ds.X.dtype == np.float32
    assert ds.class_names == TRAIN_CLASSES and set(ds.labels) == set(TRAIN_CLASSES)
    flow = build_training_dataset(small, "flow-Q", seed=1)
    assert flow.X.shape == (20, 1, 3072) and flow.modality == "flow-time"
    img = build_training_dataset(tiny(samples_per_class=2), "uncalibrated-P", 1, representation="sst")
    assert img.X.shape == (8, 2, 40, 40) and img.meta["scale_k"] > 0


def test_degenerate_augmentation_copies_the_seed_window():
    cfg = tiny(samples_per_class=5, train_noise_factor=0.0, augment_shift=False)
    ds = build_training_dataset(cfg, "uncalibrated-P", seed=3)
    for lbl in TRAIN_CLASSES:
        rows = ds.X[[i for i, l in enumerate(ds.labels) if l == lbl]]
        assert all(np.array_equal(r, rows[0]) for r in rows)


def test_fingerprints_replay_and_differ_across_seeds(tmp_path):
    cfg = tiny(samples_per_class=3)
    a = build_training_dataset(cfg, "uncalibrated-P", seed=1)
    b = build_training_dataset(cfg, "uncalibrated-P", seed=1)
    c = build_training_dataset(cfg, "uncalibrated-P", seed=2)
    assert a.fingerprint == b.fingerprint != c.fingerprint
    back = LabeledDataset.load(a.save(tmp_path / "d.npz"))
    assert back.fingerprint == a.fingerprint and np.array_equal(back.X, a.X)


def test_tampered_dataset_file_is_rejected(tmp_path):
    ds = build_training_dataset(tiny(samples_per_class=2), "uncalibrated-P", seed=1)
    path = ds.save(tmp_path / "d.npz")
    with np.load(path) as z:
        header = json.loads(str(z["header"]))
        X = z["X"] + 1.0
    with open(path, "wb") as fh:
        np.savez(fh, X=X, header=np.array(json.dumps(header)))
    with pytest.raises(ValidationError):
        LabeledDataset.load(path)


def test_calibrated_twin_needs_a_calibration():
    with pytest.raises(DependencyError):
        build_training_dataset(tiny(), "calibrated-P", seed=0)


def test_plant_test_set_sizes():
    cfg = ExperimentConfig()
    assert 3 * cfg.plant_windows_time == 480 and 3 * cfg.plant_windows_sst == 240
    small = tiny(plant_windows_time=5, plant_windows_sst=2)
    ref = build_training_dataset(small, "uncalibrated-P", seed=0).meta
    t = build_plant_test_set(small, "pressure-time", seed=1, reference=ref)
    assert t.X.shape == (15, 2, 3072) and t.class_names == PLANT_CLASSES
    ref_sst = build_training_dataset(tiny(samples_per_class=1), "uncalibrated-P", 0,
                                     representation="sst").meta
    s = build_plant_test_set(small, "pressure-sst", seed=1, reference=ref_sst)
    assert s.X.shape == (6, 2, 40, 40)
    q = build_plant_test_set(small, "flow-time", 1, reference=build_training_dataset(
        small, "flow-Q", 0).meta, calibration=oracle_calibration(small))
    assert q.X.shape == (15, 1, 3072)


def test_zero_shot_provenance_guard():
    ds = build_training_dataset(tiny(samples_per_class=2), "calibrated-P", 0,
                                oracle_calibration(tiny()))
    check_zero_shot(ds)
    assert all(p["origin"] == "twin" and p["calibration_source"] == "plant:H" for p in ds.provenance)
    leaked = LabeledDataset(ds.X[:1], ["S"], [{"origin": "plant", "class": "S"}], ds.modality,
                            ds.kind, ds.class_names)
    with pytest.raises(ValidationError):
        check_zero_shot(leaked)
    with pytest.raises(ValidationError):
        check_zero_shot(LabeledDataset(ds.X[:1], ["H"], [{"origin": "twin",
                                                          "calibration_source": "plant:S"}],
                                       ds.modality, ds.kind, ds.class_names))


def test_noiseless_plant_equal_to_twin_is_all_healthy():
    cfg = tiny(samples_per_class=30, sensor_noise=0.0, plant_windows_time=6)
    ds = build_training_dataset(cfg, "calibrated-P", 1, oracle_calibration(cfg))
    spec = architecture("CNN1D(341@100)", ds.X.shape[1:])
    state = train(spec, ds.X, ds.label_indices(), TrainConfig(epochs=30, batch_size=16), seed=2)
    test = build_plant_test_set(cfg, "pressure-time", 3, ds.meta, oracle_calibration(cfg))
    healthy = test.subset([i for i, l in enumerate(test.labels) if l == "H"])
    assert np.all(predict(state, healthy.X).argmax(1) == TRAIN_CLASSES.index("H"))


def test_in_domain_set_and_split():
    cfg = tiny(plant_windows_time=10)
    ds = build_in_domain_set(cfg, "time", seed=4)
    assert len(ds) == 30
    tr, te = split_indices(len(ds), seed=1)
    assert len(tr) == 24 and len(te) == 6 and not set(tr) & set(te)


def test_dip_regions_cover_the_fault():
    cfg = tiny()
    assert dip_regions(cfg, "H") == []
    s = dip_regions(cfg, "S")
    c = dip_regions(cfg, "C")
    assert len(s) == 1 and len(c) == 2
    width = cfg.faults["S"].dip_width * cfg.samples_per_rev
    assert s[0][1] - s[0][0] >= width
    padded = dip_regions(cfg, "S", pad=170)
    assert padded[0][0] == s[0][0] - 170 and padded[0][1] == s[0][1] + 170


def test_summary_statistics():
    mean, std = summarize([1.0, 0.5, 0.0])
    assert mean == pytest.approx(0.5) and std == pytest.approx(0.5)
    assert summarize([0.7]) == (0.7, 0.0)


@pytest.fixture(scope="module")
def tiny_report():
    cfg = tiny(dataset_kinds=("uncalibrated-P", "calibrated-P"),
               architectures=("CNN1D(341@100)", "CNN1D(150@50)"))
    return cfg, run_experiment(cfg, calibration=oracle_calibration(cfg))


def test_report_structure(tiny_report):
    cfg, rep = tiny_report
    assert set(rep.cells) == {f"{a}|{k}" for a in cfg.architectures for k in cfg.dataset_kinds}
    for cell in rep.cells.values():
        assert len(cell["runs"]) == cfg.n_runs and cell["failures"] == 0
        assert [r["run"] for r in cell["runs"]] == [0, 1]
        assert all(0 <= r["accuracy"] <= 1 for r in cell["runs"])
        assert cell["std"] >= 0
    r0 = rep.cell("CNN1D(341@100)", "calibrated-P")["runs"][0]
    r1 = rep.cell("CNN1D(150@50)", "calibrated-P")["runs"][0]
    assert r0["train_fingerprint"] == r1["train_fingerprint"]   # paired comparison
    assert len({r["seed"] for r in rep.cell("CNN1D(341@100)", "calibrated-P")["runs"]}) == 2


def test_experiment_replays_bit_identically(tiny_report):
    cfg, rep = tiny_report
    again = run_experiment(cfg, calibration=oracle_calibration(cfg))
    assert again.digest() == rep.digest()


def test_worker_pool_matches_serial(tiny_report):
    cfg, rep = tiny_report
    assert run_experiment(cfg, oracle_calibration(cfg), workers=2).digest() == rep.digest()


def test_emit_plots_grid_and_manifest(tiny_report, tmp_path):
    cfg, rep = tiny_report
    m1 = emit_plots(rep, tmp_path / "a")
    m2 = emit_plots(rep, tmp_path / "b")
    assert m1 == m2
    paths = {f["path"] for f in m1["files"]}
    assert {"report.json", "accuracy_grid.csv", "accuracy_runs.csv", "accuracy.png"} <= paths
    assert any(p.startswith("gradcam_") for p in paths)
    with open(tmp_path / "a" / "accuracy_grid.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["architecture", "uncalibrated-P", "calibrated-P"]
    assert [r[0] for r in rows[1:]] == list(cfg.architectures)


def test_empty_report_writes_only_metadata(tmp_path):
    m = emit_plots(RunReport({}), tmp_path)
    assert [f["path"] for f in m["files"]] == ["report.json"]
    assert (tmp_path / "manifest.json").exists()


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        emit_plots(RunReport({}), blocker / "sub")


def test_artifact_round_trip(tiny_report, tmp_path):
    _, rep = tiny_report
    back = load_artifacts(save_artifacts(rep.artifacts, tmp_path / "art.npz"))
    assert set(back) == set(rep.artifacts)
    for key, value in rep.artifacts.items():
        if key.startswith("examples|"):
            for nm in value:
                assert np.array_equal(back[key][nm], value[nm])
        else:
            assert [e["label"] for e in back[key]] == [e["label"] for e in value]
            assert np.array_equal(back[key][0]["map"], value[0]["map"])
