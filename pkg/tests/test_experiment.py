import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from emg_transfer.config import settings
from emg_transfer.db import session_factory
from emg_transfer.errors import EXIT_DATA, EXIT_OK, DataError
from emg_transfer.models import CachedSourceModel, TargetRunLog
from emg_transfer.schemas import ExperimentConfig
from emg_transfer.services import experiment, lssvm
from emg_transfer.services.cache import (
    build_source_cache,
    load_model_file,
    resolve_folds,
    save_model_file,
)
from emg_transfer.services.cohort import Cohort
from emg_transfer.services.experiment import STAGING_DIR, build_report, run_experiment, target_seeds
from emg_transfer.services.kernels import KernelSpec

FAST_METHODS = ["no_transfer", "multi_adapt"]


def _with(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    data = cfg.model_dump()
    data.update(changes)
    return ExperimentConfig.model_validate(data)


class TestCohort:
    def test_subject_features_and_class_set(self, tiny_config):
        cohort = Cohort(tiny_config)
        data = cohort.subject("s1")
        assert data.train.dim == 3
        assert len(data.train) == 225
        assert len(data.test) == 108
        np.testing.assert_array_equal(cohort.class_set(["s1"]), np.arange(4))
        assert cohort.subject("s1") is data

    def test_data_hash_is_reproducible(self, tiny_config):
        assert Cohort(tiny_config).subject("s2").data_hash == Cohort(tiny_config).subject("s2").data_hash

    def test_unknown_synthetic_subject(self, tiny_config):
        with pytest.raises(DataError):
            Cohort(tiny_config).subject("nobody")


class TestSourceCache:
    def test_model_file_round_trip(self, tmp_path, sources):
        path = tmp_path / "m.json"
        save_model_file(path, sources[0])
        loaded = load_model_file(path)
        assert loaded.subject_id == "src0"
        np.testing.assert_array_equal(loaded.alphas, sources[0].alphas)

    def test_unreadable_model_file(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(DataError):
            load_model_file(path)

    def test_second_build_reuses_every_model(self, tiny_config, tmp_path):
        subjects = ["s1", "s2", "s3"]
        cache_dir = tmp_path / "cache"
        models, report = build_source_cache(tiny_config, subjects=subjects)
        assert report.trained == subjects
        assert sorted(p.name for p in cache_dir.glob("source_*.json")) == [
            "source_s1.json",
            "source_s2.json",
            "source_s3.json",
        ]
        again, report = build_source_cache(tiny_config, subjects=subjects)
        assert report.trained == []
        assert report.reused == subjects
        for sid in subjects:
            np.testing.assert_array_equal(again[sid].alphas, models[sid].alphas)
        with session_factory(cache_dir)() as db:
            assert db.query(CachedSourceModel).count() == 3

    def test_corrupted_file_is_retrained(self, tiny_config, tmp_path):
        build_source_cache(tiny_config, subjects=["s1", "s2"])
        path = tmp_path / "cache" / "source_s2.json"
        path.write_text(path.read_text(encoding="utf-8") + " ", encoding="utf-8")
        _, report = build_source_cache(tiny_config, subjects=["s1", "s2"])
        assert report.reused == ["s1"]
        assert report.trained == ["s2"]
        assert report.corrupted == ["s2"]

    def test_changed_grid_invalidates_entries(self, tiny_config):
        build_source_cache(tiny_config, subjects=["s1"])
        changed = _with(tiny_config, grid={"C": [1.0], "gamma": [0.1], "folds": 3})
        _, report = build_source_cache(changed, subjects=["s1"])
        assert report.trained == ["s1"]
        assert report.corrupted == []

    def test_fold_count_falls_back_to_the_environment(self, tiny_config):
        assert resolve_folds(tiny_config) == 3
        unset = _with(tiny_config, grid={"C": [1.0], "gamma": [0.1]})
        assert "folds" not in unset.grid.model_fields_set
        assert resolve_folds(unset) == settings.cv_folds

    def test_cached_model_is_an_rbf_lssvm(self, tiny_config):
        models, _ = build_source_cache(tiny_config, subjects=["s4"])
        model = models["s4"]
        assert isinstance(model, lssvm.MulticlassModel)
        assert model.kernel.kind == "rbf"
        assert model.C in (1.0, 10.0)
        assert model.kernel.gamma in (0.1, 1.0)
        assert model.kernel == KernelSpec.rbf(model.kernel.gamma)


class TestRunExperiment:
    def test_full_run_writes_every_artifact(self, tiny_config, tmp_path):
        result = run_experiment(tiny_config)
        assert result.exit_code == EXIT_OK
        out = tmp_path / "out"
        curve = pd.read_csv(out / "learning_curve.csv", dtype={"target": str})
        assert len(curve) == 4 * 5 * 2
        assert list(curve.columns) == ["target", "step", "method", "balanced_accuracy"]
        assert set(curve["step"]) == {60, 120}
        for name in ("report.md", "curve_summary.csv", "overlap.csv", "summary.json", "seeds.json", "config.json"):
            assert (out / name).exists(), name
        assert (out / "targets" / "s1" / "confusion_no_transfer_120.csv").exists()
        assert (out / "mean" / "histogram_no_transfer_120.csv").exists()

        summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
        assert summary["exit_code"] == 0
        assert summary["classes"] == [0, 1, 2, 3]
        assert set(summary["targets"]) == {"s1", "s2", "s3", "s4"}

        seeds = json.loads((out / "seeds.json").read_text(encoding="utf-8"))
        assert seeds["targets"]["s1"] == target_seeds(tiny_config, "s1")

        with session_factory(tmp_path / "cache")() as db:
            logs = db.query(TargetRunLog).filter_by(run_id=result.run_id).all()
            assert sorted(log.target_id for log in logs) == ["s1", "s2", "s3", "s4"]
            assert {log.status for log in logs} == {"success"}

    def test_rerun_is_byte_identical(self, tiny_config, tmp_path):
        cfg = _with(tiny_config, methods=FAST_METHODS, targets=["s1", "s2"])
        first = run_experiment(cfg)
        second = run_experiment(_with(cfg, out_dir=str(tmp_path / "again")))
        assert first.exit_code == second.exit_code == EXIT_OK
        a = (tmp_path / "out" / "learning_curve.csv").read_bytes()
        b = (tmp_path / "again" / "learning_curve.csv").read_bytes()
        assert a == b
        summary = json.loads((tmp_path / "again" / "summary.json").read_text(encoding="utf-8"))
        assert summary["sources"]["trained"] == []

    def test_disjoint_sources_without_leave_one_out(self, tiny_config, tmp_path):
        cfg = _with(tiny_config, leave_one_out=False, targets=["s1"], sources=["s2", "s3"], methods=FAST_METHODS)
        result = run_experiment(cfg)
        assert result.exit_code == EXIT_OK
        summary = json.loads((tmp_path / "out" / "summary.json").read_text(encoding="utf-8"))
        assert summary["sources"]["trained"] == ["s2", "s3"]

    def test_overlap_without_leave_one_out_is_rejected(self, tiny_config):
        with pytest.raises(ValidationError):
            _with(tiny_config, leave_one_out=False)

    def test_failing_target_does_not_stop_the_others(self, tiny_config, tmp_path):
        cfg = _with(tiny_config, targets=["s1", "ghost"], sources=["s2", "s3"], methods=["no_transfer"])
        result = run_experiment(cfg)
        assert result.exit_code == EXIT_DATA
        errors = json.loads((tmp_path / "out" / "errors.json").read_text(encoding="utf-8"))["errors"]
        assert [(e["stage"], e["target"]) for e in errors] == [("target", "ghost")]
        curve = pd.read_csv(tmp_path / "out" / "learning_curve.csv", dtype={"target": str})
        assert set(curve["target"]) == {"s1"}

    def test_parallel_run_matches_sequential_and_isolates_failures(self, tiny_config, tmp_path):
        cfg = _with(tiny_config, targets=["s1", "s2", "ghost"], sources=["s3", "s4"], methods=FAST_METHODS)
        parallel = run_experiment(cfg, jobs=2)
        sequential = run_experiment(_with(cfg, out_dir=str(tmp_path / "seq")), jobs=1)
        assert parallel.exit_code == sequential.exit_code == EXIT_DATA
        out = tmp_path / "out"
        curve = pd.read_csv(out / "learning_curve.csv", dtype={"target": str})
        assert set(curve["target"]) == {"s1", "s2"}
        assert (out / "learning_curve.csv").read_bytes() == (tmp_path / "seq" / "learning_curve.csv").read_bytes()
        errors = json.loads((out / "errors.json").read_text(encoding="utf-8"))["errors"]
        assert [e["target"] for e in errors] == ["ghost"]
        assert not (out / "targets" / "ghost").exists()
        assert not (out / STAGING_DIR).exists()

    def test_crashed_worker_fails_only_its_target(self, tiny_config, tmp_path, monkeypatch):
        monkeypatch.setattr(experiment, "ProcessPoolExecutor", ThreadPoolExecutor)

        def flaky_worker(cfg, target_id, sources, classes, out_dir):
            if target_id == "s2":
                raise RuntimeError("worker lost")
            return experiment.run_target(cfg, target_id, sources, classes, out_dir)

        monkeypatch.setattr(experiment, "_worker", flaky_worker)
        cfg = _with(tiny_config, targets=["s1", "s2"], sources=["s3", "s4"], methods=["no_transfer"])
        result = run_experiment(cfg, jobs=2)
        assert result.exit_code == 1
        assert [o.target_id for o in result.outcomes if o.ok] == ["s1"]
        errors = json.loads((tmp_path / "out" / "errors.json").read_text(encoding="utf-8"))["errors"]
        assert [(e["target"], e["message"]) for e in errors] == [("s2", "worker lost")]
        summary = json.loads((tmp_path / "out" / "summary.json").read_text(encoding="utf-8"))
        assert summary["targets"]["s1"]["status"] == "success"
        assert summary["targets"]["s2"]["status"] == "error"

    def test_failed_artifact_write_leaves_no_partial_directory(self, tiny_config, tmp_path, monkeypatch):
        original = experiment.write_histogram

        def failing_write(hist, path):
            if path.parent.name == "s2":
                raise OSError("disk full")
            return original(hist, path)

        monkeypatch.setattr(experiment, "write_histogram", failing_write)
        cfg = _with(tiny_config, targets=["s1", "s2"], sources=["s3", "s4"], methods=["no_transfer"])
        result = run_experiment(cfg, jobs=1)
        assert result.exit_code == 1
        out = tmp_path / "out"
        assert (out / "targets" / "s1" / "learning_curve.csv").exists()
        assert not (out / "targets" / "s2").exists()
        assert not (out / STAGING_DIR).exists()
        curve = pd.read_csv(out / "learning_curve.csv", dtype={"target": str})
        assert set(curve["target"]) == {"s1"}


class TestReport:
    def test_missing_curve_file(self, tmp_path):
        with pytest.raises(DataError):
            build_report(tmp_path)

    def test_report_from_files(self, tmp_path):
        rows = [
            {"target": t, "step": s, "method": m, "balanced_accuracy": acc}
            for t, base in (("a", 0.5), ("b", 0.7))
            for m, bonus in (("no_transfer", 0.0), ("hl2l", 0.1))
            for s, acc in ((10, base + bonus), (20, base + bonus + 0.1))
        ]
        pd.DataFrame(rows).to_csv(tmp_path / "learning_curve.csv", index=False)
        path = build_report(tmp_path)
        text = path.read_text(encoding="utf-8")
        assert "no_transfer" in text and "hl2l" in text
        summary = pd.read_csv(tmp_path / "curve_summary.csv")
        final = summary[(summary["method"] == "hl2l") & (summary["step"] == 20)].iloc[0]
        assert final["mean"] == pytest.approx(0.8)
        assert final["best_target"] == "b"


def _transfer_config(tmp_path, seed: int) -> ExperimentConfig:
    subjects = [f"s{k}" for k in range(1, 9)]
    return ExperimentConfig.model_validate(
        {
            "cohort": {
                "synthetic": {
                    "subjects": subjects,
                    "class_count": 6,
                    "channels": 8,
                    "reps": 6,
                    "movement_len": 2000,
                    "rest_len": 2000,
                    "seed": seed,
                }
            },
            "targets": subjects,
            "sources": subjects,
            "methods": ["no_transfer", "multi_adapt", "mkal", "hl2l"],
            "windowing": {"window_len": 400, "shift": 20},
            "split": {"subsample_stride": 5},
            "grid": {"C": [10.0, 100.0, 1000.0], "gamma": [0.05, 0.5, 2.0], "folds": 3},
            "curve": {"steps": [30, 60, 120, 240, 480]},
            "out_dir": str(tmp_path / f"run{seed}"),
            "cache_dir": str(tmp_path / f"cache{seed}"),
            "seed": seed,
        }
    )


def test_adaptive_methods_reach_late_no_transfer_accuracy_early(tmp_path):
    early = {"multi_adapt": [], "mkal": [], "hl2l": []}
    late_no_transfer = []
    for seed in range(5):
        result = run_experiment(_transfer_config(tmp_path, seed), jobs=1)
        assert result.exit_code == EXIT_OK
        curve = pd.read_csv(result.out_dir / "learning_curve.csv", dtype={"target": str})
        assert curve["balanced_accuracy"].notna().all()
        mean = curve.groupby(["method", "step"])["balanced_accuracy"].mean()
        late_no_transfer.append(mean[("no_transfer", 480)])
        for method in early:
            early[method].append(mean[(method, 60)])
    reference = np.median(late_no_transfer)
    for method, scores in early.items():
        assert np.median(scores) >= reference - 0.02, method
