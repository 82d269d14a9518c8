"""Batch runs over a cohort and the report built from their files."""

from __future__ import annotations

import json
import logging
import re
import shutil
import uuid
from concurrent.futures import Future, ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from emg_transfer.config import settings
from emg_transfer.db import session_factory
from emg_transfer.errors import EXIT_OK, DataError, error_report
from emg_transfer.models import TargetRunLog
from emg_transfer.schemas import ExperimentConfig
from emg_transfer.services.cache import build_source_cache, resolve_folds
from emg_transfer.services.cohort import Cohort
from emg_transfer.services.evaluation import (
    ConfusionMatrix,
    CurveResult,
    MethodSettings,
    aggregate_curves,
    class_correlation,
    overlap_table,
    run_learning_curve,
    topk_histogram,
    write_confusion,
    write_correlation,
    write_histogram,
    write_learning_curve,
)
from emg_transfer.services.lssvm import GridSpec, MulticlassModel, grid_search
from emg_transfer.services.mkal import MkalConfig
from emg_transfer.services.multi_adapt import BetaSearch
from emg_transfer.templating import render
from emg_transfer.timezone import TZ_NAME, now_local, stamp
from emg_transfer.utils import derive_seed

logger = logging.getLogger(__name__)

CURVE_FILE = "learning_curve.csv"
STAGING_DIR = ".staging"
TOP_K = 4
OVERLAP_THRESHOLD = 3
_CONFUSION_FILE = re.compile(r"confusion_(.+)_(\d+)\.csv")


@dataclass
class TargetOutcome:
    """What one target produced, or why it failed."""

    target_id: str
    curve: Optional[pd.DataFrame] = None
    C: Optional[float] = None
    gamma: Optional[float] = None
    seeds: dict[str, int] = field(default_factory=dict)
    error: Optional[dict] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class RunResult:
    run_id: str
    out_dir: Path
    exit_code: int
    outcomes: list[TargetOutcome]


def target_seeds(cfg: ExperimentConfig, target_id: str) -> dict[str, int]:
    return {
        "curve": derive_seed(cfg.seed, target_id, "curve"),
        "mkal": derive_seed(cfg.seed, target_id, "mkal"),
    }


def target_dir(out_dir: str | Path, target_id: str) -> Path:
    return Path(out_dir) / "targets" / target_id


def _write_target_artifacts(result: CurveResult, classes: np.ndarray, out: Path) -> pd.DataFrame:
    frame = result.curve.to_frame()
    write_learning_curve(frame, out / CURVE_FILE)
    k = min(TOP_K, int(classes.shape[0]))
    for (method, step), cm in sorted(result.confusions.items()):
        write_confusion(cm, out / f"confusion_{method}_{step}.csv")
        write_histogram(topk_histogram(cm, k), out / f"histogram_{method}_{step}.csv")
    return frame


def run_target(
    cfg: ExperimentConfig,
    target_id: str,
    sources: Sequence[MulticlassModel],
    classes: np.ndarray,
    out_dir: str | Path,
    cohort: Optional[Cohort] = None,
) -> TargetOutcome:
    """Learning curves of every method for one target; writes its own directory only.

    Files are written to a staging directory that replaces ``targets/<id>``
    only once every file is in place, so a failing target leaves nothing
    behind.
    """
    cohort = cohort or Cohort(cfg)
    seeds = target_seeds(cfg, target_id)
    outcome = TargetOutcome(target_id, seeds=seeds)
    staging = Path(out_dir) / STAGING_DIR / target_id
    try:
        data = cohort.subject(target_id)
        grid = GridSpec(tuple(cfg.grid.C), tuple(cfg.grid.gamma))
        folds = resolve_folds(cfg)
        found = grid_search(data.train, grid, folds, classes=classes)
        outcome.C, outcome.gamma = found.C, found.gamma
        logger.info("target %s: C=%g gamma=%g", target_id, found.C, found.gamma)

        method_settings = MethodSettings(
            C=found.C,
            gamma=found.gamma,
            classes=classes,
            beta_search=BetaSearch.from_schema(cfg.multi_adapt),
            mkal_config=MkalConfig.from_schema(cfg.mkal, seeds["mkal"]),
            hl2l_fraction=cfg.hl2l.fraction,
            hl2l_second=cfg.hl2l.second_kernel,
            prior_mode=cfg.prior_features.mode,
            grid=grid,
            folds=folds,
            seed=seeds["curve"],
        )
        result = run_learning_curve(
            data.train,
            data.test,
            sources,
            cfg.methods,
            cfg.curve.steps,
            method_settings,
            order=cfg.curve.order,
        )

        shutil.rmtree(staging, ignore_errors=True)
        frame = _write_target_artifacts(result, classes, staging)
        final = target_dir(out_dir, target_id)
        shutil.rmtree(final, ignore_errors=True)
        final.parent.mkdir(parents=True, exist_ok=True)
        staging.rename(final)
    except Exception as exc:  # noqa: BLE001
        logger.exception("target %s failed", target_id)
        shutil.rmtree(staging, ignore_errors=True)
        outcome.error = error_report(exc)
        return outcome

    outcome.curve = frame.assign(target=target_id)[["target", "step", "method", "balanced_accuracy"]]
    return outcome


def _worker(
    cfg: ExperimentConfig,
    target_id: str,
    sources: list[MulticlassModel],
    classes: np.ndarray,
    out_dir: str,
) -> TargetOutcome:
    return run_target(cfg, target_id, sources, classes, out_dir)


def _collect(target_id: str, future: Future, cfg: ExperimentConfig) -> TargetOutcome:
    """Outcome of a worker; a worker that died counts as a failure of its target."""
    try:
        return future.result()
    except Exception as exc:  # noqa: BLE001
        logger.exception("target %s: worker failed", target_id)
        return TargetOutcome(target_id, seeds=target_seeds(cfg, target_id), error=error_report(exc))


def _log_outcome(cache_dir: str | Path, run_id: str, outcome: TargetOutcome, methods: Sequence[str], started_at):
    with session_factory(cache_dir)() as db:
        db.add(
            TargetRunLog(
                run_id=run_id,
                target_id=outcome.target_id,
                status="success" if outcome.ok else "error",
                methods=",".join(methods),
                error_message=None if outcome.ok else outcome.error["message"],
                started_at=started_at,
                finished_at=now_local(),
            )
        )
        db.commit()


def _write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_run_manifest(cfg: ExperimentConfig, out_dir: Path, cohort: Cohort) -> None:
    """Echo of the effective config, its JSON schema and every derived seed."""
    _write_json(out_dir / "config.json", cfg.model_dump(mode="json"))
    _write_json(out_dir / "config.schema.json", ExperimentConfig.model_json_schema())
    _write_json(
        out_dir / "seeds.json",
        {
            "seed": cfg.seed,
            "synthetic": cohort.synthetic_seeds(),
            "targets": {tid: target_seeds(cfg, tid) for tid in cfg.targets},
        },
    )


def run_experiment(
    cfg: ExperimentConfig,
    *,
    jobs: Optional[int] = None,
    cache_dir: Optional[str | Path] = None,
) -> RunResult:
    """Train or load the sources, run every target and write all artifacts.

    A failing target is recorded and does not stop the others; the exit code
    is that of the first failing target in config order.
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = Path(cache_dir or cfg.cache_dir or settings.cache_dir)
    jobs = jobs or (cfg.jobs if "jobs" in cfg.model_fields_set else settings.jobs)
    run_id = uuid.uuid4().hex
    started = now_local()
    cohort = Cohort(cfg)
    write_run_manifest(cfg, out_dir, cohort)

    try:
        all_ids = list(dict.fromkeys([*cfg.targets, *cfg.sources]))
        classes = cohort.class_set(all_ids)
        needed = sorted({sid for tid in cfg.targets for sid in cfg.sources_for(tid)})
        source_models, cache_report = build_source_cache(
            cfg, cohort, subjects=needed, classes=classes, cache_dir=cache_dir
        )
    except Exception as exc:  # noqa: BLE001
        logger.exception("source preparation failed")
        report = error_report(exc)
        _write_json(out_dir / "errors.json", {"run_id": run_id, "errors": [{"stage": "sources", **report}]})
        return RunResult(run_id, out_dir, report["exit_code"], [])

    def sources_of(tid: str) -> list[MulticlassModel]:
        return [source_models[sid] for sid in cfg.sources_for(tid)]

    if jobs > 1 and len(cfg.targets) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                tid: pool.submit(_worker, cfg, tid, sources_of(tid), classes, str(out_dir)) for tid in cfg.targets
            }
            outcomes = [_collect(tid, future, cfg) for tid, future in futures.items()]
    else:
        outcomes = [run_target(cfg, tid, sources_of(tid), classes, out_dir, cohort) for tid in cfg.targets]
    shutil.rmtree(out_dir / STAGING_DIR, ignore_errors=True)

    for outcome in outcomes:
        _log_outcome(cache_dir, run_id, outcome, cfg.methods, started)

    curves = [o.curve for o in outcomes if o.ok]
    if curves:
        write_learning_curve(pd.concat(curves, ignore_index=True), out_dir / CURVE_FILE)
        build_report(out_dir)

    failed = [o for o in outcomes if not o.ok]
    exit_code = int(failed[0].error["exit_code"]) if failed else EXIT_OK
    if failed:
        _write_json(
            out_dir / "errors.json",
            {"run_id": run_id, "errors": [{"stage": "target", "target": o.target_id, **o.error} for o in failed]},
        )
    _write_json(
        out_dir / "summary.json",
        {
            "run_id": run_id,
            "started_at": stamp(started),
            "finished_at": stamp(),
            "timezone": TZ_NAME,
            "exit_code": exit_code,
            "sources": {"trained": cache_report.trained, "reused": cache_report.reused},
            "classes": [int(c) for c in classes],
            "targets": {
                o.target_id: {"status": "success" if o.ok else "error", "C": o.C, "gamma": o.gamma}
                for o in outcomes
            },
        },
    )
    logger.info("run %s finished: %d/%d targets ok", run_id, len(curves), len(outcomes))
    return RunResult(run_id, out_dir, exit_code, outcomes)


def _read_confusion(path: Path) -> np.ndarray:
    frame = pd.read_csv(path, index_col=0)
    return frame.to_numpy(dtype=float)


def mean_confusions(out_dir: str | Path) -> dict[tuple[str, int], ConfusionMatrix]:
    """Per (method, step), the mean of every target's confusion matrix."""
    stacks: dict[tuple[str, int], list[np.ndarray]] = {}
    for path in sorted(Path(out_dir).glob("targets/*/confusion_*.csv")):
        match = _CONFUSION_FILE.fullmatch(path.name)
        if not match:
            continue
        stacks.setdefault((match.group(1), int(match.group(2))), []).append(_read_confusion(path))
    out = {}
    for key, matrices in stacks.items():
        mean = np.mean(np.stack(matrices), axis=0)
        support = (mean.sum(axis=0) > 0).astype(np.int64) * len(matrices)
        out[key] = ConfusionMatrix(matrix=mean, support=support)
    return out


def build_report(out_dir: str | Path, *, top_k: int = TOP_K, threshold: int = OVERLAP_THRESHOLD) -> Path:
    """Aggregate a finished run from its files and render ``report.md``."""
    out_dir = Path(out_dir)
    curve_path = out_dir / CURVE_FILE
    if not curve_path.exists():
        raise DataError(f"{curve_path} not found; run the experiment first")
    curves = pd.read_csv(curve_path, dtype={"target": str})
    summary = aggregate_curves(curves)
    write_learning_curve(summary, out_dir / "curve_summary.csv")

    confusions = mean_confusions(out_dir)
    histograms = {}
    for (method, step), cm in sorted(confusions.items()):
        k = min(top_k, cm.class_count)
        histograms[(method, step)] = topk_histogram(cm, k)
        write_confusion(cm, out_dir / "mean" / f"confusion_{method}_{step}.csv")
        write_histogram(histograms[(method, step)], out_dir / "mean" / f"histogram_{method}_{step}.csv")

    overlap = overlap_table(histograms, threshold) if histograms else pd.DataFrame()
    if histograms:
        write_learning_curve(overlap, out_dir / "overlap.csv")

    correlation = None
    if confusions:
        final_step = max(step for _, step in confusions)
        recognition = {m: np.diag(cm.matrix) for (m, s), cm in sorted(confusions.items()) if s == final_step}
        if len(recognition) >= 2:
            correlation = class_correlation(recognition)
            write_correlation(correlation, out_dir / "correlation.csv")

    final = summary.sort_values("step").groupby("method", sort=True).tail(1)
    text = render(
        "report.md.j2",
        generated_at=stamp(),
        targets=sorted(curves["target"].unique()),
        steps=sorted(int(s) for s in curves["step"].unique()),
        final=final.to_dict("records"),
        overlap=overlap.to_dict("records"),
        correlation=correlation,
        threshold=threshold,
        top_k=top_k,
    )
    path = out_dir / "report.md"
    path.write_text(text, encoding="utf-8")
    logger.info("report written to %s", path)
    return path
