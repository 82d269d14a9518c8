"""Command line entry point: synth, cache-sources, run, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from emg_transfer.config import settings
from emg_transfer.errors import EXIT_OK, ConfigurationError, error_report, exit_code_for
from emg_transfer.schemas import ExperimentConfig
from emg_transfer.services.cache import build_source_cache
from emg_transfer.services.cohort import Cohort, write_synthetic_cohort
from emg_transfer.services.experiment import build_report, run_experiment

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def load_config(path: str | Path, *, out: Optional[str] = None, jobs: Optional[int] = None,
                seed: Optional[int] = None) -> ExperimentConfig:
    """Read a JSON config and apply the command line overrides before validation."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: the config must be a JSON object")
    overrides = {"out_dir": out, "jobs": jobs, "seed": seed}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.model_validate(raw)


def _cmd_synth(cfg: ExperimentConfig, args) -> int:
    paths = write_synthetic_cohort(cfg, args.out or cfg.out_dir)
    logger.info("synthetic cohort: %d recordings", len(paths))
    return EXIT_OK


def _cmd_cache_sources(cfg: ExperimentConfig, args) -> int:
    cohort = Cohort(cfg)
    classes = cohort.class_set(list(dict.fromkeys([*cfg.targets, *cfg.sources])))
    _, report = build_source_cache(cfg, cohort, classes=classes)
    logger.info("trained: %s; reused: %s", report.trained or "-", report.reused or "-")
    return EXIT_OK


def _cmd_run(cfg: ExperimentConfig, args) -> int:
    return run_experiment(cfg, jobs=args.jobs).exit_code


def _cmd_report(cfg: Optional[ExperimentConfig], args) -> int:
    build_report(args.out or cfg.out_dir)
    return EXIT_OK


COMMANDS = {
    "synth": _cmd_synth,
    "cache-sources": _cmd_cache_sources,
    "run": _cmd_run,
    "report": _cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emg-transfer",
        description="Transfer learning experiments for sEMG hand-posture classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "write the synthetic cohort as CSV recordings",
        "cache-sources": "train or refresh the cached source models",
        "run": "run every target and write learning curves",
        "report": "aggregate a finished run into curve_summary.csv and report.md",
    }
    for name, text in helps.items():
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("--config", required=name != "report", help="experiment config (JSON)")
        cmd.add_argument("--out", help="output directory (overrides out_dir)")
        cmd.add_argument("--jobs", type=int, help="parallel targets (overrides jobs)")
        cmd.add_argument("--seed", type=int, help="base seed (overrides seed)")
    return parser


def _write_errors(out_dir: Optional[str | Path], exc: BaseException) -> None:
    if not out_dir:
        return
    path = Path(out_dir) / "errors.json"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"errors": [error_report(exc)]}, indent=2) + "\n", encoding="utf-8")
    except OSError:
        logger.warning("could not write %s", path)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=settings.log_level, format=LOG_FORMAT)

    cfg = None
    try:
        if args.config:
            cfg = load_config(args.config, out=args.out, jobs=args.jobs, seed=args.seed)
        if cfg is None and not args.out:
            raise ConfigurationError("report needs --config or --out")
        return COMMANDS[args.command](cfg, args)
    except Exception as exc:  # noqa: BLE001
        logger.error("%s failed: %s", args.command, exc)
        _write_errors(args.out or (cfg.out_dir if cfg else None), exc)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
