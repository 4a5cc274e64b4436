"""Run experiments and sweeps, writing every artifact to an output directory.

Layout of ``run`` output::

    <out>/config.txt                 resolved configuration
    <out>/summary.csv                one row per repeat (see metrics.SUMMARY_FIELDS)
    <out>/repeat_<r>/records.jsonl   one JSON object per round
    <out>/repeat_<r>/accuracy.csv    accuracy / cost per round (plot data)
    <out>/repeat_<r>/alpha_trace.csv per-client mean alpha per round (plot data)
    <out>/repeat_<r>/models.ckpt     final models (see models.save_checkpoint)

``sweep`` writes one such directory per value under ``<out>/<key>=<value>``
and a merged ``<out>/comparison.csv``.
"""

from __future__ import annotations

import logging
import shutil
from pathlib import Path
from typing import Callable, Sequence

from . import metrics
from .config import SWEEPABLE, ConfigError, ExperimentConfig, coerce_value
from .models import save_checkpoint
from .protocol import ExperimentResult, derive_seed, run_experiment

log = logging.getLogger(__name__)


class OutputExistsError(FileExistsError):
    pass


def repeat_seeds(cfg: ExperimentConfig) -> list[int]:
    return [derive_seed(cfg.seed, r) for r in range(cfg.repeats)]


def _prepare(out: Path, force: bool) -> None:
    if out.exists():
        if not out.is_dir():
            raise OutputExistsError(f"{out} exists and is not a directory")
        if any(out.iterdir()):
            if not force:
                raise OutputExistsError(f"{out} is not empty; pass --force to overwrite")
            shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def save_models(result: ExperimentResult, path: Path) -> None:
    parts = {}
    theta = result.server.theta
    if theta is not None:
        parts["global_extractor"] = theta
    for c in result.clients:
        parts[f"client_{c.client_id}"] = c.model
        if result.federation.config.algorithm in ("pfedafm", "pfedafm_e2e"):
            parts[f"alpha_{c.client_id}"] = c.alpha
    save_checkpoint(path, **parts)


def write_result(result: ExperimentResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_jsonl(result.records, out / "records.jsonl")
    metrics.write_csv(metrics.accuracy_rows(result.records), out / "accuracy.csv", metrics.ACCURACY_FIELDS)
    metrics.write_csv(metrics.alpha_rows(result.records), out / "alpha_trace.csv", metrics.ALPHA_FIELDS)
    save_models(result, out / "models.ckpt")


def run(cfg: ExperimentConfig, out, force: bool = False,
        echo: Callable[[str], None] = print, label: str = "") -> list[dict]:
    cfg.validate()
    out = Path(out)
    _prepare(out, force)
    (out / "config.txt").write_text(cfg.to_text())
    rows = []
    for r, seed in enumerate(repeat_seeds(cfg)):
        result = run_experiment(cfg, seed)
        write_result(result, out / f"repeat_{r}")
        row = metrics.summary_row(label or cfg.algorithm, cfg.algorithm, seed, result.records,
                                  cfg.target_accuracy)
        row["repeat"] = r
        rows.append(row)
        best = row["best_mean_accuracy"]
        echo(f"{cfg.algorithm} repeat={r} seed={seed} rounds={cfg.T} "
             f"best_mean_acc={'n/a' if best is None else f'{best:.4f}'} "
             f"rounds_to_target={row['rounds_to_target']} comm_params={row['total_comm_params']} "
             f"flops={row['total_flops']}")
    metrics.write_csv(rows, out / "summary.csv", ("repeat", *metrics.SUMMARY_FIELDS))
    return rows


def sweep(cfg: ExperimentConfig, key: str, values: Sequence, out, force: bool = False,
          echo: Callable[[str], None] = print) -> list[dict]:
    if key not in SWEEPABLE:
        raise ConfigError([f"cannot sweep {key!r}; sweepable keys: {', '.join(SWEEPABLE)}"])
    if not values:
        raise ConfigError(["sweep needs at least one value"])
    parsed = [coerce_value(key, v) if isinstance(v, str) else v for v in values]
    variants = [cfg.replace(**{key: v}) for v in parsed]
    problems = []
    for v, variant in zip(parsed, variants):
        try:
            variant.validate()
        except ConfigError as exc:
            problems.extend(f"{key}={v}: {p}" for p in exc.problems)
    if problems:
        raise ConfigError(problems)
    out = Path(out)
    _prepare(out, force)
    merged = []
    for v, variant in zip(parsed, variants):
        rows = run(variant, out / f"{key}={v}", force=force, echo=echo, label=f"{key}={v}")
        for row in rows:
            merged.append({"key": key, "value": v, **row})
    metrics.write_csv(merged, out / "comparison.csv", ("key", "value", "repeat", *metrics.SUMMARY_FIELDS))
    return merged
