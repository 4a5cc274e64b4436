"""Accuracy, communication and computation accounting.

Communication is measured in parameters (not bytes). FLOPs follow a simple
convention: a dense layer costs ``2 * in * out`` per sample in the forward
pass, and a training step costs three forward passes.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import DenseLayer
from .models import HomoExtractor, SplitModel

TRAIN_STEP_FACTOR = 3


def mean_accuracy(per_client_acc: Sequence[float]) -> float:
    if len(per_client_acc) == 0:
        raise ValueError("mean_accuracy of an empty client list")
    return float(sum(per_client_acc) / len(per_client_acc))


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def comm_cost(rounds_to_target: int, per_round_params: int) -> int:
    if rounds_to_target < 0 or per_round_params < 0:
        raise ValueError("rounds and parameter counts must be >= 0")
    return rounds_to_target * per_round_params


def pfedafm_round_params(num_selected: int, homo_params: int) -> int:
    """Uplink plus downlink of the shared extractor for every selected client."""
    return 2 * num_selected * homo_params


def _layers(model) -> list[DenseLayer]:
    if isinstance(model, DenseLayer):
        return [model]
    if isinstance(model, SplitModel):
        return model.layers()
    if isinstance(model, HomoExtractor):
        return model.layers
    return list(model)


def flops_estimate(model, batch_size: int = 1) -> int:
    """Forward-pass FLOPs of a layer, stack or model for one batch."""
    return sum(2 * layer.in_dim * layer.out_dim for layer in _layers(model)) * batch_size


def mixing_flops(d: int, batch_size: int = 1) -> int:
    # two multiplies and one add per representation coordinate
    return 3 * d * batch_size


def training_flops(forward_flops: int) -> int:
    return TRAIN_STEP_FACTOR * forward_flops


def client_round_flops(algorithm: str, model: SplitModel, homo: HomoExtractor | None,
                       num_train: int, epochs: int) -> int:
    """Training FLOPs one client spends in one round."""
    samples = num_train * epochs
    local = flops_estimate(model.extractor) + flops_estimate(model.header)
    if algorithm in ("standalone", "fedavg", "lg_fedavg"):
        return training_flops(local) * samples
    assert homo is not None
    mixed = flops_estimate(homo) + local + mixing_flops(model.d)
    if algorithm == "pfedafm_e2e":
        return training_flops(mixed) * samples
    phase2 = flops_estimate(homo) + flops_estimate(model.header)
    return (training_flops(mixed) + training_flops(phase2)) * samples


def rounds_to_target(series: Sequence[float], target_acc: float) -> int | None:
    """1-based index of the first round whose mean accuracy reaches the target."""
    for i, acc in enumerate(series, start=1):
        if acc >= target_acc:
            return i
    return None


def alpha_trace(records: Iterable[dict]) -> dict[int, list[tuple[int, float]]]:
    """Per-client ``(round, mean alpha)`` pairs.

    Each client's series opens with its value before its first local update
    (at ``round - 1``), then one point per round it trained.
    """
    trace: dict[int, list[tuple[int, float]]] = {}
    for rec in records:
        for c in rec["clients"]:
            if c.get("alpha_mean") is None:
                continue
            pts = trace.setdefault(c["client_id"], [])
            if not pts:
                pts.append((rec["round"] - 1, c["alpha_mean_before"]))
            pts.append((rec["round"], c["alpha_mean"]))
    return trace


def windowed_descent_fraction(losses: Sequence[float], window: int = 5) -> tuple[int, int]:
    """Count non-increasing steps of the moving average of ``losses``.

    Returns ``(non_increasing, total)`` over consecutive pairs of ``window``-round
    means.
    """
    x = np.asarray(losses, dtype=np.float64)
    if len(x) < window + 1:
        return 0, 0
    means = np.convolve(x, np.ones(window) / window, mode="valid")
    steps = np.diff(means)
    return int(np.sum(steps <= 0.0)), int(len(steps))


@dataclass
class MetricSeries:
    mean_accuracy: list[float] = field(default_factory=list)
    best_mean_accuracy: list[float] = field(default_factory=list)
    client_accuracy: list[dict[int, float]] = field(default_factory=list)
    uplink_params: list[int] = field(default_factory=list)
    downlink_params: list[int] = field(default_factory=list)
    flops: list[int] = field(default_factory=list)
    alpha_mean: list[dict[int, float]] = field(default_factory=list)
    delta_sq: list[float | None] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "MetricSeries":
        s = cls()
        best = -math.inf
        up = down = fl = 0
        for rec in records:
            best = max(best, rec["mean_accuracy"])
            up += rec["uplink_params"]
            down += rec["downlink_params"]
            fl += rec["avg_client_flops"]
            s.mean_accuracy.append(rec["mean_accuracy"])
            s.best_mean_accuracy.append(best)
            s.client_accuracy.append({c["client_id"]: c["test_accuracy"] for c in rec["clients"]})
            s.uplink_params.append(up)
            s.downlink_params.append(down)
            s.flops.append(fl)
            s.alpha_mean.append({c["client_id"]: c["alpha_mean"] for c in rec["clients"]
                                 if c.get("alpha_mean") is not None})
            s.delta_sq.append(rec.get("delta_sq"))
        return s

    def total_comm(self) -> int:
        if not self.uplink_params:
            return 0
        return self.uplink_params[-1] + self.downlink_params[-1]

    def best(self) -> float | None:
        return self.best_mean_accuracy[-1] if self.best_mean_accuracy else None


# -- files -------------------------------------------------------------------

def write_jsonl(records: Iterable[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, allow_nan=False) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


SUMMARY_FIELDS = ("label", "algorithm", "seed", "rounds", "best_mean_accuracy", "final_mean_accuracy",
                  "rounds_to_target", "target_accuracy", "total_comm_params", "total_flops")


def summary_row(label: str, algorithm: str, seed: int, records: Sequence[dict],
                target_accuracy: float) -> dict:
    s = MetricSeries.from_records(records)
    rtt = rounds_to_target(s.mean_accuracy, target_accuracy)
    return {
        "label": label,
        "algorithm": algorithm,
        "seed": seed,
        "rounds": len(records),
        "best_mean_accuracy": s.best(),
        "final_mean_accuracy": s.mean_accuracy[-1] if s.mean_accuracy else None,
        "rounds_to_target": rtt,
        "target_accuracy": target_accuracy,
        "total_comm_params": s.total_comm(),
        "total_flops": s.flops[-1] if s.flops else 0,
    }


def write_csv(rows: Sequence[dict], path, fieldnames: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in fieldnames})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def accuracy_rows(records: Sequence[dict]) -> list[dict]:
    s = MetricSeries.from_records(records)
    rows = []
    for i, rec in enumerate(records):
        rows.append({
            "round": rec["round"],
            "mean_accuracy": rec["mean_accuracy"],
            "best_mean_accuracy": s.best_mean_accuracy[i],
            "small_mean_accuracy": rec.get("small_mean_accuracy"),
            "large_mean_accuracy": rec.get("large_mean_accuracy"),
            "all_client_mean_accuracy": rec["all_client_mean_accuracy"],
            "cumulative_comm_params": s.uplink_params[i] + s.downlink_params[i],
            "cumulative_flops": s.flops[i],
            "delta_sq": rec.get("delta_sq"),
        })
    return rows


ACCURACY_FIELDS = ("round", "mean_accuracy", "best_mean_accuracy", "small_mean_accuracy",
                   "large_mean_accuracy", "all_client_mean_accuracy", "cumulative_comm_params",
                   "cumulative_flops", "delta_sq")


def alpha_rows(records: Sequence[dict]) -> list[dict]:
    return [{"client_id": k, "round": r, "alpha_mean": a}
            for k, pts in sorted(alpha_trace(records).items()) for r, a in pts]


ALPHA_FIELDS = ("client_id", "round", "alpha_mean")
