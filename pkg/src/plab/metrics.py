"""Rank, unit-utilization, and accuracy metrics plus the per-run report.

Definitions:
  erank(A)  = exp(-sum p_i log p_i) with p_i = sigma_i / sum_j sigma_j over
              the nonzero singular values (0 log 0 := 0)
  srank(A)  = sum sigma_i^2 / sigma_max^2
  FAU(l)    = mean over units of the empirical P(activation > 0) on a probe
              batch; FDU = 1 - FAU
  AAT       = mean of per-task accuracies
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import ContractError, UnknownComponentError


@dataclass(frozen=True)
class RankMetrics:
    erank: float
    srank: float
    rank_r: int
    degenerate: bool = False


@dataclass(frozen=True)
class UnitActivity:
    layer: str
    fau: float
    fdu: float


def erank(singular_values) -> float:
    """Exponential of the Shannon entropy of the normalized spectrum.

    All-zero input is defined as 0.0 (degenerate; see rank_metrics).
    """
    s = _checked_spectrum(singular_values)
    s = s[s > 0]
    if s.size == 0:
        return 0.0
    p = s / s.sum()
    return float(np.exp(-(p * np.log(p)).sum()))


def srank(singular_values) -> float:
    """Sum of squared singular values over the squared largest one."""
    s = _checked_spectrum(singular_values)
    if s[0] == 0.0:
        return 0.0
    return float((s * s).sum() / (s[0] * s[0]))


def _checked_spectrum(singular_values) -> np.ndarray:
    s = np.asarray(singular_values, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ContractError(f"expected a 1-D non-empty spectrum, got shape {s.shape}")
    if (s < 0).any():
        raise ContractError("singular values must be non-negative")
    if (np.diff(s) > 0).any():
        raise ContractError("singular values must be sorted descending")
    return s


def rank_metrics(singular_values) -> RankMetrics:
    """erank/srank/numerical rank of a (clipped) spectrum; flags the zero matrix."""
    s = linalg.clip_spectrum(_checked_spectrum(singular_values))
    r = int((s > 0).sum())
    if r == 0:
        return RankMetrics(0.0, 0.0, 0, degenerate=True)
    return RankMetrics(erank(s), srank(s), r)


def rank_of_matrix(a) -> RankMetrics:
    """SVD a dense matrix and compute its rank metrics."""
    s = linalg.svd(a, want_vectors=False).singular_values
    return rank_metrics(s)


def rank_of_features(capture: np.ndarray) -> RankMetrics:
    """Rank metrics of a (samples x channels) feature capture."""
    return rank_of_matrix(capture)


def rank_of_weights(weight: np.ndarray) -> RankMetrics:
    """Rank metrics of a weight matrix."""
    return rank_of_matrix(weight)


def head_slices(weight: np.ndarray, heads: int) -> list[np.ndarray]:
    """Per-head column slices of a (dim_in, heads*head_dim) projection matrix."""
    w = np.asarray(weight)
    if w.ndim != 2 or w.shape[1] % heads != 0:
        raise ContractError(f"cannot slice shape {w.shape} into {heads} heads")
    hd = w.shape[1] // heads
    return [w[:, i * hd : (i + 1) * hd] for i in range(heads)]


MIN_PROBE_BATCH = 32


def fau(probe, layer: str) -> UnitActivity:
    """Fraction of active units of one layer on a probe capture.

    A unit is active on a sample when its activation value is > 0; its
    probability is the empirical fraction over the probe, and FAU averages
    that over units. FDU := 1 - FAU, so fau + fdu == 1 exactly.
    """
    if layer not in probe.features:
        raise UnknownComponentError(f"no capture recorded for layer {layer!r}")
    if probe.batch_size < MIN_PROBE_BATCH:
        raise ContractError(f"probe batch {probe.batch_size} < minimum {MIN_PROBE_BATCH}")
    act = probe.features[layer]
    per_unit = (act > 0).mean(axis=0)
    value = float(per_unit.mean())
    return UnitActivity(layer=layer, fau=value, fdu=1.0 - value)


def aat(accuracies) -> float:
    """Mean of per-task accuracies; exact (order-independent) summation."""
    accs = [float(a) for a in accuracies]
    if not accs:
        raise ContractError("aat needs at least one accuracy")
    if any(a < 0.0 or a > 1.0 for a in accs):
        raise ContractError("accuracies must lie in [0, 1]")
    return math.fsum(accs) / len(accs)


@dataclass(frozen=True)
class MetricRecord:
    task: int
    step: int
    scope: str
    component: str
    metric: str
    value: float


CSV_HEADER = ("task", "step", "scope", "component", "metric", "value")

FEATURE_COMPONENTS = ("norm1", "attn_out", "resid1", "norm2", "ffn.fc1", "ffn.fc2", "resid2")


@dataclass
class PlasticityReport:
    """Per-task metric series, per-task accuracy, and the aggregate AAT.

    Task indices are 1-based and contiguous; `aat` always equals the mean of
    the recorded accuracies.
    """

    seed: int = 0
    records: list[MetricRecord] = field(default_factory=list)
    task_acc: dict[int, float] = field(default_factory=dict)
    diverged_at_task: int | None = None

    def add(self, task: int, step: int, scope: str, component: str, metric: str, value: float):
        self.records.append(MetricRecord(task, step, scope, component, metric, float(value)))

    def record_accuracy(self, task: int, step: int, acc: float):
        expected = len(self.task_acc) + 1
        if task != expected:
            raise ContractError(f"task indices must be contiguous from 1; got {task}, expected {expected}")
        self.task_acc[task] = float(acc)
        self.add(task, step, "task", "", "acc", acc)

    @property
    def aat(self) -> float:
        return aat([self.task_acc[t] for t in sorted(self.task_acc)])

    def series(self, scope: str, component: str, metric: str) -> list[tuple[int, float]]:
        """(task, value) pairs for one metric series, task-ascending."""
        pts = [
            (r.task, r.value)
            for r in self.records
            if r.scope == scope and r.component == component and r.metric == metric
        ]
        if not pts:
            raise UnknownComponentError(f"no series for scope={scope!r} component={component!r} metric={metric!r}")
        return sorted(pts)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.records:
            w.writerow([r.task, r.step, r.scope, r.component, r.metric, repr(r.value)])
        return buf.getvalue()

    def to_json_obj(self) -> dict:
        return {
            "seed": self.seed,
            "diverged_at_task": self.diverged_at_task,
            "task_acc": {str(t): self.task_acc[t] for t in sorted(self.task_acc)},
            "aat": self.aat if self.task_acc else None,
            "records": [
                [r.task, r.step, r.scope, r.component, r.metric, r.value] for r in self.records
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_json_obj(cls, obj: dict) -> "PlasticityReport":
        rep = cls(seed=int(obj["seed"]), diverged_at_task=obj.get("diverged_at_task"))
        rep.records = [MetricRecord(t, s, sc, c, m, v) for t, s, sc, c, m, v in obj["records"]]
        rep.task_acc = {int(t): float(a) for t, a in obj["task_acc"].items()}
        return rep


def write_series_csv(report: PlasticityReport, scope: str, component: str, metric: str) -> str:
    """Plot-ready two-column CSV (task index, value) for one metric series."""
    pts = report.series(scope, component, metric)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("task", "value"))
    for t, v in pts:
        w.writerow([t, repr(v)])
    return buf.getvalue()


def delta_heatmap(report: PlasticityReport, block_a: int, block_b: int):
    """Grid of feature-erank differences block_a - block_b per (component, task).

    Returns (components, tasks, grid) where grid[i, j] is the erank gap of
    component i at task j.
    """
    grids = []
    tasks_ref: list[int] | None = None
    for comp in FEATURE_COMPONENTS:
        sa = report.series("features", f"block{block_a}.{comp}", "erank")
        sb = report.series("features", f"block{block_b}.{comp}", "erank")
        ta = [t for t, _ in sa]
        if [t for t, _ in sb] != ta:
            raise UnknownComponentError(f"blocks {block_a}/{block_b} sampled at different tasks for {comp}")
        if tasks_ref is None:
            tasks_ref = ta
        elif ta != tasks_ref:
            raise UnknownComponentError("feature components sampled at inconsistent tasks")
        grids.append([va - vb for (_, va), (_, vb) in zip(sa, sb)])
    return list(FEATURE_COMPONENTS), tasks_ref or [], np.asarray(grids, dtype=np.float64)
