"""Continual-learning metrics and the JSD drift probe.

Stages and tasks are 0-based. ``R[i, j]`` (j <= i) is the stage-i
predictor's accuracy on task j; ``R[j-1, j]`` is the pre-training
evaluation of task j used by forward transfer. Unset entries are NaN.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .duotower import ModelLike, clip_probs, encode_texts, encode_visual
from .errors import EmptyDatasetError, InvalidDistributionError, MetricError
from .gradcore import as_tensor

LN2 = math.log(2.0)


class AccuracyMatrix:
    """R plus the per-stage union accuracy curves."""

    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise ValueError("num_tasks must be >= 1")
        self.num_tasks = num_tasks
        self.values = np.full((num_tasks, num_tasks), np.nan)
        self.union = np.full(num_tasks, np.nan)
        self.clip_global = np.full(num_tasks, np.nan)
        self.clip_per_task = np.full((num_tasks, num_tasks), np.nan)
        # Prototype branch alone.
        self.visual_global = np.full(num_tasks, np.nan)
        self.visual_per_task = np.full((num_tasks, num_tasks), np.nan)

    @classmethod
    def from_values(cls, values, union: Optional[Sequence[float]] = None) -> "AccuracyMatrix":
        values = np.asarray(values, dtype=np.float64)
        matrix = cls(values.shape[0])
        matrix.values[:] = values
        if union is not None:
            matrix.union[: len(union)] = union
        return matrix

    def record(self, stage: int, task: int, accuracy: float):
        if not 0.0 <= accuracy <= 1.0:
            raise MetricError(f"accuracy {accuracy} outside [0, 1]")
        self.values[stage, task] = accuracy

    def record_union(self, stage: int, accuracy: float, clip_only: Optional[float] = None,
                     visual_only: Optional[float] = None):
        self.union[stage] = accuracy
        if clip_only is not None:
            self.clip_global[stage] = clip_only
        if visual_only is not None:
            self.visual_global[stage] = visual_only

    def __getitem__(self, index):
        return self.values[index]

    @property
    def completed(self) -> int:
        """Number of stages with a diagonal entry."""
        return int(np.sum(~np.isnan(np.diag(self.values))))


MatrixLike = Union[AccuracyMatrix, np.ndarray, Sequence[Sequence[float]]]


def _values(R: MatrixLike) -> np.ndarray:
    return R.values if isinstance(R, AccuracyMatrix) else np.asarray(R, dtype=np.float64)


def _entry(values: np.ndarray, i: int, j: int) -> float:
    if i >= values.shape[0] or j >= values.shape[1] or np.isnan(values[i, j]):
        raise MetricError(f"R[{i}][{j}] is not recorded")
    return float(values[i, j])


def avg_last(R: AccuracyMatrix, t: int) -> Tuple[float, float]:
    """(mean of per-stage union accuracies over stages < t, union accuracy at stage t-1)."""
    if t < 1:
        raise MetricError("avg/last need at least one completed task")
    union = R.union[:t]
    if len(union) < t or np.any(np.isnan(union)):
        raise MetricError(f"union accuracy missing for some of the first {t} stages")
    return float(np.mean(union)), float(union[t - 1])


def bwt(R: MatrixLike, t: int) -> float:
    """Mean over j < t-1 of R[t-1][j] - R[j][j]."""
    if t < 2:
        raise MetricError("backward transfer needs t >= 2")
    values = _values(R)
    last = t - 1
    return float(np.mean([_entry(values, last, j) - _entry(values, j, j) for j in range(last)]))


def fwt(R: MatrixLike, t: int) -> float:
    """Mean of the pre-training evaluations R[j-1][j], j = 1..t-1."""
    if t < 2:
        raise MetricError("forward transfer needs t >= 2")
    values = _values(R)
    return float(np.mean([_entry(values, j - 1, j) for j in range(1, t)]))


def forgetting(R: MatrixLike, t: int) -> float:
    """Mean over j < t-1 of max_{j<=i<=t-1} R[i][j] - R[t-1][j]."""
    if t < 2:
        raise MetricError("forgetting needs t >= 2")
    values = _values(R)
    last = t - 1
    drops = []
    for j in range(last):
        best = max(_entry(values, i, j) for i in range(j, t))
        drops.append(best - _entry(values, last, j))
    return float(np.mean(drops))


def summarize(R: AccuracyMatrix, t: Optional[int] = None) -> dict:
    """All CL metrics at t (default: completed stages); undefined ones are None."""
    t = R.completed if t is None else t
    avg, last = avg_last(R, t)
    metrics = {"avg": avg, "last": last, "bwt": None, "fwt": None, "forgetting": None}
    if t >= 2:
        metrics.update(bwt=bwt(R, t), forgetting=forgetting(R, t))
        try:
            metrics["fwt"] = fwt(R, t)
        except MetricError:
            pass
    return metrics


def _check_distribution(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or len(p) == 0:
        raise InvalidDistributionError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(p)) or np.any(p < 0.0):
        raise InvalidDistributionError(f"{name} has negative or non-finite entries")
    if abs(float(np.sum(p)) - 1.0) > 1e-8:
        raise InvalidDistributionError(f"{name} sums to {np.sum(p)}")
    return p


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0.0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats, within [0, ln 2]."""
    p = _check_distribution(p, "p")
    q = _check_distribution(q, "q")
    if len(p) != len(q):
        raise InvalidDistributionError(f"length mismatch: {len(p)} vs {len(q)}")
    m = 0.5 * (p + q)
    value = 0.5 * _kl(p, m) + 0.5 * _kl(q, m)
    return min(max(value, 0.0), LN2)


class Partition(Enum):
    BOUNDARY = "boundary"
    CORE = "core"


@dataclass(frozen=True)
class DriftRecord:
    sample_id: int
    pre: np.ndarray = field(repr=False, compare=False)
    post: np.ndarray = field(repr=False, compare=False)
    own_class_cosine: float
    jsd: float
    partition: Partition


@dataclass(frozen=True)
class DriftSummary:
    boundary_mean: float
    core_mean: float
    boundary_count: int
    core_count: int

    @property
    def overall_mean(self) -> float:
        total = self.boundary_count + self.core_count
        return (self.boundary_mean * self.boundary_count + self.core_mean * self.core_count) / total

    def as_dict(self) -> dict:
        return {"boundary_mean": self.boundary_mean, "core_mean": self.core_mean,
                "boundary_count": self.boundary_count, "core_count": self.core_count,
                "overall_mean": self.overall_mean}


def drift_probe(teacher: ModelLike, model: ModelLike, x, labels, class_set: Sequence[int],
                temperature: float) -> Tuple[List[DriftRecord], DriftSummary]:
    """Per-sample JSD between teacher and updated-model CLIP distributions.

    The lower half of samples by own-class teacher cosine forms the
    boundary partition (stable rank split, ties by sample order).
    """
    labels = np.asarray(labels, dtype=int)
    if len(labels) == 0:
        raise EmptyDatasetError("drift probe needs at least one sample")
    x = np.atleast_2d(as_tensor(x))
    class_set = [int(c) for c in class_set]
    pre = clip_probs(teacher, x, class_set, temperature)
    post = clip_probs(model, x, class_set, temperature)
    own = np.sum(encode_visual(teacher, x) * encode_texts(teacher, labels), axis=1)

    order = np.lexsort((np.arange(len(labels)), own))
    boundary = set(int(i) for i in order[: len(labels) // 2])
    records = []
    for i in range(len(labels)):
        records.append(DriftRecord(
            sample_id=i, pre=pre[i], post=post[i], own_class_cosine=float(own[i]),
            jsd=jsd(pre[i], post[i]),
            partition=Partition.BOUNDARY if i in boundary else Partition.CORE,
        ))
    boundary_values = [r.jsd for r in records if r.partition is Partition.BOUNDARY]
    core_values = [r.jsd for r in records if r.partition is Partition.CORE]
    summary = DriftSummary(
        boundary_mean=float(np.mean(boundary_values)) if boundary_values else 0.0,
        core_mean=float(np.mean(core_values)),
        boundary_count=len(boundary_values),
        core_count=len(core_values),
    )
    return records, summary
