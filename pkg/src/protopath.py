"""Prototype bank, anchor-driven drift transfer and dual-path inference."""

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .duotower import ModelLike, clip_logits, encode_raw
from .errors import (DegenerateTransferWarning, EmptyDatasetError, MissingPrototypeError,
                     ReliabilityFallbackWarning)
from .gradcore import NORM_FLOOR, as_tensor
from .validator import ConfigValidator

logger = logging.getLogger(__name__)


@dataclass
class InferenceConfig:
    beta: float = 0.5

    def __post_init__(self):
        ConfigValidator.check("inference", {"beta": self.beta})


class PrototypeBank(Mapping):
    """Unit raw-space prototype per seen class, tagged with the task it reflects."""

    def __init__(self, prototypes: Optional[Mapping[int, np.ndarray]] = None, task_version: int = -1):
        self._prototypes: Dict[int, np.ndarray] = {}
        self.task_version = task_version
        for class_id, mu in (prototypes or {}).items():
            self._prototypes[int(class_id)] = np.asarray(mu, dtype=np.float64).copy()

    def __getitem__(self, class_id: int) -> np.ndarray:
        try:
            return self._prototypes[int(class_id)]
        except KeyError:
            raise MissingPrototypeError(f"no prototype for class {class_id}") from None

    def __iter__(self) -> Iterator[int]:
        return iter(sorted(self._prototypes))

    def __len__(self) -> int:
        return len(self._prototypes)

    def __contains__(self, class_id) -> bool:
        return int(class_id) in self._prototypes

    @property
    def classes(self) -> List[int]:
        return sorted(self._prototypes)

    def matrix(self, class_ids: Sequence[int]) -> np.ndarray:
        return np.stack([self[c] for c in class_ids])

    def with_updates(self, updates: Mapping[int, np.ndarray], task_version: int) -> "PrototypeBank":
        merged = dict(self._prototypes)
        merged.update({int(c): mu for c, mu in updates.items()})
        return PrototypeBank(merged, task_version)

    def to_dict(self) -> Dict:
        return {
            "task_version": self.task_version,
            "prototypes": [{"class_id": c, "mu": [float(v) for v in self._prototypes[c]]} for c in self.classes],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "PrototypeBank":
        prototypes = {int(e["class_id"]): np.array(e["mu"], dtype=np.float64) for e in data["prototypes"]}
        return cls(prototypes, int(data["task_version"]))

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PrototypeBank":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Prototype file not found: {path}")
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class DriftEstimate:
    """Drift of one old class estimated from its anchors."""
    class_id: int
    displacement: np.ndarray = field(repr=False)
    gate: float
    scores: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    fallback: bool = False


@dataclass(frozen=True)
class TransferOutcome:
    bank: PrototypeBank
    degenerate: Tuple[int, ...] = ()


@dataclass(frozen=True)
class Prediction:
    sample_id: int
    true_class: int
    predicted_class: int
    fused_logits: np.ndarray = field(repr=False, compare=False)


def estimate_new_prototypes(model: ModelLike, x, labels, class_ids: Sequence[int]) -> Dict[int, np.ndarray]:
    """normalize(sum of r̄(x)) per class."""
    x = np.atleast_2d(as_tensor(x))
    labels = np.asarray(labels, dtype=int)
    raw = encode_raw(model, x) if len(x) else np.zeros((0, 0))
    prototypes = {}
    for class_id in class_ids:
        rows = raw[labels == int(class_id)]
        if len(rows) == 0:
            raise EmptyDatasetError(f"class {class_id} has no samples")
        total = rows.sum(axis=0)
        prototypes[int(class_id)] = total / max(np.linalg.norm(total), NORM_FLOOR)
    return prototypes


def anchor_displacements(teacher: ModelLike, model: ModelLike, anchor_x) -> np.ndarray:
    """d_t(x_adv) = r̄_t(x_adv) - r̄^T(x_adv), one row per anchor."""
    anchor_x = np.atleast_2d(as_tensor(anchor_x))
    return encode_raw(model, anchor_x) - encode_raw(teacher, anchor_x)


def _teacher_cosines(teacher: ModelLike, anchor_x, mu: np.ndarray) -> np.ndarray:
    return encode_raw(teacher, np.atleast_2d(as_tensor(anchor_x))) @ np.asarray(mu, dtype=np.float64)


def reliability_weights(teacher: ModelLike, anchor_x, mu) -> Tuple[np.ndarray, np.ndarray, bool]:
    """(a, w, fallback): teacher cosines to mu and their normalization.

    A non-positive score sum falls back to uniform weights.
    """
    scores = _teacher_cosines(teacher, anchor_x, mu)
    if len(scores) == 0:
        raise EmptyDatasetError("class has no anchors")
    total = float(np.sum(scores))
    if total <= 0.0:
        warnings.warn(f"reliability scores sum to {total:.4f}; using uniform weights",
                      ReliabilityFallbackWarning, stacklevel=2)
        logger.warning("Reliability fallback: score sum %.4f over %d anchors", total, len(scores))
        return scores, np.full(len(scores), 1.0 / len(scores)), True
    return scores, scores / total, False


def class_drift(displacements, weights) -> np.ndarray:
    """Weighted sum of anchor displacements."""
    displacements = np.atleast_2d(np.asarray(displacements, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64)
    if len(displacements) != len(weights):
        raise ValueError(f"{len(displacements)} displacements but {len(weights)} weights")
    return weights @ displacements


def proximity_gate(teacher: ModelLike, anchor_x, mu) -> float:
    """Unweighted mean teacher cosine between anchors and mu (not clipped)."""
    return float(np.mean(_teacher_cosines(teacher, anchor_x, mu)))


def estimate_drifts(teacher: ModelLike, model: ModelLike, anchor_groups: Mapping[int, np.ndarray],
                    bank: PrototypeBank) -> Dict[int, DriftEstimate]:
    """Drift estimate for every old class that has anchors."""
    estimates = {}
    for class_id in sorted(anchor_groups):
        anchor_x = np.atleast_2d(anchor_groups[class_id])
        mu = bank[class_id]
        scores, weights, fallback = reliability_weights(teacher, anchor_x, mu)
        displacement = class_drift(anchor_displacements(teacher, model, anchor_x), weights)
        estimates[class_id] = DriftEstimate(class_id=class_id, displacement=displacement,
                                            gate=float(np.mean(scores)), scores=scores,
                                            weights=weights, fallback=fallback)
    return estimates


def transfer_prototypes(bank: PrototypeBank, drifts: Mapping[int, np.ndarray], gates: Mapping[int, float],
                        new_prototypes: Optional[Mapping[int, np.ndarray]] = None,
                        task_version: Optional[int] = None) -> TransferOutcome:
    """mu_c <- normalize(mu_c + g_c * Delta_c), then merge the new classes.

    A degenerate update keeps the old prototype and is reported.
    """
    updates = {}
    degenerate = []
    for class_id, delta in drifts.items():
        step = gates[class_id] * np.asarray(delta, dtype=np.float64)
        if not np.any(step):
            continue
        moved = bank[class_id] + step
        norm = np.linalg.norm(moved)
        if norm < NORM_FLOOR:
            warnings.warn(f"transfer of class {class_id} is degenerate; keeping the old prototype",
                          DegenerateTransferWarning, stacklevel=2)
            degenerate.append(int(class_id))
            continue
        updates[int(class_id)] = moved / norm
    updates.update({int(c): mu for c, mu in (new_prototypes or {}).items()})
    version = bank.task_version + 1 if task_version is None else task_version
    return TransferOutcome(bank=bank.with_updates(updates, version), degenerate=tuple(degenerate))


def visual_logits(model: ModelLike, x, bank: PrototypeBank, class_set: Sequence[int]) -> np.ndarray:
    """s^v(x, c) = r̄(x) · mu_c."""
    batch = np.atleast_2d(as_tensor(x))
    return encode_raw(model, batch) @ bank.matrix(class_set).T


def fuse_logits(clip: np.ndarray, visual: np.ndarray, beta: float) -> np.ndarray:
    return np.asarray(clip, dtype=np.float64) + beta * np.asarray(visual, dtype=np.float64)


def argmax_smallest(fused: np.ndarray, class_set: Sequence[int]) -> np.ndarray:
    """Row-wise argmax mapped to class ids; ties go to the smallest class id."""
    fused = np.atleast_2d(fused)
    classes = np.asarray(class_set)
    order = np.argsort(classes, kind="stable")
    best = np.argmax(fused[:, order], axis=1)
    return classes[order][best]


def dual_path_predict(model: ModelLike, bank: Optional[PrototypeBank], x, class_set: Sequence[int],
                      beta: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """(fused logits, predicted class ids) for a batch; beta = 0 is CLIP-only."""
    class_set = [int(c) for c in class_set]
    batch = np.atleast_2d(as_tensor(x))
    fused = clip_logits(model, batch, class_set)
    if beta != 0.0:
        if bank is None:
            raise MissingPrototypeError("visual branch needs a prototype bank")
        fused = fuse_logits(fused, visual_logits(model, batch, bank, class_set), beta)
    return fused, argmax_smallest(fused, class_set)


def visual_only_predict(model: ModelLike, bank: PrototypeBank, x,
                        class_set: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Prototype-branch logits and predictions with the CLIP path left out."""
    class_set = [int(c) for c in class_set]
    logits = visual_logits(model, x, bank, class_set)
    return logits, argmax_smallest(logits, class_set)


def prediction_records(model: ModelLike, bank: Optional[PrototypeBank], x, labels, class_set: Sequence[int],
                       beta: float = 0.5, sample_ids: Optional[Sequence[int]] = None) -> List[Prediction]:
    fused, predicted = dual_path_predict(model, bank, x, class_set, beta)
    ids = range(len(predicted)) if sample_ids is None else sample_ids
    return [Prediction(int(i), int(y), int(p), fused[row])
            for row, (i, y, p) in enumerate(zip(ids, labels, predicted))]
