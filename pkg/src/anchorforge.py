"""Adversarial anchor construction with dual-targeted PGD.

Before a task trains, each old class c gets the K_seed new-task samples the
frozen teacher already finds most similar to c's text embedding. Each seed
is pushed, inside an L-inf ball of radius epsilon, toward class c:

    L'(x + d, c) = -log softmax_{C_old}(v̄(x+d)·u_j / tau)[c]
                   + lambda_p * (1 - r̄(x+d)·mu_c)

with sign-gradient steps followed by clamping. All anchors of a task are
optimized together in one graph; the objective is a sum of per-row terms,
so every row's gradient is exactly its own anchor's gradient.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import trange

from .duotower import ModelLike, TowerGraph, as_model, encode_raw, encode_texts, encode_visual, softmax_rows
from .errors import EmptyDatasetError, MissingPrototypeError
from .gradcore import ComputationGraph, Evaluation, as_tensor, evaluate, gradient
from .validator import ConfigValidator

logger = logging.getLogger(__name__)


@dataclass
class DpgdConfig:
    epsilon: float = 4.0 / 255.0
    step_size: float = 1.5e-3
    iterations: int = 10
    lambda_p: float = 0.5
    seeds_per_class: int = 5
    temperature: float = 0.07

    def __post_init__(self):
        ConfigValidator.check("dpgd", asdict(self))


class AnchorSource(Enum):
    """Which samples carry the distillation signal."""
    ADVERSARIAL = "adversarial"
    SEED = "seed"
    NEW = "new"


@dataclass(frozen=True)
class Seed:
    index: int
    x: np.ndarray = field(repr=False, compare=False)
    true_class: int
    target_class: int
    score: float


@dataclass(frozen=True)
class Anchor:
    x_adv: np.ndarray = field(repr=False, compare=False)
    target_class: int
    delta: np.ndarray = field(repr=False, compare=False)
    seed: Seed


@dataclass(frozen=True)
class TrajectoryPoint:
    """Mean anchor statistics under the teacher after ``iteration`` steps."""
    iteration: int
    text_cosine: float
    prototype_cosine: float
    target_probability: float


@dataclass
class AnchorSet:
    anchors: List[Anchor] = field(default_factory=list)
    trajectory: List[TrajectoryPoint] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.anchors)

    def __iter__(self):
        return iter(self.anchors)

    @property
    def x(self) -> np.ndarray:
        return np.stack([a.x_adv for a in self.anchors])

    @property
    def seeds_x(self) -> np.ndarray:
        return np.stack([a.seed.x for a in self.anchors])

    @property
    def targets(self) -> np.ndarray:
        return np.array([a.target_class for a in self.anchors], dtype=int)

    def by_class(self) -> Dict[int, List[Anchor]]:
        groups: Dict[int, List[Anchor]] = {}
        for anchor in self.anchors:
            groups.setdefault(anchor.target_class, []).append(anchor)
        return groups


def project_linf(delta, epsilon: float) -> np.ndarray:
    """Clamp every component of delta to [-epsilon, epsilon]."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return np.clip(as_tensor(delta), -epsilon, epsilon)


def _prototype(prototypes: Mapping[int, np.ndarray], class_id: int) -> np.ndarray:
    if class_id not in prototypes:
        raise MissingPrototypeError(f"no prototype for class {class_id}")
    return np.asarray(prototypes[class_id], dtype=np.float64)


class DualObjective:
    """Sum over rows of L'_adv, differentiable in the perturbation.

    Built once per (teacher, old class set); the number of rows is only seen
    through the bindings.
    """

    def __init__(self, teacher: ModelLike, old_classes: Sequence[int], lambda_p: float, temperature: float):
        self.teacher = as_model(teacher)
        self.old_classes = [int(c) for c in old_classes]
        self.column = {c: i for i, c in enumerate(self.old_classes)}
        self.lambda_p = lambda_p

        g = ComputationGraph()
        self.graph = g
        self.tower = TowerGraph(g, self.teacher, prefix="teacher")
        perturbed = g.add(g.constant("x"), g.parameter("delta"))
        self.raw, self.joint = self.tower.features(perturbed)
        self.text = self.tower.text(g.constant("old_tokens"))
        self.logits = g.scale(g.matmul(self.joint, self.text, transpose_b=True), 1.0 / temperature)
        self.adv = g.scale(g.dot(g.constant("targets"), g.log_softmax(self.logits)), -1.0)
        prototype_cosines = g.dot(self.raw, g.constant("prototypes"))
        self.visual = g.add(g.constant("rows"), g.scale(prototype_cosines, -1.0))
        self.total = g.add(self.adv, g.scale(self.visual, lambda_p))
        self._base = {**self.tower.bindings(), "old_tokens": self.teacher.token_matrix(self.old_classes)}

    def bindings(self, x: np.ndarray, delta: np.ndarray, target_classes: Sequence[int],
                 prototypes: Mapping[int, np.ndarray]) -> Dict[str, np.ndarray]:
        n = len(target_classes)
        targets = np.zeros((n, len(self.old_classes)))
        targets[np.arange(n), [self.column[int(c)] for c in target_classes]] = 1.0
        proto_rows = np.stack([_prototype(prototypes, int(c)) for c in target_classes])
        return {**self._base, "x": x, "delta": delta, "targets": targets,
                "prototypes": proto_rows, "rows": np.asarray(float(n))}

    def evaluate(self, x, delta, target_classes, prototypes) -> Evaluation:
        return evaluate(self.graph, self.bindings(x, delta, target_classes, prototypes), self.total)


def seed_scores(teacher: ModelLike, x, old_classes: Sequence[int]) -> np.ndarray:
    """Q(x, c) for every row of x and every old class (columns follow old_classes)."""
    joint = encode_visual(teacher, np.atleast_2d(as_tensor(x)))
    return joint @ encode_texts(teacher, old_classes).T


def seed_score(teacher: ModelLike, x, class_id: int) -> float:
    """Teacher cosine between v̄(x) and u_c."""
    return float(seed_scores(teacher, x, [class_id])[0, 0])


def select_seeds(teacher: ModelLike, x, labels: Sequence[int], old_classes: Sequence[int],
                 seeds_per_class: int) -> Dict[int, List[Seed]]:
    """Top-K_seed samples per old class by seed score, ties to the smaller index."""
    old_classes = sorted(int(c) for c in old_classes)
    if not old_classes:
        return {}
    x = np.atleast_2d(as_tensor(x))
    if len(x) < seeds_per_class:
        raise EmptyDatasetError(f"need at least {seeds_per_class} samples, got {len(x)}")
    scores = seed_scores(teacher, x, old_classes)
    indices = np.arange(len(x))
    seeds = {}
    for col, class_id in enumerate(old_classes):
        order = np.lexsort((indices, -scores[:, col]))[:seeds_per_class]
        seeds[class_id] = [
            Seed(index=int(i), x=x[i].copy(), true_class=int(labels[i]), target_class=class_id,
                 score=float(scores[i, col]))
            for i in order
        ]
    return seeds


def _single(teacher, x_pert, class_id, old_classes, prototypes, lambda_p, temperature) -> Tuple[float, float]:
    objective = DualObjective(teacher, sorted(old_classes), lambda_p, temperature)
    x = np.atleast_2d(as_tensor(x_pert))
    ev = objective.evaluate(x, np.zeros_like(x), [class_id], prototypes)
    return float(ev.value_of(objective.adv)), float(ev.value_of(objective.visual))


def adv_loss(teacher: ModelLike, x_pert, class_id: int, old_classes: Sequence[int], temperature: float) -> float:
    """-log of the teacher's softmax over the old classes at class_id."""
    if class_id not in old_classes:
        raise ValueError(f"class {class_id} is not an old class")
    cols = sorted(int(c) for c in old_classes)
    logits = seed_scores(teacher, x_pert, cols)[0] / temperature
    shifted = logits - np.max(logits)
    log_probs = shifted - np.log(np.sum(np.exp(shifted)))
    return float(-log_probs[cols.index(int(class_id))])


def visual_anchor_loss(teacher: ModelLike, x_pert, class_id: int, prototypes: Mapping[int, np.ndarray]) -> float:
    """1 - r̄^T(x)·mu_c under the teacher."""
    mu = _prototype(prototypes, int(class_id))
    return float(1.0 - encode_raw(teacher, as_tensor(x_pert)) @ mu)


def dual_objective(teacher: ModelLike, x_pert, class_id: int, old_classes: Sequence[int],
                   prototypes: Mapping[int, np.ndarray], config: DpgdConfig) -> float:
    """L_adv + lambda_p * L_v-adv, evaluated through the differentiable graph."""
    adv, visual = _single(teacher, x_pert, class_id, old_classes, prototypes, config.lambda_p, config.temperature)
    return adv + config.lambda_p * visual


def _sign_step(objective: DualObjective, x: np.ndarray, delta: np.ndarray, targets: Sequence[int],
               prototypes: Mapping[int, np.ndarray], config: DpgdConfig) -> Tuple[np.ndarray, Evaluation]:
    ev = objective.evaluate(x, delta, targets, prototypes)
    grad = gradient(ev)["delta"]
    return project_linf(delta - config.step_size * np.sign(grad), config.epsilon), ev


def pgd_step(teacher: ModelLike, seed: Seed, delta, config: DpgdConfig, old_classes: Sequence[int],
             prototypes: Mapping[int, np.ndarray]) -> np.ndarray:
    """One projected sign-gradient step on a single seed's perturbation."""
    objective = DualObjective(teacher, sorted(old_classes), config.lambda_p, config.temperature)
    x = seed.x[None, :]
    new_delta, _ = _sign_step(objective, x, np.atleast_2d(as_tensor(delta)), [seed.target_class], prototypes, config)
    return new_delta[0]


def _trajectory_point(objective: DualObjective, ev: Evaluation, targets: Sequence[int],
                      prototype_rows: np.ndarray, iteration: int) -> TrajectoryPoint:
    cols = [objective.column[int(c)] for c in targets]
    rows = np.arange(len(cols))
    text_cos = (ev.value_of(objective.joint) @ ev.value_of(objective.text).T)[rows, cols]
    proto_cos = np.sum(ev.value_of(objective.raw) * prototype_rows, axis=1)
    probs = softmax_rows(ev.value_of(objective.logits), 1.0)[rows, cols]
    return TrajectoryPoint(iteration, float(np.mean(text_cos)), float(np.mean(proto_cos)), float(np.mean(probs)))


def build_anchor_set(teacher: ModelLike, x, labels: Sequence[int], old_classes: Sequence[int],
                     prototypes: Mapping[int, np.ndarray], config: Optional[DpgdConfig] = None,
                     source: AnchorSource = AnchorSource.ADVERSARIAL, progress: bool = False) -> AnchorSet:
    """Build A_t: K_seed anchors per old class after K_adv steps from delta = 0."""
    config = config or DpgdConfig()
    old_classes = sorted(int(c) for c in old_classes)
    if not old_classes:
        return AnchorSet()
    x = np.atleast_2d(as_tensor(x))
    labels = np.asarray(labels, dtype=int)

    if source is AnchorSource.NEW:
        scores = seed_scores(teacher, x, old_classes)
        best = np.argmax(scores, axis=1)
        anchors = []
        for i in range(len(x)):
            target = old_classes[int(best[i])]
            seed = Seed(index=i, x=x[i].copy(), true_class=int(labels[i]), target_class=target,
                        score=float(scores[i, best[i]]))
            anchors.append(Anchor(x_adv=x[i].copy(), target_class=target, delta=np.zeros_like(x[i]), seed=seed))
        return AnchorSet(anchors=anchors)

    selected = select_seeds(teacher, x, labels, old_classes, config.seeds_per_class)
    seeds = [s for c in old_classes for s in selected[c]]
    iterations = 0 if source is AnchorSource.SEED else config.iterations

    seed_x = np.stack([s.x for s in seeds])
    targets = [s.target_class for s in seeds]
    prototype_rows = np.stack([_prototype(prototypes, c) for c in targets])
    objective = DualObjective(teacher, old_classes, config.lambda_p, config.temperature)
    delta = np.zeros_like(seed_x)
    trajectory = []
    for k in trange(iterations + 1, desc="dpgd", disable=not progress, leave=False):
        if k < iterations:
            new_delta, ev = _sign_step(objective, seed_x, delta, targets, prototypes, config)
        else:
            ev = objective.evaluate(seed_x, delta, targets, prototypes)
        trajectory.append(_trajectory_point(objective, ev, targets, prototype_rows, k))
        if k < iterations:
            delta = new_delta

    anchors = [
        Anchor(x_adv=seed_x[i] + delta[i], target_class=targets[i], delta=delta[i].copy(), seed=seeds[i])
        for i in range(len(seeds))
    ]
    logger.debug("Built %d anchors for %d old classes; target probability %.3f -> %.3f",
                 len(anchors), len(old_classes), trajectory[0].target_probability,
                 trajectory[-1].target_probability)
    return AnchorSet(anchors=anchors, trajectory=trajectory)


def target_probabilities(teacher: ModelLike, x, targets: Sequence[int], old_classes: Sequence[int],
                         temperature: float) -> np.ndarray:
    """Teacher probability of each row's target class among the old classes."""
    cols = sorted(int(c) for c in old_classes)
    probs = softmax_rows(seed_scores(teacher, x, cols), temperature)
    return probs[np.arange(len(targets)), [cols.index(int(c)) for c in targets]]


@dataclass(frozen=True)
class AnchorStatistics:
    count: int
    seed_target_probability: float
    anchor_target_probability: float
    improved_fraction: float


def anchor_statistics(teacher: ModelLike, anchor_set: AnchorSet, old_classes: Sequence[int],
                      temperature: float) -> AnchorStatistics:
    if len(anchor_set) == 0:
        return AnchorStatistics(0, 0.0, 0.0, 0.0)
    before = target_probabilities(teacher, anchor_set.seeds_x, anchor_set.targets, old_classes, temperature)
    after = target_probabilities(teacher, anchor_set.x, anchor_set.targets, old_classes, temperature)
    return AnchorStatistics(
        count=len(anchor_set),
        seed_target_probability=float(np.mean(before)),
        anchor_target_probability=float(np.mean(after)),
        improved_fraction=float(np.mean(after > before)),
    )


# Serialization

def anchor_set_to_dict(anchor_set: AnchorSet) -> Dict:
    return {
        "anchors": [
            {
                "target_class": a.target_class,
                "seed_index": a.seed.index,
                "delta": [float(v) for v in a.delta],
                "x_adv": [float(v) for v in a.x_adv],
                "true_class": a.seed.true_class,
                "seed_score": a.seed.score,
            }
            for a in anchor_set.anchors
        ],
        "trajectory": [asdict(p) for p in anchor_set.trajectory],
    }


def anchor_set_from_dict(data: Dict) -> AnchorSet:
    anchors = []
    for entry in data["anchors"]:
        x_adv = np.array(entry["x_adv"], dtype=np.float64)
        delta = np.array(entry["delta"], dtype=np.float64)
        seed = Seed(index=int(entry["seed_index"]), x=x_adv - delta, true_class=int(entry.get("true_class", -1)),
                    target_class=int(entry["target_class"]), score=float(entry.get("seed_score", 0.0)))
        anchors.append(Anchor(x_adv=x_adv, target_class=seed.target_class, delta=delta, seed=seed))
    trajectory = [TrajectoryPoint(**p) for p in data.get("trajectory", [])]
    return AnchorSet(anchors=anchors, trajectory=trajectory)


def save_anchor_set(anchor_set: AnchorSet, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(anchor_set_to_dict(anchor_set), f)
    return path


def load_anchor_set(path: Union[str, Path]) -> AnchorSet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Anchor file not found: {path}")
    with open(path) as f:
        return anchor_set_from_dict(json.load(f))
