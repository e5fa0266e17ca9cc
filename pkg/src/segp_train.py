"""Per-task training: new-class cross-entropy, anchor distillation (ACGD)
and text-geometry regularization (TSGR), optimized over the adapter
up-projections only.

Every loss is built as graph terms over the student's ``TowerGraph``. KL
terms keep the teacher/reference entropy outside the graph as a bound
constant, so the graph value is the full divergence while only the cross
term carries gradient.
"""

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .duotower import DualTowerModel, ModelLike, TowerGraph, as_model, clip_logits, encode_texts, softmax_rows
from .errors import EmptyDatasetError
from .gradcore import ComputationGraph, Evaluation, as_tensor, evaluate, gradient
from .seeding import SeedDomain, generator
from .validator import ConfigValidator

logger = logging.getLogger(__name__)

# Added to non-neighbor logits so log-softmax runs over each root's neighbors only.
NEIGHBOR_MASK = -1e9

LOSS_COLUMNS = ("step", "epoch", "loss_cls", "loss_acgd", "loss_tsgr", "loss_total", "lr")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    anchor_batch_size: int = 32
    learning_rate: float = 0.001
    cosine_decay: bool = True
    lambda_acgd: float = 5.0
    lambda_gr: float = 1.0
    tau_a: float = 20.0
    tau_t: float = 0.05
    k: int = 10
    temperature: float = 0.07

    def __post_init__(self):
        ConfigValidator.check("train", asdict(self))


@dataclass(frozen=True)
class TextSubgraph:
    """k-NN neighborhood of one new class under the reference text tower."""
    root: int
    neighbors: Tuple[int, ...]
    reference: np.ndarray
    temperature: float


@dataclass(frozen=True)
class LossBreakdown:
    cls: float
    acgd: float
    tsgr: float
    total: float


@dataclass(frozen=True)
class LossRecord:
    step: int
    epoch: int
    loss_cls: float
    loss_acgd: float
    loss_tsgr: float
    loss_total: float
    lr: float


def _plogp(p: np.ndarray) -> np.ndarray:
    return np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)


# Graph terms. Each builder adds its nodes to ``g`` and reads named constants
# produced by the matching ``*_bindings`` helper.

def _cls_term(g: ComputationGraph, tower: TowerGraph, temperature: float) -> int:
    logits = g.scale(tower.cosine_logits(g.constant("x"), g.constant("new_tokens")), 1.0 / temperature)
    return g.scale(g.dot(g.constant("cls_weights"), g.log_softmax(logits)), -1.0)


def _cls_bindings(model: ModelLike, x, labels, new_classes: Sequence[int]) -> Dict[str, np.ndarray]:
    x = np.atleast_2d(as_tensor(x))
    labels = np.asarray(labels, dtype=int)
    if len(labels) == 0:
        raise EmptyDatasetError("empty training batch")
    column = {int(c): i for i, c in enumerate(new_classes)}
    outside = sorted(set(int(y) for y in labels) - set(column))
    if outside:
        raise ValueError(f"labels {outside} are not in the current class set")
    weights = np.zeros((len(labels), len(new_classes)))
    weights[np.arange(len(labels)), [column[int(y)] for y in labels]] = 1.0 / len(labels)
    return {"x": x, "new_tokens": as_model(model).token_matrix(new_classes), "cls_weights": weights}


def _acgd_term(g: ComputationGraph, tower: TowerGraph, tau_a: float, temperature: float) -> int:
    logits = g.scale(tower.cosine_logits(g.constant("anchors"), g.constant("old_tokens")),
                     1.0 / (temperature * tau_a))
    cross = g.dot(g.constant("teacher_probs"), g.log_softmax(logits))
    return g.add(g.scale(cross, -tau_a ** 2), g.constant("acgd_offset"))


def _acgd_bindings(student: ModelLike, teacher: ModelLike, anchor_x, old_classes: Sequence[int],
                   tau_a: float, temperature: float) -> Dict[str, np.ndarray]:
    anchor_x = np.atleast_2d(as_tensor(anchor_x))
    n = len(anchor_x)
    probs = softmax_rows(clip_logits(teacher, anchor_x, old_classes), temperature * tau_a)
    neg_entropy = float(np.sum(_plogp(probs))) / n
    return {
        "anchors": anchor_x,
        "old_tokens": as_model(student).token_matrix(old_classes),
        "teacher_probs": probs / n,
        "acgd_offset": np.asarray(tau_a ** 2 * neg_entropy),
    }


def _tsgr_term(g: ComputationGraph, tower: TowerGraph, tau_t: float) -> int:
    roots = tower.text(g.constant("root_tokens"))
    neighbors = tower.text(g.constant("neighbor_tokens"))
    logits = g.add(g.scale(g.matmul(roots, neighbors, transpose_b=True), 1.0 / tau_t), g.constant("neighbor_mask"))
    cross = g.dot(g.constant("reference_probs"), g.log_softmax(logits))
    return g.add(g.scale(cross, -1.0), g.constant("tsgr_offset"))


def _tsgr_bindings(student: ModelLike, subgraphs: Sequence[TextSubgraph]) -> Dict[str, np.ndarray]:
    roots = [s.root for s in subgraphs]
    columns = sorted({c for s in subgraphs for c in s.neighbors})
    position = {c: i for i, c in enumerate(columns)}
    mask = np.full((len(roots), len(columns)), NEIGHBOR_MASK)
    reference = np.zeros((len(roots), len(columns)))
    offset = 0.0
    for i, sub in enumerate(subgraphs):
        cols = [position[c] for c in sub.neighbors]
        mask[i, cols] = 0.0
        reference[i, cols] = sub.reference / len(roots)
        offset += float(np.sum(_plogp(sub.reference))) / len(roots)
    model = as_model(student)
    return {
        "root_tokens": model.token_matrix(roots),
        "neighbor_tokens": model.token_matrix(columns),
        "neighbor_mask": mask,
        "reference_probs": reference,
        "tsgr_offset": np.asarray(offset),
    }


def _scalar(term_builder, model: ModelLike, bindings: Dict[str, np.ndarray], *args) -> float:
    g = ComputationGraph()
    tower = TowerGraph(g, model, prefix="student")
    root = term_builder(g, tower, *args)
    return float(evaluate(g, {**tower.bindings(), **bindings}, root).output)


def loss_cls(model: ModelLike, x, labels, new_classes: Sequence[int], temperature: float) -> float:
    """Mean cross-entropy with the softmax restricted to the current classes."""
    return _scalar(_cls_term, model, _cls_bindings(model, x, labels, new_classes), temperature)


def loss_acgd(student: ModelLike, teacher: ModelLike, anchor_x, old_classes: Sequence[int], tau_a: float,
              temperature: Optional[float] = None) -> float:
    """tau_A^2 * mean over anchors of KL(teacher || student) over the old classes.

    Both distributions soften the classifier logits ``cosine / temperature``
    by tau_A; ``temperature`` defaults to the student's.
    """
    if len(old_classes) == 0 or len(np.atleast_2d(anchor_x)) == 0:
        return 0.0
    if temperature is None:
        temperature = as_model(student).config.temperature
    bindings = _acgd_bindings(student, teacher, anchor_x, old_classes, tau_a, temperature)
    return _scalar(_acgd_term, student, bindings, tau_a, temperature)


def build_text_subgraphs(reference: ModelLike, new_classes: Sequence[int], seen_classes: Sequence[int],
                         k: int, tau_t: float) -> List[TextSubgraph]:
    """N_k(c) and phi_0(.|c) for each new class, frozen for the task."""
    seen = sorted(int(c) for c in seen_classes)
    if len(seen) < 2:
        return []
    embeddings = encode_texts(reference, seen)
    row = {c: i for i, c in enumerate(seen)}
    subgraphs = []
    for root in new_classes:
        root = int(root)
        others = np.array([c for c in seen if c != root])
        cosines = embeddings[[row[c] for c in others]] @ embeddings[row[root]]
        order = np.lexsort((others, -cosines))[: min(k, len(others))]
        neighbors = tuple(int(c) for c in others[order])
        subgraphs.append(TextSubgraph(root=root, neighbors=neighbors,
                                      reference=softmax_rows(cosines[order], tau_t), temperature=tau_t))
    return subgraphs


def loss_tsgr(student: ModelLike, subgraphs: Sequence[TextSubgraph]) -> float:
    """Mean over roots of KL(phi_0 || phi_S) on the frozen neighbor sets."""
    if not subgraphs:
        return 0.0
    return _scalar(_tsgr_term, student, _tsgr_bindings(student, subgraphs), subgraphs[0].temperature)


class TaskObjective:
    """Full training objective for one task, built once and re-bound every step.

    ACGD is active when enabled and both old classes and a teacher exist;
    TSGR is active when enabled and there is at least one subgraph.
    """

    def __init__(self, student: DualTowerModel, new_classes: Sequence[int], config: TrainConfig,
                 teacher: Optional[ModelLike] = None, old_classes: Sequence[int] = (),
                 subgraphs: Sequence[TextSubgraph] = (), use_acgd: bool = True, use_tsgr: bool = True):
        self.student = student
        self.new_classes = [int(c) for c in new_classes]
        self.old_classes = [int(c) for c in old_classes]
        self.teacher = teacher
        self.subgraphs = list(subgraphs)
        self.config = config
        self.acgd_active = bool(use_acgd and self.old_classes and teacher is not None)
        self.tsgr_active = bool(use_tsgr and self.subgraphs)

        g = ComputationGraph()
        self.graph = g
        self.tower = TowerGraph(g, student, prefix="student", trainable=student.trainable_names())
        self.cls = _cls_term(g, self.tower, config.temperature)
        total = self.cls
        self.acgd = self.tsgr = None
        if self.acgd_active:
            self.acgd = _acgd_term(g, self.tower, config.tau_a, config.temperature)
            total = g.add(total, g.scale(self.acgd, config.lambda_acgd))
        if self.tsgr_active:
            self.tsgr = _tsgr_term(g, self.tower, self.subgraphs[0].temperature)
            total = g.add(total, g.scale(self.tsgr, config.lambda_gr))
        self.total = total
        self._tsgr_bindings = _tsgr_bindings(student, self.subgraphs) if self.tsgr_active else {}

    def bindings(self, x, labels, anchor_x=None) -> Dict[str, np.ndarray]:
        bindings = {**self.tower.bindings(), **_cls_bindings(self.student, x, labels, self.new_classes)}
        if self.acgd_active:
            if anchor_x is None or len(anchor_x) == 0:
                raise EmptyDatasetError("ACGD is active but no anchors were given")
            bindings.update(_acgd_bindings(self.student, self.teacher, anchor_x, self.old_classes,
                                           self.config.tau_a, self.config.temperature))
        bindings.update(self._tsgr_bindings)
        return bindings

    def evaluate(self, x, labels, anchor_x=None) -> Evaluation:
        return evaluate(self.graph, self.bindings(x, labels, anchor_x), self.total)

    def breakdown(self, ev: Evaluation) -> LossBreakdown:
        def value(node):
            return 0.0 if node is None else float(ev.value_of(node))
        return LossBreakdown(cls=value(self.cls), acgd=value(self.acgd), tsgr=value(self.tsgr), total=value(self.total))


def total_loss(student: DualTowerModel, x, labels, new_classes: Sequence[int], config: TrainConfig,
               teacher: Optional[ModelLike] = None, anchor_x=None, old_classes: Sequence[int] = (),
               subgraphs: Sequence[TextSubgraph] = ()) -> LossBreakdown:
    """L_cls + lambda_ACGD * L_ACGD + lambda_GR * L_GR on one batch."""
    objective = TaskObjective(student, new_classes, config, teacher=teacher, old_classes=old_classes,
                              subgraphs=subgraphs)
    return objective.breakdown(objective.evaluate(x, labels, anchor_x))


def cosine_lr(base: float, step: int, total_steps: int, decay: bool = True) -> float:
    """Cosine decay from ``base`` toward zero over ``total_steps``."""
    if not decay or total_steps <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def train_task(model: DualTowerModel, x, labels, new_classes: Sequence[int], config: TrainConfig,
               anchors=None, teacher: Optional[ModelLike] = None, old_classes: Sequence[int] = (),
               subgraphs: Sequence[TextSubgraph] = (), seed: int = 0, task: int = 0,
               use_acgd: bool = True, use_tsgr: bool = True,
               progress: bool = False) -> Tuple[DualTowerModel, List[LossRecord]]:
    """SGD over the adapter up-projections with one anchor batch per step.

    ``anchors`` is an ``AnchorSet`` or an array of anchor inputs. Returns
    the (updated in place) model and the per-step loss history.
    """
    x = np.atleast_2d(as_tensor(x))
    labels = np.asarray(labels, dtype=int)
    if len(labels) == 0:
        raise EmptyDatasetError(f"task {task} has no training data")
    anchor_x = None
    if anchors is not None and len(anchors) > 0:
        anchor_x = anchors.x if hasattr(anchors, "anchors") else np.atleast_2d(as_tensor(anchors))

    objective = TaskObjective(model, new_classes, config, teacher=teacher, old_classes=old_classes,
                              subgraphs=subgraphs, use_acgd=use_acgd and anchor_x is not None,
                              use_tsgr=use_tsgr)
    batch_rng = generator(seed, SeedDomain.TRAIN_BATCHES, task)
    anchor_rng = generator(seed, SeedDomain.ANCHOR_BATCHES, task)
    batches_per_epoch = math.ceil(len(labels) / config.batch_size)
    total_steps = config.epochs * batches_per_epoch

    logger.info("Training task %d: %d samples, %d steps (ACGD %s, TSGR %s)", task, len(labels), total_steps,
                "on" if objective.acgd_active else "off", "on" if objective.tsgr_active else "off")
    history: List[LossRecord] = []
    step = 0
    for epoch in tqdm(range(config.epochs), desc=f"task {task}", disable=not progress, leave=False):
        order = batch_rng.permutation(len(labels))
        for start in range(0, len(labels), config.batch_size):
            batch = order[start:start + config.batch_size]
            anchor_batch = None
            if objective.acgd_active:
                replace = len(anchor_x) < config.anchor_batch_size
                picked = anchor_rng.choice(len(anchor_x), size=config.anchor_batch_size, replace=replace)
                anchor_batch = anchor_x[picked]
            lr = cosine_lr(config.learning_rate, step, total_steps, config.cosine_decay)

            ev = objective.evaluate(x[batch], labels[batch], anchor_batch)
            grads = gradient(ev)
            model.apply_gradients({name.split(":", 1)[1]: grad for name, grad in grads.items()}, lr)

            losses = objective.breakdown(ev)
            history.append(LossRecord(step, epoch, losses.cls, losses.acgd, losses.tsgr, losses.total, lr))
            step += 1
        logger.debug("task %d epoch %d loss %.4f", task, epoch, history[-1].loss_total)
    return model, history


def write_loss_history(history: Sequence[LossRecord], path: Union[str, Path], task: Optional[int] = None) -> Path:
    """CSV with one row per optimization step."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = (("task",) if task is not None else ()) + LOSS_COLUMNS
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for record in history:
            row = [getattr(record, c) for c in LOSS_COLUMNS]
            writer.writerow(([task] if task is not None else []) + row)
    return path
