"""Synthetic class-incremental stream and the end-to-end experiment runner.

Each stage t: snapshot the teacher, build anchors against the old classes,
build text subgraphs under the adapter-reset reference, train, estimate and
transfer prototypes, then evaluate every seen task.
"""

import hashlib
import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .anchorforge import (AnchorSet, AnchorSource, AnchorStatistics, DpgdConfig, TrajectoryPoint,
                          anchor_statistics, build_anchor_set, save_anchor_set)
from .clmetrics import AccuracyMatrix, DriftRecord, DriftSummary, drift_probe, summarize
from .duotower import (DualTowerModel, ModelConfig, PretrainConfig, as_model, load_model, pretrain, save_model,
                       take_snapshot, text_reference)
from .errors import ConfigError, ExemplarAccessError, StageFailure
from .protopath import (InferenceConfig, Prediction, PrototypeBank, dual_path_predict,
                        estimate_drifts, estimate_new_prototypes, prediction_records,
                        transfer_prototypes, visual_only_predict)
from .segp_train import LossRecord, TrainConfig, build_text_subgraphs, train_task
from .seeding import SeedDomain, generator
from .validator import ConfigValidator

logger = logging.getLogger(__name__)

# Pretraining classes live apart from the stream's class ids.
PRETRAIN_CLASS_OFFSET = 1000


@dataclass
class StreamSpec:
    num_tasks: int = 5
    classes_per_task: int = 4
    train_per_class: int = 100
    test_per_class: int = 50
    input_dim: int = 32
    cluster_spread: float = 0.15
    overlap: float = 0.5
    pretrain_classes: int = 8
    pretrain_per_class: int = 50
    seed: int = 0

    def __post_init__(self):
        ConfigValidator.check("stream", asdict(self))

    def task_classes(self, task: int) -> List[int]:
        start = task * self.classes_per_task
        return list(range(start, start + self.classes_per_task))


@dataclass
class MethodFlags:
    acgd: bool = True
    tsgr: bool = True
    prototype_transfer: bool = True
    visual_branch: bool = True
    anchor_source: str = AnchorSource.ADVERSARIAL.value

    def __post_init__(self):
        ConfigValidator.check("flags", asdict(self))

    @property
    def label(self) -> str:
        parts = [name for name, on in (("ACGD", self.acgd), ("TSGR", self.tsgr),
                                       ("PT", self.prototype_transfer), ("V", self.visual_branch)) if on]
        label = "+".join(parts) if parts else "baseline"
        if self.anchor_source != AnchorSource.ADVERSARIAL.value:
            label += f"[{self.anchor_source}]"
        return label


@dataclass
class RunOptions:
    seed: int = 0
    output_dir: str = "runs"
    label: str = "segp"
    workers: int = 1
    drift_probe: bool = True
    verbose: bool = False
    preset: str = "paper"
    pretrained_path: str = ""

    def __post_init__(self):
        ConfigValidator.check("run", asdict(self))


@dataclass
class ExperimentSettings:
    """Every configuration section a run needs."""
    stream: StreamSpec = field(default_factory=StreamSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dpgd: DpgdConfig = field(default_factory=DpgdConfig)
    flags: MethodFlags = field(default_factory=MethodFlags)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    run: RunOptions = field(default_factory=RunOptions)

    def as_dict(self) -> Dict:
        return {name: asdict(getattr(self, name)) for name in
                ("stream", "model", "pretrain", "train", "dpgd", "flags", "inference", "run")}

    def config_hash(self) -> str:
        data = self.as_dict()
        # Output location and console settings do not change results.
        data["run"] = {"seed": self.run.seed, "pretrained_path": self.run.pretrained_path}
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]


# Stream

@dataclass(frozen=True)
class Split:
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class TaskData:
    task: int
    classes: Tuple[int, ...]
    train: Split
    test: Split


@dataclass
class SyntheticStream:
    spec: StreamSpec
    tasks: List[TaskData]
    pretrain: Split
    directions: Dict[int, np.ndarray] = field(repr=False)

    def classes_through(self, task: int) -> List[int]:
        return [c for t in range(task + 1) for c in self.tasks[t].classes]

    def stage_view(self, stage: int) -> "StageView":
        return StageView(self, stage)


class StageView:
    """What stage ``stage`` may see: its own train split and the test splits
    of tasks up to and including the current one. Every access is logged."""

    def __init__(self, stream: SyntheticStream, stage: int):
        self._stream = stream
        self.stage = stage
        self.train_accesses: List[int] = []
        self.test_accesses: List[int] = []

    def train(self, task: Optional[int] = None) -> Split:
        task = self.stage if task is None else task
        self.train_accesses.append(task)
        if task != self.stage:
            raise ExemplarAccessError(f"stage {self.stage} asked for the train split of task {task}")
        return self._stream.tasks[task].train

    def test(self, task: int) -> Split:
        self.test_accesses.append(task)
        if task > self.stage:
            raise ExemplarAccessError(f"stage {self.stage} asked for the test split of future task {task}")
        return self._stream.tasks[task].test

    def classes(self, task: int) -> List[int]:
        return list(self._stream.tasks[task].classes)

    @property
    def current_classes(self) -> List[int]:
        return self.classes(self.stage)

    @property
    def old_classes(self) -> List[int]:
        return [c for t in range(self.stage) for c in self._stream.tasks[t].classes]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _sample_cluster(rng: np.random.Generator, direction: np.ndarray, count: int, spread: float) -> np.ndarray:
    center = 0.5 * (1.0 + direction)
    return np.clip(center + spread * rng.normal(size=(count, len(direction))), 0.0, 1.0)


def _split(rng, directions: Dict[int, np.ndarray], classes: Sequence[int], per_class: int,
           spread: float) -> Split:
    x = np.concatenate([_sample_cluster(rng, directions[c], per_class, spread) for c in classes])
    y = np.repeat(np.asarray(classes, dtype=int), per_class)
    return Split(x=x, y=y)


def generate_stream(spec: StreamSpec) -> SyntheticStream:
    """Gaussian class clusters in [0, 1]^input_dim, disjoint classes per task.

    A new class direction mixes an independent draw with a random earlier
    class's direction: normalize((1 - overlap) * d + overlap * d_old).
    """
    dir_rng = generator(spec.seed, SeedDomain.STREAM_DIRECTIONS)
    directions: Dict[int, np.ndarray] = {}
    tasks = []
    for t in range(spec.num_tasks):
        classes = spec.task_classes(t)
        previous = sorted(directions)
        for c in classes:
            independent = _unit(dir_rng.normal(size=spec.input_dim))
            if previous:
                old = directions[previous[int(dir_rng.integers(len(previous)))]]
                mixed = (1.0 - spec.overlap) * independent + spec.overlap * old
                directions[c] = _unit(mixed) if np.linalg.norm(mixed) > 0 else independent
            else:
                directions[c] = independent
        sample_rng = generator(spec.seed, SeedDomain.STREAM_SAMPLES, t)
        train = _split(sample_rng, directions, classes, spec.train_per_class, spec.cluster_spread)
        test = _split(sample_rng, directions, classes, spec.test_per_class, spec.cluster_spread)
        tasks.append(TaskData(task=t, classes=tuple(classes), train=train, test=test))

    pre_rng = generator(spec.seed, SeedDomain.PRETRAIN_DATA)
    pre_classes = [PRETRAIN_CLASS_OFFSET + i for i in range(spec.pretrain_classes)]
    pre_dirs = {c: _unit(pre_rng.normal(size=spec.input_dim)) for c in pre_classes}
    pretrain_split = _split(pre_rng, pre_dirs, pre_classes, spec.pretrain_per_class, spec.cluster_spread)
    return SyntheticStream(spec=spec, tasks=tasks, pretrain=pretrain_split, directions=directions)


# Runner

@dataclass
class RunRecord:
    label: str
    flags: MethodFlags
    config_hash: str
    accuracy: AccuracyMatrix
    metrics: Dict[str, Optional[float]] = field(default_factory=dict)
    loss_histories: Dict[int, List[LossRecord]] = field(default_factory=dict)
    anchor_stats: Dict[int, AnchorStatistics] = field(default_factory=dict)
    trajectories: Dict[int, List[TrajectoryPoint]] = field(default_factory=dict)
    drift: Dict[int, Tuple[List[DriftRecord], DriftSummary]] = field(default_factory=dict)
    predictions: List[Prediction] = field(default_factory=list)
    transfer_fallbacks: Dict[int, List[int]] = field(default_factory=dict)
    wall_clock: float = 0.0
    artifacts: Dict[str, str] = field(default_factory=dict)
    failed_stage: Optional[int] = None
    bank: Optional[PrototypeBank] = None

    @property
    def stages_completed(self) -> int:
        return self.accuracy.completed


# Values a preset lays over the train section. Keys set in the config file or
# by an override keep their configured value.
TRAIN_PRESETS: Dict[str, Dict[str, object]] = {
    "paper": {},
    "bench": {"epochs": 5, "batch_size": 64, "learning_rate": 0.05},
}


def bench_train_config(**overrides) -> TrainConfig:
    """Training preset for the trend experiments."""
    values = dict(TRAIN_PRESETS["bench"])
    values.update(overrides)
    return TrainConfig(**values)


def pretrain_towers(settings: ExperimentSettings, stream: Optional[SyntheticStream] = None) -> DualTowerModel:
    """Initialize and pretrain the base towers on the stream's pretrain split."""
    if settings.model.input_dim != settings.stream.input_dim:
        raise ConfigError([f"Invalid model.input_dim: must equal stream.input_dim ({settings.stream.input_dim})"])
    stream = stream or generate_stream(settings.stream)
    model = DualTowerModel.initialize(settings.model, seed=settings.run.seed)
    pretrain(model, stream.pretrain.x, stream.pretrain.y, settings.pretrain, seed=settings.run.seed)
    return model


def pretrained_model(settings: ExperimentSettings, stream: Optional[SyntheticStream] = None) -> DualTowerModel:
    """The towers saved at ``run.pretrained_path``, or freshly pretrained ones."""
    path = settings.run.pretrained_path
    if not path:
        return pretrain_towers(settings, stream)
    model = as_model(load_model(path)).copy()
    if model.config.input_dim != settings.stream.input_dim:
        raise ConfigError([f"Invalid run.pretrained_path: {path} takes inputs of dim {model.config.input_dim}, "
                           f"the stream has {settings.stream.input_dim}"])
    logger.info("Loaded pretrained towers from %s", path)
    return model


def _accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predicted == labels)) if len(labels) else 0.0


def _evaluate_stage(record: RunRecord, view: StageView, model: DualTowerModel, bank: PrototypeBank,
                    seen: List[int], beta: float):
    stage = view.stage
    union_pred, union_clip, union_visual, union_labels = [], [], [], []
    for task in range(stage + 1):
        test = view.test(task)
        _, predicted = dual_path_predict(model, bank, test.x, seen, beta)
        _, clip_only = dual_path_predict(model, None, test.x, seen, 0.0)
        _, visual_only = visual_only_predict(model, bank, test.x, seen)
        record.accuracy.record(stage, task, _accuracy(predicted, test.y))
        record.accuracy.clip_per_task[stage, task] = _accuracy(clip_only, test.y)
        record.accuracy.visual_per_task[stage, task] = _accuracy(visual_only, test.y)
        union_pred.append(predicted)
        union_clip.append(clip_only)
        union_visual.append(visual_only)
        union_labels.append(test.y)
    labels = np.concatenate(union_labels)
    record.accuracy.record_union(stage, _accuracy(np.concatenate(union_pred), labels),
                                 _accuracy(np.concatenate(union_clip), labels),
                                 _accuracy(np.concatenate(union_visual), labels))


def _save_stage(record: RunRecord, artifact_dir: Path, stage: int, anchors: AnchorSet, bank: PrototypeBank,
                model: DualTowerModel):
    """Anchors, prototype bank and adapted model as they stand after ``stage``."""
    paths = {
        f"anchors_stage{stage}": save_anchor_set(anchors, artifact_dir / f"anchors_stage{stage}.json"),
        f"bank_stage{stage}": bank.save(artifact_dir / f"bank_stage{stage}.json"),
        f"model_stage{stage}": save_model(model, artifact_dir / f"model_stage{stage}.json"),
    }
    record.artifacts.update({name: str(path) for name, path in paths.items()})


def _run_stage(record: RunRecord, stream: SyntheticStream, stage: int, model: DualTowerModel,
               bank: PrototypeBank, settings: ExperimentSettings, progress: bool,
               artifact_dir: Optional[Path] = None) -> PrototypeBank:
    flags, seed = settings.flags, settings.run.seed
    view = stream.stage_view(stage)
    new_classes, old_classes = view.current_classes, view.old_classes
    seen = old_classes + new_classes
    model.register_classes(new_classes)
    teacher = take_snapshot(model)
    reference = text_reference(model)

    if stage > 0:
        test = view.test(stage)
        _, predicted = dual_path_predict(model, None, test.x, seen, 0.0)
        record.accuracy.record(stage - 1, stage, _accuracy(predicted, test.y))

    train = view.train()
    anchors = AnchorSet()
    if old_classes and (flags.acgd or flags.prototype_transfer):
        anchors = build_anchor_set(teacher, train.x, train.y, old_classes, bank, settings.dpgd,
                                   source=AnchorSource(flags.anchor_source), progress=progress)
        record.anchor_stats[stage] = anchor_statistics(teacher, anchors, old_classes, settings.dpgd.temperature)
        record.trajectories[stage] = anchors.trajectory
    subgraphs = build_text_subgraphs(reference, new_classes, seen, settings.train.k, settings.train.tau_t) \
        if flags.tsgr else []

    _, history = train_task(model, train.x, train.y, new_classes, settings.train, anchors=anchors,
                            teacher=teacher, old_classes=old_classes, subgraphs=subgraphs,
                            seed=seed, task=stage, use_acgd=flags.acgd, use_tsgr=flags.tsgr,
                            progress=progress)
    record.loss_histories[stage] = history

    new_prototypes = estimate_new_prototypes(model, train.x, train.y, new_classes)
    if flags.prototype_transfer and len(anchors) > 0:
        groups = {c: np.stack([a.x_adv for a in group]) for c, group in anchors.by_class().items()}
        drifts = estimate_drifts(teacher, model, groups, bank)
        outcome = transfer_prototypes(bank, {c: d.displacement for c, d in drifts.items()},
                                      {c: d.gate for c, d in drifts.items()}, new_prototypes, stage)
        record.transfer_fallbacks[stage] = sorted(
            [c for c, d in drifts.items() if d.fallback] + list(outcome.degenerate))
        bank = outcome.bank
    else:
        bank = bank.with_updates(new_prototypes, stage)

    beta = settings.inference.beta if flags.visual_branch else 0.0
    _evaluate_stage(record, view, model, bank, seen, beta)

    if settings.run.drift_probe and old_classes:
        old_tests = [view.test(t) for t in range(stage)]
        x_old = np.concatenate([s.x for s in old_tests])
        y_old = np.concatenate([s.y for s in old_tests])
        record.drift[stage] = drift_probe(teacher, model, x_old, y_old, seen, model.config.temperature)

    if artifact_dir is not None:
        _save_stage(record, artifact_dir, stage, anchors, bank, model)

    logger.info("[%s] stage %d: union accuracy %.3f (CLIP only %.3f, visual only %.3f)", record.label, stage,
                record.accuracy.union[stage], record.accuracy.clip_global[stage],
                record.accuracy.visual_global[stage])
    return bank


def run_experiment(settings: ExperimentSettings, stream: Optional[SyntheticStream] = None,
                   pretrained: Optional[DualTowerModel] = None, label: Optional[str] = None,
                   progress: bool = False, artifact_dir: Optional[Union[str, Path]] = None) -> RunRecord:
    """Run every stage in order. A failing stage raises ``StageFailure``
    carrying the record filled in so far.

    With ``artifact_dir`` set, each stage leaves ``anchors_stage{t}.json``,
    ``bank_stage{t}.json`` and ``model_stage{t}.json`` there.
    """
    started = time.perf_counter()
    stream = stream or generate_stream(settings.stream)
    model = pretrained.copy() if pretrained is not None else pretrained_model(settings, stream)
    record = RunRecord(label=label or settings.flags.label, flags=settings.flags,
                       config_hash=settings.config_hash(), accuracy=AccuracyMatrix(settings.stream.num_tasks))
    artifact_dir = Path(artifact_dir) if artifact_dir is not None else None
    bank = PrototypeBank()
    for stage in range(settings.stream.num_tasks):
        try:
            bank = _run_stage(record, stream, stage, model, bank, settings, progress, artifact_dir)
        except Exception as exc:
            record.failed_stage = stage
            record.wall_clock = time.perf_counter() - started
            logger.error("[%s] stage %d failed: %s", record.label, stage, exc)
            raise StageFailure(stage, exc, record) from exc

    final = stream.stage_view(settings.stream.num_tasks - 1)
    seen = stream.classes_through(final.stage)
    tests = [final.test(t) for t in range(final.stage + 1)]
    beta = settings.inference.beta if settings.flags.visual_branch else 0.0
    record.predictions = prediction_records(model, bank, np.concatenate([s.x for s in tests]),
                                            np.concatenate([s.y for s in tests]), seen, beta)
    record.metrics = summarize(record.accuracy)
    record.bank = bank
    record.wall_clock = time.perf_counter() - started
    return record


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=+-]+", "_", label) or "run"


def run_directory_names(labels: Sequence[str]) -> List[str]:
    """One directory name per run label; repeats get -2, -3, ... suffixes."""
    names, used = [], set()
    for label in labels:
        name = _slug(label)
        suffix = 1
        while name in used:
            suffix += 1
            name = f"{_slug(label)}-{suffix}"
        used.add(name)
        names.append(name)
    return names


# Grids

ABLATION_GRID: Tuple[MethodFlags, ...] = (
    MethodFlags(acgd=False, tsgr=False, prototype_transfer=False, visual_branch=False),
    MethodFlags(acgd=True, tsgr=False, prototype_transfer=False, visual_branch=False),
    MethodFlags(acgd=True, tsgr=True, prototype_transfer=False, visual_branch=False),
    MethodFlags(acgd=True, tsgr=True, prototype_transfer=True, visual_branch=False),
    MethodFlags(acgd=True, tsgr=True, prototype_transfer=True, visual_branch=True),
)

# axis -> (settings section, field)
SWEEP_AXES: Dict[str, Tuple[str, str]] = {
    "k_adv": ("dpgd", "iterations"),
    "epsilon": ("dpgd", "epsilon"),
    "lambda_p": ("dpgd", "lambda_p"),
    "tau_a": ("train", "tau_a"),
    "tau_t": ("train", "tau_t"),
    "anchor_batch_size": ("train", "anchor_batch_size"),
    "k": ("train", "k"),
}

K_ADV_VALUES = (0, 5, 10, 20, 40)


def _run_grid(jobs: List[Tuple[str, ExperimentSettings]], stream: SyntheticStream,
              pretrained: DualTowerModel, workers: int, progress: bool,
              output_dir: Optional[Union[str, Path]] = None) -> List[RunRecord]:
    names = run_directory_names([label for label, _ in jobs])
    artifact_dirs = [Path(output_dir) / name if output_dir is not None else None for name in names]

    def run(job):
        (label, settings), artifact_dir = job
        return run_experiment(settings, stream=stream, pretrained=pretrained, label=label,
                              artifact_dir=artifact_dir)

    jobs = list(zip(jobs, artifact_dirs))
    if workers <= 1:
        return [run(job) for job in tqdm(jobs, desc="runs", disable=not progress)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(tqdm(pool.map(run, jobs), total=len(jobs), desc="runs", disable=not progress))


def run_ablation(settings: ExperimentSettings, grid: Sequence[MethodFlags] = ABLATION_GRID,
                 pretrained: Optional[DualTowerModel] = None, progress: bool = False,
                 output_dir: Optional[Union[str, Path]] = None) -> List[RunRecord]:
    """One run per flag combination, sharing the stream and the pretrained towers."""
    stream = generate_stream(settings.stream)
    pretrained = pretrained or pretrained_model(settings, stream)
    jobs = [(flags.label, replace(settings, flags=flags)) for flags in grid]
    return _run_grid(jobs, stream, pretrained, settings.run.workers, progress, output_dir)


def run_sweep(axis: str, values: Sequence, settings: ExperimentSettings,
              pretrained: Optional[DualTowerModel] = None, progress: bool = False,
              output_dir: Optional[Union[str, Path]] = None) -> List[RunRecord]:
    """One run per value of a single hyperparameter."""
    if axis not in SWEEP_AXES:
        raise ConfigError([f"Unknown sweep axis: {axis} (choose from {', '.join(sorted(SWEEP_AXES))})"])
    section, key = SWEEP_AXES[axis]
    stream = generate_stream(settings.stream)
    pretrained = pretrained or pretrained_model(settings, stream)
    jobs = []
    for value in values:
        changed = replace(getattr(settings, section), **{key: value})
        jobs.append((f"{axis}={value}", replace(settings, **{section: changed})))
    return _run_grid(jobs, stream, pretrained, settings.run.workers, progress, output_dir)


def sweep_k_adv(settings: ExperimentSettings, values: Sequence[int] = K_ADV_VALUES,
                pretrained: Optional[DualTowerModel] = None, progress: bool = False,
                output_dir: Optional[Union[str, Path]] = None) -> List[RunRecord]:
    return run_sweep("k_adv", values, settings, pretrained, progress, output_dir)
