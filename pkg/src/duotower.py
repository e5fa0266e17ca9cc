"""Desk-scale dual-tower model.

Visual tower: ``x -> relu(x W1) -> (W2 + A B) = r`` (the raw extractor),
then ``v = r P`` (the projection head). Text tower: a class token ``e_c``
goes through ``relu(e W1) -> (W2 + A B) = u``. Both towers are bias-free so
the visual side is positively homogeneous. Outputs are l2-normalized.

Only the LoRA up-projections ``B`` are trained during continual learning;
the base weights, the projection head and every ``A`` stay as they were
after pretraining.
"""

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import EmptyDatasetError, SegpError, UnknownClassError
from .gradcore import ComputationGraph, Tensor, as_tensor, evaluate, gradient
from .seeding import SeedDomain, generator
from .validator import ConfigValidator

logger = logging.getLogger(__name__)

MODEL_FORMAT = "segp-duotower"
MODEL_FORMAT_VERSION = 1

# Serialization order of the base weights; part of the file format.
BASE_WEIGHTS = ("visual.W1", "visual.W2", "visual.P", "text.W1", "text.W2")
ADAPTED_LAYERS = ("visual.W2", "text.W2")


@dataclass
class ModelConfig:
    input_dim: int = 32
    raw_dim: int = 64
    joint_dim: int = 32
    hidden_dim: int = 64
    lora_rank: int = 4
    class_token_dim: int = 16
    temperature: float = 0.07
    lora_scale: float = 1.0

    def __post_init__(self):
        ConfigValidator.check("model", asdict(self))


@dataclass
class PretrainConfig:
    steps: int = 200
    learning_rate: float = 0.01
    batch_size: int = 64

    def __post_init__(self):
        ConfigValidator.check("pretrain", asdict(self))


@dataclass
class LoraAdapter:
    """Low-rank update ``scale * (h A) B`` added to one layer."""
    attached_layer: str
    down: np.ndarray
    up: np.ndarray

    @property
    def down_name(self) -> str:
        return f"{self.attached_layer}.lora_A"

    @property
    def up_name(self) -> str:
        return f"{self.attached_layer}.lora_B"


class SnapshotLabel(Enum):
    TEACHER_PREV_TASK = "teacher_prev_task"
    TEXT_REFERENCE_G0 = "text_reference_G0"


class DualTowerModel:
    """Weights, adapters and registered class tokens of the dual-tower model."""

    def __init__(self, config: ModelConfig, weights: Dict[str, np.ndarray],
                 adapters: Dict[str, LoraAdapter], tokens: Optional[Dict[int, np.ndarray]] = None,
                 token_seed: int = 0):
        self.config = config
        self.weights = weights
        self.adapters = adapters
        self.tokens: Dict[int, np.ndarray] = dict(tokens or {})
        self.token_seed = token_seed
        self.frozen = False

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "DualTowerModel":
        """Random base weights (He init) and zero-initialized adapters."""
        rng = generator(seed, SeedDomain.MODEL_INIT)
        shapes = {
            "visual.W1": (config.input_dim, config.hidden_dim),
            "visual.W2": (config.hidden_dim, config.raw_dim),
            "visual.P": (config.raw_dim, config.joint_dim),
            "text.W1": (config.class_token_dim, config.hidden_dim),
            "text.W2": (config.hidden_dim, config.joint_dim),
        }
        weights = {name: rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape) for name, shape in shapes.items()}
        adapters = {}
        for layer in ADAPTED_LAYERS:
            fan_in, fan_out = shapes[layer]
            down = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, config.lora_rank))
            down.setflags(write=False)
            adapters[layer] = LoraAdapter(attached_layer=layer, down=down,
                                          up=np.zeros((config.lora_rank, fan_out)))
        return cls(config, weights, adapters, token_seed=seed)

    # Class tokens

    def register_classes(self, class_ids: Iterable[int]):
        """Give each new class a fixed random unit token (seeded by class id)."""
        for class_id in class_ids:
            class_id = int(class_id)
            if class_id in self.tokens:
                continue
            if self.frozen:
                raise SegpError("cannot register classes on a frozen snapshot")
            rng = generator(self.token_seed, SeedDomain.CLASS_TOKENS, class_id)
            token = rng.normal(size=self.config.class_token_dim)
            self.tokens[class_id] = token / np.linalg.norm(token)

    @property
    def registered_classes(self) -> List[int]:
        return sorted(self.tokens)

    def token_matrix(self, class_ids: Sequence[int]) -> np.ndarray:
        rows = []
        for class_id in class_ids:
            if int(class_id) not in self.tokens:
                raise UnknownClassError(f"class {class_id} is not registered")
            rows.append(self.tokens[int(class_id)])
        return np.stack(rows) if rows else np.zeros((0, self.config.class_token_dim))

    # Parameters

    def trainable_names(self) -> List[str]:
        return [self.adapters[layer].up_name for layer in ADAPTED_LAYERS]

    def named_arrays(self) -> Dict[str, np.ndarray]:
        arrays = dict(self.weights)
        for adapter in self.adapters.values():
            arrays[adapter.down_name] = adapter.down
            arrays[adapter.up_name] = adapter.up
        return arrays

    def apply_gradients(self, grads: Dict[str, np.ndarray], learning_rate: float):
        """Plain SGD step on the named arrays (adapter B or base weights)."""
        if self.frozen:
            raise SegpError("snapshots are read-only")
        for name, grad in grads.items():
            if name.endswith(".lora_A"):
                raise SegpError(f"{name} is frozen")
            if name.endswith(".lora_B"):
                adapter = self.adapters[name[: -len(".lora_B")]]
                adapter.up = adapter.up - learning_rate * grad
            else:
                self.weights[name] = self.weights[name] - learning_rate * grad

    def frozen_state_bytes(self) -> bytes:
        """Base weights, projection head and every A, in file order."""
        parts = [self.weights[name].tobytes() for name in BASE_WEIGHTS]
        parts += [self.adapters[layer].down.tobytes() for layer in ADAPTED_LAYERS]
        return b"".join(parts)

    def copy(self) -> "DualTowerModel":
        clone = DualTowerModel(
            config=copy.deepcopy(self.config),
            weights={k: v.copy() for k, v in self.weights.items()},
            adapters={k: LoraAdapter(a.attached_layer, a.down.copy(), a.up.copy()) for k, a in self.adapters.items()},
            tokens={k: v.copy() for k, v in self.tokens.items()},
            token_seed=self.token_seed,
        )
        for adapter in clone.adapters.values():
            adapter.down.setflags(write=False)
        return clone

    def freeze(self) -> "DualTowerModel":
        for array in self.named_arrays().values():
            array.setflags(write=False)
        for token in self.tokens.values():
            token.setflags(write=False)
        self.frozen = True
        return self


@dataclass(frozen=True)
class Snapshot:
    """Frozen copy of a model at one point in time."""
    label: SnapshotLabel
    model: DualTowerModel = field(compare=False)


ModelLike = Union[DualTowerModel, Snapshot]


def as_model(model: ModelLike) -> DualTowerModel:
    return model.model if isinstance(model, Snapshot) else model


class TowerGraph:
    """A model's arrays bound as leaves of a graph under a name prefix.

    Arrays listed in ``trainable`` become parameter leaves; the rest are
    constants. ``bindings()`` returns the values to evaluate with.
    """

    def __init__(self, graph: ComputationGraph, model: ModelLike, prefix: str = "model",
                 trainable: Iterable[str] = ()):
        self.graph = graph
        self.model = as_model(model)
        self.prefix = prefix
        trainable = set(trainable)
        self.leaves: Dict[str, int] = {}
        for name in self.model.named_arrays():
            leaf_name = self.leaf_name(name)
            self.leaves[name] = graph.parameter(leaf_name) if name in trainable else graph.constant(leaf_name)

    def leaf_name(self, name: str) -> str:
        return f"{self.prefix}:{name}"

    def bindings(self) -> Dict[str, np.ndarray]:
        return {self.leaf_name(name): array for name, array in self.model.named_arrays().items()}

    def _adapted(self, h: int, layer: str) -> int:
        g = self.graph
        adapter = self.model.adapters[layer]
        base = g.matmul(h, self.leaves[layer])
        low_rank = g.matmul(g.matmul(h, self.leaves[adapter.down_name]), self.leaves[adapter.up_name])
        return g.add(base, g.scale(low_rank, self.model.config.lora_scale))

    def raw(self, x: int) -> int:
        """Unnormalized raw feature r(x)."""
        hidden = self.graph.relu(self.graph.matmul(x, self.leaves["visual.W1"]))
        return self._adapted(hidden, "visual.W2")

    def raw_normalized(self, x: int) -> int:
        return self.graph.l2_normalize(self.raw(x))

    def visual(self, x: int) -> int:
        return self.graph.l2_normalize(self.graph.matmul(self.raw(x), self.leaves["visual.P"]))

    def features(self, x: int) -> Tuple[int, int]:
        """(r̄, v̄) sharing one raw-extractor pass."""
        raw = self.raw(x)
        joint = self.graph.matmul(raw, self.leaves["visual.P"])
        return self.graph.l2_normalize(raw), self.graph.l2_normalize(joint)

    def text(self, tokens: int) -> int:
        hidden = self.graph.relu(self.graph.matmul(tokens, self.leaves["text.W1"]))
        return self.graph.l2_normalize(self._adapted(hidden, "text.W2"))

    def cosine_logits(self, x: int, tokens: int) -> int:
        """v̄(x) · u_c for every row of x and every token row."""
        return self.graph.matmul(self.visual(x), self.text(tokens), transpose_b=True)


def _batch(x) -> Tuple[np.ndarray, bool]:
    array = as_tensor(x)
    if array.ndim == 1:
        return array[None, :], True
    return array, False


def _run_visual(model: ModelLike, x, which: str) -> np.ndarray:
    batch, single = _batch(x)
    g = ComputationGraph()
    tower = TowerGraph(g, model)
    x_node = g.constant("x")
    root = tower.raw_normalized(x_node) if which == "raw" else tower.visual(x_node)
    out = evaluate(g, {**tower.bindings(), "x": batch}, root).output
    return out[0] if single else out


def encode_raw(model: ModelLike, x) -> Tensor:
    """r̄(x): unit raw feature(s); accepts one sample or a batch of rows."""
    return _run_visual(model, x, "raw")


def encode_visual(model: ModelLike, x) -> Tensor:
    """v̄(x): unit joint-space image embedding(s)."""
    return _run_visual(model, x, "visual")


def encode_features(model: ModelLike, x) -> Tuple[Tensor, Tensor]:
    """(r̄(x), v̄(x)) for a batch in a single pass."""
    batch, _ = _batch(x)
    g = ComputationGraph()
    tower = TowerGraph(g, model)
    raw, joint = tower.features(g.constant("x"))
    ev = evaluate(g, {**tower.bindings(), "x": batch}, g.add(g.sum(raw), g.sum(joint)))
    return ev.value_of(raw), ev.value_of(joint)


def encode_texts(model: ModelLike, class_ids: Sequence[int]) -> Tensor:
    """u_c for each class id, one row per class."""
    if len(class_ids) == 0:
        raise ValueError("class set is empty")
    m = as_model(model)
    tokens = m.token_matrix(class_ids)
    g = ComputationGraph()
    tower = TowerGraph(g, m)
    root = tower.text(g.constant("tokens"))
    return evaluate(g, {**tower.bindings(), "tokens": tokens}, root).output


def encode_text(model: ModelLike, class_id: int) -> Tensor:
    return encode_texts(model, [class_id])[0]


def clip_logits(model: ModelLike, x, class_set: Sequence[int]) -> Tensor:
    """Cosine logits s^clip(x, c) for c in class_set (rows follow x)."""
    if len(class_set) == 0:
        raise ValueError("class set is empty")
    batch, single = _batch(x)
    joint = encode_visual(model, batch)
    logits = joint @ encode_texts(model, class_set).T
    return logits[0] if single else logits


def softmax_rows(logits: np.ndarray, temperature: float) -> np.ndarray:
    scaled = np.asarray(logits, dtype=np.float64) / temperature
    scaled = scaled - np.max(scaled, axis=-1, keepdims=True)
    e = np.exp(scaled)
    return e / np.sum(e, axis=-1, keepdims=True)


def clip_probs(model: ModelLike, x, class_set: Sequence[int], temperature: Optional[float] = None) -> Tensor:
    """p^clip(c | x; class_set) at the given temperature (model default if None)."""
    if len(class_set) == 0:
        raise ValueError("class set is empty")
    tau = as_model(model).config.temperature if temperature is None else temperature
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return softmax_rows(clip_logits(model, x, class_set), tau)


def take_snapshot(model: DualTowerModel, label: SnapshotLabel = SnapshotLabel.TEACHER_PREV_TASK) -> Snapshot:
    return Snapshot(label=label, model=as_model(model).copy().freeze())


def text_reference(model: ModelLike) -> Snapshot:
    """G^0: the current model with its text adapters reset to zero."""
    clone = as_model(model).copy()
    adapter = clone.adapters["text.W2"]
    adapter.up = np.zeros_like(adapter.up)
    return Snapshot(label=SnapshotLabel.TEXT_REFERENCE_G0, model=clone.freeze())


# Pretraining

def contrastive_loss_graph(model: DualTowerModel, x: np.ndarray, labels: np.ndarray,
                           class_ids: Sequence[int], trainable: Iterable[str]):
    """Symmetric image/text contrastive objective over ``class_ids``.

    Image -> text is cross-entropy over all classes; text -> image averages,
    for each class present in the batch, the log-probability of its samples
    under a softmax across the batch.
    """
    tau = model.config.temperature
    n = len(labels)
    column = {c: i for i, c in enumerate(class_ids)}
    targets = np.zeros((n, len(class_ids)))
    targets[np.arange(n), [column[int(y)] for y in labels]] = 1.0
    counts = targets.sum(axis=0)
    present = counts > 0
    per_text = np.zeros_like(targets.T)
    per_text[present] = targets.T[present] / counts[present, None]

    g = ComputationGraph()
    tower = TowerGraph(g, model, trainable=trainable)
    joint = tower.visual(g.constant("x"))
    text = tower.text(g.constant("tokens"))
    image_to_text = g.log_softmax(g.scale(g.matmul(joint, text, transpose_b=True), 1.0 / tau))
    text_to_image = g.log_softmax(g.scale(g.matmul(text, joint, transpose_b=True), 1.0 / tau))
    loss = g.add(
        g.scale(g.dot(g.constant("targets"), image_to_text), -0.5 / n),
        g.scale(g.dot(g.constant("per_text"), text_to_image), -0.5 / int(present.sum())),
    )
    bindings = {**tower.bindings(), "x": x, "tokens": model.token_matrix(class_ids),
                "targets": targets, "per_text": per_text}
    return g, bindings, loss


def pretrain(model: DualTowerModel, x: np.ndarray, labels: np.ndarray,
             config: Optional[PretrainConfig] = None, seed: int = 0) -> List[float]:
    """Fit the base towers on a held-out split so the joint space starts aligned."""
    config = config or PretrainConfig()
    if len(labels) == 0:
        raise EmptyDatasetError("pretrain split is empty")
    class_ids = sorted(set(int(y) for y in labels))
    model.register_classes(class_ids)
    rng = generator(seed, SeedDomain.PRETRAIN_BATCHES)
    history = []
    for step in range(config.steps):
        batch = rng.choice(len(labels), size=min(config.batch_size, len(labels)), replace=False)
        g, bindings, loss = contrastive_loss_graph(model, x[batch], labels[batch], class_ids, BASE_WEIGHTS)
        ev = evaluate(g, bindings, loss)
        grads = gradient(ev)
        model.apply_gradients({name.split(":", 1)[1]: grad for name, grad in grads.items()},
                              config.learning_rate)
        history.append(float(ev.output))
        if step % 50 == 0:
            logger.debug("pretrain step %d loss %.4f", step, history[-1])
    logger.info("Pretraining finished: %d steps, final loss %.4f", config.steps, history[-1] if history else float("nan"))
    return history


# Serialization

def _pack(array: np.ndarray) -> Dict:
    return {"shape": list(array.shape), "data": [float(v) for v in array.ravel()]}


def _unpack(entry: Dict) -> np.ndarray:
    return np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])


def model_to_dict(model: ModelLike) -> Dict:
    """JSON-of-arrays form. Field order: format, version, label, config,
    token_seed, weights (BASE_WEIGHTS order), adapters (ADAPTED_LAYERS order,
    each with down then up), tokens (ascending class id)."""
    label = model.label.value if isinstance(model, Snapshot) else None
    m = as_model(model)
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_FORMAT_VERSION,
        "label": label,
        "config": asdict(m.config),
        "token_seed": m.token_seed,
        "weights": {name: _pack(m.weights[name]) for name in BASE_WEIGHTS},
        "adapters": [
            {"layer": layer, "down": _pack(m.adapters[layer].down), "up": _pack(m.adapters[layer].up)}
            for layer in ADAPTED_LAYERS
        ],
        "tokens": [{"class_id": c, "data": [float(v) for v in m.tokens[c]]} for c in sorted(m.tokens)],
    }


def model_from_dict(data: Dict) -> ModelLike:
    if data.get("format") != MODEL_FORMAT:
        raise SegpError(f"not a {MODEL_FORMAT} file")
    if data.get("version") != MODEL_FORMAT_VERSION:
        raise SegpError(f"unsupported model file version {data.get('version')}")
    config = ModelConfig(**data["config"])
    weights = {name: _unpack(data["weights"][name]) for name in BASE_WEIGHTS}
    adapters = {}
    for entry in data["adapters"]:
        down = _unpack(entry["down"])
        down.setflags(write=False)
        adapters[entry["layer"]] = LoraAdapter(entry["layer"], down, _unpack(entry["up"]))
    tokens = {int(t["class_id"]): np.array(t["data"], dtype=np.float64) for t in data["tokens"]}
    model = DualTowerModel(config, weights, adapters, tokens, token_seed=int(data["token_seed"]))
    if data.get("label"):
        return Snapshot(label=SnapshotLabel(data["label"]), model=model.freeze())
    return model


def save_model(model: ModelLike, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(model_to_dict(model), f)
    return path


def load_model(path: Union[str, Path]) -> ModelLike:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Model file not found: {path}")
    with open(path, "r") as f:
        return model_from_dict(json.load(f))
