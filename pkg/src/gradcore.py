"""Reverse-mode gradients over a small, closed set of tensor ops.

Tensors are float64 ``numpy`` arrays of rank 0, 1 or 2. A graph is an
append-only list of nodes; every node refers to earlier nodes only, so the
insertion order is a topological order. Leaves are either parameters (which
receive gradients) or constants. Values are supplied at evaluation time
through a name -> array mapping, which keeps the graph free of state and lets
several threads evaluate the same graph at once.

Row-wise ops (``l2_normalize``, ``softmax``, ``log_softmax``) act on the whole
vector for rank 1 and on each row for rank 2.
"""

import logging
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from .errors import (
    DegenerateNormWarning,
    GraphError,
    NonScalarRootError,
    ShapeError,
    UnboundLeafError,
)

logger = logging.getLogger(__name__)

Tensor = np.ndarray

NORM_FLOOR = 1e-8
LOG_FLOOR = 1e-12


class OpKind(Enum):
    LEAF = "leaf"
    MATMUL = "matmul"
    ADD = "add"
    SCALE = "scalar-multiply"
    RELU = "relu"
    L2_NORMALIZE = "l2-normalize"
    DOT = "dot"
    SOFTMAX = "softmax"
    LOG_SOFTMAX = "log-softmax"
    EXP = "exp"
    LOG = "log"
    SUM = "sum"
    MEAN = "mean"


@dataclass(frozen=True)
class Node:
    """One entry of a computation graph."""
    index: int
    op: OpKind
    inputs: Tuple[int, ...] = ()
    name: str = ""
    parameter: bool = False
    factor: float = 1.0
    transpose_b: bool = False

    @property
    def is_leaf(self) -> bool:
        return self.op is OpKind.LEAF


def as_tensor(value) -> Tensor:
    """Convert ``value`` to a float64 array, checking rank and finiteness."""
    array = np.array(value, dtype=np.float64)
    if array.ndim > 2:
        raise GraphError(f"tensors have rank <= 2, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise GraphError("tensor contains NaN or Inf")
    return array


class ComputationGraph:
    """Append-only graph of primitive ops. Builder methods return node indices."""

    def __init__(self):
        self._nodes: List[Node] = []
        self._leaves: Dict[str, int] = {}

    @property
    def nodes(self) -> Tuple[Node, ...]:
        return tuple(self._nodes)

    def __len__(self) -> int:
        return len(self._nodes)

    def node(self, index: int) -> Node:
        return self._nodes[index]

    def leaf_index(self, name: str) -> int:
        if name not in self._leaves:
            raise GraphError(f"no leaf named '{name}'")
        return self._leaves[name]

    def parameter_names(self) -> List[str]:
        return [n.name for n in self._nodes if n.is_leaf and n.parameter]

    def leaf_names(self) -> List[str]:
        return list(self._leaves)

    # Leaves

    def parameter(self, name: str) -> int:
        return self._add_leaf(name, parameter=True)

    def constant(self, name: str) -> int:
        return self._add_leaf(name, parameter=False)

    def _add_leaf(self, name: str, parameter: bool) -> int:
        if name in self._leaves:
            raise GraphError(f"duplicate leaf name '{name}'")
        index = len(self._nodes)
        self._nodes.append(Node(index=index, op=OpKind.LEAF, name=name, parameter=parameter))
        self._leaves[name] = index
        return index

    # Ops

    def _append(self, op: OpKind, *inputs: int, **attrs) -> int:
        index = len(self._nodes)
        for i in inputs:
            if not 0 <= i < index:
                raise GraphError(f"{op.value}: input {i} does not precede node {index}")
        self._nodes.append(Node(index=index, op=op, inputs=tuple(inputs), **attrs))
        return index

    def matmul(self, a: int, b: int, transpose_b: bool = False) -> int:
        return self._append(OpKind.MATMUL, a, b, transpose_b=transpose_b)

    def add(self, a: int, b: int) -> int:
        return self._append(OpKind.ADD, a, b)

    def scale(self, a: int, factor: float) -> int:
        return self._append(OpKind.SCALE, a, factor=float(factor))

    def relu(self, a: int) -> int:
        return self._append(OpKind.RELU, a)

    def l2_normalize(self, a: int) -> int:
        return self._append(OpKind.L2_NORMALIZE, a)

    def dot(self, a: int, b: int) -> int:
        return self._append(OpKind.DOT, a, b)

    def softmax(self, a: int) -> int:
        return self._append(OpKind.SOFTMAX, a)

    def log_softmax(self, a: int) -> int:
        return self._append(OpKind.LOG_SOFTMAX, a)

    def exp(self, a: int) -> int:
        return self._append(OpKind.EXP, a)

    def log(self, a: int) -> int:
        return self._append(OpKind.LOG, a)

    def sum(self, a: int) -> int:
        return self._append(OpKind.SUM, a)

    def mean(self, a: int) -> int:
        return self._append(OpKind.MEAN, a)

    def ancestors(self, root: int) -> List[int]:
        """Indices of ``root`` and everything it depends on, in graph order."""
        needed = {root}
        for node in reversed(self._nodes[: root + 1]):
            if node.index in needed:
                needed.update(node.inputs)
        return sorted(needed)


@dataclass
class Evaluation:
    """Values of every node needed for ``root``, cached for the backward pass."""
    graph: ComputationGraph
    root: int
    values: Dict[int, Tensor]
    degenerate_nodes: Tuple[int, ...] = ()

    @property
    def output(self) -> Tensor:
        return self.values[self.root]

    def value_of(self, index: int) -> Tensor:
        return self.values[index]


def _row_norms(a: Tensor) -> Tensor:
    return np.linalg.norm(a, axis=-1, keepdims=True)


def _softmax(a: Tensor) -> Tensor:
    shifted = a - np.max(a, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _log_softmax(a: Tensor) -> Tensor:
    shifted = a - np.max(a, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def _forward(node: Node, args: List[Tensor]) -> Tuple[Tensor, bool]:
    """Compute one op. Returns (value, degenerate flag)."""
    op = node.op
    shapes = [a.shape for a in args]

    if op is OpKind.MATMUL:
        a, b = args
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(node.index, op.value, shapes, "matmul needs rank-2 inputs")
        inner_b = b.shape[1] if node.transpose_b else b.shape[0]
        if a.shape[1] != inner_b:
            raise ShapeError(node.index, op.value, shapes, f"transpose_b={node.transpose_b}")
        return (a @ b.T if node.transpose_b else a @ b), False

    if op in (OpKind.ADD, OpKind.DOT):
        a, b = args
        if a.shape != b.shape:
            raise ShapeError(node.index, op.value, shapes)
        if op is OpKind.ADD:
            return a + b, False
        return np.asarray(np.sum(a * b)), False

    (a,) = args
    if op is OpKind.SCALE:
        return node.factor * a, False
    if op is OpKind.RELU:
        return np.maximum(a, 0.0), False
    if op is OpKind.EXP:
        return np.exp(a), False
    if op is OpKind.LOG:
        return np.log(np.maximum(a, LOG_FLOOR)), False
    if op is OpKind.SUM:
        return np.asarray(np.sum(a)), False
    if op is OpKind.MEAN:
        if a.size == 0:
            raise ShapeError(node.index, op.value, shapes, "mean of an empty tensor")
        return np.asarray(np.mean(a)), False

    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError(node.index, op.value, shapes, "row-wise op needs a non-empty last axis")
    if op is OpKind.L2_NORMALIZE:
        norms = _row_norms(a)
        degenerate = bool(np.any(norms < NORM_FLOOR))
        return a / np.maximum(norms, NORM_FLOOR), degenerate
    if op is OpKind.SOFTMAX:
        return _softmax(a), False
    if op is OpKind.LOG_SOFTMAX:
        return _log_softmax(a), False
    raise GraphError(f"unsupported op {op}")


def evaluate(graph: ComputationGraph, bindings: Mapping[str, object],
             root: Optional[int] = None) -> Evaluation:
    """Evaluate ``root`` (default: the last node) under ``bindings``."""
    if len(graph) == 0:
        raise GraphError("empty graph")
    root = len(graph) - 1 if root is None else root
    values: Dict[int, Tensor] = {}
    degenerate: List[int] = []

    for index in graph.ancestors(root):
        node = graph.node(index)
        if node.is_leaf:
            if node.name not in bindings:
                raise UnboundLeafError(f"leaf '{node.name}' (node {index}) is not bound")
            values[index] = as_tensor(bindings[node.name])
            continue
        value, is_degenerate = _forward(node, [values[i] for i in node.inputs])
        if is_degenerate:
            degenerate.append(index)
            warnings.warn(f"l2-normalize at node {index} received a vector with norm < {NORM_FLOOR}",
                          DegenerateNormWarning, stacklevel=2)
            logger.debug("Degenerate normalization at node %d", index)
        values[index] = value

    return Evaluation(graph=graph, root=root, values=values, degenerate_nodes=tuple(degenerate))


def _backward(node: Node, upstream: Tensor, ev: Evaluation) -> List[Tensor]:
    """Gradients of the node's inputs given the gradient of its output."""
    op = node.op
    args = [ev.values[i] for i in node.inputs]
    out = ev.values[node.index]

    if op is OpKind.MATMUL:
        a, b = args
        if node.transpose_b:
            return [upstream @ b, upstream.T @ a]
        return [upstream @ b.T, a.T @ upstream]
    if op is OpKind.ADD:
        return [upstream, upstream]
    if op is OpKind.DOT:
        a, b = args
        return [upstream * b, upstream * a]

    (a,) = args
    if op is OpKind.SCALE:
        return [node.factor * upstream]
    if op is OpKind.RELU:
        return [upstream * (a > 0.0)]
    if op is OpKind.EXP:
        return [upstream * out]
    if op is OpKind.LOG:
        return [np.where(a > LOG_FLOOR, upstream / np.maximum(a, LOG_FLOOR), 0.0)]
    if op is OpKind.SUM:
        return [np.full_like(a, float(upstream))]
    if op is OpKind.MEAN:
        return [np.full_like(a, float(upstream) / a.size)]
    if op is OpKind.L2_NORMALIZE:
        norms = _row_norms(a)
        # Below the floor the op is a fixed rescale by 1/NORM_FLOOR.
        projected = upstream - out * np.sum(out * upstream, axis=-1, keepdims=True)
        regular = projected / np.maximum(norms, NORM_FLOOR)
        return [np.where(norms < NORM_FLOOR, upstream / NORM_FLOOR, regular)]
    if op is OpKind.SOFTMAX:
        return [out * (upstream - np.sum(upstream * out, axis=-1, keepdims=True))]
    if op is OpKind.LOG_SOFTMAX:
        return [upstream - np.exp(out) * np.sum(upstream, axis=-1, keepdims=True)]
    raise GraphError(f"unsupported op {op}")


def gradient(ev: Evaluation, wrt: Optional[Iterable[str]] = None) -> Dict[str, Tensor]:
    """d(root)/d(leaf) for every parameter leaf (or for the leaves named in ``wrt``).

    Leaves the root does not depend on are omitted; constants are left out
    unless named in ``wrt``.
    """
    graph = ev.graph
    if ev.output.size != 1:
        raise NonScalarRootError(f"root node {ev.root} has shape {ev.output.shape}; gradients need a scalar root")

    if wrt is None:
        targets = {graph.leaf_index(n) for n in graph.parameter_names()}
    else:
        targets = {graph.leaf_index(n) for n in wrt}

    order = graph.ancestors(ev.root)
    requires = set()
    for index in order:
        node = graph.node(index)
        if index in targets or any(i in requires for i in node.inputs):
            requires.add(index)

    grads: Dict[int, Tensor] = {ev.root: np.ones_like(ev.output)}
    for index in reversed(order):
        node = graph.node(index)
        if node.is_leaf or index not in requires or index not in grads:
            continue
        for input_index, g in zip(node.inputs, _backward(node, grads[index], ev)):
            if input_index not in requires:
                continue
            if input_index in grads:
                grads[input_index] = grads[input_index] + g
            else:
                grads[input_index] = g

    result = {}
    for index in sorted(targets):
        name = graph.node(index).name
        if index in grads:
            result[name] = grads[index]
        elif index in ev.values:
            result[name] = np.zeros_like(ev.values[index])
    return result


def grad_check(graph: ComputationGraph, bindings: Mapping[str, object], root: int,
               leaf: str, step: float = 1e-5) -> float:
    """Max relative error between the reverse-mode and central-difference gradients."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = {name: as_tensor(value) for name, value in bindings.items()}
    analytic = gradient(evaluate(graph, base, root), wrt=[leaf]).get(leaf)
    if analytic is None:
        analytic = np.zeros_like(base[leaf])

    point = base[leaf]
    worst = 0.0
    for idx in np.ndindex(point.shape):
        shifted = dict(base)
        plus = point.copy()
        plus[idx] += step
        shifted[leaf] = plus
        f_plus = float(evaluate(graph, shifted, root).output)
        minus = point.copy()
        minus[idx] -= step
        shifted[leaf] = minus
        f_minus = float(evaluate(graph, shifted, root).output)

        numeric = (f_plus - f_minus) / (2.0 * step)
        exact = float(analytic[idx])
        denominator = max(abs(exact), abs(numeric), 1e-8)
        worst = max(worst, abs(exact - numeric) / denominator)
    return worst
