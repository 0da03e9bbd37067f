"""Operation graphs with forward evaluation and reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .ops import OPS


class GraphError(ValueError):
    """Malformed graph, missing binding, or bad request."""


class ShapeError(ValueError):
    """An operator received inputs whose shapes are inconsistent."""


class NumericError(ArithmeticError):
    """An operator produced NaN or Inf."""


class ContractError(ValueError):
    """A caller violated an operation precondition."""


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[int, ...]
    attrs: tuple = ()
    label: str = ""

    @property
    def attr(self) -> dict:
        return dict(self.attrs)


@dataclass
class OpGraph:
    """Topologically ordered operation records.

    Nodes are appended by the builder methods and therefore always follow
    their inputs. Leaves are either *inputs* (data, noise, frozen weights)
    or *parameters* (trainable; the only leaves ``backward`` differentiates
    with respect to). ``outputs`` maps public names to node ids.
    """

    nodes: list[Node] = field(default_factory=list)
    inputs: dict[str, int] = field(default_factory=dict)
    params: dict[str, int] = field(default_factory=dict)
    outputs: dict[str, int] = field(default_factory=dict)

    # -- leaves
    def input(self, name: str) -> int:
        if name in self.inputs or name in self.params:
            raise GraphError(f"leaf {name!r} already defined")
        self.inputs[name] = self._add("input", (), label=name)
        return self.inputs[name]

    def param(self, name: str) -> int:
        if name in self.inputs or name in self.params:
            raise GraphError(f"leaf {name!r} already defined")
        self.params[name] = self._add("param", (), label=name)
        return self.params[name]

    def output(self, name: str, node: int) -> int:
        self.outputs[name] = node
        return node

    def _add(self, op: str, inputs: Sequence[int], label: str = "", **attrs) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"{op}: input node {i} does not exist")
        if op not in ("input", "param") and op not in OPS:
            raise GraphError(f"unknown op {op!r}")
        self.nodes.append(Node(op, tuple(inputs), tuple(sorted(attrs.items())), label))
        return len(self.nodes) - 1

    # -- operators
    def conv2d(self, x, w, b, stride=1, pad=None, label=""):
        # pad=1 keeps spatial size for 3x3 kernels at stride 1
        return self._add("conv2d", (x, w, b), label, stride=stride, pad=1 if pad is None else pad)

    def upsample2x(self, x, label=""):
        return self._add("upsample2x", (x,), label)

    def dense(self, x, w, b, label=""):
        return self._add("dense", (x, w, b), label)

    def leaky_relu(self, x, label=""):
        return self._add("leaky_relu", (x,), label)

    def sigmoid(self, x, label=""):
        return self._add("sigmoid", (x,), label)

    def tanh(self, x, label=""):
        return self._add("tanh", (x,), label)

    def exp(self, x, label=""):
        return self._add("exp", (x,), label)

    def log(self, x, floor=0.0, label=""):
        return self._add("log", (x,), label, floor=float(floor))

    def softmax(self, x, label=""):
        return self._add("softmax", (x,), label)

    def add(self, a, b, label=""):
        return self._add("add", (a, b), label)

    def sub(self, a, b, label=""):
        return self._add("sub", (a, b), label)

    def mul(self, a, b, label=""):
        return self._add("mul", (a, b), label)

    def scale(self, x, factor, label=""):
        return self._add("scale", (x,), label, factor=float(factor))

    def tile(self, x, a, b, label=""):
        return self._add("tile", (x,), label, a=int(a), b=int(b))

    def global_avg_pool(self, x, label=""):
        return self._add("global_avg_pool", (x,), label)

    def concat(self, xs, label=""):
        return self._add("concat", tuple(xs), label)

    def reshape(self, x, shape, label=""):
        return self._add("reshape", (x,), label, shape=tuple(int(s) for s in shape))

    def sum(self, x, axis=None, label=""):
        return self._add("sum", (x,), label, axis=axis)

    def mean(self, x, label=""):
        return self._add("mean", (x,), label)

    def sum_sq(self, x, label=""):
        return self._add("sum_sq", (x,), label)

    # -- structure queries
    def ancestors(self, node: int) -> set[int]:
        """All node ids ``node`` depends on, itself included."""
        seen, stack = set(), [node]
        while stack:
            n = stack.pop()
            if n not in seen:
                seen.add(n)
                stack.extend(self.nodes[n].inputs)
        return seen

    def params_reaching(self, node: int) -> set[str]:
        anc = self.ancestors(node)
        return {name for name, nid in self.params.items() if nid in anc}

    def describe(self, nid: int) -> str:
        node = self.nodes[nid]
        tag = f" {node.label!r}" if node.label else ""
        return f"node {nid} ({node.op}{tag})"

    def resolve(self, ref: int | str) -> int:
        if isinstance(ref, str):
            for table in (self.outputs, self.params, self.inputs):
                if ref in table:
                    return table[ref]
            raise GraphError(f"no output or leaf named {ref!r}")
        return ref


class Trace:
    """Forward values of one evaluation, reusable for several backward passes."""

    def __init__(self, graph: OpGraph, bindings: Mapping[str, np.ndarray], targets: Sequence[int | str] | None = None):
        self.graph = graph
        if targets is None:
            targets = list(graph.outputs.values())
        target_ids = [graph.resolve(t) for t in targets]
        needed: set[int] = set()
        for t in target_ids:
            needed |= graph.ancestors(t)
        self.values: dict[int, np.ndarray] = {}
        self.caches: dict[int, object] = {}
        for nid in sorted(needed):
            node = graph.nodes[nid]
            if node.op in ("input", "param"):
                if node.label not in bindings:
                    raise GraphError(f"leaf {node.label!r} is not bound")
                self.values[nid] = np.asarray(bindings[node.label])
                continue
            ins = [self.values[i] for i in node.inputs]
            try:
                out, cache = OPS[node.op].forward(ins, node.attr)
            except ValueError as exc:
                raise ShapeError(f"{graph.describe(nid)}: {exc}") from None
            if not np.all(np.isfinite(out)):
                raise NumericError(f"{graph.describe(nid)} produced non-finite values")
            self.values[nid] = out
            self.caches[nid] = cache

    def __getitem__(self, ref: int | str) -> np.ndarray:
        return self.values[self.graph.resolve(ref)]

    def backward(self, loss: int | str, wrt: Sequence[str] | None = None) -> dict[str, np.ndarray]:
        """Gradients of the scalar ``loss`` node for the parameters ``wrt``.

        Parameters not reachable from ``loss`` get zero tensors.
        """
        g = self.graph
        loss_id = g.resolve(loss)
        if loss_id not in self.values:
            raise GraphError(f"{g.describe(loss_id)} was not evaluated in this trace")
        lval = self.values[loss_id]
        if lval.size != 1 or lval.ndim > 1:
            raise ContractError(f"loss {g.describe(loss_id)} must be scalar, got shape {lval.shape}")
        names = list(g.params) if wrt is None else list(wrt)
        for name in names:
            if name not in g.params:
                raise GraphError(f"{name!r} is not a parameter of this graph")
        wanted = {g.params[n] for n in names}

        live = g.ancestors(loss_id)
        # requires_grad: node lies on a path from a wanted parameter
        req: set[int] = set()
        for nid in sorted(live):
            node = g.nodes[nid]
            if nid in wanted or any(i in req for i in node.inputs):
                req.add(nid)

        grads: dict[int, np.ndarray] = {loss_id: np.ones_like(lval)}
        for nid in sorted(req, reverse=True):
            node = g.nodes[nid]
            if node.op in ("input", "param") or nid not in grads:
                continue
            need = [i in req for i in node.inputs]
            ins = [self.values[i] for i in node.inputs]
            in_grads = OPS[node.op].backward(grads.pop(nid), ins, self.values[nid], self.caches[nid], node.attr, need)
            for i, gi, want in zip(node.inputs, in_grads, need):
                if not want:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        out = {}
        for name in names:
            nid = g.params[name]
            val = self.values.get(nid)
            if val is None:
                raise GraphError(f"parameter {name!r} was not evaluated in this trace")
            if nid in grads:
                out[name] = np.asarray(grads[nid], dtype=val.dtype).reshape(val.shape)
            else:
                out[name] = np.zeros_like(val)
        return out


def evaluate(
    graph: OpGraph, bindings: Mapping[str, np.ndarray], outputs: Sequence[str] | None = None
) -> dict[str, np.ndarray]:
    """Evaluate the named ``outputs`` (all registered outputs by default)."""
    names = list(graph.outputs) if outputs is None else list(outputs)
    trace = Trace(graph, bindings, names)
    return {name: trace[name] for name in names}


def backward(
    graph: OpGraph, bindings: Mapping[str, np.ndarray], loss: str | int, wrt: Sequence[str] | None = None
) -> dict[str, np.ndarray]:
    """dLoss/dParam for every parameter leaf (or the subset ``wrt``)."""
    trace = Trace(graph, bindings, [loss])
    # unreachable parameters are still bound; record them so zero grads get shapes
    for name in graph.params if wrt is None else wrt:
        nid = graph.params.get(name)
        if nid is not None and nid not in trace.values and name in bindings:
            trace.values[nid] = np.asarray(bindings[name])
    return trace.backward(loss, wrt)
