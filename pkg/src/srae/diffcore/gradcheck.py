"""Central finite-difference certification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .graph import GraphError, OpGraph, Trace, backward


@dataclass
class GradCheckReport:
    """Max relative error per parameter tensor, and the ones above ``tol``."""

    tol: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def failed(self) -> list[str]:
        return [name for name, err in self.errors.items() if not err < self.tol]

    @property
    def ok(self) -> bool:
        return not self.failed

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|, 1e-8) over a tensor.

    Normalising by the tensor's largest magnitude instead of element-wise
    keeps near-zero entries from dominating through truncation noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(float(np.abs(a).max(initial=0.0)), float(np.abs(n).max(initial=0.0)), 1e-8)
    return float(np.abs(a - n).max(initial=0.0)) / denom


KINK_REFINEMENTS = 3


def _kinks(trace: Trace) -> list[np.ndarray]:
    """Which side of each non-differentiable point every activation sits on."""
    marks = []
    for nid, node in enumerate(trace.graph.nodes):
        if nid not in trace.values:
            continue
        if node.op == "leaky_relu":
            marks.append(trace.values[node.inputs[0]] > 0)
        elif node.op == "log" and node.attr["floor"] > 0:
            marks.append(trace.values[node.inputs[0]] >= node.attr["floor"])
    return marks


def _same_side(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def numeric_grad(
    graph: OpGraph,
    bindings: Mapping[str, np.ndarray],
    loss: str | int,
    name: str,
    h: float,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Central differences (L(p+h) - L(p-h)) / 2h for the entries ``indices``.

    Evaluates in float64. Entries not listed are left at zero. When the
    +h and -h evaluations straddle a leaky-ReLU kink or a log clamp the
    difference quotient is meaningless there, so h is shrunk tenfold (up
    to ``KINK_REFINEMENTS`` times) for that entry only.
    """
    b64 = {k: np.asarray(v, dtype=np.float64) for k, v in bindings.items()}
    base = b64[name]
    flat = base.ravel().copy()
    grad = np.zeros_like(flat)
    idx = range(flat.size) if indices is None else indices

    def at(i, value):
        flat[i] = value
        b64[name] = flat.reshape(base.shape)
        return Trace(graph, b64, [loss])

    for i in idx:
        orig = flat[i]
        step = h
        for _ in range(KINK_REFINEMENTS + 1):
            up, down = at(i, orig + step), at(i, orig - step)
            if _same_side(_kinks(up), _kinks(down)):
                break
            step /= 10
        flat[i] = orig
        grad[i] = (float(up[loss]) - float(down[loss])) / (2 * step)
    b64[name] = base
    return grad.reshape(base.shape)


def finite_diff_check(
    graph: OpGraph,
    bindings: Mapping[str, np.ndarray],
    loss: str | int,
    h: float = 1e-3,
    tol: float = 5e-3,
    params: Sequence[str] | None = None,
    max_entries: int | None = None,
    seed: int = 0,
    analytic: Mapping[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare ``backward`` against central differences, parameter by parameter.

    Both routes run in float64. ``max_entries`` caps how many entries of
    each parameter are probed (chosen with ``seed``); ``analytic`` lets a
    test inject precomputed gradients, e.g. a deliberately corrupted set.
    """
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    names = list(graph.params) if params is None else list(params)
    b64 = {k: np.asarray(v, dtype=np.float64) for k, v in bindings.items()}
    if analytic is None:
        analytic = backward(graph, b64, loss, names)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name in names:
        if name not in b64:
            raise GraphError(f"parameter {name!r} is not bound")
        size = b64[name].size
        if max_entries is not None and size > max_entries:
            idx = np.sort(rng.choice(size, size=max_entries, replace=False))
        else:
            idx = np.arange(size)
        num = numeric_grad(graph, b64, loss, name, h, idx)
        ana = np.asarray(analytic[name], dtype=np.float64).ravel()[idx]
        report.errors[name] = relative_error(ana, num.ravel()[idx])
    return report
