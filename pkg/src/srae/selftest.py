"""Built-in self checks: per-operator gradient cases and model invariants.

Every operator case ends in ``loss = sum(op_output * r)`` with a fixed
random ``r`` so that all output entries contribute with distinct weights.
:func:`run_selftest` is what ``srae selftest`` executes; the pytest suite
covers the same ground in more depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import OpGraph, Trace, finite_diff_check


def _weighted_loss(g, out, rng, shape, bind):
    bind["r"] = rng.standard_normal(shape)
    g.output("loss", g.sum(g.mul(out, g.input("r"))))


def _unary(op, make_x, **kw):
    def build(g, rng, bind):
        x = g.param("x")
        bind["x"] = make_x(rng)
        return getattr(g, op)(x, **kw), None

    return build


def _binary(op, shape_a, shape_b):
    def build(g, rng, bind):
        a, b = g.param("a"), g.param("b")
        bind["a"] = rng.standard_normal(shape_a)
        bind["b"] = rng.standard_normal(shape_b)
        return getattr(g, op)(a, b), None

    return build


def _conv(stride, k, pad):
    def build(g, rng, bind):
        bind["x"] = rng.standard_normal((2, 6, 6, 3))
        bind["w"] = rng.standard_normal((k, k, 3, 4)) * 0.5
        bind["bias"] = rng.standard_normal(4)
        return g.conv2d(g.param("x"), g.param("w"), g.param("bias"), stride=stride, pad=pad), None

    return build


def _dense(g, rng, bind):
    bind["x"] = rng.standard_normal((3, 5))
    bind["w"] = rng.standard_normal((5, 4))
    bind["bias"] = rng.standard_normal(4)
    return g.dense(g.param("x"), g.param("w"), g.param("bias")), None


def _concat(g, rng, bind):
    bind["a"] = rng.standard_normal((2, 3, 3, 2))
    bind["b"] = rng.standard_normal((2, 3, 3, 3))
    return g.concat([g.param("a"), g.param("b")]), None


def _away_from_zero(shape):
    def make(rng):
        x = rng.uniform(0.05, 2.0, size=shape)
        return x * rng.choice([-1.0, 1.0], size=shape)

    return make


OP_CASES = {
    "conv2d": _conv(1, 3, 1),
    "conv2d_s2": _conv(2, 3, 1),
    "conv2d_1x1": _conv(1, 1, 0),
    "upsample2x": _unary("upsample2x", lambda r: r.standard_normal((2, 3, 3, 2))),
    "dense": _dense,
    "leaky_relu": _unary("leaky_relu", _away_from_zero((3, 7))),
    "sigmoid": _unary("sigmoid", lambda r: r.standard_normal((3, 7)) * 2),
    "tanh": _unary("tanh", lambda r: r.standard_normal((3, 7))),
    "exp": _unary("exp", lambda r: r.standard_normal((3, 7))),
    "log": _unary("log", lambda r: r.uniform(0.2, 3.0, size=(3, 7))),
    "log_floor": _unary("log", lambda r: r.uniform(0.2, 3.0, size=(3, 7)), floor=1e-7),
    "softmax": _unary("softmax", lambda r: r.standard_normal((4, 5)) * 2),
    "add": _binary("add", (2, 3, 4), (2, 3, 4)),
    "add_broadcast": _binary("add", (2, 3, 4), (4,)),
    "sub": _binary("sub", (2, 3, 4), (2, 1, 4)),
    "mul": _binary("mul", (2, 3, 4), (2, 3, 4)),
    "mul_broadcast": _binary("mul", (2, 3, 4), (1, 3, 1)),
    "scale": _unary("scale", lambda r: r.standard_normal((3, 4)), factor=-0.7),
    "tile": _unary("tile", lambda r: r.standard_normal((2, 1, 1, 3)), a=3, b=2),
    "global_avg_pool": _unary("global_avg_pool", lambda r: r.standard_normal((2, 3, 4, 5))),
    "concat": _concat,
    "reshape": _unary("reshape", lambda r: r.standard_normal((2, 2, 3, 4)), shape=(24,)),
    "sum_axis": _unary("sum", lambda r: r.standard_normal((3, 4, 5)), axis=-1),
    "sum_all": _unary("sum", lambda r: r.standard_normal((3, 4))),
    "mean": _unary("mean", lambda r: r.standard_normal((3, 4))),
    "sum_sq": _unary("sum_sq", lambda r: r.standard_normal((3, 4))),
}


def build_case(name, seed):
    rng = np.random.default_rng(seed)
    g = OpGraph()
    bind = {}
    out, _ = OP_CASES[name](g, rng, bind)
    # one evaluation to learn the output shape for the weighting tensor
    probe = OpGraph(list(g.nodes), dict(g.inputs), dict(g.params), {"out": out})
    shape = Trace(probe, bind, ["out"])["out"].shape
    _weighted_loss(g, out, rng, shape, bind)
    return g, bind


# ----------------------------------------------------------------- runner


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


def _gradient_checks(seeds: range) -> list[CheckResult]:
    out = []
    for name in sorted(OP_CASES):
        worst, ok = 0.0, True
        for seed in seeds:
            g, bind = build_case(name, seed)
            report = finite_diff_check(g, bind, "loss", h=1e-3, tol=5e-3)
            worst, ok = max(worst, report.max_error), ok and report.ok
        out.append(CheckResult(f"grad/{name}", ok, f"max rel err {worst:.2e}"))
    return out


def _model_checks(seeds: range) -> list[CheckResult]:
    # imported here: the model stack is heavier than the op cases above
    from .data import Batch
    from .losses import FeatureExtractor, graph_bindings, srae_losses, training_graph
    from .model import SraeHyper, discriminate, encode, init_params
    from .training import TrainConfig, draw_eps, train_step

    hyper = SraeHyper(image_h=8, image_w=8, a=2, b=2, k=3, j=2, m=2,
                      trunk_width=4, stream_width=4, decoder_width=4, disc_width=5)
    ext = FeatureExtractor.create(1, widths=(3, 4), seed=7)
    out = []
    for variant in ("one-disc", "two-disc"):
        worst, ok = 0.0, True
        graph = training_graph(hyper, variant, ext.signature(), 0.0)
        for seed in seeds:
            rng = np.random.default_rng(seed)
            params = init_params(hyper, variant, seed)
            batch = Batch(rng.uniform(size=(4,) + hyper.image_shape).astype(np.float32), np.arange(4) % 2)
            bind = graph_bindings(params, ext, batch, draw_eps(hyper, 4, rng), hyper.m)
            for loss in ("recon", "l_q", "l_c"):
                report = finite_diff_check(graph, bind, loss, max_entries=3, seed=seed)
                worst, ok = max(worst, report.max_error), ok and report.ok
        out.append(CheckResult(f"grad/full-{variant}", ok, f"max rel err {worst:.2e}"))

        params = init_params(hyper, variant, 0)
        rng = np.random.default_rng(0)
        batch = Batch(rng.uniform(size=(4,) + hyper.image_shape).astype(np.float32), np.arange(4) % 2)
        snaps = []
        train_step(params, hyper, ext, batch, TrainConfig(variant=variant), rng, snaps)
        allowed = {"discriminator": {"theta_q", "theta_qd"}, "reconstruction": {"theta_phi", "theta_c", "theta_d", "theta_g"},
                   "content": {"theta_c"}, "domain": {"theta_d"}}
        prev, isolated = params.flat(), True
        for name, snap in snaps:
            cur = snap.flat()
            changed = {k.split("/")[0] for k in cur if cur[k].tobytes() != prev[k].tobytes()}
            isolated &= bool(changed) and changed <= allowed[name]
            prev = cur
        out.append(CheckResult(f"isolation/{variant}", isolated, " -> ".join(n for n, _ in snaps)))

        eps = draw_eps(hyper, 4, rng)
        lat = encode(params, hyper, batch.images, eps["eps_c"], eps["eps_d"])
        out.append(CheckResult(f"z_d-constant/{variant}", bool(np.all(lat.z_d == lat.z_d[:, :1, :1, :]))))
        q = discriminate(params, hyper, lat.z_c)
        out.append(CheckResult(f"softmax/{variant}", bool(np.allclose(q.sum(axis=1), 1, atol=1e-5))))
        h = srae_losses(params, hyper, ext, batch, eps, variant).l_c_entropy
        out.append(CheckResult(f"entropy-range/{variant}", 0 <= h <= math.log(hyper.m) + 1e-6, f"H={h:.4f}"))
    return out


def run_selftest(seeds: int = 5) -> list[CheckResult]:
    """Gradient checks for every operator and both full loss graphs, plus invariants."""
    return _gradient_checks(range(seeds)) + _model_checks(range(seeds))
