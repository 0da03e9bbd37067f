"""SRAE objectives and the training graph that computes them.

Sign conventions (all quantities returned are the standard signed ones):

* discriminators minimise cross-entropy  -sum_i p_i log q_i
* the content stream maximises entropy   H(q_c) = -sum_i q_i log q_i
* the domain stream minimises q_d's cross-entropy (two-disc variant)
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .diffcore import OpGraph, ShapeError, Trace
from .model import ParamStore, SraeHyper, add_decoder, add_discriminator, add_encoder, check_variant

PROB_FLOOR = 1e-7


@dataclass(frozen=True)
class FeatureExtractor:
    """Fixed random conv stack standing in for a pretrained perceptual network.

    Tap 0 is the raw image; tap i > 0 is the output of stride-2 conv i
    followed by leaky-ReLU. Weights are read-only arrays and enter graphs
    as inputs, never as parameters, so no update can reach them.
    """

    widths: tuple[int, ...] = (8, 16, 16)
    in_channels: int = 1
    seed: int = 1234
    weights: tuple[tuple[str, np.ndarray], ...] = ()

    @classmethod
    def create(cls, in_channels: int = 1, widths=(8, 16, 16), seed: int = 1234) -> "FeatureExtractor":
        rng = np.random.default_rng(seed)
        weights, cin = [], in_channels
        for i, w in enumerate(widths, start=1):
            bound = math.sqrt(6.0 / ((1 + 0.2**2) * 9 * cin))
            kernel = rng.uniform(-bound, bound, size=(3, 3, cin, w)).astype(np.float32)
            bias = np.zeros(w, dtype=np.float32)
            for arr in (kernel, bias):
                arr.flags.writeable = False
            weights += [(f"ext/conv{i}/w", kernel), (f"ext/conv{i}/b", bias)]
            cin = w
        return cls(tuple(widths), in_channels, seed, tuple(weights))

    @property
    def n(self) -> int:
        return len(self.widths)

    def bindings(self) -> dict[str, np.ndarray]:
        return dict(self.weights)

    def signature(self) -> tuple:
        return (self.widths, self.in_channels)

    def features(self, x: np.ndarray) -> list[np.ndarray]:
        """All taps (raw image first) for a batch (N,H,W,C) or single image."""
        x = np.asarray(x, dtype=np.float32)
        single = x.ndim == 3
        xb = x[None] if single else x
        g = _feature_graph(self.signature())
        bind = self.bindings()
        bind["x"] = xb
        trace = Trace(g, bind, list(g.outputs))
        feats = [trace[f"tap{i}"] for i in range(self.n + 1)]
        return [f[0] for f in feats] if single else feats


def add_features(g: OpGraph, x: int, widths: tuple[int, ...], inputs: dict[str, int]) -> list[int]:
    """Feature taps of ``x``; extractor weights are shared via ``inputs``."""
    taps, h = [x], x
    for i in range(1, len(widths) + 1):
        names = (f"ext/conv{i}/w", f"ext/conv{i}/b")
        for name in names:
            if name not in inputs:
                inputs[name] = g.input(name)
        h = g.leaky_relu(g.conv2d(h, inputs[names[0]], inputs[names[1]], stride=2, label=f"ext/conv{i}"))
        taps.append(h)
    return taps


@functools.lru_cache(maxsize=None)
def _feature_graph(signature) -> OpGraph:
    widths, _ = signature
    g = OpGraph()
    for i, tap in enumerate(add_features(g, g.input("x"), widths, {})):
        g.output(f"tap{i}", tap)
    return g


def add_perceptual(g: OpGraph, taps_x: list[int], taps_xh: list[int]) -> int:
    """sum over taps of mean((P(x)^i - P(x_hat)^i)^2)."""
    total = None
    for i, (a, b) in enumerate(zip(taps_x, taps_xh)):
        d = g.sub(a, b)
        term = g.mean(g.mul(d, d), label=f"l_r/tap{i}")
        total = term if total is None else g.add(total, term)
    return total


def add_cross_entropy(g: OpGraph, q: int, onehot: int, label: str) -> int:
    """Batch mean of -log(max(q[y], floor))."""
    per_example = g.sum(g.mul(onehot, g.log(q, floor=PROB_FLOOR)), axis=-1)
    return g.scale(g.mean(per_example), -1.0, label=label)


def add_entropy(g: OpGraph, q: int) -> int:
    """Per-example entropy -sum_i q_i log(max(q_i, floor)), shape (N,)."""
    return g.scale(g.sum(g.mul(q, g.log(q, floor=PROB_FLOOR)), axis=-1), -1.0, label="entropy")


def add_kl(g: OpGraph, mu: int, logvar: int, size: int, one: int) -> int:
    """Per-example KL(N(mu, exp(logvar)) || N(0, 1)) over ``size`` entries, shape (N,)."""
    inner = g.sub(g.sub(g.add(g.mul(mu, mu), g.exp(logvar)), logvar), one)
    return g.scale(g.sum(g.reshape(inner, (size,)), axis=-1), 0.5)


@functools.lru_cache(maxsize=None)
def training_graph(hyper: SraeHyper, variant: str, ext_signature: tuple, beta_kl: float = 0.0) -> OpGraph:
    """Full SRAE graph with every loss registered as an output.

    Inputs: x, eps_c, eps_d, y (one-hot), ext/* extractor weights.
    Outputs include l_r, l_q_c, l_c (mean entropy), entropy (per example),
    l_q_d / l_q (two-disc), kl and recon (= l_r + beta_kl * kl).
    """
    check_variant(variant)
    widths, _ = ext_signature
    g = OpGraph()
    x, y = g.input("x"), g.input("y")
    enc = add_encoder(g, hyper, x)
    x_hat = add_decoder(g, hyper, enc["z_c"], enc["z_d"])
    ext_inputs: dict[str, int] = {}
    taps_x = add_features(g, x, widths, ext_inputs)
    taps_xh = add_features(g, x_hat, widths, ext_inputs)
    l_r = g.output("l_r", add_perceptual(g, taps_x, taps_xh))

    q_c = add_discriminator(g, hyper, enc["z_c"], "theta_q", hyper.k)
    l_q_c = g.output("l_q_c", add_cross_entropy(g, q_c, y, "l_q_c"))
    ent = g.output("entropy", add_entropy(g, q_c))
    g.output("l_c", g.mean(ent, label="l_c"))
    if variant == "two-disc":
        q_d = add_discriminator(g, hyper, enc["z_d"], "theta_qd", hyper.j)
        l_q_d = g.output("l_q_d", add_cross_entropy(g, q_d, y, "l_q_d"))
        g.output("l_q", g.add(l_q_c, l_q_d, label="l_q"))
    else:
        g.output("l_q", l_q_c)

    one = g.input("one")
    kl_c = add_kl(g, enc["mu_c"], enc["logvar_c"], hyper.a * hyper.b * hyper.k, one)
    kl_d = add_kl(g, enc["mu_d_vec"], enc["logvar_d_vec"], hyper.j, one)
    kl = g.output("kl", g.mean(g.add(kl_c, kl_d), label="kl"))
    if beta_kl > 0:
        g.output("recon", g.add(l_r, g.scale(kl, beta_kl), label="recon"))
    else:
        g.output("recon", l_r)
    return g


# ------------------------------------------------------------ scalar losses


def _check_prob(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1:
        raise ValueError(f"expected a probability vector, got shape {q.shape}")
    if abs(q.sum() - 1.0) > 1e-5 or np.any(q < 0):
        raise ValueError(f"not a probability vector (sum {q.sum():.7f})")
    return q


def cross_entropy(q_out: np.ndarray, label: int) -> float:
    q = _check_prob(q_out)
    if not 0 <= label < len(q):
        raise ValueError(f"label {label} out of range for {len(q)} domains")
    return float(-np.log(max(q[label], PROB_FLOOR)))


def entropy(q_out: np.ndarray) -> float:
    q = _check_prob(q_out)
    return float(-np.sum(q * np.log(np.maximum(q, PROB_FLOOR))))


def perceptual_from_features(feats_x: list[np.ndarray], feats_xh: list[np.ndarray]) -> float:
    """Hook for externally computed feature maps (e.g. a pretrained network)."""
    if len(feats_x) != len(feats_xh):
        raise ShapeError(f"{len(feats_x)} feature maps vs {len(feats_xh)}")
    total = 0.0
    for a, b in zip(feats_x, feats_xh):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise ShapeError(f"feature shapes differ: {a.shape} vs {b.shape}")
        total += float(np.mean((a - b) ** 2))
    return total


def perceptual_loss(p: FeatureExtractor, x: np.ndarray, x_hat: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float32)
    x_hat = np.asarray(x_hat, dtype=np.float32)
    if x.shape != x_hat.shape:
        raise ShapeError(f"x {x.shape} and x_hat {x_hat.shape} differ")
    return perceptual_from_features(p.features(x), p.features(x_hat))


@dataclass
class LossReport:
    l_r: float
    l_q_c: float
    l_c_entropy: float
    l_q_d: float | None = None
    kl: float | None = None

    def terms(self) -> dict[str, float]:
        return {k: v for k, v in vars(self).items() if v is not None}


def graph_bindings(params: ParamStore, extractor: FeatureExtractor, batch, eps: dict, m: int) -> dict:
    bind = params.flat()
    bind.update(extractor.bindings())
    bind["x"] = np.asarray(batch.images, dtype=np.float32)
    bind["y"] = batch.onehot(m)
    bind["eps_c"] = eps["eps_c"]
    bind["eps_d"] = eps["eps_d"]
    bind["one"] = np.ones((), dtype=np.float32)
    return bind


def report_from_trace(trace: Trace, variant: str, beta_kl: float = 0.0) -> LossReport:
    return LossReport(
        l_r=float(trace["l_r"]),
        l_q_c=float(trace["l_q_c"]),
        l_c_entropy=float(trace["l_c"]),
        l_q_d=float(trace["l_q_d"]) if variant == "two-disc" else None,
        kl=float(trace["kl"]) if beta_kl > 0 else None,
    )


def srae_losses(params: ParamStore, hyper: SraeHyper, extractor: FeatureExtractor, batch, eps: dict,
                variant: str, beta_kl: float = 0.0) -> LossReport:
    """Every loss term on ``batch`` (batch means of per-example terms)."""
    if params.variant != check_variant(variant):
        raise ValueError(f"parameters are {params.variant}, requested {variant}")
    g = training_graph(hyper, variant, extractor.signature(), beta_kl)
    names = ["l_r", "l_q_c", "l_c", "kl"] + (["l_q_d"] if variant == "two-disc" else [])
    trace = Trace(g, graph_bindings(params, extractor, batch, eps, hyper.m), names)
    return report_from_trace(trace, variant, beta_kl)
