"""SRAE networks: shared trunk, content/domain streams, decoder, latent discriminators.

Parameters live in a :class:`ParamStore` split into disjoint groups so that
each training update can touch exactly one subset:

=========  ===========================================
theta_phi  shared encoder trunk (stride-2 convs)
theta_c    content stream -> mu_c, logvar_c  (a x b x k)
theta_d    domain stream  -> mu_d, logvar_d  (1 x 1 x j)
theta_g    decoder over concat(z_c, tile(z_d))
theta_q    content discriminator q_c(z_c)
theta_qd   domain discriminator q_d(z_d), two-disc variant only
=========  ===========================================
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import OpGraph, ShapeError, Trace

VARIANTS = ("one-disc", "two-disc")
GROUPS = ("theta_phi", "theta_c", "theta_d", "theta_g", "theta_q", "theta_qd")
DISC_POOLS = ("gap", "flatten")


@dataclass(frozen=True)
class SraeHyper:
    image_h: int = 32
    image_w: int = 32
    image_c: int = 1
    a: int = 4
    b: int = 4
    k: int = 8
    j: int = 4
    m: int = 2
    trunk_width: int = 32
    stream_width: int = 32
    decoder_width: int = 32
    disc_width: int = 32
    disc_pool: str = "flatten"

    def __post_init__(self):
        for name in ("image_h", "image_w", "image_c", "a", "b", "k", "j",
                     "trunk_width", "stream_width", "decoder_width", "disc_width"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.m < 2:
            raise ValueError(f"m must be at least 2, got {self.m}")
        if self.disc_pool not in DISC_POOLS:
            raise ValueError(f"disc_pool must be one of {DISC_POOLS}, got {self.disc_pool!r}")
        if self.image_h % self.a or self.image_w % self.b:
            raise ValueError(f"image {self.image_h}x{self.image_w} is not a multiple of latent {self.a}x{self.b}")
        fh, fw = self.image_h // self.a, self.image_w // self.b
        if fh != fw or fh & (fh - 1):
            raise ValueError(
                f"image {self.image_h}x{self.image_w} must downsample to {self.a}x{self.b} "
                "by the same power of two on both axes"
            )

    @property
    def n_down(self) -> int:
        """Number of stride-2 trunk convs (and decoder upsampling stages)."""
        return int(math.log2(self.image_h // self.a))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.image_h, self.image_w, self.image_c)

    @property
    def content_shape(self) -> tuple[int, int, int]:
        return (self.a, self.b, self.k)

    @property
    def disc_in(self) -> dict[str, int]:
        spatial = 1 if self.disc_pool == "gap" else self.a * self.b
        return {"theta_q": spatial * self.k, "theta_qd": spatial * self.j}


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    return variant


# ------------------------------------------------------------------ params


def param_specs(hyper: SraeHyper, variant: str) -> dict[str, dict[str, tuple[tuple[int, ...], bool]]]:
    """group -> name -> (shape, followed_by_leaky_relu), in init order."""
    check_variant(variant)
    tw, sw, dw, qw = hyper.trunk_width, hyper.stream_width, hyper.decoder_width, hyper.disc_width
    specs: dict[str, dict] = {g: {} for g in GROUPS if g != "theta_qd" or variant == "two-disc"}

    def conv(group, name, kh, cin, cout, hidden=True):
        specs[group][f"{name}/w"] = ((kh, kh, cin, cout), hidden)
        specs[group][f"{name}/b"] = ((cout,), hidden)

    def fc(group, name, din, dout, hidden=True):
        specs[group][f"{name}/w"] = ((din, dout), hidden)
        specs[group][f"{name}/b"] = ((dout,), hidden)

    cin = hyper.image_c
    for i in range(1, hyper.n_down + 1):
        conv("theta_phi", f"conv{i}", 3, cin, tw)
        cin = tw
    conv("theta_c", "conv", 3, tw, sw)
    conv("theta_c", "mu", 1, sw, hyper.k, hidden=False)
    conv("theta_c", "logvar", 1, sw, hyper.k, hidden=False)
    conv("theta_d", "conv", 3, tw, sw)
    fc("theta_d", "mu", sw, hyper.j, hidden=False)
    fc("theta_d", "logvar", sw, hyper.j, hidden=False)
    conv("theta_g", "conv0", 3, hyper.k + hyper.j, dw)
    for i in range(1, hyper.n_down + 1):
        last = i == hyper.n_down
        conv("theta_g", f"conv{i}", 3, dw, hyper.image_c if last else dw, hidden=not last)
    for group in ("theta_q", "theta_qd"):
        if group in specs:
            fc(group, "fc1", hyper.disc_in[group], qw)
            fc(group, "fc2", qw, hyper.m, hidden=False)
    return specs


@dataclass
class ParamStore:
    """Named parameter tensors, grouped; flat names are ``group/layer/w``."""

    groups: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.groups) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups: {sorted(unknown)}")

    @property
    def variant(self) -> str:
        return "two-disc" if "theta_qd" in self.groups else "one-disc"

    def flat(self) -> dict[str, np.ndarray]:
        return {f"{g}/{n}": t for g in GROUPS if g in self.groups for n, t in self.groups[g].items()}

    def names(self, *groups: str) -> list[str]:
        return [f"{g}/{n}" for g in groups if g in self.groups for n in self.groups[g]]

    def copy(self) -> "ParamStore":
        return ParamStore({g: {n: t.copy() for n, t in ts.items()} for g, ts in self.groups.items()})

    @classmethod
    def from_flat(cls, flat: dict[str, np.ndarray]) -> "ParamStore":
        groups: dict[str, dict[str, np.ndarray]] = {}
        for key, t in flat.items():
            group, _, name = key.partition("/")
            groups.setdefault(group, {})[name] = t
        unknown = set(groups) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
        return cls({g: groups[g] for g in GROUPS if g in groups})

    def apply(self, grads: dict[str, np.ndarray], step: float) -> None:
        """In-place ``p += step * grad`` for each flat name in ``grads``."""
        for key, g in grads.items():
            group, _, name = key.partition("/")
            t = self.groups[group][name]
            t += np.float32(step) * g.astype(t.dtype, copy=False)

    def equal(self, other: "ParamStore") -> bool:
        a, b = self.flat(), other.flat()
        return a.keys() == b.keys() and all(
            a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a
        )


def init_params(hyper: SraeHyper, variant: str = "two-disc", seed: int = 0) -> ParamStore:
    """Fan-in scaled uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    groups: dict[str, dict[str, np.ndarray]] = {}
    for group, entries in param_specs(hyper, variant).items():
        groups[group] = {}
        for name, (shape, hidden) in entries.items():
            if name.endswith("/b"):
                groups[group][name] = np.zeros(shape, dtype=np.float32)
                continue
            fan_in = int(np.prod(shape[:-1]))
            gain = 2.0 / (1 + 0.2**2) if hidden else 1.0
            bound = math.sqrt(3.0 * gain / fan_in)
            groups[group][name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return ParamStore(groups)


def infer_hyper(base: SraeHyper, params: ParamStore) -> SraeHyper:
    """Recover layer widths and discriminator pooling from tensor shapes."""
    g = params.groups
    q_in = g["theta_q"]["fc1/w"].shape[0]
    pool = "gap" if q_in == base.k else "flatten"
    return SraeHyper(
        image_h=base.image_h, image_w=base.image_w, image_c=base.image_c,
        a=base.a, b=base.b, k=base.k, j=base.j, m=base.m,
        trunk_width=g["theta_phi"]["conv1/w"].shape[-1],
        stream_width=g["theta_c"]["conv/w"].shape[-1],
        decoder_width=g["theta_g"]["conv0/w"].shape[-1],
        disc_width=g["theta_q"]["fc1/w"].shape[-1],
        disc_pool=pool,
    )


# ------------------------------------------------------------ graph pieces


def _conv(g: OpGraph, x, prefix, stride=1, pad=1, act="leaky"):
    out = g.conv2d(x, g.param(f"{prefix}/w"), g.param(f"{prefix}/b"), stride=stride, pad=pad, label=prefix)
    if act == "leaky":
        out = g.leaky_relu(out)
    elif act == "sigmoid":
        out = g.sigmoid(out)
    return out


def _dense(g: OpGraph, x, prefix, act=None):
    out = g.dense(x, g.param(f"{prefix}/w"), g.param(f"{prefix}/b"), label=prefix)
    return g.leaky_relu(out) if act == "leaky" else out


def _reparam(g: OpGraph, mu, logvar, eps, label):
    std = g.exp(g.scale(logvar, 0.5))
    return g.add(mu, g.mul(eps, std), label=label)


def add_encoder(g: OpGraph, hyper: SraeHyper, x: int) -> dict[str, int]:
    """Trunk plus both streams. Needs inputs ``eps_c`` (N,a,b,k) and ``eps_d`` (N,1,1,j)."""
    h = x
    for i in range(1, hyper.n_down + 1):
        h = _conv(g, h, f"theta_phi/conv{i}", stride=2)
    g.output("trunk", h)

    hc = _conv(g, h, "theta_c/conv")
    mu_c = _conv(g, hc, "theta_c/mu", pad=0, act=None)
    logvar_c = _conv(g, hc, "theta_c/logvar", pad=0, act=None)
    z_c = _reparam(g, mu_c, logvar_c, g.input("eps_c"), "z_c")

    hd = g.global_avg_pool(_conv(g, h, "theta_d/conv"))
    mu_d = g.reshape(_dense(g, hd, "theta_d/mu"), (1, 1, hyper.j))
    logvar_d = g.reshape(_dense(g, hd, "theta_d/logvar"), (1, 1, hyper.j))
    z_d_vec = _reparam(g, mu_d, logvar_d, g.input("eps_d"), "z_d_vec")
    z_d = g.tile(z_d_vec, hyper.a, hyper.b, label="z_d")

    nodes = dict(mu_c=mu_c, logvar_c=logvar_c, z_c=z_c, mu_d_vec=mu_d, logvar_d_vec=logvar_d,
                 z_d_vec=z_d_vec, z_d=z_d)
    for name, nid in nodes.items():
        g.output(name, nid)
    return nodes


def add_decoder(g: OpGraph, hyper: SraeHyper, z_c: int, z_d: int) -> int:
    h = _conv(g, g.concat([z_c, z_d], label="z"), "theta_g/conv0")
    for i in range(1, hyper.n_down + 1):
        last = i == hyper.n_down
        h = _conv(g, g.upsample2x(h), f"theta_g/conv{i}", act="sigmoid" if last else "leaky")
    return g.output("x_hat", h)


def add_discriminator(g: OpGraph, hyper: SraeHyper, z: int, group: str, channels: int) -> int:
    """Softmax over m domains; the output node is registered as q_c / q_d."""
    if hyper.disc_pool == "gap":
        feat = g.global_avg_pool(z)
    else:
        feat = g.reshape(z, (hyper.a * hyper.b * channels,))
    h = _dense(g, feat, f"{group}/fc1", act="leaky")
    q = g.softmax(_dense(g, h, f"{group}/fc2"))
    return g.output("q_c" if group == "theta_q" else "q_d", q)


@functools.lru_cache(maxsize=None)
def encoder_graph(hyper: SraeHyper, variant: str) -> OpGraph:
    """Encoder, decoder and discriminator heads, without losses."""
    g = OpGraph()
    enc = add_encoder(g, hyper, g.input("x"))
    add_decoder(g, hyper, enc["z_c"], enc["z_d"])
    add_discriminator(g, hyper, enc["z_c"], "theta_q", hyper.k)
    if check_variant(variant) == "two-disc":
        add_discriminator(g, hyper, enc["z_d"], "theta_qd", hyper.j)
    return g


@functools.lru_cache(maxsize=None)
def decoder_graph(hyper: SraeHyper) -> OpGraph:
    g = OpGraph()
    add_decoder(g, hyper, g.input("z_c"), g.input("z_d"))
    return g


@functools.lru_cache(maxsize=None)
def discriminator_graph(hyper: SraeHyper, group: str) -> OpGraph:
    g = OpGraph()
    channels = hyper.k if group == "theta_q" else hyper.j
    add_discriminator(g, hyper, g.input("z"), group, channels)
    return g


# --------------------------------------------------------------- public API


@dataclass
class LatentPair:
    mu_c: np.ndarray
    logvar_c: np.ndarray
    mu_d_vec: np.ndarray
    logvar_d_vec: np.ndarray
    z_c: np.ndarray
    z_d: np.ndarray


def _as_batch(x: np.ndarray, shape: tuple[int, ...], what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float32)
    if x.shape == shape:
        return x[None], True
    if x.ndim == len(shape) + 1 and x.shape[1:] == shape:
        return x, False
    raise ShapeError(f"{what} must have shape {shape} or (N, *{shape}), got {x.shape}")


def tile_domain(z_vec: np.ndarray, a: int, b: int) -> np.ndarray:
    """Repeat a 1x1xj (or batched N x 1x1xj) code over an a x b grid."""
    z_vec = np.asarray(z_vec)
    single = z_vec.ndim == 3
    zb = z_vec[None] if single else z_vec
    if zb.ndim != 4 or zb.shape[1:3] != (1, 1):
        raise ShapeError(f"domain code must be 1x1xj, got {z_vec.shape}")
    out = np.ascontiguousarray(np.broadcast_to(zb, (zb.shape[0], a, b, zb.shape[3])))
    return out[0] if single else out


def encode(params: ParamStore, hyper: SraeHyper, x, eps_c=None, eps_d=None) -> LatentPair:
    """Mean and sampled codes for one image (H,W,C) or a batch (N,H,W,C).

    ``eps_c`` / ``eps_d`` default to zero, giving the mean encoding. ``eps_d``
    has the pre-tiling shape 1x1xj per example.
    """
    xb, single = _as_batch(x, hyper.image_shape, "x")
    n = xb.shape[0]
    bind = dict(params.flat())
    bind["x"] = xb
    for key, val, shape in (("eps_c", eps_c, hyper.content_shape), ("eps_d", eps_d, (1, 1, hyper.j))):
        if val is None:
            bind[key] = np.zeros((n,) + shape, dtype=np.float32)
        else:
            eb, _ = _as_batch(val, shape, key)
            if eb.shape[0] != n:
                raise ShapeError(f"{key} batch size {eb.shape[0]} != {n}")
            bind[key] = eb
    names = ["mu_c", "logvar_c", "mu_d_vec", "logvar_d_vec", "z_c", "z_d"]
    trace = Trace(encoder_graph(hyper, params.variant), bind, names)
    out = {k: trace[k] for k in names}
    if single:
        out = {k: v[0] for k, v in out.items()}
    return LatentPair(**out)


def decode(params: ParamStore, hyper: SraeHyper, z_c, z_d) -> np.ndarray:
    zc, single = _as_batch(z_c, hyper.content_shape, "z_c")
    zd, _ = _as_batch(z_d, (hyper.a, hyper.b, hyper.j), "z_d")
    if zc.shape[0] != zd.shape[0]:
        raise ShapeError(f"z_c batch {zc.shape[0]} != z_d batch {zd.shape[0]}")
    bind = {f"theta_g/{k}": v for k, v in params.groups["theta_g"].items()}
    bind.update(z_c=zc, z_d=zd)
    out = Trace(decoder_graph(hyper), bind, ["x_hat"])["x_hat"]
    return out[0] if single else out


def discriminate(params: ParamStore, hyper: SraeHyper, z, group: str = "theta_q") -> np.ndarray:
    """Domain probabilities from a content (theta_q) or domain (theta_qd) code."""
    if group not in params.groups or group not in ("theta_q", "theta_qd"):
        raise ValueError(f"no discriminator group {group!r} in this parameter store")
    channels = hyper.k if group == "theta_q" else hyper.j
    zb, single = _as_batch(z, (hyper.a, hyper.b, channels), "z")
    bind = {f"{group}/{k}": v for k, v in params.groups[group].items()}
    bind["z"] = zb
    key = "q_c" if group == "theta_q" else "q_d"
    out = Trace(discriminator_graph(hyper, group), bind, [key])[key]
    return out[0] if single else out
