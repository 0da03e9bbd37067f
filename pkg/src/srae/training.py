"""Adversarial training loop, metrics log and binary checkpoints.

One ``train_step`` applies, in order:

1. discriminator descent on L_q^c (theta_q) and L_q^d (theta_qd);
2. reconstruction descent on L_r (+ beta * KL) over theta_phi, theta_c,
   theta_d and theta_g;
3. entropy ascent on H(q_c(z_c)) over theta_c only;
4. (two-disc) cross-entropy descent on L_q^d over theta_d only.

All updates are plain SGD and touch only their own parameter group.
"""

from __future__ import annotations

import csv
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Batch, Dataset, sample_batch
from .diffcore import NumericError, Trace
from .losses import FeatureExtractor, LossReport, graph_bindings, report_from_trace, training_graph
from .model import ParamStore, SraeHyper, check_variant, infer_hyper, init_params

log = logging.getLogger(__name__)

AE_GROUPS = ("theta_phi", "theta_c", "theta_d", "theta_g")
DISC_GROUPS = ("theta_q", "theta_qd")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "two-disc"
    epochs: int = 30
    batch_size: int = 32
    lr_recon: float = 1e-2
    alpha1: float = 1e-2
    alpha2: float = 1e-2
    lr_disc: float = 1e-2
    disc_steps_per_ae_step: int = 1
    beta_kl: float = 0.0
    seed: int = 0
    extractor_seed: int = 1234
    checkpoint_every: int | None = None

    def __post_init__(self):
        check_variant(self.variant)
        for name in ("lr_recon", "alpha1", "alpha2", "lr_disc"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.disc_steps_per_ae_step < 1:
            raise ValueError("disc_steps_per_ae_step must be >= 1")
        if self.beta_kl < 0:
            raise ValueError(f"beta_kl must be >= 0, got {self.beta_kl}")
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")


# --------------------------------------------------------------------- step


def draw_eps(hyper: SraeHyper, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "eps_c": rng.standard_normal((n,) + hyper.content_shape, dtype=np.float32),
        "eps_d": rng.standard_normal((n, 1, 1, hyper.j), dtype=np.float32),
    }


def _trace(graph, bind, targets, what):
    try:
        return Trace(graph, bind, targets)
    except NumericError as exc:
        raise TrainingError(f"non-finite value while computing {what}: {exc}") from None


def train_step(
    params: ParamStore,
    hyper: SraeHyper,
    extractor: FeatureExtractor,
    batch: Batch,
    config: TrainConfig,
    rng: np.random.Generator,
    snapshots: list | None = None,
) -> tuple[ParamStore, LossReport]:
    """One round of the four updates; returns new parameters and pre-update losses.

    If ``snapshots`` is a list, ``(sub_step_name, params_copy)`` is appended
    after each sub-step.
    """
    variant = config.variant
    if params.variant != variant:
        raise ValueError(f"parameters are {params.variant}, config says {variant}")
    two = variant == "two-disc"
    new = params.copy()
    graph = training_graph(hyper, variant, extractor.signature(), config.beta_kl)
    eps = draw_eps(hyper, len(batch.labels), rng)
    bind = graph_bindings(new, extractor, batch, eps, hyper.m)

    losses = ["recon", "l_r", "l_q", "l_q_c", "l_c", "kl"] + (["l_q_d"] if two else [])
    trace = _trace(graph, bind, losses, "losses")
    report = report_from_trace(trace, variant, config.beta_kl)
    for name, value in report.terms().items():
        if not np.isfinite(value):
            raise TrainingError(f"loss term {name} is not finite ({value})")

    # (1) discriminators; recon below reuses this trace since it never reads theta_q/qd
    disc_names = new.names(*DISC_GROUPS)
    recon_grads = trace.backward("recon", new.names(*AE_GROUPS))
    for s in range(config.disc_steps_per_ae_step):
        dtrace = trace if s == 0 else _trace(graph, bind, ["l_q"], "discriminator loss")
        new.apply(dtrace.backward("l_q", disc_names), -config.lr_disc)
    if snapshots is not None:
        snapshots.append(("discriminator", new.copy()))

    # (2) reconstruction over the autoencoder groups
    new.apply(recon_grads, -config.lr_recon)
    if snapshots is not None:
        snapshots.append(("reconstruction", new.copy()))

    # (3) entropy ascent on theta_c, (4) domain cross-entropy descent on theta_d
    adv = _trace(graph, bind, ["l_c"] + (["l_q_d"] if two else []), "adversarial losses")
    grads_c = adv.backward("l_c", new.names("theta_c"))
    grads_d = adv.backward("l_q_d", new.names("theta_d")) if two else None
    new.apply(grads_c, +config.alpha1)
    if snapshots is not None:
        snapshots.append(("content", new.copy()))
    if two:
        new.apply(grads_d, -config.alpha2)
        if snapshots is not None:
            snapshots.append(("domain", new.copy()))
    return new, report


# ------------------------------------------------------------------ metrics


@dataclass
class MetricsLog:
    records: list[dict] = field(default_factory=list)

    COLUMNS = ("step", "l_r", "l_q_c", "l_q_d", "entropy_qc", "seconds")

    def append(self, step: int, report: LossReport, seconds: float) -> None:
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError(f"step {step} does not follow {self.records[-1]['step']}")
        self.records.append(
            dict(step=step, l_r=report.l_r, l_q_c=report.l_q_c, l_q_d=report.l_q_d,
                 entropy_qc=report.l_c_entropy, seconds=seconds)
        )

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.records:
                w.writerow([r["step"]] + [
                    "" if r[c] is None else repr(float(r[c])) for c in self.COLUMNS[1:]
                ])


# --------------------------------------------------------------- checkpoint

MAGIC = b"SRAE"
VERSION = 1
VARIANT_CODES = {"one-disc": 1, "two-disc": 2}
RNG_TENSOR = "meta/rng_state"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    hyper: SraeHyper
    variant: str
    params: ParamStore
    step: int = 0
    rng_state: dict | None = None
    version: int = VERSION


def _rng_to_tensor(state: dict) -> np.ndarray:
    """PCG64 state as exact 16-bit chunks stored in float32."""
    if state.get("bit_generator") != "PCG64":
        raise ValueError(f"only PCG64 generator state can be stored, got {state.get('bit_generator')}")

    def chunks(value, n):
        return [(value >> (16 * i)) & 0xFFFF for i in range(n)]

    words = chunks(state["state"]["state"], 8) + chunks(state["state"]["inc"], 8)
    words += [state["has_uint32"]] + chunks(state["uinteger"], 2)
    return np.array(words, dtype=np.float32)


def _rng_from_tensor(t: np.ndarray) -> dict:
    w = [int(v) for v in t]

    def join(ws):
        return sum(v << (16 * i) for i, v in enumerate(ws))

    return {
        "bit_generator": "PCG64",
        "state": {"state": join(w[0:8]), "inc": join(w[8:16])},
        "has_uint32": w[16],
        "uinteger": join(w[17:19]),
    }


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Little-endian binary: header, hyper block, step, then named f32 tensors."""
    h = ckpt.hyper
    tensors = dict(ckpt.params.flat())
    if ckpt.rng_state is not None:
        tensors[RNG_TENSOR] = _rng_to_tensor(ckpt.rng_state)
    out = [MAGIC, struct.pack("<II", ckpt.version, VARIANT_CODES[ckpt.variant])]
    out.append(struct.pack("<8I", h.image_h, h.image_w, h.image_c, h.a, h.b, h.j, h.k, h.m))
    out.append(struct.pack("<QI", ckpt.step, len(tensors)))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        t = np.ascontiguousarray(t, dtype="<f4")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", t.ndim))
        out.append(struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(t.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: corrupt checkpoint (truncated)")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, vcode = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    variants = {v: k for k, v in VARIANT_CODES.items()}
    if vcode not in variants:
        raise CheckpointError(f"{path}: corrupt checkpoint (variant code {vcode})")
    image_h, image_w, image_c, a, b, j, k, m = take("<8I")
    step, count = take("<QI")
    tensors = {}
    for _ in range(count):
        (nlen,) = take("<H")
        if pos + nlen > len(data):
            raise CheckpointError(f"{path}: corrupt checkpoint (truncated)")
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<B")
        shape = take(f"<{rank}I")
        n = int(np.prod(shape)) if rank else 1
        if pos + 4 * n > len(data):
            raise CheckpointError(f"{path}: corrupt checkpoint (truncated in tensor {name!r})")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(data):
        raise CheckpointError(f"{path}: corrupt checkpoint ({len(data) - pos} trailing bytes)")

    rng_state = _rng_from_tensor(tensors.pop(RNG_TENSOR)) if RNG_TENSOR in tensors else None
    try:
        params = ParamStore.from_flat(tensors)
        base = SraeHyper(image_h=image_h, image_w=image_w, image_c=image_c, a=a, b=b, j=j, k=k, m=m)
        hyper = infer_hyper(base, params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    return Checkpoint(hyper, variants[vcode], params, step, rng_state, version)


# -------------------------------------------------------------------- loop


def default_hyper(dataset: Dataset, **overrides) -> SraeHyper:
    h, w, c = dataset.image_shape
    return SraeHyper(image_h=h, image_w=w, image_c=c, m=dataset.m, **overrides)


def train(
    config: TrainConfig,
    dataset: Dataset,
    hyper: SraeHyper | None = None,
    checkpoint_path: str | Path | None = None,
) -> tuple[Checkpoint, MetricsLog]:
    """Run ``epochs * (len(dataset) // batch_size)`` steps from a fresh init."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    hyper = hyper or default_hyper(dataset)
    if hyper.image_shape != dataset.image_shape or hyper.m != dataset.m:
        raise ValueError(
            f"hyper expects {hyper.image_shape} images over {hyper.m} domains, "
            f"dataset has {dataset.image_shape} over {dataset.m}"
        )
    steps_per_epoch = len(dataset) // config.batch_size
    if steps_per_epoch < 1:
        raise ValueError(f"dataset of {len(dataset)} is smaller than one batch of {config.batch_size}")

    rng = np.random.default_rng(config.seed)
    params = init_params(hyper, config.variant, config.seed)
    extractor = FeatureExtractor.create(hyper.image_c, seed=config.extractor_seed)
    metrics = MetricsLog()
    start = time.perf_counter()
    step = 0
    for epoch in range(1, config.epochs + 1):
        for _ in range(steps_per_epoch):
            batch, rng = sample_batch(dataset, config.batch_size, rng)
            params, report = train_step(params, hyper, extractor, batch, config, rng)
            step += 1
            metrics.append(step, report, time.perf_counter() - start)
        recent = metrics.records[-steps_per_epoch:]
        log.info(
            "epoch %d/%d  l_r %.5f  l_q_c %.4f  H(q_c) %.4f",
            epoch, config.epochs,
            np.mean([r["l_r"] for r in recent]),
            np.mean([r["l_q_c"] for r in recent]),
            np.mean([r["entropy_qc"] for r in recent]),
        )
        if checkpoint_path and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            ckpt = Checkpoint(hyper, config.variant, params, step, rng.bit_generator.state)
            save_checkpoint(ckpt, f"{checkpoint_path}.epoch{epoch}")
    ckpt = Checkpoint(hyper, config.variant, params, step, rng.bit_generator.state)
    if checkpoint_path:
        save_checkpoint(ckpt, checkpoint_path)
    return ckpt, metrics

