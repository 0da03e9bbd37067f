"""``srae`` command line: data generation, training and every downstream task.

Exit status is 0 on success, 1 for usage errors (bad subcommand, flag or
missing argument) and 2 for runtime errors (missing files, invalid config,
corrupt checkpoints). All diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as data_mod
from .model import SraeHyper
from .training import TrainConfig

log = logging.getLogger("srae")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config

_TRAIN_KEYS = {
    "variant": "variant", "epochs": "epochs", "batch_size": "batch_size", "lr_recon": "lr_recon",
    "alpha1": "alpha1", "alpha2": "alpha2", "lr_disc": "lr_disc", "disc_steps": "disc_steps_per_ae_step",
    "beta_kl": "beta_kl", "seed": "seed", "extractor_seed": "extractor_seed",
}
_IMAGE_KEYS = {"height": "image_h", "width": "image_w", "channels": "image_c"}
_LATENT_KEYS = {"a": "a", "b": "b", "j": "j", "k": "k"}
_ARCH_KEYS = {"trunk_width": "trunk_width", "stream_width": "stream_width", "decoder_width": "decoder_width",
              "disc_width": "disc_width", "disc_pool": "disc_pool"}
_TOP_KEYS = set(_TRAIN_KEYS) | {"image", "latent", "domains", "architecture", "data"}


@dataclass
class CliConfig:
    hyper: SraeHyper
    train: TrainConfig
    data: dict = field(default_factory=lambda: {"kind": "synthetic"})

    def synth_spec(self) -> data_mod.SynthSpec:
        d = self.data
        if d.get("kind") != "synthetic":
            raise ConfigError("data.kind is not 'synthetic'; nothing to generate")
        if self.hyper.image_h != self.hyper.image_w or self.hyper.image_c != 1:
            raise ConfigError("synthetic data needs square single-channel images")
        counts = tuple(d.get("counts", [2000] * self.hyper.m))
        if len(counts) != self.hyper.m:
            raise ConfigError(f"data.counts has {len(counts)} entries but domains = {self.hyper.m}")
        if self.hyper.m != len(data_mod.DEFAULT_STYLES):
            raise ConfigError(f"synthetic data provides {len(data_mod.DEFAULT_STYLES)} domains")
        return data_mod.SynthSpec(counts=counts, image_size=self.hyper.image_h, seed=d.get("seed", 0))


def _section(doc, name: str, allowed: dict) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(f"{name}: expected an object, got {type(doc).__name__}")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}: unknown key")
    return {allowed[k]: v for k, v in doc.items()}


def parse_config(doc: dict) -> CliConfig:
    """Validate a config document; every error names the offending key."""
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be an object")
    unknown = sorted(set(doc) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key")
    hyper_kw = {}
    hyper_kw.update(_section(doc.get("image", {}), "image", _IMAGE_KEYS))
    hyper_kw.update(_section(doc.get("latent", {}), "latent", _LATENT_KEYS))
    hyper_kw.update(_section(doc.get("architecture", {}), "architecture", _ARCH_KEYS))
    if "domains" in doc:
        hyper_kw["m"] = doc["domains"]
    train_kw = {_TRAIN_KEYS[k]: v for k, v in doc.items() if k in _TRAIN_KEYS}
    for key, value in {**hyper_kw, **train_kw}.items():
        expected = str if key in ("variant", "disc_pool") else (float if isinstance(value, float) else int)
        if isinstance(value, bool) or not isinstance(value, (expected, int) if expected is float else expected):
            raise ConfigError(f"{key}: expected {expected.__name__}, got {value!r}")
    data_doc = doc.get("data", {"kind": "synthetic"})
    if not isinstance(data_doc, dict):
        raise ConfigError("data: expected an object")
    kind = data_doc.get("kind")
    allowed = {"synthetic": {"kind", "counts", "seed"}, "directory": {"kind", "path"}}
    if kind not in allowed:
        raise ConfigError(f"data.kind: expected 'synthetic' or 'directory', got {kind!r}")
    extra = sorted(set(data_doc) - allowed[kind])
    if extra:
        raise ConfigError(f"data.{extra[0]}: unknown key for kind {kind!r}")
    try:
        hyper = SraeHyper(**hyper_kw)
        train = TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return CliConfig(hyper, train, dict(data_doc))


def load_config(path: str | None) -> CliConfig:
    if path is None:
        return parse_config({})
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    try:
        return parse_config(doc)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# ------------------------------------------------------------- subcommands


def _load_ckpt(path):
    from .training import load_checkpoint

    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise FileNotFoundError(f"cannot read checkpoint {path}: {exc.strerror}") from None


def _load_image(path, hyper: SraeHyper) -> np.ndarray:
    if not Path(path).is_file():
        raise FileNotFoundError(f"image not found: {path}")
    img = data_mod.read_image(path)
    if img.shape[2] != hyper.image_c:
        raise ValueError(f"{path} has {img.shape[2]} channels, checkpoint expects {hyper.image_c}")
    return data_mod.area_resize(img, hyper.image_h, hyper.image_w)


def _load_data(path, hyper: SraeHyper) -> data_mod.Dataset:
    ds = data_mod.load_directory(path, size=(hyper.image_h, hyper.image_w))
    if ds.image_shape[2] != hyper.image_c:
        raise ValueError(f"{path}: images have {ds.image_shape[2]} channels, expected {hyper.image_c}")
    return ds


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    ds = data_mod.generate_synthetic(cfg.synth_spec())
    data_mod.save_directory(ds, args.out)
    print(f"wrote {len(ds)} images to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import train

    cfg = load_config(args.config)
    data_dir = args.data or (cfg.data.get("path") if cfg.data.get("kind") == "directory" else None)
    if data_dir is None:
        ds = data_mod.generate_synthetic(cfg.synth_spec())
    else:
        ds = _load_data(data_dir, cfg.hyper)
    if ds.m != cfg.hyper.m:
        raise ValueError(f"data has {ds.m} domains, config says {cfg.hyper.m}")
    ckpt, metrics = train(cfg.train, ds, cfg.hyper, checkpoint_path=args.out)
    if args.metrics:
        metrics.write_csv(args.metrics)
    print(f"trained {ckpt.step} steps -> {args.out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .tasks import reconstruction_montage

    ckpt = _load_ckpt(args.ckpt)
    ds = _load_data(args.data, ckpt.hyper)
    data_mod.write_image(args.out, reconstruction_montage(ckpt, ds.images[: args.limit], per_row=args.per_row))
    return EXIT_OK


def cmd_translate(args) -> int:
    from .tasks import translate

    ckpt = _load_ckpt(args.ckpt)
    src = _load_image(args.src, ckpt.hyper)
    style = _load_image(args.style, ckpt.hyper)
    data_mod.write_image(args.out, translate(ckpt, src, style))
    return EXIT_OK


def cmd_nn(args) -> int:
    from .tasks import nn_search

    ckpt = _load_ckpt(args.ckpt)
    target = _load_image(args.target, ckpt.hyper)
    cands = _load_data(args.candidates, ckpt.hyper)
    ranked = nn_search(ckpt, target, cands, args.k, metric=args.metric)
    print(f"{'rank':>4}  {'index':>6}  {'distance':>12}  name")
    for rank, (idx, dist) in enumerate(ranked, 1):
        print(f"{rank:>4}  {idx:>6}  {dist:>12.6f}  {cands.names[idx]}")
    return EXIT_OK


def cmd_classify(args) -> int:
    from .tasks import encode_dataset, fit_domain_classifier

    ckpt = _load_ckpt(args.ckpt)
    ds = _load_data(args.data, ckpt.hyper)
    fieldname = {"zd": "mu_d", "zc": "mu_c"}[args.field]
    _, train_acc, test_acc = fit_domain_classifier(encode_dataset(ckpt, ds), fieldname, args.split_seed)
    print(f"field {args.field}  train accuracy {train_acc:.4f}  test accuracy {test_acc:.4f}")
    return EXIT_OK


def cmd_export(args) -> int:
    from .tasks import export_encodings

    ckpt = _load_ckpt(args.ckpt)
    export_encodings(ckpt, _load_data(args.data, ckpt.hyper), args.out)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(seeds=args.seeds)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name}  {r.detail}".rstrip())
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"selftest: {len(failed)} check(s) failed", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"selftest: all {len(results)} checks passed")
    return EXIT_OK


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors raise instead of exiting with 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="srae", description="Split-representation auto-encoder toolkit.")
    p.add_argument("--nondeterministic", action="store_true",
                   help="allow SRAE_THREADS > 1 (multi-threaded BLAS may change low-order bits)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("gen-data", help="write the synthetic two-style dataset as PGM files")
    s.add_argument("--config", help="JSON config (image size, domains, data.counts, data.seed)")
    s.add_argument("--out", required=True, help="output directory (domain<i>/ subfolders)")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    s.add_argument("--config", help="JSON config; defaults apply to omitted keys")
    s.add_argument("--data", help="dataset directory; defaults to the config's data section")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--metrics", help="optional per-step metrics CSV")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", help="montage of images (odd rows) and reconstructions (even rows)")
    s.add_argument("--ckpt", required=True, help="checkpoint path")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="output PGM/PPM montage")
    s.add_argument("--limit", type=int, default=16, help="number of images (default 16)")
    s.add_argument("--per-row", type=int, default=8, help="images per montage row (default 8)")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("translate", help="decode the content of --src with the domain code of --style")
    s.add_argument("--ckpt", required=True, help="checkpoint path")
    s.add_argument("--src", required=True, help="content source image (PGM/PPM)")
    s.add_argument("--style", required=True, help="style source image (PGM/PPM)")
    s.add_argument("--out", required=True, help="output image path")
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("nn", help="rank candidates by content-code distance to a target image")
    s.add_argument("--ckpt", required=True, help="checkpoint path")
    s.add_argument("--target", required=True, help="query image (PGM/PPM)")
    s.add_argument("--candidates", required=True, help="candidate dataset directory")
    s.add_argument("-k", type=int, required=True, help="number of neighbours to list")
    s.add_argument("--metric", choices=("euclidean", "cosine"), default="euclidean", help="distance (default euclidean)")
    s.set_defaults(func=cmd_nn)

    s = sub.add_parser("classify", help="fit a logistic domain classifier on one code")
    s.add_argument("--ckpt", required=True, help="checkpoint path")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--field", choices=("zd", "zc"), required=True, help="code to classify from")
    s.add_argument("--split-seed", type=int, default=0, help="seed of the 80/20 split (default 0)")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("export", help="write mean encodings of a dataset as CSV")
    s.add_argument("--ckpt", required=True, help="checkpoint path")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="output CSV path")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("selftest", help="gradient checks for every operator and both loss graphs, plus invariants")
    s.add_argument("--seeds", type=int, default=5, help="random seeds per check (default 5)")
    s.set_defaults(func=cmd_selftest)
    return p


def _threads(nondeterministic: bool) -> int:
    raw = os.environ.get("SRAE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SRAE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"SRAE_THREADS must be a positive integer, got {raw!r}")
    if n > 1 and not nondeterministic:
        print(f"srae: SRAE_THREADS={n} ignored without --nondeterministic; using 1 thread", file=sys.stderr)
        n = 1
    return n


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        threads = _threads(args.nondeterministic)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(message)s")
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"srae {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())
