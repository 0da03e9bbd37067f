"""Downstream uses of a trained SRAE: translation, content search, domain probes.

Every task encodes with eps = 0 (posterior means), so results are
deterministic functions of the checkpoint and the images.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .diffcore import ShapeError
from .model import decode, encode, tile_domain
from .training import Checkpoint

ENCODE_CHUNK = 256


@dataclass
class EncodingRecord:
    id: int
    domain: int
    mu_c: np.ndarray
    mu_d: np.ndarray


def _check_image(ckpt: Checkpoint, x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    shape = ckpt.hyper.image_shape
    if x.shape != shape and x.shape[1:] != shape:
        raise ShapeError(f"{what} must have shape {shape}, got {x.shape}")
    return x


def mean_codes(ckpt: Checkpoint, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flattened mu_c (N, a*b*k) and mu_d (N, j) for a stack of images."""
    images = _check_image(ckpt, images, "images")
    if images.ndim == 3:
        images = images[None]
    mc, md = [], []
    for start in range(0, len(images), ENCODE_CHUNK):
        lat = encode(ckpt.params, ckpt.hyper, images[start : start + ENCODE_CHUNK])
        mc.append(lat.mu_c.reshape(len(lat.mu_c), -1))
        md.append(lat.mu_d_vec.reshape(len(lat.mu_d_vec), -1))
    return np.concatenate(mc), np.concatenate(md)


def reconstruct(ckpt: Checkpoint, x: np.ndarray) -> np.ndarray:
    x = _check_image(ckpt, x, "x")
    lat = encode(ckpt.params, ckpt.hyper, x)
    return decode(ckpt.params, ckpt.hyper, lat.mu_c, lat.z_d)


def translate(ckpt: Checkpoint, x_src: np.ndarray, x_style: np.ndarray) -> np.ndarray:
    """Decode the content code of ``x_src`` with the domain code of ``x_style``."""
    x_src = _check_image(ckpt, x_src, "x_src")
    x_style = _check_image(ckpt, x_style, "x_style")
    if x_src.shape != x_style.shape:
        raise ShapeError(f"x_src {x_src.shape} and x_style {x_style.shape} differ")
    h = ckpt.hyper
    src = encode(ckpt.params, h, x_src)
    style = encode(ckpt.params, h, x_style)
    return decode(ckpt.params, h, src.mu_c, tile_domain(style.mu_d_vec, h.a, h.b))


def _distances(query: np.ndarray, pool: np.ndarray, metric: str) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    p = np.asarray(pool, dtype=np.float64)
    if metric == "euclidean":
        return np.sqrt(((p - q) ** 2).sum(axis=1))
    if metric == "cosine":
        denom = np.maximum(np.linalg.norm(p, axis=1) * np.linalg.norm(q), 1e-12)
        return 1.0 - (p @ q) / denom
    raise ValueError(f"unknown metric {metric!r}")


def rank_by_distance(query: np.ndarray, pool: np.ndarray, k: int, metric: str = "euclidean") -> list[tuple[int, float]]:
    """Exhaustive k-nearest scan; ties go to the smaller index."""
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if k > len(pool):
        raise ValueError(f"k={k} exceeds the {len(pool)} candidates")
    dist = _distances(query, pool, metric)
    order = np.argsort(dist, kind="stable")[:k]
    return [(int(i), float(dist[i])) for i in order]


def nn_search(ckpt: Checkpoint, target: np.ndarray, candidates: Dataset, k: int,
              metric: str = "euclidean") -> list[tuple[int, float]]:
    """Candidates ranked by distance between flattened content means."""
    if k > len(candidates):
        raise ValueError(f"k={k} exceeds the {len(candidates)} candidates")
    target = _check_image(ckpt, target, "target")
    if target.ndim != 3:
        raise ShapeError("target must be a single image")
    q, _ = mean_codes(ckpt, target)
    pool, _ = mean_codes(ckpt, candidates.images)
    return rank_by_distance(q[0], pool, k, metric)


def encode_dataset(ckpt: Checkpoint, dataset: Dataset) -> list[EncodingRecord]:
    mc, md = mean_codes(ckpt, dataset.images)
    return [EncodingRecord(i, int(d), mc[i], md[i]) for i, d in enumerate(dataset.labels)]


# -------------------------------------------------------------- classifier


@dataclass
class LogisticClassifier:
    """Multinomial logistic regression on standardised features."""

    mean: np.ndarray
    scale: np.ndarray
    weights: np.ndarray
    bias: np.ndarray
    epochs_run: int = 0

    def logits(self, x: np.ndarray) -> np.ndarray:
        return ((np.asarray(x, dtype=np.float64) - self.mean) / self.scale) @ self.weights + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(x) == y)) if len(y) else float("nan")


def fit_logistic(x: np.ndarray, y: np.ndarray, m: int, lr: float = 0.5, max_epochs: int = 500,
                 tol: float = 1e-6) -> LogisticClassifier:
    """Full-batch gradient descent until the loss changes by < tol."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    xs = (x - mean) / scale
    n, dim = xs.shape
    onehot = np.eye(m)[y]
    w = np.zeros((dim, m))
    b = np.zeros(m)
    prev = np.inf
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        z = xs @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        loss = -np.mean(np.log(np.maximum((p * onehot).sum(axis=1), 1e-300)))
        if abs(prev - loss) < tol:
            break
        prev = loss
        g = (p - onehot) / n
        w -= lr * (xs.T @ g)
        b -= lr * g.sum(axis=0)
    return LogisticClassifier(mean, scale, w, b, epoch)


def stratified_split(labels: np.ndarray, seed: int, train_frac: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    train, test = [], []
    for d in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == d))
        cut = min(max(int(round(train_frac * len(idx))), 1), len(idx) - 1)
        train.append(idx[:cut])
        test.append(idx[cut:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def fit_domain_classifier(records: list[EncodingRecord], field: str = "mu_d", split_seed: int = 0):
    """Predict the domain from one code; returns (classifier, train_acc, test_acc)."""
    if field not in ("mu_d", "mu_c"):
        raise ValueError(f"field must be 'mu_d' or 'mu_c', got {field!r}")
    labels = np.array([r.domain for r in records])
    domains, counts = np.unique(labels, return_counts=True)
    if len(domains) < 2:
        raise ValueError("need records from at least two domains")
    if counts.min() < 2:
        raise ValueError("need at least two records per domain")
    x = np.stack([getattr(r, field) for r in records])
    m = int(labels.max()) + 1
    tr, te = stratified_split(labels, split_seed)
    clf = fit_logistic(x[tr], labels[tr], m)
    return clf, clf.accuracy(x[tr], labels[tr]), clf.accuracy(x[te], labels[te])


# ------------------------------------------------------------------ export


def export_encodings(ckpt: Checkpoint, dataset: Dataset, path: str | Path) -> None:
    """CSV ``id,domain,zc_0..,zd_0..`` of mean codes, 9 significant digits."""
    records = encode_dataset(ckpt, dataset)
    h = ckpt.hyper
    header = ["id", "domain"] + [f"zc_{i}" for i in range(h.a * h.b * h.k)] + [f"zd_{i}" for i in range(h.j)]
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in records:
                w.writerow([r.id, r.domain] + [f"{v:.9g}" for v in r.mu_c] + [f"{v:.9g}" for v in r.mu_d])
    except OSError as exc:
        raise OSError(f"cannot write encodings to {path}: {exc}") from exc


def read_encodings(path: str | Path) -> list[EncodingRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    zc = [i for i, name in enumerate(header) if name.startswith("zc_")]
    zd = [i for i, name in enumerate(header) if name.startswith("zd_")]
    return [
        EncodingRecord(int(r[0]), int(r[1]), np.array([float(r[i]) for i in zc]), np.array([float(r[i]) for i in zd]))
        for r in body
    ]


def montage(rows: list[np.ndarray], pad: int = 1, fill: float = 1.0) -> np.ndarray:
    """Tile rows of (n, H, W, C) images into one (H', W', C) image."""
    n = max(len(r) for r in rows)
    _, h, w, c = rows[0].shape
    out = np.full((len(rows) * (h + pad) + pad, n * (w + pad) + pad, c), fill, dtype=np.float32)
    for i, row in enumerate(rows):
        for k, img in enumerate(row):
            y, x = pad + i * (h + pad), pad + k * (w + pad)
            out[y : y + h, x : x + w] = img
    return out


def reconstruction_montage(ckpt: Checkpoint, images: np.ndarray, per_row: int = 8) -> np.ndarray:
    """Odd rows ground truth, even rows the mean-code reconstruction."""
    images = _check_image(ckpt, images, "images")
    recon = reconstruct(ckpt, images)
    rows = []
    for start in range(0, len(images), per_row):
        rows += [images[start : start + per_row], recon[start : start + per_row]]
    return montage(rows)
