"""Datasets: synthetic two-style shapes, PGM/PPM directories, balanced batches.

The synthetic domains share one content distribution (shape kind, position,
size) and differ only in rendering style, so a well-disentangled model
should put the shape in the content code and the style in the domain code.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SHAPES = ("circle", "square", "triangle")
SUPERSAMPLE = 4


@dataclass(frozen=True)
class DomainStyle:
    filled: bool
    fg: float
    bg: float
    line_width: float = 2.0
    jitter: float = 0.05


DEFAULT_STYLES = (
    DomainStyle(filled=True, fg=0.85, bg=0.1),
    # outlined, dark-on-bright: polarity inverted relative to the first style
    DomainStyle(filled=False, fg=0.1, bg=0.85),
)


@dataclass(frozen=True)
class SynthSpec:
    counts: tuple[int, ...] = (2000, 2000)
    image_size: int = 32
    seed: int = 0
    styles: tuple[DomainStyle, ...] = DEFAULT_STYLES
    min_size: float = 0.16
    max_size: float = 0.3

    def __post_init__(self):
        if len(self.counts) != len(self.styles):
            raise ValueError(f"{len(self.counts)} counts for {len(self.styles)} styles")
        if len(self.counts) < 2:
            raise ValueError("need at least two domains")
        if any(c <= 0 for c in self.counts):
            raise ValueError(f"counts must be positive, got {self.counts}")
        if not 0 < self.min_size <= self.max_size < 0.5:
            raise ValueError("shape size fractions must satisfy 0 < min <= max < 0.5")
        bgs = sorted(s.bg for s in self.styles)
        if any(b2 - b1 < 0.2 for b1, b2 in zip(bgs, bgs[1:])):
            raise ValueError("domain styles must differ in background intensity by at least 0.2")


@dataclass(frozen=True)
class ShapeInfo:
    kind: str
    cx: float
    cy: float
    size: float


@dataclass
class Dataset:
    """Images (N,H,W,C) in [0,1] with domain labels in [0, m)."""

    images: np.ndarray
    labels: np.ndarray
    m: int
    content: list[ShapeInfo] | None = None
    names: list[str] | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N,H,W,C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.m):
            raise ValueError(f"labels must lie in [0, {self.m})")
        missing = [d for d in range(self.m) if not np.any(self.labels == d)]
        if missing:
            raise ValueError(f"domains without examples: {missing}")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def domain_indices(self, d: int) -> np.ndarray:
        return np.flatnonzero(self.labels == d)

    def domain_mean_intensity(self, d: int) -> float:
        return float(self.images[self.labels == d].mean(dtype=np.float64))


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def onehot(self, m: int) -> np.ndarray:
        out = np.zeros((len(self.labels), m), dtype=np.float32)
        out[np.arange(len(self.labels)), self.labels] = 1
        return out


# ------------------------------------------------------------------ synthetic


def _coverage(kind: str, cx: float, cy: float, r: float, n: int) -> np.ndarray:
    """Fractional area of each pixel covered by the shape (supersampled)."""
    s = SUPERSAMPLE
    coords = (np.arange(n * s) + 0.5) / s
    x, y = np.meshgrid(coords, coords)
    dx, dy = x - cx, y - cy
    if kind == "circle":
        inside = dx * dx + dy * dy <= r * r
    elif kind == "square":
        half = 0.85 * r
        inside = np.maximum(np.abs(dx), np.abs(dy)) <= half
    elif kind == "triangle":
        # upward triangle inscribed in radius r; inradius r/2
        inside = dy <= r / 2
        for angle in (np.pi / 6, 5 * np.pi / 6):
            nx, ny = np.cos(angle), -np.sin(angle)
            inside &= dx * nx + dy * ny <= r / 2
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return inside.reshape(n, s, n, s).mean(axis=(1, 3))


def render_shape(info: ShapeInfo, style: DomainStyle, n: int, fg: float, bg: float) -> np.ndarray:
    cov = _coverage(info.kind, info.cx, info.cy, info.size, n)
    if not style.filled:
        shrink = style.line_width * (2.0 if info.kind == "triangle" else 1.0)
        inner = max(info.size - shrink, 0.0)
        cov = cov - _coverage(info.kind, info.cx, info.cy, inner, n) if inner > 0 else cov
    return (bg + (fg - bg) * cov).astype(np.float32)


def generate_synthetic(spec: SynthSpec = SynthSpec()) -> Dataset:
    """One procedurally placed shape per image, rendered in its domain's style."""
    n = spec.image_size
    r_max = spec.max_size * n
    if n < 12 or 2 * r_max + 2 > n:
        raise ValueError(f"image size {n} too small for shapes of radius {r_max:.1f}")
    rng = np.random.default_rng(spec.seed)
    images, labels, content = [], [], []
    for d, (count, style) in enumerate(zip(spec.counts, spec.styles)):
        for _ in range(count):
            kind = SHAPES[rng.integers(len(SHAPES))]
            r = rng.uniform(spec.min_size, spec.max_size) * n
            cx = rng.uniform(r + 1, n - r - 1)
            cy = rng.uniform(r + 1, n - r - 1)
            fg = float(np.clip(style.fg + rng.uniform(-style.jitter, style.jitter), 0, 1))
            bg = float(np.clip(style.bg + rng.uniform(-style.jitter, style.jitter), 0, 1))
            info = ShapeInfo(kind, float(cx), float(cy), float(r))
            images.append(render_shape(info, style, n, fg, bg)[..., None])
            labels.append(d)
            content.append(info)
    return Dataset(np.stack(images), np.array(labels), m=len(spec.counts), content=content)


# ------------------------------------------------------------------- PGM/PPM


def read_image(path: str | Path) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6), maxval 255 -> float32 (H,W,C) in [0,1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format != "PPM" or im.mode not in ("L", "RGB"):
                raise ValueError(f"not an 8-bit PGM/PPM image (format {im.format}, mode {im.mode})")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read image {path}: {exc}") from None
    return arr[..., None] if arr.ndim == 2 else arr


def write_image(path: str | Path, img: np.ndarray) -> None:
    """Write (H,W,1) as PGM or (H,W,3) as PPM, quantised to 0..255."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"image must be (H,W,1) or (H,W,3), got {img.shape}")
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    pil = Image.fromarray(q[..., 0], mode="L") if q.shape[2] == 1 else Image.fromarray(q, mode="RGB")
    pil.save(Path(path), format="PPM")


def area_resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Box-filter (area-average) resize of an (H,W,C) float image."""
    if img.shape[:2] == (h, w):
        return img.astype(np.float32)
    H, W, C = img.shape
    if H % h == 0 and W % w == 0:
        return img.reshape(h, H // h, w, W // w, C).mean(axis=(1, 3), dtype=np.float64).astype(np.float32)
    chans = [
        np.asarray(Image.fromarray(img[..., c].astype(np.float32), mode="F").resize((w, h), Image.BOX))
        for c in range(C)
    ]
    return np.stack(chans, axis=-1).astype(np.float32)


_DOMAIN_DIR = re.compile(r"^domain(\d+)$")


def load_directory(path: str | Path, size: tuple[int, int] | None = None) -> Dataset:
    """Read ``<root>/domain<i>/*.pgm|*.ppm``; files in lexicographic order.

    ``size`` = (h, w) rescales every image by area averaging.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    found = {}
    for sub in root.iterdir():
        match = _DOMAIN_DIR.match(sub.name)
        if match and sub.is_dir():
            found[int(match.group(1))] = sub
    if not found:
        raise ValueError(f"no domain<i>/ subdirectories in {root}")
    m = max(found) + 1
    if sorted(found) != list(range(m)):
        raise ValueError(f"domain subdirectories must be numbered 0..{m - 1}, found {sorted(found)}")

    images, labels, names = [], [], []
    channels = None
    for d in range(m):
        files = sorted(f for f in found[d].iterdir() if f.suffix.lower() in (".pgm", ".ppm"))
        if not files:
            raise ValueError(f"domain directory {found[d]} contains no PGM/PPM images")
        for f in files:
            img = read_image(f)
            if channels is None:
                channels = img.shape[2]
            elif img.shape[2] != channels:
                raise ValueError(f"{f} has {img.shape[2]} channels, expected {channels}")
            if size is not None:
                img = area_resize(img, *size)
            elif images and img.shape != images[0].shape:
                raise ValueError(f"{f} has shape {img.shape}, expected {images[0].shape}; pass size=")
            images.append(img)
            labels.append(d)
            names.append(f"domain{d}/{f.name}")
    return Dataset(np.stack(images), np.array(labels), m=m, names=names)


def save_directory(dataset: Dataset, path: str | Path) -> None:
    root = Path(path)
    ext = ".pgm" if dataset.image_shape[2] == 1 else ".ppm"
    for d in range(dataset.m):
        (root / f"domain{d}").mkdir(parents=True, exist_ok=True)
    for i, (img, d) in enumerate(zip(dataset.images, dataset.labels)):
        write_image(root / f"domain{d}" / f"{i:06d}{ext}", img)


# ------------------------------------------------------------------ sampling


def sample_batch(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> tuple[Batch, np.random.Generator]:
    """batch_size / m examples from every domain, without replacement.

    ``rng`` is advanced in place and returned for chaining.
    """
    m = dataset.m
    if batch_size <= 0 or batch_size % m:
        raise ValueError(f"batch_size {batch_size} must be a positive multiple of m={m}")
    per = batch_size // m
    picks = []
    for d in range(m):
        pool = dataset.domain_indices(d)
        if per > len(pool):
            raise ValueError(f"domain {d} has {len(pool)} examples, batch needs {per}")
        picks.append(rng.choice(pool, size=per, replace=False))
    idx = np.concatenate(picks)
    return Batch(dataset.images[idx], dataset.labels[idx], idx), rng
