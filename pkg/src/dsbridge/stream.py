"""Procedural glyph images, parametric corruptions, and domain-ordered batch streams.

The adapter only ever sees ``Batch.images``; ground truth is held privately
and read back through :func:`reveal_labels` by the evaluator.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import load_raw, save_raw

IMAGE_SIZE = 32
SUPERSAMPLE = 4
BACKGROUND = 0.9
FOREGROUND = np.array([0.12, 0.16, 0.38])
UNITS_PER_PX = 2.0 / IMAGE_SIZE

GLYPHS = (
    "circle",
    "square",
    "triangle",
    "cross",
    "ring",
    "star",
    "hbar",
    "vbar",
    "diamond",
    "dotgrid",
)

KINDS = (
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "defocus_blur",
    "contrast",
    "brightness",
    "fog",
    "pixelate",
)

# index = severity - 1; monotone in strength, tuned so the default source model's
# error at severity 5 is several times its clean error for every kind
SEVERITY = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.14, 0.16),
    "shot_noise": (200, 100, 60, 40, 30),
    "impulse_noise": (0.005, 0.01, 0.015, 0.02, 0.03),
    "defocus_blur": ((1, 1), (1, 2), (2, 1), (2, 2), (2, 3)),
    "contrast": (0.75, 0.6, 0.45, 0.35, 0.3),
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),
    "fog": (0.15, 0.3, 0.45, 0.55, 0.65),
    "pixelate": (1.25, 1.5, 1.75, 1.9, 2.0),
}


@dataclass(frozen=True)
class Jitter:
    dx: float = 0.0
    dy: float = 0.0
    scale: float = 1.0
    rotation: float = 0.0  # degrees

    def __post_init__(self):
        if not (-4 <= self.dx <= 4 and -4 <= self.dy <= 4):
            raise ValueError("translation jitter must lie in [-4, 4] px")
        if not 0.7 <= self.scale <= 1.2:
            raise ValueError("scale jitter must lie in [0.7, 1.2]")
        if not -180 <= self.rotation <= 180:
            raise ValueError("rotation must lie in [-180, 180] degrees")

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "Jitter":
        return cls(
            dx=float(rng.uniform(-4, 4)),
            dy=float(rng.uniform(-4, 4)),
            scale=float(rng.uniform(0.7, 1.2)),
            rotation=float(rng.uniform(-20, 20)),
        )


def _glyph_mask(cls_id: int, u: np.ndarray, v: np.ndarray, stroke: float) -> np.ndarray:
    r = np.hypot(u, v)
    w = 0.14 * stroke
    name = GLYPHS[cls_id]
    if name == "circle":
        return r <= 0.55
    if name == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.48
    if name == "triangle":
        # apex up (negative v is up in image rows)
        return (v <= 0.42) & (v >= -0.6 + 1.7 * np.abs(u))
    if name == "cross":
        return ((np.abs(u) <= w) & (np.abs(v) <= 0.62)) | ((np.abs(v) <= w) & (np.abs(u) <= 0.62))
    if name == "ring":
        return np.abs(r - 0.48) <= 0.8 * w
    if name == "star":
        theta = np.arctan2(u, -v)
        t = (theta * 5 / (2 * np.pi)) % 1.0
        spike = 1.0 - 2.0 * np.minimum(t, 1.0 - t)
        return r <= 0.26 + 0.36 * spike
    if name == "hbar":
        return (np.abs(v) <= 1.3 * w) & (np.abs(u) <= 0.66)
    if name == "vbar":
        return (np.abs(u) <= 1.3 * w) & (np.abs(v) <= 0.66)
    if name == "diamond":
        return np.abs(u) + np.abs(v) <= 0.62
    if name == "dotgrid":
        cu = np.round(np.clip(u, -0.9, 0.9) / 0.42) * 0.42
        cv = np.round(np.clip(v, -0.9, 0.9) / 0.42) * 0.42
        in_grid = (np.abs(cu) <= 0.43) & (np.abs(cv) <= 0.43)
        return in_grid & (np.hypot(u - cu, v - cv) <= 0.11 * stroke + 0.02)
    raise AssertionError(name)


def render_glyph(cls_id: int, jitter: Jitter | None = None, rng: np.random.Generator | None = None,
                 stroke: float = 1.0) -> np.ndarray:
    """Anti-aliased ``[32, 32, 3]`` glyph on a uniform light-gray background.

    With ``jitter=None`` a jitter is drawn from ``rng`` when given, otherwise
    the canonical (zero-jitter) rendering is produced.
    """
    if not 0 <= cls_id < len(GLYPHS):
        raise ValueError(f"invalid class id {cls_id}")
    if jitter is None:
        jitter = Jitter.sample(rng) if rng is not None else Jitter()
    n = IMAGE_SIZE * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    y, x = np.meshgrid(coords, coords, indexing="ij")
    x = x - jitter.dx * UNITS_PER_PX
    y = y - jitter.dy * UNITS_PER_PX
    a = np.deg2rad(jitter.rotation)
    u = (np.cos(a) * x + np.sin(a) * y) / jitter.scale
    v = (-np.sin(a) * x + np.cos(a) * y) / jitter.scale
    mask = _glyph_mask(cls_id, u, v, stroke).astype(np.float64)
    cover = mask.reshape(IMAGE_SIZE, SUPERSAMPLE, IMAGE_SIZE, SUPERSAMPLE).mean(axis=(1, 3))
    img = BACKGROUND + cover[..., None] * (FOREGROUND - BACKGROUND)
    return img


# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DomainSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.severity not in range(6):
            raise ValueError(f"severity must be in 0..5, got {self.severity}")

    @property
    def tag(self) -> str:
        return f"{self.kind}@{self.severity}"

    def params(self):
        return None if self.severity == 0 else SEVERITY[self.kind][self.severity - 1]


def _box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    k = 2 * radius + 1
    out = img
    for axis in (0, 1):
        pad = [(0, 0)] * img.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="edge")
        csum = np.cumsum(padded, axis=axis)
        csum = np.insert(csum, 0, 0, axis=axis)
        n = out.shape[axis]
        hi = np.take(csum, np.arange(k, k + n), axis=axis)
        lo = np.take(csum, np.arange(0, n), axis=axis)
        out = (hi - lo) / k
    return out


def _haze(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    coarse = rng.uniform(0.7, 1.0, size=(5, 5))
    ys = np.linspace(0, 4, h)
    xs = np.linspace(0, 4, w)
    y0 = np.clip(np.floor(ys).astype(int), 0, 3)
    x0 = np.clip(np.floor(xs).astype(int), 0, 3)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)


def corrupt(image: np.ndarray, spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    """Apply a corruption at the spec's severity; severity 0 returns the input unchanged."""
    if spec.severity == 0:
        return image
    p = spec.params()
    x = np.asarray(image, dtype=np.float64)
    kind = spec.kind
    if kind == "gaussian_noise":
        out = x + rng.normal(0.0, p, size=x.shape)
    elif kind == "shot_noise":
        out = rng.poisson(x * p) / p
    elif kind == "impulse_noise":
        out = x.copy()
        hit = rng.random(x.shape) < p
        out[hit] = (rng.random(int(hit.sum())) < 0.5).astype(np.float64)
    elif kind == "defocus_blur":
        radius, passes = p
        out = x
        for _ in range(passes):
            out = _box_blur(out, radius)
    elif kind == "contrast":
        m = x.mean(axis=(0, 1), keepdims=True)
        out = (x - m) * p + m
    elif kind == "brightness":
        out = x + p
    elif kind == "fog":
        haze = _haze(x.shape[:2], rng)[..., None]
        out = (1 - p) * x + p * haze
    elif kind == "pixelate":
        out = pixelate(x, p)
    else:  # pragma: no cover - DomainSpec validates kinds
        raise AssertionError(kind)
    return np.clip(out, 0.0, 1.0)


def pixelate(image: np.ndarray, block: float) -> np.ndarray:
    """Average over cells ``floor(i / block)`` x ``floor(j / block)`` and paint them back.

    Integer blocks give the usual constant ``block x block`` squares; fractional
    blocks mix cell sizes.
    """
    if block <= 1:
        return image
    h, w = image.shape[:2]
    rows = np.floor(np.arange(h) / block).astype(int)
    cols = np.floor(np.arange(w) / block).astype(int)
    nr, nc = rows[-1] + 1, cols[-1] + 1
    flat = image.reshape(h, w, -1)
    sums = np.zeros((nr, nc, flat.shape[-1]))
    np.add.at(sums, (rows[:, None], cols[None, :]), flat)
    counts = np.bincount(rows)[:, None] * np.bincount(cols)[None, :]
    cells = sums / counts[..., None]
    return cells[rows][:, cols].reshape(image.shape)


# ---------------------------------------------------------------------------
# streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Batch:
    images: np.ndarray
    domain: DomainSpec
    _labels: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.images)


def reveal_labels(batch: Batch) -> np.ndarray:
    """Evaluator-only access to a batch's ground truth."""
    return batch._labels


def make_batch(domain: DomainSpec, size: int, rng: np.random.Generator, classes: int = 10,
               dtype=np.float32) -> Batch:
    labels = rng.integers(0, classes, size=size)
    imgs = np.stack([corrupt(render_glyph(int(c), rng=rng), domain, rng) for c in labels])
    return Batch(imgs.astype(dtype), domain, labels.astype(np.int64))


def make_stream(domains: Sequence[DomainSpec], batches_per_domain: int, batch_size: int,
                seed: int, classes: int = 10) -> list[Batch]:
    if not domains:
        raise ValueError("empty domain list")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    rng = np.random.default_rng(seed)
    return [make_batch(d, batch_size, rng, classes)
            for d in domains for _ in range(batches_per_domain)]


def shuffle_mixed(stream: Sequence[Batch], seed: int) -> list[Batch]:
    """Batch-level random permutation of a stream."""
    if not stream:
        raise ValueError("empty stream")
    order = np.random.default_rng(seed).permutation(len(stream))
    return [stream[i] for i in order]


def default_domains(severity: int = 5) -> list[DomainSpec]:
    return [DomainSpec(k, severity) for k in KINDS]


def stream_hash(stream: Sequence[Batch]) -> str:
    h = hashlib.sha256()
    for b in stream:
        h.update(b.domain.tag.encode())
        h.update(np.ascontiguousarray(b.images).tobytes())
        h.update(np.ascontiguousarray(b._labels).tobytes())
    return h.hexdigest()


def clean_dataset(n: int, seed: int, classes: int = 10, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """``n`` clean jittered glyphs with balanced-in-expectation labels."""
    batch = make_batch(DomainSpec(KINDS[0], 0), n, np.random.default_rng(seed), classes, dtype)
    return batch.images, reveal_labels(batch)


def save_stream(stream: Sequence[Batch], directory: str | Path, meta: dict | None = None) -> Path:
    """Write batches as raw containers; hidden labels go to a separate evaluator file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    labels = {}
    for i, b in enumerate(stream):
        name = f"batch_{i:05d}"
        save_raw(directory / name, b.images)
        entries.append({"file": name, "kind": b.domain.kind, "severity": b.domain.severity,
                        "size": len(b)})
        labels[name] = b._labels.tolist()
    manifest = {"batches": entries, "stream_hash": stream_hash(stream), **(meta or {})}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    (directory / "labels.eval.json").write_text(json.dumps(labels))
    return directory


def load_stream(directory: str | Path) -> list[Batch]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    labels = json.loads((directory / "labels.eval.json").read_text())
    out = []
    for e in manifest["batches"]:
        imgs = load_raw(directory / e["file"])
        out.append(Batch(imgs, DomainSpec(e["kind"], e["severity"]),
                         np.asarray(labels[e["file"]], dtype=np.int64)))
    return out
