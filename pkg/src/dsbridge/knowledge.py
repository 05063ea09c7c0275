"""Compact labeled exemplar base and batch sampling."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fourier import read_pnm, write_pnm
from .stream import GLYPHS, Jitter, render_glyph

_NAME = re.compile(r"^(\d+)_(\d+)\.ppm$")


@dataclass(frozen=True)
class KnowledgeBase:
    images: np.ndarray  # [C*M, H, W, 3]
    labels: np.ndarray  # [C*M]
    classes: int
    per_class: int

    def __post_init__(self):
        n = len(self.labels)
        if len(self.images) != n or n != self.classes * self.per_class:
            raise ValueError("knowledge base size must equal classes * per_class")
        counts = np.bincount(self.labels, minlength=self.classes)
        if len(counts) != self.classes or np.any(counts != self.per_class):
            raise ValueError("every class needs exactly per_class exemplars")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("exemplar pixels must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)


def build_procedural(classes: int = 10, per_class: int = 2, seed: int = 0,
                     dtype=np.float32) -> KnowledgeBase:
    """One centred glyph per image on a clean background.

    The first exemplar of each class is the canonical rendering; further ones
    vary only stroke width and scale, mildly.
    """
    if not 1 <= classes <= len(GLYPHS):
        raise ValueError(f"classes must be in [1, {len(GLYPHS)}], got {classes}")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for c in range(classes):
        for m in range(per_class):
            if m == 0:
                stroke, scale = 1.0, 1.0
            else:
                stroke, scale = rng.uniform(0.85, 1.15), rng.uniform(0.9, 1.1)
            images.append(render_glyph(c, Jitter(scale=float(scale)), stroke=float(stroke)))
            labels.append(c)
    return KnowledgeBase(np.stack(images).astype(dtype), np.asarray(labels, dtype=np.int64),
                         classes, per_class)


def save(kb: KnowledgeBase, directory: str | Path) -> Path:
    """Write ``<class>_<index>.ppm`` files plus a small manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    seen: dict[int, int] = {}
    for img, lab in zip(kb.images, kb.labels):
        idx = seen.get(int(lab), 0)
        seen[int(lab)] = idx + 1
        write_pnm(directory / f"{int(lab)}_{idx}.ppm", img)
    manifest = {"classes": kb.classes, "per_class": kb.per_class,
                "image_shape": list(kb.images.shape[1:])}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load(directory: str | Path, dtype=np.float32) -> KnowledgeBase:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} is not a directory")
    files = []
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() != ".ppm":
            continue
        m = _NAME.match(path.name)
        if not m:
            raise ValueError(f"unexpected exemplar file name {path.name!r}")
        files.append((int(m.group(1)), int(m.group(2)), path))
    if not files:
        raise ValueError("no exemplars found")
    files.sort()
    counts: dict[int, int] = {}
    for c, _, _ in files:
        counts[c] = counts.get(c, 0) + 1
    classes = max(counts) + 1
    if sorted(counts) != list(range(classes)):
        raise ValueError("class ids must be contiguous from 0")
    if len(set(counts.values())) != 1:
        raise ValueError("ragged class counts")
    images = [read_pnm(p) for _, _, p in files]
    if len({im.shape for im in images}) != 1:
        raise ValueError("inconsistent exemplar dimensions")
    labels = np.asarray([c for c, _, _ in files], dtype=np.int64)
    return KnowledgeBase(np.stack(images).astype(dtype), labels, classes, counts[0])


def sample_batch(kb: KnowledgeBase, n: int, rng: np.random.Generator,
                 stratified: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` exemplars uniformly with replacement, in draw order.

    ``stratified`` cycles through classes (random order per cycle) and picks a
    random exemplar within each class instead.
    """
    if n < 0:
        raise ValueError("batch size must be non-negative")
    if n == 0:
        return kb.images[:0], kb.labels[:0]
    if len(kb) == 0:
        raise ValueError("cannot sample from an empty knowledge base")
    if stratified:
        reps = -(-n // kb.classes)
        cls = np.concatenate([rng.permutation(kb.classes) for _ in range(reps)])[:n]
        within = rng.integers(0, kb.per_class, size=n)
        by_class = np.argsort(kb.labels, kind="stable").reshape(kb.classes, kb.per_class)
        idx = by_class[cls, within]
    else:
        idx = rng.integers(0, len(kb), size=n)
    return kb.images[idx], kb.labels[idx]
