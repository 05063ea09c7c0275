"""Online continual adaptation loop, source training, and metric accounting.

Each target batch is predicted on arrival (before any update that uses it),
then a knowledge batch of the same size is restyled towards it and the student
is optimised on the enabled loss parts. The teacher follows the student by EMA.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses
from . import tensor as T
from .fourier import style_inject
from .knowledge import KnowledgeBase, sample_batch
from .model import ModelConfig, ModelParams, ema_update, extract_stats, forward, init_params, predict
from .stream import Batch, clean_dataset, reveal_labels, stream_hash

log = logging.getLogger(__name__)

PARTS = ("pce", "input_inject", "stat_bridge", "scl", "st")
ST_VARIANTS = ("teacher_student", "entropy_min")
SCOPES = ("all_params", "norm_only")
CSV_COLUMNS = ("step", "domain_kind", "severity", "batch_error", "cum_error",
               "loss_pce", "loss_scl", "loss_st", "loss_total", "lr", "seed")

# Table-3 style ablation grid, Ex1..Ex7
ABLATION_GRID = {
    "Ex1": ("st",),
    "Ex2": ("st", "pce"),
    "Ex3": ("st", "pce", "input_inject"),
    "Ex4": ("st", "pce", "stat_bridge"),
    "Ex5": ("st", "pce", "scl"),
    "Ex6": ("st", "pce", "input_inject", "stat_bridge"),
    "Ex7": PARTS,
}


class AdaptationAborted(RuntimeError):
    def __init__(self, message: str, state: "AdaptState", dump_path: Path | None = None):
        super().__init__(message)
        self.state = state
        self.dump_path = dump_path


@dataclass(frozen=True)
class AdaptConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    momentum: float = 0.95
    batch_size: int = 50
    parts: tuple[str, ...] = PARTS
    st_variant: str = "teacher_student"
    update_scope: str | None = None
    tau: float = 1.0
    fourier_beta: float = 0.0625
    confidence: float = 0.0
    evaluate_with: str | None = None
    stratified_kb: bool = False
    precision: str = "float32"
    seed: int = 0

    def __post_init__(self):
        parts = tuple(p for p in PARTS if p in set(self.parts))
        unknown = set(self.parts) - set(PARTS)
        if unknown:
            raise ValueError(f"unknown parts {sorted(unknown)}")
        if not set(parts) & {"pce", "scl", "st"}:
            raise ValueError("at least one loss part (pce, scl, st) must be enabled")
        object.__setattr__(self, "parts", parts)
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must be in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.st_variant not in ST_VARIANTS:
            raise ValueError(f"st_variant must be one of {ST_VARIANTS}")
        if self.update_scope is None:
            scope = "norm_only" if self.st_variant == "entropy_min" else "all_params"
            object.__setattr__(self, "update_scope", scope)
        if self.update_scope not in SCOPES:
            raise ValueError(f"update_scope must be one of {SCOPES}")
        if self.evaluate_with is None:
            who = "student" if self.st_variant == "entropy_min" else "teacher"
            object.__setattr__(self, "evaluate_with", who)
        if self.evaluate_with not in ("teacher", "student"):
            raise ValueError("evaluate_with must be 'teacher' or 'student'")
        if self.evaluate_with == "teacher" and self.st_variant == "entropy_min":
            raise ValueError("entropy_min has no teacher to evaluate")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.fourier_beta <= 1.0:
            raise ValueError("fourier_beta must be in [0, 1]")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def loss_parts(self) -> tuple[str, ...]:
        return tuple(p for p in ("pce", "scl", "st") if p in self.parts)

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["parts"] = list(self.parts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        if "parts" in d:
            d["parts"] = tuple(d["parts"])
        return cls(**d)


@dataclass
class AdaptState:
    config: AdaptConfig
    student: ModelParams
    teacher: ModelParams
    moment1: dict[str, np.ndarray]
    moment2: dict[str, np.ndarray]
    t: int = 0

    def trainable(self) -> list[str]:
        if self.config.update_scope == "norm_only":
            return self.student.norm_names()
        return self.student.names()


def init(source: ModelParams, cfg: AdaptConfig) -> AdaptState:
    """Student and teacher both start as copies of the source model."""
    params = source.astype(cfg.dtype)
    params.validate()
    zeros = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    return AdaptState(cfg, params.copy(), params.copy(), zeros,
                      {k: v.copy() for k, v in zeros.items()}, 0)


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                moments: tuple[dict[str, np.ndarray], dict[str, np.ndarray]], t: int,
                lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam step for the parameters named in ``grads``.

    Returns new parameter and moment dicts; inputs are left untouched.
    """
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    b1, b2 = betas
    m_in, v_in = moments
    new_p, new_m, new_v = dict(params), dict(m_in), dict(v_in)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape or m_in[name].shape != p.shape:
            raise ValueError(f"{name}: gradient/moment shape does not match parameter")
        m = b1 * m_in[name] + (1 - b1) * g
        v = b2 * v_in[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        new_m[name] = m.astype(p.dtype)
        new_v[name] = v.astype(p.dtype)
    return new_p, (new_m, new_v)


@dataclass
class StepTrace:
    """Intermediate values of one step, for replaying the objective."""

    knowledge_images: np.ndarray | None = None
    knowledge_labels: np.ndarray | None = None
    knowledge_logits: np.ndarray | None = None
    joint_embeddings: np.ndarray | None = None
    joint_labels: np.ndarray | None = None
    student_probs: np.ndarray | None = None
    teacher_probs: np.ndarray | None = None
    target_stats: tuple[np.ndarray, np.ndarray] | None = None


def step(state: AdaptState, images: np.ndarray, kb: KnowledgeBase | None,
         rng: np.random.Generator, trace: StepTrace | None = None):
    """Predict, then adapt on one target batch.

    Returns ``(predictions, LossBreakdown, new_state)``. Pass a ``StepTrace`` to
    have intermediates recorded into it.
    """
    cfg = state.config
    parts = set(cfg.parts)
    images = np.asarray(images, dtype=cfg.dtype)
    bsz = len(images)
    if bsz < 1:
        raise ValueError("target batch must be non-empty")
    use_teacher = cfg.st_variant == "teacher_student"

    q = None
    if use_teacher:
        with T.no_grad():
            q = forward(state.teacher, images).probs.data

    weights = state.student.leaves(requires_grad=True, names=state.trainable())
    tgt = forward(state.student, images, weights=weights)
    student_probs = tgt.probs.data
    # predictions are fixed here, before this batch contributes any gradient
    preds = (q if cfg.evaluate_with == "teacher" else student_probs).argmax(axis=1)

    label_src = q if use_teacher else student_probs
    pseudo = label_src.argmax(axis=1)
    keep = np.flatnonzero(label_src.max(axis=1) >= cfg.confidence)

    values: dict[str, T.Tensor] = {}
    if parts & {"pce", "scl"}:
        if kb is None or len(kb) == 0:
            raise ValueError("knowledge base required for pce/scl")
        k_img, k_lab = sample_batch(kb, bsz, rng, stratified=cfg.stratified_kb)
        if "input_inject" in parts:
            k_img = style_inject(k_img, images, cfg.fourier_beta)
        bridge = None
        if "stat_bridge" in parts:
            with T.no_grad():
                stats = extract_stats(tgt.z.detach())
            bridge = (stats.mu.data, stats.sigma.data)
        kout = forward(state.student, k_img, bridge=bridge, weights=weights)
        if "pce" in parts:
            values["pce"] = losses.pce(kout.logits, k_lab)
        joint_lab = None
        if "scl" in parts:
            tgt_emb = T.take_rows(tgt.embedding, keep)
            joint = T.concat([kout.embedding, tgt_emb], axis=0)
            joint_lab = np.concatenate([k_lab, pseudo[keep]])
            values["scl"] = losses.scl(joint, joint_lab, cfg.tau)
        if trace is not None:
            trace.knowledge_images = k_img
            trace.knowledge_labels = k_lab
            trace.knowledge_logits = kout.logits.data.copy()
            trace.target_stats = bridge
            if joint_lab is not None:
                trace.joint_embeddings = joint.data.copy()
                trace.joint_labels = joint_lab
    if "st" in parts:
        if use_teacher:
            values["st"] = losses.symmetric_ce(tgt.probs, q)
        else:
            values["st"] = losses.entropy(tgt.probs)
    if trace is not None:
        trace.student_probs = student_probs.copy()
        trace.teacher_probs = None if q is None else q.copy()

    objective, breakdown = losses.total(cfg.loss_parts, values)
    T.backward(objective)
    grads = {n: (w.grad if w.grad is not None else np.zeros_like(w.data))
             for n, w in weights.items() if w.requires_grad}
    t = state.t + 1
    new_arrays, (m1, m2) = adam_update(state.student.arrays, grads,
                                       (state.moment1, state.moment2), t,
                                       cfg.lr, cfg.betas, cfg.adam_eps)
    student = ModelParams(state.student.config, new_arrays)
    teacher = ema_update(state.teacher, student, cfg.momentum) if use_teacher else state.teacher
    return preds, breakdown, AdaptState(cfg, student, teacher, m1, m2, t)


# ---------------------------------------------------------------------------
# episodes and metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    domain_errors: dict[str, float] = field(default_factory=dict)
    mean_error: float = float("nan")
    config: dict = field(default_factory=dict)
    stream_hash: str = ""
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in self.rows:
            writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.csv_text())
        return path

    def summary(self) -> dict:
        return {
            "domain_errors": self.domain_errors,
            "mean_error": self.mean_error,
            "config": self.config,
            "stream_hash": self.stream_hash,
            "wall_time": self.wall_time,
            **self.extra,
        }

    def write_summary(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.summary(), indent=2))
        return path


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.8g}"
    return str(v)


class _Accumulator:
    def __init__(self, lr: float, seed: int):
        self.lr, self.seed = lr, seed
        self.rows: list[dict] = []
        self.per_domain: dict[str, list[float]] = {}
        self.wrong = 0
        self.seen = 0

    def add(self, batch: Batch, preds: np.ndarray, breakdown: losses.LossBreakdown | None):
        labels = reveal_labels(batch)
        err = float(np.mean(preds != labels))
        self.wrong += int(np.sum(preds != labels))
        self.seen += len(labels)
        self.per_domain.setdefault(batch.domain.tag, []).append(err)
        row = {
            "step": len(self.rows) + 1,
            "domain_kind": batch.domain.kind,
            "severity": batch.domain.severity,
            "batch_error": err,
            "cum_error": self.wrong / self.seen,
            "lr": self.lr,
            "seed": self.seed,
        }
        row.update(breakdown.as_row() if breakdown is not None else
                   {"loss_pce": 0.0, "loss_scl": 0.0, "loss_st": 0.0, "loss_total": 0.0})
        self.rows.append(row)

    def report(self, **kw) -> MetricsReport:
        dom = {k: float(np.mean(v)) for k, v in self.per_domain.items()}
        mean = float(np.mean(list(dom.values()))) if dom else float("nan")
        return MetricsReport(self.rows, dom, mean, **kw)


def run_episode(source: ModelParams, cfg: AdaptConfig, stream: Sequence[Batch],
                kb: KnowledgeBase | None, dump_dir: str | Path | None = None) -> MetricsReport:
    """Adapt online over ``stream``; each batch is scored on its arrival prediction."""
    if not stream:
        raise ValueError("empty stream")
    start = time.perf_counter()
    state = init(source, cfg)
    rng = np.random.default_rng(cfg.seed)
    acc = _Accumulator(cfg.lr, cfg.seed)
    for batch in stream:
        try:
            preds, breakdown, state = step(state, batch.images, kb, rng)
        except FloatingPointError as exc:
            path = _dump_state(state, dump_dir, str(exc))
            raise AdaptationAborted(f"step {state.t + 1}: {exc}", state, path) from exc
        acc.add(batch, preds, breakdown)
    return acc.report(config=cfg.to_dict(), stream_hash=stream_hash(stream),
                      wall_time=time.perf_counter() - start)


def evaluate_frozen(params: ModelParams, stream: Sequence[Batch], seed: int = 0) -> MetricsReport:
    """Source-only baseline: predictions of a fixed model."""
    start = time.perf_counter()
    acc = _Accumulator(0.0, seed)
    for batch in stream:
        acc.add(batch, predict(params, batch.images), None)
    return acc.report(config={"mode": "source_frozen"}, stream_hash=stream_hash(stream),
                      wall_time=time.perf_counter() - start)


def _dump_state(state: AdaptState, dump_dir, reason: str) -> Path | None:
    if dump_dir is None:
        log.error("adaptation aborted at step %d: %s", state.t + 1, reason)
        return None
    from .model import save_checkpoint

    root = Path(dump_dir) / f"abort_step{state.t + 1:05d}"
    save_checkpoint(state.student, root / "student")
    save_checkpoint(state.teacher, root / "teacher")
    (root / "reason.json").write_text(json.dumps(
        {"step": state.t + 1, "reason": reason, "config": state.config.to_dict()}, indent=2))
    log.error("adaptation aborted at step %d: %s (state dumped to %s)", state.t + 1, reason, root)
    return root


# ---------------------------------------------------------------------------
# source model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SourceConfig:
    samples: int = 5000
    holdout: int = 1000
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 50
    seed: int = 0
    augment: bool = True
    model: ModelConfig = ModelConfig()


def photometric_augment(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Mild per-image contrast, brightness and pixel-noise jitter, clamped to [0, 1]."""
    n = len(images)
    out = images.astype(np.float64)
    contrast = rng.uniform(0.7, 1.0, size=(n, 1, 1, 1))
    shift = rng.uniform(-0.1, 0.1, size=(n, 1, 1, 1))
    sigma = rng.uniform(0.0, 0.1, size=(n, 1, 1, 1))
    mean = out.mean(axis=(1, 2, 3), keepdims=True)
    out = (out - mean) * contrast + mean + shift + sigma * rng.normal(size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(images.dtype)


def train_source(cfg: SourceConfig = SourceConfig()) -> ModelParams:
    """Train the micro model on clean jittered glyphs with cross-entropy only."""
    x, y = clean_dataset(cfg.samples, seed=cfg.seed, classes=cfg.model.classes)
    params = init_params(cfg.model, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    m1 = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    t = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        total_loss = 0.0
        for s in range(0, len(x), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            xb = photometric_augment(x[idx], rng) if cfg.augment else x[idx]
            weights = params.leaves(requires_grad=True)
            out = forward(params, xb, weights=weights)
            loss = losses.pce(out.logits, y[idx])
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"source training diverged in epoch {epoch}")
            T.backward(loss)
            t += 1
            grads = {n: w.grad for n, w in weights.items() if w.grad is not None}
            arrays, (m1, m2) = adam_update(params.arrays, grads, (m1, m2), t, cfg.lr)
            params = ModelParams(params.config, arrays)
            total_loss += float(loss.data) * len(idx)
        log.info("source epoch %d: loss %.4f", epoch + 1, total_loss / len(x))
    return params


def clean_accuracy(params: ModelParams, n: int = 1000, seed: int = 10_000) -> float:
    x, y = clean_dataset(n, seed=seed, classes=params.config.classes)
    return float(np.mean(predict(params, x) == y))
