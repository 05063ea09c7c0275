"""Micro patch classifier with a shallow statistic-bridging hook.

images -> P x P patches -> linear embed (shallow map ``z``) -> optional
restyle of ``z`` to target statistics -> residual blocks
(linear, layer norm with learnable scale/shift, relu) -> token mean pool ->
classifier logits and an L2-normalised projection embedding.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

FORMAT_VERSION = 1
LN_EPS = 1e-5
BRIDGE_EPS = 1e-5
NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch: int = 4
    dim: int = 64
    blocks: int = 3
    proj_dim: int = 32
    classes: int = 10

    @property
    def tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.arrays)

    def norm_names(self) -> list[str]:
        return [n for n in self.arrays if n.endswith((".gamma", ".beta"))]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def leaves(self, requires_grad: bool = True, names=None) -> dict[str, Tensor]:
        """Wrap arrays as tensors; only ``names`` (default all) track gradients."""
        names = set(self.arrays if names is None else names)
        return {k: Tensor(v, requires_grad=requires_grad and k in names)
                for k, v in self.arrays.items()}

    def validate(self) -> None:
        expected = param_shapes(self.config)
        if set(expected) != set(self.arrays):
            raise ValueError(f"parameter names differ from config: {sorted(set(expected) ^ set(self.arrays))}")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ValueError(f"{name}: shape {self.arrays[name].shape}, expected {shape}")
            if not np.isfinite(self.arrays[name]).all():
                raise ValueError(f"{name}: non-finite values")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "embed.w": (cfg.patch_dim, cfg.dim),
        "embed.b": (cfg.dim,),
    }
    for i in range(cfg.blocks):
        shapes[f"block{i}.w"] = (cfg.dim, cfg.dim)
        shapes[f"block{i}.b"] = (cfg.dim,)
        shapes[f"block{i}.gamma"] = (cfg.dim,)
        shapes[f"block{i}.beta"] = (cfg.dim,)
    shapes["head.w"] = (cfg.dim, cfg.classes)
    shapes["head.b"] = (cfg.classes,)
    shapes["proj.w"] = (cfg.dim, cfg.proj_dim)
    shapes["proj.b"] = (cfg.proj_dim,)
    return shapes


def init_params(cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif len(shape) == 2:
            arr = rng.normal(0.0, np.sqrt(1.0 / shape[0]), size=shape)
        else:
            arr = np.zeros(shape)
        arrays[name] = arr.astype(dtype)
    return ModelParams(cfg, arrays)


def zeros_like_params(cfg: ModelConfig, dtype=np.float32) -> ModelParams:
    return ModelParams(cfg, {n: np.zeros(s, dtype=dtype) for n, s in param_shapes(cfg).items()})


class ForwardOut(NamedTuple):
    logits: Tensor
    z: Tensor
    embedding: Tensor
    probs: Tensor


class Stats(NamedTuple):
    mu: Tensor
    sigma: Tensor


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, H, W, C]`` -> ``[B, T, P*P*C]`` non-overlapping patches, row-major tokens."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch * c)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = T.matmul(x, w)
    return y + T.broadcast_to(b, y.shape)


def _as_t(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def extract_stats(z) -> Stats:
    """Per-instance, per-channel mean and population std over the token axis."""
    z = _as_t(z, None)
    if z.ndim != 3 or z.shape[1] < 1:
        raise ValueError(f"expected z of shape [B, T, D] with T >= 1, got {z.shape}")
    return Stats(T.mean(z, axes=1), T.sqrt(T.var(z, axes=1)))


def statistic_bridge(z_k: Tensor, mu_t, sigma_t, eps: float = BRIDGE_EPS) -> Tensor:
    """Move ``z_k``'s per-channel token statistics onto ``(mu_t, sigma_t)``.

    ``out = sigma_t * (z_k - mu_k) / (sigma_k + eps) + mu_t`` where ``mu_k``
    and ``sigma_k`` are ``z_k``'s own mean/std over tokens.
    """
    z_k = _as_t(z_k, None)
    mu_t = _as_t(mu_t, z_k.dtype)
    sigma_t = _as_t(sigma_t, z_k.dtype)
    b, t, d = z_k.shape
    if mu_t.shape != (b, d) or sigma_t.shape != (b, d):
        raise ValueError(f"target stats must be [{b}, {d}], got {mu_t.shape} and {sigma_t.shape}")
    if np.any(sigma_t.data < 0):
        raise ValueError("target std must be non-negative")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    mu_k = T.mean(z_k, axes=1, keepdims=True)
    sd_k = T.sqrt(T.var(z_k, axes=1, keepdims=True))
    normed = T.div(z_k - T.broadcast_to(mu_k, z_k.shape),
                   T.broadcast_to(sd_k + eps, z_k.shape))
    scale = T.broadcast_to(T.reshape(sigma_t, (b, 1, d)), z_k.shape)
    shift = T.broadcast_to(T.reshape(mu_t, (b, 1, d)), z_k.shape)
    return normed * scale + shift


def _layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    mu = T.mean(x, axes=-1, keepdims=True)
    sd = T.sqrt(T.var(x, axes=-1, keepdims=True) + LN_EPS)
    y = T.div(x - T.broadcast_to(mu, x.shape), T.broadcast_to(sd, x.shape))
    return y * T.broadcast_to(gamma, x.shape) + T.broadcast_to(beta, x.shape)


def forward(params: ModelParams, images, bridge: Stats | tuple | None = None,
            weights: Mapping[str, Tensor] | None = None) -> ForwardOut:
    """Run the classifier on a ``[B, H, W, C]`` batch.

    ``weights`` overrides the plain (non-tracking) wrapping of ``params`` so
    callers can differentiate with respect to any subset of parameters.
    """
    cfg = params.config
    w = weights if weights is not None else params.leaves(requires_grad=False)
    dtype = w["embed.w"].dtype
    imgs = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=dtype)
    if imgs.ndim != 4 or imgs.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ValueError(f"expected images [B, {cfg.image_size}, {cfg.image_size}, {cfg.channels}], got {imgs.shape}")
    bsz = imgs.shape[0]
    tok = cfg.tokens
    patches = Tensor(patchify(imgs, cfg.patch).reshape(bsz * tok, cfg.patch_dim))

    z = T.reshape(_linear(patches, w["embed.w"], w["embed.b"]), (bsz, tok, cfg.dim))
    h = z
    if bridge is not None:
        mu_t, sigma_t = bridge
        mu_t, sigma_t = _as_t(mu_t, dtype), _as_t(sigma_t, dtype)
        if mu_t.shape[0] != bsz or sigma_t.shape[0] != bsz:
            raise ValueError(f"bridge batch {mu_t.shape[0]} != image batch {bsz}")
        h = statistic_bridge(z, mu_t, sigma_t)

    x = T.reshape(h, (bsz * tok, cfg.dim))
    for i in range(cfg.blocks):
        u = _linear(x, w[f"block{i}.w"], w[f"block{i}.b"])
        u = _layer_norm(u, w[f"block{i}.gamma"], w[f"block{i}.beta"])
        x = x + T.relu(u)

    pooled = T.mean(T.reshape(x, (bsz, tok, cfg.dim)), axes=1)
    logits = _linear(pooled, w["head.w"], w["head.b"])
    e = _linear(pooled, w["proj.w"], w["proj.b"])
    norm = T.clip_min(T.sqrt(T.sum(e * e, axes=1, keepdims=True)), NORM_FLOOR)
    emb = T.div(e, T.broadcast_to(norm, e.shape))
    return ForwardOut(logits, z, emb, T.softmax(logits))


def predict(params: ModelParams, images, batch_size: int = 250) -> np.ndarray:
    """Class predictions without recording a graph."""
    preds = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            out = forward(params, images[s:s + batch_size])
            preds.append(out.logits.data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def ema_update(teacher: ModelParams, student: ModelParams, momentum: float) -> ModelParams:
    """Per-scalar ``m * teacher + (1 - m) * student``."""
    if teacher.config != student.config:
        raise ValueError("teacher and student hyperparameters differ")
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {momentum}")
    m = momentum
    out = {}
    for name, t in teacher.arrays.items():
        s = student.arrays[name]
        if m == 1.0:
            out[name] = t.copy()
        elif m == 0.0:
            out[name] = s.copy()
        else:
            mixed = m * t + (1.0 - m) * s
            # rounding can push a mix a hair outside its endpoints
            out[name] = np.clip(mixed, np.minimum(t, s), np.maximum(t, s)).astype(t.dtype)
    return ModelParams(teacher.config, out)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in params.arrays.items():
        T.save_raw(directory / name, arr)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name})
    manifest = {
        "format_version": FORMAT_VERSION,
        "hyperparameters": asdict(params.config),
        "params": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_checkpoint(directory: str | Path) -> ModelParams:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    cfg = ModelConfig(**manifest["hyperparameters"])
    arrays = {e["name"]: T.load_raw(directory / e["name"]) for e in manifest["params"]}
    params = ModelParams(cfg, arrays)
    params.validate()
    return params
