"""Training-side math as plain numpy: the learning-rate schedule, GeM pooling,
batch-hard triplet loss, label-smoothed cross-entropy and PK batch sampling.

Losses return (loss, gradient) with analytic gradients; nothing here trains.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from core import BatchError, ConfigError, DomainError

logger = logging.getLogger(__name__)

BASE_LR = 3.5e-4


@dataclass(frozen=True)
class ScheduleConfig:
    warmup_end: float = 5
    hold_end: float = 10
    total: float = 25
    floor: float = 0.01

    def __post_init__(self):
        if not 0 < self.warmup_end < self.hold_end < self.total:
            raise ConfigError("schedule needs 0 < warmup_end < hold_end < total")


@dataclass(frozen=True)
class GemParams:
    p: float = 3.0
    epsilon: float = 1e-6

    def __post_init__(self):
        if not (math.isfinite(self.p) and self.p > 0):
            raise ConfigError(f"GeM exponent must be finite and > 0, got {self.p}")


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.3
    normalize: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.margin) and self.margin >= 0):
            raise ConfigError(f"triplet margin must be finite and >= 0, got {self.margin}")


@dataclass(frozen=True)
class SmoothConfig:
    classes: int
    epsilon: float = 0.1

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"label smoothing needs at least 2 classes, got {self.classes}")
        if not 0 <= self.epsilon < 1:
            raise ConfigError(f"smoothing epsilon must lie in [0, 1), got {self.epsilon}")


@dataclass(frozen=True)
class ProjectorShape:
    in_dim: int = 2048
    out_dim: int = 8192
    hidden: tuple = ()

    def __post_init__(self):
        if not 0 < self.in_dim < self.out_dim:
            raise ConfigError(f"projector must widen its input, got {self.in_dim} -> {self.out_dim}")

    @property
    def widths(self):
        return (self.in_dim, *self.hidden, self.out_dim)


def lr_ratio(epoch, cfg=None):
    cfg = cfg or ScheduleConfig()
    if not 0 <= epoch < cfg.total:
        raise DomainError(f"epoch {epoch} outside [0, {cfg.total})")
    if epoch < cfg.warmup_end:
        return (1 - cfg.floor) * epoch / cfg.warmup_end + cfg.floor
    if epoch < cfg.hold_end:
        return 1.0
    progress = (epoch - cfg.hold_end) / (cfg.total - cfg.hold_end)
    return 0.5 * (math.cos(progress * math.pi) + 1)


def learning_rate(epoch, base_lr=BASE_LR, cfg=None):
    return base_lr * lr_ratio(epoch, cfg)


def schedule_rows(cfg=None, base_lr=BASE_LR):
    """(epoch, ratio, lr) for every whole epoch."""
    cfg = cfg or ScheduleConfig()
    return [(e, lr_ratio(e, cfg), learning_rate(e, base_lr, cfg)) for e in range(int(math.ceil(cfg.total)))]


def gem_pool(cells, params=None):
    """Generalized mean over the last axis; inputs are clamped at epsilon first."""
    params = params or GemParams()
    x = np.asarray(cells, dtype=np.float64)
    if x.size == 0 or x.shape[-1] == 0:
        raise DomainError("GeM needs at least one cell")
    x = np.maximum(x, params.epsilon)
    return np.mean(x ** params.p, axis=-1) ** (1.0 / params.p)


def _check_batch(labels):
    values, counts = np.unique(labels, return_counts=True)
    if len(values) < 2:
        raise BatchError("batch-hard mining needs at least two identities in the batch")
    if counts.min() < 2:
        raise BatchError(f"identity {values[counts.argmin()]!r} has a single sample; every identity needs two")


def _normalize_rows(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise BatchError("cannot normalize a zero embedding")
    return x / norms, norms


def triplet_hard_loss(embeddings, labels, cfg=None):
    """Batch-hard triplet loss: farthest positive vs nearest negative per anchor.

    Ties pick the lowest index. Returns (loss, d loss / d embeddings).
    """
    cfg = cfg or TripletConfig()
    raw = np.asarray(embeddings, dtype=np.float64)
    if raw.ndim == 1:
        raw = raw[:, None]
    labels = np.asarray(labels)
    if raw.shape[0] != labels.shape[0]:
        raise BatchError(f"{raw.shape[0]} embeddings but {labels.shape[0]} labels")
    _check_batch(labels)

    x, norms = _normalize_rows(raw) if cfg.normalize else (raw, None)
    n = x.shape[0]
    diff = x[:, None, :] - x[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)

    hard_pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    hard_neg = np.argmin(np.where(~same, dist, np.inf), axis=1)
    rows = np.arange(n)
    d_p, d_n = dist[rows, hard_pos], dist[rows, hard_neg]
    hinge = d_p - d_n + cfg.margin
    active = hinge > 0
    loss = float(np.mean(np.maximum(hinge, 0.0)))

    grad = np.zeros_like(x)
    for a in np.flatnonzero(active):
        p, q = hard_pos[a], hard_neg[a]
        if d_p[a] > 0:
            u = diff[a, p] / d_p[a]
            grad[a] += u
            grad[p] -= u
        if d_n[a] > 0:
            v = diff[a, q] / d_n[a]
            grad[a] -= v
            grad[q] += v
    grad /= n

    if cfg.normalize:
        # back through x / |x|
        grad = (grad - np.sum(grad * x, axis=1, keepdims=True) * x) / norms
    return loss, grad.reshape(np.shape(embeddings))


def ce_label_smooth(logits, target, cfg):
    """Cross-entropy against (1 - eps) one-hot + eps / C; gradient is softmax - q."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape != (cfg.classes,):
        raise ConfigError(f"expected {cfg.classes} logits, got shape {z.shape}")
    if not 0 <= target < cfg.classes:
        raise DomainError(f"target {target} outside [0, {cfg.classes})")
    q = np.full(cfg.classes, cfg.epsilon / cfg.classes)
    q[target] += 1 - cfg.epsilon
    loss = float(-np.dot(q, log_softmax(z)))
    return loss, softmax(z) - q


def pk_sample(labels, p=32, k=4, rng=None):
    """P identities with K distinct images each; indices grouped by identity."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    labels = np.asarray(labels)
    ids, counts = np.unique(labels, return_counts=True)
    eligible = ids[counts >= k]
    if len(eligible) < p:
        raise BatchError(f"need {p} identities with >= {k} images, found {len(eligible)}")
    chosen = rng.choice(eligible, size=p, replace=False)
    batch = []
    for ident in chosen:
        pool = np.flatnonzero(labels == ident)
        batch.extend(int(i) for i in rng.choice(pool, size=k, replace=False))
    return batch


def build_projector(shape=None):
    """The declared projector as a torch stack of Linear layers with ReLU between them."""
    import torch.nn as nn

    shape = shape or ProjectorShape()
    layers = []
    widths = shape.widths
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(widths) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def check_projector(shape=None, batch=2):
    """Run a dummy batch through the projector and assert the in -> out contract."""
    import torch

    shape = shape or ProjectorShape()
    model = build_projector(shape).eval()
    with torch.no_grad():
        out = model(torch.zeros(batch, shape.in_dim))
    if tuple(out.shape) != (batch, shape.out_dim):
        raise ConfigError(f"projector emits {tuple(out.shape)}, expected {(batch, shape.out_dim)}")
    logger.debug("projector %s passes the shape contract", " -> ".join(map(str, shape.widths)))
    return tuple(out.shape)
