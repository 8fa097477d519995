import logging
import math
import struct
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import NamedTuple, Protocol

import numpy as np
from PIL import Image, UnidentifiedImageError
from sklearn.decomposition import PCA

from config import PatchConfig
from core import (
    ConfigError,
    CorruptionError,
    D2lvError,
    DomainError,
    FeatureRecord,
    FeatureStore,
    FormatError,
    ImageBuffer,
    TruncationError,
    load_image,
    parallel_map,
)
from patches import query_patches, reference_patches

logger = logging.getLogger(__name__)

PCA_MAGIC = b"D2PC"
_PCA_HEADER = struct.Struct("<4sII")
DEFAULT_PCA_DIM = 1500
_LUMA = np.array([0.299, 0.587, 0.114])


class DescriptorModel(Protocol):
    model_id: str
    output_dim: int

    def describe_array(self, arr: np.ndarray) -> np.ndarray: ...


def l2_normalize(v):
    """Unit-length copy; the zero vector maps to the first basis vector."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        out = np.zeros_like(v)
        out[0] = 1.0
        return out, True
    return v / norm, False


@dataclass(frozen=True)
class TiledDescriptor:
    """Per cell of a G x G grid: mean R, G, B and an 8-bin gradient-orientation histogram."""

    grid: int = 8
    bins: int = 8
    gradient_weight: float = 2.0
    model_id: str = ""

    def __post_init__(self):
        if not self.model_id:
            object.__setattr__(self, "model_id", f"tiled{self.grid}")

    @property
    def output_dim(self):
        return self.grid * self.grid * (3 + self.bins)

    def describe_array(self, arr):
        rgb = np.asarray(arr, dtype=np.float64) / 255.0
        h, w = rgb.shape[:2]
        g = self.grid
        rows = (np.arange(h) * g) // h
        cols = (np.arange(w) * g) // w
        cell = (rows[:, None] * g + cols[None, :]).ravel()
        counts = np.bincount(cell, minlength=g * g).astype(np.float64)
        counts[counts == 0] = 1.0

        means = np.stack(
            [np.bincount(cell, weights=rgb[..., c].ravel(), minlength=g * g) / counts for c in range(3)],
            axis=1,
        )

        gray = rgb @ _LUMA
        gy, gx = np.gradient(gray) if min(h, w) > 1 else (np.zeros_like(gray), np.zeros_like(gray))
        magnitude = np.hypot(gx, gy).ravel()
        angle = np.mod(np.arctan2(gy, gx).ravel(), 2 * np.pi)
        bin_index = np.minimum((angle / (2 * np.pi / self.bins)).astype(int), self.bins - 1)
        hist = np.bincount(cell * self.bins + bin_index, weights=magnitude, minlength=g * g * self.bins)
        hist = hist.reshape(g * g, self.bins) / counts[:, None] * self.gradient_weight

        return np.concatenate([means, hist], axis=1).ravel()


def build_model(spec):
    """Descriptor from a registry spec such as `tiled:8`."""
    name, _, arg = spec.partition(":")
    if name == "tiled":
        try:
            grid = int(arg) if arg else 8
        except ValueError:
            raise ConfigError(f"bad grid size in model spec {spec!r}") from None
        if grid < 1:
            raise ConfigError(f"grid size must be >= 1 in {spec!r}")
        return TiledDescriptor(grid=grid)
    raise ConfigError(f"unknown descriptor model {spec!r}")


def describe(model, patch, scale):
    """Resample the patch to scale x scale and return the unit-length descriptor."""
    pixels = patch if isinstance(patch, ImageBuffer) else patch.pixels
    arr = np.asarray(pixels.to_pil().resize((scale, scale), Image.Resampling.BILINEAR))
    raw = np.asarray(model.describe_array(arr), dtype=np.float64)
    vec, _ = l2_normalize(raw)
    return vec


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray = field(repr=False)
    components: np.ndarray = field(repr=False)
    explained_variance: np.ndarray | None = field(default=None, repr=False)
    explained_variance_ratio: float = math.nan
    whiten: bool = False

    @property
    def d_raw(self):
        return self.components.shape[1]

    @property
    def d_out(self):
        return self.components.shape[0]

    def projection_matrix(self):
        """Rows actually applied to centered input; whitening scales each row."""
        if not self.whiten:
            return self.components
        scale = 1.0 / np.sqrt(np.maximum(self.explained_variance, 1e-12))
        return self.components * scale[:, None]


class ProjectedVector(NamedTuple):
    vector: np.ndarray
    degenerate: bool


def default_pca_dim(d_raw, n_samples):
    return DEFAULT_PCA_DIM if d_raw >= DEFAULT_PCA_DIM else min(d_raw, n_samples)


def pca_fit(samples, d_out=None, whiten=False):
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DomainError("PCA needs a non-empty 2-D sample matrix")
    n, d_raw = x.shape
    if d_out is None:
        d_out = default_pca_dim(d_raw, n)
    mean = x.mean(axis=0)
    rank = int(np.linalg.matrix_rank(x - mean))
    if rank == 0:
        raise DomainError("PCA samples have rank 0 after centering (all samples identical)")
    if d_out > rank:
        logger.warning("requested %d PCA components but the centered data has rank %d; using %d", d_out, rank, rank)
        d_out = rank
    pca = PCA(n_components=d_out, svd_solver="full").fit(x)
    model = PcaModel(
        mean=pca.mean_.copy(),
        components=pca.components_.copy(),
        explained_variance=pca.explained_variance_.copy(),
        explained_variance_ratio=float(pca.explained_variance_ratio_.sum()),
        whiten=whiten,
    )
    logger.info("fitted PCA %d -> %d on %d samples, explained variance %.4f", d_raw, d_out, n, model.explained_variance_ratio)
    return model


def pca_project(model, v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (model.d_raw,):
        raise ConfigError(f"PCA expects dim {model.d_raw}, got {v.shape}")
    vec, degenerate = l2_normalize(model.projection_matrix() @ (v - model.mean))
    if degenerate:
        logger.warning("projection collapsed to the origin; substituted the first basis vector")
    return ProjectedVector(vec, degenerate)


def save_pca(model, path):
    path = Path(path)
    comps = model.projection_matrix()
    with open(path, "wb") as f:
        f.write(_PCA_HEADER.pack(PCA_MAGIC, model.d_raw, model.d_out))
        f.write(model.mean.astype("<f4").tobytes())
        f.write(comps.astype("<f4").tobytes())
    logger.info("wrote PCA model %d -> %d to %s", model.d_raw, model.d_out, path)


def load_pca(path):
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != PCA_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {PCA_MAGIC!r}")
    if len(data) < _PCA_HEADER.size:
        raise TruncationError(f"{path}: truncated PCA header")
    _, d_raw, d_out = _PCA_HEADER.unpack_from(data)
    expected = _PCA_HEADER.size + 4 * (d_raw + d_out * d_raw)
    if len(data) < expected:
        raise TruncationError(f"{path}: PCA payload has {len(data)} bytes, expected {expected}")
    body = np.frombuffer(data, dtype="<f4", offset=_PCA_HEADER.size, count=d_raw + d_out * d_raw)
    if not np.all(np.isfinite(body)):
        raise CorruptionError(f"{path}: non-finite value in PCA payload")
    mean = body[:d_raw].astype(np.float64)
    comps = body[d_raw:].astype(np.float64).reshape(d_out, d_raw)
    return PcaModel(mean=mean, components=comps)


def _output_dim(model, pca):
    p = pca.get(model.model_id)
    if p is None:
        return model.output_dim
    if p.d_raw != model.output_dim:
        raise ConfigError(f"PCA for {model.model_id} expects dim {p.d_raw}, model emits {model.output_dim}")
    return p.d_out


def _patches_for(role, image_id, img, plan, cfg, detector):
    if role == "query":
        return query_patches(img, plan, detector, cfg, image_id=image_id)
    return reference_patches(img, plan, cfg, image_id=image_id)


def _extract_chunk(chunk, plan, models, scales, pca, role, cfg, detector):
    records = []
    collapsed = 0
    for image_id, source in chunk:
        try:
            img = source if isinstance(source, ImageBuffer) else load_image(source)
            patches = _patches_for(role, image_id, img, plan, cfg, detector)
            for model in models:
                for scale in scales:
                    for patch in patches:
                        vec = describe(model, patch, scale)
                        if model.model_id in pca:
                            vec, degenerate = pca_project(pca[model.model_id], vec)
                            collapsed += degenerate
                        records.append(FeatureRecord(image_id, patch.patch_id, model.model_id, scale, vec))
        except (OSError, UnidentifiedImageError, D2lvError) as exc:
            logger.warning("feature extraction failed for %s: %s", image_id, exc)
    if collapsed:
        logger.warning("%d projected descriptors collapsed to the origin and were flagged", collapsed)
    return records


def extract_all(images, plan, models, scales, pca=None, role="reference", cfg=None, detector=None, jobs=1):
    """One record per (image, patch, model, scale), sorted by key."""
    if role not in ("query", "reference"):
        raise ConfigError(f"role must be query or reference, got {role!r}")
    images = list(images)
    models = list(models)
    pca = dict(pca or {})
    cfg = cfg or PatchConfig()
    if not models:
        raise ConfigError("extraction needs at least one descriptor model")
    dims = {_output_dim(m, pca) for m in models}
    if len(dims) != 1:
        raise ConfigError(f"models produce different dims {sorted(dims)}; extract them into separate stores")
    n_chunks = max(1, min(len(images), jobs or 1))
    chunks = [images[i::n_chunks] for i in range(n_chunks)]
    worker = partial(
        _extract_chunk, plan=plan, models=models, scales=list(scales), pca=pca, role=role, cfg=cfg, detector=detector
    )
    records = [r for part in parallel_map(worker, chunks, jobs) for r in part]
    store = FeatureStore(dims.pop(), sorted(records, key=lambda r: r.key))
    done = len({r.image for r in records})
    logger.info("extracted %d %s records from %d/%d images", len(store), role, done, len(images))
    return store


def fit_pca_on_store(store, model=None, scale=None, d_out=None, whiten=False):
    sel = store.select(model=model, scale=scale)
    return pca_fit(sel.matrix().astype(np.float64), d_out=d_out, whiten=whiten)


def apply_pca_to_store(store, pca_by_model):
    """Project every record whose model has a PCA; others must already match the output dim."""
    out, dims, collapsed = [], set(), []
    for rec in store.records:
        p = pca_by_model.get(rec.model)
        vec, degenerate = (rec.vector, False) if p is None else pca_project(p, rec.vector)
        if degenerate:
            collapsed.append(rec.key)
        dims.add(len(vec))
        out.append(FeatureRecord(rec.image, rec.patch, rec.model, rec.scale, vec))
    if len(dims) > 1:
        raise ConfigError(f"projected store would mix dims {sorted(dims)}")
    if collapsed:
        logger.warning("%d of %d projected records collapsed to the origin, first %s",
                       len(collapsed), len(out), collapsed[0])
    return FeatureStore(dims.pop() if dims else store.dim, out)
