import io
import logging
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np
import pandas as pd
from PIL import Image

logger = logging.getLogger(__name__)

MAGIC = b"D2LV"
VERSION = 1
NORM_TOLERANCE = 1e-6

_HEADER = struct.Struct("<4sIQI")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")

PAIR_COLUMNS = ["query_id", "reference_id", "score"]
GT_COLUMNS = ["query_id", "reference_id"]

def _add_note(exc, note):
    # BaseException.add_note is Python 3.11+; fall back to the same __notes__ list.
    if hasattr(exc, "add_note"):
        exc.add_note(note)
    else:
        exc.__notes__ = [*getattr(exc, "__notes__", []), note]


T = TypeVar("T")
R = TypeVar("R")


class D2lvError(Exception):
    pass


class FormatError(D2lvError):
    pass


class TruncationError(D2lvError):
    pass


class CorruptionError(D2lvError):
    pass


class ConfigError(D2lvError):
    pass


class DomainError(D2lvError):
    pass


class BatchError(D2lvError):
    pass


def check_image_id(value):
    """Validate an opaque image id token and return it."""
    if not isinstance(value, str) or not value:
        raise ConfigError(f"image id must be a non-empty string, got {value!r}")
    if "," in value or "\n" in value or "\r" in value:
        raise ConfigError(f"image id {value!r} is not CSV-safe")
    return value


@dataclass(frozen=True)
class ImageBuffer:
    """Decoded RGB raster, rows first, 8-bit samples."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise DomainError(f"expected an H x W x 3 raster, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DomainError("image must be at least 1x1")
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def channels(self):
        return 3

    def to_pil(self):
        return Image.fromarray(np.array(self.data))

    @classmethod
    def from_pil(cls, image):
        return cls(np.asarray(image.convert("RGB")))

    @classmethod
    def filled(cls, width, height, color):
        arr = np.empty((height, width, 3), dtype=np.uint8)
        arr[...] = np.asarray(color, dtype=np.uint8)
        return cls(arr)


def load_image(path):
    path = Path(path)
    try:
        with Image.open(path) as im:
            return ImageBuffer.from_pil(im)
    except OSError as exc:
        _add_note(exc, f"while reading image {path}")
        raise


def save_image(img, path):
    """Write a binary PPM; the output bytes depend on the pixels only."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    img.to_pil().save(buf, format="PPM")
    path.write_bytes(buf.getvalue())


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise DomainError(f"box sides must be >= 1, got {self.w}x{self.h}")

    @property
    def area(self):
        return self.w * self.h

    def within(self, width, height):
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height

    def clip(self, width, height):
        """Intersect with the frame; None if nothing is left."""
        x0, y0 = max(self.x, 0), max(self.y, 0)
        x1, y1 = min(self.x + self.w, width), min(self.y + self.h, height)
        if x1 <= x0 or y1 <= y0:
            return None
        return BoundingBox(x0, y0, x1 - x0, y1 - y0)

    def intersection(self, other):
        ix = max(0, min(self.x + self.w, other.x + other.w) - max(self.x, other.x))
        iy = max(0, min(self.y + self.h, other.y + other.h) - max(self.y, other.y))
        return ix * iy

    def iou(self, other):
        inter = self.intersection(other)
        return inter / float(self.area + other.area - inter)

    def union_box(self, other):
        x0, y0 = min(self.x, other.x), min(self.y, other.y)
        x1 = max(self.x + self.w, other.x + other.w)
        y1 = max(self.y + self.h, other.y + other.h)
        return BoundingBox(x0, y0, x1 - x0, y1 - y0)


@dataclass(frozen=True)
class FeatureRecord:
    image: str
    patch: str
    model: str
    scale: int
    vector: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        check_image_id(self.image)
        if not self.patch or not self.model:
            raise ConfigError("patch and model ids must be non-empty")
        vec = np.ascontiguousarray(self.vector, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(vec)):
            raise CorruptionError(f"non-finite feature for {self.key}")
        norm = float(np.linalg.norm(vec.astype(np.float64)))
        if abs(norm - 1.0) > NORM_TOLERANCE:
            raise CorruptionError(f"feature {self.key} has norm {norm:.8f}, expected 1")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)

    @property
    def key(self):
        return (self.image, self.patch, self.model, self.scale)


class FeatureStore:
    """Ordered, immutable collection of unit-norm feature rows sharing one dim."""

    def __init__(self, dim, records=()):
        if dim < 1:
            raise ConfigError(f"feature dim must be >= 1, got {dim}")
        self.dim = int(dim)
        records = tuple(records)
        seen = set()
        for rec in records:
            if rec.vector.shape[0] != self.dim:
                raise ConfigError(f"record {rec.key} has dim {rec.vector.shape[0]}, store dim is {self.dim}")
            if rec.key in seen:
                raise ConfigError(f"duplicate feature key {rec.key}")
            seen.add(rec.key)
        self.records = records

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other):
        if not isinstance(other, FeatureStore):
            return NotImplemented
        if self.dim != other.dim or len(self) != len(other):
            return False
        return all(
            a.key == b.key and np.array_equal(a.vector, b.vector)
            for a, b in zip(self.records, other.records)
        )

    def models(self):
        return sorted({r.model for r in self.records})

    def scales(self, model=None):
        return sorted({r.scale for r in self.records if model is None or r.model == model})

    def images(self):
        return sorted({r.image for r in self.records})

    def select(self, model=None, scale=None, patches=None):
        keep = [
            r for r in self.records
            if (model is None or r.model == model)
            and (scale is None or r.scale == scale)
            and (patches is None or r.patch in patches)
        ]
        return FeatureStore(self.dim, keep)

    def matrix(self):
        if not self.records:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack([r.vector for r in self.records])


def merge_stores(stores):
    stores = list(stores)
    if not stores:
        raise ConfigError("nothing to merge")
    dims = {s.dim for s in stores}
    if len(dims) != 1:
        raise ConfigError(f"cannot merge stores with dims {sorted(dims)}")
    return FeatureStore(dims.pop(), [r for s in stores for r in s.records])


def _write_str(sink, text):
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ConfigError(f"id too long for the store format: {text[:32]}...")
    sink.write(_U16.pack(len(raw)))
    sink.write(raw)


def write_feature_store(store, sink):
    sink.write(_HEADER.pack(MAGIC, VERSION, len(store), store.dim))
    for rec in store.records:
        _write_str(sink, rec.image)
        _write_str(sink, rec.patch)
        _write_str(sink, rec.model)
        sink.write(_U32.pack(rec.scale))
        sink.write(rec.vector.astype("<f4").tobytes())


def _read_exact(source, n, what):
    data = source.read(n)
    if len(data) != n:
        raise TruncationError(f"truncated feature store while reading {what}")
    return data


def _read_str(source, what):
    (n,) = _U16.unpack(_read_exact(source, 2, what))
    try:
        return _read_exact(source, n, what).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptionError(f"invalid UTF-8 in {what}") from exc


def read_feature_store(source):
    head = source.read(_HEADER.size)
    if len(head) < 4 or head[:4] != MAGIC:
        raise FormatError(f"bad magic {head[:4]!r}, expected {MAGIC!r}")
    if len(head) < _HEADER.size:
        raise TruncationError("truncated feature store header")
    _, version, count, dim = _HEADER.unpack(head)
    if version != VERSION:
        raise FormatError(f"unsupported feature store version {version}")
    records = []
    for i in range(count):
        image = _read_str(source, f"record {i} image id")
        patch = _read_str(source, f"record {i} patch id")
        model = _read_str(source, f"record {i} model id")
        (scale,) = _U32.unpack(_read_exact(source, 4, f"record {i} scale"))
        vec = np.frombuffer(_read_exact(source, 4 * dim, f"record {i} vector"), dtype="<f4")
        if not np.all(np.isfinite(vec)):
            raise CorruptionError(f"non-finite value in record {i} ({image}, {patch})")
        try:
            records.append(FeatureRecord(image, patch, model, scale, vec))
        except ConfigError as exc:
            raise CorruptionError(f"record {i}: {exc}") from exc
    try:
        return FeatureStore(dim, records)
    except ConfigError as exc:
        raise CorruptionError(str(exc)) from exc


def save_feature_store(store, path):
    path = Path(path)
    try:
        with open(path, "wb") as f:
            write_feature_store(store, f)
    except OSError as exc:
        _add_note(exc, f"while writing feature store {path}")
        raise
    logger.info("wrote %d feature records (dim %d) to %s", len(store), store.dim, path)


def load_feature_store(path):
    path = Path(path)
    try:
        with open(path, "rb") as f:
            return read_feature_store(f)
    except OSError as exc:
        _add_note(exc, f"while reading feature store {path}")
        raise


@dataclass(frozen=True)
class PairScore:
    query: str
    reference: str
    score: float

    def __post_init__(self):
        check_image_id(self.query)
        check_image_id(self.reference)
        if not math.isfinite(self.score):
            raise DomainError(f"non-finite score for ({self.query}, {self.reference})")


def write_pairs(pairs, sink):
    """Pair CSV with six-decimal scores; `sink` is a path or a text stream."""
    df = pd.DataFrame(
        [(p.query, p.reference, p.score) for p in pairs],
        columns=PAIR_COLUMNS,
    )
    df.to_csv(sink, index=False, float_format="%.6f", lineterminator="\n")


def read_pairs(source):
    df = pd.read_csv(source, dtype=str, keep_default_na=False)
    if list(df.columns) != PAIR_COLUMNS:
        raise FormatError(f"pair CSV header must be {','.join(PAIR_COLUMNS)}, got {','.join(df.columns)}")
    try:
        scores = pd.to_numeric(df["score"]).astype(float)
    except ValueError as exc:
        raise FormatError(f"pair CSV has a non-numeric score: {exc}") from exc
    return [PairScore(q, r, float(s)) for q, r, s in zip(df["query_id"], df["reference_id"], scores)]


def write_ground_truth(pairs, sink):
    pd.DataFrame(list(pairs), columns=GT_COLUMNS).to_csv(sink, index=False, lineterminator="\n")


def read_ground_truth(source):
    df = pd.read_csv(source, dtype=str, keep_default_na=False)
    if list(df.columns) != GT_COLUMNS:
        raise FormatError(f"ground-truth CSV header must be {','.join(GT_COLUMNS)}")
    return [(check_image_id(q), check_image_id(r)) for q, r in df.itertuples(index=False)]


def resolve_jobs(jobs=None):
    if jobs is None:
        jobs = int(os.getenv("D2LV_JOBS", "1"))
    return max(1, int(jobs))


def parallel_map(fn: Callable[[T], R], items: Iterable[T], jobs=1, kind="process") -> list:
    """Map `fn` over `items`, results in input order for any worker count."""
    items: Sequence[T] = list(items)
    jobs = resolve_jobs(jobs)
    if jobs == 1 or len(items) < 2:
        return [fn(item) for item in items]
    pool_cls = ProcessPoolExecutor if kind == "process" else ThreadPoolExecutor
    with pool_cls(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))
