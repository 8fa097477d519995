import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import pandas as pd
from scipy import ndimage

from config import PatchConfig
from core import BoundingBox, ConfigError, DomainError, ImageBuffer, check_image_id

logger = logging.getLogger(__name__)

WHOLE_FRAME_IDS = ("orig", "rot90", "rot180", "rot270")
RULE_KINDS = ("identity", "rotate", "center", "grid", "proposals", "detector")
PATCH_CSV_COLUMNS = ["image_id", "patch_id", "x", "y", "w", "h", "rot"]


@dataclass(frozen=True)
class PatchRule:
    kind: str
    arg: int | str | None = None

    def __str__(self):
        return self.kind if self.arg is None else f"{self.kind}:{self.arg}"


@dataclass(frozen=True)
class PatchPlan:
    name: str
    steps: tuple

    def __post_init__(self):
        if not any(r.kind == "identity" for r in self.steps):
            raise ConfigError(f"patch plan {self.name!r} must contain the identity rule")


@dataclass(frozen=True)
class Patch:
    source: str
    patch_id: str
    box: BoundingBox
    rotation: int
    pixels: ImageBuffer = field(repr=False, compare=False)

    @property
    def whole_frame(self):
        return self.patch_id in WHOLE_FRAME_IDS


def parse_rule(text):
    kind, _, arg = text.strip().partition(":")
    if kind not in RULE_KINDS:
        raise ConfigError(f"unknown patch rule {text!r}")
    if kind == "rotate":
        if arg not in ("90", "180", "270"):
            raise ConfigError(f"rotation must be 90, 180 or 270, got {arg!r}")
        return PatchRule(kind, int(arg))
    if kind == "center":
        if arg not in ("exact", "third"):
            raise ConfigError(f"center crop mode must be exact or third, got {arg!r}")
        return PatchRule(kind, arg)
    if kind == "grid":
        if arg not in ("2", "3"):
            raise ConfigError(f"grid split must be 2 or 3, got {arg!r}")
        return PatchRule(kind, int(arg))
    if kind == "proposals":
        try:
            return PatchRule(kind, int(arg))
        except ValueError:
            raise ConfigError(f"proposals rule needs a count, got {text!r}") from None
    if arg:
        raise ConfigError(f"rule {kind!r} takes no argument")
    return PatchRule(kind)


def parse_plan(name, rules):
    return PatchPlan(name, tuple(parse_rule(r) for r in rules))


def default_query_plan(proposals=8, detector=True):
    rules = ["identity", "rotate:90", "rotate:180", "rotate:270", "center:exact", "center:third"]
    if proposals:
        rules.append(f"proposals:{proposals}")
    if detector:
        rules.append("detector")
    return parse_plan("query", rules)


def default_reference_plan():
    return parse_plan("reference", PatchConfig().reference_plan)


def center_crop(width, height, mode="exact", exact_ratio=0.5, third_ratio=1.0 / 3.0):
    ratio = {"exact": exact_ratio, "third": third_ratio, "one-third": third_ratio}.get(mode)
    if ratio is None:
        raise ConfigError(f"unknown center crop mode {mode!r}")
    # the epsilon keeps 300 * (1/3) at 100
    w = max(1, math.floor(width * ratio + 1e-9))
    h = max(1, math.floor(height * ratio + 1e-9))
    return BoundingBox((width - w) // 2, (height - h) // 2, w, h)


def grid_split(width, height, n):
    """n x n cells in row-major order that tile the frame exactly."""
    xs = [(i * width) // n for i in range(n + 1)]
    ys = [(j * height) // n for j in range(n + 1)]
    return [
        BoundingBox(xs[i], ys[j], xs[i + 1] - xs[i], ys[j + 1] - ys[j])
        for j in range(n) for i in range(n)
    ]


def _merge_overlapping(boxes, iou_threshold):
    boxes = list(boxes)
    merged = True
    while merged:
        merged = False
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                if boxes[i].iou(boxes[j]) > iou_threshold:
                    boxes[i] = boxes[i].union_box(boxes[j])
                    del boxes[j]
                    merged = True
                    break
            if merged:
                break
    return boxes


def proposal_regions(img, max_k, min_side=32, percentile=75.0, iou_threshold=0.5):
    """Saliency-component proposals: gradient magnitude, percentile threshold, components, merge."""
    if max_k <= 0:
        return []
    gray = np.asarray(img.data, dtype=np.float64) @ np.array([0.299, 0.587, 0.114])
    gy, gx = np.gradient(gray)
    magnitude = np.hypot(gx, gy)
    if not np.any(magnitude > 0):
        return []
    mask = magnitude > np.percentile(magnitude, percentile)
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    boxes = []
    for sl in ndimage.find_objects(labels):
        if sl is None:
            continue
        ys, xs = sl
        boxes.append(BoundingBox(xs.start, ys.start, xs.stop - xs.start, ys.stop - ys.start))
    boxes = _merge_overlapping(boxes, iou_threshold)
    boxes = [b for b in boxes if min(b.w, b.h) >= min_side]
    boxes.sort(key=lambda b: (-b.area, b.y, b.x, b.h, b.w))
    return boxes[:max_k]


class OverlayDetector(Protocol):
    def detect_overlay(self, img: ImageBuffer) -> list: ...


class NullDetector:
    def detect_overlay(self, img):
        return []


@dataclass(frozen=True)
class EdgeRectDetector:
    """Finds pasted rectangles: axis-aligned boxes closed by four sharp color steps.

    A boundary candidate is a column (row) holding at least `min_side` steps above
    `threshold`; a box is kept when every side is covered to at least `coverage`.
    """

    threshold: int = 24
    min_side: int = 32
    coverage: float = 0.85
    max_lines: int = 40
    max_boxes: int = 4
    iou_threshold: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.coverage <= 1.0:
            raise ConfigError(f"edge coverage must lie in (0, 1], got {self.coverage}")
        if self.min_side < 2 or self.max_lines < 2 or self.max_boxes < 1:
            raise ConfigError("edge detector needs min_side >= 2, max_lines >= 2 and max_boxes >= 1")

    def _candidates(self, counts):
        idx = np.flatnonzero(counts >= self.min_side)
        if len(idx) > self.max_lines:
            idx = idx[np.argsort(-counts[idx], kind="stable")[:self.max_lines]]
        return np.sort(idx)

    def _pairs(self, lines):
        i, j = np.triu_indices(len(lines), k=1)
        lo, hi = lines[i], lines[j]
        keep = hi - lo >= self.min_side
        return lo[keep], hi[keep]

    def detect_overlay(self, img):
        data = img.data.astype(np.int16)
        h, w = data.shape[:2]
        # column boundary x sits between pixels x - 1 and x; image borders never count
        vertical = np.zeros((h, w + 1), dtype=np.int32)
        vertical[:, 1:w] = np.abs(np.diff(data, axis=1)).max(axis=2) > self.threshold
        horizontal = np.zeros((h + 1, w), dtype=np.int32)
        horizontal[1:h, :] = np.abs(np.diff(data, axis=0)).max(axis=2) > self.threshold

        x0, x1 = self._pairs(self._candidates(vertical.sum(axis=0)))
        y0, y1 = self._pairs(self._candidates(horizontal.sum(axis=1)))
        if len(x0) == 0 or len(y0) == 0:
            return []
        down = np.vstack([np.zeros((1, w + 1), dtype=np.int32), np.cumsum(vertical, axis=0)])
        across = np.hstack([np.zeros((h + 1, 1), dtype=np.int32), np.cumsum(horizontal, axis=1)])

        heights = (y1 - y0)[None, :]
        widths = (x1 - x0)[:, None]
        left = (down[y1[None, :], x0[:, None]] - down[y0[None, :], x0[:, None]]) / heights
        right = (down[y1[None, :], x1[:, None]] - down[y0[None, :], x1[:, None]]) / heights
        top = (across[y0[None, :], x1[:, None]] - across[y0[None, :], x0[:, None]]) / widths
        bottom = (across[y1[None, :], x1[:, None]] - across[y1[None, :], x0[:, None]]) / widths
        score = np.minimum(np.minimum(left, right), np.minimum(top, bottom))

        a, b = np.nonzero(score >= self.coverage)
        bw, bh = x1[a] - x0[a], y1[b] - y0[b]
        order = np.lexsort((bw, bh, x0[a], y0[b], -(bw * bh)))
        kept = []
        for k in order:
            box = BoundingBox(int(x0[a[k]]), int(y0[b[k]]), int(bw[k]), int(bh[k]))
            if all(box.iou(other) <= self.iou_threshold for other in kept):
                kept.append(box)
            if len(kept) == self.max_boxes:
                break
        return kept


def build_detector(cfg, detections=None):
    """The overlay detector `cfg` asks for; a detections CSV takes precedence."""
    path = detections or cfg.detections
    if path:
        return CsvDetector(path)
    if cfg.overlay_detector == "edges":
        return EdgeRectDetector(min_side=cfg.min_side)
    return NullDetector()


class CsvDetector:
    """Serves precomputed overlay boxes from a CSV `image_id,x,y,w,h`."""

    def __init__(self, path):
        df = pd.read_csv(Path(path), dtype={"image_id": str}, keep_default_na=False)
        self.boxes = {}
        for image_id, x, y, w, h in df[["image_id", "x", "y", "w", "h"]].itertuples(index=False):
            self.boxes.setdefault(image_id, []).append(BoundingBox(int(x), int(y), int(w), int(h)))

    def for_image(self, image_id):
        return _BoundDetector(self.boxes.get(image_id, []))

    def detect_overlay(self, img):
        raise ConfigError("CsvDetector serves boxes per image id; bind it with for_image first")


@dataclass
class _BoundDetector:
    boxes: list

    def detect_overlay(self, img):
        return list(self.boxes)


def safe_detect(detector, img):
    """Run a detector hook; failures degrade to no boxes, outputs are clipped and deduplicated."""
    if detector is None:
        return []
    try:
        raw = detector.detect_overlay(img)
    except Exception as exc:
        logger.warning("overlay detector failed, continuing without boxes: %s", exc)
        return []
    out = []
    for box in raw:
        clipped = box.clip(img.width, img.height)
        if clipped is not None and clipped not in out:
            out.append(clipped)
    return out


def _crop(img, box):
    return ImageBuffer(img.data[box.y:box.y + box.h, box.x:box.x + box.w])


def _whole(img):
    return BoundingBox(0, 0, img.width, img.height)


def _rotate(img, degrees):
    # counter-clockwise, lossless
    return ImageBuffer(np.rot90(img.data, k=degrees // 90))


def _expand(image_id, img, plan, cfg, detector):
    patches = []
    for rule in plan.steps:
        if rule.kind == "identity":
            patches.append(Patch(image_id, "orig", _whole(img), 0, img))
        elif rule.kind == "rotate":
            patches.append(Patch(image_id, f"rot{rule.arg}", _whole(img), rule.arg, _rotate(img, rule.arg)))
        elif rule.kind == "center":
            box = center_crop(img.width, img.height, rule.arg, cfg.exact_ratio, cfg.third_ratio)
            patches.append(Patch(image_id, f"c-{rule.arg}", box, 0, _crop(img, box)))
        elif rule.kind == "grid":
            cells = grid_split(img.width, img.height, rule.arg)
            for i, box in enumerate(cells):
                patches.append(Patch(image_id, f"g{rule.arg ** 2}-{i}", box, 0, _crop(img, box)))
        elif rule.kind == "proposals":
            for i, box in enumerate(proposal_regions(img, rule.arg, cfg.proposal_min_side)):
                patches.append(Patch(image_id, f"prop-{i}", box, 0, _crop(img, box)))
        elif rule.kind == "detector":
            for i, box in enumerate(safe_detect(detector, img)):
                patches.append(Patch(image_id, f"det-{i}", box, 0, _crop(img, box)))
    seen = set()
    for p in patches:
        if p.patch_id in seen:
            raise ConfigError(f"patch plan {plan.name!r} emits {p.patch_id!r} twice")
        seen.add(p.patch_id)
    return patches


def query_patches(img, plan=None, detector=None, cfg=None, image_id="query"):
    """Query patches; local crops smaller than the minimum side are dropped."""
    cfg = cfg or PatchConfig()
    plan = plan or default_query_plan()
    check_image_id(image_id)
    if hasattr(detector, "for_image"):
        detector = detector.for_image(image_id)
    patches = _expand(image_id, img, plan, cfg, detector)
    kept = [p for p in patches if p.whole_frame or min(p.box.w, p.box.h) >= cfg.min_side]
    if len(kept) < len(patches):
        logger.debug("%s: dropped %d query patches below %d px", image_id, len(patches) - len(kept), cfg.min_side)
    return kept


def reference_patches(img, plan=None, cfg=None, image_id="reference"):
    cfg = cfg or PatchConfig()
    plan = plan or default_reference_plan()
    check_image_id(image_id)
    if img.width < 3 or img.height < 3:
        raise DomainError(f"reference {image_id} is {img.width}x{img.height}; both sides must be >= 3 px")
    return _expand(image_id, img, plan, cfg, None)


def patches_frame(patches):
    """Rows `image_id,patch_id,x,y,w,h,rot` for inspection dumps."""
    return pd.DataFrame(
        [(p.source, p.patch_id, p.box.x, p.box.y, p.box.w, p.box.h, p.rotation) for p in patches],
        columns=PATCH_CSV_COLUMNS,
    )
