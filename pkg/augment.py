import hashlib
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import partial
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image, ImageEnhance, ImageFilter, UnidentifiedImageError

from config import AugmentConfig
from core import ConfigError, ImageBuffer, load_image, parallel_map, save_image

logger = logging.getLogger(__name__)

MAX_CROP_RETRIES = 8
MANIFEST_COLUMNS = ["identity", "variant_index", "path", "status"]


class TransformKind(Enum):
    RESIZED_CROP = "resized-crop"
    ROTATION = "rotation"
    PIXELIZATION = "pixelization"
    PIXEL_SHUFFLE = "pixel-shuffle"
    PERSPECTIVE = "perspective"
    PADDING = "padding"
    IMAGE_UNDERLAY = "image-underlay"
    COLOR_JITTER = "color-jitter"
    BLUR = "blur"
    GRAYSCALE = "grayscale"
    HORIZONTAL_FLIP = "horizontal-flip"
    EMOJI_OVERLAY = "emoji-overlay"
    TEXT_OVERLAY = "text-overlay"
    IMAGE_OVERLAY = "image-overlay"
    RESIZE = "resize"


class AdvancedKind(Enum):
    SUPER_BLUR = "super-blur"
    SUPER_COLOR = "super-color"
    SUPER_DARK = "super-dark"
    SUPER_FACE = "super-face"
    SUPER_OPAQUE = "super-opaque"
    SUPER_OCCLUDE = "super-occlude"


@dataclass(frozen=True)
class AugmentationSet:
    name: str
    probabilities: dict
    advanced: AdvancedKind | None = None
    black_white: bool = False
    params: AugmentConfig = field(default_factory=AugmentConfig, repr=False)

    @property
    def basic(self):
        return tuple(k for k in TransformKind if k in self.probabilities)


@dataclass(frozen=True)
class SeedPolicy:
    global_seed: int = 0

    def stream_seed(self, image_id, variant):
        digest = hashlib.blake2b(
            f"{self.global_seed}:{image_id}:{variant}".encode("utf-8"), digest_size=8
        ).digest()
        return int.from_bytes(digest, "little")

    def rng(self, image_id, variant):
        return np.random.default_rng(self.stream_seed(image_id, variant))


@dataclass
class AssetPool:
    faces: list = field(default_factory=list)
    underlays: list = field(default_factory=list)
    overlays: list = field(default_factory=list)

    @staticmethod
    def _load_dir(path):
        if path is None:
            return []
        path = Path(path)
        if not path.is_dir():
            raise ConfigError(f"asset directory not found: {path}")
        images = []
        for p in sorted(path.iterdir()):
            try:
                images.append(load_image(p))
            except (OSError, UnidentifiedImageError):
                logger.warning("skipping unreadable asset %s", p)
        return images

    @classmethod
    def from_config(cls, cfg):
        return cls(cls._load_dir(cfg.face_dir), cls._load_dir(cfg.underlay_dir), cls._load_dir(cfg.overlay_dir))


# 5x7 glyph atlas for text overlays; '#' is ink.
_GLYPHS = {
    "A": [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
    "C": [".####", "#....", "#....", "#....", "#....", "#....", ".####"],
    "E": ["#####", "#....", "#....", "####.", "#....", "#....", "#####"],
    "H": ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
    "I": ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "#####"],
    "L": ["#....", "#....", "#....", "#....", "#....", "#....", "#####"],
    "M": ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"],
    "N": ["#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"],
    "O": [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
    "S": [".####", "#....", "#....", ".###.", "....#", "....#", "####."],
    "T": ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."],
    "X": ["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"],
    "0": [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    "1": ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    "2": [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    "7": ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
}

# 8x8 emoji sprites; '#' outline, 'o' fill, '.' transparent.
_EMOJI = [
    ["..####..", ".#oooo#.", "#o#oo#o#", "#oooooo#", "#o#oo#o#", "#oo##oo#", ".#oooo#.", "..####.."],
    [".##..##.", "#oo##oo#", "#oooooo#", "#oooooo#", ".#oooo#.", "..#oo#..", "...##...", "........"],
    ["...##...", "...#o#..", "#####o##", "#oooooo#", ".#oooo#.", ".#o##o#.", "#o#..#o#", "##....##"],
]


def _sprite_masks(rows):
    ink = np.array([[c == "#" for c in row] for row in rows])
    fill = np.array([[c == "o" for c in row] for row in rows])
    return ink, fill


def _uniform(rng, bounds):
    lo, hi = bounds
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def _randint(rng, bounds):
    lo, hi = bounds
    return int(rng.integers(lo, hi + 1))


def _color(rng):
    return rng.integers(0, 256, size=3).astype(np.uint8)


def _to_pil(arr):
    return Image.fromarray(arr)


def _resize(arr, width, height, resample=Image.Resampling.BILINEAR):
    width, height = max(1, int(width)), max(1, int(height))
    return np.asarray(_to_pil(arr).resize((width, height), resample))


def _paste(base, sprite, x, y, mask=None):
    """Paste `sprite` at (x, y), clipped to the frame."""
    out = base.copy()
    h, w = sprite.shape[:2]
    x0, y0 = max(x, 0), max(y, 0)
    x1, y1 = min(x + w, base.shape[1]), min(y + h, base.shape[0])
    if x1 <= x0 or y1 <= y0:
        return out
    src = sprite[y0 - y:y1 - y, x0 - x:x1 - x]
    if mask is None:
        out[y0:y1, x0:x1] = src
    else:
        m = mask[y0 - y:y1 - y, x0 - x:x1 - x]
        out[y0:y1, x0:x1][m] = src[m]
    return out


def _random_canvas(rng, width, height):
    """Stand-in underlay/overlay content when no asset pool is configured."""
    cells = rng.integers(0, 256, size=(4, 4, 3)).astype(np.uint8)
    return _resize(cells, width, height)


def _pool_image(rng, pool, width, height):
    if pool:
        pick = pool[int(rng.integers(len(pool)))]
        return _resize(np.asarray(pick.data), width, height)
    return _random_canvas(rng, width, height)


def resized_crop(arr, rng, cfg):
    h, w = arr.shape[:2]
    area = h * w
    for _ in range(MAX_CROP_RETRIES):
        target = area * _uniform(rng, cfg.crop_scale)
        log_ratio = rng.uniform(math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1]))
        aspect = math.exp(log_ratio)
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 1 <= cw <= w and 1 <= ch <= h:
            x = int(rng.integers(0, w - cw + 1))
            y = int(rng.integers(0, h - ch + 1))
            return arr[y:y + ch, x:x + cw].copy()
    logger.debug("resized crop fell back to identity after %d draws", MAX_CROP_RETRIES)
    return arr.copy()


def rotation(arr, rng, cfg):
    if rng.random() < cfg.discrete_rotation_share:
        return np.ascontiguousarray(np.rot90(arr, k=int(rng.integers(1, 4))))
    angle = _uniform(rng, cfg.rotation_degrees)
    return np.asarray(_to_pil(arr).rotate(angle, resample=Image.Resampling.BILINEAR, fillcolor=(0, 0, 0)))


def pixelization(arr, rng, cfg):
    h, w = arr.shape[:2]
    ratio = _uniform(rng, cfg.pixelization_ratio)
    small = _resize(arr, w * ratio, h * ratio, Image.Resampling.NEAREST)
    return _resize(small, w, h, Image.Resampling.NEAREST)


def pixel_shuffle(arr, rng, cfg):
    """Shuffle tiles of a G x G grid; a remainder strip keeps its place."""
    g = cfg.shuffle_grid
    h, w = arr.shape[:2]
    th, tw = h // g, w // g
    if th == 0 or tw == 0:
        return arr.copy()
    tiles = [arr[r * th:(r + 1) * th, c * tw:(c + 1) * tw] for r in range(g) for c in range(g)]
    order = rng.permutation(len(tiles))
    out = arr.copy()
    for slot, src in enumerate(order):
        r, c = divmod(slot, g)
        out[r * th:(r + 1) * th, c * tw:(c + 1) * tw] = tiles[src]
    return out


def _perspective_coeffs(src, dst):
    rows = []
    for (x, y), (u, v) in zip(dst, src):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
    a = np.asarray(rows, dtype=np.float64)
    b = np.asarray(src, dtype=np.float64).reshape(8)
    return np.linalg.solve(a, b)


def perspective(arr, rng, cfg):
    h, w = arr.shape[:2]
    d = _uniform(rng, cfg.perspective_distortion)
    dx, dy = d * w / 2.0, d * h / 2.0
    src = [(0, 0), (w - 1, 0), (w - 1, h - 1), (0, h - 1)]
    jitter = rng.uniform(0, 1, size=(4, 2))
    dst = [
        (jitter[0, 0] * dx, jitter[0, 1] * dy),
        (w - 1 - jitter[1, 0] * dx, jitter[1, 1] * dy),
        (w - 1 - jitter[2, 0] * dx, h - 1 - jitter[2, 1] * dy),
        (jitter[3, 0] * dx, h - 1 - jitter[3, 1] * dy),
    ]
    try:
        coeffs = _perspective_coeffs(src, dst)
    except np.linalg.LinAlgError:
        return arr.copy()
    return np.asarray(_to_pil(arr).transform((w, h), Image.Transform.PERSPECTIVE, tuple(coeffs), Image.Resampling.BILINEAR))


def padding(arr, rng, cfg):
    h, w = arr.shape[:2]
    pads = [int(round(_uniform(rng, cfg.padding_fraction) * s)) for s in (h, h, w, w)]
    top, bottom, left, right = pads
    out = np.empty((h + top + bottom, w + left + right, 3), dtype=np.uint8)
    out[...] = _color(rng)
    out[top:top + h, left:left + w] = arr
    return out


def image_underlay(arr, rng, cfg, assets):
    h, w = arr.shape[:2]
    base = _pool_image(rng, assets.underlays, w, h)
    s = _uniform(rng, cfg.underlay_scale)
    fg = _resize(arr, w * s, h * s)
    x = int(rng.integers(0, w - fg.shape[1] + 1))
    y = int(rng.integers(0, h - fg.shape[0] + 1))
    return _paste(base, fg, x, y)


def color_jitter(arr, rng, cfg, factor=1.0):
    im = _to_pil(arr)
    for enhancer, strength in (
        (ImageEnhance.Brightness, cfg.jitter_brightness),
        (ImageEnhance.Contrast, cfg.jitter_contrast),
        (ImageEnhance.Color, cfg.jitter_saturation),
    ):
        s = strength * factor
        im = enhancer(im).enhance(max(0.0, float(rng.uniform(1.0 - s, 1.0 + s))))
    return np.asarray(im)


def gaussian_blur(arr, sigma):
    return np.asarray(_to_pil(arr).filter(ImageFilter.GaussianBlur(radius=sigma)))


def blur(arr, rng, cfg):
    return gaussian_blur(arr, _uniform(rng, cfg.blur_sigma))


def grayscale(arr, rng=None, cfg=None):
    return np.asarray(_to_pil(arr).convert("L").convert("RGB"))


def horizontal_flip(arr, rng=None, cfg=None):
    return np.ascontiguousarray(arr[:, ::-1])


def _render_sprite(arr, rng, ink, fill, scale, ink_color, fill_color):
    block = np.ones((scale, scale), dtype=bool)
    ink = np.kron(ink, block).astype(bool)
    fill = np.kron(fill, block).astype(bool)
    sprite = np.zeros(ink.shape + (3,), dtype=np.uint8)
    sprite[ink] = ink_color
    sprite[fill] = fill_color
    h, w = arr.shape[:2]
    x = int(rng.integers(0, max(1, w - sprite.shape[1] + 1)))
    y = int(rng.integers(0, max(1, h - sprite.shape[0] + 1)))
    return _paste(arr, sprite, x, y, mask=ink | fill)


def emoji_overlay(arr, rng, cfg):
    ink, fill = _sprite_masks(_EMOJI[int(rng.integers(len(_EMOJI)))])
    side = _uniform(rng, cfg.emoji_scale) * min(arr.shape[:2])
    scale = max(1, int(side // ink.shape[0]))
    return _render_sprite(arr, rng, ink, fill, scale, np.zeros(3, np.uint8), _color(rng))


def text_overlay(arr, rng, cfg):
    letters = sorted(_GLYPHS)
    n = _randint(rng, cfg.text_length)
    text = [letters[i] for i in rng.integers(0, len(letters), size=n)]
    rows = ["".join(_GLYPHS[ch][r] + "." for ch in text) for r in range(7)]
    ink, fill = _sprite_masks(rows)
    scale = max(1, int(_uniform(rng, cfg.text_scale) * min(arr.shape[:2]) // 2))
    return _render_sprite(arr, rng, ink, fill, scale, _color(rng), np.zeros(3, np.uint8))


def image_overlay(arr, rng, cfg, assets):
    h, w = arr.shape[:2]
    s = _uniform(rng, cfg.overlay_scale)
    ow, oh = max(1, int(w * s)), max(1, int(h * s))
    top = _pool_image(rng, assets.overlays, ow, oh)
    x = int(rng.integers(0, w - ow + 1))
    y = int(rng.integers(0, h - oh + 1))
    return _paste(arr, top, x, y)


def resize(arr, side):
    return _resize(arr, side, side)


_BASIC = {
    TransformKind.RESIZED_CROP: resized_crop,
    TransformKind.ROTATION: rotation,
    TransformKind.PIXELIZATION: pixelization,
    TransformKind.PIXEL_SHUFFLE: pixel_shuffle,
    TransformKind.PERSPECTIVE: perspective,
    TransformKind.PADDING: padding,
    TransformKind.IMAGE_UNDERLAY: image_underlay,
    TransformKind.COLOR_JITTER: color_jitter,
    TransformKind.BLUR: blur,
    TransformKind.GRAYSCALE: grayscale,
    TransformKind.HORIZONTAL_FLIP: horizontal_flip,
    TransformKind.EMOJI_OVERLAY: emoji_overlay,
    TransformKind.TEXT_OVERLAY: text_overlay,
    TransformKind.IMAGE_OVERLAY: image_overlay,
}
_NEEDS_ASSETS = {TransformKind.IMAGE_UNDERLAY, TransformKind.IMAGE_OVERLAY}


def apply_basic(img, aug_set, rng, assets=None):
    """Fire each included transform with its probability, then resize to the training side."""
    if not aug_set.basic:
        raise ConfigError(f"augmentation set {aug_set.name!r} has no basic transforms")
    assets = assets or AssetPool()
    cfg = aug_set.params
    arr = np.asarray(img.data)
    for kind in aug_set.basic:
        if kind is TransformKind.RESIZE:
            continue
        if rng.random() >= aug_set.probabilities[kind]:
            continue
        fn = _BASIC[kind]
        arr = fn(arr, rng, cfg, assets) if kind in _NEEDS_ASSETS else fn(arr, rng, cfg)
    return ImageBuffer(resize(arr, cfg.train_side))


def super_dark(arr, factor):
    return np.clip(np.rint(arr.astype(np.float64) * factor), 0, 255).astype(np.uint8)


def alpha_blend(top, base, alpha):
    """round(alpha * top + (1 - alpha) * base) per sample."""
    mixed = alpha * top.astype(np.float64) + (1.0 - alpha) * base.astype(np.float64)
    return np.clip(np.rint(mixed), 0, 255).astype(np.uint8)


def occlude(arr, boxes, colors):
    out = arr.copy()
    for (x, y, w, h), color in zip(boxes, colors):
        out[y:y + h, x:x + w] = color
    return out


def apply_advanced(img, kind, assets, rng, cfg=None):
    cfg = cfg or AugmentConfig()
    assets = assets or AssetPool()
    arr = np.asarray(img.data)
    h, w = arr.shape[:2]
    if kind is AdvancedKind.SUPER_BLUR:
        out = gaussian_blur(arr, _uniform(rng, cfg.super_blur_sigma))
    elif kind is AdvancedKind.SUPER_COLOR:
        out = color_jitter(arr, rng, cfg, factor=cfg.super_color_factor)
    elif kind is AdvancedKind.SUPER_DARK:
        out = super_dark(arr, _uniform(rng, cfg.super_dark_factor))
    elif kind is AdvancedKind.SUPER_FACE:
        if not assets.faces:
            raise ConfigError("super-face needs a non-empty face pool ([augment] face_dir)")
        s = _uniform(rng, cfg.super_face_scale)
        face = _pool_image(rng, assets.faces, w * s, h * s)
        x = int(rng.integers(0, w - face.shape[1] + 1))
        y = int(rng.integers(0, h - face.shape[0] + 1))
        out = _paste(arr, face, x, y)
    elif kind is AdvancedKind.SUPER_OPAQUE:
        if not assets.underlays:
            raise ConfigError("super-opaque needs a non-empty underlay pool ([augment] underlay_dir)")
        alpha = _uniform(rng, cfg.super_opaque_alpha)
        out = alpha_blend(_pool_image(rng, assets.underlays, w, h), arr, alpha)
    elif kind is AdvancedKind.SUPER_OCCLUDE:
        boxes, colors = [], []
        for _ in range(_randint(rng, cfg.super_occlude_count)):
            side = math.sqrt(_uniform(rng, cfg.super_occlude_area))
            bw, bh = max(1, int(round(w * side))), max(1, int(round(h * side)))
            boxes.append((int(rng.integers(0, w - bw + 1)), int(rng.integers(0, h - bh + 1)), bw, bh))
            colors.append(_color(rng))
        out = occlude(arr, boxes, colors)
    else:
        raise ConfigError(f"unknown advanced augmentation {kind!r}")
    return ImageBuffer(out)


def black_white(img):
    return ImageBuffer(grayscale(np.asarray(img.data)))


def augment_variant(img, aug_set, rng, assets=None):
    out = apply_basic(img, aug_set, rng, assets)
    if aug_set.advanced is not None:
        out = apply_advanced(out, aug_set.advanced, assets, rng, aug_set.params)
    if aug_set.black_white:
        out = black_white(out)
    return out


def default_probabilities(cfg):
    probs = {}
    for kind in TransformKind:
        probs[kind] = 1.0 if kind is TransformKind.RESIZE else cfg.probabilities.get(kind.value, cfg.probability)
    unknown = set(cfg.probabilities) - {k.value for k in TransformKind}
    if unknown:
        raise ConfigError(f"unknown transform names in [augment] probabilities: {sorted(unknown)}")
    return probs


def enumerate_sets(cfg=None):
    """The 11 training sets: basic, basic + each advanced, and four black-white variants."""
    cfg = cfg or AugmentConfig()
    probs = default_probabilities(cfg)
    sets = [AugmentationSet("basic", probs, None, False, cfg)]
    for kind in AdvancedKind:
        sets.append(AugmentationSet(f"basic+{kind.value}", probs, kind, False, cfg))
    for base in list(sets):
        if base.name in cfg.black_white_sets:
            sets.append(AugmentationSet(f"{base.name}+bw", probs, base.advanced, True, cfg))
    return sets


def find_set(name, cfg=None):
    for s in enumerate_sets(cfg):
        if s.name == name:
            return s
    raise ConfigError(f"unknown augmentation set {name!r}")


def _identity_label(index):
    return f"ID{index:07d}"


def _augment_source(task, aug_set, policy, out_dir, assets):
    index, source = task
    identity = _identity_label(index)
    try:
        img = load_image(source)
    except (OSError, UnidentifiedImageError) as exc:
        logger.warning("skipping unreadable source %s: %s", source, exc)
        return [(identity, -1, str(source), "unreadable")]
    rows = []
    for variant in range(aug_set.params.variants + 1):
        if variant == 0:
            out = ImageBuffer(resize(np.asarray(img.data), aug_set.params.train_side))
            if aug_set.black_white:
                out = black_white(out)
        else:
            out = augment_variant(img, aug_set, policy.rng(identity, variant), assets)
        rel = Path(identity) / f"{identity}_{variant:02d}.ppm"
        save_image(out, Path(out_dir) / rel)
        rows.append((identity, variant, rel.as_posix(), "ok"))
    return rows


def generate_corpus(sources, aug_set, policy, out_dir, assets=None, jobs=1):
    """Augment every `select_every`-th source into one identity of 1 + `variants` images."""
    sources = list(sources)
    if not sources:
        raise ConfigError("corpus generation needs at least one source image")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    step = aug_set.params.select_every
    tasks = [(i, sources[i]) for i in range(0, len(sources), step)]
    worker = partial(_augment_source, aug_set=aug_set, policy=policy, out_dir=out_dir, assets=assets)
    rows = [row for chunk in parallel_map(worker, tasks, jobs) for row in chunk]
    manifest = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    manifest.to_csv(out_dir / "manifest.csv", index=False, lineterminator="\n")
    ok = int((manifest["status"] == "ok").sum())
    logger.info("corpus %s: %d identities, %d images written to %s", aug_set.name, len(tasks), ok, out_dir)
    return manifest
