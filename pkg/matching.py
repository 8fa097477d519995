import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import partial
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pandas as pd
from scipy import sparse

from core import ConfigError, FeatureStore, PairScore, parallel_map
from evaluation import RankedPairList
from patches import WHOLE_FRAME_IDS

logger = logging.getLogger(__name__)

ORIG = "orig"
TABLE_COLUMNS = ["query", "q_patch", "reference", "r_patch", "model", "scale", "score"]
PAIR_KEY = ["query", "q_patch", "reference", "r_patch"]
ENSEMBLE_MODEL = "ensemble"


class MatchMode(Enum):
    GLOBAL_GLOBAL = "global-global"
    GLOBAL_LOCAL = "global-local"
    LOCAL_GLOBAL = "local-global"
    BOTH = "both"

    @property
    def uses_global_local(self):
        return self in (MatchMode.GLOBAL_LOCAL, MatchMode.BOTH)

    @property
    def uses_local_global(self):
        return self in (MatchMode.LOCAL_GLOBAL, MatchMode.BOTH)


@dataclass(frozen=True)
class EnsembleSpec:
    criterion: str
    models: tuple
    thresholds: tuple = ()
    strategy: str = "all"

    def __post_init__(self):
        if self.criterion not in ("confidence", "completeness"):
            raise ConfigError(f"unknown ensemble criterion {self.criterion!r}")
        if not self.models:
            raise ConfigError("an ensemble spec needs at least one model")
        if self.criterion == "confidence" and len(self.thresholds) != len(self.models):
            raise ConfigError("confidence criterion needs one threshold per model")
        if self.criterion == "completeness" and self.thresholds:
            raise ConfigError("completeness criterion takes no thresholds")
        if self.strategy not in ("all", "global-local", "local-global"):
            raise ConfigError(f"unknown ensemble strategy {self.strategy!r}")

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.criterion, tuple(cfg.models), tuple(cfg.thresholds), cfg.strategy)

    def applies_to(self, strategy):
        return self.strategy in ("all", strategy)


@dataclass(frozen=True)
class TrickConfig:
    partial_penalty: float = 0.95
    min_patch_side: int = 32
    face_skip: Optional[Callable[[str], bool]] = field(default=None, compare=False)
    top2_average: bool = False

    def __post_init__(self):
        if not 0.0 < self.partial_penalty <= 1.0:
            raise ConfigError(f"partial penalty must lie in (0, 1], got {self.partial_penalty}")

    @classmethod
    def from_settings(cls, settings, min_patch_side=32):
        """Build from the [tricks] section; `face_list` names references to exempt from local-global."""
        face_skip = None
        if settings.face_list is not None:
            path = Path(settings.face_list)
            if not path.is_file():
                raise ConfigError(f"face list not found: {path}")
            flagged = frozenset(line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip())
            face_skip = flagged.__contains__
        return cls(settings.partial_penalty, min_patch_side, face_skip, settings.top2_average)


class ScoreTable:
    """Scores keyed by (query, q_patch, reference, r_patch, model, scale)."""

    def __init__(self, frame=None):
        if frame is None:
            frame = pd.DataFrame(columns=TABLE_COLUMNS)
        missing = set(TABLE_COLUMNS) - set(frame.columns)
        if missing:
            raise ConfigError(f"score table is missing columns {sorted(missing)}")
        frame = frame[TABLE_COLUMNS].reset_index(drop=True)
        if len(frame) and not np.all(np.isfinite(frame["score"].to_numpy(dtype=np.float64))):
            raise ConfigError("score table contains non-finite scores")
        self.frame = frame

    def __len__(self):
        return len(self.frame)


def confidence_ensemble(scores):
    """Max of the scores if every score strictly exceeds its threshold, else None.

    A missing score (None) fails its gate.
    """
    if not scores:
        raise ConfigError("confidence ensemble needs at least one model")
    if all(s is not None and s > a for s, a in scores):
        return max(s for s, _ in scores)
    return None


def completeness_ensemble(scores):
    present = [s for s in scores if s is not None]
    if not present:
        raise ConfigError("completeness ensemble needs at least one score")
    return max(present)


def patch_ensemble(gl, lg, top2_average=False):
    """Repeat the completeness criterion over query-patch and reference-patch scores."""
    pool = [s for s in list(gl) + list(lg) if s is not None]
    if not pool:
        return None
    if not top2_average:
        return max(pool)
    top = sorted(pool, reverse=True)[:2]
    return top[0] if len(top) == 1 else (top[0] + top[1]) / 2


def resolve_scale(scale, available):
    """Same scale if present, else the closest one (ties go to the smaller)."""
    available = sorted(available)
    if scale in available:
        return scale
    return min(available, key=lambda s: (abs(s - scale), s))


@dataclass
class _Side:
    images: np.ndarray
    patches: np.ndarray
    image_index: np.ndarray
    matrix: np.ndarray

    @classmethod
    def from_store(cls, store, image_names):
        lookup = {name: i for i, name in enumerate(image_names)}
        recs = sorted(store.records, key=lambda r: (r.image, r.patch))
        return cls(
            images=np.array([r.image for r in recs], dtype=object),
            patches=np.array([r.patch for r in recs], dtype=object),
            image_index=np.array([lookup[r.image] for r in recs], dtype=np.int64),
            matrix=np.stack([r.vector for r in recs]).astype(np.float64) if recs else np.zeros((0, store.dim)),
        )

    def subset(self, mask):
        return _Side(self.images[mask], self.patches[mask], self.image_index[mask], self.matrix[mask])

    @property
    def orig(self):
        return self.subset(self.patches == ORIG)


@dataclass
class _Pass:
    model: str
    scale: int
    gl: bool
    lg: bool
    queries: _Side
    references: _Side


def _as_stores(stores):
    if isinstance(stores, FeatureStore):
        return [stores]
    return list(stores)


def _store_for(stores, model):
    hits = [s for s in stores if model in s.models()]
    if len(hits) > 1:
        raise ConfigError(f"model {model!r} appears in more than one store on the same side")
    return hits[0] if hits else None


def _plan_passes(queries, references, mode, lg_models, lg_scales):
    q_stores, r_stores = _as_stores(queries), _as_stores(references)
    q_names = sorted({i for s in q_stores for i in s.images()})
    r_names = sorted({i for s in r_stores for i in s.images()})
    passes = []
    models = sorted({m for s in q_stores for m in s.models()})
    for model in models:
        qs, rs = _store_for(q_stores, model), _store_for(r_stores, model)
        if rs is None:
            logger.warning("model %s has no reference features; skipped", model)
            continue
        if qs.dim != rs.dim:
            raise ConfigError(f"model {model}: query dim {qs.dim} != reference dim {rs.dim}")
        for scale in qs.scales(model):
            r_scale = resolve_scale(scale, rs.scales(model))
            lg_allowed = (lg_models is None or model in lg_models) and (lg_scales is None or scale in lg_scales)
            passes.append(_Pass(
                model=model,
                scale=scale,
                gl=mode.uses_global_local,
                lg=mode.uses_local_global and lg_allowed,
                queries=_Side.from_store(qs.select(model=model, scale=scale), q_names),
                references=_Side.from_store(rs.select(model=model, scale=r_scale), r_names),
            ))
    return passes, np.array(q_names, dtype=object), np.array(r_names, dtype=object)


def _row_blocks(n, block_size):
    return [(start, min(start + block_size, n)) for start in range(0, n, block_size)]


def _top_images(scores, col_images, n_images, top_t):
    """Per row, the top-T reference images by best patch score; ties go to the lower image index."""
    per_image = np.full((scores.shape[0], n_images), -np.inf)
    order = np.argsort(col_images, kind="stable")
    cols = col_images[order]
    starts = np.flatnonzero(np.r_[True, cols[1:] != cols[:-1]])
    per_image[:, cols[starts]] = np.maximum.reduceat(scores[:, order], starts, axis=1)
    k = min(top_t, len(starts))
    return np.argsort(-per_image, axis=1, kind="stable")[:, :k]


def _candidates_for_block(bounds, side_q, side_r, n_images, top_t):
    start, stop = bounds
    scores = side_q.matrix[start:stop] @ side_r.matrix.T
    top = _top_images(scores, side_r.image_index, n_images, top_t)
    rows = np.repeat(side_q.image_index[start:stop], top.shape[1])
    return rows, top.ravel()


def _candidate_matrix(passes, n_q, n_r, top_t, block_size, jobs):
    if top_t is None:
        return None
    rows, cols = [], []
    for p in passes:
        for q_side, r_side in _pass_combos(p):
            if len(q_side.matrix) == 0 or len(r_side.matrix) == 0:
                continue
            worker = partial(_candidates_for_block, side_q=q_side, side_r=r_side, n_images=n_r, top_t=top_t)
            for r, c in parallel_map(worker, _row_blocks(len(q_side.matrix), block_size), jobs, kind="thread"):
                rows.append(r)
                cols.append(c)
    if not rows:
        return sparse.csr_matrix((n_q, n_r), dtype=bool)
    r, c = np.concatenate(rows), np.concatenate(cols)
    return sparse.csr_matrix((np.ones(len(r), dtype=bool), (r, c)), shape=(n_q, n_r))


def _pass_combos(p):
    """(query side, reference side) products for one pass; orig x orig appears exactly once."""
    refs = p.references
    combos = [(p.queries, refs.orig) if p.gl else (p.queries.orig, refs.orig)]
    if p.lg:
        combos.append((p.queries.orig, refs.subset(refs.patches != ORIG)))
    return combos


def _emit_block(bounds, side_q, side_r, candidates):
    start, stop = bounds
    scores = side_q.matrix[start:stop] @ side_r.matrix.T
    if candidates is None:
        mask = np.ones(scores.shape, dtype=bool)
    else:
        allowed = candidates[side_q.image_index[start:stop]].toarray()
        mask = allowed[:, side_r.image_index]
    qi, ri = np.nonzero(mask)
    return qi + start, ri, scores[qi, ri]


def pairwise_scores(queries, references, mode=MatchMode.BOTH, top_t=None, block_size=1024,
                    lg_models=None, lg_scales=None, jobs=1):
    """Blocked inner products over the patch combinations the matching mode asks for."""
    mode = MatchMode(mode)
    if top_t is not None and top_t < 1:
        raise ConfigError(f"top_t must be >= 1 (or None for every reference), got {top_t}")
    if isinstance(queries, FeatureStore) and isinstance(references, FeatureStore) and queries.dim != references.dim:
        raise ConfigError(f"query dim {queries.dim} != reference dim {references.dim}")
    passes, q_names, r_names = _plan_passes(queries, references, mode, lg_models, lg_scales)
    if not passes:
        return ScoreTable()
    candidates = _candidate_matrix(passes, len(q_names), len(r_names), top_t, block_size, jobs)
    parts = []
    for p in passes:
        for q_side, r_side in _pass_combos(p):
            if len(q_side.matrix) == 0 or len(r_side.matrix) == 0:
                continue
            worker = partial(_emit_block, side_q=q_side, side_r=r_side, candidates=candidates)
            for qi, ri, s in parallel_map(worker, _row_blocks(len(q_side.matrix), block_size), jobs, kind="thread"):
                parts.append(pd.DataFrame({
                    "query": q_side.images[qi],
                    "q_patch": q_side.patches[qi],
                    "reference": r_side.images[ri],
                    "r_patch": r_side.patches[ri],
                    "model": p.model,
                    "scale": p.scale,
                    "score": s,
                }))
    if not parts:
        return ScoreTable()
    frame = pd.concat(parts, ignore_index=True)
    frame = frame.sort_values(["query", "reference", "q_patch", "r_patch", "model", "scale"], kind="stable")
    logger.info("scored %d patch pairs over %d passes", len(frame), len(passes))
    return ScoreTable(frame)


def _strategy(r_patch):
    return np.where(r_patch == ORIG, "global-local", "local-global")


def _combine(values, spec):
    """Vectorised counterpart of confidence/completeness over rows of `values` (NaN = missing)."""
    if spec.criterion == "completeness":
        out = np.full(values.shape[0], np.nan)
        present = ~np.all(np.isnan(values), axis=1)
        out[present] = np.nanmax(values[present], axis=1)
        return out
    thresholds = np.asarray(spec.thresholds, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        gate = np.all(values > thresholds, axis=1)
    out = np.full(values.shape[0], np.nan)
    out[gate] = values[gate].max(axis=1)
    return out


def ensemble_models(table, specs=()):
    """Collapse models and scales into one score per patch pair; gated-out pairs disappear."""
    if len(table) == 0:
        return ScoreTable()
    per_model = table.frame.groupby(PAIR_KEY + ["model"], sort=True)["score"].max()
    wide = per_model.unstack("model")
    keys = wide.index.to_frame(index=False)
    strategy = _strategy(keys["r_patch"].to_numpy())
    final = np.full(len(wide), np.nan)
    for name in ("global-local", "local-global"):
        rows = strategy == name
        if not rows.any():
            continue
        applicable = [s for s in specs if s.applies_to(name)]
        covered = {m for s in applicable for m in s.models}
        outputs = []
        for spec in applicable:
            cols = [wide[m].to_numpy()[rows] if m in wide.columns else np.full(rows.sum(), np.nan) for m in spec.models]
            outputs.append(_combine(np.column_stack(cols), spec))
        rest = [m for m in wide.columns if m not in covered]
        if rest:
            outputs.append(_combine(wide[rest].to_numpy()[rows], EnsembleSpec("completeness", tuple(rest))))
        stacked = np.column_stack(outputs)
        present = ~np.all(np.isnan(stacked), axis=1)
        merged = np.full(rows.sum(), np.nan)
        merged[present] = np.nanmax(stacked[present], axis=1)
        final[rows] = merged
    keep = ~np.isnan(final)
    out = keys[keep].copy()
    out["model"] = ENSEMBLE_MODEL
    out["scale"] = 0
    out["score"] = final[keep]
    return ScoreTable(out)


def apply_tricks(table, cfg, references=None):
    """Penalise pairs involving partial patches; drop reference patches of face-flagged references."""
    frame = table.frame.copy()
    if cfg.face_skip is not None and len(frame):
        ref_ids = frame["reference"].unique() if references is None else references
        flagged = {r for r in ref_ids if cfg.face_skip(r)}
        drop = frame["reference"].isin(flagged) & (frame["r_patch"] != ORIG)
        frame = frame[~drop]
    if cfg.partial_penalty != 1.0 and len(frame):
        partial_rows = ~frame["q_patch"].isin(WHOLE_FRAME_IDS) | ~frame["r_patch"].isin(WHOLE_FRAME_IDS)
        frame.loc[partial_rows, "score"] = frame.loc[partial_rows, "score"] * cfg.partial_penalty
    return ScoreTable(frame)


def ensemble_patches(table, top2_average=False):
    """One score per (query, reference): max over all patch pairs, or the mean of the two best."""
    if len(table) == 0:
        return []
    f = table.frame.sort_values(["query", "reference", "score"], ascending=[True, True, False], kind="stable")
    grouped = f.groupby(["query", "reference"], sort=True)["score"]
    if top2_average:
        scores = grouped.head(2).groupby([f["query"], f["reference"]]).mean()
    else:
        scores = grouped.max()
    return [PairScore(q, r, float(s)) for (q, r), s in scores.items()]


def match_pipeline(queries, references, specs=(), tricks=None, mode=MatchMode.BOTH, top_t=50,
                   block_size=1024, lg_models=None, lg_scales=None, jobs=1):
    """Score, ensemble models, apply tricks, ensemble patches, rank."""
    tricks = tricks or TrickConfig()
    specs = tuple(specs)
    table = pairwise_scores(queries, references, mode, top_t, block_size, lg_models, lg_scales, jobs)
    if len(table) == 0:
        return RankedPairList(())
    fused = ensemble_models(table, specs)
    adjusted = apply_tricks(fused, tricks)
    ranked = RankedPairList.from_scores(ensemble_patches(adjusted, tricks.top2_average))
    logger.info("ranked %d candidate pairs", len(ranked))
    return ranked
