"""Clip-to-video tracking: score fusion, query filtering, memory-bank
matching, and temporal aggregation of query embeddings.

The matcher is semi-online. A memory bank keeps the surviving queries of
the most recent clips (window t_match). For an incoming clip, every bank
clip is matched against the incoming queries by optimal assignment on
cosine similarity; the k_match best-matched bank clips then vote, their
per-track similarities are averaged into a consensus matrix, and one
final thresholded assignment hands existing track ids to the incoming
queries. Unmatched queries open fresh ids, so objects that vanish for
fewer than t_match clips can be re-identified under their original id.
With t_match = k_match = 1 the scheme degenerates to plain consecutive
clip matching.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Mapping, Sequence

import numpy as np

from .assignment import CostMatrix, solve, solve_thresholded
from .errors import DegenerateWeightsError, InputError, ValidationError
from .sampling import round_half_up, uniform_sample_indices
from .types import ClipPrediction, FrameGeometry, QueryPrediction, Track

AggregationMode = Literal[
    "weighted-mean", "arithmetic-mean", "best-score-single", "middle-frame-single"
]

DEFAULT_SIM_FLOOR = 0.2


@dataclass(frozen=True)
class TrackerConfig:
    """Matching hyperparameters.

    t_match: memory bank window, in clips. k_match: number of best-matched
    bank clips that vote on the consensus. t_thresh: fused-score floor for
    keeping a query. sim_floor: minimum consensus cosine for inheriting an
    existing track id (-inf disables the floor).
    """

    t_match: int = 1
    k_match: int = 1
    t_thresh: float = 0.0
    sim_floor: float = DEFAULT_SIM_FLOOR

    def __post_init__(self):
        if self.t_match < 1:
            raise InputError(f"t_match must be >= 1, got {self.t_match}")
        if not 1 <= self.k_match <= self.t_match:
            raise InputError(
                f"k_match must lie in 1..t_match ({self.t_match}), got {self.k_match}"
            )
        if not 0.0 <= self.t_thresh <= 1.0:
            raise InputError(f"t_thresh must lie in [0, 1], got {self.t_thresh}")
        if math.isnan(self.sim_floor) or self.sim_floor > 1.0:
            raise InputError(f"sim_floor must be <= 1, got {self.sim_floor}")


@dataclass(frozen=True)
class AggregationConfig:
    """Temporal aggregation: how many clips vote and how they are merged."""

    t_agg: int = 1
    mode: AggregationMode = "weighted-mean"

    def __post_init__(self):
        if self.t_agg < 1:
            raise InputError(f"t_agg must be >= 1, got {self.t_agg}")
        modes = ("weighted-mean", "arithmetic-mean", "best-score-single",
                 "middle-frame-single")
        if self.mode not in modes:
            raise InputError(f"unknown aggregation mode {self.mode!r}")


@dataclass(frozen=True)
class TrackerPreset:
    tracker: TrackerConfig
    aggregation: AggregationConfig


# Published inference settings per benchmark family.
PRESETS: dict[str, TrackerPreset] = {
    "lvvis": TrackerPreset(
        TrackerConfig(t_match=1, k_match=1),
        AggregationConfig(t_agg=1, mode="best-score-single"),
    ),
    "vidstg": TrackerPreset(
        TrackerConfig(t_match=100, k_match=7),
        AggregationConfig(t_agg=32, mode="weighted-mean"),
    ),
    "vln": TrackerPreset(
        TrackerConfig(t_match=20, k_match=5),
        AggregationConfig(t_agg=8, mode="weighted-mean"),
    ),
    "bensmot": TrackerPreset(
        TrackerConfig(t_match=40, k_match=7),
        AggregationConfig(t_agg=8, mode="weighted-mean"),
    ),
}


@dataclass(frozen=True)
class FilteredQuery:
    """A query that survived score filtering, with its original index."""

    index: int
    query: QueryPrediction
    class_confidence: float
    score: float


@dataclass(frozen=True)
class FilteredClip:
    clip: ClipPrediction
    survivors: tuple[FilteredQuery, ...]


@dataclass(frozen=True)
class BankEntry:
    track_id: int
    embedding: np.ndarray
    score: float


@dataclass(frozen=True)
class BankClip:
    clip_index: int
    entries: tuple[BankEntry, ...]


@dataclass(frozen=True)
class MemoryBank:
    """Sliding window of recent clips' surviving queries."""

    capacity: int
    clips: tuple[BankClip, ...] = ()
    next_track_id: int = 0


def fuse_scores(class_scores: Sequence[float] | np.ndarray,
                objectness: float) -> tuple[float, float]:
    """Fuse classification and objectness into one detection score.

    Returns (best class score, geometric mean of it with objectness).
    """
    scores = np.asarray(class_scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise InputError("class scores must be a non-empty flat vector")
    if np.any(scores < 0) or np.any(scores > 1) or not np.all(np.isfinite(scores)):
        raise InputError("class scores must lie in [0, 1]")
    if not 0.0 <= objectness <= 1.0:
        raise InputError(f"objectness {objectness} outside [0, 1]")
    best = float(scores.max())
    return best, math.sqrt(best * objectness)


def filter_clip(clip: ClipPrediction, t_thresh: float) -> FilteredClip:
    """Drop queries whose fused score falls below t_thresh.

    Survivors keep their original query indices; t_thresh = 0 keeps all
    and any t_thresh > 1 empties the clip (TrackerConfig bounds its own
    field, the bare operation does not).
    """
    if math.isnan(t_thresh):
        raise InputError("t_thresh must not be NaN")
    survivors = []
    for index, query in enumerate(clip.queries):
        confidence, score = fuse_scores(query.class_scores, query.objectness)
        if score >= t_thresh:
            survivors.append(FilteredQuery(index=index, query=query,
                                           class_confidence=confidence, score=score))
    return FilteredClip(clip=clip, survivors=tuple(survivors))


def cosine_matrix(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity; zero vectors similarity is 0."""
    left = np.atleast_2d(np.asarray(left, dtype=np.float64))
    right = np.atleast_2d(np.asarray(right, dtype=np.float64))
    if left.shape[1] != right.shape[1]:
        raise InputError(
            f"embedding dimensions differ: {left.shape[1]} vs {right.shape[1]}"
        )
    norms_l = np.linalg.norm(left, axis=1)
    norms_r = np.linalg.norm(right, axis=1)
    sims = left @ right.T
    denom = norms_l[:, None] * norms_r[None, :]
    out = np.divide(sims, denom, out=np.zeros_like(sims), where=denom > 0)
    return out


def match_clip(bank: MemoryBank, incoming: FilteredClip,
               cfg: TrackerConfig) -> tuple[dict[int, int], MemoryBank]:
    """Assign track ids to the incoming clip's surviving queries.

    Returns (assignment, updated bank) where assignment maps each
    survivor's original query index to its track id. The bank is not
    mutated; the updated bank holds at most t_match clips.
    """
    survivors = incoming.survivors
    embeddings = (np.stack([s.query.embedding for s in survivors])
                  if survivors else np.zeros((0, 1)))
    assignment: dict[int, int] = {}
    matched_positions: dict[int, int] = {}
    next_id = bank.next_track_id

    if survivors and any(clip.entries for clip in bank.clips):
        kept = _rank_bank_clips(bank, embeddings, cfg.k_match)
        consensus, track_ids = _consensus_matrix(kept, embeddings)
        for row, col in solve_thresholded(consensus, cfg.sim_floor):
            matched_positions[col] = track_ids[row]
    for position, survivor in enumerate(survivors):
        tid = matched_positions.get(position)
        if tid is None:
            tid = next_id
            next_id += 1
        assignment[survivor.index] = tid

    entries = tuple(
        BankEntry(track_id=assignment[s.index], embedding=s.query.embedding,
                  score=s.score)
        for s in survivors
    )
    clips = bank.clips + (BankClip(clip_index=incoming.clip.clip_index,
                                   entries=entries),)
    if len(clips) > bank.capacity:
        clips = clips[-bank.capacity:]
    return assignment, MemoryBank(capacity=bank.capacity, clips=clips,
                                  next_track_id=next_id)


def _rank_bank_clips(bank: MemoryBank, embeddings: np.ndarray,
                     k_match: int) -> list[tuple[BankClip, np.ndarray]]:
    """Pick the k_match bank clips that match the incoming queries best.

    Each bank clip is scored by the total similarity of its optimal
    assignment against the incoming queries; ties prefer recent clips.
    """
    scored = []
    for order, clip in enumerate(bank.clips):
        if not clip.entries:
            continue
        sims = cosine_matrix(np.stack([e.embedding for e in clip.entries]), embeddings)
        pairs = solve(CostMatrix(values=sims, sense="maximize"))
        total = float(sum(sims[r, c] for r, c in pairs))
        scored.append((total, order, clip, sims))
    scored.sort(key=lambda item: (-item[0], -item[1]))
    return [(clip, sims) for _, _, clip, sims in scored[:k_match]]


def _consensus_matrix(kept: list[tuple[BankClip, np.ndarray]],
                      embeddings: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Average each track's similarity to each incoming query over the
    kept clips in which the track appears."""
    sums: dict[int, np.ndarray] = {}
    hits: dict[int, int] = {}
    for clip, sims in kept:
        for row, entry in enumerate(clip.entries):
            tid = entry.track_id
            if tid in sums:
                sums[tid] = sums[tid] + sims[row]
                hits[tid] += 1
            else:
                sums[tid] = sims[row].copy()
                hits[tid] = 1
    track_ids = sorted(sums)
    consensus = np.stack([sums[t] / hits[t] for t in track_ids]) if track_ids \
        else np.zeros((0, embeddings.shape[0]))
    return consensus, track_ids


def track_video(clips: Sequence[ClipPrediction], cfg: TrackerConfig,
                aggregation: AggregationConfig | None = None) -> list[Track]:
    """Run the full per-video pipeline: fuse, filter, match, assemble.

    Clips must be consecutive from index 0 with a constant span. When an
    aggregation config is given, each track also receives its aggregated
    embedding.
    """
    tracks: dict[int, Track] = {}
    bank = MemoryBank(capacity=cfg.t_match)
    span = clips[0].span if clips else 0
    for position, clip in enumerate(clips):
        if clip.clip_index != position:
            raise ValidationError(
                f"clip indices not contiguous from 0 (expected {position}, "
                f"found {clip.clip_index})"
            )
        if clip.span != span:
            raise ValidationError(
                f"clip {clip.clip_index}: span {clip.span} differs from {span}"
            )
        filtered = filter_clip(clip, cfg.t_thresh)
        assignment, bank = match_clip(bank, filtered, cfg)
        for survivor in filtered.survivors:
            tid = assignment[survivor.index]
            track = tracks.get(tid)
            if track is None:
                track = Track(track_id=tid)
                tracks[tid] = track
            track.clips[clip.clip_index] = survivor.index
            track.scores[clip.clip_index] = survivor.score
            query = survivor.query
            for step, frame in enumerate(range(clip.first_frame, clip.last_frame + 1)):
                mask = query.masks[step] if query.masks is not None else None
                track.frames[frame] = FrameGeometry(box=query.boxes[step], mask=mask)
    result = [tracks[tid] for tid in sorted(tracks)]
    if aggregation is not None:
        for track in result:
            track.embedding = aggregate_track(
                track, track_embeddings(track, clips), aggregation
            )
    return result


def track_embeddings(track: Track, clips: Sequence[ClipPrediction]) -> dict[int, np.ndarray]:
    """Per-clip embedding of the track's assigned queries."""
    by_index = {clip.clip_index: clip for clip in clips}
    out = {}
    for clip_index, query_index in track.clips.items():
        out[clip_index] = by_index[clip_index].queries[query_index].embedding
    return out


def select_agg_clips(track: Track, t_agg: int) -> list[int]:
    """Clip indices sampled uniformly over the track's clips.

    Tracks shorter than t_agg contribute all their clips; t_agg = 1
    selects the middle clip.
    """
    clip_list = track.clip_indices()
    if not clip_list:
        raise InputError(f"track {track.track_id} has no clips")
    positions = uniform_sample_indices(len(clip_list), t_agg)
    return [clip_list[p] for p in positions]


def aggregate_track(track: Track, embeddings: Mapping[int, np.ndarray],
                    cfg: AggregationConfig, *, unnormalized: bool = False) -> np.ndarray:
    """Merge a track's per-clip embeddings into one caption query.

    weighted-mean and arithmetic-mean average over the sampled clip set;
    the single-clip modes return the best-scored or the middle clip's
    embedding. unnormalized skips the weight normalization of the
    weighted mean (debugging aid only).
    """
    if unnormalized and cfg.mode != "weighted-mean":
        raise InputError("unnormalized only applies to the weighted-mean mode")
    clip_list = track.clip_indices()
    if not clip_list:
        raise InputError(f"track {track.track_id} has no clips")

    if cfg.mode == "best-score-single":
        best = max(clip_list, key=lambda c: (track.scores.get(c, 0.0), -c))
        return np.asarray(_embedding_for(embeddings, best, track), dtype=np.float64)
    if cfg.mode == "middle-frame-single":
        middle = clip_list[round_half_up((len(clip_list) - 1) / 2)]
        return np.asarray(_embedding_for(embeddings, middle, track), dtype=np.float64)

    selected = select_agg_clips(track, cfg.t_agg)
    vectors = np.stack([
        np.asarray(_embedding_for(embeddings, c, track), dtype=np.float64)
        for c in selected
    ])
    if cfg.mode == "arithmetic-mean":
        return vectors.mean(axis=0)
    weights = np.asarray([track.scores.get(c, 0.0) for c in selected], dtype=np.float64)
    weighted = weights[:, None] * vectors
    if unnormalized:
        return weighted.sum(axis=0)
    total = float(weights.sum())
    if total <= 0.0:
        raise DegenerateWeightsError(
            f"track {track.track_id}: all aggregation weights are zero"
        )
    return weighted.sum(axis=0) / total


def _embedding_for(embeddings: Mapping[int, np.ndarray], clip_index: int,
                   track: Track) -> np.ndarray:
    try:
        return embeddings[clip_index]
    except KeyError:
        raise InputError(
            f"track {track.track_id}: no embedding for clip {clip_index}"
        ) from None
