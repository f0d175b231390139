"""Shared synthetic fixtures and independent oracles for the test suite."""
from __future__ import annotations

import math
import re
import threading

import numpy as np
from scipy.optimize import linear_sum_assignment

from dvoc.rle import rle_encode
from dvoc.sampling import round_half_up
from dvoc.types import (BBox, Category, ClipPrediction, FrameGeometry, GtObject,
                        QueryPrediction, RleMask, Track, VideoRecord)
from dvoc.vlm import VlmResponse

NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven",
                "eight", "nine", "ten", "eleven")


class ScriptedClient:
    """Pops queued outcomes in order; exceptions raise, strings answer."""

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.requests = []
        self.lock = threading.Lock()

    def complete(self, request):
        with self.lock:
            self.requests.append(request)
            outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return VlmResponse(caption=outcome)


def random_grid(rng: np.random.Generator, height: int | None = None,
                width: int | None = None, max_side: int = 24) -> np.ndarray:
    if height is None:
        height = int(rng.integers(1, max_side + 1))
    if width is None:
        width = int(rng.integers(1, max_side + 1))
    density = float(rng.uniform(0.0, 1.0))
    return rng.random((height, width)) < density


def box_mask(frame_height: int, frame_width: int, x: int, y: int,
             w: int, h: int) -> RleMask:
    """Mask whose foreground exactly fills the integer box."""
    grid = np.zeros((frame_height, frame_width), dtype=bool)
    grid[y:y + h, x:x + w] = True
    return rle_encode(grid)


def fast_box_mask(frame_height: int, frame_width: int, x: int, y: int,
                  w: int, h: int) -> RleMask:
    """Same mask as box_mask, built straight from run counts.

    Rasterising dominates fixture-construction time once a test needs
    hundreds of thousands of masks, so the large fixtures use this.
    """
    if w == 0 or h == 0:
        counts = [frame_height * frame_width]
    elif h == frame_height:
        counts = [x * frame_height, w * frame_height]
    else:
        counts = [x * frame_height + y] + [h, frame_height - h] * (w - 1) + [h]
    trailing = frame_height * frame_width - sum(counts)
    if trailing:
        counts.append(trailing)
    return RleMask(height=frame_height, width=frame_width,
                   counts=tuple(counts))


def mirror_track(obj: GtObject, track_id: int, caption: str | None = None) -> Track:
    """Track that reproduces a ground-truth object exactly."""
    track = Track(track_id=track_id)
    track.frames = dict(obj.frames)
    track.caption = obj.caption if caption is None else caption
    return track


def identity_fixture(n_videos: int = 5, frames: int = 6, objects: int = 2,
                     frame_size: tuple[int, int] = (32, 48), masks: bool = True,
                     ) -> tuple[list[VideoRecord], dict[str, list[Track]]]:
    """Videos with drifting boxes plus tracks that equal the ground truth.

    Captions are distinct across objects so that the consensus similarity
    backend sees non-degenerate document frequencies.
    """
    height, width = frame_size
    nouns = ("widget", "gadget", "sprocket")
    videos: list[VideoRecord] = []
    tracks: dict[str, list[Track]] = {}
    for v in range(n_videos):
        objs = []
        for j in range(objects):
            geoms = {}
            for f in range(frames):
                x, y, w, h = 2 + 9 * j + f, 3 + 2 * j, 6, 5
                assert x + w <= width and y + h <= height
                mask = box_mask(height, width, x, y, w, h) if masks else None
                geoms[f] = FrameGeometry(box=BBox(x, y, w, h), mask=mask)
            noun = nouns[j % len(nouns)]
            caption = (f"a small {noun} number {NUMBER_WORDS[v]} drifting "
                       f"slowly to the right")
            objs.append(GtObject(object_id=j + 1,
                                 category=Category(id=j + 1, name=noun),
                                 frames=geoms, caption=caption))
        video = VideoRecord(video_id=f"v{v}", frame_count=frames,
                            frame_size=frame_size, objects=objs)
        videos.append(video)
        tracks[video.video_id] = [mirror_track(o, k) for k, o in enumerate(objs)]
    return videos, tracks


def random_clips(rng: np.random.Generator, n_clips: int = 4, span: int = 2,
                 max_queries: int = 4, dim: int = 6) -> list[ClipPrediction]:
    clips = []
    for i in range(n_clips):
        queries = []
        for _ in range(int(rng.integers(0, max_queries + 1))):
            boxes = [BBox(float(rng.uniform(0, 20)), float(rng.uniform(0, 20)),
                          5.0, 4.0) for _ in range(span)]
            queries.append(QueryPrediction(
                embedding=rng.normal(size=dim),
                class_scores=rng.uniform(0.0, 1.0, size=3),
                objectness=float(rng.uniform(0.0, 1.0)),
                boxes=boxes,
            ))
        clips.append(ClipPrediction(clip_index=i, first_frame=i * span,
                                    last_frame=i * span + span - 1,
                                    queries=queries))
    return clips


def consecutive_hungarian_tracks(clips: list[ClipPrediction], t_thresh: float,
                                 sim_floor: float) -> dict[int, dict[int, int]]:
    """Reference matcher: clip i matched only against clip i-1's survivors.

    Returns track_id -> {clip_index: original query index}. Fresh ids are
    allocated in ascending survivor order, starting at 0.
    """
    next_id = 0
    prev: list[tuple[int, np.ndarray]] = []
    out: dict[int, dict[int, int]] = {}
    for clip in clips:
        survivors = []
        for index, query in enumerate(clip.queries):
            fused = math.sqrt(float(np.max(query.class_scores)) * query.objectness)
            if fused >= t_thresh:
                survivors.append((index, np.asarray(query.embedding, dtype=np.float64)))
        matched: dict[int, int] = {}
        if prev and survivors:
            sims = np.zeros((len(prev), len(survivors)))
            for r, (_, prev_emb) in enumerate(prev):
                for c, (_, emb) in enumerate(survivors):
                    denom = np.linalg.norm(prev_emb) * np.linalg.norm(emb)
                    sims[r, c] = float(prev_emb @ emb) / denom if denom > 0 else 0.0
            rows, cols = linear_sum_assignment(-sims)
            for r, c in zip(rows, cols):
                if sims[r, c] >= sim_floor:
                    matched[c] = prev[r][0]
        current = []
        for position, (index, emb) in enumerate(survivors):
            tid = matched.get(position)
            if tid is None:
                tid = next_id
                next_id += 1
            out.setdefault(tid, {})[clip.clip_index] = index
            current.append((tid, emb))
        prev = current
    return out


def track_shapes(tracks: list[Track]) -> dict[int, dict[int, int]]:
    return {t.track_id: dict(t.clips) for t in tracks}


CORPUS = [
    "a red car drives down the street",
    "a blue car parked near the red house",
    "the dog chases a yellow ball",
    "a small dog sleeps on the porch",
    "two children play with a yellow ball",
    "the street is empty at night",
    "a cat watches the children from the window",
    "an old man walks his dog slowly",
    "the red car stops at the corner",
    "children laugh while the dog runs",
]


def oracle_tokens(text):
    return re.findall(r"[^\W_]+", text.lower(), flags=re.UNICODE)


def oracle_grams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def oracle_similarity(candidate, references, corpus, sigma=6.0):
    """Literal transcription of the scoring formula, term by term."""
    corpus_tokens = [oracle_tokens(s) for s in corpus]
    big_n = len(corpus)
    cand_tokens = oracle_tokens(candidate)

    def idf(gram, n):
        df = sum(1 for sent in corpus_tokens if gram in set(oracle_grams(sent, n)))
        return math.log(big_n) - math.log(max(1.0, df))

    total = 0.0
    for ref_text in references:
        ref_tokens = oracle_tokens(ref_text)
        per_order = 0.0
        for n in range(1, 5):
            c_counts, r_counts = {}, {}
            for g in oracle_grams(cand_tokens, n):
                c_counts[g] = c_counts.get(g, 0) + 1
            for g in oracle_grams(ref_tokens, n):
                r_counts[g] = r_counts.get(g, 0) + 1
            numerator = 0.0
            for g, c_count in c_counts.items():
                r_count = r_counts.get(g, 0)
                numerator += (min(c_count, r_count) * idf(g, n)) * (r_count * idf(g, n))
            norm_c = math.sqrt(sum((cnt * idf(g, n)) ** 2 for g, cnt in c_counts.items()))
            norm_r = math.sqrt(sum((cnt * idf(g, n)) ** 2 for g, cnt in r_counts.items()))
            cos = numerator / (norm_c * norm_r) if norm_c > 0 and norm_r > 0 else 0.0
            delta = len(cand_tokens) - len(ref_tokens)
            per_order += cos * math.exp(-delta * delta / (2 * sigma * sigma))
        total += per_order / 4.0
    raw = 10.0 * total / len(references)
    return min(1.0, max(0.0, raw / 10.0))


def band_oracle(box, height, width, stroke):
    """Per-pixel reference for the rectangle outline a box draw touches."""
    x0, y0 = round_half_up(box.x), round_half_up(box.y)
    x1, y1 = round_half_up(box.x + box.w), round_half_up(box.y + box.h)
    band = np.zeros((height, width), dtype=bool)
    if box.w <= 0 or box.h <= 0:
        return band
    for r in range(height):
        for c in range(width):
            inside = y0 <= r < y1 and x0 <= c < x1
            interior = (y0 + stroke <= r < y1 - stroke
                        and x0 + stroke <= c < x1 - stroke)
            band[r, c] = inside and not interior
    return band


def boundary_oracle(grid, stroke):
    """Per-pixel reference for the mask-boundary pixels a draw touches."""
    height, width = grid.shape
    boundary = np.zeros_like(grid)
    for r in range(height):
        for c in range(width):
            if not grid[r, c]:
                continue
            for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if not (0 <= rr < height and 0 <= cc < width) or not grid[rr, cc]:
                    boundary[r, c] = True
                    break
    radius = (stroke - 1) // 2
    if radius == 0:
        return boundary
    out = np.zeros_like(boundary)
    for r, c in zip(*np.nonzero(boundary)):
        out[max(0, r - radius):r + radius + 1,
            max(0, c - radius):c + radius + 1] = True
    return out
