"""Captioned tracking evaluation.

Detections are matched per frame by optimal assignment on IoU; the
matching maximizes the IoU sum on the full matrix and the overlap
threshold only unmatches pairs afterwards, so one solve per frame serves
the whole threshold grid. Three components are computed per threshold:

* detection accuracy: TP / (TP + FN + FP), pooled over all frames;
* association accuracy: for every true positive with id pair (p, g),
  TPA / (TPA + FNA + FPA) where TPA counts matches of the same pair and
  FNA / FPA count the gt's and the track's remaining detections; the
  component is the mean over true positives;
* caption accuracy: summed caption similarity of true positives whose gt
  carries a caption, divided by (captioned TP + captioned FN + all FP);
  gts without captions are excluded from the caption terms and captions
  missing on the prediction side score 0.

Components are averaged over the threshold grid, scaled to [0, 100], and
combined by geometric mean. Counts pool globally across videos; the
report also carries per-video breakdowns and the per-threshold curves.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Protocol, Sequence

import numpy as np

from .assignment import CostMatrix, solve, solve_thresholded
from .capsim import CiderBackend
from .errors import EvaluationError, InputError, ValidationError
from .rle import box_iou, iou_from_bounds, run_bounds
from .types import (
    EvalReport,
    FrameGeometry,
    Track,
    VideoEvalResult,
    VideoRecord,
    combine_components,
)

DEFAULT_ALPHAS = tuple(round(0.05 * i, 2) for i in range(1, 20))

GEOMETRY_MODES = ("box", "mask")


class CaptionSimilarity(Protocol):
    def score(self, candidate: str, references: Sequence[str]) -> float: ...


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation settings: geometry mode, threshold grid, caption backend.

    With capsim = None a consensus backend is built over the ground-truth
    captions of the evaluated split.
    """

    geometry: str = "box"
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    capsim: CaptionSimilarity | None = None
    workers: int = 1

    def __post_init__(self):
        if self.geometry not in GEOMETRY_MODES:
            raise InputError(f"unknown geometry mode {self.geometry!r}")
        if not self.alphas:
            raise InputError("threshold grid is empty")
        ordered = tuple(sorted(self.alphas))
        for a in ordered:
            if not 0.0 < a <= 1.0:
                raise InputError(f"threshold {a} outside (0, 1]")
        if len(set(ordered)) != len(ordered):
            raise InputError("threshold grid contains duplicates")
        object.__setattr__(self, "alphas", ordered)
        if self.workers < 1:
            raise InputError(f"workers must be >= 1, got {self.workers}")


def iou_matrix(preds: Sequence[FrameGeometry], gts: Sequence[FrameGeometry],
               geometry: str = "box") -> np.ndarray:
    """Pairwise IoU between prediction and ground-truth geometries."""
    sims = np.zeros((len(preds), len(gts)))
    if geometry == "mask":
        for geoms in (preds, gts):
            for geom in geoms:
                if geom.mask is None:
                    raise EvaluationError("mask mode requires a mask on every detection")
        pred_bounds = [run_bounds(g.mask) for g in preds]
        gt_bounds = [run_bounds(g.mask) for g in gts]
        for i, pred in enumerate(preds):
            for j, gt in enumerate(gts):
                # Masks sit inside their tight boxes; disjoint boxes
                # short-circuit the run merge.
                if box_iou(pred.box, gt.box) == 0.0:
                    continue
                if (pred.mask.height, pred.mask.width) != (gt.mask.height, gt.mask.width):
                    raise EvaluationError(
                        f"mask dimensions differ: {pred.mask.height}x{pred.mask.width} "
                        f"vs {gt.mask.height}x{gt.mask.width}"
                    )
                sims[i, j] = iou_from_bounds(pred_bounds[i], gt_bounds[j])
    else:
        for i, pred in enumerate(preds):
            for j, gt in enumerate(gts):
                sims[i, j] = box_iou(pred.box, gt.box)
    return sims


def match_frame(preds: Sequence[FrameGeometry], gts: Sequence[FrameGeometry],
                alpha: float, geometry: str = "box") -> list[tuple[int, int]]:
    """True-positive pairs for one frame at one overlap threshold."""
    if len(preds) == 0 or len(gts) == 0:
        return []
    return solve_thresholded(iou_matrix(preds, gts, geometry), alpha)


@dataclass
class _VideoStats:
    """Matching evidence for one video, threshold-independent."""

    video_id: Any
    pred_dets: int = 0
    gt_dets: int = 0
    # (track_id, object_id) -> sorted array of matched IoUs across frames
    pair_ious: dict[tuple[int, Any], np.ndarray] = field(default_factory=dict)
    track_dets: dict[int, int] = field(default_factory=dict)
    object_dets: dict[Any, int] = field(default_factory=dict)
    captioned_objects: set = field(default_factory=set)
    captioned_dets: int = 0
    # (track_id, object_id) -> (pred caption or None, gt caption)
    pair_captions: dict[tuple[int, Any], tuple[str | None, str]] = field(default_factory=dict)


def _collect_video_stats(video: VideoRecord, tracks: Sequence[Track],
                         geometry: str) -> _VideoStats:
    stats = _VideoStats(video_id=video.video_id)
    pred_frames: dict[int, list[tuple[int, FrameGeometry]]] = {}
    for track in tracks:
        if track.track_id in stats.track_dets:
            raise ValidationError(
                f"video {video.video_id}: duplicate track id {track.track_id}"
            )
        stats.track_dets[track.track_id] = len(track.frames)
        stats.pred_dets += len(track.frames)
        for f, geom in track.frames.items():
            if not 0 <= f < video.frame_count:
                raise ValidationError(
                    f"video {video.video_id} track {track.track_id}: frame {f} "
                    f"outside 0..{video.frame_count - 1}"
                )
            pred_frames.setdefault(f, []).append((track.track_id, geom))
    gt_frames: dict[int, list[tuple[Any, FrameGeometry]]] = {}
    for obj in video.objects:
        if obj.object_id in stats.object_dets:
            raise ValidationError(
                f"video {video.video_id}: duplicate object id {obj.object_id}"
            )
        stats.object_dets[obj.object_id] = len(obj.frames)
        stats.gt_dets += len(obj.frames)
        if obj.caption is not None:
            stats.captioned_objects.add(obj.object_id)
            stats.captioned_dets += len(obj.frames)
        for f, geom in obj.frames.items():
            gt_frames.setdefault(f, []).append((obj.object_id, geom))

    if geometry == "mask":
        missing = _frames_missing_masks(video.video_id, pred_frames, gt_frames)
        if missing:
            raise EvaluationError(
                "mask mode requires masks on every detection; missing at: "
                + ", ".join(missing)
            )

    track_captions = {t.track_id: t.caption for t in tracks}
    gt_captions = {o.object_id: o.caption for o in video.objects}
    raw_pairs: dict[tuple[int, Any], list[float]] = {}
    for f, gt_list in gt_frames.items():
        pred_list = pred_frames.get(f)
        if not pred_list:
            continue
        sims = iou_matrix([g for _, g in pred_list], [g for _, g in gt_list], geometry)
        for r, c in solve(CostMatrix(values=sims, sense="maximize")):
            iou = float(sims[r, c])
            if iou <= 0.0:
                continue
            key = (pred_list[r][0], gt_list[c][0])
            raw_pairs.setdefault(key, []).append(iou)
    for key, ious in raw_pairs.items():
        stats.pair_ious[key] = np.sort(np.asarray(ious))
        tid, oid = key
        if oid in stats.captioned_objects:
            stats.pair_captions[key] = (track_captions[tid], gt_captions[oid])
    return stats


def _frames_missing_masks(video_id, pred_frames, gt_frames) -> list[str]:
    missing = set()
    for frames in (pred_frames, gt_frames):
        for f, entries in frames.items():
            if any(geom.mask is None for _, geom in entries):
                missing.add(f)
    return [f"video {video_id} frame {f}" for f in sorted(missing)]


def _components(stats_list: Sequence[_VideoStats], alphas: Sequence[float],
                pair_sims: Mapping[tuple[Any, int, Any], float]):
    """Per-threshold (det, ass, cap) on the [0, 1] scale, counts pooled."""
    pred_total = sum(s.pred_dets for s in stats_list)
    gt_total = sum(s.gt_dets for s in stats_list)
    captioned_total = sum(s.captioned_dets for s in stats_list)
    det_curve, ass_curve, cap_curve = [], [], []
    for alpha in alphas:
        tp = 0
        ass_sum = 0.0
        tp_capt = 0
        sim_sum = 0.0
        for s in stats_list:
            for (tid, oid), ious in s.pair_ious.items():
                tpa = len(ious) - int(np.searchsorted(ious, alpha, side="left"))
                if tpa == 0:
                    continue
                tp += tpa
                union = s.track_dets[tid] + s.object_dets[oid] - tpa
                ass_sum += tpa * (tpa / union)
                if oid in s.captioned_objects:
                    tp_capt += tpa
                    sim_sum += tpa * pair_sims[(s.video_id, tid, oid)]
        fn = gt_total - tp
        fp = pred_total - tp
        det_curve.append(tp / (tp + fn + fp) if tp + fn + fp else 1.0)
        if tp:
            ass_curve.append(ass_sum / tp)
        else:
            ass_curve.append(1.0 if pred_total == 0 and gt_total == 0 else 0.0)
        fn_capt = captioned_total - tp_capt
        cap_denominator = tp_capt + fn_capt + fp
        cap_curve.append(sim_sum / cap_denominator if cap_denominator else 1.0)
    return det_curve, ass_curve, cap_curve


def evaluate(videos: Sequence[VideoRecord], tracks_by_video: Mapping[Any, Sequence[Track]],
             cfg: EvalConfig | None = None) -> EvalReport:
    """Score predicted tracks against ground truth.

    tracks_by_video maps video id to that video's tracks; videos absent
    from the mapping count as having no predictions. Track ids for
    unknown videos are rejected.
    """
    cfg = cfg or EvalConfig()
    known = {v.video_id for v in videos}
    unknown = set(tracks_by_video) - known
    if unknown:
        raise ValidationError(f"tracks reference unknown videos: {sorted(unknown, key=str)}")

    def collect(video: VideoRecord) -> _VideoStats:
        return _collect_video_stats(video, tracks_by_video.get(video.video_id, ()),
                                    cfg.geometry)

    if cfg.workers > 1 and len(videos) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            stats_list = list(pool.map(collect, videos))
    else:
        stats_list = [collect(v) for v in videos]

    backend = cfg.capsim
    if backend is None:
        corpus = [o.caption for v in videos for o in v.objects if o.caption is not None]
        backend = CiderBackend(corpus) if corpus else None
    pair_sims: dict[tuple[Any, int, Any], float] = {}
    for s in stats_list:
        for (tid, oid), (pred_caption, gt_caption) in s.pair_captions.items():
            if pred_caption is None:
                sim = 0.0
            else:
                sim = float(backend.score(pred_caption, [gt_caption]))
                if not 0.0 <= sim <= 1.0:
                    raise InputError(f"caption backend returned {sim}, outside [0, 1]")
            pair_sims[(s.video_id, tid, oid)] = sim

    det_curve, ass_curve, cap_curve = _components(stats_list, cfg.alphas, pair_sims)
    report = EvalReport(
        geometry=cfg.geometry,
        alphas=list(cfg.alphas),
        det=100.0 * float(np.mean(det_curve)),
        ass=100.0 * float(np.mean(ass_curve)),
        cap=100.0 * float(np.mean(cap_curve)),
        chota=combine_components(100.0 * float(np.mean(det_curve)),
                                 100.0 * float(np.mean(ass_curve)),
                                 100.0 * float(np.mean(cap_curve))),
        det_curve=[100.0 * v for v in det_curve],
        ass_curve=[100.0 * v for v in ass_curve],
        cap_curve=[100.0 * v for v in cap_curve],
    )
    for s in stats_list:
        det, ass, cap = _components([s], cfg.alphas, pair_sims)
        report.videos.append(VideoEvalResult(
            video_id=s.video_id,
            det=100.0 * float(np.mean(det)),
            ass=100.0 * float(np.mean(ass)),
            cap=100.0 * float(np.mean(cap)),
            chota=combine_components(100.0 * float(np.mean(det)),
                                     100.0 * float(np.mean(ass)),
                                     100.0 * float(np.mean(cap))),
            det_curve=[100.0 * v for v in det],
            ass_curve=[100.0 * v for v in ass],
            cap_curve=[100.0 * v for v in cap],
        ))
    return report


def report_to_dict(report: EvalReport) -> dict:
    """JSON-ready payload; deterministic for identical inputs."""
    def entry(det, ass, cap, chota, det_curve, ass_curve, cap_curve):
        return {
            "det": det, "ass": ass, "cap": cap, "chota": chota,
            "det_curve": det_curve, "ass_curve": ass_curve, "cap_curve": cap_curve,
        }

    payload = {
        "schema_version": 1,
        "geometry": report.geometry,
        "alphas": report.alphas,
        **entry(report.det, report.ass, report.cap, report.chota,
                report.det_curve, report.ass_curve, report.cap_curve),
        "videos": [
            {"video_id": v.video_id,
             **entry(v.det, v.ass, v.cap, v.chota,
                     v.det_curve, v.ass_curve, v.cap_curve)}
            for v in report.videos
        ],
    }
    return payload
