"""Captioned-tracking evaluation: matching, components, end-to-end scores.

Component expectations are hand-computed from the counted definitions:
det = TP/(TP+FN+FP), ass = mean over TPs of TPA/(track dets + gt dets - TPA),
cap = summed similarity over captioned TPs / (captioned TP + captioned FN + FP).
"""
from __future__ import annotations

import json
import math

import numpy as np
import pytest

from dvoc.chota import (DEFAULT_ALPHAS, EvalConfig, evaluate, iou_matrix,
                        match_frame, report_to_dict)
from dvoc.errors import EvaluationError, InputError, ValidationError
from dvoc.types import (BBox, Category, FrameGeometry, GtObject, Track,
                        VideoRecord, combine_components)
from helpers import box_mask, identity_fixture

SIZE = (32, 32)


def geom(x, y, w, h, masked=False):
    mask = box_mask(SIZE[0], SIZE[1], x, y, w, h) if masked else None
    return FrameGeometry(box=BBox(x, y, w, h), mask=mask)


def gt(object_id, frames, caption=None):
    return GtObject(object_id=object_id, category=Category(id=1, name="thing"),
                    frames=frames, caption=caption)


def video_of(objects, frame_count=4, video_id="v"):
    return VideoRecord(video_id=video_id, frame_count=frame_count,
                       frame_size=SIZE, objects=objects)


class TableBackend:
    """Similarity stub keyed by candidate text; unknown candidates raise."""

    def __init__(self, table):
        self.table = dict(table)
        self.calls = 0

    def score(self, candidate, references):
        self.calls += 1
        return self.table[candidate]


def single_alpha(backend=None, alpha=0.5, geometry="box"):
    return EvalConfig(geometry=geometry, alphas=(alpha,), capsim=backend)


# --- per-frame matching ---

def test_iou_matrix_box_values():
    preds = [geom(0, 0, 10, 10), geom(100, 100, 2, 2)]
    gts = [geom(5, 5, 10, 10), geom(0, 0, 10, 10)]
    sims = iou_matrix(preds, gts, "box")
    assert sims.shape == (2, 2)
    assert sims[0, 0] == pytest.approx(25 / 175)
    assert sims[0, 1] == 1.0
    assert sims[1, 0] == 0.0 and sims[1, 1] == 0.0


def test_iou_matrix_mask_equals_box_for_filled_masks():
    preds = [geom(2, 3, 6, 5, masked=True), geom(9, 3, 6, 5, masked=True)]
    gts = [geom(4, 3, 6, 5, masked=True), geom(20, 20, 4, 4, masked=True)]
    assert np.array_equal(iou_matrix(preds, gts, "mask"),
                          iou_matrix(preds, gts, "box"))


def test_iou_matrix_mask_mode_requires_masks():
    with pytest.raises(EvaluationError):
        iou_matrix([geom(0, 0, 2, 2)], [geom(0, 0, 2, 2, masked=True)], "mask")


def test_iou_matrix_mask_dimension_mismatch():
    small = FrameGeometry(box=BBox(0, 0, 2, 2),
                          mask=box_mask(8, 8, 0, 0, 2, 2))
    big = geom(0, 0, 2, 2, masked=True)
    with pytest.raises(EvaluationError):
        iou_matrix([small], [big], "mask")


def test_match_frame_identity():
    frames = [geom(0, 0, 4, 4), geom(10, 10, 4, 4)]
    assert match_frame(frames, frames, 0.5) == [(0, 0), (1, 1)]


def test_match_frame_crossed():
    preds = [geom(10, 10, 4, 4), geom(0, 0, 4, 4)]
    gts = [geom(0, 0, 4, 4), geom(10, 10, 4, 4)]
    assert sorted(match_frame(preds, gts, 0.5)) == [(0, 1), (1, 0)]


def test_match_frame_keeps_exact_threshold():
    # nested boxes: intersection 4, union 16
    pred = [geom(0, 0, 4, 4)]
    target = [geom(0, 0, 2, 2)]
    assert match_frame(pred, target, 0.25) == [(0, 0)]
    assert match_frame(pred, target, 0.25 + 1e-9) == []


def test_match_frame_empty_sides():
    assert match_frame([], [geom(0, 0, 2, 2)], 0.5) == []
    assert match_frame([geom(0, 0, 2, 2)], [], 0.5) == []


# --- detection component ---

def test_det_counts_pooled():
    # TP=2 (object 1 mirrored), FN=2 (object 2 unmatched), FP=1
    objects = [gt(1, {0: geom(0, 0, 4, 4), 1: geom(0, 0, 4, 4)}),
               gt(2, {0: geom(8, 8, 4, 4), 1: geom(8, 8, 4, 4)})]
    tracks = [Track(track_id=0, frames={0: geom(0, 0, 4, 4), 1: geom(0, 0, 4, 4)}),
              Track(track_id=1, frames={0: geom(20, 20, 4, 4)})]
    report = evaluate([video_of(objects)], {"v": tracks}, single_alpha())
    assert report.det == pytest.approx(100 * 2 / 5)
    assert report.ass == pytest.approx(100.0)


def test_no_predictions_scores_zero():
    objects = [gt(1, {0: geom(0, 0, 4, 4)}, caption="a thing")]
    report = evaluate([video_of(objects)], {}, single_alpha())
    assert report.det == 0.0
    assert report.ass == 0.0
    assert report.cap == 0.0
    assert report.chota == 0.0


def test_no_ground_truth_scores_zero():
    tracks = [Track(track_id=0, frames={0: geom(0, 0, 4, 4)})]
    report = evaluate([video_of([])], {"v": tracks}, single_alpha())
    assert report.det == 0.0
    assert report.ass == 0.0
    assert report.cap == 0.0


def test_empty_video_is_perfect():
    report = evaluate([video_of([])], {}, single_alpha())
    assert (report.det, report.ass, report.cap) == (100.0, 100.0, 100.0)
    assert report.chota == pytest.approx(100.0, abs=1e-9)


# --- association component ---

def test_ass_identity_switch_halfway():
    # gt identity flips from object 1 to object 2 mid-video while a single
    # track covers all four frames: every TP gets 2 / (4 + 2 - 2) = 0.5.
    place = geom(5, 5, 4, 4)
    objects = [gt(1, {0: place, 1: place}), gt(2, {2: place, 3: place})]
    tracks = [Track(track_id=0, frames={f: place for f in range(4)})]
    report = evaluate([video_of(objects)], {"v": tracks}, single_alpha())
    assert report.det == pytest.approx(100.0)
    assert report.ass == pytest.approx(50.0)
    assert report.cap == pytest.approx(100.0)
    assert report.chota == pytest.approx(combine_components(100.0, 50.0, 100.0))


def test_ass_fragmented_track():
    # two one-frame tracks split a two-frame gt: each TP gets 1/(1+2-1)
    place = geom(5, 5, 4, 4)
    objects = [gt(1, {0: place, 1: place})]
    tracks = [Track(track_id=0, frames={0: place}),
              Track(track_id=1, frames={1: place})]
    report = evaluate([video_of(objects)], {"v": tracks}, single_alpha())
    assert report.det == pytest.approx(100.0)
    assert report.ass == pytest.approx(50.0)


def test_ass_zero_when_nothing_matches():
    objects = [gt(1, {0: geom(0, 0, 4, 4)})]
    tracks = [Track(track_id=0, frames={0: geom(20, 20, 4, 4)})]
    report = evaluate([video_of(objects)], {"v": tracks}, single_alpha())
    assert report.ass == 0.0


# --- caption component ---

def test_cap_counts_tp_fn_fp():
    # one matched captioned gt (sim 0.8), one missed captioned gt, one FP
    objects = [gt(1, {0: geom(0, 0, 4, 4)}, caption="ref one"),
               gt(2, {1: geom(8, 8, 4, 4)}, caption="ref two")]
    tracks = [Track(track_id=0, frames={0: geom(0, 0, 4, 4)}, caption="cand one"),
              Track(track_id=9, frames={2: geom(20, 20, 4, 4)}, caption="noise")]
    backend = TableBackend({"cand one": 0.8})
    report = evaluate([video_of(objects)], {"v": tracks}, single_alpha(backend))
    assert report.cap == pytest.approx(100 * 0.8 / 3)
    assert report.det == pytest.approx(100 / 3)
    assert backend.calls == 1


def test_cap_ignores_uncaptioned_objects():
    # the uncaptioned gt's TP drops out of every caption term and its
    # prediction text is never scored
    objects = [gt(1, {0: geom(0, 0, 4, 4)}, caption="ref one"),
               gt(2, {0: geom(8, 8, 4, 4)})]
    tracks = [Track(track_id=0, frames={0: geom(0, 0, 4, 4)}, caption="cand one"),
              Track(track_id=1, frames={0: geom(8, 8, 4, 4)}, caption="unscored")]
    backend = TableBackend({"cand one": 0.8})
    report = evaluate([video_of(objects)], {"v": tracks}, single_alpha(backend))
    assert report.cap == pytest.approx(100 * 0.8)
    assert report.det == pytest.approx(100.0)
    assert backend.calls == 1


def test_cap_missing_prediction_caption_scores_zero():
    objects = [gt(1, {0: geom(0, 0, 4, 4)}, caption="ref one")]
    tracks = [Track(track_id=0, frames={0: geom(0, 0, 4, 4)})]
    backend = TableBackend({})
    report = evaluate([video_of(objects)], {"v": tracks}, single_alpha(backend))
    assert report.cap == 0.0
    assert report.det == pytest.approx(100.0)
    assert backend.calls == 0


def test_cap_vacuous_when_no_captions_and_no_fp():
    place = geom(5, 5, 4, 4)
    objects = [gt(1, {0: place})]
    tracks = [Track(track_id=0, frames={0: place})]
    report = evaluate([video_of(objects)], {"v": tracks}, single_alpha())
    assert report.cap == 100.0


def test_cap_backend_range_enforced():
    objects = [gt(1, {0: geom(0, 0, 4, 4)}, caption="ref")]
    tracks = [Track(track_id=0, frames={0: geom(0, 0, 4, 4)}, caption="cand")]
    backend = TableBackend({"cand": 1.5})
    with pytest.raises(InputError):
        evaluate([video_of(objects)], {"v": tracks}, single_alpha(backend))


# --- end to end ---

def test_identity_fixture_perfect_both_geometries():
    videos, tracks = identity_fixture()
    for geometry in ("box", "mask"):
        report = evaluate(videos, tracks, EvalConfig(geometry=geometry))
        for value in (report.det, report.ass, report.cap, report.chota):
            assert value == pytest.approx(100.0, abs=1e-9)
        assert len(report.videos) == len(videos)
        for per_video in report.videos:
            assert per_video.chota == pytest.approx(100.0, abs=1e-9)


def test_caption_corruption_only_hits_cap():
    videos, tracks = identity_fixture()
    clean = evaluate(videos, tracks)
    tracks["v0"][0].caption = "qzx vrb plk jjt wqe rty uio"
    corrupted = evaluate(videos, tracks)
    assert corrupted.det == pytest.approx(clean.det)
    assert corrupted.ass == pytest.approx(clean.ass)
    assert corrupted.cap < clean.cap - 1.0
    assert corrupted.chota < clean.chota


def jittered_fixture(seed=0, n_videos=4):
    rng = np.random.default_rng(seed)
    videos, tracks = identity_fixture(n_videos=n_videos)
    for vid in tracks.values():
        for track in vid:
            for f, g in track.frames.items():
                dx, dy = (int(rng.integers(0, 3)) for _ in range(2))
                box = BBox(g.box.x + dx, g.box.y + dy, g.box.w, g.box.h)
                mask = box_mask(videos[0].frame_size[0], videos[0].frame_size[1],
                                int(box.x), int(box.y), int(box.w), int(box.h))
                track.frames[f] = FrameGeometry(box=box, mask=mask)
    return videos, tracks


def test_det_curve_monotone_in_threshold():
    videos, tracks = jittered_fixture()
    report = evaluate(videos, tracks)
    curve = report.det_curve
    assert len(curve) == len(DEFAULT_ALPHAS)
    for lo, hi in zip(curve, curve[1:]):
        assert hi <= lo + 1e-12


def test_matched_iou_equal_to_threshold_counts():
    # IoU between the boxes is exactly 1/3; the grid point at 1/3 keeps it
    objects = [gt(1, {0: geom(0, 0, 2, 2)})]
    tracks = [Track(track_id=0, frames={0: geom(1, 0, 2, 2)})]
    at = evaluate([video_of(objects)], {"v": tracks}, single_alpha(alpha=1 / 3))
    above = evaluate([video_of(objects)], {"v": tracks},
                     single_alpha(alpha=math.nextafter(1 / 3, 1.0)))
    assert at.det == pytest.approx(100.0)
    assert above.det == 0.0


def test_box_scale_invariance():
    videos, tracks = jittered_fixture()
    scale = 3

    def scaled_geom(g, masked):
        box = BBox(g.box.x * scale, g.box.y * scale, g.box.w * scale, g.box.h * scale)
        mask = None
        if masked:
            mask = box_mask(videos[0].frame_size[0] * scale,
                            videos[0].frame_size[1] * scale,
                            int(box.x), int(box.y), int(box.w), int(box.h))
        return FrameGeometry(box=box, mask=mask)

    big_videos = []
    for video in videos:
        objs = [GtObject(object_id=o.object_id, category=o.category,
                         frames={f: scaled_geom(g, True) for f, g in o.frames.items()},
                         caption=o.caption) for o in video.objects]
        big_videos.append(VideoRecord(video_id=video.video_id,
                                      frame_count=video.frame_count,
                                      frame_size=(video.frame_size[0] * scale,
                                                  video.frame_size[1] * scale),
                                      objects=objs))
    big_tracks = {vid: [Track(track_id=t.track_id,
                              frames={f: scaled_geom(g, True)
                                      for f, g in t.frames.items()},
                              caption=t.caption) for t in ts]
                  for vid, ts in tracks.items()}
    base = evaluate(videos, tracks)
    big = evaluate(big_videos, big_tracks)
    assert big.det == pytest.approx(base.det, rel=1e-12)
    assert big.ass == pytest.approx(base.ass, rel=1e-12)
    assert big.cap == pytest.approx(base.cap, rel=1e-12)


def test_mask_mode_matches_box_mode_on_filled_masks():
    videos, tracks = jittered_fixture()
    box_report = evaluate(videos, tracks, EvalConfig(geometry="box"))
    mask_report = evaluate(videos, tracks, EvalConfig(geometry="mask"))
    assert mask_report.det_curve == box_report.det_curve
    assert mask_report.ass_curve == box_report.ass_curve
    assert mask_report.cap_curve == box_report.cap_curve


def test_workers_do_not_change_results():
    videos, tracks = jittered_fixture()
    serial = report_to_dict(evaluate(videos, tracks, EvalConfig(workers=1)))
    threaded = report_to_dict(evaluate(videos, tracks, EvalConfig(workers=4)))
    assert serial == threaded


# --- validation and report shape ---

def test_unknown_video_rejected():
    videos, tracks = identity_fixture(n_videos=1)
    tracks["missing"] = []
    with pytest.raises(ValidationError, match="missing"):
        evaluate(videos, tracks)


def test_duplicate_track_id_rejected():
    place = geom(0, 0, 4, 4)
    tracks = [Track(track_id=7, frames={0: place}),
              Track(track_id=7, frames={1: place})]
    with pytest.raises(ValidationError, match="duplicate track id 7"):
        evaluate([video_of([gt(1, {0: place})])], {"v": tracks})


def test_duplicate_object_id_rejected():
    place = geom(0, 0, 4, 4)
    objects = [gt(3, {0: place}), gt(3, {1: place})]
    with pytest.raises(ValidationError, match="duplicate object id 3"):
        evaluate([video_of(objects)], {})


def test_track_frame_out_of_range():
    tracks = [Track(track_id=0, frames={9: geom(0, 0, 4, 4)})]
    with pytest.raises(ValidationError, match="frame 9"):
        evaluate([video_of([], frame_count=4)], {"v": tracks})


def test_mask_mode_missing_mask_names_location():
    objects = [gt(1, {2: geom(0, 0, 4, 4)})]
    with pytest.raises(EvaluationError, match=r"video v frame 2"):
        evaluate([video_of(objects)], {}, EvalConfig(geometry="mask"))


def test_default_alpha_grid():
    assert DEFAULT_ALPHAS == tuple(round(0.05 * i, 2) for i in range(1, 20))
    assert len(DEFAULT_ALPHAS) == 19
    assert DEFAULT_ALPHAS[0] == 0.05 and DEFAULT_ALPHAS[-1] == 0.95


def test_eval_config_validation():
    with pytest.raises(InputError):
        EvalConfig(geometry="voxel")
    with pytest.raises(InputError):
        EvalConfig(alphas=())
    with pytest.raises(InputError):
        EvalConfig(alphas=(0.0, 0.5))
    with pytest.raises(InputError):
        EvalConfig(alphas=(0.5, 0.5))
    with pytest.raises(InputError):
        EvalConfig(workers=0)


def test_combine_components_published_examples():
    # geometric mean of component triples, to reported precision
    assert combine_components(54.3, 89.1, 43.6) == pytest.approx(59.5, abs=0.05)
    assert combine_components(66.8, 71.0, 51.0) == pytest.approx(62.3, abs=0.05)
    assert combine_components(0.0, 50.0, 50.0) == 0.0
    assert combine_components(100.0, 100.0, 100.0) == pytest.approx(100.0)


def test_report_payload_shape_and_determinism():
    videos, tracks = jittered_fixture()
    payload = report_to_dict(evaluate(videos, tracks))
    assert payload["schema_version"] == 1
    assert payload["geometry"] == "box"
    assert payload["alphas"] == list(DEFAULT_ALPHAS)
    assert {"det", "ass", "cap", "chota", "videos"} <= set(payload)
    assert [v["video_id"] for v in payload["videos"]] == [v.video_id for v in videos]
    again = report_to_dict(evaluate(videos, tracks))
    assert json.dumps(payload, sort_keys=True) == json.dumps(again, sort_keys=True)
