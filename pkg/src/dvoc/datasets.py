"""Parsing and serialization for annotation, prediction, and track files.

Three external formats are handled:

* image datasets: {"images": [...], "annotations": [...], "categories": [...]}
  with one annotation per object, single-frame geometry;
* video datasets: {"videos": [...], "annotations": [...], "categories": [...]}
  with per-frame geometry lists aligned to the video length;
* prediction files: JSON lines, one clip per line, each carrying the
  clip's queries with embeddings, scores, and per-frame geometry.

Videos are normalized to VideoRecord; an image dataset parses to videos
of length 1. Segmentations may arrive as integer-count RLE objects,
compressed ascii RLE strings, or polygon lists; polygons are rasterized
on ingest and masks are never decoded to grids here.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .errors import ParseError, ValidationError
from .rle import mask_to_bbox, polygons_to_mask, rle_from_string
from .types import (
    BBox,
    Category,
    ClipPrediction,
    FrameGeometry,
    GtObject,
    QueryPrediction,
    RleMask,
    Track,
    VideoRecord,
)

SCHEMA_VERSION = 1

VIDEO_SCHEMAS = ("lvvis", "vidstg")

# Box/mask agreement tolerance: dataset boxes are floats, tight boxes of
# rasterized masks are integral, so only exact authoring round-trips pass.
_BOX_ATOL = 1e-6


def _load_json(path: str | Path) -> Any:
    data = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(data)
    except json.JSONDecodeError as exc:
        offset = len(data[: exc.pos].encode("utf-8"))
        raise ParseError(f"{path}: {exc.msg} at byte {offset}", offset=offset,
                         line=exc.lineno) from exc


def _require(mapping: dict, key: str, context: str) -> Any:
    if key not in mapping:
        raise ValidationError(f"{context}: missing required field {key!r}")
    return mapping[key]


def _parse_segmentation(raw: Any, height: int, width: int, context: str) -> RleMask:
    if isinstance(raw, dict):
        size = _require(raw, "size", context)
        counts = _require(raw, "counts", context)
        if list(size) != [height, width]:
            raise ValidationError(
                f"{context}: mask size {size} does not match frame size "
                f"[{height}, {width}]"
            )
        if isinstance(counts, str):
            return rle_from_string(counts, height, width)
        return RleMask(height=height, width=width, counts=tuple(int(c) for c in counts))
    if isinstance(raw, list):
        return polygons_to_mask(raw, height, width)
    raise ValidationError(f"{context}: unsupported segmentation payload {type(raw).__name__}")


def _parse_box(raw: Any, context: str) -> BBox:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise ValidationError(f"{context}: box must be [x, y, w, h], got {raw!r}")
    return BBox(*(float(v) for v in raw))


def _frame_geometry(box_raw, seg_raw, height, width, context) -> FrameGeometry | None:
    mask = None
    if seg_raw is not None:
        mask = _parse_segmentation(seg_raw, height, width, context)
    box = _parse_box(box_raw, context) if box_raw is not None else None
    if mask is not None:
        tight = mask_to_bbox(mask)
        if tight is None:
            # Empty foreground carries no detection for this frame.
            if box is not None:
                raise ValidationError(f"{context}: box given for an empty mask")
            return None
        if box is None:
            box = tight
        elif any(abs(a - b) > _BOX_ATOL for a, b in
                 zip(box.as_list(), tight.as_list())):
            raise ValidationError(
                f"{context}: box {box.as_list()} does not equal the mask's "
                f"tight box {tight.as_list()}"
            )
    if box is None:
        return None
    return FrameGeometry(box=box, mask=mask)


def _parse_categories(doc: dict) -> dict[int, Category]:
    cats: dict[int, Category] = {}
    for raw in doc.get("categories", []):
        cat = Category(id=int(_require(raw, "id", "category")),
                       name=str(_require(raw, "name", "category")))
        if cat.id in cats:
            raise ValidationError(f"duplicate category id {cat.id}")
        cats[cat.id] = cat
    return cats


def _category_for(cats: dict[int, Category], cat_id: int, context: str) -> Category:
    if cat_id not in cats:
        raise ValidationError(f"{context}: unknown category id {cat_id}")
    return cats[cat_id]


def parse_video_dataset(document: dict, schema: str = "lvvis") -> list[VideoRecord]:
    """Parse a video annotation document into validated records.

    The lvvis schema requires per-frame segmentations (boxes optional,
    derived from the masks when absent); the vidstg schema requires
    per-frame boxes and carries no masks. Captions are optional verbatim
    UTF-8 strings in both.
    """
    if schema not in VIDEO_SCHEMAS:
        raise ValidationError(f"unknown video schema {schema!r}")
    cats = _parse_categories(document)
    videos: dict[Any, VideoRecord] = {}
    for raw in _require(document, "videos", "document"):
        vid = _require(raw, "id", "video")
        if vid in videos:
            raise ValidationError(f"duplicate video id {vid}")
        length = int(_require(raw, "length", f"video {vid}"))
        record = VideoRecord(
            video_id=vid,
            frame_count=length,
            frame_size=(int(_require(raw, "height", f"video {vid}")),
                        int(_require(raw, "width", f"video {vid}"))),
            frame_files=list(raw["file_names"]) if raw.get("file_names") is not None else None,
        )
        videos[vid] = record
    for raw in _require(document, "annotations", "document"):
        ann_id = _require(raw, "id", "annotation")
        context = f"annotation {ann_id}"
        vid = _require(raw, "video_id", context)
        if vid not in videos:
            raise ValidationError(f"{context}: unknown video id {vid}")
        video = videos[vid]
        height, width = video.frame_size
        n = video.frame_count
        segs = raw.get("segmentations")
        boxes = raw.get("bboxes")
        if schema == "lvvis" and segs is None:
            raise ValidationError(f"{context}: lvvis annotations require segmentations")
        if schema == "vidstg":
            if boxes is None:
                raise ValidationError(f"{context}: vidstg annotations require bboxes")
            segs = None
        for name, seq in (("segmentations", segs), ("bboxes", boxes)):
            if seq is not None and len(seq) != n:
                raise ValidationError(
                    f"{context}: {name} has {len(seq)} entries for a {n}-frame video"
                )
        frames: dict[int, FrameGeometry] = {}
        for f in range(n):
            geom = _frame_geometry(
                boxes[f] if boxes is not None else None,
                segs[f] if segs is not None else None,
                height, width, f"{context} frame {f}",
            )
            if geom is not None:
                frames[f] = geom
        caption = raw.get("caption")
        if caption is not None and not isinstance(caption, str):
            raise ValidationError(f"{context}: caption must be a string")
        video.objects.append(GtObject(
            object_id=ann_id,
            category=_category_for(cats, int(_require(raw, "category_id", context)), context),
            frames=frames,
            caption=caption,
        ))
    return list(videos.values())


def parse_image_dataset(document: dict) -> list[VideoRecord]:
    """Parse an image annotation document into single-frame video records."""
    cats = _parse_categories(document)
    videos: dict[Any, VideoRecord] = {}
    for raw in _require(document, "images", "document"):
        img_id = _require(raw, "id", "image")
        if img_id in videos:
            raise ValidationError(f"duplicate image id {img_id}")
        videos[img_id] = VideoRecord(
            video_id=img_id,
            frame_count=1,
            frame_size=(int(_require(raw, "height", f"image {img_id}")),
                        int(_require(raw, "width", f"image {img_id}"))),
            frame_files=[raw["file_name"]] if raw.get("file_name") is not None else None,
        )
    for raw in _require(document, "annotations", "document"):
        ann_id = _require(raw, "id", "annotation")
        context = f"annotation {ann_id}"
        img_id = _require(raw, "image_id", context)
        if img_id not in videos:
            raise ValidationError(f"{context}: unknown image id {img_id}")
        video = videos[img_id]
        height, width = video.frame_size
        geom = _frame_geometry(raw.get("bbox"), raw.get("segmentation"),
                               height, width, context)
        frames = {0: geom} if geom is not None else {}
        caption = raw.get("caption")
        if caption is not None and not isinstance(caption, str):
            raise ValidationError(f"{context}: caption must be a string")
        video.objects.append(GtObject(
            object_id=ann_id,
            category=_category_for(cats, int(_require(raw, "category_id", context)), context),
            frames=frames,
            caption=caption,
        ))
    return list(videos.values())


def load_video_dataset(path: str | Path, schema: str = "lvvis") -> list[VideoRecord]:
    return parse_video_dataset(_load_json(path), schema=schema)


def load_image_dataset(path: str | Path) -> list[VideoRecord]:
    return parse_image_dataset(_load_json(path))


def _mask_payload(mask: RleMask) -> dict:
    return {"size": [mask.height, mask.width], "counts": list(mask.counts)}


def _records_to_video_document(records: list[VideoRecord], require_captions: bool) -> dict:
    videos = []
    annotations = []
    categories: dict[int, Category] = {}
    for record in records:
        entry: dict[str, Any] = {
            "id": record.video_id,
            "height": record.frame_size[0],
            "width": record.frame_size[1],
            "length": record.frame_count,
        }
        if record.frame_files is not None:
            entry["file_names"] = list(record.frame_files)
        videos.append(entry)
        for obj in record.objects:
            if require_captions and obj.caption is None:
                raise ValidationError(
                    f"video {record.video_id} object {obj.object_id} has no caption"
                )
            categories.setdefault(obj.category.id, obj.category)
            segs: list | None = [None] * record.frame_count
            boxes: list = [None] * record.frame_count
            any_mask = False
            for f, geom in obj.frames.items():
                boxes[f] = geom.box.as_list()
                if geom.mask is not None:
                    segs[f] = _mask_payload(geom.mask)
                    any_mask = True
            ann: dict[str, Any] = {
                "id": obj.object_id,
                "video_id": record.video_id,
                "category_id": obj.category.id,
                "bboxes": boxes,
            }
            if any_mask:
                ann["segmentations"] = segs
            if obj.caption is not None:
                ann["caption"] = obj.caption
            annotations.append(ann)
    return {
        "schema_version": SCHEMA_VERSION,
        "videos": videos,
        "annotations": annotations,
        "categories": [{"id": c.id, "name": c.name}
                       for c in sorted(categories.values(), key=lambda c: c.id)],
    }


def _records_to_image_document(records: list[VideoRecord], require_captions: bool) -> dict:
    images = []
    annotations = []
    categories: dict[int, Category] = {}
    for record in records:
        if record.frame_count != 1:
            raise ValidationError(
                f"video {record.video_id} has {record.frame_count} frames; the image "
                "shape only holds single-frame records"
            )
        entry: dict[str, Any] = {
            "id": record.video_id,
            "height": record.frame_size[0],
            "width": record.frame_size[1],
        }
        if record.frame_files is not None:
            entry["file_name"] = record.frame_files[0]
        images.append(entry)
        for obj in record.objects:
            if require_captions and obj.caption is None:
                raise ValidationError(
                    f"image {record.video_id} object {obj.object_id} has no caption"
                )
            categories.setdefault(obj.category.id, obj.category)
            ann: dict[str, Any] = {
                "id": obj.object_id,
                "image_id": record.video_id,
                "category_id": obj.category.id,
            }
            geom = obj.frames.get(0)
            if geom is not None:
                ann["bbox"] = geom.box.as_list()
                if geom.mask is not None:
                    ann["segmentation"] = _mask_payload(geom.mask)
            if obj.caption is not None:
                ann["caption"] = obj.caption
            annotations.append(ann)
    return {
        "schema_version": SCHEMA_VERSION,
        "images": images,
        "annotations": annotations,
        "categories": [{"id": c.id, "name": c.name}
                       for c in sorted(categories.values(), key=lambda c: c.id)],
    }


def write_captioned_dataset(records: list[VideoRecord], destination: str | Path,
                            shape: str = "video", *, info: dict | None = None,
                            require_captions: bool = True) -> int:
    """Serialize records with their captions; returns the byte count.

    Every object must carry a caption unless require_captions is off.
    The written file re-parses to an equal record list, captions byte
    for byte.
    """
    if shape == "video":
        document = _records_to_video_document(records, require_captions)
    elif shape == "image":
        document = _records_to_image_document(records, require_captions)
    else:
        raise ValidationError(f"unknown output shape {shape!r}")
    if info:
        document["info"] = info
    payload = json.dumps(document, ensure_ascii=False, sort_keys=True, indent=2)
    data = payload.encode("utf-8")
    Path(destination).write_bytes(data)
    return len(data)


def parse_predictions(lines: Iterable[str]) -> dict[Any, list[ClipPrediction]]:
    """Parse JSON-lines clip predictions grouped and validated per video.

    Each line holds one clip: video_id, clip_index, first_frame,
    last_frame, and queries with flat embedding arrays, class scores,
    objectness, per-frame boxes, and optional per-frame masks.
    """
    per_video: dict[Any, dict[int, ClipPrediction]] = {}
    embed_dim: dict[Any, int] = {}
    offset = 0
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped:
            offset += len(line.encode("utf-8"))
            continue
        try:
            raw = json.loads(stripped)
        except json.JSONDecodeError as exc:
            at = offset + len(line[: exc.pos].encode("utf-8"))
            raise ParseError(f"line {lineno}: {exc.msg} at byte {at}",
                             offset=at, line=lineno) from exc
        offset += len(line.encode("utf-8"))
        context = f"line {lineno}"
        vid = _require(raw, "video_id", context)
        clip_index = int(_require(raw, "clip_index", context))
        first = int(_require(raw, "first_frame", context))
        last = int(_require(raw, "last_frame", context))
        queries = []
        for q, q_raw in enumerate(_require(raw, "queries", context)):
            q_context = f"{context} query {q}"
            embedding = _require(q_raw, "embedding", q_context)
            if vid in embed_dim and len(embedding) != embed_dim[vid]:
                raise ValidationError(
                    f"{q_context}: embedding dimension {len(embedding)} differs "
                    f"from {embed_dim[vid]} seen earlier in video {vid}"
                )
            embed_dim.setdefault(vid, len(embedding))
            boxes = [_parse_box(b, q_context) for b in _require(q_raw, "boxes", q_context)]
            masks = None
            if q_raw.get("masks") is not None:
                masks = []
                span_frames = last - first + 1
                for m in q_raw["masks"]:
                    if m is None:
                        masks.append(None)
                    else:
                        size = _require(m, "size", q_context)
                        masks.append(_parse_segmentation(m, int(size[0]), int(size[1]), q_context))
                if len(masks) != span_frames:
                    raise ValidationError(
                        f"{q_context}: {len(masks)} masks for a {span_frames}-frame span"
                    )
            try:
                queries.append(QueryPrediction(
                    embedding=embedding,
                    class_scores=_require(q_raw, "class_scores", q_context),
                    objectness=float(_require(q_raw, "objectness", q_context)),
                    boxes=boxes,
                    masks=masks,
                ))
            except ValidationError as exc:
                raise ValidationError(f"{q_context}: {exc}") from exc
        try:
            clip = ClipPrediction(clip_index=clip_index, first_frame=first,
                                  last_frame=last, queries=queries)
        except ValidationError as exc:
            raise ValidationError(f"{context}: {exc}") from exc
        clips = per_video.setdefault(vid, {})
        if clip.clip_index in clips:
            raise ValidationError(f"{context}: duplicate clip {clip.clip_index} for video {vid}")
        clips[clip.clip_index] = clip
    result: dict[Any, list[ClipPrediction]] = {}
    for vid, clips in per_video.items():
        ordered = [clips[i] for i in sorted(clips)]
        _validate_clip_sequence(vid, ordered)
        result[vid] = ordered
    return result


def _validate_clip_sequence(vid: Any, clips: list[ClipPrediction]) -> None:
    span = clips[0].span
    for pos, clip in enumerate(clips):
        if clip.clip_index != pos:
            raise ValidationError(
                f"video {vid}: clip indices not contiguous from 0 "
                f"(expected {pos}, found {clip.clip_index})"
            )
        if clip.span != span:
            raise ValidationError(
                f"video {vid} clip {clip.clip_index}: span {clip.span} differs "
                f"from the video's clip length {span}"
            )
        expected_first = pos * span
        if clip.first_frame != expected_first:
            raise ValidationError(
                f"video {vid} clip {clip.clip_index}: first frame {clip.first_frame}, "
                f"expected {expected_first}"
            )


def load_predictions(path: str | Path) -> dict[Any, list[ClipPrediction]]:
    with open(path, encoding="utf-8") as handle:
        return parse_predictions(handle)


def write_tracks(tracks_by_video: dict[Any, list[Track]], destination: str | Path) -> int:
    """Serialize tracker output; returns the byte count."""
    videos = []
    for vid in tracks_by_video:
        entries = []
        for track in tracks_by_video[vid]:
            frames = []
            for f in sorted(track.frames):
                geom = track.frames[f]
                frame_entry: dict[str, Any] = {"frame": f, "box": geom.box.as_list()}
                if geom.mask is not None:
                    frame_entry["mask"] = _mask_payload(geom.mask)
                frames.append(frame_entry)
            entry: dict[str, Any] = {
                "track_id": track.track_id,
                "clips": [{"clip": c, "query": track.clips[c],
                           "score": track.scores.get(c)}
                          for c in track.clip_indices()],
                "frames": frames,
            }
            if track.caption is not None:
                entry["caption"] = track.caption
            if track.embedding is not None:
                entry["embedding"] = [float(v) for v in track.embedding]
            entries.append(entry)
        videos.append({"video_id": vid, "tracks": entries})
    document = {"schema_version": SCHEMA_VERSION, "videos": videos}
    data = json.dumps(document, ensure_ascii=False, sort_keys=True, indent=2).encode("utf-8")
    Path(destination).write_bytes(data)
    return len(data)


def read_tracks(path: str | Path) -> dict[Any, list[Track]]:
    """Load tracker output written by write_tracks."""
    document = _load_json(path)
    result: dict[Any, list[Track]] = {}
    for v_raw in _require(document, "videos", "tracks document"):
        vid = _require(v_raw, "video_id", "tracks video")
        tracks = []
        for t_raw in _require(v_raw, "tracks", f"video {vid}"):
            context = f"video {vid} track {t_raw.get('track_id')}"
            clips: dict[int, int] = {}
            scores: dict[int, float] = {}
            for c_raw in t_raw.get("clips", []):
                clip = int(_require(c_raw, "clip", context))
                clips[clip] = int(_require(c_raw, "query", context))
                if c_raw.get("score") is not None:
                    scores[clip] = float(c_raw["score"])
            frames: dict[int, FrameGeometry] = {}
            for f_raw in t_raw.get("frames", []):
                f = int(_require(f_raw, "frame", context))
                box = _parse_box(_require(f_raw, "box", context), context)
                mask = None
                if f_raw.get("mask") is not None:
                    size = _require(f_raw["mask"], "size", context)
                    mask = _parse_segmentation(f_raw["mask"], int(size[0]), int(size[1]),
                                               context)
                frames[f] = FrameGeometry(box=box, mask=mask)
            embedding = t_raw.get("embedding")
            tracks.append(Track(
                track_id=int(_require(t_raw, "track_id", context)),
                clips=clips,
                scores=scores,
                frames=frames,
                caption=t_raw.get("caption"),
                embedding=np.asarray(embedding, dtype=np.float64)
                if embedding is not None else None,
            ))
        result[vid] = tracks
    return result
