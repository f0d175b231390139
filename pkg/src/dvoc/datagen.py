"""Synthetic caption generation for annotated videos.

Pipeline, one object at a time:

1. sample a handful of frames uniformly across the video;
2. draw the object's geometry onto those frames (box stroke or mask
   boundary) so the captioner knows which object is queried;
3. assemble a versioned system prompt plus a per-object user prompt
   (category, per-frame coordinates, optional pixel area and the other
   objects' category names);
4. request a caption, retrying transport hiccups and rejecting captions
   that leak the visual markup, with one corrective retry;
5. merge results back into the dataset and report failures.

generate_captions is resumable: objects that already carry captions are
never re-requested.
"""
from __future__ import annotations

import hashlib
import io
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Any, Callable, Literal, Sequence

import numpy as np
from PIL import Image

from .errors import CaptionSkip, DvocError, InputError, PermanentProviderError
from .rle import rle_decode
from .sampling import round_half_up, uniform_sample_indices
from .types import FrameGeometry, GtObject, VideoRecord
from .vlm import RequestPolicy, VlmClient, VlmRequest, complete_with_retries

log = logging.getLogger(__name__)

DEFAULT_FRAME_SAMPLES = 4
MAX_IMAGE_SIDE = 1024

VisualMode = Literal["box", "mask-boundary"]
CueMode = Literal["bbox", "center"]

# FrameLoader(video, frame index) -> RGB uint8 array of shape (H, W, 3)
FrameLoader = Callable[[VideoRecord, int], np.ndarray]


class DegenerateGeometryWarning(UserWarning):
    """Raised as a warning when a draw request has nothing to draw."""


@dataclass(frozen=True)
class DrawStyle:
    color: tuple[int, int, int] = (255, 0, 0)
    stroke: int = 3

    def __post_init__(self):
        if self.stroke < 1:
            raise InputError(f"stroke width must be >= 1, got {self.stroke}")
        if len(self.color) != 3 or any(not 0 <= c <= 255 for c in self.color):
            raise InputError(f"color must be an RGB triple in 0..255, got {self.color}")


@dataclass(frozen=True)
class PromptOptions:
    """What goes into the prompt, mirroring the ablatable options."""

    visual_mode: VisualMode = "box"
    cue: CueMode = "bbox"
    include_area: bool = True
    include_other_labels: bool = True
    few_shot_examples: int = 1
    frame_samples: int = DEFAULT_FRAME_SAMPLES

    def __post_init__(self):
        if self.visual_mode not in ("box", "mask-boundary"):
            raise InputError(f"unknown visual mode {self.visual_mode!r}")
        if self.cue not in ("bbox", "center"):
            raise InputError(f"unknown cue mode {self.cue!r}")
        if self.frame_samples < 1:
            raise InputError(f"frame_samples must be >= 1, got {self.frame_samples}")
        if not 0 <= self.few_shot_examples <= len(FEW_SHOT_BANK):
            raise InputError(
                f"few_shot_examples must lie in 0..{len(FEW_SHOT_BANK)}"
            )


@dataclass(frozen=True)
class PromptBundle:
    """Everything one captioning request needs."""

    system_text: str
    user_text: str
    visual_frames: tuple[np.ndarray, ...]
    sampled_frames: tuple[int, ...]


TEMPLATE_VERSION = 1

_SYSTEM_INSTRUCTIONS = (
    "You caption a single queried object in a video. You are shown a few "
    "frames sampled from the video, and the queried object is marked in "
    "each frame where it is visible."
)

_SYSTEM_RULES = (
    "Describe only the queried object: what it is, what it does, and what "
    "it interacts with.",
    "Do not mention the bounding boxes in the caption.",
    "Do not mention the markings, the highlighting, the frames, or the camera.",
    "Write exactly one sentence in plain present-tense English.",
)

_SYSTEM_FORMAT = "Reply with the caption sentence only, without quotes or preamble."

FEW_SHOT_BANK = (
    "A brown dog sprints across the lawn and leaps to catch a frisbee.",
    "A woman in a red coat pushes a stroller along the waterfront.",
    "A white delivery van reverses slowly into a narrow loading dock.",
)

# Captions must not leak the visual markup; matched case-insensitively.
BANNED_PHRASES = ("bounding box", "rectangle", "highlighted")

_CORRECTIVE_REMINDER = (
    "The previous caption mentioned the visual markup. Rewrite it without "
    "referring to boxes, rectangles, outlines, or highlighting."
)


def render_system_text(few_shot_examples: int = 1) -> str:
    lines = [_SYSTEM_INSTRUCTIONS, "", "Rules:"]
    lines.extend(f"- {rule}" for rule in _SYSTEM_RULES)
    lines.extend(["", _SYSTEM_FORMAT])
    if few_shot_examples > 0:
        lines.extend(["", "Example captions:"])
        lines.extend(f"- {ex}" for ex in FEW_SHOT_BANK[:few_shot_examples])
    return "\n".join(lines)


def template_fingerprint() -> dict:
    """Template identity recorded alongside generated datasets."""
    canonical = render_system_text(len(FEW_SHOT_BANK))
    return {
        "version": TEMPLATE_VERSION,
        "sha256": hashlib.sha256(canonical.encode("utf-8")).hexdigest(),
    }


def sample_frames(frame_count: int, count: int = DEFAULT_FRAME_SAMPLES) -> list[int]:
    """Frame indices spread uniformly over the video, duplicates removed."""
    return uniform_sample_indices(frame_count, count)


def draw_annotation(frame: np.ndarray, geometry: FrameGeometry,
                    mode: VisualMode = "box",
                    style: DrawStyle = DrawStyle()) -> np.ndarray:
    """Return a copy of the frame with the object's geometry drawn on it.

    Box mode paints the rectangle's stroke band inward from the box
    boundary, clipped to the frame. Mask-boundary mode paints the
    foreground pixels that touch background (4-neighborhood, frame edges
    count as background), dilated to the stroke width. Degenerate
    geometry draws nothing and raises DegenerateGeometryWarning.
    """
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3 or frame.dtype != np.uint8:
        raise InputError(f"frame must be uint8 RGB of shape (H, W, 3), got "
                         f"{frame.dtype} {frame.shape}")
    out = frame.copy()
    height, width = frame.shape[:2]
    color = np.asarray(style.color, dtype=np.uint8)
    if mode == "box":
        modified = _box_stroke_mask(geometry.box, height, width, style.stroke)
    elif mode == "mask-boundary":
        if geometry.mask is None:
            raise InputError("mask-boundary mode requires a mask")
        if (geometry.mask.height, geometry.mask.width) != (height, width):
            raise InputError(
                f"mask is {geometry.mask.height}x{geometry.mask.width} but the "
                f"frame is {height}x{width}"
            )
        modified = _boundary_stroke_mask(rle_decode(geometry.mask), style.stroke)
    else:
        raise InputError(f"unknown visual mode {mode!r}")
    if not modified.any():
        warnings.warn("annotation geometry is degenerate; nothing drawn",
                      DegenerateGeometryWarning, stacklevel=2)
        return out
    out[modified] = color
    return out


def _box_stroke_mask(box, height: int, width: int, stroke: int) -> np.ndarray:
    """Bool mask of the stroke band: the box minus its interior shrunk by
    the stroke width, intersected with the frame."""
    modified = np.zeros((height, width), dtype=bool)
    if box.w <= 0 or box.h <= 0:
        return modified
    x0 = round_half_up(box.x)
    y0 = round_half_up(box.y)
    x1 = round_half_up(box.x + box.w)  # exclusive
    y1 = round_half_up(box.y + box.h)
    ox0, oy0 = max(0, x0), max(0, y0)
    ox1, oy1 = min(width, x1), min(height, y1)
    if ox0 >= ox1 or oy0 >= oy1:
        return modified
    modified[oy0:oy1, ox0:ox1] = True
    ix0, iy0 = max(0, x0 + stroke), max(0, y0 + stroke)
    ix1, iy1 = min(width, x1 - stroke), min(height, y1 - stroke)
    if ix0 < ix1 and iy0 < iy1:
        modified[iy0:iy1, ix0:ix1] = False
    return modified


def _boundary_stroke_mask(grid: np.ndarray, stroke: int) -> np.ndarray:
    """Foreground/background boundary of a bool grid, dilated to stroke."""
    padded = np.pad(grid, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    boundary = grid & ~interior
    radius = (stroke - 1) // 2
    if radius == 0 or not boundary.any():
        return boundary
    out = np.zeros_like(boundary)
    height, width = boundary.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            src = boundary[max(0, -dy):height - max(0, dy),
                           max(0, -dx):width - max(0, dx)]
            out[max(0, dy):height - max(0, -dy),
                max(0, dx):width - max(0, -dx)] |= src
    return out


def _format_point(value: float) -> int:
    return round_half_up(value)


def _frame_line(display_index: int, geometry: FrameGeometry,
                opts: PromptOptions) -> str:
    box = geometry.box
    if opts.cue == "center":
        cue = (f"center point ({_format_point(box.x + box.w / 2)}, "
               f"{_format_point(box.y + box.h / 2)})")
    else:
        cue = (f"box corners ({_format_point(box.x)}, {_format_point(box.y)}) to "
               f"({_format_point(box.x + box.w)}, {_format_point(box.y + box.h)})")
    line = f"Frame {display_index}: {cue}"
    if opts.include_area:
        area = geometry.mask.area if geometry.mask is not None else box.area
        line += f", area {round_half_up(float(area))} px"
    return line + "."


def build_prompt(video: VideoRecord, obj: GtObject, opts: PromptOptions,
                 frame_loader: FrameLoader,
                 style: DrawStyle = DrawStyle()) -> PromptBundle:
    """Assemble the full prompt for one object of one video.

    The text parts are deterministic byte for byte for identical inputs.
    Raises CaptionSkip when the object appears on none of the sampled
    frames.
    """
    sampled = sample_frames(video.frame_count, opts.frame_samples)
    drawable = [f for f in sampled if f in obj.frames]
    if not drawable:
        raise CaptionSkip(
            f"video {video.video_id} object {obj.object_id}: absent from all "
            f"sampled frames {sampled}"
        )
    visual_frames = []
    for f in sampled:
        frame = frame_loader(video, f)
        if f in obj.frames:
            frame = draw_annotation(frame, obj.frames[f], opts.visual_mode, style)
        else:
            frame = np.asarray(frame).copy()
        visual_frames.append(frame)

    lines = [f"The queried object is a {obj.category.name}.",
             f"You see {len(sampled)} frames sampled from a "
             f"{video.frame_count}-frame video."]
    for display, f in enumerate(sampled, start=1):
        if f in obj.frames:
            lines.append(_frame_line(display, obj.frames[f], opts))
        else:
            lines.append(f"Frame {display}: the queried object is not visible.")
    if opts.include_other_labels:
        others = sorted({o.category.name for o in video.objects
                         if o.object_id != obj.object_id})
        if others:
            lines.append("Other objects present in the video: " + ", ".join(others) + ".")
    return PromptBundle(
        system_text=render_system_text(opts.few_shot_examples),
        user_text="\n".join(lines),
        visual_frames=tuple(visual_frames),
        sampled_frames=tuple(sampled),
    )


def encode_frame_image(frame: np.ndarray, longest_side: int = MAX_IMAGE_SIDE,
                       quality: int = 90) -> bytes:
    """Re-encode a frame as JPEG with its longest side capped."""
    image = Image.fromarray(np.asarray(frame), mode="RGB")
    largest = max(image.size)
    if largest > longest_side:
        scale = longest_side / largest
        image = image.resize(
            (max(1, round_half_up(image.size[0] * scale)),
             max(1, round_half_up(image.size[1] * scale))),
            resample=Image.LANCZOS,
        )
    buffer = io.BytesIO()
    image.save(buffer, format="JPEG", quality=quality)
    return buffer.getvalue()


def _mentions_markup(caption: str) -> bool:
    lowered = caption.lower()
    return any(phrase in lowered for phrase in BANNED_PHRASES)


def _tidy(caption: str) -> str:
    return " ".join(caption.split())


def request_caption(client: VlmClient, bundle: PromptBundle, model: str,
                    policy: RequestPolicy | None = None,
                    sleep=None) -> str:
    """Request one caption and post-filter it.

    A caption that mentions the visual markup triggers exactly one
    corrective retry; a second offense is a permanent failure carrying
    the rejected caption.
    """
    images = tuple(encode_frame_image(f) for f in bundle.visual_frames)
    kwargs = {} if sleep is None else {"sleep": sleep}

    def ask(user_text: str) -> str:
        request = VlmRequest(model=model,
                             text_parts=(bundle.system_text, user_text),
                             image_parts=images)
        response = complete_with_retries(client, request, policy, **kwargs)
        return _tidy(response.caption)

    caption = ask(bundle.user_text)
    if not _mentions_markup(caption):
        return caption
    log.info("caption mentions the markup, retrying once: %r", caption)
    caption = ask(bundle.user_text + "\n" + _CORRECTIVE_REMINDER)
    if _mentions_markup(caption):
        raise PermanentProviderError(
            f"caption still mentions the visual markup after a corrective "
            f"retry: {caption!r}"
        )
    return caption


def generate_captions(records: Sequence[VideoRecord], client: VlmClient, model: str,
                      opts: PromptOptions, frame_loader: FrameLoader,
                      policy: RequestPolicy | None = None,
                      max_inflight: int = 4,
                      style: DrawStyle = DrawStyle(),
                      sleep=None) -> tuple[list[VideoRecord], dict]:
    """Caption every object that does not have a caption yet.

    Returns new records (inputs are not mutated) plus a manifest with
    counts, the prompt template fingerprint, and one entry per failed
    object. Requests run on a bounded worker pool; objects that already
    carry captions are skipped, which makes interrupted runs resumable
    with zero duplicate requests.
    """
    if max_inflight < 1:
        raise InputError(f"max_inflight must be >= 1, got {max_inflight}")
    tasks: list[tuple[VideoRecord, GtObject]] = []
    skipped = 0
    for video in records:
        for obj in video.objects:
            if obj.caption is None:
                tasks.append((video, obj))
            else:
                skipped += 1

    def caption_one(task: tuple[VideoRecord, GtObject]):
        video, obj = task
        bundle = build_prompt(video, obj, opts, frame_loader, style)
        return request_caption(client, bundle, model, policy, sleep=sleep)

    captions: dict[tuple[Any, Any], str] = {}
    failures: list[dict] = []
    if tasks:
        with ThreadPoolExecutor(max_workers=max_inflight) as pool:
            outcomes = pool.map(_guarded(caption_one), tasks)
            for (video, obj), outcome in zip(tasks, outcomes):
                if isinstance(outcome, DvocError):
                    failures.append({
                        "video_id": video.video_id,
                        "object_id": obj.object_id,
                        "error": type(outcome).__name__,
                        "message": str(outcome),
                    })
                else:
                    captions[(video.video_id, obj.object_id)] = outcome
    failures.sort(key=lambda f: (str(f["video_id"]), str(f["object_id"])))

    new_records = []
    for video in records:
        objects = []
        for obj in video.objects:
            caption = captions.get((video.video_id, obj.object_id))
            objects.append(replace(obj, caption=caption) if caption is not None else obj)
        new_records.append(replace(video, objects=objects))
    manifest = {
        "schema_version": 1,
        "requested": len(tasks),
        "captioned": len(captions),
        "skipped_existing": skipped,
        "failures": failures,
        "prompt_template": template_fingerprint(),
    }
    return new_records, manifest


def _guarded(fn):
    """Map worker: return toolkit errors as values so one failed object
    never aborts the whole run."""
    def run(task):
        try:
            return fn(task)
        except DvocError as exc:
            return exc
    return run
