"""Core domain types shared by the datagen, tracking, and evaluation layers.

Values are validated once at construction; afterwards instances are
treated as immutable and may be shared across threads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CodecError, InputError, ValidationError


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in absolute pixels, (x, y) top-left corner."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        # Normalize integer inputs so equality and serialization are
        # representation-independent.
        for name in ("x", "y", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for v in (self.x, self.y, self.w, self.h):
            if not math.isfinite(v):
                raise InputError(f"non-finite box field in {self!r}")
        if self.w < 0 or self.h < 0:
            raise InputError(f"negative box extent in {self!r}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class RleMask:
    """Column-major run-length encoded binary mask.

    Runs alternate background/foreground starting with background; only
    counts[0] may be zero and the counts must sum to height * width.
    """

    height: int
    width: int
    counts: tuple[int, ...]

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise CodecError(f"mask dimensions must be positive, got {self.height}x{self.width}")
        if not self.counts:
            raise CodecError("empty run list")
        for i, c in enumerate(self.counts):
            if not isinstance(c, int) or isinstance(c, bool):
                raise CodecError(f"run count at index {i} is not an integer: {c!r}")
            if c < 0:
                raise CodecError(f"negative run count at index {i}")
            if c == 0 and i != 0:
                raise CodecError(f"zero-length interior run at index {i}")
        total = sum(self.counts)
        if total != self.height * self.width:
            raise CodecError(
                f"run counts sum to {total}, expected {self.height * self.width}"
            )

    @property
    def area(self) -> int:
        """Foreground pixel count (foreground runs sit at odd indices)."""
        return sum(self.counts[1::2])


@dataclass(frozen=True)
class Category:
    """Object class label."""

    id: int
    name: str

    def __post_init__(self):
        if not self.name:
            raise ValidationError(f"category {self.id} has an empty name")


@dataclass(frozen=True)
class FrameGeometry:
    """Geometry of one object in one frame; the box is always present."""

    box: BBox
    mask: RleMask | None = None


@dataclass
class GtObject:
    """One annotated object trajectory within a video."""

    object_id: int | str
    category: Category
    frames: dict[int, FrameGeometry]
    caption: str | None = None

    def frame_indices(self) -> list[int]:
        return sorted(self.frames)


@dataclass
class VideoRecord:
    """One video with its annotated objects.

    frame_size is (height, width); frame_files, when present, maps each
    frame index to an image path relative to some frames root.
    """

    video_id: int | str
    frame_count: int
    frame_size: tuple[int, int]
    objects: list[GtObject] = field(default_factory=list)
    frame_files: list[str] | None = None

    def __post_init__(self):
        if self.frame_count < 1:
            raise ValidationError(f"video {self.video_id}: frame count must be >= 1")
        h, w = self.frame_size
        if h < 1 or w < 1:
            raise ValidationError(f"video {self.video_id}: frame size must be positive")
        if self.frame_files is not None and len(self.frame_files) != self.frame_count:
            raise ValidationError(
                f"video {self.video_id}: {len(self.frame_files)} frame files "
                f"for {self.frame_count} frames"
            )
        for obj in self.objects:
            for f in obj.frames:
                if not 0 <= f < self.frame_count:
                    raise ValidationError(
                        f"video {self.video_id} object {obj.object_id}: "
                        f"frame index {f} outside 0..{self.frame_count - 1}"
                    )


@dataclass(eq=False)
class QueryPrediction:
    """One detected object query within a clip.

    boxes has one entry per clip frame; masks, when present, is aligned
    with boxes and may hold None for frames without a mask.
    """

    embedding: np.ndarray
    class_scores: np.ndarray
    objectness: float
    boxes: list[BBox]
    masks: list[RleMask | None] | None = None

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        self.class_scores = np.asarray(self.class_scores, dtype=np.float64)
        if self.embedding.ndim != 1 or self.embedding.size == 0:
            raise ValidationError("query embedding must be a non-empty flat vector")
        if self.class_scores.ndim != 1 or self.class_scores.size == 0:
            raise ValidationError("query class scores must be a non-empty flat vector")
        if np.any(self.class_scores < 0) or np.any(self.class_scores > 1):
            raise ValidationError("class scores must lie in [0, 1]")
        if not 0.0 <= self.objectness <= 1.0:
            raise ValidationError(f"objectness {self.objectness} outside [0, 1]")
        if not self.boxes:
            raise ValidationError("query carries no per-frame boxes")
        if self.masks is not None and len(self.masks) != len(self.boxes):
            raise ValidationError("per-frame masks not aligned with boxes")


@dataclass(eq=False)
class ClipPrediction:
    """Model output for one clip of consecutive frames."""

    clip_index: int
    first_frame: int
    last_frame: int
    queries: list[QueryPrediction]

    def __post_init__(self):
        if self.clip_index < 0:
            raise ValidationError(f"negative clip index {self.clip_index}")
        if self.last_frame < self.first_frame:
            raise ValidationError(
                f"clip {self.clip_index}: span [{self.first_frame}, {self.last_frame}] is empty"
            )
        span = self.span
        for q, query in enumerate(self.queries):
            if len(query.boxes) != span:
                raise ValidationError(
                    f"clip {self.clip_index} query {q}: {len(query.boxes)} boxes "
                    f"for a {span}-frame span"
                )

    @property
    def span(self) -> int:
        return self.last_frame - self.first_frame + 1


@dataclass(eq=False)
class Track:
    """One object trajectory assembled by the tracker.

    clips maps clip index -> original query index within that clip;
    scores maps clip index -> fused detection score; frames maps frame
    index -> geometry taken from the assigned queries.
    """

    track_id: int
    clips: dict[int, int] = field(default_factory=dict)
    scores: dict[int, float] = field(default_factory=dict)
    frames: dict[int, FrameGeometry] = field(default_factory=dict)
    caption: str | None = None
    embedding: np.ndarray | None = None

    def clip_indices(self) -> list[int]:
        return sorted(self.clips)


@dataclass
class VideoEvalResult:
    """Per-video slice of an evaluation report, components in [0, 100]."""

    video_id: int | str
    det: float
    ass: float
    cap: float
    chota: float
    det_curve: list[float]
    ass_curve: list[float]
    cap_curve: list[float]


@dataclass
class EvalReport:
    """Evaluation output: per-threshold curves plus averaged components.

    All components live on the [0, 100] scale and chota must equal the
    geometric mean of (det, ass, cap) to within 1e-9 relative.
    """

    geometry: str
    alphas: list[float]
    det: float
    ass: float
    cap: float
    chota: float
    det_curve: list[float]
    ass_curve: list[float]
    cap_curve: list[float]
    videos: list[VideoEvalResult] = field(default_factory=list)

    def __post_init__(self):
        for name, value in (("det", self.det), ("ass", self.ass),
                            ("cap", self.cap), ("chota", self.chota)):
            if not 0.0 <= value <= 100.0 + 1e-9:
                raise ValidationError(f"{name} component {value} outside [0, 100]")
        expected = combine_components(self.det, self.ass, self.cap)
        if abs(self.chota - expected) > 1e-9 * max(1.0, abs(expected)):
            raise ValidationError(
                f"chota {self.chota} does not equal the geometric mean {expected}"
            )


def combine_components(det: float, ass: float, cap: float) -> float:
    """Combine the three accuracy components into the final score.

    Inputs and output are on the same scale; the result is the cube root
    of the product, so any zero component forces a zero total.
    """
    for name, value in (("det", det), ("ass", ass), ("cap", cap)):
        if value < 0:
            raise InputError(f"negative {name} component {value}")
    return float((det * ass * cap) ** (1.0 / 3.0))
