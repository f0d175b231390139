"""Dense video object captioning toolkit.

Three pillars: synthetic caption generation for annotated videos
(datagen), clip-to-video tracking of query embeddings (tracker), and
combined detection/association/captioning evaluation (chota). Shared
plumbing: dataset parsing and serialization (datasets), run-length mask
utilities (rle), optimal assignment (assignment), and consensus caption
similarity (capsim).
"""
from .assignment import CostMatrix, solve_thresholded
from .capsim import CiderBackend, cider_score, similarity
from .chota import DEFAULT_ALPHAS, EvalConfig, evaluate, report_to_dict
from .datagen import (DrawStyle, PromptOptions, build_prompt, draw_annotation,
                      generate_captions)
from .datasets import (load_image_dataset, load_predictions, load_video_dataset,
                       read_tracks, write_captioned_dataset, write_tracks)
from .errors import (CodecError, DegenerateWeightsError, DvocError,
                     EvaluationError, GeometryError, InputError, ParseError,
                     PermanentProviderError, TransientProviderError,
                     ValidationError)
from .rle import (mask_area, mask_iou, mask_to_bbox, polygons_to_mask,
                  rle_decode, rle_encode, rle_from_string, rle_to_string)
from .tracker import (PRESETS, AggregationConfig, MemoryBank, TrackerConfig,
                      aggregate_track, fuse_scores, match_clip, track_video)
from .types import (BBox, Category, ClipPrediction, EvalReport, FrameGeometry,
                    GtObject, QueryPrediction, RleMask, Track, VideoRecord,
                    combine_components)
from .vlm import JsonVlmEndpoint, RequestPolicy, TokenBucket, VlmClient

__version__ = "0.1.0"

__all__ = [
    "AggregationConfig", "BBox", "Category", "CiderBackend", "ClipPrediction",
    "CodecError", "CostMatrix", "DEFAULT_ALPHAS", "DegenerateWeightsError",
    "DrawStyle", "DvocError", "EvalConfig", "EvalReport", "EvaluationError",
    "FrameGeometry", "GeometryError", "GtObject", "InputError",
    "JsonVlmEndpoint", "MemoryBank", "PRESETS", "ParseError",
    "PermanentProviderError", "PromptOptions", "QueryPrediction",
    "RequestPolicy", "RleMask", "TokenBucket", "Track", "TrackerConfig",
    "TransientProviderError", "ValidationError", "VideoRecord", "VlmClient",
    "aggregate_track", "build_prompt", "cider_score", "combine_components",
    "draw_annotation", "evaluate", "fuse_scores", "generate_captions",
    "load_image_dataset", "load_predictions", "load_video_dataset",
    "mask_area", "mask_iou", "mask_to_bbox", "match_clip", "polygons_to_mask",
    "read_tracks", "report_to_dict", "rle_decode", "rle_encode",
    "rle_from_string", "rle_to_string", "similarity", "solve_thresholded",
    "track_video", "write_captioned_dataset", "write_tracks",
]
