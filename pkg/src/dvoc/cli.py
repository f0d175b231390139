"""Command-line entry point: the pipeline stages as subcommands.

Subcommands: ingest, generate-captions, track, evaluate, capsim, report.
Settings layer in a fixed precedence: built-in preset, then config file,
then command-line flags. The config file is plain text, one `key = value`
per line, blank lines and `#` comments ignored.

Exit status: 0 on success, 2 for usage errors (unknown flags or
subcommands), 1 for validation and IO errors. Machine outputs go to the
declared paths and carry a schema-version field; human-oriented logging
goes to standard error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from PIL import Image

from .capsim import CiderBackend
from .chota import DEFAULT_ALPHAS, EvalConfig, evaluate, report_to_dict
from .datagen import PromptOptions, generate_captions
from .datasets import (SCHEMA_VERSION, load_image_dataset, load_predictions,
                       load_video_dataset, read_tracks, write_captioned_dataset,
                       write_tracks)
from .errors import DvocError, InputError, ParseError, ValidationError
from .tracker import PRESETS, AggregationConfig, TrackerConfig, track_video
from .types import VideoRecord
from .vlm import JsonVlmEndpoint, VlmClient

log = logging.getLogger(__name__)

DATASET_SCHEMAS = ("lvvis", "vidstg", "image")
CAPSIM_BACKENDS = ("cider",)

# Flag values are plural/noun-style; internal mode names are singular.
_VISUAL_MODES = {"boxes": "box", "mask-boundaries": "mask-boundary"}


@dataclass(frozen=True)
class RunConfig:
    """One fully resolved invocation, type-checked before any IO."""

    subcommand: str
    paths: Mapping[str, Path]
    preset: str | None = None
    tracker: TrackerConfig | None = None
    aggregation: AggregationConfig | None = None
    evaluation: EvalConfig | None = None
    verbose: bool = False
    workers: int = 1
    extras: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.preset is not None and self.preset not in PRESETS:
            raise InputError(f"unknown preset {self.preset!r}; "
                             f"expected one of {sorted(PRESETS)}")


def parse_alpha_grid(text: str) -> tuple[float, ...]:
    """Threshold grid: either `start:step:stop` (inclusive) or a comma list.

    Raises ValueError on malformed text so argparse reports a usage error.
    """
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"expected start:step:stop, got {text!r}")
        start, step, stop = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise ValueError(f"bad threshold range {text!r}")
        count = int((stop - start) / step + 0.5) + 1
        values = [round(start + i * step, 10) for i in range(count)]
        return tuple(v for v in values if v <= stop + 1e-9)
    values = [float(p) for p in text.split(",") if p.strip()]
    if not values:
        raise ValueError("empty threshold list")
    return tuple(values)


def _choice(options: Sequence[str]) -> Callable[[str], str]:
    def convert(value: str) -> str:
        if value not in options:
            raise ValueError(f"expected one of {list(options)}, got {value!r}")
        return value
    return convert


_TRACK_KEYS: dict[str, Callable[[str], Any]] = {
    "t_match": int,
    "k_match": int,
    "t_thresh": float,
    "sim_floor": float,
    "t_agg": int,
    "agg_mode": _choice(("weighted-mean", "arithmetic-mean",
                         "best-score-single", "middle-frame-single")),
}

_EVAL_KEYS: dict[str, Callable[[str], Any]] = {
    "geometry": _choice(("box", "mask")),
    "alphas": parse_alpha_grid,
    "capsim": _choice(CAPSIM_BACKENDS),
    "workers": int,
}


def read_config_file(path: Path, converters: Mapping[str, Callable[[str], Any]]) -> dict:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ParseError(f"{path}: line {lineno}: expected key = value",
                             line=lineno)
        key = key.strip().replace("-", "_")
        value = value.strip()
        if key not in converters:
            raise InputError(f"{path}: line {lineno}: unknown config key {key!r}")
        try:
            values[key] = converters[key](value)
        except ValueError as exc:
            raise InputError(f"{path}: line {lineno}: bad value for {key}: {exc}") from None
    return values


def _layered_settings(args: argparse.Namespace,
                      converters: Mapping[str, Callable[[str], Any]],
                      preset_values: Mapping[str, Any]) -> dict:
    """Apply the documented precedence: preset < config file < flags."""
    values = dict(preset_values)
    config_path = getattr(args, "config", None)
    if config_path:
        values.update(read_config_file(Path(config_path), converters))
    for key in converters:
        flagged = getattr(args, key, None)
        if flagged is not None:
            values[key] = flagged
    return values


def _pick(values: Mapping[str, Any], keys: Sequence[str]) -> dict:
    return {k: values[k] for k in keys if k in values}


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    paths = {name: Path(getattr(args, name))
             for name in args.path_attrs if getattr(args, name, None) is not None}
    preset = getattr(args, "preset", None)
    tracker = aggregation = evaluation = None
    workers = 1
    extras: dict[str, Any] = {}

    if args.subcommand == "track":
        seed: dict[str, Any] = {}
        if preset:
            chosen = PRESETS[preset]
            seed = {"t_match": chosen.tracker.t_match,
                    "k_match": chosen.tracker.k_match,
                    "t_thresh": chosen.tracker.t_thresh,
                    "sim_floor": chosen.tracker.sim_floor,
                    "t_agg": chosen.aggregation.t_agg,
                    "agg_mode": chosen.aggregation.mode}
        values = _layered_settings(args, _TRACK_KEYS, seed)
        tracker = TrackerConfig(**_pick(values, ("t_match", "k_match",
                                                 "t_thresh", "sim_floor")))
        agg_kwargs = _pick(values, ("t_agg",))
        if "agg_mode" in values:
            agg_kwargs["mode"] = values["agg_mode"]
        aggregation = AggregationConfig(**agg_kwargs)
    elif args.subcommand == "evaluate":
        values = _layered_settings(args, _EVAL_KEYS, {})
        extras["capsim"] = values.get("capsim", "cider")
        workers = values.get("workers", 1)
        evaluation = EvalConfig(geometry=values.get("geometry", "box"),
                                alphas=values.get("alphas", DEFAULT_ALPHAS),
                                workers=workers)
    elif args.subcommand == "generate-captions":
        extras = {"schema": args.schema,
                  "visual_mode": _VISUAL_MODES[args.visual_mode],
                  "cue": args.cue,
                  "endpoint": args.endpoint,
                  "model": args.model,
                  "max_inflight": args.max_inflight,
                  "resume": args.resume}
    elif args.subcommand == "ingest":
        extras = {"schema": args.schema}
    elif args.subcommand == "capsim":
        extras = {"backend": args.backend}

    if hasattr(args, "schema"):
        extras.setdefault("schema", args.schema)
    return RunConfig(subcommand=args.subcommand, paths=paths, preset=preset,
                     tracker=tracker, aggregation=aggregation,
                     evaluation=evaluation, verbose=args.verbose,
                     workers=workers, extras=extras)


def _load_records(path: Path, schema: str) -> list[VideoRecord]:
    if schema == "image":
        return load_image_dataset(path)
    return load_video_dataset(path, schema)


def _write_json(payload: Any, destination: Path) -> int:
    data = json.dumps(payload, ensure_ascii=False, sort_keys=True,
                      indent=2).encode("utf-8")
    destination.write_bytes(data)
    return len(data)


def _cmd_ingest(config: RunConfig) -> int:
    records = _load_records(config.paths["dataset"], config.extras["schema"])
    shape = "image" if config.extras["schema"] == "image" else "video"
    written = write_captioned_dataset(records, config.paths["out"], shape=shape,
                                      require_captions=False)
    objects = sum(len(v.objects) for v in records)
    log.info("ingested %d videos / %d objects; wrote %d bytes to %s",
             len(records), objects, written, config.paths["out"])
    return 0


def _frame_loader(root: Path):
    def load(video: VideoRecord, index: int) -> np.ndarray:
        if not video.frame_files:
            raise InputError(f"video {video.video_id} lists no frame files")
        with Image.open(root / video.frame_files[index]) as image:
            return np.asarray(image.convert("RGB"))
    return load


def _cmd_generate_captions(config: RunConfig) -> int:
    extras = config.extras
    source = config.paths["dataset"]
    out = config.paths["out"]
    if extras["resume"] and out.exists():
        log.info("resuming from %s", out)
        source = out
    schema = extras["schema"]
    records = _load_records(source, schema)
    opts = PromptOptions(visual_mode=extras["visual_mode"], cue=extras["cue"])
    client = VlmClient(JsonVlmEndpoint(extras["endpoint"]))
    captioned, manifest = generate_captions(
        records, client, extras["model"], opts,
        _frame_loader(config.paths["frames_root"]),
        max_inflight=extras["max_inflight"],
    )
    shape = "image" if schema == "image" else "video"
    write_captioned_dataset(captioned, out, shape=shape, require_captions=False)
    _write_json(manifest, config.paths["manifest"])
    log.info("captioned %d of %d objects (%d already done, %d failed)",
             manifest["captioned"], manifest["requested"],
             manifest["skipped_existing"], len(manifest["failures"]))
    if manifest["failures"]:
        log.warning("some objects failed; rerun with --resume to retry them")
    return 0


def _cmd_track(config: RunConfig) -> int:
    predictions = load_predictions(config.paths["predictions"])
    tracks = {}
    for vid in sorted(predictions, key=str):
        tracks[vid] = track_video(predictions[vid], config.tracker,
                                  config.aggregation)
    written = write_tracks(tracks, config.paths["out"])
    total = sum(len(t) for t in tracks.values())
    log.info("tracked %d videos into %d tracks; wrote %d bytes to %s",
             len(tracks), total, written, config.paths["out"])
    return 0


def _write_curves(payload: dict, destination: Path) -> None:
    with open(destination, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["alpha", "det", "ass", "cap"])
        for alpha, det, ass, cap in zip(payload["alphas"], payload["det_curve"],
                                        payload["ass_curve"], payload["cap_curve"]):
            writer.writerow([f"{alpha:.2f}", f"{det:.6f}", f"{ass:.6f}",
                             f"{cap:.6f}"])


def _cmd_evaluate(config: RunConfig) -> int:
    videos = _load_records(config.paths["gt"], config.extras["schema"])
    tracks = read_tracks(config.paths["tracks"])
    report = evaluate(videos, tracks, config.evaluation)
    payload = report_to_dict(report)
    written = _write_json(payload, config.paths["out"])
    if "curves" in config.paths:
        _write_curves(payload, config.paths["curves"])
    log.info("CHOTA %.2f (DetA %.2f, AssA %.2f, CapA %.2f); wrote %d bytes to %s",
             report.chota, report.det, report.ass, report.cap, written,
             config.paths["out"])
    return 0


def _read_caption_lines(path: Path) -> list[str]:
    return path.read_text(encoding="utf-8").splitlines()


def _cmd_capsim(config: RunConfig) -> int:
    candidates = _read_caption_lines(config.paths["candidates"])
    references = _read_caption_lines(config.paths["references"])
    if len(candidates) != len(references):
        raise ValidationError(
            f"{len(candidates)} candidates vs {len(references)} references; "
            f"the files must pair up line by line"
        )
    if not candidates:
        raise InputError("no caption pairs to score")
    backend = CiderBackend(references)
    with open(config.paths["out"], "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["index", "similarity"])
        for index, (candidate, reference) in enumerate(zip(candidates, references)):
            writer.writerow([index, f"{backend.score(candidate, [reference]):.6f}"])
    log.info("scored %d caption pairs to %s", len(candidates), config.paths["out"])
    return 0


def render_report_table(payload: dict) -> str:
    if payload.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(
            f"unsupported report schema_version {payload.get('schema_version')!r}"
        )
    rows = [("overall", payload)]
    rows += [(str(v["video_id"]), v) for v in payload["videos"]]
    name_width = max(len("video"), max(len(name) for name, _ in rows))
    header = (f"{'video':<{name_width}}   CHOTA    DetA    AssA    CapA")
    lines = [
        f"geometry: {payload['geometry']}; thresholds: {len(payload['alphas'])} "
        f"in [{payload['alphas'][0]:.2f}, {payload['alphas'][-1]:.2f}]",
        header,
        "-" * len(header),
    ]
    for name, entry in rows:
        lines.append(f"{name:<{name_width}}  {entry['chota']:6.2f}  "
                     f"{entry['det']:6.2f}  {entry['ass']:6.2f}  "
                     f"{entry['cap']:6.2f}")
    return "\n".join(lines)


def _cmd_report(config: RunConfig) -> int:
    try:
        text = config.paths["report"].read_text(encoding="utf-8")
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{config.paths['report']}: {exc}") from None
    print(render_report_table(payload))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dvoc",
        description="Dense video object captioning toolkit: dataset ingest, "
                    "caption generation, tracking, and CHOTA evaluation.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--verbose", action="store_true",
                        help="debug-level logging on standard error")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    ingest = sub.add_parser("ingest", parents=[common],
                            help="validate a dataset and write the canonical form")
    ingest.add_argument("--dataset", required=True, help="input dataset JSON")
    ingest.add_argument("--schema", choices=DATASET_SCHEMAS, default="lvvis",
                        help="input schema (default: lvvis)")
    ingest.add_argument("--out", required=True, help="canonical dataset JSON path")
    ingest.set_defaults(handler=_cmd_ingest, path_attrs=("dataset", "out"))

    gen = sub.add_parser("generate-captions", parents=[common],
                         help="caption every uncaptioned object via a VLM endpoint")
    gen.add_argument("--dataset", required=True, help="input dataset JSON")
    gen.add_argument("--schema", choices=DATASET_SCHEMAS, default="lvvis")
    gen.add_argument("--frames-root", required=True, dest="frames_root",
                     help="directory holding the pre-extracted frame images")
    gen.add_argument("--endpoint", required=True, help="VLM endpoint URL")
    gen.add_argument("--model", required=True, help="model name sent to the endpoint")
    gen.add_argument("--visual-mode", choices=sorted(_VISUAL_MODES),
                     default="boxes", dest="visual_mode",
                     help="how the queried object is drawn (default: boxes)")
    gen.add_argument("--cue", choices=("bbox", "center"), default="bbox",
                     help="coordinate cue in the prompt text (default: bbox)")
    gen.add_argument("--max-inflight", type=int, default=4, dest="max_inflight",
                     help="bound on concurrent requests (default: 4)")
    gen.add_argument("--resume", action="store_true",
                     help="reuse captions already present in --out")
    gen.add_argument("--out", required=True, help="captioned dataset JSON path")
    gen.add_argument("--manifest", required=True, help="run manifest JSON path")
    gen.set_defaults(handler=_cmd_generate_captions,
                     path_attrs=("dataset", "frames_root", "out", "manifest"))

    track = sub.add_parser("track", parents=[common],
                           help="link per-clip predictions into video tracks")
    track.add_argument("--predictions", required=True,
                       help="per-clip predictions, JSON lines")
    track.add_argument("--out", required=True, help="tracks JSON path")
    track.add_argument("--preset", choices=sorted(PRESETS),
                       help="published per-benchmark settings")
    track.add_argument("--config", help="key = value settings file")
    track.add_argument("--t-match", type=int, dest="t_match",
                       help="memory bank window, in clips")
    track.add_argument("--k-match", type=int, dest="k_match",
                       help="bank clips voting on the consensus")
    track.add_argument("--t-thresh", type=float, dest="t_thresh",
                       help="fused-score floor for keeping a query")
    track.add_argument("--sim-floor", type=float, dest="sim_floor",
                       help="minimum consensus cosine for matching")
    track.add_argument("--t-agg", type=int, dest="t_agg",
                       help="clips aggregated into the track embedding")
    track.add_argument("--agg-mode", dest="agg_mode",
                       choices=("weighted-mean", "arithmetic-mean",
                                "best-score-single", "middle-frame-single"),
                       help="temporal aggregation mode")
    track.set_defaults(handler=_cmd_track, path_attrs=("predictions", "out"))

    ev = sub.add_parser("evaluate", parents=[common],
                        help="score tracks against ground truth (CHOTA)")
    ev.add_argument("--gt", required=True, help="ground-truth dataset JSON")
    ev.add_argument("--schema", choices=DATASET_SCHEMAS, default="lvvis")
    ev.add_argument("--tracks", required=True, help="tracks JSON from `track`")
    ev.add_argument("--geometry", choices=("box", "mask"),
                    help="IoU geometry (default: box)")
    ev.add_argument("--alphas", type=parse_alpha_grid,
                    help="threshold grid, start:step:stop or a comma list "
                         "(default: 0.05:0.05:0.95)")
    ev.add_argument("--capsim", choices=CAPSIM_BACKENDS,
                    help="caption similarity backend (default: cider)")
    ev.add_argument("--config", help="key = value settings file")
    ev.add_argument("--workers", type=int, help="evaluation worker count")
    ev.add_argument("--out", required=True, help="report JSON path")
    ev.add_argument("--curves", help="optional per-threshold curves CSV path")
    ev.set_defaults(handler=_cmd_evaluate,
                    path_attrs=("gt", "tracks", "out", "curves"))

    cap = sub.add_parser("capsim", parents=[common],
                         help="score caption pairs, one per line")
    cap.add_argument("--candidates", required=True, help="candidate captions, one per line")
    cap.add_argument("--references", required=True, help="reference captions, one per line")
    cap.add_argument("--backend", choices=CAPSIM_BACKENDS, default="cider")
    cap.add_argument("--out", required=True, help="per-pair scores CSV path")
    cap.set_defaults(handler=_cmd_capsim,
                     path_attrs=("candidates", "references", "out"))

    rep = sub.add_parser("report", parents=[common],
                         help="render an evaluation report as a table")
    rep.add_argument("--report", required=True, help="report JSON from `evaluate`")
    rep.set_defaults(handler=_cmd_report, path_attrs=("report",))
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )
    try:
        config = resolve_run_config(args)
        return args.handler(config)
    except DvocError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    except OSError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
