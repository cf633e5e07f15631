"""Operator command line.

Subcommands:
  detect      run a cascade model over one image and print the boxes
  train       build a cascade model from sample directories
  watchlistd  host the watchlist HTTP service until interrupted
  watch       run the screening pipeline from a config file
  check       fan one face image out to the databases and print the verdict

Machine-readable results go to standard output as JSON; progress and
diagnostics go to standard error. Exit codes: 0 success, 1 runtime failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import threading
import uuid
from datetime import datetime, timezone

import numpy as np

from .cascade_xml import (
    CascadeParseError,
    CascadeValidationError,
    load_cascade,
    save_cascade,
)
from .haar import DetectParams, detect_multiscale
from .imaging import ColorImage, FormatError, draw_rect, read_image, to_grayscale, write_image
from .pipeline import ALERT_COLOR, PipelineConfig, StartupError, run_from_config
from .signature import DegenerateCropError, signature
from .training import (
    CascadeTargets,
    TrainingError,
    build_cascade,
    gen_features,
    load_samples,
)
from .watchlist import (
    CheckRequest,
    ConfigError,
    Verdict,
    WatchlistService,
    fan_out_check,
)


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _emit(payload) -> None:
    print(json.dumps(payload))


def _as_gray(img):
    return to_grayscale(img) if isinstance(img, ColorImage) else img


# ---------------------------------------------------------------------- detect


def cmd_detect(args) -> int:
    try:
        cascade = load_cascade(args.cascade)
    except (OSError, CascadeParseError, CascadeValidationError) as e:
        return _fail(f"cannot load cascade {args.cascade}: {e}")
    try:
        img = read_image(args.input)
    except (OSError, FormatError) as e:
        return _fail(f"cannot read image {args.input}: {e}")

    try:
        params = DetectParams(scale_factor=args.scale_factor, min_neighbors=args.min_neighbors)
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    boxes = detect_multiscale(cascade, _as_gray(img), params)
    payload = [{"x": r.x, "y": r.y, "w": r.w, "h": r.h} for r in boxes]
    _emit(payload)
    if args.out:
        with open(args.out, "w") as f:
            json.dump(payload, f)
    if args.annotated:
        color = img if isinstance(img, ColorImage) else ColorImage(
            np.repeat(img.pixels[:, :, None], 3, axis=2)
        )
        for r in boxes:
            color = draw_rect(color, r, ALERT_COLOR, thickness=2)
        write_image(color, args.annotated)
    print(f"{len(boxes)} detection(s) in {args.input}", file=sys.stderr)
    return 0


# ----------------------------------------------------------------------- train


def cmd_train(args) -> int:
    try:
        targets = CascadeTargets(d_min=args.dmin, f_max=args.fmax, max_stages=args.stages)
        features = gen_features(args.window, args.window, stride=args.feature_stride)
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    try:
        positives, negatives = load_samples(
            args.pos, args.neg, args.window, args.window, seed=args.seed
        )
        result = build_cascade(positives, negatives, targets, features)
    except (TrainingError, ValueError) as e:
        return _fail(str(e))

    save_cascade(result.cascade, args.out)

    print(f"{'stage':>5}  {'stumps':>6}  {'TPR':>7}  {'FPR':>7}", file=sys.stderr)
    stages = []
    for i, stage in enumerate(result.cascade.stages):
        tpr = result.stage_tprs[i]
        fpr = result.stage_fprs[i]
        print(f"{i + 1:>5}  {len(stage.trees):>6}  {tpr:>7.4f}  {fpr:>7.4f}", file=sys.stderr)
        stages.append({"stumps": len(stage.trees), "tpr": tpr, "fpr": fpr})
    _emit(
        {
            "out": str(args.out),
            "stages": stages,
            "projected_fpr": result.projected_fpr,
            "warning": result.warning,
        }
    )
    if result.warning:
        print(f"warning: {result.warning}", file=sys.stderr)
        return 1
    return 0


# ------------------------------------------------------------------ watchlistd


def _parse_latency(text: str) -> tuple[float, float]:
    lo, _, hi = text.partition(":")
    try:
        pair = (float(lo), float(hi))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI milliseconds, got {text!r}")
    if pair[0] < 0 or pair[1] < pair[0]:
        raise argparse.ArgumentTypeError(f"latency range out of order: {text!r}")
    return pair


def cmd_watchlistd(args) -> int:
    service = WatchlistService(tau=args.tau, latency_ms=args.latency_ms)
    if args.config:
        try:
            service.load_snapshot(args.config)
        except (OSError, ValueError, KeyError, TypeError) as e:
            return _fail(f"cannot load database config {args.config}: {e}")
    try:
        service.start(port=args.port)
    except OSError as e:
        return _fail(f"cannot bind port {args.port}: {e}")
    _emit({"base_url": service.base_url, "databases": service.store.database_names()})
    sys.stdout.flush()
    print(f"serving watchlist databases on {service.base_url}", file=sys.stderr)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        print("shutting down", file=sys.stderr)
    finally:
        service.stop()
    return 0


# ----------------------------------------------------------------------- watch


def cmd_watch(args) -> int:
    try:
        config = PipelineConfig.from_file(args.config)
    except OSError as e:
        return _fail(f"cannot read config {args.config}: {e}")
    except ConfigError as e:
        return _fail(str(e))
    try:
        status = run_from_config(config)
    except (StartupError, ConfigError) as e:
        return _fail(str(e))

    from .events import read_log

    records = read_log(config.event_log)
    finished = next((r for r in reversed(records) if r.kind == "run_finished"), None)
    _emit(
        {
            "frames": finished.payload.get("frames") if finished else None,
            "checks": finished.payload.get("checks") if finished else None,
            "alerts": sum(1 for r in records if r.kind == "alert"),
            "event_log": str(config.event_log),
        }
    )
    return status


# ----------------------------------------------------------------------- check


def _parse_endpoints(text: str) -> list[tuple[str, str]]:
    endpoints = []
    for part in text.split(","):
        db, sep, url = part.partition("=")
        if not sep or not db or not url:
            raise argparse.ArgumentTypeError(
                f"expected db=url[,db=url...], got {part!r}"
            )
        endpoints.append((db, url))
    return endpoints


def cmd_check(args) -> int:
    try:
        img = read_image(args.face)
    except (OSError, FormatError) as e:
        return _fail(f"cannot read face image {args.face}: {e}")
    try:
        sig = signature(_as_gray(img))
    except (DegenerateCropError, ValueError) as e:
        return _fail(f"cannot build a signature from {args.face}: {e}")

    with open(args.face, "rb") as f:
        face_bytes = f.read()
    request = CheckRequest(
        request_id=str(uuid.uuid4()),
        signature=sig,
        face_image=face_bytes,
        camera_id=args.camera_id,
        captured_at=datetime.now(timezone.utc),
    )
    try:
        verdict = fan_out_check(args.endpoints, request, timeout=args.timeout)
    except ConfigError as e:
        return _fail(str(e))

    # the databases apply their own thresholds; --tau can only tighten the
    # result locally by dropping weaker hits before deciding
    kept = tuple(h for h in verdict.hits if h.score >= args.tau)
    if len(kept) != len(verdict.hits):
        decision = (
            "inadmissible"
            if kept
            else ("indeterminate" if verdict.databases_unavailable else "admissible")
        )
        verdict = Verdict(
            verdict.request_id,
            decision,
            kept,
            verdict.databases_queried,
            verdict.databases_unavailable,
        )
    _emit(
        {
            "request_id": verdict.request_id,
            "decision": verdict.decision,
            "hits": [
                {
                    "database": h.database,
                    "record_id": h.record_id,
                    "status": h.status,
                    "score": h.score,
                    "details": h.details,
                }
                for h in verdict.hits
            ],
            "databases_queried": list(verdict.databases_queried),
            "databases_unavailable": list(verdict.databases_unavailable),
        }
    )
    return 0


# ---------------------------------------------------------------------- parser


def _tau_arg(text: str) -> float:
    try:
        tau = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not 0.0 < tau <= 1.0:
        raise argparse.ArgumentTypeError(f"tau must be in (0, 1], got {text}")
    return tau


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sentinel",
        description="Face-screening surveillance toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser(
        "detect",
        help="detect faces in one image",
        description="Run a cascade model over one image and print the "
        "detections as a JSON array of {x, y, w, h} boxes.",
        formatter_class=fmt,
    )
    p.add_argument("--cascade", required=True, help="cascade model XML file")
    p.add_argument("--input", required=True, help="PGM or PPM image to scan")
    p.add_argument("--scale-factor", type=float, default=1.1, help="scale pyramid growth factor")
    p.add_argument("--min-neighbors", type=int, default=4, help="overlapping boxes needed to keep a detection")
    p.add_argument("--out", help="also write the JSON array to this file")
    p.add_argument("--annotated", help="write a copy of the image with boxes drawn to this PPM file")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser(
        "train",
        help="train a cascade model",
        description="Build a cascade from directories of positive and negative "
        "sample images and write it as model XML. Prints a per-stage table on "
        "standard error and a JSON summary on standard output.",
        formatter_class=fmt,
    )
    p.add_argument("--pos", required=True, help="directory of window-sized positive images")
    p.add_argument("--neg", required=True, help="directory of negative images (oversized ones are cropped)")
    p.add_argument("--out", required=True, help="output model XML path")
    p.add_argument("--stages", type=int, default=10, help="maximum number of stages")
    p.add_argument("--dmin", type=float, default=0.99, help="minimum per-stage detection rate")
    p.add_argument("--fmax", type=float, default=0.5, help="maximum per-stage false-positive rate")
    p.add_argument("--seed", type=int, default=0, help="seed for negative sampling")
    p.add_argument("--window", type=int, default=24, help="training window side in pixels")
    p.add_argument("--feature-stride", type=int, default=2, help="feature grid stride (1 = densest)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "watchlistd",
        help="host the watchlist HTTP service",
        description="Serve the watchlist databases over HTTP until interrupted. "
        "The config file maps database names to record lists; an empty list "
        "creates an empty database.",
        formatter_class=fmt,
    )
    p.add_argument("--port", type=int, default=0, help="TCP port (0 picks a free one)")
    p.add_argument("--config", help="JSON database snapshot to preload")
    p.add_argument("--tau", type=_tau_arg, default=0.9, help="similarity threshold for hits")
    p.add_argument(
        "--latency-ms",
        type=_parse_latency,
        default=None,
        metavar="LO:HI",
        help="artificial uniform response delay range in milliseconds",
    )
    p.set_defaults(func=cmd_watchlistd)

    p = sub.add_parser(
        "watch",
        help="run the screening pipeline",
        description="Consume a directory of frames per the pipeline config, "
        "checking every detected face against the watchlist databases.",
        formatter_class=fmt,
    )
    p.add_argument("--config", required=True, help="pipeline config JSON file")
    p.set_defaults(func=cmd_watch)

    p = sub.add_parser(
        "check",
        help="check one face image against the databases",
        description="Compute the face signature of one image, query every "
        "database concurrently, and print the verdict JSON.",
        formatter_class=fmt,
    )
    p.add_argument("--face", required=True, help="face image (PGM or PPM)")
    p.add_argument(
        "--endpoints",
        required=True,
        type=_parse_endpoints,
        help="comma-separated db=url pairs",
    )
    p.add_argument(
        "--tau",
        type=_tau_arg,
        default=0.9,
        help="drop hits scoring below this before deciding (databases apply their own threshold first)",
    )
    p.add_argument("--timeout", type=float, default=5.0, help="per-database timeout in seconds")
    p.add_argument("--camera-id", default="cli", help="camera id stamped on the request")
    p.set_defaults(func=cmd_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
