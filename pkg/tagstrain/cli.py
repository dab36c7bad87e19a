import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from tagstrain import __version__, formats
from tagstrain.config import RunConfig, load_config, resolve_threads
from tagstrain.errors import DataError, TagstrainError
from tagstrain.evaluation import evaluate_run, truth_box, write_report
from tagstrain.geometry import BoundingBox
from tagstrain.models import Localizer, ModelCheckpoint, Pipeline, load_manifest, train_localizer, train_tracker
from tagstrain.models.data import load_case
from tagstrain.phantom import generate_dataset
from tagstrain.registration import BOUNDARY, FROZEN, track_ssd
from tagstrain.strain import COMPONENTS, strain_curve

logger = logging.getLogger("tagstrain")

BOX_FORMAT = "tagstrain-box"
LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


def _emit_json(argv: List[str], status: str, duration_ms: int, body: Dict[str, Any]) -> None:
    payload = {
        "version": "1",
        "command": "tagstrain" + (" " + " ".join(argv) if argv else ""),
        "status": status,
        "duration_ms": duration_ms,
    }
    payload.update(body)
    json.dump(payload, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")


def _configure_logging(verbose: int, quiet: bool) -> None:
    level = logging.WARNING if quiet else logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def _effective_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _check_overwrite(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise DataError(f"{path} already exists; pass --force to overwrite")


def _read_checkpoint(path: str) -> ModelCheckpoint:
    return ModelCheckpoint.load(path)


def _box_doc(case_id: str, tight: BoundingBox, crop: BoundingBox, fallback: bool) -> Dict[str, Any]:
    return {
        "format": BOX_FORMAT,
        "version": 1,
        "case_id": case_id,
        "tight_box": tight.as_list(),
        "crop_box": crop.as_list(),
        "fallback": fallback,
    }


# === commands ===

def cmd_phantom_gen(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Any]:
    section = cfg.phantom
    manifest = generate_dataset(
        args.out,
        args.n,
        section.spec,
        section.ranges,
        cfg.seed,
        section.splits,
        threads=resolve_threads(cfg, args.threads),
        config=cfg.to_dict(),
    )
    counts = {name: len(manifest.split(name)) for name in ("train", "val", "test")}
    return {"out": str(args.out), "cases": len(manifest.cases), "splits": counts}


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Any]:
    out = Path(args.out)
    _check_overwrite(out, args.force)
    dataset = load_manifest(args.data)
    metrics_path = Path(str(out) + ".metrics.jsonl")
    common = dict(seed=cfg.seed, epochs=args.epochs, metrics_path=metrics_path, config=cfg.to_dict())
    if args.model == "localizer":
        result = train_localizer(dataset, cfg.localizer, cfg.preprocess, **common)
    else:
        box_fn = None
        if args.localizer:
            box_fn = Localizer(_read_checkpoint(args.localizer)).localize
        result = train_tracker(dataset, cfg.tracker, cfg.preprocess, omega=cfg.loss.omega, box_fn=box_fn, **common)
    result.checkpoint.save(out)
    final = [m for m in result.metrics if m["split"] == "val"]
    summary = final[-1] if final else {}
    return {"checkpoint": str(out), "metrics": str(metrics_path), "final": summary}


def _infer_one(pipeline: Pipeline, cine_path: Path, out: Path, box_out: Optional[Path], cfg: RunConfig) -> Tuple[float, int]:
    cine = formats.read_cine(cine_path)
    result = pipeline.run(cine)
    provenance = formats.make_provenance(cfg.to_dict())
    formats.write_landmarks(
        out,
        formats.LandmarkFile(
            sequence=result.landmarks,
            pixel_spacing_mm=cine.pixel_spacing_mm,
            case_id=cine.case_id,
            transform=result.transform.to_dict(),
            provenance=provenance,
        ),
    )
    if box_out is not None:
        formats.write_json(box_out, dict(_box_doc(cine.case_id, result.tight_box, result.crop_box, result.fallback), provenance=provenance))
    return result.frames_per_second, result.landmarks.n_frames


def cmd_infer(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Any]:
    pipeline = Pipeline(_read_checkpoint(args.localizer), _read_checkpoint(args.tracker))
    start = time.perf_counter()
    if args.data:
        dataset = load_manifest(args.data)
        out_dir = Path(args.out)
        records = dataset.split(args.split)
        frames = 0
        for record in records:
            case_id = record["case_id"]
            _fps, n = _infer_one(
                pipeline,
                dataset.root / record["cine_path"],
                out_dir / f"{case_id}.landmarks.json",
                out_dir / f"{case_id}.box.json",
                cfg,
            )
            frames += n
        elapsed = max(time.perf_counter() - start, 1e-9)
        fps = frames / elapsed
        result = {"out": str(out_dir), "cases": len(records), "frames_per_second": fps}
    else:
        if not args.cine:
            raise DataError("infer needs --cine FILE or --data MANIFEST")
        box_out = Path(args.box_out) if args.box_out else None
        fps, _n = _infer_one(pipeline, Path(args.cine), Path(args.out), box_out, cfg)
        result = {"out": str(args.out), "frames_per_second": fps}
    logger.info("throughput: %.1f frames/s", result["frames_per_second"])
    return result


def cmd_strain(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Any]:
    doc = formats.read_landmarks(args.landmarks)
    curve = strain_curve(doc.sequence)
    provenance = formats.make_provenance(cfg.to_dict())
    formats.write_strain_csv(args.out, curve, provenance)
    es = curve.at_es
    return {"out": str(args.out), "es_frame": curve.es_frame, "es": dict(zip(COMPONENTS, es.as_row()))}


def _landmark_dir(path: Path) -> Dict[str, formats.LandmarkFile]:
    if (path / "landmarks").is_dir():
        path = path / "landmarks"
    if not path.is_dir():
        raise DataError(f"{path} is not a directory")
    files = {}
    for item in sorted(path.glob("*.landmarks.json")):
        doc = formats.read_landmarks(item)
        if doc.case_id in files:
            raise DataError(f"duplicate case_id {doc.case_id!r} in {path}")
        files[doc.case_id] = doc
    if not files:
        raise DataError(f"no *.landmarks.json files in {path}")
    return files


def _box_dir(path: Path, truth: Dict[str, formats.LandmarkFile]) -> Dict[str, Tuple[BoundingBox, BoundingBox]]:
    boxes = {}
    for item in sorted(path.glob("*.box.json")):
        doc = formats.read_json(item)
        if not isinstance(doc, dict) or doc.get("format") != BOX_FORMAT:
            raise DataError(f"{item}: not a {BOX_FORMAT} document")
        case_id = doc["case_id"]
        if case_id in truth:
            boxes[case_id] = (BoundingBox.from_list(doc["tight_box"]), truth_box(truth[case_id]))
    return boxes


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Any]:
    pred = _landmark_dir(Path(args.pred))
    truth = _landmark_dir(Path(args.truth))
    if (Path(args.truth) / "manifest.json").is_file():
        # a dataset holds every split; compare only the predicted cases
        truth = {case_id: doc for case_id, doc in truth.items() if case_id in pred}
    boxes = _box_dir(Path(args.boxes), truth) if args.boxes else None
    report = evaluate_run(
        pred,
        truth,
        boxes,
        frames_per_second=args.throughput,
        labels=tuple(args.labels),
        reference_group=cfg.eval.reference_group,
        limits=cfg.eval.review,
        config=cfg.to_dict(),
    )
    written = write_report(report, args.out)
    mid = report.summary["strain_errors"]["all"]["eps_C_midwall"]
    return {
        "out": str(args.out),
        "files": [str(p) for p in written],
        "n_cases": report.summary["n_cases"],
        "es_eps_C_midwall_error": {"mean": mid["error_mean"], "sd": mid["error_sd"]},
        "mean_iou": report.summary.get("iou", {}).get("mean"),
        "flagged": len(report.summary["worst_cases"]),
    }


def cmd_baseline(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Any]:
    cine = formats.read_cine(args.cine)
    init = formats.read_landmarks(args.init)
    result = track_ssd(cine, init.sequence.frame(0), cfg.baseline)
    formats.write_landmarks(
        args.out,
        formats.LandmarkFile(
            sequence=result.sequence,
            pixel_spacing_mm=cine.pixel_spacing_mm,
            case_id=cine.case_id or init.case_id,
            region=init.region,
            status=result.status,
            provenance=formats.make_provenance(cfg.to_dict()),
        ),
    )
    return {
        "out": str(args.out),
        "frames": result.sequence.n_frames,
        "boundary": int((result.status == BOUNDARY).sum()),
        "frozen": int((result.status == FROZEN).sum()),
    }


def cmd_baseline_dataset(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Any]:
    """Baseline over a manifest split, initialized from the truth ED grid."""
    dataset = load_manifest(args.data)
    out_dir = Path(args.out)
    records = dataset.split(args.split)
    for record in records:
        cine, landmarks, _bbox = load_case(dataset, record)
        result = track_ssd(cine, landmarks.frame(0), cfg.baseline)
        formats.write_landmarks(
            out_dir / f"{record['case_id']}.landmarks.json",
            formats.LandmarkFile(
                sequence=result.sequence,
                pixel_spacing_mm=cine.pixel_spacing_mm,
                case_id=record["case_id"],
                region=record.get("region"),
                status=result.status,
                provenance=formats.make_provenance(cfg.to_dict()),
            ),
        )
    return {"out": str(out_dir), "cases": len(records)}


# === parser ===

def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=["text", "json"], default="text", help="Output format for results")
    common.add_argument("-v", "--verbose", action="count", default=0, help="Debug logging")
    common.add_argument("-q", "--quiet", action="store_true", help="Only warnings and errors")
    common.add_argument("--threads", type=int, default=None, help="Worker thread cap (default: TAGSTRAIN_THREADS or CPU count)")
    common.add_argument("--config", default=None, help="Run config (JSON or TOML)")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="tagstrain", description="Myocardial strain from tagged MRI cines")
    parser.add_argument("--version", action="version", version=f"tagstrain {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    phantom = sub.add_parser("phantom", help="Synthetic tagged-MRI phantoms")
    phantom_sub = phantom.add_subparsers(dest="phantom_command", required=True)
    gen = phantom_sub.add_parser("gen", parents=[common], help="Generate a phantom dataset")
    gen.add_argument("--out", required=True, help="Output directory")
    gen.add_argument("--n", type=int, required=True, help="Number of cases")
    gen.add_argument("--seed", type=int, default=None, help="Dataset seed (overrides config)")
    gen.set_defaults(handler=cmd_phantom_gen)

    train = sub.add_parser("train", parents=[common], help="Train the localizer or the tracker")
    train.add_argument("model", choices=["localizer", "tracker"])
    train.add_argument("--data", required=True, help="Dataset manifest or its directory")
    train.add_argument("--out", required=True, help="Checkpoint path")
    train.add_argument("--epochs", type=int, default=None, help="Epochs (default: from config)")
    train.add_argument("--seed", type=int, default=None, help="Training seed (overrides config)")
    train.add_argument("--localizer", default=None, help="Localizer checkpoint for tracker crops when teacher forcing is off")
    train.add_argument("--force", action="store_true", help="Overwrite an existing checkpoint")
    train.set_defaults(handler=cmd_train)

    infer = sub.add_parser("infer", parents=[common], help="Run the full pipeline")
    infer.add_argument("--localizer", required=True, help="Localizer checkpoint")
    infer.add_argument("--tracker", required=True, help="Tracker checkpoint")
    infer.add_argument("--cine", default=None, help="Input cine file")
    infer.add_argument("--data", default=None, help="Batch mode: dataset manifest")
    infer.add_argument("--split", default="test", help="Batch mode: split to run (default: test)")
    infer.add_argument("--out", required=True, help="Landmark file, or output directory in batch mode")
    infer.add_argument("--box-out", default=None, help="Write the localized boxes here")
    infer.set_defaults(handler=cmd_infer)

    strain = sub.add_parser("strain", parents=[common], help="Strain curve CSV from a landmark file")
    strain.add_argument("--landmarks", required=True)
    strain.add_argument("--out", required=True)
    strain.set_defaults(handler=cmd_strain)

    ev = sub.add_parser("eval", parents=[common], help="Evaluate predicted landmarks against truth")
    ev.add_argument("--pred", required=True, help="Directory of predicted *.landmarks.json")
    ev.add_argument("--truth", required=True, help="Directory of truth *.landmarks.json (or a dataset directory)")
    ev.add_argument("--boxes", default=None, help="Directory of *.box.json from infer")
    ev.add_argument("--out", required=True, help="Report directory")
    ev.add_argument("--throughput", type=float, default=None, help="Frames/s to record in the report")
    ev.add_argument("--labels", nargs=2, default=["pred", "truth"], metavar=("A", "B"), help="Names of the two landmark sets")
    ev.set_defaults(handler=cmd_eval)

    base = sub.add_parser("baseline", parents=[common], help="SSD block-matching baseline tracker")
    base.add_argument("--cine", default=None, help="Input cine file")
    base.add_argument("--init", default=None, help="Landmark file whose frame 0 seeds the tracker")
    base.add_argument("--data", default=None, help="Batch mode: dataset manifest (seeds from truth ED)")
    base.add_argument("--split", default="test", help="Batch mode: split to run (default: test)")
    base.add_argument("--out", required=True, help="Landmark file, or output directory in batch mode")
    base.set_defaults(handler=_baseline_dispatch)
    return parser


def _baseline_dispatch(args: argparse.Namespace, cfg: RunConfig) -> Dict[str, Any]:
    if args.data:
        return cmd_baseline_dataset(args, cfg)
    if not args.cine or not args.init:
        raise DataError("baseline needs --cine and --init, or --data")
    return cmd_baseline(args, cfg)


def _print_text(command: str, result: Dict[str, Any]) -> None:
    if command == "train":
        print(json.dumps(result["final"], sort_keys=True))
        return
    for key, value in result.items():
        if isinstance(value, (dict, list)):
            value = json.dumps(value, sort_keys=True)
        print(f"{key}: {value}")


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # usage errors exit 2 inside parse_args, before any envelope is due
    args = build_parser().parse_args(argv)
    wants_json = args.format == "json"
    _configure_logging(args.verbose, args.quiet)
    start = time.time()
    try:
        cfg = _effective_config(args)
        result = args.handler(args, cfg)
    except (TagstrainError, OSError) as exc:
        duration_ms = int((time.time() - start) * 1000)
        if wants_json:
            diagnostic = {"kind": type(exc).__name__, "message": str(exc)}
            stage = getattr(exc, "stage", None)
            if stage:
                diagnostic["stage"] = stage
            _emit_json(argv, "error", duration_ms, {"diagnostics": [diagnostic]})
        else:
            sys.stderr.write(f"error: {exc}\n")
        return 1

    duration_ms = int((time.time() - start) * 1000)
    if wants_json:
        _emit_json(argv, "ok", duration_ms, {"result": result})
    else:
        _print_text(args.command, result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
