"""Command-line entry point: ``cxrtriage <subcommand> [--config c.json] [--seed N] [--out DIR] ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .evaluation import EvalReport, ClassMetrics, ConfusionCounts, render_report, render_sweep, threshold_sweep
from .explain import grad_cam, overlay, save_heatmap_csv
from .networks import BundleError, TRIAGE_HEAD, load_bundle
from .pipeline import (ConfigError, PipelineConfig, TriagePipeline, evaluate_bundle, load_config,
                       predict_records, run_batch, train_stage1, train_stage2)
from .preprocess import decode_image, preprocess

log = logging.getLogger("cxrtriage")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="JSON config document")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="cxrtriage", description="Two-stage chest X-ray triage.")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset + manifest")
    p.add_argument("--n-patients", type=int)
    p.add_argument("--image-size", type=int)

    for name, text in (("train-triage", "train the Normal/Abnormal network"),
                       ("train-classifier", "train the 8-pathology network from a stage-1 bundle")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--manifest", type=Path)
        p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
        if name == "train-classifier":
            p.add_argument("--stage1", type=Path, required=True, help="stage-1 bundle")

    p = sub.add_parser("eval", parents=[common], help="evaluate a bundle on one manifest split")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", default="test", choices=dataio.SPLITS)
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("infer", parents=[common], help="run the pipeline on one image")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--stage1", type=Path)
    p.add_argument("--stage2", type=Path)

    p = sub.add_parser("batch", parents=[common], help="run the pipeline over a directory or manifest")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--stage1", type=Path)
    p.add_argument("--stage2", type=Path)

    p = sub.add_parser("gradcam", parents=[common], help="Grad-CAM overlay for one image")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--target-class", type=int, help="default: highest-scoring class")
    p.add_argument("--colormap", default="jet")
    p.add_argument("--footer", action="store_true", help="draw the caption below the image")

    p = sub.add_parser("sweep-threshold", parents=[common], help="metrics over a threshold grid")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", default="val", choices=dataio.SPLITS)
    p.add_argument("--grid", type=float, nargs="+", default=[round(0.05 * i, 2) for i in range(1, 20)])

    p = sub.add_parser("report", parents=[common], help="re-render a JSON report as text or CSV")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--format", choices=("text", "csv", "json"), default="text")
    return ap


def _app(args):
    app = load_config(args.config)
    if args.seed is not None:
        app.seed = args.seed
    app.train.seed = app.seed
    return app


def _manifest(args, app) -> Path:
    path = args.manifest or (Path(app.data.manifest) if app.data.manifest else None)
    if path is None:
        raise ConfigError("a manifest is required (--manifest or data.manifest)")
    return path


def _root(app, manifest: Path) -> Path:
    return Path(app.data.root) if app.data.root else manifest.parent


def _pipeline(args, app) -> TriagePipeline:
    cfg = app.pipeline
    s1 = args.stage1 or (Path(cfg.stage1_bundle) if cfg.stage1_bundle else None)
    s2 = args.stage2 or (Path(cfg.stage2_bundle) if cfg.stage2_bundle else None)
    if s1 is None or s2 is None:
        raise ConfigError("both stage bundles are required (--stage1/--stage2 or pipeline section)")
    cfg = PipelineConfig(str(s1), str(s2), cfg.stage1_threshold, cfg.stage2_threshold, cfg.emit_heatmaps,
                         str(args.out) if args.out else cfg.output_dir)
    return TriagePipeline(load_bundle(s1), load_bundle(s2), cfg)


def report_from_json(doc: dict) -> EvalReport:
    rows = []
    for r in doc["rows"][:-1]:
        rows.append(ClassMetrics(r["class"], ConfusionCounts(r["tp"], r["fp"], r["fn"], r["tn"]), r["auc"]))
    return EvalReport(rows, doc["threshold"])


def cmd_gen_data(args, app) -> int:
    n = args.n_patients or app.data.n_patients
    size = args.image_size or app.data.image_size
    manifest, records = dataio.generate_synthetic(n, size, app.seed, args.out)
    print(json.dumps({"manifest": str(manifest), "samples": len(records)}))
    return 0


def cmd_train(args, app) -> int:
    manifest = _manifest(args, app)
    records = dataio.load_manifest(manifest)
    root = _root(app, manifest)
    if args.command == "train-triage":
        result = train_stage1(records, root, app, args.out, resume=args.resume)
        name = "stage1.cxr"
    else:
        result = train_stage2(records, root, load_bundle(args.stage1), app, args.out, resume=args.resume)
        name = "stage2.cxr"
    print(json.dumps({"bundle": str(args.out / name), "epochs": len(result.history),
                      "best_val_loss": result.best_val_loss}))
    return 0


def cmd_eval(args, app) -> int:
    bundle = load_bundle(args.bundle)
    records = [r for r in dataio.load_manifest(args.manifest) if r.split == args.split]
    if not records:
        raise ConfigError(f"split {args.split!r} is empty")
    report = evaluate_bundle(bundle, records, _root(app, args.manifest), args.threshold)
    args.out.mkdir(parents=True, exist_ok=True)
    for fmt, ext in (("csv", "csv"), ("json", "json"), ("text", "txt")):
        (args.out / f"report.{ext}").write_bytes(render_report(report, fmt))
    sys.stdout.write(render_report(report, "text").decode())
    return 0


def cmd_infer(args, app) -> int:
    pipe = _pipeline(args, app)
    verdict = pipe.run(decode_image(args.image), args.image.name)
    print(verdict.to_json(include_timing=True))
    return 0


def cmd_batch(args, app) -> int:
    summary = run_batch(args.input, _pipeline(args, app), args.out, args.parallelism)
    print(json.dumps({"processed": summary.processed, "failed": summary.failed, "abnormal": summary.abnormal,
                      "ndjson": str(summary.ndjson), "summary": str(summary.summary_csv)}))
    return summary.exit_code


def cmd_gradcam(args, app) -> int:
    bundle = load_bundle(args.bundle)
    image = decode_image(args.image)
    x = preprocess(image, bundle.preprocessing)
    target = args.target_class
    if target is None:
        target = int(np.argmax(bundle.forward(x)[0]))
    hm = grad_cam(bundle, x, target)
    args.out.mkdir(parents=True, exist_ok=True)
    stem = args.image.stem
    path = overlay(hm, image, args.out / f"{stem}_gradcam.png", args.colormap,
                   label=bundle.spec.class_names[target], footer=args.footer)
    save_heatmap_csv(hm, args.out / f"{stem}_heatmap.csv")
    print(json.dumps({"overlay": str(path), "class": bundle.spec.class_names[target], "score": hm.score}))
    return 0


def cmd_sweep(args, app) -> int:
    bundle = load_bundle(args.bundle)
    records = [r for r in dataio.load_manifest(args.manifest) if r.split == args.split]
    if bundle.spec.head != TRIAGE_HEAD:
        records = [r for r in records if r.is_abnormal]
    if not records:
        raise ConfigError(f"split {args.split!r} has no usable records")
    scores, labels = predict_records(bundle, records, _root(app, args.manifest))
    if bundle.spec.head == TRIAGE_HEAD:
        scores, labels, names = scores[:, 1:], labels[:, 1:], ["Abnormal"]
    else:
        names = bundle.spec.class_names
    data = render_sweep(threshold_sweep(scores, labels, args.grid, names))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "threshold_sweep.csv").write_bytes(data)
    sys.stdout.write(data.decode())
    return 0


def cmd_report(args, app) -> int:
    report = report_from_json(json.loads(args.input.read_text()))
    sys.stdout.write(render_report(report, args.format).decode())
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train-triage": cmd_train, "train-classifier": cmd_train,
            "eval": cmd_eval, "infer": cmd_infer, "batch": cmd_batch, "gradcam": cmd_gradcam,
            "sweep-threshold": cmd_sweep, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        app = _app(args)
        return COMMANDS[args.command](args, app)
    except (ConfigError, BundleError, dataio.ManifestError, FileNotFoundError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
