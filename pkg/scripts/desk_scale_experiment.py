"""Desk-scale end-to-end run: synthetic data, stage-1 and stage-2 training, held-out evaluation.

    python scripts/desk_scale_experiment.py --out runs/desk --patients 600
"""

import argparse
import json
import logging
import time
from pathlib import Path

from cxrtriage import dataio
from cxrtriage.evaluation import render_report
from cxrtriage.networks import load_bundle
from cxrtriage.pipeline import AppConfig, NetworkConfig, evaluate_bundle, train_stage1, train_stage2
from cxrtriage.training import split_records


def run(out: Path, patients: int = 600, image_size: int = 96, width_scale: float = 1.0, seed: int = 0) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    manifest, records = dataio.generate_synthetic(patients, image_size, seed, out / "data")
    root = manifest.parent
    app = AppConfig(seed=seed, network=NetworkConfig(width_scale=width_scale))
    app.train.seed = seed

    t1 = time.perf_counter()
    s1 = train_stage1(records, root, app, out)
    t2 = time.perf_counter()
    s2 = train_stage2(records, root, s1.bundle, app, out)
    t3 = time.perf_counter()

    test = split_records(records, "test")
    rep1 = evaluate_bundle(load_bundle(out / "stage1.cxr"), test, root)
    rep2 = evaluate_bundle(load_bundle(out / "stage2.cxr"), test, root)
    for name, rep in (("stage1", rep1), ("stage2", rep2)):
        (out / f"{name}_report.txt").write_bytes(render_report(rep, "text"))
        (out / f"{name}_report.csv").write_bytes(render_report(rep, "csv"))
    t4 = time.perf_counter()

    summary = {
        "patients": patients, "image_size": image_size, "width_scale": width_scale, "seed": seed,
        "stage1_auc": rep1["Abnormal"].auc, "stage2_macro_auc": rep2.average()["auc"],
        "stage2_auc": {r.name: r.auc for r in rep2.rows},
        "n_test": len(test), "n_test_abnormal": sum(r.is_abnormal for r in test),
        "seconds": {"data": t1 - t0, "stage1": t2 - t1, "stage2": t3 - t2, "eval": t4 - t3, "total": t4 - t0},
        "stage1_epochs": len(s1.history), "stage2_epochs": len(s2.history),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--patients", type=int, default=600)
    ap.add_argument("--image-size", type=int, default=96)
    ap.add_argument("--width-scale", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    summary = run(args.out, args.patients, args.image_size, args.width_scale, args.seed)
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
