"""Two-stage triage engine, batch processing and the train/evaluate workflows behind the CLI."""

from __future__ import annotations

import csv
import io
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dataio
from .dataio import PATHOLOGIES, SampleRecord
from .evaluation import EvalReport, binary_report, evaluate
from .explain import grad_cam, overlay
from .networks import (MULTIPATH_HEAD, TRIAGE_HEAD, ModelBundle, build_triage_net, load_bundle,
                       multipath_spec, save_bundle, transplant_extractor)
from .preprocess import AugmentConfig, PreprocessConfig, decode_image, preprocess
from .training import (ArrayDataset, TrainConfig, TrainResult, compute_weights, pathology_stats,
                       split_records, train_single_phase, train_two_phase, write_history)

log = logging.getLogger(__name__)

VERDICT_SCHEMA = 1
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".pgm", ".tif", ".tiff", ".bmp"}


class ConfigError(ValueError):
    pass


def _check_threshold(name: str, t: float) -> None:
    if not 0.0 < t < 1.0:
        raise ConfigError(f"{name} must be in (0, 1), got {t}")


@dataclass
class PipelineConfig:
    stage1_bundle: str = ""
    stage2_bundle: str = ""
    stage1_threshold: float = 0.5
    stage2_threshold: float = 0.5
    emit_heatmaps: bool = False
    output_dir: str = "out"

    def __post_init__(self):
        _check_threshold("stage1_threshold", self.stage1_threshold)
        _check_threshold("stage2_threshold", self.stage2_threshold)


@dataclass
class DataConfig:
    manifest: str = ""
    root: str = ""
    n_patients: int = 600
    image_size: int = 96


@dataclass
class NetworkConfig:
    width_scale: float = 1.0
    input_size: int = 224


@dataclass
class AppConfig:
    """The single JSON document driving every subcommand."""

    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


_SECTIONS = {"data": DataConfig, "preprocess": PreprocessConfig, "network": NetworkConfig,
             "train": TrainConfig, "pipeline": PipelineConfig}


def config_from_dict(doc: dict) -> AppConfig:
    """Build an AppConfig, naming the offending key on any validation error."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    kwargs = {}
    for key, cls in _SECTIONS.items():
        section = doc.get(key, {})
        if not isinstance(section, dict):
            raise ConfigError(f"{key}: expected an object")
        fields = set(cls.__dataclass_fields__)
        bad = set(section) - fields
        if bad:
            raise ConfigError(f"{key}: unknown key(s) {sorted(bad)}")
        try:
            if key == "train" and "augment" in section:
                section = dict(section, augment=AugmentConfig(**section["augment"]))
            kwargs[key] = cls(**section)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from None
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed: expected an integer")
    size = kwargs["network"].input_size
    if kwargs["preprocess"].target_size != (size, size):
        raise ConfigError(f"preprocess.target_size {list(kwargs['preprocess'].target_size)} "
                          f"must equal network.input_size {size}")
    return AppConfig(seed=seed, **kwargs)


def load_config(path: str | Path | None) -> AppConfig:
    if path is None:
        return AppConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(doc)


# ---------------------------------------------------------------------------
# verdicts


@dataclass
class TriageVerdict:
    image_id: str
    stage1_probs: tuple[float, float]
    verdict: str
    stage2_scores: dict[str, float] | None = None
    flagged_pathologies: list[str] | None = None
    heatmaps: dict[str, str] | None = None
    timing: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if (self.verdict == "Abnormal") != (self.stage2_scores is not None):
            raise ValueError("stage-2 fields must be present exactly when the verdict is Abnormal")

    def record(self, include_timing: bool = False) -> dict:
        d = {"schema_version": VERDICT_SCHEMA, "image_id": self.image_id,
             "stage1_probs": {"normal": self.stage1_probs[0], "abnormal": self.stage1_probs[1]},
             "verdict": self.verdict}
        if self.stage2_scores is not None:
            d["stage2_scores"] = self.stage2_scores
            d["flagged_pathologies"] = self.flagged_pathologies
        if self.heatmaps:
            d["heatmaps"] = self.heatmaps
        if include_timing:
            d["timing"] = self.timing
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.record(include_timing), sort_keys=True)


class TriagePipeline:
    """Stage 1 always runs; stage 2 runs iff P(abnormal) >= stage1_threshold.

    Bundles are only read, so one instance can serve many threads.
    """

    def __init__(self, stage1: ModelBundle, stage2: ModelBundle, cfg: PipelineConfig | None = None):
        cfg = cfg or PipelineConfig()
        if stage1.spec.head != TRIAGE_HEAD:
            raise ConfigError(f"stage-1 bundle has head {stage1.spec.head!r}, expected {TRIAGE_HEAD!r}")
        if stage2.spec.head != MULTIPATH_HEAD:
            raise ConfigError(f"stage-2 bundle has head {stage2.spec.head!r}, expected {MULTIPATH_HEAD!r}")
        self.stage1, self.stage2, self.cfg = stage1, stage2, cfg
        self._lock = threading.Lock()
        self.stage1_calls = 0
        self.stage2_calls = 0

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "TriagePipeline":
        return cls(load_bundle(cfg.stage1_bundle), load_bundle(cfg.stage2_bundle), cfg)

    def _count(self, stage: int) -> None:
        with self._lock:
            if stage == 1:
                self.stage1_calls += 1
            else:
                self.stage2_calls += 1

    def stage1_probs(self, image: np.ndarray) -> np.ndarray:
        self._count(1)
        return self.stage1.forward(preprocess(image, self.stage1.preprocessing))[0].astype(np.float64)

    def stage2_scores(self, image: np.ndarray) -> np.ndarray:
        self._count(2)
        return self.stage2.forward(preprocess(image, self.stage2.preprocessing))[0].astype(np.float64)

    def gate(self, p_abnormal: float) -> bool:
        return p_abnormal >= self.cfg.stage1_threshold

    def run(self, image: np.ndarray, image_id: str = "image") -> TriageVerdict:
        t0 = time.perf_counter()
        probs = self.stage1_probs(image)
        timing = {"stage1": time.perf_counter() - t0}
        if not self.gate(float(probs[1])):
            return TriageVerdict(image_id, (float(probs[0]), float(probs[1])), "Normal", timing=timing)
        t1 = time.perf_counter()
        scores = self.stage2_scores(image)
        timing["stage2"] = time.perf_counter() - t1
        named = {c: float(s) for c, s in zip(PATHOLOGIES, scores)}
        flagged = [c for c, s in named.items() if s >= self.cfg.stage2_threshold]
        heatmaps = self._heatmaps(image, image_id, scores) if self.cfg.emit_heatmaps else None
        return TriageVerdict(image_id, (float(probs[0]), float(probs[1])), "Abnormal", named, flagged,
                             heatmaps, timing)

    def _heatmaps(self, image, image_id, scores) -> dict[str, str]:
        out = Path(self.cfg.output_dir) / "heatmaps"
        out.mkdir(parents=True, exist_ok=True)
        stem = image_id.replace("/", "_").rsplit(".", 1)[0]
        paths = {}
        hm = grad_cam(self.stage1, preprocess(image, self.stage1.preprocessing), 1)
        paths["stage1"] = str(overlay(hm, image, out / f"{stem}_stage1.png", label="Abnormal"))
        top = int(np.argmax(scores))
        hm = grad_cam(self.stage2, preprocess(image, self.stage2.preprocessing), top)
        paths["stage2"] = str(overlay(hm, image, out / f"{stem}_stage2.png", label=PATHOLOGIES[top]))
        return paths


def run_pipeline(image: np.ndarray | str | Path, cfg: PipelineConfig,
                 pipeline: TriagePipeline | None = None) -> TriageVerdict:
    pipeline = pipeline or TriagePipeline.from_config(cfg)
    if isinstance(image, (str, Path)):
        return pipeline.run(decode_image(image), Path(image).name)
    return pipeline.run(image)


# ---------------------------------------------------------------------------
# batch mode


@dataclass
class BatchSummary:
    processed: int
    failed: int
    abnormal: int
    ndjson: Path
    summary_csv: Path

    @property
    def exit_code(self) -> int:
        return 1 if self.failed else 0


def collect_inputs(source: str | Path) -> list[tuple[str, Path]]:
    """(image id, path) pairs from a directory tree or a manifest CSV, sorted by id."""
    source = Path(source)
    if source.is_dir():
        items = [(p.relative_to(source).as_posix(), p) for p in source.rglob("*")
                 if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    elif source.suffix.lower() == ".csv":
        items = [(r.image_path, source.parent / r.image_path) for r in dataio.load_manifest(source)]
    else:
        raise FileNotFoundError(f"{source}: not a directory or manifest CSV")
    return sorted(items)


def run_batch(source: str | Path, pipeline: TriagePipeline, out_dir: str | Path,
              parallelism: int = 1) -> BatchSummary:
    """Process every image; output order depends only on the image ids."""
    items = collect_inputs(source)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def work(item):
        image_id, path = item
        try:
            return pipeline.run(decode_image(path), image_id).record()
        except Exception as exc:  # noqa: BLE001 - any per-image failure becomes an error record
            return {"schema_version": VERDICT_SCHEMA, "image_id": image_id,
                    "error": f"{type(exc).__name__}: {exc}"}

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            records = list(pool.map(work, items))
    else:
        records = [work(it) for it in items]

    ndjson = out_dir / "verdicts.ndjson"
    ndjson.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", "status", "verdict", "p_abnormal", "flagged"])
    for r in records:
        if "error" in r:
            w.writerow([r["image_id"], "error", "", "", r["error"]])
        else:
            w.writerow([r["image_id"], "ok", r["verdict"], repr(r["stage1_probs"]["abnormal"]),
                        "|".join(r.get("flagged_pathologies") or [])])
    summary = out_dir / "summary.csv"
    summary.write_text(buf.getvalue())
    failed = sum("error" in r for r in records)
    abnormal = sum(r.get("verdict") == "Abnormal" for r in records)
    return BatchSummary(len(records) - failed, failed, abnormal, ndjson, summary)


# ---------------------------------------------------------------------------
# training and evaluation workflows


def _datasets(records: list[SampleRecord], root, pre: PreprocessConfig, target: str):
    if target == "pathology":
        records = [r for r in records if r.is_abnormal]
    return (ArrayDataset(split_records(records, "train"), root, pre, target),
            ArrayDataset(split_records(records, "val"), root, pre, target))


def train_stage1(records, root, app: AppConfig, out_dir: str | Path, resume: bool = False,
                 **callbacks) -> TrainResult:
    """Train the Normal/Abnormal network on every train-split record."""
    out_dir = Path(out_dir)
    pre = app.preprocess
    train, val = _datasets(records, root, pre, "triage")
    bundle = build_triage_net(app.network.width_scale, app.seed, app.network.input_size)
    bundle.preprocessing = pre
    result = train_single_phase(bundle, train, val, app.train, checkpoint_dir=out_dir / "stage1_ckpt",
                                resume=resume, **callbacks)
    save_bundle(result.bundle, out_dir / "stage1.cxr")
    write_history(result.history, out_dir / "stage1_history.csv")
    return result


def train_stage2(records, root, stage1: ModelBundle, app: AppConfig, out_dir: str | Path,
                 resume: bool = False, **callbacks) -> TrainResult:
    """Transplant the stage-1 extractor and run the two-phase schedule on abnormal records."""
    out_dir = Path(out_dir)
    train, val = _datasets(records, root, stage1.preprocessing, "pathology")
    weights = compute_weights(pathology_stats(train.records))
    bundle = transplant_extractor(stage1, multipath_spec(stage1.spec.width_scale, stage1.spec.input_shape[1]),
                                  seed=app.seed + 1)
    result = train_two_phase(bundle, train, val, app.train, weights, checkpoint_dir=out_dir / "stage2_ckpt",
                             resume=resume, **callbacks)
    save_bundle(result.bundle, out_dir / "stage2.cxr")
    write_history(result.history, out_dir / "stage2_history.csv")
    return result


def predict_records(bundle: ModelBundle, records, root, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    target = "triage" if bundle.spec.head == TRIAGE_HEAD else "pathology"
    data = ArrayDataset(records, root, bundle.preprocessing, target)
    outs = [bundle.forward(data.batch(np.arange(i, min(i + batch_size, len(data))))[0])
            for i in range(0, len(data), batch_size)]
    return np.concatenate(outs).astype(np.float64), data.labels


def evaluate_bundle(bundle: ModelBundle, records, root, threshold: float | None = None) -> EvalReport:
    """Per-class report on ``records``; the pathology network only sees abnormal records."""
    threshold = bundle.threshold if threshold is None else threshold
    if bundle.spec.head == TRIAGE_HEAD:
        scores, labels = predict_records(bundle, records, root)
        return binary_report(scores[:, 1], labels[:, 1], threshold)
    records = [r for r in records if r.is_abnormal]
    scores, labels = predict_records(bundle, records, root)
    return evaluate(scores, labels, list(PATHOLOGIES), threshold)
