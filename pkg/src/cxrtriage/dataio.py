"""Manifest ingestion, label harmonization, patient-grouped splits and a synthetic CXR generator."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PATHOLOGIES = ("Atelectasis", "Cardiomegaly", "Consolidation", "Nodule/Mass", "Pleural thickening",
               "Pneumothorax", "Pulmonary fibrosis", "Pneumonia")
LABELS = PATHOLOGIES + ("Normal",)
NORMAL = len(PATHOLOGIES)
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}

MANIFEST_COLUMNS = ("image_path", "patient_id", "source", "split", "labels", "view")
SPLITS = ("train", "val", "test", "unassigned")


class ManifestError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass
class SampleRecord:
    image_path: str
    patient_id: str
    source: str
    split: str
    labels: np.ndarray
    view: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.labels.shape != (len(LABELS),):
            raise ValueError(f"labels must have length {len(LABELS)}")
        if self.labels[NORMAL] and self.labels[:NORMAL].any():
            raise ValueError("Normal is mutually exclusive with pathology labels")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    @property
    def label_names(self) -> list[str]:
        return [LABELS[i] for i in np.flatnonzero(self.labels)]

    @property
    def is_abnormal(self) -> bool:
        return bool(self.labels[:NORMAL].any())

    @property
    def pathology_vector(self) -> np.ndarray:
        return self.labels[:NORMAL]


def encode_labels(names) -> np.ndarray:
    vec = np.zeros(len(LABELS), dtype=np.int8)
    for name in names:
        vec[LABEL_INDEX[name]] = 1
    return vec


def load_manifest(path: str | Path) -> list[SampleRecord]:
    """Parse a manifest CSV; errors name the offending file line."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"{path}: missing column(s) {missing}")
        for row in reader:
            line = reader.line_num
            raw = (row["labels"] or "").strip()
            if not raw:
                raise ManifestError(f"{path} line {line}: empty labels field")
            names = [n.strip() for n in raw.split("|") if n.strip()]
            unknown = [n for n in names if n not in LABEL_INDEX]
            if unknown:
                raise ManifestError(f"{path} line {line}: unknown label(s) {unknown}")
            if "Normal" in names and len(set(names)) > 1:
                raise ManifestError(f"{path} line {line}: Normal combined with pathology labels {names}")
            split = (row["split"] or "unassigned").strip()
            if split not in SPLITS:
                raise ManifestError(f"{path} line {line}: unknown split {split!r}")
            records.append(SampleRecord(row["image_path"], row["patient_id"], row["source"], split,
                                        encode_labels(names), row["view"] or ""))
    return records


def write_manifest(records, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow([r.image_path, r.patient_id, r.source, r.split, "|".join(r.label_names), r.view])


# ---------------------------------------------------------------------------
# harmonization

OUT_OF_SCOPE = ("Hernia", "Edema", "Effusion", "Emphysema", "Infiltration", "Aortic enlargement",
                "Calcification", "ILD", "Lung Opacity", "Other lesion", "Pleural effusion")

_DEFAULT_MAP = {
    "Mass": "Nodule/Mass",
    "Nodule": "Nodule/Mass",
    "No Finding": "Normal",
    "No finding": "Normal",
    "NORMAL": "Normal",
    "PNEUMONIA": "Pneumonia",
    "Fibrosis": "Pulmonary fibrosis",
    "Pleural_Thickening": "Pleural thickening",
    "Pleural Thickening": "Pleural thickening",
}


class HarmonizationTable:
    """Maps (source, source label) to canonical label names.

    Lookups try the source-specific entry first, then the wildcard source
    ``*``.  Canonical names always map to themselves.
    """

    def __init__(self, entries: dict[tuple[str, str], str] | None = None):
        self.entries: dict[tuple[str, str], str] = {("*", k): v for k, v in _DEFAULT_MAP.items()}
        self.entries.update(entries or {})

    @classmethod
    def from_csv(cls, path: str | Path) -> "HarmonizationTable":
        entries = {}
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                entries[(row["source"], row["source_label"])] = row["target_label"]
        return cls(entries)

    def lookup(self, label: str, source: str) -> tuple[list[str], str | None]:
        label = label.strip()
        if label in LABEL_INDEX:
            return [label], None
        target = self.entries.get((source, label), self.entries.get(("*", label)))
        if target:
            if target not in LABEL_INDEX:
                return [], f"mapped to non-canonical label {target!r}"
            return [target], None
        if label in OUT_OF_SCOPE or target == "":
            return [], "out-of-scope label"
        return [], "unknown label"


DEFAULT_TABLE = HarmonizationTable()


def harmonize(source_label: str, source: str, table: HarmonizationTable | None = None) -> list[str]:
    names, reason = (table or DEFAULT_TABLE).lookup(source_label, source)
    if reason:
        log.warning("dropping label %r from %s: %s", source_label, source, reason)
    return names


def harmonize_labels(raw_labels, source: str, table: HarmonizationTable | None = None):
    """Harmonize a sample's raw label list.

    Returns ``(names, reason)``; ``names`` is empty and ``reason`` set when the
    sample must be dropped.  A Normal label is discarded when real
    pathologies survive the mapping.
    """
    names: list[str] = []
    for lab in raw_labels:
        for n in harmonize(lab, source, table):
            if n not in names:
                names.append(n)
    if not names:
        return [], "no in-scope labels"
    if "Normal" in names and len(names) > 1:
        names.remove("Normal")
    return sorted(names, key=LABEL_INDEX.get), None


# ---------------------------------------------------------------------------
# splitting and statistics


def _quota(total: int, fractions) -> list[int]:
    raw = [total * f for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (counts[i] - raw[i], i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def split_by_patient(records: list[SampleRecord], fractions=(0.70, 0.20, 0.10),
                     seed: int = 0) -> list[SampleRecord]:
    """Assign train/val/test so that each patient lands in exactly one split.

    Patients are visited largest group first (seeded random order within a
    size) and each goes to the split currently furthest below its
    sample-count quota; the small groups visited last fill the remainders.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must sum to 1, got {fractions}")
    groups: dict[str, list[int]] = defaultdict(list)
    for i, r in enumerate(records):
        groups[r.patient_id].append(i)
    if len(groups) < 3:
        raise SplitError(f"need at least 3 patients to split, got {len(groups)}")
    patients = sorted(groups)
    keys = np.random.default_rng(seed).permutation(len(patients))
    order = sorted(range(len(patients)), key=lambda p: (-len(groups[patients[p]]), keys[p]))
    quota = _quota(len(records), fractions)
    filled = [0, 0, 0]
    names = SPLITS[:3]
    out = list(records)
    for p in order:
        idx = groups[patients[p]]
        k = max(range(3), key=lambda s: (quota[s] - filled[s], -s))
        filled[k] += len(idx)
        for i in idx:
            r = records[i]
            out[i] = SampleRecord(r.image_path, r.patient_id, r.source, names[k], r.labels.copy(), r.view)
    return out


@dataclass
class ClassStats:
    class_names: list[str]
    positives: np.ndarray
    n_samples: int
    n_patients: int
    zero_positive: list[str] = field(default_factory=list)
    zero_negative: list[str] = field(default_factory=list)

    @property
    def negatives(self) -> np.ndarray:
        return self.n_samples - self.positives

    @property
    def freq_p(self) -> np.ndarray:
        return self.positives / self.n_samples

    @property
    def freq_n(self) -> np.ndarray:
        return 1.0 - self.freq_p

    def __add__(self, other: "ClassStats") -> "ClassStats":
        """Counts of two disjoint record sets."""
        if self.class_names != other.class_names:
            raise ValueError("class lists differ")
        return _stats(self.class_names, self.positives + other.positives,
                      self.n_samples + other.n_samples, self.n_patients + other.n_patients)


def _stats(names, positives, m, n) -> ClassStats:
    positives = np.asarray(positives, dtype=np.int64)
    zero_p = [c for c, p in zip(names, positives) if p == 0]
    zero_n = [c for c, p in zip(names, positives) if p == m]
    for c in zero_p:
        log.warning("class %s has no positive samples", c)
    return ClassStats(list(names), positives, int(m), int(n), zero_p, zero_n)


def compute_class_stats(records: list[SampleRecord], classes=LABELS) -> ClassStats:
    if not records:
        raise ValueError("cannot compute class statistics of an empty record set")
    idx = [LABEL_INDEX[c] for c in classes]
    labels = np.stack([r.labels for r in records])[:, idx]
    return _stats(classes, labels.sum(axis=0), len(records), len({r.patient_id for r in records}))


# ---------------------------------------------------------------------------
# synthetic radiographs


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def _smooth_noise(rng, size, cells):
    coarse = rng.random((cells, cells))
    reps = int(np.ceil(size / cells))
    up = np.kron(coarse, np.ones((reps, reps)))[:size, :size]
    k = max(1, reps // 2)
    kernel = np.ones(2 * k + 1) / (2 * k + 1)
    up = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 0, up)
    return np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 1, up)


class _Anatomy:
    """Jittered base chest geometry in unit coordinates."""

    def __init__(self, rng, size):
        self.size = size
        j = lambda s: float(rng.uniform(-s, s))  # noqa: E731
        self.lungs = [(0.50 + j(0.02), 0.30 + j(0.02), 0.30 + j(0.02), 0.14 + j(0.01)),
                      (0.50 + j(0.02), 0.70 + j(0.02), 0.30 + j(0.02), 0.14 + j(0.01))]
        self.heart = (0.64 + j(0.02), 0.46 + j(0.02), 0.11 + j(0.01), 0.10 + j(0.01))
        self.lung_level = 0.20 + j(0.03)
        self.body_level = 0.50 + j(0.04)

    def grid(self):
        yy, xx = np.mgrid[0:self.size, 0:self.size] / float(self.size)
        return yy, xx


def _draw_base(rng, anat: _Anatomy) -> np.ndarray:
    yy, xx = anat.grid()
    img = np.full((anat.size, anat.size), 0.05)
    img[_ellipse(yy, xx, 0.52, 0.5, 0.47, 0.44)] = anat.body_level
    for cy, cx, ry, rx in anat.lungs:
        img[_ellipse(yy, xx, cy, cx, ry, rx)] = anat.lung_level
    spine = (np.abs(xx - 0.5) < 0.05) & (yy > 0.1)
    img[spine] = anat.body_level + 0.12
    cy, cx, ry, rx = anat.heart
    img[_ellipse(yy, xx, cy, cx, ry, rx)] = anat.body_level + 0.08
    lung_mask = np.zeros_like(img, dtype=bool)
    for cy, cx, ry, rx in anat.lungs:
        lung_mask |= _ellipse(yy, xx, cy, cx, ry, rx)
    ribs = (np.sin(yy * np.pi * 14 + 0.8 * np.abs(xx - 0.5) * 10) > 0.85) & lung_mask
    img[ribs] += 0.05
    return img


def _draw_finding(name, rng, img, anat: _Anatomy) -> dict:
    """Draw one finding primitive in place and return its description."""
    yy, xx = anat.grid()
    side = int(rng.integers(0, 2))
    cy, cx, ry, rx = anat.lungs[side]
    sgn = -1 if side == 0 else 1
    if name == "Nodule/Mass":
        py, px = cy + rng.uniform(-0.15, 0.1), cx + rng.uniform(-0.06, 0.06)
        r = rng.uniform(0.035, 0.06)
        m = _ellipse(yy, xx, py, px, r, r * rng.uniform(0.8, 1.2))
        img[m] += 0.45
        return {"primitive": "bright_ellipse", "center": [py, px], "radius": r}
    if name == "Cardiomegaly":
        hy, hx, hry, hrx = anat.heart
        m = _ellipse(yy, xx, hy - 0.02, hx, hry * 1.5, hrx * 1.9)
        img[m] = np.maximum(img[m], anat.body_level + 0.08)
        return {"primitive": "enlarged_heart", "scale": 1.9}
    if name == "Pneumothorax":
        band = _ellipse(yy, xx, cy, cx, ry, rx) & (yy < cy - ry + rng.uniform(0.16, 0.22))
        img[band] = 0.0
        return {"primitive": "apical_dark_band", "side": side}
    if name == "Pneumonia":
        haze = _smooth_noise(rng, anat.size, 12)
        m = _ellipse(yy, xx, cy + 0.1, cx, ry * 0.55, rx * 0.95)
        img[m] += 0.35 * haze[m] + 0.1
        return {"primitive": "texture_haze", "side": side}
    if name == "Atelectasis":
        m = _ellipse(yy, xx, cy + ry * 0.6, cx, 0.025, rx * 0.9, angle=sgn * 0.25)
        img[m] += 0.4
        return {"primitive": "basal_plate_band", "side": side}
    if name == "Consolidation":
        py = cy + rng.uniform(-0.05, 0.1)
        m = np.zeros_like(img, dtype=bool)
        for _ in range(3):
            m |= _ellipse(yy, xx, py + rng.uniform(-0.05, 0.05), cx + rng.uniform(-0.04, 0.04), 0.07, 0.06)
        m &= _ellipse(yy, xx, cy, cx, ry, rx)
        img[m] = anat.body_level + 0.15
        return {"primitive": "dense_lobar_patch", "side": side}
    if name == "Pleural thickening":
        outer = _ellipse(yy, xx, cy, cx, ry, rx)
        inner = _ellipse(yy, xx, cy, cx, ry - 0.03, rx - 0.03)
        m = outer & ~inner & (np.abs(xx - 0.5) > abs(cx - 0.5))
        img[m] += 0.4
        return {"primitive": "lateral_rim", "side": side}
    if name == "Pulmonary fibrosis":
        lung = np.zeros_like(img, dtype=bool)
        for ly, lx, lry, lrx in anat.lungs:
            lung |= _ellipse(yy, xx, ly, lx, lry, lrx)
        period = rng.uniform(0.045, 0.06)
        lines = ((np.mod(yy, period) < 0.012) | (np.mod(xx + 0.3 * yy, period) < 0.012)) & lung & (yy > 0.45)
        img[lines] += 0.3
        return {"primitive": "reticular_lines", "period": period}
    raise ValueError(f"no generator for {name!r}")


@dataclass
class SyntheticSpec:
    normal_fraction: float = 0.4
    second_finding_prob: float = 0.25
    images_per_patient: int = 1
    noise: float = 0.02


def synthetic_image(labels: list[str], rng: np.random.Generator, size: int,
                    spec: SyntheticSpec | None = None) -> tuple[np.ndarray, list[dict]]:
    spec = spec or SyntheticSpec()
    anat = _Anatomy(rng, size)
    img = _draw_base(rng, anat)
    drawn = [dict(label=name, **_draw_finding(name, rng, img, anat)) for name in labels if name != "Normal"]
    img = img + rng.normal(0.0, spec.noise, img.shape)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8), drawn


def generate_synthetic(n_patients: int, image_size: int = 96, seed: int = 0,
                       out_dir: str | Path = "synthetic", spec: SyntheticSpec | None = None,
                       split: bool = True) -> tuple[Path, list[SampleRecord]]:
    """Write procedurally drawn radiographs plus ``manifest.csv`` and ``findings.json``.

    Primary findings follow the requested mixture exactly (largest-remainder
    rounding: ``normal_fraction`` Normal, the rest spread evenly over the 8
    pathologies); abnormal patients may carry one extra random finding.
    """
    from PIL import Image

    if n_patients < 3:
        raise ValueError("n_patients must be >= 3")
    spec = spec or SyntheticSpec()
    # independent streams: reusing ``seed`` for the split would replay the
    # class permutation and correlate split membership with the labels
    draw_seq, split_seq = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(draw_seq)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    fractions = [(1 - spec.normal_fraction) / len(PATHOLOGIES)] * len(PATHOLOGIES) + [spec.normal_fraction]
    counts = _quota(n_patients, fractions)
    primaries = [LABELS[i] for i, c in enumerate(counts) for _ in range(c)]
    primaries = [primaries[i] for i in rng.permutation(n_patients)]

    records, ledger = [], []
    for p, primary in enumerate(primaries):
        names = [primary]
        if primary != "Normal" and rng.random() < spec.second_finding_prob:
            extra = [c for c in PATHOLOGIES if c != primary]
            names.append(extra[int(rng.integers(0, len(extra)))])
        names.sort(key=LABEL_INDEX.get)
        pid = f"P{p:05d}"
        for k in range(spec.images_per_patient):
            img, drawn = synthetic_image(names, rng, image_size, spec)
            rel = f"images/{pid}_{k}.png"
            Image.fromarray(img).save(out / rel)
            records.append(SampleRecord(rel, pid, "synthetic", "unassigned", encode_labels(names), "PA"))
            ledger.append({"image_path": rel, "primary": primary, "labels": names, "drawn": drawn})
    if split:
        records = split_by_patient(records, seed=int(split_seq.generate_state(1)[0]))
    write_manifest(records, out / "manifest.csv")
    (out / "findings.json").write_text(json.dumps(ledger, indent=1, default=float))
    return out / "manifest.csv", records


def label_histogram(records) -> Counter:
    return Counter(name for r in records for name in r.label_names)
