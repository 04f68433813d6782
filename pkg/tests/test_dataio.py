import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cxrtriage import dataio as D

HEADER = "image_path,patient_id,source,split,labels,view\n"


def _write(tmp_path, rows):
    p = tmp_path / "m.csv"
    p.write_text(HEADER + "".join(r + "\n" for r in rows))
    return p


def test_label_space_order():
    assert D.LABELS[3] == "Nodule/Mass" and D.LABELS[-1] == "Normal" and len(D.LABELS) == 9


def test_load_manifest_multi_hot(tmp_path):
    (rec,) = D.load_manifest(_write(tmp_path, ["a.png,p1,nih,train,Nodule/Mass|Atelectasis,PA"]))
    assert set(np.flatnonzero(rec.labels)) == {0, 3}
    assert rec.is_abnormal


@pytest.mark.parametrize("labels,needle", [("Normal|Pneumonia", "line 3"), ("", "empty labels"),
                                           ("Hernia", "unknown label")])
def test_load_manifest_errors_name_the_row(tmp_path, labels, needle):
    path = _write(tmp_path, ["a.png,p1,nih,train,Normal,PA", f"b.png,p2,nih,train,{labels},PA"])
    with pytest.raises(D.ManifestError, match=needle):
        D.load_manifest(path)


def test_load_manifest_missing_column(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("image_path,patient_id,split,labels\n")
    with pytest.raises(D.ManifestError, match="source"):
        D.load_manifest(p)


def test_manifest_roundtrip(tmp_path):
    recs = D.load_manifest(_write(tmp_path, ["a.png,p1,nih,train,Cardiomegaly,PA", "b.png,p2,vin,val,Normal,AP"]))
    D.write_manifest(recs, tmp_path / "out.csv")
    again = D.load_manifest(tmp_path / "out.csv")
    assert [(r.image_path, r.split, r.label_names) for r in again] == [(r.image_path, r.split, r.label_names)
                                                                       for r in recs]
    assert b"\r\n" not in (tmp_path / "out.csv").read_bytes()


@pytest.mark.parametrize("raw,expected", [("Mass", ["Nodule/Mass"]), ("Nodule", ["Nodule/Mass"]),
                                          ("No Finding", ["Normal"]), ("Fibrosis", ["Pulmonary fibrosis"]),
                                          ("Hernia", []), ("Edema", []), ("Infiltration", [])])
def test_harmonize_defaults(raw, expected):
    assert D.harmonize(raw, "nih") == expected


def test_harmonize_reason():
    assert D.DEFAULT_TABLE.lookup("Hernia", "nih") == ([], "out-of-scope label")


@pytest.mark.parametrize("name", D.LABELS)
def test_harmonize_idempotent_on_canonical(name):
    assert D.harmonize(name, "any") == [name]
    assert D.harmonize(D.harmonize(name, "any")[0], "any") == [name]


def test_harmonize_user_table(tmp_path):
    p = tmp_path / "map.csv"
    p.write_text("source,source_label,target_label\nvin,Lung tumor,Nodule/Mass\n")
    table = D.HarmonizationTable.from_csv(p)
    assert D.harmonize("Lung tumor", "vin", table) == ["Nodule/Mass"]
    assert D.harmonize("Lung tumor", "nih", table) == []
    assert D.harmonize("Mass", "nih", table) == ["Nodule/Mass"]


def test_harmonize_labels_drops_label_not_sample():
    assert D.harmonize_labels(["Mass", "Hernia"], "nih") == (["Nodule/Mass"], None)
    assert D.harmonize_labels(["Hernia"], "nih") == ([], "no in-scope labels")


def _records(patients, per_patient=1, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for p in range(patients):
        for k in range(per_patient if isinstance(per_patient, int) else per_patient[p]):
            out.append(D.SampleRecord(f"{p}_{k}.png", f"p{p}", "s", "unassigned",
                                      D.encode_labels([D.LABELS[int(rng.integers(0, 9))]])))
    return out


def test_split_exact_for_divisible_case():
    counts = Counter(r.split for r in D.split_by_patient(_records(1000), seed=3))
    assert counts == {"train": 700, "val": 200, "test": 100}


def test_split_groups_patients_and_is_deterministic():
    sizes = list(np.random.default_rng(0).integers(1, 6, 300))
    recs = _records(300, sizes)
    a = D.split_by_patient(recs, seed=9)
    b = D.split_by_patient(recs, seed=9)
    assert [r.split for r in a] == [r.split for r in b]
    by_patient = {}
    for r in a:
        by_patient.setdefault(r.patient_id, set()).add(r.split)
    assert all(len(s) == 1 for s in by_patient.values())


@given(st.lists(st.integers(1, 5), min_size=100, max_size=300), st.integers(0, 1000))
def test_split_fractions_within_two_percent(sizes, seed):
    recs = _records(len(sizes), sizes)
    counts = Counter(r.split for r in D.split_by_patient(recs, seed=seed))
    m = len(recs)
    for name, frac in zip(("train", "val", "test"), (0.7, 0.2, 0.1)):
        assert abs(counts[name] / m - frac) <= 0.02


def test_split_needs_three_patients():
    with pytest.raises(D.SplitError):
        D.split_by_patient(_records(2), seed=0)


def test_class_stats_counting():
    recs = [D.SampleRecord(f"{i}", f"p{i}", "s", "train", D.encode_labels(["Cardiomegaly" if i == 0 else "Normal"]))
            for i in range(4)]
    stats = D.compute_class_stats(recs)
    c = D.LABELS.index("Cardiomegaly")
    assert stats.freq_p[c] == 0.25 and stats.freq_n[c] == 0.75
    assert stats.n_samples == 4 and stats.n_patients == 4
    assert "Atelectasis" in stats.zero_positive


def test_class_stats_zero_negative_flag():
    recs = [D.SampleRecord(f"{i}", "p", "s", "train", D.encode_labels(["Normal"])) for i in range(3)]
    stats = D.compute_class_stats(recs)
    assert stats.freq_p[-1] == 1.0 and "Normal" in stats.zero_negative


@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 99))
def test_class_stats_additive_and_complementary(n1, n2, seed):
    a, b = _records(n1, seed=seed), _records(n2, seed=seed + 1)
    for i, r in enumerate(b):
        r.patient_id = f"q{i}"
    combined = D.compute_class_stats(a + b)
    summed = D.compute_class_stats(a) + D.compute_class_stats(b)
    assert np.array_equal(combined.positives, summed.positives)
    assert combined.n_samples == summed.n_samples and combined.n_patients == summed.n_patients
    np.testing.assert_allclose(combined.freq_p + combined.freq_n, 1.0, atol=1e-12)


def test_record_invariants():
    with pytest.raises(ValueError):
        D.SampleRecord("a", "p", "s", "train", D.encode_labels(["Normal"]) | D.encode_labels(["Pneumonia"]))
    with pytest.raises(ValueError):
        D.SampleRecord("a", "p", "s", "train", np.zeros(8))


def test_generator_deterministic_and_consistent(tmp_path):
    ma, ra = D.generate_synthetic(30, 48, seed=4, out_dir=tmp_path / "a")
    mb, _ = D.generate_synthetic(30, 48, seed=4, out_dir=tmp_path / "b")
    assert ma.read_bytes() == mb.read_bytes()
    for r in ra:
        assert (tmp_path / "a" / r.image_path).read_bytes() == (tmp_path / "b" / r.image_path).read_bytes()
    ledger = json.loads((tmp_path / "a" / "findings.json").read_text())
    for entry in ledger:
        if entry["labels"] == ["Normal"]:
            assert entry["drawn"] == []
        else:
            assert sorted(d["label"] for d in entry["drawn"]) == sorted(entry["labels"])


def test_generator_mixture(tmp_path):
    spec = D.SyntheticSpec(normal_fraction=0.4)
    _, recs = D.generate_synthetic(90, 32, seed=1, out_dir=tmp_path, spec=spec)
    ledger = json.loads((tmp_path / "findings.json").read_text())
    primaries = Counter(e["primary"] for e in ledger)
    assert primaries["Normal"] == 36
    assert all(primaries[c] in (6, 7) for c in D.PATHOLOGIES)
    assert sum(r.label_names == ["Normal"] for r in recs) == 36
    # secondary findings only add to the pathology counts
    hist = D.label_histogram(recs)
    assert all(hist[c] >= primaries[c] for c in D.PATHOLOGIES)


def test_generator_splits_not_correlated_with_labels(tmp_path):
    _, recs = D.generate_synthetic(300, 16, seed=0, out_dir=tmp_path)
    for split in ("train", "val", "test"):
        part = [r for r in recs if r.split == split]
        frac = sum(r.is_abnormal for r in part) / len(part)
        assert 0.4 <= frac <= 0.8, (split, frac)
