"""Report protocol: document structure, CSV flattening, figure files."""

from __future__ import annotations

import csv
import json
import math

import pytest

from persona.reports import build_report, holdout_split


@pytest.fixture(scope="module")
def report(shared_run, tmp_path_factory):
    ckpt, ds = shared_run
    out = tmp_path_factory.mktemp("report")
    doc = build_report(ckpt, ds.root, out, n_alphas=3)
    return doc, out


def test_holdout_split_is_disjoint_and_complete():
    train, hold = holdout_split(10, 3)
    assert sorted(train + hold) == list(range(10))
    assert set(train).isdisjoint(hold)
    assert holdout_split(5, 1) == (list(range(5)), [])


def test_report_document_structure(report, shared_run):
    doc, _ = report
    _, ds = shared_run
    assert doc["dataset"]["subjects"] == ds.subject_ids
    recon = doc["reconstruction"]
    assert set(recon["per_subject"]) == set(ds.subject_ids)
    for entry in recon["per_subject"].values():
        assert math.isfinite(entry["train"]["psnr"])
        assert 0.0 <= entry["train"]["ssim"] <= 1.0
    assert "train" in recon["summary"] and "holdout" in recon["summary"]


def test_report_swap_section_covers_all_pairs(report, shared_run):
    doc, _ = report
    _, ds = shared_run
    pairs = doc["swaps"]["pairs"]
    # per category: each subject against zero and every other subject
    expected = sum(
        len(subs) * len(subs) for subs in ds.subjects_by_category().values()
    )
    assert len(pairs) == expected
    for row in pairs:
        assert row["outside_mean_abs"] >= 0.0
    assert doc["swaps"]["worst_outside_mean_abs"] == max(
        r["outside_mean_abs"] for r in pairs
    )


def test_report_interpolation_and_distribution_sections(report):
    doc, _ = report
    interp = doc["interpolation"]
    assert len(interp["alphas"]) == 3
    assert interp["pairs"], "expected at least one same-category pair"
    for row in interp["pairs"]:
        assert row["ppl"] >= 0.0
        assert math.isfinite(row["masked_loss"])
    assert interp["plan"]["n_alphas"] == 3
    dist = doc["distributions"]
    assert dist["fid"] >= 0.0
    assert math.isfinite(dist["kid"])


def test_report_files_on_disk(report):
    doc, out = report
    saved = json.loads((out / "report.json").read_text())
    assert saved["reconstruction"]["summary"] == doc["reconstruction"]["summary"]
    for rel in doc["figures"]:
        assert (out / rel).exists(), rel
    assert (out / "figures" / "history.png").exists()  # trainer meta was present


def test_report_csv_is_flat_and_numeric(report):
    _, out = report
    with open(out / "report.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["section", "item", "metric", "value"]
    body = rows[1:]
    assert len(body) > 10
    sections = {r[0] for r in body}
    assert {"reconstruction", "swap", "interpolation", "distributions"} <= sections
    for r in body:
        float(r[3])  # every value parses as a number
