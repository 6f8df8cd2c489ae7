import json

import numpy as np
import pytest

from kwta_ensemble.report import build_report, parse_grouping, render_markdown
from kwta_ensemble.stats import kruskal_wallis, summarize
from kwta_ensemble.train import PAPER_SEEDS, PAPER_VARIANTS, RunRecord, TrainConfig


def fake_record(family, d, M, seed, acc, dataset="wdbc", n_classes=2):
    per_class = [[acc] * M + [acc] for _ in range(n_classes)]
    return RunRecord(
        TrainConfig(dataset=dataset, family=family, d=d, M=M, seed=seed),
        test_accuracy=acc,
        per_class_subnet_accuracy=per_class,
    )


def full_cell(M=2, dataset="wdbc", offset=0.0):
    r = np.random.default_rng(M)
    records = []
    for i, (family, d) in enumerate(PAPER_VARIANTS):
        for seed in PAPER_SEEDS:
            records.append(fake_record(family, d, M, seed, float(0.9 + offset * i + 0.01 * r.random()), dataset))
    return records


def test_avg_row_equals_summarize():
    records = full_cell()
    report = build_report(records)
    (table,) = report["tables"]
    ce = next(c for c in table["columns"] if c["family"] == "cooperative")
    raw = [r.test_accuracy for r in records if r.config.family == "cooperative"]
    assert (ce["avg"], ce["max"], ce["std"]) == summarize(raw)
    assert ce["n"] == 10


def test_six_group_test_and_flag():
    report = build_report(full_cell(offset=0.02))
    test = report["tables"][0]["test"]
    assert len(test["groups"]) == 6 and test["df"] == 5
    assert test["flag"] == "*"
    groups = [[r.test_accuracy for r in full_cell(offset=0.02) if (r.config.family, r.config.d) == v] for v in PAPER_VARIANTS]
    assert test["H"] == kruskal_wallis(groups).H
    md = render_markdown(report)
    assert "* H = " in md and "df = 5" in md


def test_not_significant_marked_ns():
    md = render_markdown(build_report(full_cell(offset=0.0)))
    assert "(ns) H = " in md


def test_json_twin_reproduces_markdown():
    report = build_report(full_cell() + full_cell(M=3))
    twin = json.loads(json.dumps(report))
    assert render_markdown(twin) == render_markdown(report)


def test_missing_cells_not_fabricated():
    records = [r for r in full_cell() if r.config.family != "moe"]
    report = build_report(records)
    moe = next(c for c in report["tables"][0]["columns"] if c["family"] == "moe")
    assert moe["n"] == 0 and "avg" not in moe
    assert len(report["tables"][0]["test"]["groups"]) == 5
    assert "| n/a |" in render_markdown(report)


def test_partial_grid_single_group_has_no_test():
    records = [fake_record("cooperative", 0, 2, s, 0.9) for s in PAPER_SEEDS[:3]]
    report = build_report(records)
    assert report["tables"][0]["test"] is None
    assert "not enough groups" in render_markdown(report)


def test_failed_records_excluded_and_empty_rejected():
    bad = fake_record("kwta", 0, 2, 42, None)
    bad.status = "failed"
    with pytest.raises(ValueError):
        build_report([bad])


def test_fashion_and_kmnist_tables_render():
    records = full_cell(dataset="fashion") + full_cell(dataset="kmnist") + full_cell(dataset="wdbc")
    md = render_markdown(build_report(records))
    assert md.index("## Fashion-MNIST, 2") < md.index("## KMNIST, 2") < md.index("## WDBC, 2")


def test_grouping_options():
    assert parse_grouping("paper") == list(PAPER_VARIANTS)
    assert parse_grouping("all") is None
    assert parse_grouping("kwta:3, moe") == [("kwta", 3), ("moe", 0)]
    records = full_cell() + [fake_record("independent", 0, 2, s, 0.95) for s in PAPER_SEEDS]
    labels = [c["label"] for c in build_report(records, grouping="all")["tables"][0]["columns"]]
    assert labels[-1] == "IE" and len(labels) == 7
    sub = build_report(records, grouping="kwta:3,cooperative")
    assert [c["label"] for c in sub["tables"][0]["columns"]] == ["kWTA-ENN d=3", "CE"]


def test_sample_std_option():
    records = full_cell()
    a = build_report(records)["tables"][0]["columns"][0]["std"]
    b = build_report(records, sample_std=True)
    assert b["std_divisor"] == "n-1"
    assert b["tables"][0]["columns"][0]["std"] == pytest.approx(a * np.sqrt(10 / 9))


def test_per_class_means():
    records = [fake_record("kwta", 0, 2, s, a) for s, a in zip(PAPER_SEEDS[:2], (0.8, 1.0))]
    records[0].per_class_subnet_accuracy[1][0] = None
    (pc,) = build_report(records)["per_class"]
    assert pc["matrix"][0] == pytest.approx([0.9, 0.9, 0.9])
    assert pc["matrix"][1][0] == 1.0
