"""Aggregate run records into comparison tables (markdown plus a JSON twin).

The markdown is always rendered from the JSON structure, so a saved JSON
report reproduces the same markdown exactly.
"""

from __future__ import annotations

import math
from collections import defaultdict

import numpy as np

from .stats import GroupSample, kruskal_wallis, significance_flag, summarize
from .train import PAPER_VARIANTS, RunRecord

__all__ = ["REPORT_SCHEMA_VERSION", "parse_grouping", "build_report", "render_markdown"]

REPORT_SCHEMA_VERSION = 1

DATASET_TITLES = {"mnist": "MNIST", "fashion": "Fashion-MNIST", "kmnist": "KMNIST", "wdbc": "WDBC"}
FAMILY_TITLES = {"kwta": "kWTA-ENN", "moe": "MoE", "cooperative": "CE", "independent": "IE"}
_FAMILY_ORDER = {"kwta": 0, "moe": 1, "cooperative": 2, "independent": 3}


def parse_grouping(spec: str) -> list[tuple[str, int]] | None:
    """``paper`` -> the six table columns, ``all`` -> None (every variant present),
    otherwise a comma list of ``family:d`` items."""
    if spec == "paper":
        return list(PAPER_VARIANTS)
    if spec == "all":
        return None
    out = []
    for item in spec.split(","):
        family, _, d = item.strip().partition(":")
        out.append((family, int(d or 0)))
    return out


def _variant_label(family: str, d: int) -> str:
    title = FAMILY_TITLES.get(family, family)
    return f"{title} d={d}" if family == "kwta" else title


def _variant_key(family: str, d: int):
    return (_FAMILY_ORDER.get(family, 9), family, d)


def build_report(records: list[RunRecord], grouping: str = "paper", sample_std: bool = False) -> dict:
    """Summaries per (dataset, M) and variant, an H test per cell, and per-class tables."""
    ok = [r for r in records if r.status == "ok" and r.test_accuracy is not None]
    if not ok:
        raise ValueError("no completed run records to report on")
    wanted = parse_grouping(grouping)

    cells: dict[tuple, dict[tuple, list[RunRecord]]] = defaultdict(lambda: defaultdict(list))
    for r in ok:
        c = r.config
        d = c.d if c.family == "kwta" else 0
        cells[(c.dataset, c.M)][(c.family, d)].append(r)

    tables = []
    for (dataset, M) in sorted(cells, key=lambda k: (list(DATASET_TITLES).index(k[0]) if k[0] in DATASET_TITLES else 99, k)):
        present = cells[(dataset, M)]
        variants = wanted if wanted is not None else sorted(present, key=lambda v: _variant_key(*v))
        columns = []
        groups = []
        for family, d in variants:
            runs = sorted(present.get((family, d), []), key=lambda r: r.config.seed)
            col = {"label": _variant_label(family, d), "family": family, "d": d, "n": len(runs)}
            if runs:
                values = [r.test_accuracy for r in runs]
                avg, best, std = summarize(values, sample_std=sample_std)
                col.update(
                    seeds=[r.config.seed for r in runs], values=values, avg=avg, max=best, std=std,
                )
                groups.append(GroupSample(col["label"], values))
            columns.append(col)
        test = None
        if len(groups) >= 2 and sum(len(g.values) for g in groups) >= 3:
            res = kruskal_wallis(groups)
            test = {
                "groups": [g.group_label for g in groups],
                "H": res.H,
                "df": res.df,
                "p_value": res.p_value,
                "tie_correction": res.tie_correction,
                "flag": significance_flag(res).value,
            }
        tables.append({"dataset": dataset, "M": M, "columns": columns, "test": test})

    per_class = []
    for (dataset, M), present in sorted(cells.items()):
        for (family, d), runs in sorted(present.items(), key=lambda kv: _variant_key(*kv[0])):
            mats = [r.per_class_subnet_accuracy for r in runs if r.per_class_subnet_accuracy]
            if not mats:
                continue
            arr = np.array([[[np.nan if v is None else v for v in row] for row in m] for m in mats], dtype=float)
            with np.errstate(invalid="ignore"):
                counts = np.sum(~np.isnan(arr), axis=0)
                mean = np.where(counts > 0, np.nansum(arr, axis=0) / np.maximum(counts, 1), np.nan)
            per_class.append({
                "dataset": dataset,
                "M": M,
                "family": family,
                "d": d,
                "n_runs": len(mats),
                "matrix": [[None if math.isnan(v) else float(v) for v in row] for row in mean],
            })

    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "grouping": grouping,
        "std_divisor": "n-1" if sample_std else "n",
        "tables": tables,
        "per_class": per_class,
    }


def _pct(x) -> str:
    return "n/a" if x is None else f"{100 * x:.2f}"


def _sci(p: float) -> str:
    if p == 0:
        return "0"
    exp = math.floor(math.log10(p))
    return f"{p / 10**exp:.2f} × 10^{exp}"


def render_markdown(report: dict) -> str:
    lines = ["# Test accuracy comparison", ""]
    lines.append(f"Accuracies in %, over seeds; STD uses divisor {report['std_divisor']}. "
                 "`*` marks p < 0.05 in a Kruskal-Wallis H test across the columns shown, `ns` not significant.")
    lines.append("")
    for t in report["tables"]:
        title = DATASET_TITLES.get(t["dataset"], t["dataset"])
        lines.append(f"## {title}, {t['M']} sub-networks")
        lines.append("")
        cols = t["columns"]
        lines.append("| Acc | " + " | ".join(c["label"] for c in cols) + " |")
        lines.append("|---|" + "---|" * len(cols))
        for stat in ("avg", "max", "std"):
            lines.append(f"| {stat.upper()} | " + " | ".join(_pct(c.get(stat)) for c in cols) + " |")
        lines.append("| runs | " + " | ".join(str(c["n"]) for c in cols) + " |")
        lines.append("")
        test = t["test"]
        if test is None:
            lines.append("H test: not enough groups with results.")
        else:
            mark = "*" if test["flag"] == "*" else "(ns)"
            lines.append(f"{mark} H = {test['H']:.2f}, p = {_sci(test['p_value'])} (df = {test['df']})")
        lines.append("")

    if report["per_class"]:
        lines.append("# Per-class test accuracy of each sub-network")
        lines.append("")
        for pc in report["per_class"]:
            title = DATASET_TITLES.get(pc["dataset"], pc["dataset"])
            label = _variant_label(pc["family"], pc["d"])
            lines.append(f"## {title}, {label}, {pc['M']} sub-networks (mean of {pc['n_runs']} runs)")
            lines.append("")
            n_sub = len(pc["matrix"][0]) - 1 if pc["matrix"] else 0
            header = [f"net {m + 1}" for m in range(n_sub)] + ["final"]
            lines.append("| class | " + " | ".join(header) + " |")
            lines.append("|---|" + "---|" * len(header))
            for c, row in enumerate(pc["matrix"]):
                lines.append(f"| {c} | " + " | ".join(_pct(v) for v in row) + " |")
            lines.append("")
    return "\n".join(lines).rstrip() + "\n"
