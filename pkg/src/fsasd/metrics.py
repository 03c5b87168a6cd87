"""AUC / pAUC / harmonic-mean total score for per-section ASD evaluation.

Per section n of machine type m:

* ``AUC[m, n, d]`` pairs the normal clips of domain d with *all* anomalous
  clips of the section.
* ``pAUC[m, n]`` pools both domains' normals and keeps only the
  ``floor(p * N-)`` highest-scoring ones (p = 0.1).
* The total score is the harmonic mean over every section's
  {AUC source, AUC target, pAUC}.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySet, MissingCell, PTooSmall
from .io import atomic_write_text

DEFAULT_P = 0.1
ROW_NAMES = ("AUC (source)", "AUC (target)", "pAUC (src & tgt)")
TOTAL_ROW = "TOTAL score"


def _check(normals, anomalies):
    normals = np.asarray(normals, dtype=np.float64).ravel()
    anomalies = np.asarray(anomalies, dtype=np.float64).ravel()
    if normals.size == 0:
        raise EmptySet("normals")
    if anomalies.size == 0:
        raise EmptySet("anomalies")
    return normals, anomalies


def _pair_wins(normals, anomalies, ties):
    """Sum over (normal, anomaly) pairs of H(a - n), ties weighted by ``ties``."""
    ref = np.sort(normals)
    below = np.searchsorted(ref, anomalies, side="left")
    equal = np.searchsorted(ref, anomalies, side="right") - below
    return float(below.sum()) + ties * float(equal.sum())


def _tie_weight(ties):
    if ties == "half":
        return 0.5
    if ties == "zero":
        return 0.0
    raise ValueError("ties must be 'half' or 'zero'")


def auc(normals, anomalies, ties: str = "half") -> float:
    """Fraction of (normal, anomaly) pairs ranked correctly, O(n log n).

    ``ties="zero"`` gives the literal step function H(0) = 0.
    """
    normals, anomalies = _check(normals, anomalies)
    return _pair_wins(normals, anomalies, _tie_weight(ties)) / (normals.size * anomalies.size)


def n_hardest(n_normals: int, p: float) -> int:
    # round() guards floor against products like 0.1 * 30 = 3.0000000000000004 going the other way
    return math.floor(round(p * n_normals, 9))


def pauc(normals, anomalies, p: float = DEFAULT_P, ties: str = "half") -> float:
    normals, anomalies = _check(normals, anomalies)
    k = n_hardest(normals.size, p)
    if k < 1:
        raise PTooSmall(f"floor({p} * {normals.size}) = 0 normals in the partial region")
    hardest = np.sort(normals)[::-1][:k]
    return _pair_wins(hardest, anomalies, _tie_weight(ties)) / (k * anomalies.size)


def auc_bruteforce(normals, anomalies, ties: str = "half") -> float:
    """Literal double sum over all pairs; reference for tests, O(n^2)."""
    w = _tie_weight(ties)
    total = 0.0
    for a in anomalies:
        for n in normals:
            total += 1.0 if a > n else (w if a == n else 0.0)
    return total / (len(normals) * len(anomalies))


def pauc_bruteforce(normals, anomalies, p: float = DEFAULT_P, ties: str = "half") -> float:
    ranked = sorted(normals, reverse=True)
    k = math.floor(round(p * len(ranked), 9))
    return auc_bruteforce(ranked[:k], anomalies, ties)


def hmean(values) -> float:
    values = [float(v) for v in values]
    if not values:
        raise ValueError("hmean of an empty set")
    if any(v < 0 for v in values):
        raise ValueError("hmean needs nonnegative values")
    if any(v == 0 for v in values):
        return 0.0
    return len(values) / sum(1.0 / v for v in values)


def amean(values) -> float:
    values = [float(v) for v in values]
    return sum(values) / len(values)


@dataclass(frozen=True)
class LabeledScore:
    score: float
    label: str  # normal | anomaly
    domain: str  # source | target
    section: int
    machine_type: str


@dataclass
class EvalReport:
    auc: dict = field(default_factory=dict)  # (m, n, d) -> AUC
    pauc: dict = field(default_factory=dict)  # (m, n) -> pAUC
    counts: dict = field(default_factory=dict)  # (m, n, d) -> N_d-, (m, n) -> (N_n-, N_n+)
    machine_rows: dict = field(default_factory=dict)  # m -> {row name -> value}
    row_hmean: dict = field(default_factory=dict)
    row_amean: dict = field(default_factory=dict)
    omega_hmean: float = 0.0
    omega_amean: float = 0.0
    p: float = DEFAULT_P
    seed: str = ""
    backend: str = ""
    config_digest: str = ""

    def machine_types(self):
        return sorted(self.machine_rows)

    def omega_values(self) -> list[float]:
        vals = []
        for (m, n) in sorted(self.pauc):
            vals += [self.auc[(m, n, "source")], self.auc[(m, n, "target")], self.pauc[(m, n)]]
        return vals


def _row_values(report, m=None):
    keys = sorted(k for k in report.pauc if m is None or k[0] == m)
    return {
        ROW_NAMES[0]: [report.auc[(mm, n, "source")] for mm, n in keys],
        ROW_NAMES[1]: [report.auc[(mm, n, "target")] for mm, n in keys],
        ROW_NAMES[2]: [report.pauc[k] for k in keys],
    }


def total_score(scores, p: float = DEFAULT_P, ties: str = "half") -> EvalReport:
    by_section = defaultdict(lambda: {"source": [], "target": [], "anomaly": []})
    for s in scores:
        cell = by_section[(s.machine_type, int(s.section))]
        if s.label == "anomaly":
            cell["anomaly"].append(s.score)
        elif s.label == "normal":
            if s.domain not in ("source", "target"):
                raise ValueError(f"normal clip with domain {s.domain!r}")
            cell[s.domain].append(s.score)
        else:
            raise ValueError(f"unknown label {s.label!r}")
    if not by_section:
        raise EmptySet("scores")
    report = EvalReport(p=p)
    for (m, n) in sorted(by_section):
        cell = by_section[(m, n)]
        if not cell["anomaly"]:
            raise MissingCell((m, n, "anomaly"))
        for d in ("source", "target"):
            if not cell[d]:
                raise MissingCell((m, n, d))
            report.auc[(m, n, d)] = auc(cell[d], cell["anomaly"], ties)
            report.counts[(m, n, d)] = len(cell[d])
        pooled = cell["source"] + cell["target"]
        report.pauc[(m, n)] = pauc(pooled, cell["anomaly"], p, ties)
        report.counts[(m, n)] = (len(pooled), len(cell["anomaly"]))
    for m in sorted({m for m, _ in report.pauc}):
        report.machine_rows[m] = {row: hmean(v) for row, v in _row_values(report, m).items()}
    for row, vals in _row_values(report).items():
        report.row_hmean[row] = hmean(vals)
        report.row_amean[row] = amean(vals)
    vals = report.omega_values()
    report.omega_hmean = hmean(vals)
    report.omega_amean = amean(vals)
    return report


def average_reports(reports, seed_label: str = "average") -> EvalReport:
    """Cell-wise arithmetic mean of per-seed reports (incl. the total scores)."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    first = reports[0]
    for r in reports[1:]:
        if set(r.auc) != set(first.auc) or set(r.pauc) != set(first.pauc):
            raise ValueError("reports cover different sections")

    def mean_of(get):
        return amean(get(r) for r in reports)

    out = EvalReport(p=first.p, seed=seed_label, backend=first.backend,
                     config_digest=first.config_digest, counts=dict(first.counts))
    out.auc = {k: mean_of(lambda r: r.auc[k]) for k in first.auc}
    out.pauc = {k: mean_of(lambda r: r.pauc[k]) for k in first.pauc}
    out.machine_rows = {m: {row: mean_of(lambda r: r.machine_rows[m][row]) for row in rows}
                        for m, rows in first.machine_rows.items()}
    out.row_hmean = {row: mean_of(lambda r: r.row_hmean[row]) for row in first.row_hmean}
    out.row_amean = {row: mean_of(lambda r: r.row_amean[row]) for row in first.row_amean}
    out.omega_hmean = mean_of(lambda r: r.omega_hmean)
    out.omega_amean = mean_of(lambda r: r.omega_amean)
    return out


def decision_stats(records) -> dict:
    """Precision/recall/F1 per (machine_type, section).

    ``records`` yields ``(machine_type, section, decision, label)``. Ratios
    with a zero denominator are reported as None (undefined).
    """
    tally = defaultdict(lambda: {"tp": 0, "fp": 0, "fn": 0, "tn": 0})
    for m, n, decision, label in records:
        t = tally[(m, int(n))]
        pos, truth = decision == "anomaly", label == "anomaly"
        t["tp" if pos and truth else "fp" if pos else "fn" if truth else "tn"] += 1
    out = {}
    for key, t in sorted(tally.items()):
        precision = t["tp"] / (t["tp"] + t["fp"]) if t["tp"] + t["fp"] else None
        recall = t["tp"] / (t["tp"] + t["fn"]) if t["tp"] + t["fn"] else None
        if precision is None or recall is None or precision + recall == 0:
            f1 = None
        else:
            f1 = 2 * precision * recall / (precision + recall)
        out[key] = dict(t, precision=precision, recall=recall, f1=f1)
    return out


# ---------------------------------------------------------------- rendering

def table_rows(report: EvalReport):
    """Results-table rows: metric name, hmean, amean, then one column per machine type."""
    mts = report.machine_types()
    rows = []
    for row in ROW_NAMES:
        rows.append([row, report.row_hmean[row], report.row_amean[row]]
                    + [report.machine_rows[m][row] for m in mts])
    rows.append([TOTAL_ROW, report.omega_hmean, report.omega_amean] + [None] * len(mts))
    return rows


def _fmt(v):
    return "" if v is None else repr(float(v))


def report_csv(report: EvalReport) -> str:
    mts = report.machine_types()
    lines = [",".join(["seed", "backend", "config_digest", "metric", "hmean", "amean", *mts])]
    for row in table_rows(report):
        lines.append(",".join([report.seed, report.backend, report.config_digest, row[0]]
                              + [_fmt(v) for v in row[1:]]))
    return "\n".join(lines) + "\n"


def cells_csv(report: EvalReport) -> str:
    lines = ["seed,backend,config_digest,machine_type,section,domain,metric,value,n_normal,n_anomaly"]
    prov = [report.seed, report.backend, report.config_digest]
    for (m, n) in sorted(report.pauc):
        n_norm, n_anom = report.counts[(m, n)]
        for d in ("source", "target"):
            lines.append(",".join(prov + [m, str(n), d, "AUC", _fmt(report.auc[(m, n, d)]),
                                          str(report.counts[(m, n, d)]), str(n_anom)]))
        lines.append(",".join(prov + [m, str(n), "both", "pAUC", _fmt(report.pauc[(m, n)]),
                                      str(n_norm), str(n_anom)]))
    return "\n".join(lines) + "\n"


def render_text(report: EvalReport) -> str:
    mts = report.machine_types()
    header = ["metric", "hmean", "amean", *mts]
    body = [[r[0]] + ["" if v is None else f"{v:.4f}" for v in r[1:]] for r in table_rows(report)]
    widths = [max(len(str(row[i])) for row in [header] + body) for i in range(len(header))]

    def line(cells):
        return "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                         for i, (c, w) in enumerate(zip(cells, widths)))

    title = (f"seed={report.seed} backend={report.backend} config={report.config_digest} "
             f"p={report.p:g}")
    rule = "-" * len(line(header))
    return "\n".join([title, rule, line(header), rule] + [line(r) for r in body] + [rule]) + "\n"


def write_report(report: EvalReport, stem):
    """Write ``<stem>.csv``, ``<stem>_cells.csv`` and ``<stem>.txt``."""
    stem = str(stem)
    atomic_write_text(stem + ".csv", report_csv(report))
    atomic_write_text(stem + "_cells.csv", cells_csv(report))
    atomic_write_text(stem + ".txt", render_text(report))


def read_report_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
