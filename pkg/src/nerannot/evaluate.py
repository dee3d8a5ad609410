"""Exact-match span precision / recall / F1 and multi-seed aggregation."""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .annotate import AnnotatedSentence
from .corpus import Sentence, extract_entities
from .errors import EvaluationError

METRICS = ("precision", "recall", "f1")


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Percentages; any zero denominator gives 0."""
    p = 100.0 * tp / (tp + fp) if tp + fp else 0.0
    r = 100.0 * tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    per_category: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, per_category: Mapping[str, tuple[int, int, int]] = ()) -> "MetricsReport":
        p, r, f = prf(tp, fp, fn)
        cats = {}
        for cat, (ctp, cfp, cfn) in sorted(dict(per_category).items()):
            cp, cr, cf = prf(ctp, cfp, cfn)
            cats[cat] = {"tp": ctp, "fp": cfp, "fn": cfn, "precision": cp, "recall": cr, "f1": cf}
        return cls(p, r, f, tp, fp, fn, cats)

    def to_dict(self) -> dict:
        return {
            "precision": round(self.precision, 2),
            "recall": round(self.recall, 2),
            "f1": round(self.f1, 2),
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "per_category": {
                c: {k: (round(v, 2) if isinstance(v, float) else v) for k, v in d.items()}
                for c, d in self.per_category.items()
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(d["precision"], d["recall"], d["f1"], d["tp"], d["fp"], d["fn"], dict(d.get("per_category", {})))


def _triples(tags: Sequence[str], tokens: Sequence[str]) -> set[tuple[int, int, str]]:
    return {sp.key() for sp in extract_entities(Sentence(0, tuple(tokens), tuple(tags)))}


def span_prf(pred: Sequence[AnnotatedSentence], gold: Sequence[Sentence]) -> MetricsReport:
    """Micro-averaged scores; a predicted span counts only on an exact
    (start, end, category) match with a gold span of the same sentence."""
    gold_by_id = {s.id: s for s in gold}
    if len(gold_by_id) != len(gold):
        raise EvaluationError("duplicate sentence ids in gold")
    pred_ids = [p.sentence_id for p in pred]
    if len(set(pred_ids)) != len(pred_ids):
        raise EvaluationError("duplicate sentence ids in predictions")
    if set(pred_ids) != set(gold_by_id):
        missing = sorted(set(gold_by_id) - set(pred_ids))[:5]
        extra = sorted(set(pred_ids) - set(gold_by_id))[:5]
        raise EvaluationError(f"sentence ids differ (missing {missing}, unexpected {extra})")
    counts: dict[str, list[int]] = {}
    for p in pred:
        g = gold_by_id[p.sentence_id]
        if len(p.tags) != len(g.tokens):
            raise EvaluationError(
                f"sentence {g.id}: {len(p.tags)} predicted tags for {len(g.tokens)} tokens"
            )
        ps = _triples(p.tags, g.tokens)
        gs = {sp.key() for sp in extract_entities(g)}
        for t in ps | gs:
            c = counts.setdefault(t[2], [0, 0, 0])
            if t in ps and t in gs:
                c[0] += 1
            elif t in ps:
                c[1] += 1
            else:
                c[2] += 1
    tp = sum(c[0] for c in counts.values())
    fp = sum(c[1] for c in counts.values())
    fn = sum(c[2] for c in counts.values())
    return MetricsReport.from_counts(tp, fp, fn, {k: tuple(v) for k, v in counts.items()})


@dataclass
class RunAggregate:
    mean: dict[str, float]
    std: dict[str, float]
    runs: int
    std_kind: str = "sample"
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "mean": {k: round(v, 2) for k, v in self.mean.items()},
            "std": {k: round(v, 3) for k, v in self.std.items()},
            "runs": self.runs,
            "std_kind": self.std_kind,
            "degenerate": self.degenerate,
        }

    def cell(self, metric: str) -> str:
        return f"{self.mean[metric]:.2f} ± {self.std[metric]:.2f}"


def aggregate_runs(reports: Sequence[MetricsReport]) -> RunAggregate:
    """Per-metric mean and sample (n-1) standard deviation across runs.

    A single run reports std 0 with ``degenerate`` set.
    """
    if not reports:
        raise ValueError("need at least one report")
    mean = {m: statistics.fmean(getattr(r, m) for r in reports) for m in METRICS}
    if len(reports) == 1:
        return RunAggregate(mean, {m: 0.0 for m in METRICS}, 1, degenerate=True)
    std = {m: statistics.stdev([getattr(r, m) for r in reports]) for m in METRICS}
    return RunAggregate(mean, std, len(reports))


# --- tabular outputs ------------------------------------------------------


def format_table(rows: Iterable[tuple[str, RunAggregate]], title: str | None = None) -> str:
    """Aligned text table with one ``mean ± std`` column per metric."""
    header = ("Method", "P", "R", "F1")
    body = [(name, agg.cell("precision"), agg.cell("recall"), agg.cell("f1")) for name, agg in rows]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(4)]
    lines = []
    if title:
        lines.append(title)
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    lines.append(fmt(header))
    lines.append("  ".join("-" * w for w in widths))
    lines.extend(fmt(r) for r in body)
    return "\n".join(lines) + "\n"


def matrix_csv(row_names: Sequence[str], col_names: Sequence[str], values: Mapping[tuple[str, str], float], corner: str = "") -> str:
    """CSV with a header row of column names and the row name in the first column."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([corner, *col_names])
    for r in row_names:
        w.writerow([r, *(("" if (r, c) not in values else f"{values[(r, c)]:.2f}") for c in col_names)])
    return buf.getvalue()


def metrics_json(report: MetricsReport, meta: Mapping | None = None) -> str:
    d = report.to_dict()
    if meta:
        d["meta"] = dict(meta)
    return json.dumps(d, indent=2, sort_keys=True) + "\n"
