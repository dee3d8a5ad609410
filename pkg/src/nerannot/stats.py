"""Friedman test, Conover post-hoc comparisons and critical-difference groups.

Scores are "higher is better": within each condition (row) the best method
gets rank 1 and ties share the average of their positions.
"""

from __future__ import annotations

import csv
import io
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata, t as student_t

from .errors import ConfigError

ADJUSTMENTS = ("holm", "bonferroni", "none")

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 10_000


# --- chi-square survival --------------------------------------------------


def _gamma_p_series(a: float, x: float) -> float:
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_continued_fraction(a: float, x: float) -> float:
    # modified Lentz evaluation of the Legendre continued fraction for Q(a, x)
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) = Gamma(a, x) / Gamma(a)."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x <= 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_p_series(a, x)
    return _gamma_q_continued_fraction(a, x)


def chi2_sf(x: float, df: int) -> float:
    """P(X >= x) for X ~ chi-square with ``df`` degrees of freedom."""
    if df < 1:
        raise ValueError("df must be >= 1")
    return gamma_q(df / 2.0, x / 2.0)


# --- data types -----------------------------------------------------------


@dataclass
class ScoreMatrix:
    methods: list[str]
    conditions: list[str]
    scores: np.ndarray  # conditions x methods

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        n, k = len(self.conditions), len(self.methods)
        if self.scores.shape != (n, k):
            raise ConfigError(f"score matrix shape {self.scores.shape} != ({n}, {k})")
        if k < 2 or n < 2:
            raise ConfigError(f"need at least 2 methods and 2 conditions, got k={k}, N={n}")
        if not np.all(np.isfinite(self.scores)):
            raise ConfigError("score matrix has missing or non-finite cells")
        if len(set(self.methods)) != k:
            raise ConfigError("duplicate method names")

    @classmethod
    def from_csv(cls, text: str) -> "ScoreMatrix":
        rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
        if len(rows) < 2:
            raise ConfigError("score CSV needs a header row and at least one data row")
        methods = [m.strip() for m in rows[0][1:]]
        conditions, values = [], []
        for lineno, r in enumerate(rows[1:], start=2):
            if len(r) != len(methods) + 1:
                raise ConfigError(f"score CSV row {lineno}: expected {len(methods) + 1} cells, got {len(r)}")
            conditions.append(r[0].strip())
            try:
                values.append([float(c) for c in r[1:]])
            except ValueError as exc:
                raise ConfigError(f"score CSV row {lineno}: {exc}") from exc
        return cls(methods, conditions, np.array(values))

    @classmethod
    def load(cls, path: str | Path) -> "ScoreMatrix":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))


@dataclass
class RankMatrix:
    methods: list[str]
    conditions: list[str]
    ranks: np.ndarray

    @property
    def mean_ranks(self) -> np.ndarray:
        return self.ranks.mean(axis=0)

    @property
    def n(self) -> int:
        return self.ranks.shape[0]

    @property
    def k(self) -> int:
        return self.ranks.shape[1]


@dataclass
class FriedmanResult:
    chi2: float
    df: int
    p_value: float
    n: int
    k: int
    methods: list[str]
    mean_ranks: list[float]

    def to_dict(self) -> dict:
        return {
            "chi2": self.chi2,
            "df": self.df,
            "p_value": self.p_value,
            "N": self.n,
            "k": self.k,
            "mean_ranks": dict(zip(self.methods, self.mean_ranks)),
        }


@dataclass
class ConoverResult:
    methods: list[str]
    p_values: np.ndarray
    alpha: float
    adjust: str
    groups: list[list[str]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["", *self.methods])
        for name, row in zip(self.methods, self.p_values):
            w.writerow([name, *(repr(float(v)) for v in row)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "methods": self.methods,
            "alpha": self.alpha,
            "adjust": self.adjust,
            "p_values": self.p_values.tolist(),
            "groups": self.groups,
        }


# --- operations -----------------------------------------------------------


def rank_scores(m: ScoreMatrix) -> RankMatrix:
    ranks = np.vstack([rankdata(-row, method="average") for row in m.scores])
    return RankMatrix(list(m.methods), list(m.conditions), ranks)


def friedman(r: RankMatrix) -> FriedmanResult:
    """Friedman chi-square from mean ranks, with a chi-square(k-1) p-value.

    No tie correction is applied.
    """
    n, k = r.n, r.k
    if n < 2 or k < 2:
        raise ConfigError(f"need N >= 2 and k >= 2, got N={n}, k={k}")
    mean_ranks = r.mean_ranks
    centre = (k + 1) / 2.0
    # deviation form: exactly 0 when all mean ranks coincide, never negative
    chi2 = 12.0 * n / (k * (k + 1)) * float(np.sum((mean_ranks - centre) ** 2))
    mean_form = 12.0 * n / (k * (k + 1)) * float(np.sum(mean_ranks**2)) - 3.0 * n * (k + 1)
    rank_sums = r.ranks.sum(axis=0)
    sum_form = 12.0 / (n * k * (k + 1)) * float(np.sum(rank_sums**2)) - 3.0 * n * (k + 1)
    tol = 1e-9 * max(1.0, 3.0 * n * (k + 1))
    assert abs(chi2 - mean_form) <= tol and abs(chi2 - sum_form) <= tol, (chi2, mean_form, sum_form)
    p = 1.0 if chi2 == 0.0 else max(chi2_sf(chi2, k - 1), sys.float_info.min)
    return FriedmanResult(chi2, k - 1, p, n, k, list(r.methods), mean_ranks.tolist())


def adjust_p_values(p: Sequence[float], method: str = "holm") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if method == "none":
        return p.copy()
    m = len(p)
    if method == "bonferroni":
        return np.minimum(1.0, p * m)
    if method == "holm":
        order = np.argsort(p, kind="stable")
        adj = np.empty(m)
        running = 0.0
        for step, idx in enumerate(order):
            running = max(running, min(1.0, (m - step) * p[idx]))
            adj[idx] = running
        return adj
    raise ConfigError(f"unknown p-value adjustment {method!r}; choose from {ADJUSTMENTS}")


def _components(names: Sequence[str], linked: np.ndarray, mean_ranks: np.ndarray) -> list[list[str]]:
    k = len(names)
    seen = [False] * k
    groups = []
    for start in np.argsort(mean_ranks, kind="stable"):
        if seen[start]:
            continue
        stack, members = [start], []
        seen[start] = True
        while stack:
            i = stack.pop()
            members.append(i)
            for j in range(k):
                if linked[i, j] and not seen[j]:
                    seen[j] = True
                    stack.append(j)
        members.sort(key=lambda i: (mean_ranks[i], i))
        groups.append([names[i] for i in members])
    return groups


def conover_posthoc(r: RankMatrix, alpha: float = 0.05, adjust: str = "holm") -> ConoverResult:
    """Pairwise Conover comparisons of rank sums after a Friedman test.

    For methods i, j with rank sums R_i, R_j the statistic is
    ``|R_i - R_j| / sqrt(2 (N*A1 - sum R^2) / ((N-1)(k-1)))``, Student-t with
    (N-1)(k-1) degrees of freedom, where A1 is the sum of all squared ranks.
    Groups are connected components of the "not significant" relation.
    """
    if adjust not in ADJUSTMENTS:
        raise ConfigError(f"unknown p-value adjustment {adjust!r}; choose from {ADJUSTMENTS}")
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    n, k = r.n, r.k
    ranks = r.ranks
    rank_sums = ranks.sum(axis=0)
    a1 = float(np.sum(ranks**2))
    df = (n - 1) * (k - 1)
    var_term = 2.0 * (n * a1 - float(np.sum(rank_sums**2))) / df
    iu = np.triu_indices(k, 1)
    diffs = np.abs(rank_sums[iu[0]] - rank_sums[iu[1]])
    if var_term <= 1e-12 * max(1.0, n * a1):
        raw = np.where(diffs == 0.0, 1.0, 0.0)
    else:
        raw = 2.0 * student_t.sf(diffs / math.sqrt(var_term), df)
    adj = adjust_p_values(raw, adjust)
    p = np.ones((k, k))
    p[iu] = adj
    p[(iu[1], iu[0])] = adj
    groups = _components(r.methods, p >= alpha, r.mean_ranks)
    return ConoverResult(list(r.methods), p, alpha, adjust, groups)


@dataclass
class CDReport:
    rows: list[dict]
    groups: list[dict]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["position", "method", "mean_rank", "group"])
        for row in self.rows:
            w.writerow([row["position"], row["method"], repr(row["mean_rank"]), row["group"]])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"methods": self.rows, "groups": self.groups}, indent=2) + "\n"


def cd_report(c: ConoverResult, r: RankMatrix) -> CDReport:
    """Methods by ascending mean rank plus the rank interval each group spans."""
    mean = dict(zip(r.methods, r.mean_ranks.tolist()))
    group_of = {m: gi for gi, g in enumerate(c.groups) for m in g}
    ordered = sorted(r.methods, key=lambda m: (mean[m], r.methods.index(m)))
    rows = [
        {"position": i + 1, "method": m, "mean_rank": mean[m], "group": group_of[m]}
        for i, m in enumerate(ordered)
    ]
    groups = [
        {
            "group": gi,
            "members": list(g),
            "min_rank": min(mean[m] for m in g),
            "max_rank": max(mean[m] for m in g),
        }
        for gi, g in enumerate(c.groups)
    ]
    return CDReport(rows, groups)
