"""Post-interactive group statistics: subject-visit matching, covariate-adjusted
OLS with t-tests, per-group age regressions, Benjamini-Hochberg FDR, and figure
data emission for the console.
"""
from __future__ import annotations

import csv
import datetime as _dt
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RANK_TOL = 1e-10


class AnalysisError(Exception):
    pass


class RankDeficiencyError(AnalysisError):
    def __init__(self, columns: list[str]):
        super().__init__(f"design matrix is rank deficient; collinear columns: {columns}")
        self.columns = columns


@dataclass
class LabelRow:
    subject_id: str
    reference_date: _dt.date
    diagnosis: str  # CN | MCI | AD
    age: float
    sex: str  # F | M

    def __post_init__(self) -> None:
        if self.age <= 0:
            raise AnalysisError(f"age must be positive, got {self.age}")


@dataclass
class FeatureTable:
    """Numeric features keyed by (subject_id, ISO date); None marks missing."""

    columns: list[str]
    rows: dict[tuple[str, str], dict[str, float | None]] = field(default_factory=dict)


@dataclass
class OlsResult:
    terms: list[str]
    beta: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    df_resid: int
    r2: float
    degenerate: bool = False

    def term(self, name: str) -> dict:
        i = self.terms.index(name)
        return {
            "beta": float(self.beta[i]),
            "se": float(self.se[i]),
            "t": float(self.t[i]),
            "p": float(self.p[i]),
        }


@dataclass
class FdrResult:
    raw_p: list[float]
    adjusted_p: list[float]
    method: str = "benjamini-hochberg"


# -- visit matching -----------------------------------------------------------


def match_visits(
    labels: list[LabelRow],
    scans: list[tuple[str, _dt.date]],
    window_days: int = 30,
) -> tuple[list[tuple[LabelRow, _dt.date, int]], list[LabelRow]]:
    """Pair each label row with its nearest scan within the window.

    Ties break toward the earlier scan; rows with no scan in the window are
    dropped and returned separately.
    """
    if window_days <= 0:
        raise AnalysisError("window_days must be positive")
    by_subject: dict[str, list[_dt.date]] = {}
    for subject_id, scan_date in scans:
        by_subject.setdefault(subject_id, []).append(scan_date)
    matched: list[tuple[LabelRow, _dt.date, int]] = []
    unmatched: list[LabelRow] = []
    for row in labels:
        candidates = [
            (abs((d - row.reference_date).days), d)
            for d in by_subject.get(row.subject_id, [])
            if abs((d - row.reference_date).days) <= window_days
        ]
        if not candidates:
            unmatched.append(row)
            continue
        mismatch, scan_date = min(candidates)
        matched.append((row, scan_date, mismatch))
    return matched, unmatched


# -- Student-t CDF via regularized incomplete beta -----------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise AnalysisError(f"incomplete beta did not converge (a={a}, b={b}, x={x})")


def _betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf(x: float, df: int) -> float:
    """Upper tail P(T > x) for Student-t with df degrees of freedom."""
    if df < 1:
        raise AnalysisError("df must be >= 1")
    if x == 0.0:
        return 0.5
    if math.isinf(x):
        return 0.0 if x > 0 else 1.0
    tail = 0.5 * _betainc_reg(df / 2.0, 0.5, df / (df + x * x))
    return tail if x > 0 else 1.0 - tail


def t_cdf(x: float, df: int) -> float:
    if x == 0.0:
        return 0.5
    return 1.0 - t_sf(x, df)


# -- OLS ------------------------------------------------------------------------


def _collinear_columns(X: np.ndarray, names: list[str]) -> list[str]:
    """Greedy pivoted orthogonalization; a column whose residual norm falls
    below RANK_TOL relative to its original norm is collinear."""
    work = X.astype(float).copy()
    original = np.linalg.norm(work, axis=0)
    selected: list[int] = []
    remaining = list(range(work.shape[1]))
    collinear: list[str] = []
    while remaining:
        norms = {j: np.linalg.norm(work[:, j]) for j in remaining}
        pivot = max(remaining, key=lambda j: norms[j])
        threshold = RANK_TOL * max(original[pivot], 1.0)
        if norms[pivot] <= threshold:
            collinear.extend(names[j] for j in sorted(remaining))
            break
        q = work[:, pivot] / norms[pivot]
        remaining.remove(pivot)
        selected.append(pivot)
        for j in remaining:
            work[:, j] -= q * (q @ work[:, j])
    return collinear


def ols_fit(X: np.ndarray, y: np.ndarray, terms: list[str] | None = None) -> OlsResult:
    """Least-squares fit with classical t-test inference.

    Exact (zero-residual) fits report p=0 with a degeneracy flag instead of
    NaN so FDR pipelines downstream never crash on perfect synthetic data.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    n, k = X.shape
    terms = terms or [f"x{i}" for i in range(k)]
    if n <= k:
        raise AnalysisError(f"need n > k, got n={n}, k={k}")
    collinear = _collinear_columns(X, terms)
    if collinear:
        raise RankDeficiencyError(collinear)

    q_mat, r_mat = np.linalg.qr(X)
    beta = np.linalg.solve(r_mat, q_mat.T @ y)
    residuals = y - X @ beta
    rss = float(residuals @ residuals)
    tss = float(((y - y.mean()) ** 2).sum())
    df_resid = n - k
    sigma2 = rss / df_resid
    r_inv = np.linalg.inv(r_mat)
    cov = sigma2 * (r_inv @ r_inv.T)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))

    degenerate = rss <= 1e-14 * max(tss, 1.0)
    if degenerate:
        t_stats = np.where(beta == 0.0, 0.0, np.sign(beta) * np.inf)
        p_vals = np.zeros(k)
    else:
        t_stats = np.divide(beta, se, out=np.zeros_like(beta), where=se > 0)
        p_vals = np.array([2.0 * t_sf(abs(float(t)), df_resid) for t in t_stats])
    if tss > 0:
        r2 = 1.0 - rss / tss
    else:
        r2 = 1.0 if degenerate else 0.0
    return OlsResult(
        terms=list(terms),
        beta=beta,
        se=se,
        t=t_stats,
        p=np.clip(p_vals, 0.0, 1.0),
        df_resid=df_resid,
        r2=r2,
        degenerate=degenerate,
    )


_TERM_ALIASES = {"diagnosis": "dx"}
_LEVEL_ORDER = {"dx": ["CN", "MCI", "AD"]}
_REFERENCE_PREFERENCE = ("CN", "F")


def encode_design(
    records: list[dict], formula: str
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Build a design matrix from 'y ~ a + b + c'.

    Numeric columns enter as-is; categorical columns become indicators with the
    reference level dropped (CN for diagnosis, F for sex).
    """
    lhs, _, rhs = formula.partition("~")
    y_name = lhs.strip()
    term_names = [t.strip() for t in rhs.split("+") if t.strip()]
    if not y_name or not term_names:
        raise AnalysisError(f"malformed formula {formula!r}")

    y = np.array([float(r[y_name]) for r in records])
    columns: list[np.ndarray] = [np.ones(len(records))]
    names: list[str] = ["Intercept"]
    for term in term_names:
        values = [r[term] for r in records]
        short = _TERM_ALIASES.get(term, term)
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
            columns.append(np.array(values, dtype=float))
            names.append(term)
            continue
        levels = sorted({str(v) for v in values})
        if short in _LEVEL_ORDER:
            levels = [lv for lv in _LEVEL_ORDER[short] if lv in levels] + [
                lv for lv in levels if lv not in _LEVEL_ORDER[short]
            ]
        reference = next((r for r in _REFERENCE_PREFERENCE if r in levels), levels[0])
        for level in levels:
            if level == reference:
                continue
            columns.append(np.array([1.0 if str(v) == level else 0.0 for v in values]))
            names.append(f"{short}[{level}]")
    return np.column_stack(columns), y, names


# -- FDR -------------------------------------------------------------------------


def bh_fdr(p_values: list[float]) -> FdrResult:
    """Benjamini-Hochberg step-up adjustment, clipped at 1, in input order."""
    p = list(map(float, p_values))
    m = len(p)
    if m == 0:
        return FdrResult(raw_p=[], adjusted_p=[])
    order = sorted(range(m), key=lambda i: p[i])
    adjusted_sorted = [0.0] * m
    running = 1.0
    for rank in range(m - 1, -1, -1):
        candidate = p[order[rank]] * m / (rank + 1)
        running = min(running, candidate)
        adjusted_sorted[rank] = min(running, 1.0)
    adjusted = [0.0] * m
    for rank, idx in enumerate(order):
        # clamp to the raw p: p*m/m can round one ulp below p
        adjusted[idx] = max(adjusted_sorted[rank], p[idx])
    return FdrResult(raw_p=p, adjusted_p=adjusted)


# -- group regressions and figures ---------------------------------------------


def group_age_regressions(
    matched: list[tuple[LabelRow, _dt.date, int]],
    features: FeatureTable,
    feature: str,
) -> dict[str, OlsResult]:
    """One simple regression (feature ~ age) per diagnosis group."""
    out: dict[str, OlsResult] = {}
    groups: dict[str, list[tuple[float, float]]] = {}
    for row, scan_date, _ in matched:
        cell = features.rows.get((row.subject_id, scan_date.isoformat()), {})
        value = cell.get(feature)
        if value is None:
            continue
        groups.setdefault(row.diagnosis, []).append((row.age, float(value)))
    for diagnosis, pairs in sorted(groups.items()):
        ages = np.array([a for a, _ in pairs])
        values = np.array([v for _, v in pairs])
        X = np.column_stack([np.ones(len(ages)), ages])
        out[diagnosis] = ols_fit(X, values, terms=["Intercept", "age"])
    return out


def _box_stats(values: np.ndarray) -> dict:
    q1, median, q3 = (float(np.percentile(values, q)) for q in (25, 50, 75))
    iqr = q3 - q1
    in_lo = values[values >= q1 - 1.5 * iqr]
    in_hi = values[values <= q3 + 1.5 * iqr]
    return {
        "n": int(values.size),
        "median": median,
        "q1": q1,
        "q3": q3,
        "whisker_low": float(in_lo.min()) if in_lo.size else q1,
        "whisker_high": float(in_hi.max()) if in_hi.size else q3,
    }


def emit_figure_data(
    matched: list[tuple[LabelRow, _dt.date, int]],
    features: FeatureTable,
    feature: str,
    kind: str,
    out_dir: Path,
) -> Path:
    """Write figure JSON (and a minimal static SVG next to it) for one feature.

    The console renders the JSON interactively; the SVG is a static fallback
    for CLI users.
    """
    if kind not in ("SCATTER_FIT", "GROUP_BOX"):
        raise AnalysisError(f"unknown figure kind {kind!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fits = group_age_regressions(matched, features, feature)

    groups = []
    for diagnosis in sorted(fits):
        points = []
        for row, scan_date, _ in matched:
            if row.diagnosis != diagnosis:
                continue
            value = features.rows.get((row.subject_id, scan_date.isoformat()), {}).get(feature)
            if value is not None:
                points.append([row.age, float(value)])
        fit = fits[diagnosis]
        values = np.array([v for _, v in points]) if points else np.zeros(0)
        groups.append(
            {
                "name": diagnosis,
                "points": sorted(points),
                "fit": {
                    "slope": fit.term("age")["beta"],
                    "intercept": fit.term("Intercept")["beta"],
                    "p": fit.term("age")["p"],
                },
                "summary": _box_stats(values) if values.size else None,
            }
        )
    doc = {
        "kind": kind,
        "feature": feature,
        "x_label": "age",
        "y_label": feature,
        "groups": groups,
    }
    json_path = out_dir / f"{feature}.{kind.lower()}.json"
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    svg_path = json_path.with_suffix(".svg")
    svg_path.write_text(_render_svg(doc), encoding="utf-8")
    return json_path


_SVG_COLORS = ["#4363d8", "#e6194b", "#3cb44b", "#f58231", "#911eb4"]


def _render_svg(doc: dict, width: int = 480, height: int = 320) -> str:
    pad = 40.0
    points = [p for g in doc["groups"] for p in g["points"]]
    if not points:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"/>'
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def sx(x: float) -> float:
        return pad + (x - x_lo) / x_span * (width - 2 * pad)

    def sy(y: float) -> float:
        return height - pad - (y - y_lo) / y_span * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
        'fill="none" stroke="#888"/>',
        f'<text x="{width / 2:.1f}" y="{height - 8}" font-size="11" text-anchor="middle">'
        f'{doc["x_label"]}</text>',
    ]
    for gi, group in enumerate(doc["groups"]):
        color = _SVG_COLORS[gi % len(_SVG_COLORS)]
        for x, y in group["points"]:
            parts.append(
                f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="2.4" fill="{color}" '
                'fill-opacity="0.55"/>'
            )
        fit = group["fit"]
        y0 = fit["intercept"] + fit["slope"] * x_lo
        y1 = fit["intercept"] + fit["slope"] * x_hi
        parts.append(
            f'<line x1="{sx(x_lo):.1f}" y1="{sy(y0):.1f}" x2="{sx(x_hi):.1f}" '
            f'y2="{sy(y1):.1f}" stroke="{color}" stroke-width="1.6"/>'
        )
        parts.append(
            f'<text x="{width - pad + 4}" y="{pad + 14 * gi + 10}" font-size="10" '
            f'fill="{color}">{group["name"]}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


# -- CSV IO and report -----------------------------------------------------------


def load_labels(path: Path) -> list[LabelRow]:
    rows = []
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        for record in csv.DictReader(fh):
            rows.append(
                LabelRow(
                    subject_id=record["SubjectID"].strip(),
                    reference_date=_dt.date.fromisoformat(record["RefDate"].strip()),
                    diagnosis=record["Diagnosis"].strip(),
                    age=float(record["Age"]),
                    sex=record["Sex"].strip(),
                )
            )
    return rows


def load_features(path: Path) -> FeatureTable:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        columns = [c for c in reader.fieldnames or [] if c not in ("SubjectID", "Date")]
        table = FeatureTable(columns=columns)
        for record in reader:
            key = (record["SubjectID"].strip(), record["Date"].strip())
            table.rows[key] = {
                c: (float(record[c]) if record.get(c, "").strip() != "" else None)
                for c in columns
            }
    return table


def stats_report(
    labels: list[LabelRow],
    features: FeatureTable,
    formula: str,
    window_days: int = 30,
) -> tuple[list[dict], list[tuple[LabelRow, _dt.date, int]]]:
    """Fit the formula per feature (complete-case per feature), then adjust
    p-values across features within each term."""
    scans = [
        (subject, _dt.date.fromisoformat(date)) for subject, date in features.rows.keys()
    ]
    matched, _ = match_visits(labels, scans, window_days)
    y_name = formula.partition("~")[0].strip()
    rows: list[dict] = []
    for feature in features.columns:
        records = []
        for row, scan_date, _ in matched:
            value = features.rows.get((row.subject_id, scan_date.isoformat()), {}).get(feature)
            if value is None:
                continue
            records.append(
                {
                    y_name: float(value),
                    "age": row.age,
                    "sex": row.sex,
                    "diagnosis": row.diagnosis,
                }
            )
        if len(records) < 4:
            continue
        X, y, names = encode_design(records, formula)
        result = ols_fit(X, y, terms=names)
        for term in names:
            stats = result.term(term)
            rows.append({"feature": feature, "term": term, **stats})
    by_term: dict[str, list[int]] = {}
    for i, row in enumerate(rows):
        by_term.setdefault(row["term"], []).append(i)
    for indices in by_term.values():
        adjusted = bh_fdr([rows[i]["p"] for i in indices]).adjusted_p
        for i, q in zip(indices, adjusted):
            rows[i]["p_fdr"] = q
    return rows, matched


def write_stats_csv(rows: list[dict], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["feature", "term", "beta", "se", "t", "p", "p_fdr"])
        for row in rows:
            writer.writerow(
                [
                    row["feature"],
                    row["term"],
                    f"{row['beta']:.10g}",
                    f"{row['se']:.10g}",
                    f"{row['t']:.10g}",
                    f"{row['p']:.10g}",
                    f"{row.get('p_fdr', float('nan')):.10g}",
                ]
            )
