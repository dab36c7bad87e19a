"""Evaluation statistics and report assembly.

The t distribution is evaluated through the regularized incomplete beta
function (Lentz continued fraction), so no statistics package is needed at
runtime. Standard deviations use the n-1 denominator; p-values are two-sided.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from tagstrain.errors import DataError, DomainError
from tagstrain.formats import LandmarkFile, make_provenance, provenance_trailer, write_bytes, write_json
from tagstrain.geometry import BoundingBox, LandmarkGrid, LandmarkSequence, iou, points_bbox
from tagstrain.strain import COMPONENTS, strain_curve

logger = logging.getLogger(__name__)

REPORT_FORMAT = "tagstrain-report"
REPORT_VERSION = 1
LOA_Z = 1.96
IOU_BIN_WIDTH = 0.05
_LENTZ_TINY = 1e-300
_LENTZ_EPS = 1e-15
_LENTZ_MAX_ITER = 10000


# === t distribution ===

def _beta_cf(a: float, b: float, x: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _LENTZ_TINY else _LENTZ_TINY)
    h = d
    for m in range(1, _LENTZ_MAX_ITER + 1):
        m2 = 2 * m
        for num in (m * (b - m) * x / ((qam + m2) * (a + m2)), -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))):
            d = 1.0 + num * d
            d = 1.0 / (d if abs(d) > _LENTZ_TINY else _LENTZ_TINY)
            c = 1.0 + num / c
            c = c if abs(c) > _LENTZ_TINY else _LENTZ_TINY
            delta = d * c
            h *= delta
        if abs(delta - 1.0) < _LENTZ_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge for a={a}, b={b}, x={x}")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise DomainError(f"incomplete beta needs a, b > 0, got {a}, {b}")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    # the continued fraction converges fastest below the mean; use the symmetry otherwise
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    if math.isnan(t):
        raise DomainError("t statistic is NaN")
    if math.isinf(t):
        return 0.0
    return min(1.0, max(0.0, betainc_reg(df / 2.0, 0.5, df / (df + t * t))))


def t_cdf(t: float, df: float) -> float:
    if df <= 0:
        raise DomainError(f"degrees of freedom must be positive, got {df}")
    half_tail = 0.5 * t_two_sided_p(t, df)
    return 1.0 - half_tail if t > 0 else half_tail


def t_ppf(q: float, df: float) -> float:
    """Inverse CDF by bisection."""
    if not 0.0 < q < 1.0:
        raise DomainError(f"quantile must lie in (0, 1), got {q}")
    lo, hi = -1.0, 1.0
    while t_cdf(lo, df) > q:
        lo *= 2.0
    while t_cdf(hi, df) < q:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, df) < q:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12 * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


def bonferroni_threshold(alpha: float = 0.05, n_tests: int = 15) -> float:
    if n_tests < 1:
        raise DomainError(f"n_tests must be >= 1, got {n_tests}")
    return alpha / n_tests


SIGNIFICANCE = bonferroni_threshold()


# === tests and agreement ===

@dataclass(frozen=True)
class TTestResult:
    t: float
    df: float
    p: float
    significant: bool
    threshold: float = SIGNIFICANCE
    degenerate: bool = False
    mean_difference: float = 0.0
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None

    def as_dict(self) -> Dict[str, Any]:
        return {
            "t": _finite_or_none(self.t),
            "df": self.df,
            "p": self.p,
            "significant": self.significant,
            "threshold": self.threshold,
            "degenerate": self.degenerate,
            "mean_difference": self.mean_difference,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
        }


@dataclass(frozen=True)
class AgreementResult:
    bias: float
    precision: float
    loa_low: float
    loa_high: float
    n: int
    means: Tuple[float, ...] = ()
    differences: Tuple[float, ...] = ()

    def as_dict(self) -> Dict[str, Any]:
        return {"bias": self.bias, "precision": self.precision, "loa_low": self.loa_low, "loa_high": self.loa_high, "n": self.n}


def _finite_or_none(value: float) -> Optional[float]:
    return float(value) if math.isfinite(value) else None


def _sample(values: Sequence[float], what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size < 2:
        raise DomainError(f"{what} needs at least 2 values, got {arr.size}")
    return arr


def t_test_one_sample(diffs: Sequence[float], mu0: float = 0.0, threshold: float = SIGNIFICANCE) -> TTestResult:
    d = _sample(diffs, "one-sample t test")
    n = d.size
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == mu0:
            return TTestResult(0.0, n - 1, 1.0, False, threshold, degenerate=True, mean_difference=mean - mu0)
        return TTestResult(math.copysign(math.inf, mean - mu0), n - 1, 0.0, True, threshold, degenerate=True, mean_difference=mean - mu0)
    t = (mean - mu0) / (sd / math.sqrt(n))
    p = t_two_sided_p(t, n - 1)
    return TTestResult(t, n - 1, p, p < threshold, threshold, mean_difference=mean - mu0)


def welch_t_test(
    sample_a: Sequence[float],
    sample_b: Sequence[float],
    confidence: float = 0.95,
    threshold: float = SIGNIFICANCE,
) -> TTestResult:
    """Welch test of mean(a) - mean(b) with a Welch-Satterthwaite df and CI."""
    a = _sample(sample_a, "Welch t test")
    b = _sample(sample_b, "Welch t test")
    diff = float(a.mean() - b.mean())
    va = float(a.var(ddof=1)) / a.size
    vb = float(b.var(ddof=1)) / b.size
    se2 = va + vb
    if se2 == 0.0:
        df = float(a.size + b.size - 2)
        if diff == 0.0:
            return TTestResult(0.0, df, 1.0, False, threshold, True, diff, diff, diff)
        return TTestResult(math.copysign(math.inf, diff), df, 0.0, True, threshold, True, diff, diff, diff)
    se = math.sqrt(se2)
    df = se2 * se2 / (va * va / (a.size - 1) + vb * vb / (b.size - 1))
    t = diff / se
    p = t_two_sided_p(t, df)
    half = t_ppf(0.5 + confidence / 2.0, df) * se
    return TTestResult(t, df, p, p < threshold, threshold, False, diff, diff - half, diff + half)


def bland_altman(pairs: Sequence[Tuple[float, float]]) -> AgreementResult:
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DomainError(f"bland_altman expects (a, b) pairs, got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise DomainError(f"bland_altman needs at least 2 pairs, got {arr.shape[0]}")
    diffs = arr[:, 0] - arr[:, 1]
    means = arr.mean(axis=1)
    bias = float(diffs.mean())
    precision = float(diffs.std(ddof=1))
    return AgreementResult(
        bias=bias,
        precision=precision,
        loa_low=bias - LOA_Z * precision,
        loa_high=bias + LOA_Z * precision,
        n=int(arr.shape[0]),
        means=tuple(float(m) for m in means),
        differences=tuple(float(d) for d in diffs),
    )


def compare_groups(reference: Sequence[float], groups: Mapping[str, Sequence[float]], confidence: float = 0.95) -> Dict[str, TTestResult]:
    """Welch test of each group against the reference; mean_difference is group - reference."""
    return {name: welch_t_test(values, reference, confidence) for name, values in sorted(groups.items())}


def rms_position_error(
    pred: Union[LandmarkGrid, np.ndarray],
    truth: Union[LandmarkGrid, np.ndarray],
    pixel_spacing_mm: float = 1.0,
) -> float:
    p = pred.points if isinstance(pred, LandmarkGrid) else np.asarray(pred, dtype=np.float64)
    q = truth.points if isinstance(truth, LandmarkGrid) else np.asarray(truth, dtype=np.float64)
    if p.shape != q.shape:
        raise DomainError(f"landmark sets differ in shape: {p.shape} vs {q.shape}")
    return float(np.sqrt(np.mean(np.sum((p - q) ** 2, axis=-1))) * pixel_spacing_mm)


def iou_histogram(values: Sequence[float], width: float = IOU_BIN_WIDTH) -> List[Dict[str, float]]:
    n_bins = int(round(1.0 / width))
    counts, _ = np.histogram(np.asarray(values, dtype=np.float64), bins=n_bins, range=(0.0, 1.0))
    return [
        {"lo": round(k * width, 6), "hi": round((k + 1) * width, 6), "count": int(c)}
        for k, c in enumerate(counts)
    ]


def _summary(values: Sequence[float]) -> Dict[str, Optional[float]]:
    arr = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(arr.mean()) if arr.size else None,
        "sd": float(arr.std(ddof=1)) if arr.size > 1 else None,
        "min": float(arr.min()) if arr.size else None,
        "max": float(arr.max()) if arr.size else None,
    }


# === run evaluation ===

@dataclass(frozen=True)
class ReviewThresholds:
    min_iou: float = 0.70
    max_position_error_mm: float = 4.0
    max_radial_error: float = 0.2
    max_circ_error: float = 0.05


@dataclass
class CaseEvaluation:
    case_id: str
    region: Optional[str]
    group: Optional[str]
    es_frame: int
    pred_es: Dict[str, float]
    truth_es: Dict[str, float]
    rms_ed_mm: float
    rms_es_mm: float
    iou: Optional[float] = None

    def error(self, component: str) -> float:
        return self.pred_es[component] - self.truth_es[component]

    def as_dict(self) -> Dict[str, Any]:
        return {
            "case_id": self.case_id,
            "region": self.region,
            "group": self.group,
            "es_frame": self.es_frame,
            "errors": {c: self.error(c) for c in COMPONENTS},
            "rms_ed_mm": self.rms_ed_mm,
            "rms_es_mm": self.rms_es_mm,
            "iou": self.iou,
        }


@dataclass
class EvalReport:
    summary: Dict[str, Any]
    cases: List[CaseEvaluation]
    agreement: Dict[str, Dict[str, AgreementResult]] = field(default_factory=dict)
    iou_values: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        doc = dict(self.summary)
        doc["cases"] = [c.as_dict() for c in self.cases]
        return doc


def evaluate_case(
    case_id: str,
    pred: LandmarkFile,
    truth: LandmarkFile,
    boxes: Optional[Tuple[BoundingBox, BoundingBox]] = None,
) -> CaseEvaluation:
    n = min(pred.sequence.n_frames, truth.sequence.n_frames)
    truth_pts = truth.sequence.points[:n]
    pred_pts = pred.sequence.points[:n]
    truth_curve = strain_curve(LandmarkSequence(truth_pts))
    pred_curve = strain_curve(LandmarkSequence(pred_pts))
    es = truth_curve.es_frame
    spacing = truth.pixel_spacing_mm
    score = iou(boxes[0], boxes[1]) if boxes is not None else None
    return CaseEvaluation(
        case_id=case_id,
        region=truth.region,
        group=truth.extra.get("group"),
        es_frame=es,
        pred_es={c: pred_curve.per_frame[es].get(c) for c in COMPONENTS},
        truth_es={c: truth_curve.per_frame[es].get(c) for c in COMPONENTS},
        rms_ed_mm=rms_position_error(pred_pts[0], truth_pts[0], spacing),
        rms_es_mm=rms_position_error(pred_pts[es], truth_pts[es], spacing),
        iou=score,
    )


def _error_rows(cases: List[CaseEvaluation]) -> Dict[str, Any]:
    rows: Dict[str, Any] = {}
    for component in COMPONENTS:
        errors = np.array([c.error(component) for c in cases])
        row: Dict[str, Any] = {
            "n": int(errors.size),
            "error_mean": float(errors.mean()),
            "error_sd": float(errors.std(ddof=1)) if errors.size > 1 else None,
            "abs_error_mean": float(np.abs(errors).mean()),
            "abs_error_sd": float(np.abs(errors).std(ddof=1)) if errors.size > 1 else None,
        }
        if errors.size > 1:
            row["t_test"] = t_test_one_sample(errors).as_dict()
        rows[component] = row
    return rows


def _agreement(cases: List[CaseEvaluation]) -> Dict[str, AgreementResult]:
    if len(cases) < 2:
        return {}
    return {c: bland_altman([(case.pred_es[c], case.truth_es[c]) for case in cases]) for c in COMPONENTS}


def flag_worst_cases(cases: Sequence[CaseEvaluation], limits: ReviewThresholds = ReviewThresholds()) -> List[Dict[str, Any]]:
    """Cases that would be sent for visual review, with the triggering reasons."""
    flagged = []
    for case in cases:
        reasons = []
        if case.iou is not None and case.iou < limits.min_iou:
            reasons.append(f"iou {case.iou:.3f} < {limits.min_iou}")
        worst_rms = max(case.rms_ed_mm, case.rms_es_mm)
        if worst_rms > limits.max_position_error_mm:
            reasons.append(f"position error {worst_rms:.2f} mm > {limits.max_position_error_mm}")
        if abs(case.error("eps_R")) > limits.max_radial_error:
            reasons.append(f"|eps_R error| {abs(case.error('eps_R')):.3f} > {limits.max_radial_error}")
        if abs(case.error("eps_C")) > limits.max_circ_error:
            reasons.append(f"|eps_C error| {abs(case.error('eps_C')):.3f} > {limits.max_circ_error}")
        if reasons:
            flagged.append({"case_id": case.case_id, "reasons": reasons})
    return flagged


def _group_section(cases: List[CaseEvaluation], reference_group: str) -> Dict[str, Any]:
    by_group: Dict[str, List[CaseEvaluation]] = {}
    for case in cases:
        if case.group is not None:
            by_group.setdefault(case.group, []).append(case)
    if reference_group not in by_group or len(by_group) < 2:
        return {}
    section: Dict[str, Any] = {"reference": reference_group, "component": "eps_C_midwall", "comparisons": {}}
    for source in ("pred", "truth"):
        values = {g: [getattr(c, f"{source}_es")["eps_C_midwall"] for c in members] for g, members in by_group.items()}
        reference = values.pop(reference_group)
        usable = {g: v for g, v in values.items() if len(v) > 1}
        if len(reference) < 2 or not usable:
            continue
        for name, result in compare_groups(reference, usable).items():
            section["comparisons"].setdefault(name, {})[source] = result.as_dict()
    return section if section["comparisons"] else {}


def evaluate_run(
    pred: Mapping[str, LandmarkFile],
    truth: Mapping[str, LandmarkFile],
    boxes: Optional[Mapping[str, Tuple[BoundingBox, BoundingBox]]] = None,
    frames_per_second: Optional[float] = None,
    labels: Tuple[str, str] = ("pred", "truth"),
    reference_group: str = "reference",
    limits: ReviewThresholds = ReviewThresholds(),
    config: Optional[Dict[str, Any]] = None,
) -> EvalReport:
    """Compare two landmark sets case by case; ``boxes`` maps case_id to (pred, truth)."""
    missing_pred = sorted(set(truth) - set(pred))
    missing_truth = sorted(set(pred) - set(truth))
    if missing_pred or missing_truth:
        raise DataError(f"case lists differ: missing from {labels[0]}: {missing_pred}; missing from {labels[1]}: {missing_truth}")
    if not truth:
        raise DataError("no cases to evaluate")
    if boxes is not None:
        absent = sorted(set(truth) - set(boxes))
        if absent:
            raise DataError(f"boxes missing for cases: {absent}")

    ids = sorted(truth)
    cases = [evaluate_case(i, pred[i], truth[i], None if boxes is None else boxes[i]) for i in ids]
    strain_rows: Dict[str, Any] = {"all": _error_rows(cases)}
    agreement: Dict[str, Dict[str, AgreementResult]] = {"all": _agreement(cases)}
    regions = sorted({c.region for c in cases if c.region})
    for region in regions:
        members = [c for c in cases if c.region == region]
        strain_rows[region] = _error_rows(members)
        agreement[region] = _agreement(members)

    summary: Dict[str, Any] = {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "labels": list(labels),
        "n_cases": len(cases),
        "strain_errors": strain_rows,
        "bland_altman": {
            scope: {c: result.as_dict() for c, result in results.items()} for scope, results in agreement.items()
        },
        "position_error_mm": {
            "ed": _summary([c.rms_ed_mm for c in cases]),
            "es": _summary([c.rms_es_mm for c in cases]),
        },
        "throughput_fps": frames_per_second,
        "worst_cases": flag_worst_cases(cases, limits),
        "provenance": make_provenance(config),
    }
    iou_values = [c.iou for c in cases if c.iou is not None]
    if iou_values:
        summary["iou"] = dict(_summary(iou_values), histogram=iou_histogram(iou_values))
    groups = _group_section(cases, reference_group)
    if groups:
        summary["groups"] = groups
    logger.info("evaluated %d cases (%d regions, %d flagged)", len(cases), len(regions), len(summary["worst_cases"]))
    return EvalReport(summary=summary, cases=cases, agreement=agreement, iou_values=iou_values)


def truth_box(truth: LandmarkFile) -> BoundingBox:
    return points_bbox(truth.sequence.points[0])


def _agreement_csv(result: AgreementResult, provenance: Dict[str, Any]) -> str:
    out = io.StringIO()
    out.write(f"# bias={result.bias!r}\n# precision={result.precision!r}\n")
    out.write(f"# loa_low={result.loa_low!r}\n# loa_high={result.loa_high!r}\n")
    out.write("mean,difference\n")
    for m, d in zip(result.means, result.differences):
        out.write(f"{m!r},{d!r}\n")
    out.write("\n".join(provenance_trailer(provenance)) + "\n")
    return out.getvalue()


def write_report(report: EvalReport, out_dir: Union[str, Path]) -> List[Path]:
    """report.json plus Bland-Altman and IoU histogram CSVs; returns written paths."""
    out = Path(out_dir)
    written = [out / "report.json"]
    provenance = report.summary["provenance"]
    write_json(written[0], report.to_dict())
    for scope, results in sorted(report.agreement.items()):
        for component, result in results.items():
            name = f"bland_altman_{component}.csv" if scope == "all" else f"bland_altman_{scope}_{component}.csv"
            path = out / name
            write_bytes(path, _agreement_csv(result, provenance).encode("utf-8"))
            written.append(path)
    if "iou" in report.summary:
        lines = ["lo,hi,count"] + [f"{b['lo']},{b['hi']},{b['count']}" for b in report.summary["iou"]["histogram"]]
        lines += provenance_trailer(provenance)
        path = out / "iou_histogram.csv"
        write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))
        written.append(path)
    return written
