"""Semantic, detection, attribute, location and terrain metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from scipy import stats
from scipy.sparse import coo_matrix

from .core import SemanticClass
from .inventory import DtmRaster

CLASSES = (
    SemanticClass.LOW_VEGETATION,
    SemanticClass.GROUND,
    SemanticClass.STEM,
    SemanticClass.LIVE_BRANCHES,
    SemanticClass.DEAD_BRANCHES,
)


@dataclass(frozen=True)
class SemanticMetrics:
    """Confusion matrix (rows reference, columns prediction, classes 1..5) and derived scores.

    Per-class values are ``nan`` for classes absent from the reference.
    """

    confusion: np.ndarray
    overall_accuracy: float
    mean_accuracy: float
    mean_iou: float
    class_iou: np.ndarray
    class_accuracy: np.ndarray

    def to_dict(self) -> Dict:
        names = [c.name.lower() for c in CLASSES]
        return {
            "confusion": self.confusion.tolist(),
            "classes": names,
            "overall_accuracy": self.overall_accuracy,
            "mean_accuracy": self.mean_accuracy,
            "mean_iou": self.mean_iou,
            "class_iou": dict(zip(names, self.class_iou.tolist())),
            "class_accuracy": dict(zip(names, self.class_accuracy.tolist())),
        }


def confusion_matrix(reference: npt.ArrayLike, predicted: npt.ArrayLike) -> np.ndarray:
    """5x5 counts over points whose reference class is not Unlabeled.

    Raises:
        ValueError: On length mismatch or when an evaluated point is predicted outside classes 1..5.
    """
    ref = np.asarray(reference, dtype=np.int64)
    pred = np.asarray(predicted, dtype=np.int64)
    if ref.shape != pred.shape:
        raise ValueError(f"reference has {ref.size} labels but prediction has {pred.size}")
    keep = ref != SemanticClass.UNLABELED
    ref, pred = ref[keep], pred[keep]
    if np.any((ref < 1) | (ref > 5)) or np.any((pred < 1) | (pred > 5)):
        raise ValueError("evaluated labels must lie in classes 1..5")
    return np.bincount((ref - 1) * 5 + (pred - 1), minlength=25).reshape(5, 5)


def semantic_metrics(reference: npt.ArrayLike, predicted: npt.ArrayLike) -> SemanticMetrics:
    """Overall accuracy, mean per-class accuracy and mean IoU over the classes present in the reference."""
    cm = confusion_matrix(reference, predicted)
    total = cm.sum()
    tp = np.diag(cm).astype(np.float64)
    ref_count = cm.sum(axis=1).astype(np.float64)
    pred_count = cm.sum(axis=0).astype(np.float64)
    present = ref_count > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(present, tp / (ref_count + pred_count - tp), np.nan)
        acc = np.where(present, tp / ref_count, np.nan)
    oacc = float(tp.sum() / total) if total else math.nan
    return SemanticMetrics(
        cm,
        oacc,
        float(np.mean(acc[present])) if np.any(present) else math.nan,
        float(np.mean(iou[present])) if np.any(present) else math.nan,
        iou,
        acc,
    )


@dataclass(frozen=True)
class InstanceMatching:
    """One-to-one matches ``(reference id, predicted id, IoU)`` and the unmatched IDs of both sides."""

    matches: List[Tuple[int, int, float]]
    unmatched_reference: List[int]
    unmatched_predicted: List[int]

    @property
    def counts(self) -> "DetectionCounts":
        tp = len(self.matches)
        return DetectionCounts(tp + len(self.unmatched_reference), tp, len(self.unmatched_reference),
                               len(self.unmatched_predicted))


def instance_ious(reference: npt.ArrayLike, predicted: npt.ArrayLike):
    """Reference IDs, predicted IDs and the dense IoU matrix between their point sets (``-1`` points ignored)."""
    ref = np.asarray(reference, dtype=np.int64)
    pred = np.asarray(predicted, dtype=np.int64)
    if ref.shape != pred.shape:
        raise ValueError("reference and predicted labelings must cover the same points")
    ref_ids, ref_sizes = np.unique(ref[ref >= 0], return_counts=True)
    pred_ids, pred_sizes = np.unique(pred[pred >= 0], return_counts=True)
    both = (ref >= 0) & (pred >= 0)
    r = np.searchsorted(ref_ids, ref[both])
    p = np.searchsorted(pred_ids, pred[both])
    inter = coo_matrix((np.ones(len(r)), (r, p)), shape=(len(ref_ids), len(pred_ids))).toarray()
    union = ref_sizes[:, None] + pred_sizes[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return ref_ids, pred_ids, iou


def match_instances(reference: npt.ArrayLike, predicted: npt.ArrayLike, iou_min: float = 0.5) -> InstanceMatching:
    """Greedy one-to-one matching in descending IoU (ties: lower reference ID, then lower predicted ID).

    Pairs below ``iou_min`` are never matched. Points labeled ``-1`` on a side belong to no instance of that side.
    """
    ref_ids, pred_ids, iou = instance_ious(reference, predicted)
    rows, cols = np.nonzero(iou >= iou_min)
    order = np.lexsort((pred_ids[cols], ref_ids[rows], -iou[rows, cols]))
    used_r, used_p = set(), set()
    matches = []
    for k in order:
        i, j = int(rows[k]), int(cols[k])
        if i in used_r or j in used_p:
            continue
        used_r.add(i)
        used_p.add(j)
        matches.append((int(ref_ids[i]), int(pred_ids[j]), float(iou[i, j])))
    return InstanceMatching(
        matches,
        [int(ref_ids[i]) for i in range(len(ref_ids)) if i not in used_r],
        [int(pred_ids[j]) for j in range(len(pred_ids)) if j not in used_p],
    )


@dataclass(frozen=True)
class DetectionCounts:
    """Reference trees ``N`` and the TP / FN / FP counts of a matching."""

    N: int
    TP: int
    FN: int
    FP: int

    def __post_init__(self) -> None:
        if min(self.N, self.TP, self.FN, self.FP) < 0:
            raise ValueError("detection counts must be non-negative")
        if self.N != self.TP + self.FN:
            raise ValueError("N must equal TP + FN")

    @property
    def detected(self) -> int:
        return self.TP + self.FP

    @classmethod
    def from_detected(cls, n: int, detected: int, tp: int) -> "DetectionCounts":
        return cls(n, tp, n - tp, detected - tp)


@dataclass(frozen=True)
class DetectionMetrics:
    """Detection scores as fractions; ``flags`` names those set to 0 because they were undefined."""

    completeness: float
    omission: float
    commission: float
    precision: float
    f_score: float
    accuracy_index: float
    matching_score: float
    flags: Tuple[str, ...] = ()

    def percent(self, decimals: int = 1) -> Dict[str, float]:
        """Scores in percent, rounded like the published tables."""
        return {k: round(100.0 * v, decimals) for k, v in asdict(self).items() if k != "flags"}

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["flags"] = list(self.flags)
        out["percent"] = self.percent()
        return out


def _ratio(num: int, den: int, name: str, flags: List[str]) -> Fraction:
    if den == 0:
        flags.append(name)
        return Fraction(0)
    return Fraction(num, den)


def detection_metrics(counts: DetectionCounts) -> DetectionMetrics:
    """Completeness, omission, commission, precision, F, accuracy index and matching score.

    Every ratio is evaluated exactly on the integer counts before conversion to float. Undefined ratios (zero
    denominators) are reported as 0 and named in ``flags``.
    """
    n, tp, fp = counts.N, counts.TP, counts.FP
    flags: List[str] = []
    completeness = _ratio(tp, n, "completeness", flags)
    omission = 1 - completeness if n else _ratio(0, 0, "omission", flags)
    commission = _ratio(fp, tp + fp, "commission", flags)
    precision = _ratio(tp, tp + fp, "precision", flags)
    if n == 0 or tp + fp == 0 or tp == 0:
        # 2rp / (r + p) with r or p undefined, or r = p = 0
        f = _ratio(0, 0, "f_score", flags) if (n == 0 or tp + fp == 0) else Fraction(0)
    else:
        f = 2 * completeness * precision / (completeness + precision)
    ai = _ratio(tp - fp, n, "accuracy_index", flags)
    m = _ratio(tp, n + fp, "matching_score", flags)
    return DetectionMetrics(float(completeness), float(omission), float(commission), float(precision), float(f),
                            float(ai), float(m), tuple(flags))


@dataclass(frozen=True)
class RegressionStats:
    """Least-squares line of predicted on reference values and the deviation statistics.

    ``rmse_percent`` is a fraction of the mean reference value. ``flags`` lists undefined statistics.
    """

    n: int
    slope: float
    intercept: float
    r_squared: float
    p_value: float
    rmse: float
    rmse_percent: float
    flags: Tuple[str, ...] = ()

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["flags"] = list(self.flags)
        return out


def attribute_regression(reference: npt.ArrayLike, predicted: npt.ArrayLike) -> RegressionStats:
    """OLS fit ``predicted = slope * reference + intercept`` with the two-sided t-test p-value of ``slope != 0``.

    Slope, intercept, R² and p-value need at least three pairs and a non-constant reference; RMSE needs one pair.
    """
    ref = np.asarray(reference, dtype=np.float64)
    pred = np.asarray(predicted, dtype=np.float64)
    if ref.shape != pred.shape or ref.ndim != 1:
        raise ValueError("reference and predicted values must be parallel 1D sequences")
    n = len(ref)
    flags: List[str] = []
    if n == 0:
        return RegressionStats(0, math.nan, math.nan, math.nan, math.nan, math.nan, math.nan, ("empty",))
    rmse = float(np.sqrt(np.mean((pred - ref) ** 2)))
    mean_ref = float(ref.mean())
    rmse_pct = rmse / mean_ref if mean_ref != 0 else math.nan
    if mean_ref == 0:
        flags.append("rmse_percent")
    slope = intercept = r2 = p = math.nan
    if n < 3:
        flags.append("too_few_pairs")
    elif np.all(ref == ref[0]):
        flags.append("zero_variance_reference")
    else:
        fit = stats.linregress(ref, pred)
        slope, intercept, p = float(fit.slope), float(fit.intercept), float(fit.pvalue)
        r2 = float(min(max(fit.rvalue ** 2, 0.0), 1.0))
    return RegressionStats(n, slope, intercept, r2, p, rmse, rmse_pct, tuple(flags))


@dataclass(frozen=True)
class LocationMetrics:
    rmse_x: float
    rmse_y: float
    mean_rmse: float
    deviations: np.ndarray

    def to_dict(self) -> Dict:
        return {"rmse_x": self.rmse_x, "rmse_y": self.rmse_y, "mean_rmse": self.mean_rmse,
                "deviations": self.deviations.tolist()}


def location_metrics(reference_xy: npt.ArrayLike, predicted_xy: npt.ArrayLike) -> LocationMetrics:
    """Componentwise RMSE of predicted minus reference positions and their mean."""
    ref = np.asarray(reference_xy, dtype=np.float64).reshape(-1, 2)
    pred = np.asarray(predicted_xy, dtype=np.float64).reshape(-1, 2)
    if ref.shape != pred.shape:
        raise ValueError("reference and predicted locations must be parallel")
    if len(ref) == 0:
        raise ValueError("location metrics need at least one matched pair")
    dev = pred - ref
    rx, ry = np.sqrt(np.mean(dev ** 2, axis=0))
    return LocationMetrics(float(rx), float(ry), float((rx + ry) / 2.0), dev)


@dataclass(frozen=True)
class DtmMetrics:
    """RMSE in centimeters over cells covered in both rasters, and the predicted raster's coverage."""

    rmse_cm: float
    coverage: float
    reference_coverage: float
    common_cells: int


def dtm_metrics(predicted: DtmRaster, reference: DtmRaster) -> DtmMetrics:
    """Vertical agreement of two rasters on the same grid.

    Raises:
        ValueError: If the grids differ in shape, cell or origin.
    """
    if (predicted.shape != reference.shape or not math.isclose(predicted.cell, reference.cell, rel_tol=1e-12)
            or not np.allclose(predicted.origin, reference.origin, rtol=0, atol=1e-9 * predicted.cell)):
        raise ValueError("DTM rasters must share the same grid geometry")
    both = predicted.covered & reference.covered
    diff = predicted.heights[both] - reference.heights[both]
    rmse = float(np.sqrt(np.mean(diff ** 2))) * 100.0 if diff.size else math.nan
    return DtmMetrics(rmse, predicted.coverage_fraction, reference.coverage_fraction, int(both.sum()))


@dataclass(frozen=True)
class Strata:
    dominant: List[int]
    understory: List[int]
    threshold: float


def stratify_dominant(heights: Mapping[int, float]) -> Strata:
    """Trees strictly taller than a third of the tallest tree are dominant, the rest understory."""
    if not heights:
        raise ValueError("stratification needs at least one tree height")
    threshold = max(heights.values()) / 3.0
    ids = sorted(heights)
    return Strata([i for i in ids if heights[i] > threshold], [i for i in ids if not heights[i] > threshold],
                  threshold)


def stratified_counts(
    matching: InstanceMatching,
    reference_heights: Mapping[int, float],
    predicted_heights: Mapping[int, float],
) -> Dict[str, DetectionCounts]:
    """Detection counts per stratum and overall.

    Reference trees are stratified by their own heights. Predictions use their predicted heights against the same
    threshold. A match is a true positive of a stratum only when both trees fall into it; a cross-stratum match
    counts as a miss in the reference tree's stratum and a false detection in the prediction's stratum.
    """
    strata = stratify_dominant(reference_heights)
    ref_dom = set(strata.dominant)

    def pred_dominant(pid: int) -> bool:
        h = predicted_heights.get(pid, math.nan)
        return bool(h > strata.threshold)

    out = {"all": matching.counts}
    ref_all = sorted(reference_heights)
    pred_all = sorted({p for _, p, _ in matching.matches} | set(matching.unmatched_predicted))
    for name, dominant in (("dominant", True), ("understory", False)):
        refs = [r for r in ref_all if (r in ref_dom) == dominant]
        preds = [p for p in pred_all if pred_dominant(p) == dominant]
        tp = sum(1 for r, p, _ in matching.matches if (r in ref_dom) == dominant and pred_dominant(p) == dominant)
        out[name] = DetectionCounts(len(refs), tp, len(refs) - tp, len(preds) - tp)
    return out


@dataclass
class EvaluationReport:
    plot_id: str
    detection: Dict
    semantic: Optional[Dict] = None
    attributes: Dict[str, Dict] = field(default_factory=dict)
    location: Optional[Dict] = None
    dtm: Optional[Dict] = None
    strata: Optional[Dict] = None
    matches: List[Dict] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return asdict(self)


ATTRIBUTES = ("height", "crown_diameter", "crown_volume_all", "crown_volume_live", "dbh")


def _paired(matches, ref_records, pred_records, name):
    ref_vals, pred_vals = [], []
    for r, p, _ in matches:
        a, b = getattr(ref_records[r], name), getattr(pred_records[p], name)
        if a is not None and b is not None and math.isfinite(a) and math.isfinite(b):
            ref_vals.append(a)
            pred_vals.append(b)
    return np.array(ref_vals), np.array(pred_vals)


def evaluate_clouds(
    predicted,
    reference,
    plot_id: str = "plot",
    inventory_config=None,
    iou_min: float = 0.5,
    field_dbh: Optional[Mapping[int, float]] = None,
) -> EvaluationReport:
    """Full comparison of a predicted and a reference labeling of the same points.

    Both clouds go through the inventory; matched trees feed the attribute regressions and location metrics,
    the terrain models are compared cell by cell, and detection counts are split into dominant and understory
    strata by height. Field DBH values are keyed by reference tree ID; without them the field comparison is
    omitted and ``no_field_dbh`` is flagged.

    Raises:
        ValueError: If the clouds do not hold the same number of points.
    """
    from .inventory import InventoryConfig, build_inventory

    if len(predicted) != len(reference):
        raise ValueError(f"predicted cloud has {len(predicted)} points, reference has {len(reference)}")
    config = inventory_config or InventoryConfig()
    flags: List[str] = []
    matching = match_instances(reference.instance, predicted.instance, iou_min)
    detection = detection_metrics(matching.counts)
    report = EvaluationReport(
        plot_id=plot_id,
        detection={"counts": asdict(matching.counts), "metrics": detection.to_dict()},
        matches=[{"reference": r, "predicted": p, "iou": iou} for r, p, iou in matching.matches],
    )
    report.semantic = semantic_metrics(reference.semantic, predicted.semantic).to_dict()

    ref_inv = build_inventory(reference, config)
    pred_inv = build_inventory(predicted, config)
    ref_records = {t.tree_id: t for t in ref_inv.trees}
    pred_records = {t.tree_id: t for t in pred_inv.trees}
    for name in ATTRIBUTES:
        ref_vals, pred_vals = _paired(matching.matches, ref_records, pred_records, name)
        report.attributes[name] = attribute_regression(ref_vals, pred_vals).to_dict()
    if field_dbh:
        pairs = [(field_dbh[r], pred_records[p].dbh) for r, p, _ in matching.matches
                 if r in field_dbh and pred_records[p].dbh is not None]
        ref_vals = np.array([a for a, _ in pairs])
        pred_vals = np.array([b for _, b in pairs])
        report.attributes["dbh_field"] = attribute_regression(ref_vals, pred_vals).to_dict()
    else:
        flags.append("no_field_dbh")
    if matching.matches:
        ref_xy = [ref_records[r].location for r, _, _ in matching.matches]
        pred_xy = [pred_records[p].location for _, p, _ in matching.matches]
        report.location = location_metrics(ref_xy, pred_xy).to_dict()
    else:
        flags.append("no_matches")
    report.dtm = asdict(dtm_metrics(pred_inv.dtm, ref_inv.dtm))
    ref_heights = {t.tree_id: t.height for t in ref_inv.trees}
    if ref_heights:
        strata = stratify_dominant(ref_heights)
        counts = stratified_counts(matching, ref_heights, {t.tree_id: t.height for t in pred_inv.trees})
        report.strata = {
            "threshold_m": strata.threshold,
            **{k: {"counts": asdict(v), "metrics": detection_metrics(v).to_dict()} for k, v in counts.items()},
        }
    report.flags = flags
    return report
