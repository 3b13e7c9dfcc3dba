"""Saliency evaluation: PR curves, F-measure, MAE and S-measure."""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

EPS = np.finfo(np.float64).eps
N_THRESHOLDS = 256
THRESHOLDS = np.arange(N_THRESHOLDS, dtype=np.float64) / 255.0


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    return pred, gt.astype(bool)


def precision_recall(pred, gt, threshold: float) -> Tuple[float, float]:
    """Precision and recall of ``pred >= threshold`` against a binary mask.

    No predicted positives gives precision 1; an empty mask gives recall 1.
    """
    pred, gt = _check(pred, gt)
    binary = pred >= threshold
    tp = np.count_nonzero(binary & gt)
    n_pred = np.count_nonzero(binary)
    n_gt = np.count_nonzero(gt)
    precision = tp / n_pred if n_pred else 1.0
    recall = tp / n_gt if n_gt else 1.0
    return float(precision), float(recall)


def precision_recall_sweep(pred, gt, thresholds=THRESHOLDS) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised ``precision_recall`` over ascending thresholds."""
    pred, gt = _check(pred, gt)
    fg = np.sort(pred[gt])
    allv = np.sort(pred.ravel())
    tp = fg.size - np.searchsorted(fg, thresholds, side="left")
    n_pred = allv.size - np.searchsorted(allv, thresholds, side="left")
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(n_pred > 0, tp / np.maximum(n_pred, 1), 1.0)
        recall = tp / fg.size if fg.size else np.ones_like(thresholds, dtype=np.float64)
    return precision.astype(np.float64), np.asarray(recall, dtype=np.float64)


def f_measure(precision, recall, eta_sq: float = 0.3):
    """(1 + eta^2) P R / (eta^2 P + R), zero where the denominator vanishes."""
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    num = (1.0 + eta_sq) * p * r
    den = eta_sq * p + r
    out = np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=den > 0)
    return float(out) if out.ndim == 0 else out


def adaptive_threshold(pred) -> float:
    return float(min(2.0 * np.mean(pred), 1.0))


def mae(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    return float(np.mean(np.abs(pred - gt)))


# --- S-measure (object-aware + region-aware structural similarity) ---

def _object_score(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return float(2.0 * x / (x * x + 1.0 + sigma + EPS))


def s_object(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    u = gt.mean()
    o_fg = _object_score(pred[gt])
    o_bg = _object_score(1.0 - pred[~gt])
    return float(u * o_fg + (1.0 - u) * o_bg)


def _centroid(gt: np.ndarray) -> Tuple[int, int]:
    """Split point (x, y): rows [0, y) and columns [0, x) form the top-left block."""
    h, w = gt.shape
    if not gt.any():
        return int(round(w / 2)), int(round(h / 2))
    rows, cols = np.nonzero(gt)
    return int(np.round(cols.mean())) + 1, int(np.round(rows.mean())) + 1


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    x, y = pred.mean(), gt.mean()
    denom = max(n - 1, 1)
    sx = ((pred - x) ** 2).sum() / denom
    sy = ((gt - y) ** 2).sum() / denom
    sxy = ((pred - x) * (gt - y)).sum() / denom
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return float(alpha / (beta + EPS))
    if beta == 0:
        return 1.0
    return 0.0


def s_region(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    h, w = gt.shape
    cx, cy = _centroid(gt)
    gtf = gt.astype(np.float64)
    score = 0.0
    for rs, cs in ((slice(0, cy), slice(0, cx)), (slice(0, cy), slice(cx, w)),
                   (slice(cy, h), slice(0, cx)), (slice(cy, h), slice(cx, w))):
        block = gtf[rs, cs]
        if block.size == 0:
            continue
        score += block.size / (h * w) * _ssim(pred[rs, cs], block)
    return float(score)


def s_measure(pred, gt, lambda_: float = 0.5) -> float:
    """lambda * S_object + (1 - lambda) * S_region, clamped to [0, 1].

    All-background / all-foreground masks compare the mean prediction with the constant.
    """
    pred, gt = _check(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    q = lambda_ * s_object(pred, gt) + (1.0 - lambda_) * s_region(pred, gt)
    return float(min(max(q, 0.0), 1.0))


# --- dataset evaluation ---

@dataclass
class ImageMetrics:
    name: str
    fmax: float
    fadaptive: float
    mae: float
    smeasure: float
    precision: np.ndarray = field(repr=False)
    recall: np.ndarray = field(repr=False)


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray


@dataclass
class MetricReport:
    f_measure: float
    f_adaptive: float
    mae: float
    s_measure: float
    pr: PRCurve
    eta_sq: float = 0.3
    lambda_: float = 0.5
    f_policy: str = "max"
    per_image: List[ImageMetrics] = field(default_factory=list)
    missing: List[str] = field(default_factory=list)

    @property
    def f_max(self) -> float:
        return float(np.max(f_measure(self.pr.precision, self.pr.recall, self.eta_sq)))


def evaluate_image(name: str, pred, gt, eta_sq: float = 0.3, lambda_: float = 0.5) -> ImageMetrics:
    pred, gt = _check(pred, gt)
    precision, recall = precision_recall_sweep(pred, gt)
    fmax = float(np.max(f_measure(precision, recall, eta_sq)))
    p_ad, r_ad = precision_recall(pred, gt, adaptive_threshold(pred))
    return ImageMetrics(name, fmax, f_measure(p_ad, r_ad, eta_sq), mae(pred, gt),
                        s_measure(pred, gt, lambda_), precision, recall)


def aggregate(per_image: List[ImageMetrics], eta_sq: float = 0.3, lambda_: float = 0.5,
              f_policy: str = "max") -> MetricReport:
    """Dataset means in sorted-name order; max-F comes from the mean PR curve."""
    if not per_image:
        raise ValueError("no images to aggregate")
    if f_policy not in ("max", "adaptive"):
        raise ValueError(f"unknown F-measure policy {f_policy!r}")
    per_image = sorted(per_image, key=lambda m: m.name)
    precision = np.mean([m.precision for m in per_image], axis=0)
    recall = np.mean([m.recall for m in per_image], axis=0)
    f_curve = f_measure(precision, recall, eta_sq)
    f_adaptive = float(np.mean([m.fadaptive for m in per_image]))
    return MetricReport(
        f_measure=float(np.max(f_curve)) if f_policy == "max" else f_adaptive,
        f_adaptive=f_adaptive,
        mae=float(np.mean([m.mae for m in per_image])),
        s_measure=float(np.mean([m.smeasure for m in per_image])),
        pr=PRCurve(THRESHOLDS.copy(), precision, recall),
        eta_sq=eta_sq, lambda_=lambda_, f_policy=f_policy, per_image=per_image)


def evaluate_arrays(preds: Dict[str, np.ndarray], gts: Dict[str, np.ndarray], **options) -> MetricReport:
    eta_sq = options.get("eta_sq", 0.3)
    lambda_ = options.get("lambda_", 0.5)
    per_image = [evaluate_image(k, preds[k], gts[k], eta_sq, lambda_) for k in sorted(preds)]
    return aggregate(per_image, eta_sq, lambda_, options.get("f_policy", "max"))


def load_prediction(path) -> np.ndarray:
    """8-bit grayscale map scaled to [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def load_mask(path) -> np.ndarray:
    """Binary mask; 8-bit values >= 128 are foreground."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128


def _stems(directory: Path) -> Dict[str, Path]:
    return {p.stem: p for p in sorted(directory.glob("*.png"))}


def evaluate_dataset(pred_dir, gt_dir, eta_sq: float = 0.3, lambda_: float = 0.5,
                     f_policy: str = "max") -> MetricReport:
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds, gts = _stems(pred_dir), _stems(gt_dir)
    missing = sorted(set(preds) ^ set(gts))
    for stem in missing:
        side = "ground truth" if stem in preds else "prediction"
        log.warning("no %s for %s; skipped", side, stem)
    matched = sorted(set(preds) & set(gts))
    if not matched:
        raise ValueError(f"no matching PNG stems between {pred_dir} and {gt_dir}")
    per_image = []
    for stem in matched:
        pred, gt = load_prediction(preds[stem]), load_mask(gts[stem])
        if pred.shape != gt.shape:
            raise ValueError(f"{stem}: prediction {pred.shape} and mask {gt.shape} differ in size")
        per_image.append(evaluate_image(stem, pred, gt, eta_sq, lambda_))
    report = aggregate(per_image, eta_sq, lambda_, f_policy)
    report.missing = missing
    return report


def write_report(report: MetricReport, out_dir) -> Tuple[Path, Path]:
    """Write ``report.csv`` (per image + MEAN row) and ``pr_curve.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path, pr_path = out_dir / "report.csv", out_dir / "pr_curve.csv"
    with open(report_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "fmax", "fadaptive", "mae", "smeasure"])
        for m in report.per_image:
            writer.writerow([m.name, repr(m.fmax), repr(m.fadaptive), repr(m.mae), repr(m.smeasure)])
        writer.writerow(["MEAN", repr(report.f_max), repr(report.f_adaptive), repr(report.mae),
                         repr(report.s_measure)])
    with open(pr_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall"])
        for t, p, r in zip(report.pr.thresholds, report.pr.precision, report.pr.recall):
            writer.writerow([repr(float(t)), repr(float(p)), repr(float(r))])
    return report_path, pr_path


def read_pr_curve(path) -> PRCurve:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} holds no PR points")
    cols = {k: np.array([float(r[k]) for r in rows]) for k in ("threshold", "precision", "recall")}
    return PRCurve(cols["threshold"], cols["precision"], cols["recall"])
