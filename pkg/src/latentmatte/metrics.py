"""Matting evaluation metrics: MSE, SAD, Grad, Conn, and aggregate reports.

Conventions (fixed, shared with the brute-force test oracles): MSE and Grad
are evaluated over the UNK region of the ground-truth trimap, SAD and Conn
over the full image. SAD and Conn are divided by 1000, Grad is scaled by
1000 so desk-scale values stay readable.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d, label

from .dataset import UNK

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8)


def mse(pred: np.ndarray, gt: np.ndarray, region: np.ndarray) -> float:
    """Mean squared difference over pixels labeled UNK in ``region``."""
    if pred.shape != gt.shape or pred.shape != region.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape} vs {region.shape}")
    m = region == UNK
    if not m.any():
        raise ValueError("empty UNK region")
    d = pred.astype(np.float64) - gt.astype(np.float64)
    return float(np.mean(d[m] ** 2))


def sad(pred: np.ndarray, gt: np.ndarray) -> float:
    """Sum of absolute differences over the whole image, divided by 1000."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    d = np.abs(pred.astype(np.float64) - gt.astype(np.float64))
    return float(d.sum() / 1000.0)


def gaussian_derivative_taps(sigma: float):
    """1-D smoothing and derivative taps, truncated at 3*sigma.

    The smoothing taps sum to 1; the derivative taps are the analytic
    derivative of the same normalized Gaussian sampled at integer offsets.
    """
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    dg = -x / sigma**2 * g
    return g, dg


def _gradient_magnitude(a: np.ndarray, sigma: float) -> np.ndarray:
    g, dg = gaussian_derivative_taps(sigma)
    a = a.astype(np.float64)
    gx = correlate1d(correlate1d(a, dg, axis=1, mode="nearest"), g, axis=0, mode="nearest")
    gy = correlate1d(correlate1d(a, dg, axis=0, mode="nearest"), g, axis=1, mode="nearest")
    return np.sqrt(gx**2 + gy**2)


def grad_error(pred: np.ndarray, gt: np.ndarray, sigma: float = 1.4,
               region: np.ndarray | None = None) -> float:
    """Squared difference of Gaussian-derivative gradient magnitudes, x1000."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    err = (_gradient_magnitude(pred, sigma) - _gradient_magnitude(gt, sigma)) ** 2
    if region is not None:
        err = err[region == UNK]
    return float(err.sum() * 1000.0)


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = label(mask, structure=_FOUR_CONN)
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    # ties resolve to the lowest label, i.e. first component in scan order
    return labels == (int(np.argmax(sizes)) + 1)


def conn_error(pred: np.ndarray, gt: np.ndarray, delta: float = 0.1,
               theta: float = 0.15) -> float:
    """Connectivity error between two mattes, divided by 1000.

    For each pixel, l_i is the highest threshold at which the pixel is still
    4-connected to the largest component of the jointly binarized source
    region (pred >= t AND gt >= t); the per-pixel connectivity deficit
    phi = 1 - d * [d >= theta] with d = alpha - l_i is compared between the
    two mattes.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    pred = pred.astype(np.float64)
    gt = gt.astype(np.float64)
    thresholds = np.arange(delta, 1.0 + delta / 2, delta)
    if not ((pred >= thresholds[0]) & (gt >= thresholds[0])).any():
        warnings.warn("no joint foreground at the lowest threshold; Conn = 0")
        return 0.0
    l_map = np.full(pred.shape, -1.0)
    for k, t in enumerate(thresholds):
        omega = _largest_component((pred >= t) & (gt >= t))
        newly_cut = (l_map == -1.0) & (~omega)
        l_map[newly_cut] = thresholds[k - 1] if k > 0 else 0.0
    l_map[l_map == -1.0] = 1.0

    d_pred = pred - l_map
    d_gt = gt - l_map
    phi_pred = 1.0 - d_pred * (d_pred >= theta)
    phi_gt = 1.0 - d_gt * (d_gt >= theta)
    return float(np.abs(phi_pred - phi_gt).sum() / 1000.0)


@dataclass
class MetricRow:
    image_id: int
    mse: float
    sad: float
    grad: float
    conn: float


_METRIC_NAMES = ("mse", "sad", "grad", "conn")


@dataclass
class MetricReport:
    rows: list[MetricRow]
    means: dict = field(default_factory=dict)
    baseline_name: str = ""
    improvement_pct: dict | None = None

    def __post_init__(self):
        if not self.means:
            self.means = {
                name: float(np.mean([getattr(r, name) for r in self.rows]))
                for name in _METRIC_NAMES
            }

    def image_ids(self):
        return [r.image_id for r in self.rows]

    def to_csv(self) -> str:
        lines = ["image_id,mse,sad,grad,conn"]
        for r in self.rows:
            lines.append(f"{r.image_id},{r.mse:.10g},{r.sad:.10g},{r.grad:.10g},{r.conn:.10g}")
        mean_cells = ",".join(f"{self.means[n]:.10g}" for n in _METRIC_NAMES)
        lines.append(f"mean,{mean_cells}")
        if self.improvement_pct is not None:
            imp_cells = ",".join(f"{self.improvement_pct[n]:.10g}" for n in _METRIC_NAMES)
            lines.append(f"improvement_pct_vs_{self.baseline_name},{imp_cells}")
        return "\n".join(lines) + "\n"

    def to_record(self) -> dict:
        rec = {
            "rows": [vars(r) for r in self.rows],
            "means": self.means,
        }
        if self.improvement_pct is not None:
            rec["baseline"] = self.baseline_name
            rec["improvement_pct"] = self.improvement_pct
        return rec

    def write(self, csv_path: str, json_path: str) -> None:
        with open(csv_path, "w") as f:
            f.write(self.to_csv())
        with open(json_path, "w") as f:
            json.dump(self.to_record(), f, indent=2, sort_keys=True)
            f.write("\n")


def evaluate_dataset(predictions, dataset, baseline_report: MetricReport | None = None,
                     baseline_name: str = "baseline") -> MetricReport:
    """Per-image metric rows plus means; optional improvement vs a baseline."""
    if len(predictions) != len(dataset):
        raise ValueError(f"{len(predictions)} predictions for {len(dataset)} samples")
    rows = []
    for i, (pred, sample) in enumerate(zip(predictions, dataset)):
        rows.append(MetricRow(
            image_id=i,
            mse=mse(pred, sample.alpha, sample.trimap),
            sad=sad(pred, sample.alpha),
            grad=grad_error(pred, sample.alpha, region=sample.trimap),
            conn=conn_error(pred, sample.alpha),
        ))
    report = MetricReport(rows=rows)
    if baseline_report is not None:
        if baseline_report.image_ids() != report.image_ids():
            raise ValueError("baseline report covers a different image set")
        report.baseline_name = baseline_name
        report.improvement_pct = {}
        for name in _METRIC_NAMES:
            base = baseline_report.means[name]
            ours = report.means[name]
            report.improvement_pct[name] = 0.0 if base == 0 else 100.0 * (base - ours) / base
    return report
