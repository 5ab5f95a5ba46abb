"""Evaluation metrics over pixel confusion counts.

Every metric is a pure function of a `ConfusionMatrix` whose entry
q[i][j] counts pixels predicted as class i with ground truth class j.
Division-by-zero conventions are explicit: a ratio whose denominator is
zero reports 0.0 and raises a flag string instead of silently claiming a
perfect score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ETA_MODES = ("squared", "printed")

CSV_HEADER = "run_id,split,OA,IoU,Prec,Rec,F1,mIoU,SeK,flags"


@dataclass
class ConfusionMatrix:
    """(c+1) x (c+1) integer counts; index 0 is the no-change class."""

    num_classes: int
    q: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.q is None:
            self.q = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.q = np.asarray(self.q, dtype=np.int64)
            if self.q.shape != (self.num_classes, self.num_classes):
                raise ValueError(f"confusion matrix shape {self.q.shape} vs {self.num_classes} classes")
            if (self.q < 0).any():
                raise ValueError("confusion matrix counts must be non-negative")

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred = np.asarray(pred).reshape(-1)
        gt = np.asarray(gt).reshape(-1)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} vs ground truth {gt.shape}")
        k = self.num_classes
        if pred.min(initial=0) < 0 or gt.min(initial=0) < 0 or \
           pred.max(initial=0) >= k or gt.max(initial=0) >= k:
            raise ValueError(f"labels out of range for {k} classes")
        idx = pred.astype(np.int64) * k + gt.astype(np.int64)
        self.q += np.bincount(idx, minlength=k * k).reshape(k, k)

    @property
    def total(self) -> int:
        return int(self.q.sum())


def binary_confusion(pred_mask: np.ndarray, gt_mask: np.ndarray) -> ConfusionMatrix:
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"mask extents differ: {pred_mask.shape} vs {gt_mask.shape}")
    for name, m in (("prediction", pred_mask), ("ground truth", gt_mask)):
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name} mask has non-binary values")
    cm = ConfusionMatrix(2)
    cm.add(pred_mask, gt_mask)
    return cm


def _safe_div(num: float, den: float, flags: list, flag: str) -> float:
    if den == 0:
        flags.append(flag)
        return 0.0
    return num / den


def binary_metrics_from_counts(tp: int, fp: int, tn: int, fn: int) -> dict:
    """OA / IoU / Prec / Rec / F1 from raw pixel counts."""
    flags: list[str] = []
    total = tp + fp + tn + fn
    out = {
        "OA": _safe_div(tp + tn, total, flags, "empty"),
        "IoU": _safe_div(tp, tp + fp + fn, flags, "no_positives"),
        "Prec": _safe_div(tp, tp + fp, flags, "no_predicted_positives"),
        "Rec": _safe_div(tp, tp + fn, flags, "no_actual_positives"),
    }
    p, r = out["Prec"], out["Rec"]
    out["F1"] = _safe_div(2 * p * r, p + r, flags, "f1_undefined")
    out["flags"] = sorted(set(flags))
    return out


def binary_metrics(pred_mask: np.ndarray, gt_mask: np.ndarray) -> dict:
    """Binary change metrics; class 1 is 'changed'."""
    cm = binary_confusion(pred_mask, gt_mask)
    tp = int(cm.q[1, 1])
    fp = int(cm.q[1, 0])
    fn = int(cm.q[0, 1])
    tn = int(cm.q[0, 0])
    out = binary_metrics_from_counts(tp, fp, tn, fn)
    out["confusion"] = cm
    return out


def scd_metrics(pred_maps: np.ndarray, gt_maps: np.ndarray, num_classes: int,
                eta_mode: str = "squared") -> dict:
    """Semantic change metrics: OA, binary F1, mIoU, SeK.

    `pred_maps`/`gt_maps` hold class indices (0 = no change); any leading
    shape is accepted and pooled into one confusion matrix.  mIoU averages
    the unchanged-region and changed-region IoUs of the binarized maps.
    SeK is the chance-corrected class agreement over change pixels scaled
    by exp(IoU_changed - 1); `eta_mode` picks whether the expected-agreement
    denominator is squared ("squared", standard kappa normalization) or
    not ("printed").
    """
    cm = ConfusionMatrix(num_classes)
    cm.add(pred_maps, gt_maps)
    return scd_metrics_from_confusion(cm, eta_mode)


def scd_metrics_from_confusion(cm: ConfusionMatrix, eta_mode: str = "squared") -> dict:
    if eta_mode not in ETA_MODES:
        raise ValueError(f"unknown eta mode {eta_mode!r}")
    q = cm.q.astype(np.float64)
    flags: list[str] = []
    total = q.sum()

    oa = _safe_div(np.trace(q), total, flags, "empty")

    # binarized change / no-change confusion
    changed_pred = q[1:, :].sum(axis=0)
    b_tp = changed_pred[1:].sum()
    b_fp = changed_pred[0]
    b_fn = q[0, 1:].sum()
    b_tn = q[0, 0]
    iou1 = _safe_div(b_tp, b_tp + b_fp + b_fn, flags, "no_change_pixels")
    iou0 = _safe_div(b_tn, b_tn + b_fp + b_fn, flags, "all_change_pixels")
    miou = 0.5 * (iou0 + iou1)
    binary = binary_metrics_from_counts(int(b_tp), int(b_fp), int(b_tn), int(b_fn))
    flags.extend(binary["flags"])

    # separated kappa over the change classes (q00 excluded from all sums)
    qz = q.copy()
    qz[0, 0] = 0.0
    s = qz.sum()
    if s == 0:
        flags.append("sek_undefined")
        sek = 0.0
        rho = 0.0
        eta = 0.0
    else:
        rho = np.trace(qz) / s
        rows = qz.sum(axis=1)
        cols = qz.sum(axis=0)
        pairs = float((rows * cols).sum())
        eta = pairs / (s * s) if eta_mode == "squared" else pairs / s
        if abs(1.0 - eta) < 1e-15:
            flags.append("sek_degenerate")
            sek = 0.0
        else:
            sek = np.exp(iou1 - 1.0) * (rho - eta) / (1.0 - eta)
    return {
        "OA": oa,
        "F1": binary["F1"],
        "mIoU": miou,
        "SeK": sek,
        "rho": rho,
        "eta": eta,
        "IoU0": iou0,
        "IoU1": iou1,
        "confusion": cm,
        "flags": sorted(set(flags)),
    }


def metrics_csv_row(run_id: str, split: str, values: dict) -> str:
    """Serialize one report row following the fixed CSV schema."""

    def fmt(key):
        v = values.get(key)
        return "" if v is None else f"{v:.10f}"

    flags = ";".join(values.get("flags", []))
    return ",".join([run_id, split, fmt("OA"), fmt("IoU"), fmt("Prec"), fmt("Rec"),
                     fmt("F1"), fmt("mIoU"), fmt("SeK"), flags])
