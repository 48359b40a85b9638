"""Evaluation metrics and protocols.

RMSE and MAE average over every scalar entry (samples x cells x channels).
The percentage error is citywide: per sample, the summed absolute error is
divided by the summed ground-truth flow, and the ratio is averaged over
samples; samples whose ground truth sums to zero are skipped rather than
epsilon-guarded.  Sub-protocols restrict either the cells (heavy-traffic
mask) or the samples (weekday/weekend, day/night, rush hours).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SLICE_NAMES = ("weekday", "weekend", "day", "night", "rush")


def _paired(preds, truths):
    p = np.asarray(preds, dtype=float)
    t = np.asarray(truths, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("empty input")
    return p, t


def rmse(preds, truths) -> float:
    p, t = _paired(preds, truths)
    d = p - t
    return float(np.sqrt(np.mean(d * d)))


def mae(preds, truths) -> float:
    p, t = _paired(preds, truths)
    return float(np.mean(np.abs(p - t)))


def mape_citywide(preds, truths, mask=None) -> float:
    """Mean over samples of sum|err| / sum|truth|, optionally cell-masked.

    Axis 0 indexes samples.  Samples whose masked ground truth sums to zero
    are skipped; raises if every sample is skipped.
    """
    p, t = _paired(preds, truths)
    if p.ndim < 2:
        raise ValueError("expected a leading sample axis")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != p.shape[1:3]:
            raise ValueError(f"mask shape {mask.shape} does not match cells {p.shape[1:3]}")
        p = p[:, mask]
        t = t[:, mask]
    flat_p = p.reshape(p.shape[0], -1)
    flat_t = t.reshape(t.shape[0], -1)
    err = np.abs(flat_p - flat_t).sum(axis=1)
    den = np.abs(flat_t).sum(axis=1)
    keep = den > 0
    if not keep.any():
        raise ValueError("all samples have zero ground-truth flow; MAPE undefined")
    return float(np.mean(err[keep] / den[keep]))


def heavy_region_mask(train_fine_maps) -> np.ndarray:
    """Top 20% of cells by training-set mean total flow; row-major tie-break."""
    maps = np.asarray(train_fine_maps, dtype=float)
    if maps.size == 0 or maps.ndim != 4:
        raise ValueError("expected nonempty (samples, height, width, channels)")
    score = maps.sum(axis=-1).mean(axis=0)
    h, w = score.shape
    k = math.ceil(0.2 * h * w)
    order = np.argsort(-score.ravel(), kind="stable")
    mask = np.zeros(h * w, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(h, w)


def slice_mask(indices, which: str, *, intervals_per_day, interval_minutes,
               start_dow) -> np.ndarray:
    """Boolean filter over absolute interval indices for a named time slice.

    Day is [06:00, 18:00) and night its complement; rush hours are
    [07:30, 09:30) and [17:30, 19:30).  Membership is decided by the
    interval's start time, weekday/weekend by its day of week.
    """
    idx = np.asarray(indices, dtype=np.int64)
    minute = (idx % intervals_per_day) * interval_minutes
    dow = (start_dow + idx // intervals_per_day) % 7
    if which == "weekday":
        return dow < 5
    if which == "weekend":
        return dow >= 5
    if which == "day":
        return (minute >= 360) & (minute < 1080)
    if which == "night":
        return ~((minute >= 360) & (minute < 1080))
    if which == "rush":
        return ((minute >= 450) & (minute < 570)) | ((minute >= 1050) & (minute < 1170))
    raise ValueError(f"unknown slice {which!r}")


def time_slice(indices, which: str, *, intervals_per_day, interval_minutes,
               start_dow) -> np.ndarray:
    """Subset of the given sample indices falling in the named slice."""
    idx = np.asarray(indices, dtype=np.int64)
    keep = slice_mask(idx, which, intervals_per_day=intervals_per_day,
                      interval_minutes=interval_minutes, start_dow=start_dow)
    return idx[keep]


def ha_baseline(train_fine_maps) -> np.ndarray:
    """Historical average: elementwise temporal mean, used for every query."""
    maps = np.asarray(train_fine_maps, dtype=float)
    if maps.size == 0:
        raise ValueError("empty history")
    return maps.mean(axis=0)


@dataclass
class EvalReport:
    rmse: float
    mae: float
    mape: float
    count: int
    slices: dict = field(default_factory=dict)

    def lines(self):
        out = [f"count={self.count}",
               f"mae={self.mae:.10g}",
               f"mape={self.mape:.10g}",
               f"rmse={self.rmse:.10g}"]
        for name in sorted(self.slices):
            sub = self.slices[name]
            for key in sorted(sub):
                out.append(f"{name}_{key}={sub[key]:.10g}")
        return out

    def text(self):
        return "".join(line + "\n" for line in self.lines())


def _triple(preds, truths):
    out = {"rmse": rmse(preds, truths), "mae": mae(preds, truths),
           "count": preds.shape[0]}
    try:
        out["mape"] = mape_citywide(preds, truths)
    except ValueError:
        pass  # slice may hold only zero-truth samples
    return out


def evaluate(preds, truths, indices, *, heavy_mask=None, intervals_per_day,
             interval_minutes, start_dow) -> EvalReport:
    """Whole-set metrics plus heavy-traffic and time-slice sub-reports.

    ``indices`` gives each sample's absolute interval index for calendar
    slicing.  Empty slices are recorded with count 0 and no metric values.
    """
    p, t = _paired(preds, truths)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape[0] != p.shape[0]:
        raise ValueError("one index per sample required")
    report = EvalReport(rmse=rmse(p, t), mae=mae(p, t),
                        mape=mape_citywide(p, t), count=p.shape[0])
    if heavy_mask is not None:
        sub_p, sub_t = p[:, heavy_mask], t[:, heavy_mask]
        report.slices["heavy"] = {"rmse": rmse(sub_p, sub_t),
                                  "mae": mae(sub_p, sub_t),
                                  "mape": mape_citywide(p, t, mask=heavy_mask),
                                  "count": p.shape[0]}
    for name in SLICE_NAMES:
        keep = slice_mask(idx, name, intervals_per_day=intervals_per_day,
                          interval_minutes=interval_minutes, start_dow=start_dow)
        if not keep.any():
            report.slices[name] = {"count": 0}
            continue
        report.slices[name] = _triple(p[keep], t[keep])
    return report
