"""Segmentation quality metrics.

Dice overlap, MAD (symmetric mean distance between boundary surfaces, in
mm), and the absolute/relative volume differences used for clinical-style
reporting.  The same functions serve pairwise agreement between two
reference segmentations.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grid import LabelMap, voxel_volume


def _as_mask(obj) -> np.ndarray:
    if isinstance(obj, LabelMap):
        return obj.data.astype(bool)
    arr = np.asarray(obj)
    vals = np.unique(arr)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError("mask values must be 0/1")
    return arr.astype(bool)


def _spacing_of(y, p, spacing):
    if spacing is not None:
        return tuple(float(s) for s in spacing)
    for obj in (y, p):
        if isinstance(obj, LabelMap):
            return obj.spacing
    return (1.0, 1.0, 1.0)


def dice(y, p) -> float:
    """2 |Y and P| / (|Y| + |P|); two empty masks agree perfectly (1.0)."""
    ym, pm = _as_mask(y), _as_mask(p)
    if ym.shape != pm.shape:
        raise ValueError(f"shape mismatch: {ym.shape} vs {pm.shape}")
    denom = int(ym.sum()) + int(pm.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ym, pm).sum()) / denom


def boundary(mask) -> np.ndarray:
    """Inner surface: foreground voxels with a background 6-neighbor.

    The volume border counts as background.  Returns a boolean array of the
    mask's shape.
    """
    m = _as_mask(mask)
    padded = np.pad(m, 1, constant_values=False)
    interior = np.ones_like(m, dtype=bool)
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    return m & ~interior


def mad(y, p, spacing=None) -> float:
    """Symmetric mean of nearest-boundary Euclidean distances, in mm.

    Each direction averages, over one mask's boundary voxels, the distance
    to the other mask's nearest boundary voxel; the two directional means
    are averaged.  Distances are Euclidean in physical coordinates
    (anisotropic spacing scales each axis).
    """
    ym, pm = _as_mask(y), _as_mask(p)
    if ym.shape != pm.shape:
        raise ValueError(f"shape mismatch: {ym.shape} vs {pm.shape}")
    spacing = _spacing_of(y, p, spacing)
    by, bp = boundary(ym), boundary(pm)
    if not by.any() or not bp.any():
        raise ValueError("MAD undefined: a mask has an empty boundary")
    d_to_y = ndimage.distance_transform_edt(~by, sampling=spacing)
    d_to_p = ndimage.distance_transform_edt(~bp, sampling=spacing)
    return 0.5 * (float(d_to_y[bp].mean()) + float(d_to_p[by].mean()))


def volume_diffs(y, p, spacing=None, with_relative: bool = True):
    """Signed volume differences ``(dva_cm3, dvr)``.

    ``dva_cm3 = V_Y - V_P`` in cm^3; ``dvr = dva / V_Y`` as a fraction of
    the reference volume (None when ``with_relative`` is off).  Reporting
    layers typically aggregate absolute values.
    """
    ym, pm = _as_mask(y), _as_mask(p)
    if ym.shape != pm.shape:
        raise ValueError(f"shape mismatch: {ym.shape} vs {pm.shape}")
    spacing = _spacing_of(y, p, spacing)
    vox_cm3 = voxel_volume(spacing) / 1000.0
    v_y = int(ym.sum()) * vox_cm3
    v_p = int(pm.sum()) * vox_cm3
    dva = v_y - v_p
    if not with_relative:
        return dva, None
    if v_y == 0:
        raise ValueError("relative volume difference undefined: reference is empty")
    return dva, dva / v_y


@dataclass
class MetricRecord:
    """Per-case metric values (dvr is a signed fraction of V_Y)."""

    case_id: str
    tag: str
    dice: float
    mad_mm: float
    dva_cm3: float
    dvr: float


def evaluate_case(reference: LabelMap, prediction: LabelMap,
                  case_id: str = "", tag: str = "normal") -> MetricRecord:
    """All four metrics for one (reference, prediction) pair."""
    dva, dvr = volume_diffs(reference, prediction)
    return MetricRecord(
        case_id=case_id,
        tag=tag,
        dice=dice(reference, prediction),
        mad_mm=mad(reference, prediction),
        dva_cm3=dva,
        dvr=dvr,
    )


CSV_FIELDS = ("case_id", "tag", "dice", "mad_mm", "dva_cm3", "dvr")


def write_records(path, records) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([r.case_id, r.tag, repr(r.dice), repr(r.mad_mm),
                        repr(r.dva_cm3), repr(r.dvr)])


def read_records(path) -> list[MetricRecord]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(MetricRecord(
                case_id=row["case_id"], tag=row["tag"], dice=float(row["dice"]),
                mad_mm=float(row["mad_mm"]), dva_cm3=float(row["dva_cm3"]),
                dvr=float(row["dvr"]),
            ))
    return out


def _mean_std(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return float("nan"), float("nan")
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return float(values.mean()), std


def aggregate(records, absolute_volumes: bool = True) -> list[dict]:
    """Mean and std of each metric per class tag plus an "all" row.

    ``absolute_volumes`` aggregates |dVa| and |dVr| (the usual reporting
    convention); disable it to aggregate the signed values.
    """
    groups = [("normal", [r for r in records if r.tag == "normal"]),
              ("dilated", [r for r in records if r.tag == "dilated"]),
              ("all", list(records))]
    rows = []
    for name, recs in groups:
        if not recs:
            continue
        dva = [abs(r.dva_cm3) if absolute_volumes else r.dva_cm3 for r in recs]
        dvr = [abs(r.dvr) if absolute_volumes else r.dvr for r in recs]
        row = {"group": name, "n": len(recs)}
        for key, vals in (
            ("dice", [r.dice for r in recs]),
            ("mad_mm", [r.mad_mm for r in recs]),
            ("dva_cm3", dva),
            ("dvr_pct", [100.0 * v for v in dvr]),
        ):
            mean, std = _mean_std(vals)
            row[f"{key}_mean"] = mean
            row[f"{key}_std"] = std
        rows.append(row)
    return rows


def write_aggregate(path, rows) -> None:
    if not rows:
        raise ValueError("no aggregate rows to write")
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for row in rows:
            w.writerow(row)


def format_aggregate(rows) -> str:
    """Human-readable mean +/- std table (one line per class group)."""
    buf = io.StringIO()
    for row in rows:
        buf.write(
            f"{row['group']:>8} (n={row['n']}): "
            f"dice {row['dice_mean']:.3f} +/- {row['dice_std']:.3f}  "
            f"mad {row['mad_mm_mean']:.2f} +/- {row['mad_mm_std']:.2f} mm  "
            f"|dVa| {row['dva_cm3_mean']:.2f} +/- {row['dva_cm3_std']:.2f} cm3  "
            f"|dVr| {row['dvr_pct_mean']:.1f} +/- {row['dvr_pct_std']:.1f} %\n"
        )
    return buf.getvalue()
