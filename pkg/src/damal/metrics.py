"""Dice similarity and symmetric average surface distance, per tissue class."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np
from scipy import ndimage

from .distance import surface_mask
from .volume import CLASS_NAMES, TISSUE_CLASSES, LabelVolume

# Reference values of the published model on the iSeg-2017 test set (DSC in %, ASD in mm).
# Documentation only; desk-scale runs are not expected to reproduce them.
PUBLISHED_TEST_SET = {
    "WM": {"dsc": 92.60, "asd": 0.28},
    "GM": {"dsc": 93.49, "asd": 0.25},
    "CSF": {"dsc": 95.68, "asd": 0.11},
}


def _arrays(t, p):
    ta = t.data if isinstance(t, LabelVolume) else np.asarray(t)
    pa = p.data if isinstance(p, LabelVolume) else np.asarray(p)
    if ta.shape != pa.shape:
        raise ValueError(f"dims mismatch: {ta.shape} vs {pa.shape}")
    return ta, pa


def dsc(t, p, c: int) -> float:
    ta, pa = _arrays(t, p)
    tm, pm = ta == c, pa == c
    total = int(tm.sum()) + int(pm.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(tm, pm).sum()) / total


def asd(t, p, c: int, spacing: Optional[Sequence[float]] = None, connectivity: int = 6) -> float:
    """Mean of the two directed mean nearest-surface distances (voxel centres, mm).

    Returns NaN with a warning when class ``c`` is missing from either volume.
    """
    ta, pa = _arrays(t, p)
    if spacing is None:
        spacing = t.spacing_mm if isinstance(t, LabelVolume) else (1.0, 1.0, 1.0)
    tm, pm = ta == c, pa == c
    if not tm.any() or not pm.any():
        warnings.warn(f"ASD undefined for class {c}: empty in one volume", RuntimeWarning)
        return float("nan")
    st = surface_mask(tm, connectivity)
    sp = surface_mask(pm, connectivity)
    dist_to_t = ndimage.distance_transform_edt(~st, sampling=spacing)
    dist_to_p = ndimage.distance_transform_edt(~sp, sampling=spacing)
    return 0.5 * (float(dist_to_t[sp].mean()) + float(dist_to_p[st].mean()))


@dataclass
class MetricsReport:
    subject_id: str
    dsc: Dict[str, float] = field(default_factory=dict)
    asd: Dict[str, float] = field(default_factory=dict)

    @property
    def mean_dsc(self) -> float:
        return float(np.mean(list(self.dsc.values())))

    @property
    def mean_asd(self) -> float:
        return float(np.mean(list(self.asd.values())))

    def rows(self):
        return [(self.subject_id, name, self.dsc[name], self.asd[name]) for name in self.dsc]

    def summary(self) -> dict:
        def clean(x):
            return None if isinstance(x, float) and math.isnan(x) else x
        return {
            "subject": self.subject_id,
            "dsc": {k: clean(v) for k, v in self.dsc.items()},
            "asd_mm": {k: clean(v) for k, v in self.asd.items()},
            "mean_dsc": clean(self.mean_dsc),
            "mean_asd_mm": clean(self.mean_asd),
        }


def evaluate_subject(t: LabelVolume, p: LabelVolume, subject_id: str = "subject",
                     classes: Sequence[int] = TISSUE_CLASSES) -> MetricsReport:
    report = MetricsReport(subject_id)
    for c in classes:
        name = CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c)
        report.dsc[name] = dsc(t, p, c)
        report.asd[name] = asd(t, p, c)
    return report


def write_reports(reports: Sequence[MetricsReport], csv_path, json_path=None) -> None:
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "class", "dsc", "asd_mm"])
        for r in reports:
            for row in r.rows():
                w.writerow(row)
    if json_path is not None:
        summary = {
            "subjects": [r.summary() for r in reports],
            "mean_dsc": float(np.mean([r.mean_dsc for r in reports])),
            "mean_asd_mm": float(np.mean([r.mean_asd for r in reports])),
        }
        for key in ("mean_dsc", "mean_asd_mm"):
            if math.isnan(summary[key]):
                summary[key] = None
        Path(json_path).write_text(json.dumps(summary, indent=2) + "\n")
