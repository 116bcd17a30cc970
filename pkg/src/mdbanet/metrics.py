"""Dice and Hausdorff evaluation, scar size histograms and summary reports."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .volume_io import SCAR, LabelMap

SCAR_BIN_EDGES = (0, 50, 100, 150, 200, 250, 300, 350, 400, 450, 500, math.inf)
METRICS = ("ds_la", "hd_la", "ds_scar", "hd_scar")

# published scar statistics of the 60 labeled LAScarQS 2022 task-1 training cases;
# volume is rounded to whole mm3 before comparison
LASCARQS2022_TRAIN_REFERENCE = {"total_count": 2470, "total_volume_mm3": 204191, "count_0_50": 1881}


def dice_binary(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def _directed(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    # distance from each src voxel centre to the nearest dst voxel centre, in mm
    dist = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return dist[src]


def hausdorff_mm(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0), percentile: Optional[float] = None) -> Optional[float]:
    """Symmetric Hausdorff distance between two voxel sets, in mm.

    Returns None (with a warning) when either set is empty. With
    ``percentile`` (e.g. 95) the directed distances are summarised by that
    percentile instead of the maximum.
    """
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        warnings.warn("Hausdorff distance undefined for an empty mask", RuntimeWarning, stacklevel=2)
        return None
    d_ab, d_ba = _directed(a, b, spacing), _directed(b, a, spacing)
    if percentile is None:
        return float(max(d_ab.max(), d_ba.max()))
    return float(max(np.percentile(d_ab, percentile), np.percentile(d_ba, percentile)))


# ---------------------------------------------------------------- scar statistics

def connectivity_structure(connectivity: int) -> np.ndarray:
    rank = {6: 1, 18: 2, 26: 3}.get(connectivity)
    if rank is None:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, rank)


def component_sizes(mask: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Voxel count of every connected component of ``mask``."""
    labelled, n = ndimage.label(np.asarray(mask, dtype=bool), structure=connectivity_structure(connectivity))
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    return np.bincount(labelled.ravel())[1:]


@dataclass
class ScarSizeHistogram:
    counts: np.ndarray = field(default_factory=lambda: np.zeros(len(SCAR_BIN_EDGES) - 1, dtype=np.int64))
    volumes: np.ndarray = field(default_factory=lambda: np.zeros(len(SCAR_BIN_EDGES) - 1))
    edges: tuple = SCAR_BIN_EDGES

    @classmethod
    def from_volumes(cls, component_volumes_mm3) -> "ScarSizeHistogram":
        v = np.asarray(component_volumes_mm3, dtype=float)
        idx = np.searchsorted(np.asarray(SCAR_BIN_EDGES), v, side="right") - 1
        n_bins = len(SCAR_BIN_EDGES) - 1
        counts = np.bincount(idx, minlength=n_bins).astype(np.int64)
        volumes = np.bincount(idx, weights=v, minlength=n_bins)
        return cls(counts, volumes)

    @classmethod
    def from_voxel_counts(cls, sizes, voxel_volume_mm3: float) -> "ScarSizeHistogram":
        """Bin components given in voxels; per-bin volume is (summed voxels) x voxel volume,
        which makes the result independent of component order."""
        sizes = np.asarray(sizes, dtype=np.int64)
        idx = np.searchsorted(np.asarray(SCAR_BIN_EDGES), sizes * float(voxel_volume_mm3), side="right") - 1
        n_bins = len(SCAR_BIN_EDGES) - 1
        counts = np.bincount(idx, minlength=n_bins).astype(np.int64)
        voxels = np.bincount(idx, weights=sizes, minlength=n_bins)
        return cls(counts, voxels * float(voxel_volume_mm3))

    def __add__(self, other: "ScarSizeHistogram") -> "ScarSizeHistogram":
        return ScarSizeHistogram(self.counts + other.counts, self.volumes + other.volumes)

    @property
    def total_count(self) -> int:
        return int(self.counts.sum())

    @property
    def total_volume(self) -> float:
        return float(self.volumes.sum())

    @property
    def count_percent(self) -> np.ndarray:
        t = self.total_count
        return self.counts * 100.0 / t if t else np.zeros(len(self.counts))

    @property
    def volume_percent(self) -> np.ndarray:
        t = self.total_volume
        return self.volumes * 100.0 / t if t else np.zeros(len(self.volumes))

    def bin_labels(self) -> list[str]:
        e = self.edges
        labels = [f"{e[i]:g}-{e[i + 1]:g}" for i in range(len(e) - 2)]
        return labels + [f">{e[-2]:g}"]

    def table_rows(self) -> list[list[str]]:
        """Rows of the size table: range, count, count %, volume, volume %."""
        return [
            ["Range (mm3)", *self.bin_labels(), "Total"],
            ["Number of scar", *[str(int(c)) for c in self.counts], str(self.total_count)],
            ["Percentage (%)", *[f"{p:.2f}" for p in self.count_percent], f"{self.count_percent.sum():.2f}"],
            ["Scar volume (mm3)", *[f"{v:.2f}" for v in self.volumes], f"{self.total_volume:.2f}"],
            ["Percentage (%)", *[f"{p:.2f}" for p in self.volume_percent], f"{self.volume_percent.sum():.2f}"],
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.table_rows())
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "bins": self.bin_labels(),
            "counts": [int(c) for c in self.counts],
            "volumes_mm3": [float(v) for v in self.volumes],
            "count_percent": [float(p) for p in self.count_percent],
            "volume_percent": [float(p) for p in self.volume_percent],
            "total_count": self.total_count,
            "total_volume_mm3": self.total_volume,
        }


def scar_component_volumes(labels: LabelMap, connectivity: int = 26) -> np.ndarray:
    sizes = component_sizes(labels.labels == SCAR, connectivity)
    return sizes * float(np.prod(labels.spacing))


def scar_histogram(labels: LabelMap, connectivity: int = 26) -> ScarSizeHistogram:
    sizes = component_sizes(labels.labels == SCAR, connectivity)
    return ScarSizeHistogram.from_voxel_counts(sizes, float(np.prod(labels.spacing)))


# ---------------------------------------------------------------- aggregation

@dataclass
class CaseRecord:
    case_id: str
    ds_scar: float
    hd_scar: Optional[float]
    ds_la: Optional[float] = None
    hd_la: Optional[float] = None


@dataclass
class MetricSummary:
    mean: Optional[float]
    std: Optional[float]
    n: int
    excluded: int

    def format(self, digits: int = 3) -> str:
        if self.mean is None:
            return "-"
        return f"{self.mean:.{digits}f}({self.std:.{digits}f})"


@dataclass
class EvalResult:
    records: list[CaseRecord]
    aggregates: dict[str, MetricSummary]
    method: str = ""

    def summary_row(self) -> dict[str, str]:
        a = self.aggregates
        return {
            "method": self.method,
            "la_ds": a["ds_la"].format(3),
            "la_hd_mm": a["hd_la"].format(2),
            "scar_ds": a["ds_scar"].format(3),
            "scar_hd_mm": a["hd_scar"].format(2),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case_id", *METRICS])
        fmt = lambda x: "" if x is None else f"{x:.6f}"
        for r in self.records:
            w.writerow([r.case_id, *[fmt(getattr(r, m)) for m in METRICS]])
        w.writerow(["mean", *[fmt(self.aggregates[m].mean) for m in METRICS]])
        w.writerow(["std", *[fmt(self.aggregates[m].std) for m in METRICS]])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "n_cases": len(self.records),
            "aggregates": {m: vars(s) for m, s in self.aggregates.items()},
            "summary": self.summary_row(),
            "cases": [vars(r) for r in self.records],
        }

    def write(self, out_dir, stem: str = "evaluation") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.csv").write_text(self.to_csv())
        (out_dir / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def summarize(values: Sequence[Optional[float]]) -> MetricSummary:
    defined = [v for v in values if v is not None]
    excluded = len(values) - len(defined)
    if not defined:
        return MetricSummary(None, None, 0, excluded)
    arr = np.asarray(defined, dtype=float)
    return MetricSummary(float(arr.mean()), float(arr.std()), len(defined), excluded)


def aggregate_eval(records: Sequence[CaseRecord], method: str = "") -> EvalResult:
    """Mean and population std per metric; undefined values are excluded and counted."""
    if not records:
        raise ValueError("aggregate_eval needs at least one record")
    agg = {}
    for m in METRICS:
        values = [getattr(r, m) for r in records]
        if m.endswith("_la") and all(v is None for v in values):
            agg[m] = MetricSummary(None, None, 0, 0)
            continue
        agg[m] = summarize(values)
        if m.startswith("hd") and agg[m].excluded:
            warnings.warn(f"{agg[m].excluded} undefined {m} value(s) excluded from aggregate", RuntimeWarning, stacklevel=2)
    return EvalResult(list(records), agg, method)


def evaluate_case(case_id: str, pred: LabelMap, ref: LabelMap, with_la: bool = True, la_includes_scar: bool = True,
                  hd_percentile: Optional[float] = None) -> CaseRecord:
    if pred.shape != ref.shape:
        raise ValueError(f"{case_id}: prediction shape {pred.shape} != reference shape {ref.shape}")
    sp = ref.spacing
    ps, rs = pred.scar_mask(), ref.scar_mask()
    rec = CaseRecord(case_id, dice_binary(ps, rs), _hd_quiet(ps, rs, sp, hd_percentile))
    if with_la:
        pl, rl = pred.la_mask(la_includes_scar), ref.la_mask(la_includes_scar)
        rec.ds_la = dice_binary(pl, rl)
        rec.hd_la = _hd_quiet(pl, rl, sp, hd_percentile)
    return rec


def _hd_quiet(a, b, spacing, percentile):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return hausdorff_mm(a, b, spacing, percentile)


def summary_csv(results: Sequence[EvalResult]) -> str:
    """One row per method, values formatted as mean(std)."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["method", "la_ds", "la_hd_mm", "scar_ds", "scar_hd_mm"], lineterminator="\n")
    w.writeheader()
    for r in results:
        w.writerow(r.summary_row())
    return buf.getvalue()
