"""PCK / EPE / NME for predicted versus ground-truth landmarks.

Normalizers come from the ground-truth bounding box: PCK uses
``max(w, h)``, NME uses ``sqrt(w * h)``. A point is correct when its error
is ``<= tau * max(w, h)``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .model_io import PointSet

NORMALIZER_NOTE = "pck: dist <= tau*max(bbox_w, bbox_h); nme: mean dist / sqrt(bbox_w*bbox_h); bbox of ground truth"


@dataclass(frozen=True)
class ScanMetrics:
    scan_id: str
    pck: float
    epe: float
    nme: float
    n_points: int


@dataclass(frozen=True)
class KeypointEvalReport:
    pck: float
    epe: float
    nme: float
    tau: float
    n_scans: int
    n_points: int
    per_scan: tuple[ScanMetrics, ...] = ()

    def summary(self) -> str:
        return f"PCK {100 * self.pck:.1f}% | EPE {self.epe:.2f} | NME {self.nme:.3f}"


def evaluate(pred: PointSet, gt: PointSet, tau: float = 0.1) -> ScanMetrics:
    if pred.n != gt.n:
        raise ValueError(f"{gt.scan_id}: {pred.n} predicted points vs {gt.n} ground-truth points")
    box_w, box_h = np.ptp(gt.points, axis=0)
    if box_w <= 0 or box_h <= 0:
        raise ValueError(f"{gt.scan_id}: degenerate ground-truth bounding box {box_w} x {box_h}")
    dist = np.linalg.norm(pred.points - gt.points, axis=1)
    s_pck = max(box_w, box_h)
    s_nme = np.sqrt(box_w * box_h)
    epe = float(dist.mean())
    return ScanMetrics(gt.scan_id, float(np.mean(dist <= tau * s_pck)), epe, epe / s_nme, gt.n)


def aggregate(metrics: Sequence[ScanMetrics], tau: float = 0.1) -> KeypointEvalReport:
    """Unweighted mean over scans."""
    if not metrics:
        raise ValueError("no per-scan metrics to aggregate")
    return KeypointEvalReport(
        pck=float(np.mean([m.pck for m in metrics])),
        epe=float(np.mean([m.epe for m in metrics])),
        nme=float(np.mean([m.nme for m in metrics])),
        tau=tau,
        n_scans=len(metrics),
        n_points=metrics[0].n_points,
        per_scan=tuple(metrics),
    )


def _paired(pred: Mapping[str, PointSet], gt: Mapping[str, PointSet]) -> list[str]:
    missing = sorted(set(gt) ^ set(pred))
    if missing:
        raise ValueError(f"scan ids not present in both inputs: {', '.join(missing)}")
    return sorted(gt)


def evaluate_sets(pred: Mapping[str, PointSet], gt: Mapping[str, PointSet], tau: float = 0.1) -> KeypointEvalReport:
    return aggregate([evaluate(pred[s], gt[s], tau) for s in _paired(pred, gt)], tau)


@dataclass(frozen=True)
class Comparison:
    a: KeypointEvalReport
    b: KeypointEvalReport
    # per-scan (scan_id, d_pck, d_epe, d_nme), each delta = b - a
    deltas: tuple[tuple[str, float, float, float], ...]

    @property
    def aggregate_delta(self) -> tuple[float, float, float]:
        return self.b.pck - self.a.pck, self.b.epe - self.a.epe, self.b.nme - self.a.nme


def compare(pred_a: Mapping[str, PointSet], pred_b: Mapping[str, PointSet], gt: Mapping[str, PointSet],
            tau: float = 0.1) -> Comparison:
    _paired(pred_a, gt)
    _paired(pred_b, gt)
    ra = evaluate_sets(pred_a, gt, tau)
    rb = evaluate_sets(pred_b, gt, tau)
    deltas = tuple(
        (ma.scan_id, mb.pck - ma.pck, mb.epe - ma.epe, mb.nme - ma.nme)
        for ma, mb in zip(ra.per_scan, rb.per_scan)
    )
    return Comparison(ra, rb, deltas)


def write_report(report: KeypointEvalReport, csv_path, json_path) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scan_id", "pck", "epe", "nme"])
        for m in report.per_scan:
            w.writerow([m.scan_id, repr(m.pck), repr(m.epe), repr(m.nme)])
    block = {k: v for k, v in asdict(report).items() if k != "per_scan"}
    block["normalizers"] = NORMALIZER_NOTE
    block["summary"] = report.summary()
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(block, fh, indent=2, sort_keys=True)
        fh.write("\n")
