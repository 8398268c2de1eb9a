"""Pose error metrics, AUC@threshold and overlap-bucketed reports."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import geodesic_angle

THRESHOLDS = (5, 10, 20)
BUCKETS = ((0.0, 0.1), (0.1, 0.4), (0.4, 0.7), (0.7, 1.0))


@dataclass
class PairError:
    rot_err: float
    trans_err: float
    overlap: float

    @property
    def pose_err(self) -> float:
        return max(self.rot_err, self.trans_err)


def rotation_error_deg(r_pred, r_gt) -> float:
    return float(np.degrees(geodesic_angle(r_pred, r_gt)))


def translation_error_deg(t_pred, t_gt) -> float:
    """Angle between directions; 0 for a zero ground truth, 90 for a zero prediction."""
    t_pred = np.asarray(t_pred, dtype=np.float64)
    t_gt = np.asarray(t_gt, dtype=np.float64)
    ng, npred = np.linalg.norm(t_gt), np.linalg.norm(t_pred)
    if ng == 0:
        return 0.0
    if npred == 0:
        return 90.0
    return float(np.degrees(np.arccos(np.clip(t_pred @ t_gt / (ng * npred), -1.0, 1.0))))


def pose_auc(errors, thresholds=THRESHOLDS) -> dict:
    """Exact area under the recall curve up to each threshold, normalized to [0, 1]."""
    errors = np.sort(np.asarray(errors, dtype=np.float64))
    if errors.size == 0:
        raise ValueError("pose_auc needs at least one error")
    n = errors.size
    out = {}
    for tau in thresholds:
        # recall(t) = k/n on [e_k, e_{k+1}); integrate the step function on [0, tau].
        e = np.minimum(errors, tau)
        edges = np.concatenate([e, [tau]])
        out[tau] = float(np.sum(np.diff(edges) * np.arange(1, n + 1) / n) / tau)
    return out


def bucket_of(overlap: float) -> int | None:
    for i, (lo, hi) in enumerate(BUCKETS):
        last = i == len(BUCKETS) - 1
        if lo <= overlap < hi or (last and overlap == hi):
            return i
    return None


def bucket_report(errors: list[PairError], threshold: float = 10) -> dict:
    """AUC@threshold per overlap bucket ('n/a' when empty) plus overall."""
    report = {}
    for i, (lo, hi) in enumerate(BUCKETS):
        sel = [e.pose_err for e in errors if bucket_of(e.overlap) == i]
        report[f"[{lo:.1f}, {hi:.1f}]"] = pose_auc(sel, (threshold,))[threshold] if sel else "n/a"
    report["Overall"] = pose_auc([e.pose_err for e in errors], (threshold,))[threshold] if errors else "n/a"
    return report


def build_report(errors: list[PairError], fps: float | None = None, extra: dict | None = None) -> dict:
    pose = [e.pose_err for e in errors]
    auc = pose_auc(pose)
    report = {
        "auc": {str(t): auc[t] for t in THRESHOLDS},
        "buckets": bucket_report(errors),
        "fps": fps,
        "count": len(errors),
        "median_rot_err_deg": float(np.median([e.rot_err for e in errors])),
        "median_trans_err_deg": float(np.median([e.trans_err for e in errors])),
    }
    if extra:
        report.update(extra)
    return report


def format_report(report: dict) -> str:
    lines = ["AUC   " + "  ".join(f"@{t}deg={100 * report['auc'][t]:6.2f}" for t in report["auc"])]
    lines.append(f"median rot err   {report['median_rot_err_deg']:8.3f} deg")
    lines.append(f"median trans err {report['median_trans_err_deg']:8.3f} deg")
    lines.append("overlap bucket     AUC@10")
    for k, v in report["buckets"].items():
        lines.append(f"  {k:<14} {'n/a' if v == 'n/a' else f'{100 * v:6.2f}'}")
    if report.get("fps") is not None:
        lines.append(f"fps {report['fps']:.1f}")
    return "\n".join(lines)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["auc", "buckets", "fps", "count", "median_rot_err_deg", "median_trans_err_deg"],
    "properties": {
        "auc": {
            "type": "object",
            "required": ["5", "10", "20"],
            "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1},
        },
        "buckets": {
            "type": "object",
            "required": ["[0.0, 0.1]", "[0.1, 0.4]", "[0.4, 0.7]", "[0.7, 1.0]", "Overall"],
            "additionalProperties": {"oneOf": [{"type": "number"}, {"const": "n/a"}]},
        },
        "fps": {"type": ["number", "null"]},
        "count": {"type": "integer", "minimum": 0},
        "median_rot_err_deg": {"type": "number"},
        "median_trans_err_deg": {"type": "number"},
    },
}


def dump_report(report: dict, path) -> None:
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
