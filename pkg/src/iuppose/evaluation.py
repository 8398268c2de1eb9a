"""Run a model (or an injected predictor) over a dataset and build the metric report."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import log_so3
from .metrics import PairError, build_report, rotation_error_deg, translation_error_deg
from .model import IUPPose
from .scenes import PairDataset
from .training import batch_tensors


@dataclass
class Predictions:
    rotation: np.ndarray  # (N, 3, 3)
    t_dir: np.ndarray  # (N, 3)
    log_var: np.ndarray | None = None  # (N, 3) per-axis log variance of the fused rotation


@torch.no_grad()
def predict(model: IUPPose, ds: PairDataset, batch_size: int = 32) -> Predictions:
    model.eval()
    dtype = next(model.parameters()).dtype
    rs, ts, lvs = [], [], []
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        b = batch_tensors(ds, idx, dtype)
        est = model(b["i0"], b["i1"], b["k0"], b["k1"])
        rs.append(est.rotation.double().numpy())
        ts.append(est.t_dir.double().numpy())
        lvs.append(est.covariance.diagonal(dim1=-2, dim2=-1).clamp_min(1e-30).log().double().numpy())
    return Predictions(np.concatenate(rs), np.concatenate(ts), np.concatenate(lvs))


def ground_truth_predictions(ds: PairDataset) -> Predictions:
    """Oracle predictor: returns the stored ground truth."""
    return Predictions(ds.gt_r.copy(), ds.t_dir.copy(), None)


def identity_predictions(ds: PairDataset) -> Predictions:
    n = len(ds)
    return Predictions(np.repeat(np.eye(3)[None], n, 0), np.tile([1.0, 0.0, 0.0], (n, 1)), None)


def pair_errors(pred: Predictions, ds: PairDataset) -> list[PairError]:
    out = []
    for i in range(len(ds)):
        gt_t = ds.t_dir[i] * ds.t_mag[i]
        out.append(
            PairError(
                rotation_error_deg(pred.rotation[i], ds.gt_r[i]),
                translation_error_deg(pred.t_dir[i], gt_t),
                float(ds.overlap[i]),
            )
        )
    return out


def uncertainty_correlation(pred: Predictions, ds: PairDataset) -> list[float]:
    """Per-axis Pearson correlation of predicted sigma with |axis-angle error|."""
    if pred.log_var is None:
        return [float("nan")] * 3
    sigma = np.exp(0.5 * pred.log_var)
    err = np.abs(np.stack([log_so3(pred.rotation[i].T @ ds.gt_r[i]) for i in range(len(ds))]))
    out = []
    for a in range(3):
        if sigma[:, a].std() == 0 or err[:, a].std() == 0:
            out.append(float("nan"))
        else:
            out.append(float(np.corrcoef(sigma[:, a], err[:, a])[0, 1]))
    return out


def evaluate(pred: Predictions, ds: PairDataset, fps: float | None = None) -> dict:
    errors = pair_errors(pred, ds)
    extra = {"sigma_error_corr": uncertainty_correlation(pred, ds)}
    return build_report(errors, fps, extra)


@torch.no_grad()
def benchmark(model: IUPPose, ds: PairDataset, pairs: int, warmup: int = 10) -> dict:
    """Mean single-pair forward latency and FPS; the first ``warmup`` passes are not timed."""
    model.eval()
    dtype = next(model.parameters()).dtype
    n = len(ds)
    times = []
    for i in range(warmup + pairs):
        b = batch_tensors(ds, np.array([i % n]), dtype)
        t0 = time.perf_counter()
        model(b["i0"], b["i1"], b["k0"], b["k1"])
        if i >= warmup:
            times.append(time.perf_counter() - t0)
    mean = float(np.mean(times))
    return {"pairs": pairs, "mean_latency_ms": 1000 * mean, "fps": 1.0 / mean}
