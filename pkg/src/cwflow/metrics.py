"""Reconstruction quality: PSNR, masked MAPE and per-neuron temporal correlation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

PSNR_CAP = 99.0
_EPS = 1e-6


def psnr(gt, recon) -> float:
    """10 log10(max(gt)^2 / MSE), capped at ``PSNR_CAP`` (returned for identical inputs)."""
    gt = np.asarray(gt, np.float64)
    recon = np.asarray(recon, np.float64)
    if gt.shape != recon.shape:
        raise ValueError(f"shape mismatch {gt.shape} vs {recon.shape}")
    mse = np.mean((gt - recon) ** 2)
    peak = gt.max()
    if mse == 0:
        return PSNR_CAP
    if peak <= 0:
        return -PSNR_CAP
    return float(min(10.0 * math.log10(peak**2 / mse), PSNR_CAP))


def mape_masked(gt, recon, threshold: float = _EPS, eps: float = _EPS, return_flag: bool = False):
    """Mean |gt - recon| / max(|gt|, eps) over the union of the two nonzero supports.

    An empty mask gives 0 with ``empty_mask`` flagged (when ``return_flag``).
    """
    gt = np.asarray(gt, np.float64)
    recon = np.asarray(recon, np.float64)
    if gt.shape != recon.shape:
        raise ValueError(f"shape mismatch {gt.shape} vs {recon.shape}")
    mask = (np.abs(gt) > threshold) | (np.abs(recon) > threshold)
    if not mask.any():
        return (0.0, True) if return_flag else 0.0
    err = np.abs(gt[mask] - recon[mask]) / np.maximum(np.abs(gt[mask]), eps)
    value = float(err.mean())
    return (value, False) if return_flag else value


@dataclass
class NeuronSet:
    positions: np.ndarray  # [K, 3] (z, y, x), most active first
    variance: np.ndarray  # [K]
    truncated: bool = False  # fewer maxima than requested

    def __len__(self):
        return len(self.positions)


def extract_neurons(volumes, k: int, sigma: float = 1.2) -> NeuronSet:
    """Local maxima of the per-voxel temporal variance, strongest ``k`` first.

    Substitute for a cell-segmentation pipeline: suppression radius is
    ``2 * sigma`` voxels (the expected neuron size).
    """
    vols = np.asarray(volumes, np.float64)
    if vols.ndim != 4:
        raise ValueError(f"expected [T, D, H, W], got shape {vols.shape}")
    var = vols.var(axis=0)
    if not np.any(var > 0):
        return NeuronSet(np.zeros((0, 3), np.int64), np.zeros(0), truncated=k > 0)
    radius = max(1, int(round(2 * sigma)))
    peak = ndimage.maximum_filter(var, size=2 * radius + 1, mode="constant", cval=-np.inf)
    cand = np.argwhere((var == peak) & (var > 0))
    order = np.argsort(-var[tuple(cand.T)], kind="stable")
    kept = []
    for p in cand[order]:
        if all(np.max(np.abs(p - q)) > radius for q in kept):
            kept.append(p)
        if len(kept) == k:
            break
    pos = np.array(kept, dtype=np.int64).reshape(-1, 3)
    return NeuronSet(pos, var[tuple(pos.T)] if len(pos) else np.zeros(0), truncated=len(pos) < k)


def neuron_traces(volumes, positions, radius: int = 1) -> np.ndarray:
    """Mean intensity in the radius-``radius`` cube around each position, per frame: [K, T]."""
    vols = np.asarray(volumes, np.float64)
    shape = vols.shape[1:]
    out = np.zeros((len(positions), len(vols)))
    for n, p in enumerate(np.asarray(positions, int)):
        sl = tuple(slice(max(c - radius, 0), min(c + radius + 1, s)) for c, s in zip(p, shape))
        out[n] = vols[(slice(None), *sl)].reshape(len(vols), -1).mean(1)
    return out


def pearson(a, b) -> float:
    a = np.asarray(a, np.float64) - np.mean(a)
    b = np.asarray(b, np.float64) - np.mean(b)
    den = math.sqrt(float((a * a).sum() * (b * b).sum()))
    return float(np.clip((a * b).sum() / den, -1.0, 1.0)) if den > 0 else 0.0


@dataclass
class PCCResult:
    per_neuron: np.ndarray
    mean: float
    flags: list = field(default_factory=list)  # indices of zero-variance traces


def pcc_traces(gt_volumes, recon_volumes, neurons) -> PCCResult:
    positions = neurons.positions if isinstance(neurons, NeuronSet) else np.asarray(neurons)
    gt_tr = neuron_traces(gt_volumes, positions)
    rc_tr = neuron_traces(recon_volumes, positions)
    vals, flags = [], []
    for n, (a, b) in enumerate(zip(gt_tr, rc_tr)):
        if np.std(a) == 0 or np.std(b) == 0:
            flags.append(n)
            vals.append(0.0)
        else:
            vals.append(pearson(a, b))
    vals = np.array(vals)
    return PCCResult(vals, float(vals.mean()) if len(vals) else 0.0, flags)


def evaluate(gt_volumes, recon_volumes, k: int = 50, sigma: float = 1.2) -> dict:
    """Per-frame PSNR/MAPE, their means, and PCC over the top-``k`` neurons of the ground truth."""
    gt = np.asarray(gt_volumes)
    rc = np.asarray(recon_volumes)
    if gt.shape != rc.shape:
        raise ValueError(f"frame/shape mismatch: {gt.shape} vs {rc.shape}")
    ps = [psnr(a, b) for a, b in zip(gt, rc)]
    mp = [mape_masked(a, b, return_flag=True) for a, b in zip(gt, rc)]
    flags = []
    if any(f for _, f in mp):
        flags.append("empty_mape_mask")
    neurons = extract_neurons(gt, k, sigma)
    if neurons.truncated:
        flags.append(f"neurons_truncated:{len(neurons)}")
    pcc = pcc_traces(gt, rc, neurons)
    if pcc.flags:
        flags.append(f"zero_variance_traces:{len(pcc.flags)}")
    return {
        "psnr": float(np.mean(ps)),
        "mape": float(np.mean([m for m, _ in mp])),
        "pcc_mean": pcc.mean,
        "pcc_per_neuron": pcc.per_neuron.tolist(),
        "psnr_per_frame": ps,
        "mape_per_frame": [m for m, _ in mp],
        "flags": flags,
    }
