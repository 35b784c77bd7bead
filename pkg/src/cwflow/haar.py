"""Orthonormal 1-D Haar transform along the depth axis of volumes.

Volumes are ``[..., D, H, W]``; only ``D`` is transformed. With the 1/sqrt(2)
normalisation the step is a rotation, so it preserves energy and contributes
nothing to a log-determinant.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import torch

_R2 = math.sqrt(2.0)

#: log|det J| of a Haar step; orthonormal, so exactly zero.
LOG_DET = 0.0


class HaarPair(NamedTuple):
    approx: torch.Tensor
    detail: torch.Tensor


def haar_down_axial(volume: torch.Tensor) -> HaarPair:
    if volume.dim() < 3:
        raise ValueError(f"expected [..., D, H, W], got shape {tuple(volume.shape)}")
    depth = volume.shape[-3]
    if depth % 2:
        raise ValueError(f"depth must be even for a Haar step, got {depth}")
    even, odd = volume[..., 0::2, :, :], volume[..., 1::2, :, :]
    return HaarPair((even + odd) / _R2, (even - odd) / _R2)


def haar_up_axial(approx: torch.Tensor, detail: torch.Tensor | None = None) -> torch.Tensor:
    if detail is None:
        approx, detail = approx
    if approx.shape != detail.shape:
        raise ValueError(f"approx {tuple(approx.shape)} and detail {tuple(detail.shape)} differ")
    even, odd = (approx + detail) / _R2, (approx - detail) / _R2
    out = torch.stack((even, odd), dim=-3)  # [..., D/2, 2, H, W]
    return out.reshape(*approx.shape[:-3], 2 * approx.shape[-3], *approx.shape[-2:])


def haar_approx(volume: torch.Tensor, times: int) -> torch.Tensor:
    """Approximation band after ``times`` successive steps."""
    for _ in range(times):
        volume = haar_down_axial(volume).approx
    return volume
