"""Invertible conditional layers and flow stacks with exact log-determinants.

All layers act on batched tensors ``x: [B, C, H, W]`` with condition features
``c: [B, F, H, W]``. ``forward`` returns a :class:`FlowOutput` whose ``log_det``
is per-sample and accumulated in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .numerics import NumericalError

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_CLAMP = 1.9


@dataclass
class FlowOutput:
    z: torch.Tensor
    log_det: torch.Tensor  # [B], float64


def condition_net(in_channels: int, out_channels: int, hidden: int = 14) -> nn.Sequential:
    """conv3x3 -> ReLU -> conv3x3, final layer zero-initialised (identity flow at start)."""
    net = nn.Sequential(
        nn.Conv2d(in_channels, hidden, 3, padding=1),
        nn.ReLU(),
        nn.Conv2d(hidden, out_channels, 3, padding=1),
    )
    nn.init.zeros_(net[-1].weight)
    nn.init.zeros_(net[-1].bias)
    return net


def soft_clamp(s_raw: torch.Tensor, clamp: float) -> torch.Tensor:
    return clamp * (2.0 / math.pi) * torch.atan(s_raw)


def _check(t: torch.Tensor, layer: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericalError(f"non-finite output in layer {layer}")
    return t


def _sum_per_sample(s: torch.Tensor) -> torch.Tensor:
    return s.double().flatten(1).sum(1)


class ConditionalAffine(nn.Module):
    """Scale and shift every element with values computed from the condition only."""

    def __init__(self, channels: int, cond_channels: int, hidden: int = 14, clamp: float = DEFAULT_CLAMP):
        super().__init__()
        self.channels = channels
        self.clamp = clamp
        self.net = condition_net(cond_channels, 2 * channels, hidden)

    def scale_shift(self, c: torch.Tensor):
        s_raw, t = self.net(c).chunk(2, dim=1)
        return soft_clamp(s_raw, self.clamp), t

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> FlowOutput:
        s, t = self.scale_shift(c)
        y = x * torch.exp(s) + t
        return FlowOutput(_check(y, self._label()), _sum_per_sample(s))

    def inverse(self, y: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        s, t = self.scale_shift(c)
        return _check((y - t) * torch.exp(-s), self._label())

    def _label(self):
        return f"ConditionalAffine(channels={self.channels})"


class ConditionalCoupling(nn.Module):
    """RealNVP-style coupling: the first half of the channels (plus condition) drives the second."""

    def __init__(self, channels: int, cond_channels: int, hidden: int = 14, clamp: float = DEFAULT_CLAMP):
        super().__init__()
        if channels % 2:
            raise ValueError(f"coupling needs an even channel count, got {channels}")
        self.channels = channels
        self.half = channels // 2
        self.clamp = clamp
        self.net = condition_net(self.half + cond_channels, 2 * self.half, hidden)

    def scale_shift(self, xa, c):
        s_raw, t = self.net(torch.cat([xa, c], dim=1)).chunk(2, dim=1)
        return soft_clamp(s_raw, self.clamp), t

    def forward(self, x, c) -> FlowOutput:
        xa, xb = x[:, : self.half], x[:, self.half :]
        s, t = self.scale_shift(xa, c)
        y = torch.cat([xa, xb * torch.exp(s) + t], dim=1)
        return FlowOutput(_check(y, f"ConditionalCoupling(channels={self.channels})"), _sum_per_sample(s))

    def inverse(self, y, c):
        ya, yb = y[:, : self.half], y[:, self.half :]
        s, t = self.scale_shift(ya, c)
        x = torch.cat([ya, (yb - t) * torch.exp(-s)], dim=1)
        return _check(x, f"ConditionalCoupling(channels={self.channels})")


class Permutation(nn.Module):
    """Fixed permutation of one axis of ``[C, H, W]`` (axis 1, 2 or 3 of the batch tensor)."""

    def __init__(self, size: int, axis: int, perm: Sequence[int] | None = None, rng=None):
        super().__init__()
        if axis not in (1, 2, 3):
            raise ValueError(f"axis must be 1 (channels), 2 (rows) or 3 (cols), got {axis}")
        self.axis = axis
        if perm is None:
            rng = rng if rng is not None else np.random.default_rng()
            perm = rng.permutation(size)
        perm = torch.as_tensor(np.asarray(perm), dtype=torch.long)
        if sorted(perm.tolist()) != list(range(size)):
            raise ValueError("perm is not a bijection of range(size)")
        self.register_buffer("perm", perm)
        self.register_buffer("inv_perm", torch.argsort(perm))

    @property
    def spatial(self) -> bool:
        return self.axis != 1

    def apply(self, x):
        return x.index_select(self.axis, self.perm)

    def forward(self, x, c=None) -> FlowOutput:
        return FlowOutput(self.apply(x), torch.zeros(x.shape[0], dtype=torch.float64))

    def inverse(self, y, c=None):
        return y.index_select(self.axis, self.inv_perm)


class FlowStack(nn.Module):
    """Ordered composition of permutation and conditional layers.

    Spatial permutations are applied to the condition features as well, so that
    every element keeps seeing the condition computed at its own location.
    """

    def __init__(self, layers: Iterable[nn.Module] = ()):
        super().__init__()
        self.layers = nn.ModuleList(layers)

    @classmethod
    def build(
        cls,
        shape: Sequence[int],
        cond_channels: int,
        blocks: int = 6,
        block_type: str = "affine",
        hidden: int = 14,
        clamp: float = DEFAULT_CLAMP,
        seed: int = 0,
    ) -> "FlowStack":
        """``blocks`` x [random-axis permutation, conditional block] for data of ``shape`` = (C, H, W)."""
        kinds = {"affine": ConditionalAffine, "coupling": ConditionalCoupling}
        if block_type not in kinds:
            raise ValueError(f"block_type must be one of {sorted(kinds)}, got {block_type!r}")
        rng = np.random.default_rng(seed)
        layers = []
        for _ in range(blocks):
            axis = int(rng.integers(1, 4))
            layers.append(Permutation(shape[axis - 1], axis, rng=rng))
            layers.append(kinds[block_type](shape[0], cond_channels, hidden, clamp))
        return cls(layers)

    def _conditions(self, c):
        conds = []
        for layer in self.layers:
            conds.append(c)
            if isinstance(layer, Permutation) and layer.spatial and c is not None:
                c = layer.apply(c)
        return conds

    def forward(self, x, c=None) -> FlowOutput:
        log_det = torch.zeros(x.shape[0], dtype=torch.float64)
        for layer, ck in zip(self.layers, self._conditions(c)):
            out = layer(x, ck)
            x, log_det = out.z, log_det + out.log_det
        return FlowOutput(x, log_det)

    def inverse(self, z, c=None):
        conds = self._conditions(c)
        for layer, ck in zip(reversed(self.layers), reversed(conds)):
            z = layer.inverse(z, ck)
        return z


def param_sq_norm(params: Iterable[torch.Tensor]) -> torch.Tensor:
    total = torch.zeros((), dtype=torch.float64)
    for p in params:
        total = total + p.double().pow(2).sum()
    return total


def nll(out: FlowOutput, params: Iterable[torch.Tensor] = (), rho: float = 0.0, reduce: bool = True):
    """Per-dimension negative log-likelihood under a standard normal base.

    (sum z^2/2 - log_det + rho*||params||^2 + N/2 ln 2pi) / N per sample; the batch
    mean when ``reduce``.
    """
    z = out.z.double().flatten(1)
    n = z.shape[1]
    per_sample = 0.5 * z.pow(2).sum(1) - out.log_det + 0.5 * n * LOG_2PI
    if rho:
        per_sample = per_sample + rho * param_sq_norm(params)
    per_sample = per_sample / n
    return per_sample.mean() if reduce else per_sample
