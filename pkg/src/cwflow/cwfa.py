"""Multi-scale conditional wavelet flow for image -> volume reconstruction.

Pyramid bookkeeping (``n`` levels, volume depth ``D``)::

    V_0 --haar--> (V_1, D_0) --haar--> (V_2, D_1) ... --> (V_n, D_{n-1})

Level ``i`` owns a flow over the detail band ``D_i`` ([D/2^(i+1), H, W]) and a
condition network that turns the lenslet views plus the Haar-reduced prior into
features. The coarsest approximation ``V_n`` is predicted deterministically by
:class:`LRNet`. With the orthonormal Haar step the per-level log-likelihoods add
up to the full-resolution one.
"""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import archive
from .flow import LOG_2PI, FlowStack, nll
from .haar import haar_approx, haar_down_axial, haar_up_axial
from .numerics import Lion, NumericalError, backward, grad_check
from .optics import LensletLayout
from .validation import check_image, check_volume

log = logging.getLogger(__name__)
_RATIO_EPS = 1e-4
_RATIO_MAX = 4.0


@dataclass
class CWFAConfig:
    levels: int = 3
    blocks_per_level: int = 6
    conv_channels: int = 14
    alpha: float = 0.48
    rho: float = 1e-5
    temperature: float = 0.0
    block_type: str = "affine"
    epochs: int = 100
    epochs_per_level: int | None = None
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float | None = None  # None -> rho
    batch_size: int = 1
    clamp: float = 1.9
    detail_base: str = "prior"  # "prior": flows model the detail relative to the rescaled prior detail
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.block_type not in ("affine", "coupling"):
            raise ValueError(f"block_type must be 'affine' or 'coupling', got {self.block_type!r}")
        if self.detail_base not in ("prior", "none"):
            raise ValueError(f"detail_base must be 'prior' or 'none', got {self.detail_base!r}")

    @property
    def steps(self) -> int:
        """Independently trained stages: one per flow level plus the low-resolution net."""
        return self.levels + 1

    def per_level_epochs(self) -> int:
        if self.epochs_per_level is not None:
            return self.epochs_per_level
        return max(1, self.epochs // self.steps)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown CWFAConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ConditionSet:
    views: torch.Tensor  # [B, L, h, w]
    prior: torch.Tensor  # [D, H, W]

    def __len__(self):
        return self.views.shape[0]

    def __getitem__(self, idx):
        return ConditionSet(self.views[idx], self.prior)


def crop_views(image, layout: LensletLayout) -> np.ndarray:
    """One ``crop_size`` window per lenslet centre, zero-padded where it leaves the sensor."""
    if len(layout) == 0:
        raise ValueError("layout has no lenslets")
    img = check_image(image)
    h, w = layout.crop_size
    out = np.zeros((len(layout), h, w), np.float32)
    for k, (cy, cx) in enumerate(layout.centers):
        r0 = int(math.floor(cy - (h - 1) / 2 + 0.5))
        c0 = int(math.floor(cx - (w - 1) / 2 + 0.5))
        rs, re = max(r0, 0), min(r0 + h, img.shape[0])
        cs, ce = max(c0, 0), min(c0 + w, img.shape[1])
        if rs < re and cs < ce:
            out[k, rs - r0 : re - r0, cs - c0 : ce - c0] = img[rs:re, cs:ce]
    return out


def build_conditions(images, layout: LensletLayout, prior) -> ConditionSet:
    """Stack lenslet crops of every image; the prior is attached unchanged."""
    images = np.asarray(images, np.float32)
    if images.ndim == 2:
        images = images[None]
    views = np.stack([crop_views(img, layout) for img in images])
    prior = torch.as_tensor(np.asarray(prior, np.float32))
    return ConditionSet(torch.from_numpy(views), prior)


class ConditionNet(nn.Module):
    """Level features from [Haar-reduced prior, views pooled to the volume's lateral size]."""

    def __init__(self, prior_channels: int, n_views: int, hidden: int = 14, out_channels: int = 14):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(prior_channels + n_views, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, out_channels, 3, padding=1),
        )

    def forward(self, prior_level: torch.Tensor, views: torch.Tensor) -> torch.Tensor:
        b = views.shape[0]
        if views.shape[-2:] != prior_level.shape[-2:]:
            views = F.adaptive_avg_pool2d(views, prior_level.shape[-2:])
        return self.net(torch.cat([prior_level.expand(b, -1, -1, -1), views], dim=1))


class LRNet(nn.Module):
    """Deterministic coarse-volume predictor.

    View path: conv -> ReLU -> conv from the stacked views. Prior path: the
    coarse prior scaled by ``2 * gate`` where the gate is a pixel-wise attention
    (flatten -> Conv1d -> ReLU -> Conv1d -> sigmoid) over [prior, views]. Output
    is the sum. Final layers start at zero, so an untrained net returns the prior.
    """

    def __init__(self, out_channels: int, n_views: int, hidden: int = 14):
        super().__init__()
        self.view_path = nn.Sequential(
            nn.Conv2d(n_views, hidden, 3, padding=1), nn.ReLU(), nn.Conv2d(hidden, out_channels, 3, padding=1)
        )
        self.attn = nn.Sequential(
            nn.Conv1d(out_channels + n_views, hidden, 3, padding=1), nn.ReLU(), nn.Conv1d(hidden, out_channels, 3, padding=1)
        )
        for last in (self.view_path[-1], self.attn[-1]):
            nn.init.zeros_(last.weight)
            nn.init.zeros_(last.bias)

    def gate(self, prior_low, views):
        b, _, h, w = views.shape
        x = torch.cat([prior_low.expand(b, -1, -1, -1), views], dim=1).flatten(2)
        return torch.sigmoid(self.attn(x)).view(b, -1, h, w)

    def forward(self, prior_low: torch.Tensor, views: torch.Tensor) -> torch.Tensor:
        if views.shape[-2:] != prior_low.shape[-2:]:
            views = F.adaptive_avg_pool2d(views, prior_low.shape[-2:])
        return self.view_path(views) + 2.0 * prior_low * self.gate(prior_low, views)


class CWFA(nn.Module):
    def __init__(self, config: CWFAConfig, volume_shape: Sequence[int], n_views: int):
        super().__init__()
        d, h, w = (int(v) for v in volume_shape)
        if d % (2**config.levels):
            raise ValueError(f"depth {d} is not divisible by 2**levels = {2**config.levels}")
        self.config = config
        self.volume_shape = (d, h, w)
        self.n_views = int(n_views)
        torch.manual_seed(config.seed)
        ch = config.conv_channels
        self.omegas = nn.ModuleList()
        self.flows = nn.ModuleList()
        for i in range(config.levels):
            detail = (d // 2 ** (i + 1), h, w)
            self.omegas.append(ConditionNet(d // 2**i, n_views, ch, ch))
            self.flows.append(
                FlowStack.build(detail, ch, config.blocks_per_level, config.block_type, ch, config.clamp, seed=config.seed + i)
            )
        self.lrnet = LRNet(d // 2**config.levels, n_views, ch)
        self.register_buffer("prior", torch.zeros(d, h, w))

    # -- shapes ---------------------------------------------------------------------------
    @property
    def levels(self) -> int:
        return self.config.levels

    def detail_shape(self, i):
        d, h, w = self.volume_shape
        return (d // 2 ** (i + 1), h, w)

    def level_parameters(self, i):
        if i == self.levels:
            return list(self.lrnet.parameters())
        return list(self.omegas[i].parameters()) + list(self.flows[i].parameters())

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def set_prior(self, prior) -> None:
        self.prior.copy_(torch.as_tensor(np.asarray(prior, np.float32)))

    @property
    def support(self) -> torch.Tensor:
        return self.prior > 0

    # -- building blocks ------------------------------------------------------------------
    def features(self, cond: ConditionSet, i: int) -> torch.Tensor:
        return self.omegas[i](haar_approx(cond.prior, i), cond.views)

    def base_detail(self, v_next: torch.Tensor, cond: ConditionSet, i: int) -> torch.Tensor:
        """Prior detail of level ``i`` rescaled by the coarse amplitude ratio V_{i+1} / prior_{i+1}.

        The flow models the detail relative to this (a shift, so the log-det is unchanged).
        Zero when ``config.detail_base == "none"``.
        """
        if self.config.detail_base == "none":
            return torch.zeros((v_next.shape[0], *self.detail_shape(i)), dtype=v_next.dtype)
        pair = haar_down_axial(haar_approx(cond.prior, i))
        p_next = pair.approx
        ratio = torch.where(p_next > _RATIO_EPS, v_next / p_next.clamp(min=_RATIO_EPS), torch.zeros_like(v_next))
        return pair.detail * ratio.clamp(0.0, _RATIO_MAX)

    def level_forward(self, v_i: torch.Tensor, cond: ConditionSet, i: int):
        """Split ``V_i`` and push its detail through flow ``i``: returns (V_{i+1}, FlowOutput)."""
        pair = haar_down_axial(v_i)
        out = self.flows[i](pair.detail - self.base_detail(pair.approx, cond, i), self.features(cond, i))
        return pair.approx, out

    def level_upsample(self, v_next, cond: ConditionSet, i: int, temperature: float = 0.0, generator=None):
        feats = self.features(cond, i)
        shape = (v_next.shape[0], *self.detail_shape(i))
        if temperature == 0:
            z = torch.zeros(shape)
        else:
            z = temperature * torch.randn(shape, generator=generator)
        return haar_up_axial(v_next, self.flows[i].inverse(z, feats) + self.base_detail(v_next, cond, i))

    def lr_reconstruct(self, cond: ConditionSet) -> torch.Tensor:
        return self.lrnet(haar_approx(cond.prior, self.levels), cond.views)

    def reconstruct(self, cond: ConditionSet, temperature: float = 0.0, generator=None, project: bool = True):
        """LR prediction then ``levels`` upsampling steps. ``project`` clips to >= 0 on the prior support."""
        v = self.lr_reconstruct(cond)
        for i in reversed(range(self.levels)):
            v = self.level_upsample(v, cond, i, temperature, generator)
        if project:
            v = torch.clamp(v, min=0.0) * self.support
        return v

    # -- likelihoods and losses -----------------------------------------------------------
    def total_loglik(self, v0: torch.Tensor, cond: ConditionSet) -> torch.Tensor:
        """Per-dimension NLL per level, ``[B, levels + 1]``; the last column is the LR term
        (unit-variance Gaussian on the LR residual)."""
        cols = []
        v = v0
        for i in range(self.levels):
            v, out = self.level_forward(v, cond, i)
            cols.append(nll(out, reduce=False))
        resid = (v - self.lr_reconstruct(cond)).double().flatten(1)
        cols.append(0.5 * resid.pow(2).mean(1) + 0.5 * LOG_2PI)
        return torch.stack(cols, dim=1)

    def level_loss(self, v_i: torch.Tensor, cond: ConditionSet, i: int, alpha: float | None = None, rho: float | None = None):
        """(total, nll, spatial) for level ``i``: NLL of the detail band plus ``alpha`` times
        the mean squared error of the zero-latent reconstruction of ``V_i``."""
        alpha = self.config.alpha if alpha is None else alpha
        rho = self.config.rho if rho is None else rho
        pair = haar_down_axial(v_i)
        feats = self.features(cond, i)
        base = self.base_detail(pair.approx, cond, i)
        out = self.flows[i](pair.detail - base, feats)
        level_nll = nll(out, self.level_parameters(i), rho)
        recon = haar_up_axial(pair.approx, self.flows[i].inverse(torch.zeros_like(pair.detail), feats) + base)
        spatial = (recon - v_i).double().pow(2).mean()
        return level_nll + alpha * spatial, level_nll, spatial

    def lr_loss(self, v_n: torch.Tensor, cond: ConditionSet) -> torch.Tensor:
        return (self.lr_reconstruct(cond) - v_n).double().pow(2).mean()

    # -- persistence ----------------------------------------------------------------------
    def state_entries(self) -> dict:
        return {"/".join(k.split(".")): v for k, v in self.state_dict().items()}

    def meta(self) -> dict:
        return {"cwfa": asdict(self.config), "volume_shape": list(self.volume_shape), "n_views": self.n_views}


@dataclass
class TrainReport:
    nll: dict = field(default_factory=dict)  # level -> per-epoch mean NLL
    spatial: dict = field(default_factory=dict)  # level -> per-epoch mean spatial MSE
    lr_mse: list = field(default_factory=list)
    initial_nll: dict = field(default_factory=dict)
    epoch_seconds: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "nll": {str(k): v for k, v in self.nll.items()},
            "spatial": {str(k): v for k, v in self.spatial.items()},
            "lr_mse": self.lr_mse,
            "initial_nll": {str(k): v for k, v in self.initial_nll.items()},
            "epoch_seconds": self.epoch_seconds,
            "metrics": self.metrics,
        }


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[k : k + batch_size] for k in range(0, n, batch_size)]


def train(model: CWFA, cond: ConditionSet, volumes: torch.Tensor, config: CWFAConfig | None = None,
          report: TrainReport | None = None) -> TrainReport:
    """Fit the LR net, then every flow level coarse-to-fine, each with its own Lion optimiser.

    ``cond.prior`` is written into the model before training. Levels share no
    parameters, so each stage only ever sees its own loss.
    """
    config = config or model.config
    report = report or TrainReport()
    n = volumes.shape[0]
    if n == 0:
        raise ValueError("training set is empty")
    model.set_prior(cond.prior)
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    epochs = config.per_level_epochs()
    wd = config.rho if config.weight_decay is None else config.weight_decay
    pyramid = [volumes]
    for _ in range(model.levels):
        pyramid.append(haar_down_axial(pyramid[-1]).approx)

    def optimiser(i):
        return Lion(model.level_parameters(i), lr=config.learning_rate, betas=(config.beta1, config.beta2), weight_decay=wd)

    # coarse stage: deterministic regression of V_n
    opt = optimiser(model.levels)
    for epoch in range(epochs):
        t0, total = time.perf_counter(), 0.0
        for idx in _batches(n, config.batch_size, rng):
            loss = model.lr_loss(pyramid[-1][idx], cond[idx])
            _step(loss, opt, model.level_parameters(model.levels), f"LR net, epoch {epoch}")
            total += loss.item() * len(idx)
        report.lr_mse.append(total / n)
        report.epoch_seconds.append(time.perf_counter() - t0)

    for i in reversed(range(model.levels)):
        params = model.level_parameters(i)
        with torch.no_grad():
            report.initial_nll[i] = float(model.level_loss(pyramid[i], cond, i)[1])
        opt = optimiser(i)
        report.nll[i], report.spatial[i] = [], []
        for epoch in range(epochs):
            t0, tot_nll, tot_sp = time.perf_counter(), 0.0, 0.0
            for idx in _batches(n, config.batch_size, rng):
                loss, level_nll, spatial = model.level_loss(pyramid[i][idx], cond[idx], i, config.alpha, config.rho)
                _step(loss, opt, params, f"level {i}, epoch {epoch}")
                tot_nll += level_nll.item() * len(idx)
                tot_sp += spatial.item() * len(idx)
            report.nll[i].append(tot_nll / n)
            report.spatial[i].append(tot_sp / n)
            report.epoch_seconds.append(time.perf_counter() - t0)
        log.info("level %d: nll %.4f -> %.4f", i, report.initial_nll[i], report.nll[i][-1])
    return report


def _step(loss, opt, params, where):
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss at {where}")
    backward(loss, params)
    opt.step()


def save_model(model: CWFA, path, layout: LensletLayout | None = None, extra: dict | None = None) -> None:
    meta = model.meta()
    if layout is not None:
        meta["layout"] = layout.to_dict()
    if extra:
        meta.update(extra)
    archive.save_archive(path, {"config": meta, **model.state_entries()})


def load_model(path):
    """Returns ``(model, meta)``; ``meta["layout"]`` is a :class:`LensletLayout` when stored."""
    data = archive.load_archive(path)
    if "config" not in data:
        raise archive.ArchiveError(f"{path}: no 'config' entry; not a checkpoint")
    meta = dict(data.pop("config"))
    model = CWFA(CWFAConfig.from_dict(meta["cwfa"]), meta["volume_shape"], meta["n_views"])
    reference = model.state_dict()
    state = {}
    for key, value in data.items():
        name = ".".join(key.split("/"))
        if name not in reference:
            raise archive.ArchiveError(f"{path}: unexpected entry {key!r}")
        state[name] = torch.from_numpy(np.array(value)).to(reference[name].dtype)
    model.load_state_dict(state)
    if "layout" in meta:
        meta["layout"] = LensletLayout.from_dict(meta["layout"])
    return model, meta


def check_level_gradients(volume_shape=(4, 4, 4), n_views: int = 2, levels: int = 1, level: int = 0,
                          block_type: str = "affine", points: int = 5, eps: float = 1e-4,
                          max_coords: int | None = None, seed: int = 0, scale: float = 0.1) -> list[float]:
    """:func:`grad_check` of the full level loss (NLL + alpha * spatial + rho * ||theta||^2).

    Each of ``points`` evaluations draws a fresh float64 model with every
    parameter ~ N(0, scale^2) (the zero-initialised output layers included), a
    random positive volume, random views and a random prior. Much larger
    ``eps`` meets ReLU kinks; much smaller meets round-off on zero gradients.
    """
    errors = []
    for k in range(points):
        gen = torch.Generator().manual_seed(seed + k)
        cfg = CWFAConfig(levels=levels, blocks_per_level=2, conv_channels=4, block_type=block_type, seed=seed + k)
        model = CWFA(cfg, volume_shape, n_views).double()
        with torch.no_grad():
            for p in model.parameters():
                p.copy_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
        d, h, w = volume_shape
        v = torch.rand((1, d // 2**level, h, w), generator=gen, dtype=torch.float64) + 0.1
        cond = ConditionSet(torch.rand((1, n_views, h, w), generator=gen, dtype=torch.float64),
                            torch.rand(volume_shape, generator=gen, dtype=torch.float64) + 0.1)
        errors.append(grad_check(lambda: model.level_loss(v, cond, level)[0], model.level_parameters(level),
                                 eps, max_coords, seed + k))
    return errors
