"""Synthetic XLFM world: lenslet geometry, PSFs, projection, phantoms and Richardson-Lucy.

Geometry convention
-------------------
A volume ``[D, H, W]`` is imaged by full 2-D convolution of every depth slice with
that depth's kernel ``[Ks, Ks]``, so the sensor is ``(H + Ks - 1, W + Ks - 1)`` and
no flux is lost at the borders. A spot at kernel position ``k`` images volume pixel
``i`` at sensor pixel ``i + k``; a lenslet whose central-depth spot sits at ``k``
therefore has its view at sensor rows/cols ``k .. k + H - 1``, i.e. centred on
``k + (H - 1) / 2``. That offset is :attr:`PSFStack.sensor_origin`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import fft as sfft
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .archive import load_archive, save_archive
from .validation import check_image, check_volume

_FLOOR = 1e-12

#: bead densities (per voxel) standing in for the 1e-3 .. 1e-6 dilution ladder.
BEAD_DENSITY_PRESETS = {0: 1e-2, 1: 1e-3, 2: 1e-4, 3: 1e-5}


@dataclass
class LensletLayout:
    centers: np.ndarray  # [n, 2] (row, col) in sensor pixels
    crop_size: tuple[int, int]
    sensor_size: tuple[int, int]

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        self.crop_size = tuple(int(v) for v in self.crop_size)
        self.sensor_size = tuple(int(v) for v in self.sensor_size)
        rounded = {tuple(np.round(c, 6)) for c in self.centers}
        if len(rounded) != len(self.centers):
            raise ValueError("lenslet centers must be distinct")

    def __len__(self):
        return len(self.centers)

    @property
    def midpoint(self):
        return ((self.sensor_size[0] - 1) / 2.0, (self.sensor_size[1] - 1) / 2.0)

    def to_dict(self):
        return {"centers": self.centers.tolist(), "crop_size": list(self.crop_size),
                "sensor_size": list(self.sensor_size)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["centers"]), tuple(d["crop_size"]), tuple(d["sensor_size"]))


def make_layout(n: int, sensor_size=(192, 192), crop_size=(64, 64), ring_radius: float = 48.0) -> LensletLayout:
    """One lenslet at the sensor midpoint plus ``n - 1`` evenly spaced on a ring."""
    if n < 1:
        raise ValueError(f"need at least one lenslet, got {n}")
    cy, cx = (sensor_size[0] - 1) / 2.0, (sensor_size[1] - 1) / 2.0
    centers = [(cy, cx)]
    for k in range(n - 1):
        theta = 2.0 * math.pi * k / (n - 1)
        centers.append((cy - ring_radius * math.sin(theta), cx + ring_radius * math.cos(theta)))
    return LensletLayout(np.array(centers), crop_size, sensor_size)


@dataclass
class PSFStack:
    kernels: np.ndarray  # [D, Ks, Ks], each depth sums to 1
    lateral: tuple[int, int]  # (H, W) of the volumes this PSF images

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels, dtype=np.float32)
        self.lateral = tuple(int(v) for v in self.lateral)
        self._otf = None

    @property
    def depth(self):
        return self.kernels.shape[0]

    @property
    def sensor_shape(self):
        kh, kw = self.kernels.shape[1:]
        return (self.lateral[0] + kh - 1, self.lateral[1] + kw - 1)

    @property
    def sensor_origin(self):
        return ((self.lateral[0] - 1) / 2.0, (self.lateral[1] - 1) / 2.0)

    @property
    def otf(self):
        if self._otf is None:
            self._otf = sfft.rfft2(self.kernels, s=self.sensor_shape, axes=(-2, -1))
        return self._otf


def synth_psf(layout: LensletLayout, depths: int, parallax_gain: float = 0.5, spot_sigma: float = 1.0) -> PSFStack:
    """Per-depth kernels: one Gaussian spot per lenslet, shifted along the lenslet's
    radial direction by ``parallax_gain * (z - depths // 2)`` pixels."""
    h, w = layout.crop_size
    ks_r, ks_c = layout.sensor_size[0] - h + 1, layout.sensor_size[1] - w + 1
    if ks_r < 1 or ks_c < 1:
        raise ValueError("sensor must be at least as large as the crop")
    origin = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    mid = np.array(layout.midpoint)
    rows, cols = np.arange(ks_r), np.arange(ks_c)
    kernels = np.zeros((depths, ks_r, ks_c), dtype=np.float64)
    for center in layout.centers:
        offset = center - mid
        norm = np.linalg.norm(offset)
        direction = offset / norm if norm > 1e-9 else np.zeros(2)
        spot0 = center - origin
        for z in range(depths):
            r0, c0 = spot0 + parallax_gain * (z - depths // 2) * direction
            gr = np.exp(-0.5 * ((rows - r0) / spot_sigma) ** 2) * (np.abs(rows - r0) <= 4 * spot_sigma)
            gc = np.exp(-0.5 * ((cols - c0) / spot_sigma) ** 2) * (np.abs(cols - c0) <= 4 * spot_sigma)
            kernels[z] += np.outer(gr, gc) / (2 * math.pi * spot_sigma**2)
    sums = kernels.sum(axis=(1, 2), keepdims=True)
    if np.any(sums <= 0):
        raise ValueError("every spot fell outside the kernel support")
    return PSFStack(kernels / sums, (h, w))


def forward_project(volume, psf: PSFStack) -> np.ndarray:
    """Sensor image ``sum_z V_z * K_z`` (full linear convolution)."""
    volume = check_volume(volume, depth=psf.depth, lateral=psf.lateral)
    spec = sfft.rfft2(volume, s=psf.sensor_shape, axes=(-2, -1))
    img = sfft.irfft2((spec * psf.otf).sum(axis=0), s=psf.sensor_shape)
    if volume.min() >= 0:
        img = np.maximum(img, 0.0)  # FFT round-off
    return img.astype(np.float32)


def adjoint_project(image, psf: PSFStack) -> np.ndarray:
    """Transpose of :func:`forward_project`: per-depth correlation, cropped to the volume."""
    image = check_image(image, shape=psf.sensor_shape)
    spec = sfft.rfft2(image, s=psf.sensor_shape)
    back = sfft.irfft2(spec[None] * np.conj(psf.otf), s=psf.sensor_shape, axes=(-2, -1))
    h, w = psf.lateral
    return back[:, :h, :w].astype(np.float32)


def poisson_nll(image, estimate) -> float:
    est = np.maximum(estimate.astype(np.float64), _FLOOR)
    return float(np.sum(est - image * np.log(est)))


def richardson_lucy(image, psf: PSFStack, iterations: int = 100, init=None, history: list | None = None) -> np.ndarray:
    """Multiplicative RL: ``V <- V * A^T(I / A V) / A^T 1``.

    ``history``, when given, receives the Poisson data term before each update and
    after the last one.
    """
    image = check_image(image, shape=psf.sensor_shape)
    if np.any(image < 0):
        raise ValueError("richardson_lucy needs a nonnegative image")
    shape = (psf.depth, *psf.lateral)
    if init is None:
        v = np.full(shape, max(float(image.sum()), _FLOOR) / np.prod(shape), dtype=np.float32)
    else:
        v = check_volume(init, depth=psf.depth, lateral=psf.lateral).copy()
        if np.any(v < 0):
            raise ValueError("init must be nonnegative")
    norm = np.maximum(adjoint_project(np.ones(psf.sensor_shape, np.float32), psf), _FLOOR)
    # sensor pixels no voxel can reach only carry FFT round-off; keep them out of the ratio
    reach = forward_project(np.ones(shape, np.float32), psf)
    reach = reach > 1e-6 * reach.max()
    for _ in range(iterations):
        est = forward_project(v, psf)
        if history is not None:
            history.append(poisson_nll(image[reach], est[reach]))
        ratio = np.where(reach, image / np.maximum(est, _FLOOR), 0.0).astype(np.float32)
        v = np.maximum(v * adjoint_project(ratio, psf) / norm, 0.0).astype(np.float32)
    if history is not None:
        history.append(poisson_nll(image[reach], forward_project(v, psf)[reach]))
    return v


def sparsify_sequence(volumes, rel_floor: float = 0.2):
    """Zero every voxel outside the sequence's active support.

    The support is where the temporal mean exceeds ``rel_floor`` times its
    maximum. Returns ``(sparse_volumes, support)``. Stands in for the upstream
    background-removal network that isolates sparse neural activity.
    """
    volumes = np.asarray(volumes, dtype=np.float32)
    mean = volumes.mean(axis=0)
    support = mean > rel_floor * mean.max() if mean.max() > 0 else np.zeros(mean.shape, bool)
    return volumes * support, support


class RichardsonLucy(BaseEstimator, TransformerMixin):
    """Deconvolve a stack of sensor images into volumes.

    Parameters
    ----------
    psf : PSFStack
    iterations : int, default=100
    rel_floor : float or None
        When set, the deconvolved stack is passed through :func:`sparsify_sequence`.
    """

    def __init__(self, psf=None, iterations=100, rel_floor=None):
        self.psf = psf
        self.iterations = iterations
        self.rel_floor = rel_floor

    def fit(self, X=None, y=None):
        if self.psf is None:
            raise ValueError("RichardsonLucy needs a psf")
        self.n_iter_ = self.iterations
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float32)
        vols = np.stack([richardson_lucy(img, self.psf, self.iterations) for img in X])
        if self.rel_floor is not None:
            vols, self.support_ = sparsify_sequence(vols, self.rel_floor)
        return vols


def find_lenslet_centers(psf_central, expected_n: int, crop_size=(64, 64), origin=(0.0, 0.0), rel_threshold=0.2):
    """Local maxima of a (central-depth) PSF image, strongest ``expected_n`` first.

    Maxima must exceed ``rel_threshold * max`` and be strict (not a plateau);
    suppression radius is ``crop_size / 4``. Peaks are refined with a 3x3
    centroid and shifted by ``origin``.
    """
    img = np.asarray(psf_central, dtype=np.float64)
    radius = max(1, int(min(crop_size) // 4))
    size = 2 * radius + 1
    peak = ndimage.maximum_filter(img, size=size, mode="constant", cval=-np.inf)
    low = ndimage.minimum_filter(img, size=3, mode="nearest")
    cand = (img == peak) & (img > low) & (img > rel_threshold * img.max())
    coords = np.argwhere(cand)
    order = np.argsort(-img[cand], kind="stable")
    kept: list[np.ndarray] = []
    for rc in coords[order]:
        if all(np.max(np.abs(rc - k)) > radius for k in kept):
            kept.append(rc)
    if len(kept) < expected_n:
        raise ValueError(f"found {len(kept)} lenslet maxima, expected {expected_n}")
    out = []
    for r, c in kept[:expected_n]:
        r0, r1, c0, c1 = max(r - 1, 0), min(r + 2, img.shape[0]), max(c - 1, 0), min(c + 2, img.shape[1])
        win = img[r0:r1, c0:c1]
        rr, cc = np.mgrid[r0:r1, c0:c1]
        out.append((float((win * rr).sum() / win.sum()), float((win * cc).sum() / win.sum())))
    return np.asarray(out) + np.asarray(origin)


# -- phantoms -----------------------------------------------------------------------------


@dataclass
class PhantomConfig:
    shape: tuple[int, int, int] = (16, 64, 64)
    n_neurons: int = 30
    neuron_sigma: float = 1.2
    baseline: tuple[float, float] = (0.3, 0.6)
    spike_rate: float = 0.08
    spike_amplitude: tuple[float, float] = (0.6, 1.4)
    decay: float = 4.0
    background: bool = False
    background_intensity: float = 0.3
    noise_sigma: float = 0.01
    photon_scale: float | None = None
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(v) for v in self.shape)
        self.baseline = tuple(self.baseline)
        self.spike_amplitude = tuple(self.spike_amplitude)
        if self.n_neurons < 0 or self.neuron_sigma <= 0 or self.decay <= 0 or self.spike_rate < 0:
            raise ValueError("phantom parameters must be positive")


@dataclass
class BeadConfig:
    shape: tuple[int, int, int] = (16, 64, 64)
    density: float = 1e-3
    intensity: float = 1.0
    noise_sigma: float = 0.01
    photon_scale: float | None = None
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(v) for v in self.shape)

    @classmethod
    def preset(cls, level: int, **kw):
        if level not in BEAD_DENSITY_PRESETS:
            raise ValueError(f"density preset must be one of {sorted(BEAD_DENSITY_PRESETS)}")
        return cls(density=BEAD_DENSITY_PRESETS[level], **kw)


@dataclass
class SequenceDataset:
    volumes: np.ndarray  # [T, D, H, W]
    images: np.ndarray  # [T, Hs, Ws]
    layout: LensletLayout
    psf: PSFStack
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.float32))
    traces: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), np.float32))
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "SequenceDataset":
        idx = np.asarray(idx)
        traces = self.traces[:, idx] if self.traces.size else self.traces
        return replace(self, volumes=self.volumes[idx], images=self.images[idx], traces=traces)

    def save(self, path) -> None:
        entries = {"meta": dict(self.meta, layout=self.layout.to_dict(), lateral=list(self.psf.lateral))}
        for t in range(len(self)):
            entries[f"volume/{t}"] = self.volumes[t]
        for t in range(len(self)):
            entries[f"image/{t}"] = self.images[t]
        entries["neuron_positions"] = self.positions
        entries["neuron_traces"] = self.traces
        entries["psf"] = self.psf.kernels
        entries["centers"] = self.layout.centers
        save_archive(path, entries)

    @classmethod
    def load(cls, path) -> "SequenceDataset":
        data = load_archive(path)
        try:
            meta = dict(data["meta"])
            layout = LensletLayout.from_dict(meta.pop("layout"))
            psf = PSFStack(data["psf"], tuple(meta.pop("lateral")))
            n = sum(1 for k in data if k.startswith("image/"))
            images = np.stack([data[f"image/{t}"] for t in range(n)]) if n else np.zeros((0, *psf.sensor_shape), np.float32)
            volumes = np.stack([data[f"volume/{t}"] for t in range(n)]) if n else np.zeros((0, psf.depth, *psf.lateral), np.float32)
        except KeyError as exc:
            raise ValueError(f"{path}: not a dataset archive (missing {exc})") from None
        return cls(volumes, images, layout, psf, data.get("neuron_positions"), data.get("neuron_traces"), meta)


def _add_noise(image, rng, noise_sigma, photon_scale):
    img = image.astype(np.float64)
    if photon_scale:
        img = rng.poisson(np.maximum(img, 0) * photon_scale) / photon_scale
    if noise_sigma:
        img = img + rng.normal(0.0, noise_sigma * max(float(image.max()), _FLOOR), img.shape)
    return np.maximum(img, 0.0).astype(np.float32)


def _neuron_positions(cfg: PhantomConfig, rng):
    d, h, w = cfg.shape
    m = int(math.ceil(2 * cfg.neuron_sigma))
    lo = np.array([min(m, d // 2), m, m])
    hi = np.array([d - 1 - lo[0], h - 1 - m, w - 1 - m])
    centre = (lo + hi) / 2.0
    semi = np.maximum((hi - lo) / 2.0, 1e-6)
    out: list[np.ndarray] = []
    min_dist = 4.0 * cfg.neuron_sigma
    for _ in range(200 * max(cfg.n_neurons, 1)):
        if len(out) == cfg.n_neurons:
            break
        p = rng.uniform(lo, hi + 1e-9)
        if np.sum(((p - centre) / semi) ** 2) > 1.0:  # keep to an ellipsoidal "brain"
            continue
        if all(np.linalg.norm(p - q) >= min_dist for q in out):
            out.append(p)
    if len(out) < cfg.n_neurons:
        raise ValueError(f"could only place {len(out)} of {cfg.n_neurons} neurons; lower n_neurons or neuron_sigma")
    return np.round(np.array(out, dtype=np.float64).reshape(-1, 3)).astype(np.float32)


def _blob(shape, pos, sigma):
    """Truncated (radius 2 sigma) Gaussian blob with unit peak."""
    r = int(math.ceil(2 * sigma))
    zz, yy, xx = np.mgrid[-r : r + 1, -r : r + 1, -r : r + 1]
    d2 = zz**2 + yy**2 + xx**2
    keep = d2 <= (2 * sigma) ** 2
    val = np.exp(-0.5 * d2[keep] / sigma**2)
    idx = np.stack([zz[keep], yy[keep], xx[keep]], 1) + pos.astype(int)
    ok = np.all((idx >= 0) & (idx < np.array(shape)), axis=1)
    return tuple(idx[ok].T), val[ok]


def _traces(cfg: PhantomConfig, frames: int, rng):
    burn = int(5 * cfg.decay)
    total = frames + burn
    base = rng.uniform(*cfg.baseline, size=cfg.n_neurons)
    spikes = (rng.random((cfg.n_neurons, total)) < cfg.spike_rate) * rng.uniform(*cfg.spike_amplitude, size=(cfg.n_neurons, total))
    kernel = np.exp(-np.arange(total) / cfg.decay)
    calcium = np.stack([np.convolve(s, kernel)[:total] for s in spikes]) if cfg.n_neurons else np.zeros((0, total))
    return (base[:, None] + calcium[:, burn:]).astype(np.float32)


def _background(shape, intensity):
    d, h, w = shape
    zz, yy, xx = np.mgrid[:d, :h, :w]
    r2 = ((zz - (d - 1) / 2) / (0.45 * d)) ** 2 + ((yy - (h - 1) / 2) / (0.42 * h)) ** 2 + ((xx - (w - 1) / 2) / (0.3 * w)) ** 2
    return (intensity * (r2 <= 1.0)).astype(np.float32)


def gen_sequence(config: PhantomConfig, psf: PSFStack, layout: LensletLayout, frames: int) -> SequenceDataset:
    """Sparse calcium-like activity of ``n_neurons`` fixed Gaussian cells, imaged with noise."""
    if frames < 1:
        raise ValueError(f"frames must be >= 1, got {frames}")
    if config.shape != (psf.depth, *psf.lateral):
        raise ValueError(f"phantom shape {config.shape} does not match psf volume {(psf.depth, *psf.lateral)}")
    rng = np.random.default_rng(config.seed)
    positions = _neuron_positions(config, rng)
    blobs = [_blob(config.shape, p, config.neuron_sigma) for p in positions]
    traces = _traces(config, frames, rng)
    bg = _background(config.shape, config.background_intensity) if config.background else 0.0
    noise_rng = np.random.default_rng([config.seed, 1])
    volumes = np.zeros((frames, *config.shape), np.float32)
    images = np.zeros((frames, *psf.sensor_shape), np.float32)
    for t in range(frames):
        vol = np.zeros(config.shape, np.float32)
        for (idx, val), amp in zip(blobs, traces[:, t]):
            vol[idx] += amp * val
        vol += bg
        volumes[t] = vol
        images[t] = _add_noise(forward_project(vol, psf), noise_rng, config.noise_sigma, config.photon_scale)
    meta = {"kind": "phantom", "config": _jsonable(asdict(config)), "frames": frames}
    return SequenceDataset(volumes, images, layout, psf, positions, traces, meta)


def gen_beads(config: BeadConfig, psf: PSFStack, layout: LensletLayout, frames: int) -> SequenceDataset:
    """Static point sources at uniform random voxels; count ~ Poisson(density * n_voxels)."""
    if frames < 1:
        raise ValueError(f"frames must be >= 1, got {frames}")
    rng = np.random.default_rng(config.seed)
    n_vox = int(np.prod(config.shape))
    count = rng.poisson(config.density * n_vox) if config.density > 0 else 0
    flat = rng.integers(0, n_vox, size=count)
    vol = np.zeros(n_vox, np.float32)
    np.add.at(vol, flat, config.intensity)
    vol = vol.reshape(config.shape)
    noise_rng = np.random.default_rng([config.seed, 1])
    clean = forward_project(vol, psf)
    images = np.stack([_add_noise(clean, noise_rng, config.noise_sigma, config.photon_scale) for _ in range(frames)])
    positions = np.argwhere(vol > 0).astype(np.float32)
    meta = {"kind": "beads", "config": _jsonable(asdict(config)), "frames": frames, "bead_count": int(count)}
    return SequenceDataset(np.repeat(vol[None], frames, 0), images, layout, psf, positions,
                           np.zeros((0, frames), np.float32), meta)


def deconvolve_dataset(ds: SequenceDataset, iterations: int = 100, rel_floor: float | None = 0.2) -> SequenceDataset:
    """Replace ``volumes`` by RL reconstructions of ``images`` (sparsified across the sequence)."""
    rl = RichardsonLucy(ds.psf, iterations, rel_floor).fit()
    vols = rl.transform(ds.images)
    meta = dict(ds.meta, rl_iterations=iterations, rl_floor=rel_floor, deconvolved=True)
    return replace(ds, volumes=vols, meta=meta)


def _jsonable(d):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}
