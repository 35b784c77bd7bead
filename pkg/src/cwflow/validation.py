"""Input checks shared by the estimators and the array-level functions."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_is_fitted  # noqa: F401  (re-exported)


def _as_float(x, name):
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    arr = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_volume(v, depth=None, lateral=None, name="volume") -> np.ndarray:
    """A single ``[D, H, W]`` float32 volume."""
    v = _as_float(v, name)
    if v.ndim != 3:
        raise ValueError(f"{name} must be 3-D [D, H, W], got shape {v.shape}")
    if depth is not None and v.shape[0] != depth:
        raise ValueError(f"{name} has {v.shape[0]} depths, expected {depth}")
    if lateral is not None and tuple(v.shape[1:]) != tuple(lateral):
        raise ValueError(f"{name} lateral shape {v.shape[1:]} != {tuple(lateral)}")
    return v


def check_image(img, shape=None, name="image") -> np.ndarray:
    img = _as_float(img, name)
    if img.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {img.shape}")
    if shape is not None and tuple(img.shape) != tuple(shape):
        raise ValueError(f"{name} shape {img.shape} != sensor shape {tuple(shape)}")
    return img


def check_stack(x, ndim, name="X") -> np.ndarray:
    """A batch of images (``ndim=3``) or volumes (``ndim=4``); a single item is promoted."""
    x = _as_float(x, name)
    if x.ndim == ndim - 1:
        x = x[None]
    if x.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D (batch first), got shape {x.shape}")
    if len(x) == 0:
        raise ValueError(f"{name} is empty")
    return x


def check_pairs(images, volumes):
    images = check_stack(images, 3, "images")
    volumes = check_stack(volumes, 4, "volumes")
    if len(images) != len(volumes):
        raise ValueError(f"{len(images)} images but {len(volumes)} volumes")
    return images, volumes
