"""Input validation helpers shared by the estimators and the functional API."""

import numbers

import numpy as np
import torch
from sklearn.utils.validation import check_array


def check_images(X, *, name="X"):
    """Validate a batch of images laid out as (n, H, W, C) with values in [0, 1].

    Returns a C-contiguous float32 array.
    """
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False,
                    input_name=name)
    if X.ndim != 4:
        raise ValueError(f"{name} must have shape (n, H, W, C), got {X.shape}")
    if X.shape[-1] not in (1, 3):
        raise ValueError(f"{name} must have 1 or 3 channels, got {X.shape[-1]}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return np.ascontiguousarray(X)


def check_labels(y, n_samples=None, *, name="y"):
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"{name} must be 1-d, got shape {y.shape}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError(f"{name} must hold integer class indices")
    y = y.astype(np.int64)
    if n_samples is not None and y.shape[0] != n_samples:
        raise ValueError(
            f"{name} has {y.shape[0]} entries but X has {n_samples} samples")
    if y.size and y.min() < 0:
        raise ValueError(f"{name} must hold non-negative class indices")
    return y


def check_positive(value, name, *, allow_zero=False):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite real number, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else "> 0"
        raise ValueError(f"{name} must be {bound}, got {value!r}")
    return value


def to_nchw(X, dtype=torch.float32):
    """(n, H, W, C) numpy images -> (n, C, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(X)).permute(0, 3, 1, 2).to(dtype).contiguous()


def to_nhwc(X):
    """(n, C, H, W) tensor -> (n, H, W, C) numpy images."""
    return X.detach().permute(0, 2, 3, 1).cpu().numpy()
