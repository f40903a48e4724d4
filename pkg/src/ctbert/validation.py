"""Input validation helpers shared by the estimators and pipeline functions."""

from __future__ import annotations

import numpy as np

from .exceptions import CorruptInputError, NotFittedError


def check_raster(img, name="image", ndim=2, dtype=None):
    """Return ``img`` as an array, raising if it is empty or has the wrong rank."""
    arr = np.asarray(img)
    if arr.ndim != ndim:
        raise CorruptInputError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if arr.size == 0 or min(arr.shape[:2]) == 0:
        raise CorruptInputError(f"{name} has zero size: shape {arr.shape}")
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


def check_same_shape(*arrays, names=None):
    shapes = [np.shape(a)[:2] for a in arrays]
    if len(set(shapes)) > 1:
        label = ", ".join(names) if names else "inputs"
        raise CorruptInputError(f"dimension mismatch between {label}: {shapes}")


def check_binary(mask, name="mask"):
    """Coerce a {0,1}, {0,255} or boolean raster to bool; reject anything else."""
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    values = np.unique(arr)
    if not (set(values.tolist()) <= {0, 1} or set(values.tolist()) <= {0, 255}):
        raise CorruptInputError(f"{name} is not binary: values {values[:10]}")
    return arr > 0


def check_clip(clip, n_frames=None, size=None):
    """Validate a (T, 3, H, W) clip or a (B, T, 3, H, W) batch of clips."""
    shape = tuple(clip.shape)
    if len(shape) not in (4, 5) or shape[-3] != 3:
        raise CorruptInputError(f"clip must be (T, 3, H, W) or (B, T, 3, H, W), got {shape}")
    if n_frames is not None and shape[-4] != n_frames:
        raise CorruptInputError(f"clip must have {n_frames} frames, got {shape[-4]}")
    if size is not None and shape[-2:] != (size, size):
        raise CorruptInputError(f"clip frames must be {size}x{size}, got {shape[-2:]}")


def check_embeddings(vectors, dim=None):
    arr = np.asarray(vectors, dtype=np.float32)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError(f"expected a non-empty (n, d) array of embeddings, got {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"embedding dimension must be {dim}, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("embeddings contain non-finite values")
    return arr


def check_binary_labels(y):
    y = np.asarray(y).astype(int).ravel()
    if not set(np.unique(y).tolist()) <= {0, 1}:
        raise ValueError(f"labels must be 0 (covid) or 1 (non-covid), got {np.unique(y)}")
    return y


def check_is_fitted(estimator, attribute):
    if not hasattr(estimator, attribute):
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit before using it"
        )
