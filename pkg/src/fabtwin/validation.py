"""Input validation helpers shared by every public entry point.

Masks and gray images are plain 2-D numpy arrays. A mask holds only 0/1
(``uint8``); a gray image holds finite floats in [0, 1].
"""

import numpy as np

from .exceptions import InvalidInputError


def check_mask(mask, name="mask"):
    """Return ``mask`` as a C-contiguous 2-D ``uint8`` array of 0/1 values."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError(f"{name} must be at least 1x1")
    if arr.dtype == bool:
        return np.ascontiguousarray(arr, dtype=np.uint8)
    if not np.all((arr == 0) | (arr == 1)):
        raise InvalidInputError(f"{name} must contain only 0 and 1")
    return np.ascontiguousarray(arr, dtype=np.uint8)


def check_gray(image, name="image"):
    """Return ``image`` as a 2-D ``float64`` array with finite values in [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise InvalidInputError(f"{name} must be at least 1x1")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InvalidInputError(f"{name} values must lie in [0, 1]")
    return arr


def check_image_stack(images, name="images", min_count=1):
    """Stack a sequence of equally sized 2-D images into an (N, H, W) float array."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        stack = images.astype(np.float64, copy=False)
    else:
        images = list(images)
        if len(images) < min_count:
            raise InvalidInputError(
                f"{name} needs at least {min_count} image(s), got {len(images)}")
        shapes = {np.shape(im) for im in images}
        if len(shapes) != 1:
            raise InvalidInputError(f"{name} have mismatched dimensions: {sorted(shapes)}")
        stack = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    if stack.shape[0] < min_count:
        raise InvalidInputError(
            f"{name} needs at least {min_count} image(s), got {stack.shape[0]}")
    if stack.ndim != 3:
        raise InvalidInputError(f"{name} must be 2-D images")
    if not np.all(np.isfinite(stack)):
        raise InvalidInputError(f"{name} contain non-finite values")
    return stack


def check_same_shape(a, b, names=("a", "b")):
    if np.shape(a) != np.shape(b):
        raise InvalidInputError(
            f"{names[0]} and {names[1]} differ in shape: {np.shape(a)} vs {np.shape(b)}")


def check_pair_arrays(X, Y=None):
    """Validate a batch of layouts (and optional targets) shaped (N, H, W)."""
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[0] == 0:
        raise InvalidInputError(f"expected layouts shaped (N, H, W), got {X.shape}")
    X = X.astype(np.float32)
    if not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 1:
        raise InvalidInputError("layouts must be finite and within [0, 1]")
    if Y is None:
        return X
    Y = np.asarray(Y)
    if Y.ndim == 2:
        Y = Y[None]
    if Y.shape != X.shape:
        raise InvalidInputError(f"targets shape {Y.shape} does not match layouts {X.shape}")
    Y = Y.astype(np.float32)
    if not np.all(np.isfinite(Y)) or Y.min() < 0 or Y.max() > 1:
        raise InvalidInputError("targets must be finite and within [0, 1]")
    return X, Y
