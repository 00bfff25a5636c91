"""Input checks for image batches and label grids."""

import numpy as np
from sklearn.utils import check_array

from .exceptions import DimensionError


def check_images(X, dtype=np.float32):
    """Return ``X`` as a finite (n, D_in, H, W) array."""
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_2d=False, ensure_all_finite=True)
    if X.ndim != 4:
        raise DimensionError(f"expected images of shape (n, D_in, H, W), got {X.shape}")
    return X


def check_label_grid(y, X, ignore_label=255, num_classes=None):
    """Return ``y`` as a uint8 (n, H, W) grid matching ``X``."""
    y = np.asarray(y)
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise DimensionError(f"labels {y.shape} do not match images {X.shape}")
    if y.dtype.kind not in "iu":
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("labels must be integers")
    valid = y[y != ignore_label]
    if valid.size and (valid.min() < 0 or valid.max() > 254):
        raise ValueError("labels must lie in [0, 254] or equal the ignore label")
    if num_classes is not None and valid.size and valid.max() >= num_classes:
        raise ValueError(f"label {int(valid.max())} out of range for {num_classes} classes")
    return y.astype(np.uint8)


def infer_num_classes(y, ignore_label=255):
    valid = y[y != ignore_label]
    if valid.size == 0:
        raise ValueError("all labels are ignored")
    return max(2, int(valid.max()) + 1)
