"""Small argument and input checks shared by the estimators."""
import numbers

import numpy as np


def check_positive_int(value, name):
    if isinstance(value, (bool, np.bool_)) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_probability(value, name):
    if not isinstance(value, numbers.Real) or not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")
    return float(value)


def check_frames(frames):
    from .simulator import FrameBatch

    if not isinstance(frames, FrameBatch):
        raise TypeError(f"expected a FrameBatch, got {type(frames).__name__}")
    if len(frames) == 0:
        raise ValueError("frame batch is empty")
    return frames


def check_activity_matrix(y, n_frames=None, K=None):
    """Coerce labels to an (n, K) uint8 array of bits."""
    y = np.asarray(y)
    if y.ndim == 1:
        y = y[None, :]
    if y.ndim != 2:
        raise ValueError(f"activity labels must be 2-D (n_frames, K), got shape {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("activity labels must be 0/1")
    if n_frames is not None and y.shape[0] != n_frames:
        raise ValueError(f"expected {n_frames} label rows, got {y.shape[0]}")
    if K is not None and y.shape[1] != K:
        raise ValueError(f"expected {K} devices per label row, got {y.shape[1]}")
    return y.astype(np.uint8)
