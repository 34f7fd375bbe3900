"""Input validation helpers shared across the package."""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """An array has the wrong shape or an inconsistent pair of shapes."""


class EmptyContextError(ValueError):
    """A context sequence with zero frames was passed where keys/values are required."""


def check_finite(a, name="array"):
    a = np.asarray(a)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def check_features(a, name="features", num_channels=None):
    """Validate a (frames, channels) feature matrix: 2-D, finite, optionally fixed width."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D (frames, channels), got shape {a.shape}")
    if num_channels is not None and a.shape[1] != num_channels:
        raise ShapeError(f"{name} has {a.shape[1]} channels, expected {num_channels}")
    check_finite(a, name)
    return a


def check_same_shape(a, b, name_a="first", name_b="second"):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{name_a} shape {np.shape(a)} != {name_b} shape {np.shape(b)}")


def check_nonnegative(a, name="array"):
    a = np.asarray(a)
    if np.any(a < 0):
        raise ValueError(f"{name} must be nonnegative")
    return a


def check_mask(m, name="mask"):
    m = check_features(m, name)
    if m.min() < 0.0 or m.max() > 1.0:
        raise ValueError(f"{name} entries must lie in [0, 1]")
    return m


def check_probability(p, name="probability"):
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {p}")
    return p


def check_speaker_embedding(v, dim=256, name="speaker embedding", atol=1e-5):
    """A speaker embedding is either unit L2 norm or exactly all-zero (dropped)."""
    v = np.asarray(v, dtype=float)
    if v.shape != (dim,):
        raise ShapeError(f"{name} must have shape ({dim},), got {v.shape}")
    check_finite(v, name)
    norm = float(np.linalg.norm(v))
    if norm != 0.0 and abs(norm - 1.0) > atol:
        raise ValueError(f"{name} must be unit norm or all-zero, got norm {norm:.6f}")
    return v
