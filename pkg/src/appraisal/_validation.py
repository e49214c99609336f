"""Small input-validation helpers shared by the estimators."""

import numpy as np

from .exceptions import DataError


def as_float_matrix(X, name="X", min_rows=1):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise DataError(f"{name} must be 2-dimensional, got shape {X.shape}")
    if X.shape[0] < min_rows:
        raise DataError(f"{name} needs at least {min_rows} rows, got {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        bad = np.argwhere(~np.isfinite(X))[0]
        raise DataError(f"{name} contains a non-finite value at row {bad[0]}, column {bad[1]}")
    return X


def as_float_vector(y, name="y", min_len=1):
    y = np.asarray(y, dtype=float)
    if y.ndim == 2 and 1 in y.shape:
        y = y.ravel()
    if y.ndim != 1:
        raise DataError(f"{name} must be 1-dimensional, got shape {y.shape}")
    if y.shape[0] < min_len:
        raise DataError(f"{name} needs at least {min_len} values, got {y.shape[0]}")
    if not np.all(np.isfinite(y)):
        raise DataError(f"{name} contains a non-finite value at index {int(np.argmax(~np.isfinite(y)))}")
    return y


def check_same_length(a, b, names=("y_true", "y_pred")):
    if len(a) != len(b):
        raise DataError(f"length mismatch: {names[0]} has {len(a)}, {names[1]} has {len(b)}")


def as_xy(points, name="points"):
    """Coerce to an (n, 2) float array of planar or lon/lat coordinates."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1 and pts.shape[0] == 2:
        pts = pts.reshape(1, 2)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DataError(f"{name} must have shape (n, 2), got {pts.shape}")
    return pts


def feature_names_for(X, feature_names=None):
    if feature_names is not None:
        names = [str(n) for n in feature_names]
    elif hasattr(X, "columns"):
        names = [str(c) for c in X.columns]
    else:
        names = [f"x{j}" for j in range(np.shape(X)[1])]
    if len(names) != np.shape(X)[1]:
        raise DataError(f"{len(names)} feature names for {np.shape(X)[1]} columns")
    return names


def stream_rng(seed, *key):
    """Generator for the stream identified by ``key`` under a master seed.

    Streams depend only on (seed, key), never on scheduling order, so
    results are identical for any worker count.
    """
    key = tuple(int(k) for k in key)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
