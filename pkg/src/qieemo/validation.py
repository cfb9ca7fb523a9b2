"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .errors import InputError
from .fusion import NUM_CLASSES


def check_spectrogram_list(X, bins: int = 40) -> list[np.ndarray]:
    """Coerce X into a list of float64 [T, bins] arrays.

    Accepts a list/tuple of 2-d arrays (variable T) or a single 3-d array.
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = list(X)
    if not isinstance(X, (list, tuple)) or len(X) == 0:
        raise InputError("X must be a non-empty sequence of [frames, bins] arrays")
    out = []
    for i, item in enumerate(X):
        arr = np.asarray(item, dtype=np.float64)
        if arr.ndim != 2:
            raise InputError(f"X[{i}] must be 2-d, got shape {arr.shape}")
        if arr.shape[1] != bins:
            raise InputError(f"X[{i}] has {arr.shape[1]} bins, expected {bins}")
        if arr.shape[0] < 4:
            raise InputError(f"X[{i}] has {arr.shape[0]} frames; need at least 4")
        if not np.isfinite(arr).all():
            raise InputError(f"X[{i}] contains non-finite values")
        out.append(arr)
    return out


def check_emotion_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_samples,):
        raise InputError(f"y must have shape ({n_samples},), got {y.shape}")
    y = y.astype(np.int64)
    if ((y < 0) | (y >= NUM_CLASSES)).any():
        raise InputError(f"emotion labels must lie in [0, {NUM_CLASSES})")
    return y


def check_symbol_sequences(y, spectrograms: list[np.ndarray],
                           alphabet_size: int) -> list[np.ndarray]:
    if len(y) != len(spectrograms):
        raise InputError(f"{len(y)} symbol sequences vs {len(spectrograms)} spectrograms")
    out = []
    for i, (seq, spec) in enumerate(zip(y, spectrograms)):
        arr = np.asarray(seq, dtype=np.int64)
        if arr.shape != (spec.shape[0],):
            raise InputError(
                f"y[{i}] must have one symbol per frame ({spec.shape[0]}), "
                f"got shape {arr.shape}")
        if ((arr < 0) | (arr >= alphabet_size)).any():
            raise InputError(f"y[{i}] has symbols outside [0, {alphabet_size})")
        out.append(arr)
    return out
