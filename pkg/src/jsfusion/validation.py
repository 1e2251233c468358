"""Input validation for the estimator layer.

The estimators take ragged inputs (variable-length frame matrices paired
with token lists), so the usual rectangular-array checks do not apply.
These helpers normalize and validate the pair structures and raise
InputError with the offending item's position.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError


def check_frame_matrix(frames, name: str = "frames") -> np.ndarray:
    """Validate one video's features: a nonempty, finite (N, d) float matrix."""
    arr = np.asarray(frames, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InputError(f"{name} must be a nonempty 2-D matrix, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise InputError(f"{name} contains non-finite values")
    return arr


def check_token_list(tokens, name: str = "tokens") -> list:
    if isinstance(tokens, str):
        raise InputError(f"{name} must be a list of words, not a single string; "
                         f"split it first")
    out = list(tokens)
    if not out:
        raise InputError(f"{name} must not be empty")
    for i, tok in enumerate(out):
        if not isinstance(tok, str) or not tok:
            raise InputError(f"{name}[{i}] must be a nonempty string, got {tok!r}")
    return out


def check_pair_list(X) -> list[tuple[np.ndarray, list]]:
    """Validate a corpus of (frame_matrix, token_list) pairs.

    All frame matrices must share one feature width.
    """
    if not hasattr(X, "__len__") or len(X) == 0:
        raise InputError("X must be a nonempty sequence of (frames, tokens) pairs")
    pairs = []
    dim = None
    for i, item in enumerate(X):
        try:
            frames, tokens = item
        except (TypeError, ValueError):
            raise InputError(f"X[{i}] must be a (frames, tokens) pair") from None
        frames = check_frame_matrix(frames, name=f"X[{i}] frames")
        tokens = check_token_list(tokens, name=f"X[{i}] tokens")
        if dim is None:
            dim = frames.shape[1]
        elif frames.shape[1] != dim:
            raise InputError(f"X[{i}] has feature width {frames.shape[1]}, "
                             f"earlier items have {dim}")
        pairs.append((frames, tokens))
    return pairs


def check_choice_list(X) -> list[tuple[np.ndarray, list[list]]]:
    """Validate (frame_matrix, five_candidate_token_lists) items."""
    if not hasattr(X, "__len__") or len(X) == 0:
        raise InputError("X must be a nonempty sequence of (frames, choices) items")
    items = []
    dim = None
    for i, item in enumerate(X):
        try:
            frames, choices = item
        except (TypeError, ValueError):
            raise InputError(f"X[{i}] must be a (frames, choices) pair") from None
        frames = check_frame_matrix(frames, name=f"X[{i}] frames")
        choices = list(choices)
        if len(choices) != 5:
            raise InputError(f"X[{i}] has {len(choices)} candidate sentences, expected 5")
        choices = [check_token_list(c, name=f"X[{i}] choice {j}")
                   for j, c in enumerate(choices)]
        if dim is None:
            dim = frames.shape[1]
        elif frames.shape[1] != dim:
            raise InputError(f"X[{i}] has feature width {frames.shape[1]}, "
                             f"earlier items have {dim}")
        items.append((frames, choices))
    return items


def check_answer_indices(y, n_items: int) -> np.ndarray:
    """Validate multiple-choice answers: n integer labels in [0, 5)."""
    if y is None:
        raise InputError("y (answer indices) is required")
    arr = np.asarray(y)
    if arr.shape != (n_items,):
        raise InputError(f"y must have shape ({n_items},), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == arr.astype(np.int64)):
            raise InputError("y must contain integer answer indices")
        arr = arr.astype(np.int64)
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 4:
        raise InputError("answer indices must lie in [0, 5)")
    return arr.astype(np.int64)
