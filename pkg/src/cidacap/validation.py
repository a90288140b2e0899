"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """Return ``X`` as a ``(n, H, W, 3)`` uint8 array, or raise ``ValueError``."""
    X = np.asarray(X)
    if X.ndim == 3 and X.shape[-1] == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images shaped (n, H, W, 3), got {X.shape}")
    if len(X) == 0:
        raise ValueError("no images given")
    if image_size is not None and X.shape[1:3] != (image_size, image_size):
        raise ValueError(f"images must be {image_size}x{image_size}, got {X.shape[1]}x{X.shape[2]}")
    if X.dtype != np.uint8:
        if not np.isfinite(X).all():
            raise ValueError("images contain non-finite values")
        if np.issubdtype(X.dtype, np.floating) and X.max() <= 1.0 + 1e-6:
            X = X * 255.0
        X = np.clip(np.rint(X), 0, 255).astype(np.uint8)
    return X


def check_regions(R, d_in: int | None = None) -> np.ndarray:
    """Return region features as float32 ``(n, N, d)``."""
    R = np.asarray(R, dtype=np.float32)
    if R.ndim == 2:
        R = R[None]
    if R.ndim != 3 or R.shape[0] == 0 or R.shape[1] == 0:
        raise ValueError(f"expected region features shaped (n, N, d) with n, N >= 1, got {R.shape}")
    if d_in is not None and R.shape[2] != d_in:
        raise ValueError(f"region feature width {R.shape[2]} does not match d_in={d_in}")
    if not np.isfinite(R).all():
        raise ValueError("region features contain non-finite values")
    return R


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integer class ids")
        y = y.astype(np.int64)
    return y


def check_captions(captions, n: int) -> list[list[str]]:
    if len(captions) != n:
        raise ValueError(f"expected {n} captions, got {len(captions)}")
    out = []
    for c in captions:
        toks = c.split() if isinstance(c, str) else list(c)
        if not toks:
            raise ValueError("empty caption")
        out.append([t.lower() for t in toks])
    return out
