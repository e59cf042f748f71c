"""Input checks shared by the estimator facade."""
from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError

from .errors import BadChannelCount, EmptyImage, EmptyQuestion, ShapeMismatch
from .tokenizer import normalize_tokens


def check_images(X) -> list[np.ndarray]:
    """Accept a ``(n, H, W, 3)`` array or a sequence of ``(H, W, 3)`` arrays."""
    if isinstance(X, np.ndarray) and X.ndim == 4:
        images = list(X)
    elif isinstance(X, np.ndarray) and X.ndim == 3 and X.shape[-1] == 3:
        raise ShapeMismatch("got a single image; wrap it in a list")
    else:
        images = [np.asarray(x) for x in X]
    if not images:
        raise EmptyImage("no images given")
    for i, img in enumerate(images):
        if img.ndim != 3 or img.shape[0] == 0 or img.shape[1] == 0:
            raise EmptyImage(f"image {i} has shape {img.shape}, expected (H, W, 3)")
        if img.shape[2] != 3:
            raise BadChannelCount(f"image {i} has {img.shape[2]} channels, expected 3")
        if not np.all(np.isfinite(img)):
            raise ValueError(f"image {i} holds non-finite pixels")
    return images


def check_texts(y, n: int, name: str = "y") -> list[str]:
    texts = [y] * n if isinstance(y, str) else list(y)
    if len(texts) != n:
        raise ShapeMismatch(f"{name} has {len(texts)} entries for {n} images")
    for i, t in enumerate(texts):
        if not isinstance(t, str) or not normalize_tokens(t):
            raise EmptyQuestion(f"{name}[{i}] must be a non-empty string")
    return texts


def check_is_fitted(est, attr: str) -> None:
    if getattr(est, attr, None) is None:
        raise NotFittedError(f"{type(est).__name__} is not fitted; call fit() first")
