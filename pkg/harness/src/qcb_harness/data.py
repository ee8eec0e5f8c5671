"""Desk-scale image data: the bundled 8x8 digits upscaled to 28x28, plus the
patch trigger used to poison them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import zoom
from sklearn.datasets import load_digits
from sklearn.model_selection import train_test_split


@dataclass
class TriggerSpec:
    size: int = 3
    value: float = 1.0
    # lower-right corner offset (rows, cols measured from the bottom-right)
    margin: int = 1


def load_upscaled_digits(seed: int = 0):
    """(x_train, y_train, x_test, y_test) with images (N, 1, 28, 28) in [0, 1]."""
    digits = load_digits()
    images = digits.images.astype(np.float32) / 16.0  # (N, 8, 8)
    scaled = zoom(images, (1, 3.5, 3.5), order=1).astype(np.float32)  # (N, 28, 28)
    scaled = np.clip(scaled, 0.0, 1.0)[:, None, :, :]
    x_tr, x_te, y_tr, y_te = train_test_split(
        scaled, digits.target.astype(np.int64), test_size=0.2, random_state=seed,
        stratify=digits.target,
    )
    return x_tr, y_tr, x_te, y_te


def apply_trigger(images: np.ndarray, spec: TriggerSpec = TriggerSpec()) -> np.ndarray:
    """Stamp a white patch on the lower-right corner of each image."""
    out = images.copy()
    h, w = out.shape[-2:]
    r0 = h - spec.margin - spec.size
    c0 = w - spec.margin - spec.size
    if r0 < 0 or c0 < 0:
        raise ValueError("trigger does not fit inside the image")
    out[..., r0 : r0 + spec.size, c0 : c0 + spec.size] = spec.value
    return out
