"""
Array helpers for saliency maps.
"""

import numpy as np


def channel_max(values: np.ndarray) -> np.ndarray:
    """Reduce [..., C, H, W] to [..., 1, H, W] by the maximum over channels."""
    return np.max(values, axis=-3, keepdims=True)


def normalize_per_slice(values: np.ndarray) -> np.ndarray:
    """
    Min-max normalize each [H, W] plane of a [..., H, W] array to [0, 1].

    Constant planes map to zeros.

    Args:
        values: Array with at least two dimensions

    Returns:
        float32 array of the same shape
    """
    values = np.asarray(values, dtype=np.float64)
    low = values.min(axis=(-2, -1), keepdims=True)
    high = values.max(axis=(-2, -1), keepdims=True)
    span = high - low
    safe = np.where(span > 0, span, 1.0)
    normalized = np.where(span > 0, (values - low) / safe, 0.0)
    return np.clip(normalized, 0.0, 1.0).astype(np.float32)


def upsample_nearest_to(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes to (height, width); works for non-integer ratios."""
    h, w = values.shape[-2:]
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return values[..., rows[:, None], cols[None, :]]


def volume_max(values: np.ndarray) -> np.ndarray:
    """Reduce a [S, 1, H, W] (or [S, H, W]) map to [H, W] by the maximum over slices."""
    values = np.asarray(values)
    if values.ndim == 4:
        values = values[:, 0]
    if values.ndim == 3:
        return values.max(axis=0)
    return values


def to_pgm(values: np.ndarray) -> bytes:
    """Encode a 2-D map as binary PGM, scaled so its maximum is 255."""
    plane = np.asarray(values, dtype=np.float64)
    peak = plane.max() if plane.size else 0.0
    scaled = np.zeros_like(plane) if peak <= 0 else np.clip(plane / peak, 0.0, 1.0) * 255.0
    pixels = np.round(scaled).astype(np.uint8)
    height, width = pixels.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()
