"""Parametric corruption operators for images and point clouds.

All operators are deterministic in (inputs, seed), severity 0 is the
identity, and images are clamped back to [0, 1]. Geometry ground truth is
never touched: image corruption returns a new image only, and LiDAR
corruption reports surviving indices so labels can be subset by the caller.
"""

import numpy as np

from .errors import ConfigError
from .seeding import rng_for

IMAGE_KINDS = ("night", "rain", "fog", "gaussian", "motion_blur")
LIDAR_KINDS = ("gaussian_noise", "density_decrease")


def _motion_blur(image: np.ndarray, width: int) -> np.ndarray:
    """Horizontal box filter with zero padding outside the image."""
    pad = width // 2
    padded = np.pad(image, ((0, 0), (pad, pad), (0, 0)))
    csum = np.cumsum(padded, axis=1)
    csum = np.pad(csum, ((0, 0), (1, 0), (0, 0)))
    return (csum[:, width:, :] - csum[:, :-width, :]) / width


def _rain_streaks(shape, severity: int, rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    overlay = np.zeros((h, w), dtype=np.float64)
    n_streaks = 6 * severity
    for _ in range(n_streaks):
        r0 = rng.uniform(0, h)
        c0 = rng.uniform(0, w)
        length = rng.uniform(h / 6.0, h / 3.0)
        slant = rng.uniform(-0.15, 0.15)
        brightness = rng.uniform(0.25, 0.5)
        steps = max(int(length), 1)
        rr = (r0 + np.arange(steps)).astype(np.int64)
        cc = np.round(c0 + slant * np.arange(steps)).astype(np.int64)
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        overlay[rr[ok], cc[ok]] += brightness
    return overlay


def corrupt_image(image: np.ndarray, kind: str, severity: int, seed: int,
                  depth: np.ndarray | None = None,
                  depth_valid: np.ndarray | None = None,
                  depth_scale: float = 10.0) -> np.ndarray:
    """Apply one corruption kind at integer severity 0..5.

    fog uses per-pixel depth where provided and valid; elsewhere it falls
    back to the depthless weight 1 - exp(-0.3 * severity).
    """
    if kind not in IMAGE_KINDS:
        raise ConfigError(f"unknown image corruption kind {kind!r}")
    if not (isinstance(severity, (int, np.integer)) and 0 <= severity <= 5):
        raise ConfigError(f"severity must be an integer in 0..5, got {severity!r}")
    image = np.asarray(image, dtype=np.float32)
    if severity == 0:
        return image.copy()

    rng = rng_for(seed, "corrupt_image", kind, severity)
    s = float(severity)
    x = image.astype(np.float64)

    if kind == "night":
        x = np.power(x, 1.0 + 0.6 * s)
        x = x / (1.0 + 0.5 * s)
        x = x + rng.normal(0.0, 0.02 * s, size=x.shape)
    elif kind == "rain":
        overlay = _rain_streaks(x.shape[:2], severity, rng)
        x = x + overlay[:, :, None]
        mean = x.mean()
        x = mean + (x - mean) / (1.0 + 0.15 * s)
    elif kind == "fog":
        if depth is not None:
            d = np.asarray(depth, dtype=np.float64)
            valid = np.asarray(depth_valid) if depth_valid is not None else d > 0
            weight = np.where(valid, 1.0 - np.exp(-0.3 * s * d / depth_scale),
                              1.0 - np.exp(-0.3 * s))
        else:
            weight = np.full(x.shape[:2], 1.0 - np.exp(-0.3 * s))
        x = (1.0 - weight[:, :, None]) * x + weight[:, :, None] * 0.7
    elif kind == "gaussian":
        x = x + rng.normal(0.0, 0.04 * s, size=x.shape)
    elif kind == "motion_blur":
        x = _motion_blur(x, 2 * severity + 1)

    return np.clip(x, 0.0, 1.0).astype(np.float32)


def corrupt_lidar_with_indices(points: np.ndarray, kind: str, severity: int, seed: int):
    """Corrupt a point cloud; returns (points, kept_indices)."""
    if kind not in LIDAR_KINDS:
        raise ConfigError(f"unknown LiDAR corruption kind {kind!r}")
    if not (isinstance(severity, (int, np.integer)) and 0 <= severity <= 2):
        raise ConfigError(f"severity must be an integer in 0..2, got {severity!r}")
    points = np.asarray(points, dtype=np.float32)
    all_idx = np.arange(len(points))
    if severity == 0:
        return points.copy(), all_idx

    rng = rng_for(seed, "corrupt_lidar", kind, severity)
    if kind == "gaussian_noise":
        noisy = points.astype(np.float64) + rng.normal(0.0, 0.02 * severity, size=points.shape)
        return noisy.astype(np.float32), all_idx
    keep = int(round(len(points) * (1.0 - 0.25 * severity)))
    kept = np.sort(rng.choice(len(points), size=keep, replace=False))
    return points[kept].copy(), kept


def corrupt_lidar(points: np.ndarray, kind: str, severity: int, seed: int) -> np.ndarray:
    out, _ = corrupt_lidar_with_indices(points, kind, severity, seed)
    return out
