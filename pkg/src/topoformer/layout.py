"""Fixed layout of the flat model input vector.

The 180-wide input holds the 80 known elevations (back of beach down to
MLWN) followed by all 100 chainages; the 20 elevations from MLWN down to
MLWS are the regression target.  Only this module knows the ordering.
"""

import numpy as np

from .errors import DimensionError

SEQ_LEN = 100
KNOWN_LEN = 80
TARGET_LEN = 20
INPUT_WIDTH = KNOWN_LEN + SEQ_LEN


def pack_input(known_elevation: np.ndarray, chainage: np.ndarray) -> np.ndarray:
    known_elevation = np.asarray(known_elevation, dtype=np.float64)
    chainage = np.asarray(chainage, dtype=np.float64)
    if known_elevation.shape[-1] != KNOWN_LEN or chainage.shape[-1] != SEQ_LEN:
        raise DimensionError(
            f"expected {KNOWN_LEN} elevations and {SEQ_LEN} chainages, "
            f"got {known_elevation.shape} and {chainage.shape}")
    return np.concatenate([known_elevation, chainage], axis=-1)


def unpack_input(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`pack_input`; returns views (elevation[..., 80], chainage[..., 100])."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != INPUT_WIDTH:
        raise DimensionError(f"input width must be {INPUT_WIDTH}, got shape {x.shape}")
    return x[..., :KNOWN_LEN], x[..., KNOWN_LEN:]
