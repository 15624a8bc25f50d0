"""UWB measurement equations: TWR range, ideal TDOA, and the TDOA Jacobian.

The TWR range is kept as a reference formula; the localization pipeline
itself runs on TDOA (range differences between anchor pairs).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Tolerance slack for the measurement-magnitude sanity bound: |d_raw| may
# exceed ||a_i - a_j|| by bias + noise + outlier shift, bounded by this.
MEASUREMENT_SLACK = 5.0


@dataclass(frozen=True)
class TdoaMeasurement:
    """One range-difference sample between anchors ``anchor_i`` and ``anchor_j``."""

    anchor_i: int
    anchor_j: int
    value: float
    timestamp: float

    def __post_init__(self):
        if self.anchor_i == self.anchor_j:
            raise ValueError("anchor pair must be distinct")


def twr_range(p, a) -> float:
    """Two-way-ranging distance between tag position ``p`` and anchor ``a``."""
    p = np.asarray(p, dtype=float)
    a = np.asarray(a, dtype=float)
    return float(np.linalg.norm(p - a))


def tdoa_ideal(p, a_i, a_j) -> float:
    """Noise-free range difference ||p - a_i|| - ||p - a_j||."""
    p = np.asarray(p, dtype=float)
    ri = np.linalg.norm(p - np.asarray(a_i, dtype=float))
    rj = np.linalg.norm(p - np.asarray(a_j, dtype=float))
    if ri == 0.0 or rj == 0.0:
        raise ValueError("singular geometry: tag coincides with an anchor")
    return float(ri - rj)


def tdoa_jacobian(p, a_i, a_j) -> np.ndarray:
    """Gradient of :func:`tdoa_ideal` with respect to the tag position.

    Returns the 1x3 row (p-a_i)/||p-a_i|| - (p-a_j)/||p-a_j||; its norm is
    at most 2 (difference of unit vectors).
    """
    p = np.asarray(p, dtype=float)
    di = p - np.asarray(a_i, dtype=float)
    dj = p - np.asarray(a_j, dtype=float)
    ri = np.linalg.norm(di)
    rj = np.linalg.norm(dj)
    if ri == 0.0 or rj == 0.0:
        raise ValueError("singular geometry: tag coincides with an anchor")
    return di / ri - dj / rj
