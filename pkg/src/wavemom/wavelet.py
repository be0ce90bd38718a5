"""Haar wavelet filters and boundary-free coefficient computation.

Level-j analysis uses the overlapping (non-decimated) Haar filter of
length ``L_j = 2**j`` with taps ``+2**-j`` on the first half and
``-2**-j`` on the second half.  Filtering is only evaluated where the
filter fully overlaps the data, so a series of length T yields exactly
``M_j = T - L_j + 1`` coefficients per level and no padding or circular
wrap is ever involved.  With this tap normalization the level-j variance
of white noise with variance s2 is ``s2 / 2**j``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

MAX_LEVEL = 30

# Smallest coefficient count at the coarsest level allowed by default.
# Variance estimation on fewer coefficients is too unstable to be useful.
MIN_COARSE_COUNT = 16


@dataclass(frozen=True)
class HaarLevel:
    """Level-j Haar filter: taps ``h`` and their running sums ``c``.

    ``c[l] = h[0] + ... + h[l]`` for ``l = 0 .. L_j - 2``.  Applying ``h``
    to a series equals applying ``c`` to its first differences, which is
    how nonstationary components (random walks, drifts) are handled in
    closed form elsewhere.
    """

    j: int
    h: np.ndarray
    c: np.ndarray

    @property
    def length(self) -> int:
        return 1 << self.j

    @property
    def scale(self) -> int:
        """Dyadic scale tau_j = 2**j."""
        return 1 << self.j


@dataclass(frozen=True)
class CoefficientSeries:
    """Level-j coefficients of one channel, full-overlap positions only."""

    j: int
    channel: int
    values: np.ndarray

    @property
    def count(self) -> int:
        return self.values.shape[0]


def build_filter(j: int) -> HaarLevel:
    """Return the level-j Haar filter and its differenced form."""
    if not 1 <= j <= MAX_LEVEL:
        raise ValueError(f"level must be in 1..{MAX_LEVEL}, got {j}")
    half = 1 << (j - 1)
    tap = 2.0 ** (-j)
    h = np.concatenate([np.full(half, tap), np.full(half, -tap)])
    c = np.cumsum(h)[:-1]
    return HaarLevel(j=j, h=h, c=c)


def _haar_coeffs(x: np.ndarray, j: int) -> np.ndarray:
    """Level-j coefficients of a 1-d array via partial sums, O(T).

    For sample index t (1-based, t = L_j .. T) the coefficient is
    ``2**-j * (S[t] - 2 S[t - L/2] + S[t - L])`` with S the prefix-sum
    sequence, which is the Haar two-block difference written without an
    explicit convolution.
    """
    L = 1 << j
    n = L >> 1
    T = x.shape[0]
    if T < L:
        raise DataError(f"series of length {T} is shorter than filter length {L}")
    s = np.empty(T + 1)
    s[0] = 0.0
    np.cumsum(x, out=s[1:])
    return (2.0 ** (-j)) * (s[L:] - 2.0 * s[n : T - n + 1] + s[: T - L + 1])


def decompose(x: np.ndarray, j: int, channel: int = 0) -> CoefficientSeries:
    """Compute the level-j coefficient series of one channel.

    Only full-overlap positions are produced: ``len(values) == T - 2**j + 1``.
    """
    if not 1 <= j <= MAX_LEVEL:
        raise ValueError(f"level must be in 1..{MAX_LEVEL}, got {j}")
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DataError(f"expected a 1-d series, got shape {x.shape}")
    return CoefficientSeries(j=j, channel=channel, values=_haar_coeffs(x, j))


def max_level(T: int) -> int:
    """Deepest usable decomposition level for a series of length T.

    Starts from ``floor(log2 T) - 1`` and backs off to the deepest level
    that still yields at least ``MIN_COARSE_COUNT`` coefficients.  When no
    level has that many (very short series), a single back-off step is
    taken instead, floored at level 1.
    """
    if T < 4:
        raise ValueError(f"need at least 4 samples, got {T}")
    j0 = int(np.log2(T)) - 1
    # Guard against floating log2 landing just below an exact power of two.
    while (1 << (j0 + 2)) <= T:
        j0 += 1
    j0 = min(j0, MAX_LEVEL)
    if T - (1 << j0) + 1 >= MIN_COARSE_COUNT:
        return j0
    for j in range(j0 - 1, 0, -1):
        if T - (1 << j) + 1 >= MIN_COARSE_COUNT:
            return j
    return max(1, j0 - 1)
