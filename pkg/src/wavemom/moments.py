"""Empirical wavelet cross-covariance moments and their sampling covariance.

The moment vector stacks lag-0 cross-covariances of level-j wavelet
coefficients over channel pairs (i, i') with i <= i' and levels j = 1..J.
Pairs are ordered lexicographically ((1,1), (1,2), ..., (I,I)); levels
ascend within each pair, so flat positions are a bijection with (i, i', j).
Channels are labeled 1..I in all public indices.

Covariances are uncentered second moments, so deterministic ramp components
contribute to them; this is deliberate and matched by the model side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import DataError, NumericalError, SpecValidationError
from .wavelet import CoefficientSeries, max_level
from .wavelet import _haar_coeffs


def pair_order(I: int) -> list[tuple[int, int]]:
    """Canonical channel-pair order: (1,1), (1,2), ..., (1,I), (2,2), ..."""
    return [(i, ip) for i in range(1, I + 1) for ip in range(i, I + 1)]


@dataclass(frozen=True)
class MomentIndex:
    """One moment coordinate: channels i <= ip (1-based) at level j."""

    i: int
    ip: int
    j: int

    @property
    def tau(self) -> int:
        return 1 << self.j


def canonical_indices(I: int, J: int) -> tuple[MomentIndex, ...]:
    return tuple(
        MomentIndex(i, ip, j) for (i, ip) in pair_order(I) for j in range(1, J + 1)
    )


def moment_dim(I: int, J: int) -> int:
    return J * I * (I + 1) // 2


def moment_position(I: int, J: int, i: int, ip: int, j: int) -> int:
    """Flat position of (i, ip, j) in the canonical layout."""
    if not (1 <= i <= ip <= I and 1 <= j <= J):
        raise KeyError(f"moment index ({i},{ip},{j}) out of range for I={I}, J={J}")
    pair = (i - 1) * (2 * I - i + 2) // 2 + (ip - i)
    return pair * J + (j - 1)


@dataclass(frozen=True)
class MomentVector:
    """Stacked empirical (or theoretical) moments in canonical order."""

    values: np.ndarray
    I: int
    J: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (moment_dim(self.I, self.J),):
            raise SpecValidationError(
                f"moment vector has {v.shape} values, expected {moment_dim(self.I, self.J)}"
            )
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def indices(self) -> tuple[MomentIndex, ...]:
        return canonical_indices(self.I, self.J)

    def get(self, i: int, ip: int, j: int) -> float:
        if ip < i:
            i, ip = ip, i
        return float(self.values[moment_position(self.I, self.J, i, ip, j)])


@dataclass(frozen=True)
class MomentCovariance:
    """Finite-sample covariance estimate of the moment vector.

    ``matrix`` is Cov(nu_hat): the Bartlett long-run covariance of the
    coefficient-product series divided by the common-support length.
    ``diagonal`` marks the cheap variant that only estimates variances.
    """

    matrix: np.ndarray
    bandwidth: int
    diagonal: bool = False

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.matrix), 0.0, None))


def wccv(w_i: CoefficientSeries, w_ip: CoefficientSeries) -> float:
    """Uncentered lag-0 cross-covariance of two aligned coefficient series."""
    if w_i.j != w_ip.j:
        raise DataError(f"level mismatch: {w_i.j} vs {w_ip.j}")
    if w_i.count != w_ip.count:
        raise DataError(f"length mismatch: {w_i.count} vs {w_ip.count}")
    return float(w_i.values @ w_ip.values / w_i.count)


def _as_signal(x) -> np.ndarray:
    """Coerce to a channels-by-samples float array of shape (I, T)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DataError(f"expected (channels, samples) data, got shape {x.shape}")
    if x.shape[1] < x.shape[0]:
        raise DataError(
            f"shape {x.shape} has more channels than samples; expected (I, T) layout"
        )
    if not np.isfinite(x).all():
        raise DataError("input contains NaN or infinite values")
    return x


def _resolve_levels(T: int, J: int | None) -> int:
    jmax = max_level(T)
    if J is None:
        return jmax
    J = int(J)
    if J < 1:
        raise SpecValidationError(f"need at least one level, got J={J}")
    if J > jmax:
        raise SpecValidationError(
            f"J={J} exceeds the deepest usable level {jmax} for T={T}"
        )
    return J


def coefficient_stack(x, J: int | None = None) -> list[list[np.ndarray]]:
    """Level-1..J coefficients for every channel; stack[c][j-1] is channel c+1."""
    x = _as_signal(x)
    J = _resolve_levels(x.shape[1], J)
    return [[_haar_coeffs(x[c], j) for j in range(1, J + 1)] for c in range(x.shape[0])]


def moments_from_coefficients(W: list[list[np.ndarray]]) -> MomentVector:
    I = len(W)
    J = len(W[0])
    vals = np.empty(moment_dim(I, J))
    pos = 0
    for (i, ip) in pair_order(I):
        for j in range(J):
            a = W[i - 1][j]
            b = W[ip - 1][j]
            vals[pos] = a @ b / a.size
            pos += 1
    return MomentVector(values=vals, I=I, J=J)


def moment_vector(x, J: int | None = None) -> MomentVector:
    """Empirical moment vector of a multichannel signal at levels 1..J.

    Each entry averages coefficient products over that level's full overlap
    support (all T - 2**j + 1 positions).
    """
    return moments_from_coefficients(coefficient_stack(x, J))


def default_bandwidth(T: int) -> int:
    return int(np.floor(T ** (1.0 / 3.0)))


def covariance_from_coefficients(
    W: list[list[np.ndarray]],
    T: int,
    bandwidth: int | None = None,
    mode: str = "full",
) -> MomentCovariance:
    """HAC covariance of the moment vector from precomputed coefficients.

    The product series of all moment entries are aligned on the common
    support of the coarsest level (the last M_J positions of each series),
    demeaned, and passed through a Bartlett-kernel long-run variance
    computed as an average of sliding-window sums; that form is positive
    semidefinite by construction.  ``mode="diag"`` estimates only the
    per-entry variances, which is much cheaper for wide moment vectors.
    """
    if mode not in ("full", "diag"):
        raise SpecValidationError(f"unknown covariance mode {mode!r}")
    I = len(W)
    J = len(W[0])
    N = W[0][J - 1].shape[0]
    b = default_bandwidth(T) if bandwidth is None else int(bandwidth)
    if b < 0:
        raise SpecValidationError(f"bandwidth must be >= 0, got {b}")
    if N < 2 * b:
        raise SpecValidationError(
            f"common support ({N} coefficients) is shorter than twice the "
            f"bandwidth ({b}); reduce the level count or the bandwidth"
        )
    dim = moment_dim(I, J)
    U = np.empty((N, dim))
    pos = 0
    for (i, ip) in pair_order(I):
        for j in range(J):
            a = W[i - 1][j]
            c = W[ip - 1][j]
            U[:, pos] = a[a.shape[0] - N :] * c[c.shape[0] - N :]
            pos += 1
    U -= U.mean(axis=0)

    # Bartlett long-run covariance as an average of window-sum outer
    # products: windows of length b+1 slide over the (zero-padded) series,
    # which reproduces the triangular lag weights exactly.
    P = np.vstack([np.zeros((1, dim)), np.cumsum(U, axis=0)])
    s = np.arange(1 - b, N + 1)
    lo = np.clip(s - 1, 0, N)
    hi = np.clip(s + b, 0, N)
    V = P[hi] - P[lo]
    denom = float(N * (b + 1))

    if mode == "diag":
        d = np.einsum("sd,sd->d", V, V) / denom
        return MomentCovariance(matrix=np.diag(d / N), bandwidth=b, diagonal=True)

    lrv = V.T @ V / denom
    lrv = 0.5 * (lrv + lrv.T)
    evals, evecs = np.linalg.eigh(lrv)
    if evals[0] < 0.0:
        lrv = (evecs * np.clip(evals, 0.0, None)) @ evecs.T
    ridge = 1e-12 * np.trace(lrv) / dim
    lrv[np.diag_indices_from(lrv)] += ridge
    return MomentCovariance(matrix=lrv / N, bandwidth=b, diagonal=False)


def moment_covariance(
    x, J: int | None = None, bandwidth: int | None = None, mode: str = "full"
) -> MomentCovariance:
    """HAC covariance of moment_vector(x, J); see covariance_from_coefficients."""
    x = _as_signal(x)
    J = _resolve_levels(x.shape[1], J)
    W = [[_haar_coeffs(x[c], j) for j in range(1, J + 1)] for c in range(x.shape[0])]
    return covariance_from_coefficients(W, x.shape[1], bandwidth=bandwidth, mode=mode)


def confidence_intervals(
    nu: MomentVector, cov: MomentCovariance, alpha: float = 0.05
) -> tuple[np.ndarray, np.ndarray]:
    """Normal-theory intervals nu +- z_{1-alpha/2} * se, elementwise.

    Lower bounds of same-channel (variance) entries are floored at zero.
    """
    if not 0.0 < alpha < 1.0:
        raise SpecValidationError(f"alpha must be in (0, 1), got {alpha}")
    if cov.dim != nu.dim:
        raise SpecValidationError(
            f"covariance dim {cov.dim} does not match moment dim {nu.dim}"
        )
    z = norm.ppf(1.0 - alpha / 2.0)
    se = cov.standard_errors()
    lo = nu.values - z * se
    hi = nu.values + z * se
    diag_mask = np.array([idx.i == idx.ip for idx in nu.indices])
    lo[diag_mask] = np.clip(lo[diag_mask], 0.0, None)
    return lo, hi
