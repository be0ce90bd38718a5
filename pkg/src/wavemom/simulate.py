"""Trajectory sampling for latent stochastic-error models.

Every block kind is sampled exactly (no burn-in): white noise and random
walk from correlated normal draws, quantization noise as a first
difference of an i.i.d. sequence, drift as a deterministic ramp, and
autoregressions from their stationary law at t = 0. Replicates use
counter-based RNG streams, so replicate r is reproducible in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator, Optional, Union

import numpy as np
from scipy.signal import lfilter

from .errors import NumericalError, SpecValidationError
from .models import ModelSpec, ParamVector, as_param_vector, ensure_valid

__all__ = ["SimConfig", "simulate", "simulate_batch"]


@dataclass(frozen=True)
class SimConfig:
    """Everything that determines one simulated trajectory.

    theta may be a ParamVector, a flat value array aligned with the
    spec's parameter layout, or None to use the values embedded in the
    spec's blocks. Identical (seed, replicate_id) pairs reproduce the
    output bit for bit.
    """

    spec: ModelSpec
    T: int
    seed: int
    theta: Optional[Union[ParamVector, np.ndarray]] = None
    replicate_id: int = 0


def _stream(seed: int, replicate_id: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(replicate_id,))
    return np.random.Generator(np.random.Philox(ss))


def _chol_psd(m: np.ndarray) -> np.ndarray:
    """Cholesky-like factor L with L Lt = m, tolerating semidefinite m."""
    m = np.asarray(m, dtype=float)
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(0.5 * (m + m.T))
        if w.min() < -1e-10 * max(w.max(), 1.0):
            raise NumericalError(
                "covariance matrix is not positive semidefinite"
            ) from None
        return v * np.sqrt(np.clip(w, 0.0, None))


def simulate(cfg: SimConfig) -> np.ndarray:
    """Sample one trajectory; returns an (I, T) array, channels in rows.

    Blocks are drawn in spec order and summed onto their channels.
    """
    spec = cfg.spec
    T = int(cfg.T)
    if T < 4:
        raise SpecValidationError(f"T={T} is too short; need T >= 4")
    ensure_valid(spec)
    if cfg.theta is None:
        theta = ParamVector.from_spec(spec)
    else:
        theta = as_param_vector(spec, cfg.theta)
    rng = _stream(cfg.seed, cfg.replicate_id)
    X = np.zeros((spec.I, T))
    for k, blk in enumerate(spec.blocks):
        vals = theta.block_values(k)
        rows = np.asarray(blk.channels) - 1
        n = blk.n
        if blk.kind == "dr":
            ramp = np.arange(1, T + 1, dtype=float)
            X[rows] += vals["omega"][:, None] * ramp[None, :]
            continue
        if blk.kind == "qn":
            e = rng.standard_normal((n, T + 1)) * np.sqrt(vals["q2"])[:, None]
            X[rows] += np.diff(e, axis=1)
            continue
        L = _chol_psd(vals["cov"])
        if blk.kind == "wn":
            X[rows] += L @ rng.standard_normal((n, T))
        elif blk.kind == "rw":
            X[rows] += np.cumsum(L @ rng.standard_normal((n, T)), axis=1)
        else:  # ar1, exact stationary start
            phi = vals["phi"]
            v0 = vals["cov"] / (1.0 - np.outer(phi, phi))
            x0 = _chol_psd(v0) @ rng.standard_normal(n)
            eps = L @ rng.standard_normal((n, T))
            for a in range(n):
                xa, _ = lfilter(
                    [1.0], [1.0, -phi[a]], eps[a], zi=np.array([phi[a] * x0[a]])
                )
                X[rows[a]] += xa
    return X


def simulate_batch(cfg: SimConfig, R: int) -> Iterator[np.ndarray]:
    """Yield R independent replicates; replicate r uses stream (seed, r).

    Streams are derived per replicate, so consuming out of order (or
    regenerating a single replicate later) gives identical values.
    """
    if R < 1:
        raise SpecValidationError(f"replicate count must be >= 1, got {R}")
    for r in range(R):
        yield simulate(replace(cfg, replicate_id=cfg.replicate_id + r))
