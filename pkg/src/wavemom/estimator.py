"""Moment-matching estimation and the cross-dependence bootstrap test.

Pipeline: empirical wavelet moments, per-channel starting fits, a
weighted quadratic objective minimized in an unconstrained
reparametrization (closed-form weighted least squares when every
parameter enters the moments linearly), and a sandwich covariance for
the estimates. The dependence test compares the objective attained with
and without cross-channel parameters and calibrates the gap with a
parametric bootstrap under the no-dependence fit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import lsq_linear, minimize, nnls

from .errors import NumericalError, SpecValidationError
from .models import (
    ModelSpec,
    ParamVector,
    as_param_vector,
    canonicalize_ar1,
    ensure_valid,
    layout,
    moment_model,
    n_params,
    restrict_to_channel,
)
from .moments import (
    MomentCovariance,
    MomentVector,
    coefficient_stack,
    covariance_from_coefficients,
    moment_position,
    moments_from_coefficients,
)
from .simulate import SimConfig, simulate

__all__ = [
    "Objective",
    "FitResult",
    "DepTestResult",
    "univariate_fit",
    "fit",
    "fit_from_moments",
    "dependence_test",
]

_RESTARTS = 3
_NM_CAP_PER_PARAM = 5000
_PHI_GRID = (-0.9, -0.5, -0.1, 0.1, 0.5, 0.9, 0.99, 0.999, 0.9999)
_PHI_GRID_COARSE = (0.1, 0.9, 0.999)


# --- objective ---


@dataclass(frozen=True)
class Objective:
    """Weighted quadratic distance between empirical and implied moments."""

    nu_hat: MomentVector
    omega: np.ndarray
    spec: ModelSpec

    def __post_init__(self):
        w = np.array(self.omega, dtype=float)
        d = self.nu_hat.dim
        if w.shape != (d, d):
            raise SpecValidationError(
                f"weighting matrix shape {w.shape} does not match moment "
                f"dimension {d}"
            )
        if not np.allclose(w, w.T, rtol=0, atol=1e-10 * max(1.0, np.abs(w).max())):
            raise SpecValidationError("weighting matrix must be symmetric")
        try:
            np.linalg.cholesky(w)
        except np.linalg.LinAlgError:
            raise SpecValidationError(
                "weighting matrix must be positive definite"
            ) from None
        object.__setattr__(self, "omega", 0.5 * (w + w.T))
        wd = np.diag(np.diag(w))
        object.__setattr__(
            self, "_wdiag", np.diag(w).copy() if not np.any(w - wd) else None
        )
        if self.spec.I != self.nu_hat.I:
            raise SpecValidationError(
                f"spec has {self.spec.I} channels but the moment vector "
                f"covers {self.nu_hat.I}"
            )

    @property
    def model(self):
        return moment_model(self.spec, self.nu_hat.J)

    def residual(self, values) -> np.ndarray:
        return self.nu_hat.values - self.model.vector(np.asarray(values, dtype=float))

    def value(self, values) -> float:
        r = self.residual(values)
        wd = self._wdiag
        if wd is not None:
            return float(r @ (wd * r))
        return float(r @ self.omega @ r)

    def value_unconstrained(self, u) -> float:
        return self.value(ParamVector.from_unconstrained(self.spec, u).values)


# --- results ---


@dataclass(frozen=True)
class FitResult:
    """Point estimates, their covariance, and optimizer diagnostics."""

    theta: ParamVector
    objective_value: float
    implied: MomentVector
    nu_hat: MomentVector
    se: Optional[np.ndarray]
    xi: Optional[np.ndarray]
    diagnostics: dict

    @property
    def converged(self) -> bool:
        return bool(self.diagnostics.get("converged", False))


@dataclass(frozen=True)
class DepTestResult:
    """Objective-gap statistic with its bootstrap reference sample."""

    stat: float
    boot_dist: np.ndarray
    p_value: float
    B: int
    dropped: int
    fit_full: FitResult
    fit_null: FitResult


# --- weighting ---


def _weight_matrix(cov: MomentCovariance, weighting: str) -> np.ndarray:
    d = np.diag(cov.matrix).copy()
    floor = max(d.max(), 0.0) * 1e-15
    if floor == 0.0:
        raise NumericalError("moment covariance is identically zero")
    d = np.maximum(d, floor)
    if weighting == "diag":
        return np.diag(1.0 / d)
    if weighting != "full":
        raise SpecValidationError(f"unknown weighting {weighting!r}")
    if cov.diagonal:
        raise SpecValidationError(
            "full weighting requires a full moment covariance"
        )
    try:
        c, low = cho_factor(cov.matrix)
        return cho_solve((c, low), np.eye(cov.dim))
    except np.linalg.LinAlgError:
        warnings.warn(
            "full moment covariance is numerically singular; using its "
            "pseudo-inverse as the weighting",
            UserWarning,
            stacklevel=2,
        )
        return np.linalg.pinv(cov.matrix, hermitian=True)


# --- starting values ---


def _nnls_profile(sub_spec, J, nu, w, phis):
    """Least-squares fill-in of the linearly entering parameters.

    Given trial ar1 coefficients, every remaining univariate parameter
    (variances and the squared ramp slope) multiplies a known column, so
    a nonnegative weighted least squares gives the best fill-in and its
    residual.
    """
    model = moment_model(sub_spec, J)
    theta = np.zeros(model.p)
    for t, v in zip(model.phi_pos, phis):
        theta[t] = v
    cols = []
    slots = []
    for (t, rows, col, pa, pb) in model.linear:
        c = np.zeros(model.dim)
        c[rows] = col if col is not None else model._ar1_col(theta[pa], theta[pb])
        cols.append(c)
        slots.append(("lin", t))
    for _, t in model.omega_pos.items():
        cols.append(model.taus**2 / 16.0)
        slots.append(("omega2", t))
    A = np.column_stack(cols)
    sw = np.sqrt(w)
    Aw = A * sw[:, None]
    try:
        beta, _ = nnls(Aw, nu * sw)
    except RuntimeError:  # iteration limit in degenerate corners
        beta = np.zeros(len(slots))
    # zeroed coefficients restart a few decades below the scale each
    # column would need on its own, so the log reparametrization still
    # sees a usable starting point
    norms2 = np.einsum("ij,ij->j", Aw, Aw)
    ref = np.abs(Aw.T @ (nu * sw)) / np.maximum(norms2, 1e-300)
    beta = np.where(beta > 0, beta, np.maximum(ref * 1e-3, 1e-300))
    for b, (kind, t) in zip(beta, slots):
        theta[t] = np.sqrt(b) if kind == "omega2" else b
    r = nu - model.vector(theta)
    return theta, float(r @ (w * r))


def _phi_combos(n_phi: int):
    grid = _PHI_GRID if n_phi <= 2 else _PHI_GRID_COARSE
    combos = [()]
    for _ in range(n_phi):
        combos = [c + (g,) for c in combos for g in grid]
    return [c for c in combos if len(set(c)) == len(c)]


def _split_merged_phi(model, theta, gap=1e-3, nudge=0.02):
    """Pull coinciding ar1 coefficients slightly apart.

    A channel whose autoregressions collapse onto one coefficient sits on
    a ridge where the block variances are only jointly identified; as a
    starting point that degeneracy stalls the joint optimizer.
    """
    theta = theta.copy()
    pos = model.phi_pos
    for a in range(len(pos)):
        for b in range(a + 1, len(pos)):
            if abs(theta[pos[a]] - theta[pos[b]]) < gap:
                u = np.arctanh(np.clip(theta[pos[a]], -1 + 1e-12, 1 - 1e-12))
                theta[pos[a]] = np.tanh(u - nudge)
                theta[pos[b]] = np.tanh(u + nudge)
    return theta


def _fit_univariate_moments(sub_spec, J, nu, var_diag, refine=True):
    """Best parameters for one channel's moments; the workhorse behind
    univariate_fit and the multichannel starting values."""
    w = 1.0 / np.maximum(var_diag, max(var_diag.max(), 1e-300) * 1e-15)
    model = moment_model(sub_spec, J)
    best_theta, best_val = None, np.inf
    for phis in _phi_combos(len(model.phi_pos)):
        theta, val = _nnls_profile(sub_spec, J, nu, w, phis)
        if val < best_val:
            best_theta, best_val = theta, val
    converged = True
    if refine and model.phi_pos:
        obj = Objective(
            nu_hat=MomentVector(values=nu, I=1, J=J),
            omega=np.diag(w),
            spec=sub_spec,
        )
        u, val, converged, _ = _run_nelder_mead(
            obj, ParamVector(spec=sub_spec, values=best_theta).to_unconstrained()
        )
        if val <= best_val:
            best_theta = ParamVector.from_unconstrained(sub_spec, u).values
        best_theta = _split_merged_phi(model, best_theta)
    if not converged:
        warnings.warn(
            "per-channel starting fit did not converge; falling back to the "
            "grid estimate",
            UserWarning,
            stacklevel=2,
        )
    return best_theta


def univariate_fit(x, sub_spec: ModelSpec, J: Optional[int] = None,
                   bandwidth: Optional[int] = None) -> ParamVector:
    """Single-channel fit used to seed the multichannel optimizer.

    The weighting is the inverse of the per-level variance of the
    channel's own wavelet variances.
    """
    if sub_spec.I != 1:
        raise SpecValidationError(
            f"univariate_fit expects a single-channel spec, got I={sub_spec.I}"
        )
    ensure_valid(sub_spec)
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise SpecValidationError("univariate_fit expects a one-channel series")
    W = coefficient_stack(x, J)
    J = len(W[0])
    nu = moments_from_coefficients(W)
    cov = covariance_from_coefficients(W, x.size, bandwidth=bandwidth, mode="diag")
    values = _fit_univariate_moments(sub_spec, J, nu.values, np.diag(cov.matrix))
    values = canonicalize_ar1(sub_spec, values)
    return ParamVector(spec=sub_spec, values=values)


def _starting_values(spec: ModelSpec, nu_hat: MomentVector,
                     var_diag: np.ndarray) -> np.ndarray:
    """Algorithm step 2: per-channel fits seed their own parameters, then
    the cross parameters (raw-space zero start) get a weighted linear
    fill-in, since each one multiplies a known column once the
    autoregression coefficients are fixed."""
    J = nu_hat.J
    theta0 = np.zeros(n_params(spec))
    for i in range(1, spec.I + 1):
        sub_spec, mapping = restrict_to_channel(spec, i)
        rows = np.array(
            [moment_position(spec.I, J, i, i, j) for j in range(1, J + 1)]
        )
        sub_theta = _fit_univariate_moments(
            sub_spec, J, nu_hat.values[rows], var_diag[rows]
        )
        for st, ft in mapping:
            theta0[ft] = sub_theta[st]
    model = moment_model(spec, J)
    entries = layout(spec)
    cross = [
        item for item in model.linear
        if entries[item[0]].a != entries[item[0]].b
    ]
    if cross:
        A = np.zeros((model.dim, len(cross)))
        for c_idx, (t, rows, col, pa, pb) in enumerate(cross):
            A[rows, c_idx] = (
                col if col is not None
                else model._ar1_col(theta0[pa], theta0[pb])
            )
        sw = np.sqrt(
            1.0 / np.maximum(var_diag, max(var_diag.max(), 1e-300) * 1e-15)
        )
        r = nu_hat.values - model.vector(theta0)
        beta, *_ = np.linalg.lstsq(A * sw[:, None], r * sw, rcond=None)
        for b, (t, *_rest) in zip(beta, cross):
            theta0[t] = b
        theta0 = _clip_cross_terms(spec, theta0)
    return theta0


# --- optimization ---


def _run_nelder_mead(obj: Objective, u0: np.ndarray, restarts: int = _RESTARTS):
    """Minimize in the unconstrained space with perturbed restarts."""
    p = u0.size
    cap = _NM_CAP_PER_PARAM * p
    f0 = obj.value_unconstrained(u0)
    rng = np.random.default_rng(20260501)
    best_u, best_val, best_ok = u0, f0, False
    iterations = 0
    # one run from the seed, `restarts` perturbed runs, and a final
    # unperturbed polish that rebuilds the simplex around the incumbent
    for r in range(restarts + 2):
        # relative objective-change tolerance, re-anchored to the best
        # value seen so far (an absolute fatol set from a poor start would
        # stop the later runs early)
        options = dict(
            maxiter=cap,
            maxfev=cap,
            fatol=1e-8 * max(best_val, 1e-12),
            xatol=1e-9,
        )
        perturb = 0.0 if r in (0, restarts + 1) else rng.normal(0.0, 0.25, size=p)
        start = best_u + perturb
        res = minimize(
            obj.value_unconstrained, start, method="Nelder-Mead", options=options
        )
        iterations += int(res.nit)
        if res.fun < best_val or (res.fun == best_val and res.success):
            best_u, best_val, best_ok = res.x, float(res.fun), bool(res.success)
    return best_u, best_val, best_ok, iterations


def _weighted_design(model, omega, nu_values):
    """Square-root reweighting of the static design and target."""
    A = model.linear_matrix(np.zeros(model.p))
    evals, evecs = np.linalg.eigh(omega)
    sq = (evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T
    return sq @ A, sq @ nu_values


def _scatter_linear(model, beta):
    theta = np.zeros(model.p)
    for b, (t, *_rest) in zip(beta, model.linear):
        theta[t] = b
    return theta


def _wls_solve(model, omega, nu_values):
    """Exact minimizer when every parameter multiplies a fixed column."""
    Aw, yw = _weighted_design(model, omega, nu_values)
    beta, *_ = np.linalg.lstsq(Aw, yw, rcond=None)
    return _scatter_linear(model, beta)


def _bounded_wls(model, omega, nu_values):
    """Same least-squares problem with variance coefficients kept >= 0.

    Coefficients pinned at the bound are nudged to a positive value far
    below their own sampling scale so the log reparametrization stays
    finite.
    """
    Aw, yw = _weighted_design(model, omega, nu_values)
    entries = layout(model.spec)
    lb = np.array(
        [
            0.0 if entries[t].a == entries[t].b else -np.inf
            for (t, *_rest) in model.linear
        ]
    )
    with warnings.catch_warnings():
        # scipy's trf_linear emits a spurious invalid-multiply warning when
        # strides hit the unbounded coordinates; results are unaffected.
        warnings.filterwarnings(
            "ignore", message="invalid value encountered",
            category=RuntimeWarning, module=r"scipy\.optimize.*",
        )
        res = lsq_linear(Aw, yw, bounds=(lb, np.full(lb.size, np.inf)))
    beta = np.asarray(res.x, dtype=float)
    norms2 = np.einsum("ij,ij->j", Aw, Aw)
    ref = np.abs(Aw.T @ yw) / np.maximum(norms2, 1e-300)
    at_bound = (lb == 0.0) & (beta <= 0.0)
    beta[at_bound] = np.maximum(ref[at_bound], 1e-300) * 1e-9
    return _scatter_linear(model, beta)


def _clip_cross_terms(spec: ModelSpec, values: np.ndarray) -> np.ndarray:
    """Pull cross covariances strictly inside the pairwise bound."""
    values = values.copy()
    entries = layout(spec)
    diag_pos = {
        (e.block, e.a): t
        for t, e in enumerate(entries)
        if e.field == "cov" and e.a == e.b
    }
    for t, e in enumerate(entries):
        if e.field == "cov" and e.a != e.b:
            cap = 0.99 * np.sqrt(
                values[diag_pos[(e.block, e.a)]] * values[diag_pos[(e.block, e.b)]]
            )
            values[t] = float(np.clip(values[t], -cap, cap))
    return values


def _in_domain(spec: ModelSpec, values: np.ndarray) -> bool:
    """Whether the unconstrained reparametrization can represent values.

    Cross covariances only need the pairwise bound |c_ab| < sqrt(c_aa
    c_bb); joint positive semidefiniteness is reported separately as a
    diagnostic rather than enforced.
    """
    if not np.all(np.isfinite(values)):
        return False
    theta = ParamVector(spec=spec, values=values)
    for k, blk in enumerate(spec.blocks):
        vals = theta.block_values(k)
        if "cov" in vals:
            c = vals["cov"]
            d = np.diag(c)
            if np.any(d <= 0):
                return False
            if blk.correlated and blk.n > 1:
                lim = np.sqrt(np.outer(d, d))
                off = ~np.eye(blk.n, dtype=bool)
                if np.any(np.abs(c[off]) >= lim[off]):
                    return False
        if "q2" in vals and np.any(vals["q2"] <= 0):
            return False
        if "omega" in vals and np.any(vals["omega"] <= 0):
            return False
        if "phi" in vals and np.any(np.abs(vals["phi"]) >= 1):
            return False
    return True


def _psd_violations(spec: ModelSpec, theta: ParamVector) -> list:
    """Correlated blocks whose estimated covariance is not PSD.

    The pairwise correlation transform cannot enforce joint positive
    semidefiniteness for three or more channels, so the fit reports
    violations instead of failing.
    """
    out = []
    for k, blk in enumerate(spec.blocks):
        if not (blk.correlated and blk.n > 1):
            continue
        cov = theta.block_values(k).get("cov")
        if cov is None:
            continue
        lo = float(np.linalg.eigvalsh(cov).min())
        if lo < 0:
            out.append(f"block {k + 1} ({blk.kind}): minimum eigenvalue {lo:.3e}")
    return out


def _fit_given_moments(spec, nu_hat, cov, omega, method, compute_se,
                       theta0=None) -> FitResult:
    J = nu_hat.J
    model = moment_model(spec, J)
    obj = Objective(nu_hat=nu_hat, omega=omega, spec=spec)
    diagnostics: dict = {"restarts": 0, "iterations": 0}

    values = None
    if method not in ("auto", "wls", "nm"):
        raise SpecValidationError(f"unknown method {method!r}")
    if method == "wls" and not model.fully_linear:
        raise SpecValidationError(
            "weighted least squares applies only when every parameter "
            "enters the moments linearly"
        )
    if method in ("auto", "wls") and model.fully_linear:
        candidate = _wls_solve(model, obj.omega, nu_hat.values)
        if not _in_domain(spec, candidate):
            diagnostics["wls_bounded"] = True
            candidate = _clip_cross_terms(
                spec, _bounded_wls(model, obj.omega, nu_hat.values)
            )
        if _in_domain(spec, candidate):
            values = candidate
            diagnostics.update(method="wls", converged=True)
        elif method == "wls":
            raise NumericalError(
                "least-squares estimate leaves the parameter domain even "
                "after bounding; rerun with method='nm'"
            )
        else:
            diagnostics["wls_rejected"] = True
    if values is None:
        if theta0 is None:
            theta0 = _starting_values(spec, nu_hat, _start_weights(cov, omega))
        u0 = ParamVector(spec=spec, values=np.asarray(theta0, dtype=float)).to_unconstrained()
        u, val, ok, iters = _run_nelder_mead(obj, u0)
        values = ParamVector.from_unconstrained(spec, u).values
        diagnostics.update(
            method="nm", converged=ok, restarts=_RESTARTS, iterations=iters
        )
        if not ok:
            warnings.warn(
                "optimizer did not meet its tolerance within the iteration "
                "cap; diagnostics carry converged=False",
                UserWarning,
                stacklevel=2,
            )

    values = canonicalize_ar1(spec, values)
    theta = ParamVector(spec=spec, values=values)
    q = obj.value(values)
    implied = MomentVector(values=model.vector(values), I=spec.I, J=J)
    diagnostics["psd_violations"] = _psd_violations(spec, theta)

    se = xi = None
    if compute_se:
        if cov is None or cov.diagonal:
            raise SpecValidationError(
                "standard errors need the full moment covariance"
            )
        A = model.jacobian(values)
        G = A.T @ obj.omega @ A
        AtWVWA = A.T @ obj.omega @ cov.matrix @ obj.omega @ A
        try:
            c, low = cho_factor(G)
            xi = cho_solve((c, low), cho_solve((c, low), AtWVWA).T)
        except np.linalg.LinAlgError:
            diagnostics["rank_deficient"] = True
            warnings.warn(
                "moment Jacobian gives a singular normal matrix; standard "
                "errors use a pseudo-inverse and are unreliable",
                UserWarning,
                stacklevel=2,
            )
            Gi = np.linalg.pinv(G, hermitian=True)
            xi = Gi @ AtWVWA @ Gi
        xi = 0.5 * (xi + xi.T)
        se = np.sqrt(np.clip(np.diag(xi), 0.0, None))

    return FitResult(
        theta=theta,
        objective_value=q,
        implied=implied,
        nu_hat=nu_hat,
        se=se,
        xi=xi,
        diagnostics=diagnostics,
    )


def _start_weights(cov, omega) -> np.ndarray:
    """Per-entry moment variances backing the starting-value weights."""
    if cov is not None:
        return np.diag(cov.matrix).copy()
    w = np.diag(omega)
    return 1.0 / np.maximum(w, w.max() * 1e-15)


def fit_from_moments(spec: ModelSpec, nu_hat: MomentVector,
                     cov: Optional[MomentCovariance] = None, *,
                     weighting: str = "diag", method: str = "auto",
                     compute_se: Optional[bool] = None,
                     theta0=None) -> FitResult:
    """Fit to an already-computed moment vector.

    With cov=None the weighting is the identity (useful for exact-moment
    inversion checks) and no standard errors are available.
    """
    ensure_valid(spec)
    if compute_se is None:
        compute_se = cov is not None and not cov.diagonal
    if cov is None:
        omega = np.eye(nu_hat.dim)
    else:
        if cov.dim != nu_hat.dim:
            raise SpecValidationError(
                f"covariance dim {cov.dim} does not match moments {nu_hat.dim}"
            )
        omega = _weight_matrix(cov, weighting)
    if theta0 is not None:
        theta0 = as_param_vector(spec, theta0).values
    return _fit_given_moments(spec, nu_hat, cov, omega, method, compute_se, theta0)


def fit(x, spec: ModelSpec, *, J: Optional[int] = None,
        weighting: str = "diag", bandwidth: Optional[int] = None,
        method: str = "auto", compute_se: bool = True,
        theta0=None) -> FitResult:
    """Estimate the spec's parameters from a multichannel series.

    x is (I, T) with channels in rows. J defaults to the deepest usable
    level. weighting "diag" inverts the per-entry moment variances;
    "full" inverts the whole moment covariance (ill-conditioned for wide
    moment vectors). compute_se=False skips the covariance work, which
    matters inside the bootstrap.
    """
    ensure_valid(spec)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] != spec.I:
        raise SpecValidationError(
            f"data has {x.shape[0]} channels but the spec declares {spec.I}"
        )
    W = coefficient_stack(x, J)
    J = len(W[0])
    nu_hat = moments_from_coefficients(W)
    need_full = compute_se or weighting == "full"
    cov = covariance_from_coefficients(
        W, x.shape[1], bandwidth=bandwidth, mode="full" if need_full else "diag"
    )
    omega = _weight_matrix(cov, weighting)
    if theta0 is not None:
        theta0 = as_param_vector(spec, theta0).values
    return _fit_given_moments(spec, nu_hat, cov, omega, method, compute_se, theta0)


# --- dependence test ---


def strip_cross(spec: ModelSpec) -> ModelSpec:
    """The same structure with every cross-channel parameter removed."""
    blocks = []
    for blk in spec.blocks:
        if blk.correlated:
            kwargs = {"correlated": False}
            if blk.cov is not None:
                kwargs["cov"] = tuple(
                    tuple(v if r == c else 0.0 for c, v in enumerate(row))
                    for r, row in enumerate(blk.cov)
                )
            blocks.append(replace(blk, **kwargs))
        else:
            blocks.append(blk)
    return replace(spec, blocks=tuple(blocks))


def dependence_test(x, spec_full: ModelSpec, B: int, seed: int, *,
                    J: Optional[int] = None, weighting: str = "diag",
                    bandwidth: Optional[int] = None,
                    method: str = "auto") -> DepTestResult:
    """Parametric-bootstrap test of the cross-channel parameters.

    The statistic is the objective gap between the no-dependence fit and
    the full fit under one shared weighting; its null distribution comes
    from B datasets simulated at the no-dependence estimate, each
    refitted from scratch (own weighting, shared by its two fits).
    """
    B = int(B)
    if B < 19:
        raise SpecValidationError(
            f"need at least 19 bootstrap replicates for a usable p-value, got {B}"
        )
    ensure_valid(spec_full)
    spec_null = strip_cross(spec_full)
    if n_params(spec_null) == n_params(spec_full):
        raise SpecValidationError("spec has no cross-channel parameters to test")

    x = np.atleast_2d(np.asarray(x, dtype=float))
    T = x.shape[1]
    W = coefficient_stack(x, J)
    J = len(W[0])
    nu_hat = moments_from_coefficients(W)
    cov = covariance_from_coefficients(
        W, T, bandwidth=bandwidth, mode="full" if weighting == "full" else "diag"
    )
    omega = _weight_matrix(cov, weighting)

    fit_full = _fit_given_moments(spec_full, nu_hat, cov, omega, method, False)
    fit_null = _fit_given_moments(spec_null, nu_hat, cov, omega, method, False)
    stat = max(fit_null.objective_value - fit_full.objective_value, 0.0)

    sim_spec = fit_null.theta.to_spec()
    boot = []
    dropped = 0
    for b in range(B):
        xb = simulate(SimConfig(spec=sim_spec, T=T, seed=seed, replicate_id=b))
        Wb = coefficient_stack(xb, J)
        nub = moments_from_coefficients(Wb)
        covb = covariance_from_coefficients(
            Wb, T, bandwidth=bandwidth,
            mode="full" if weighting == "full" else "diag",
        )
        omegab = _weight_matrix(covb, weighting)
        try:
            fb = _fit_given_moments(spec_full, nub, covb, omegab, method, False)
            nb = _fit_given_moments(spec_null, nub, covb, omegab, method, False)
        except NumericalError:
            dropped += 1
            continue
        if not (fb.converged and nb.converged):
            dropped += 1
            continue
        boot.append(max(nb.objective_value - fb.objective_value, 0.0))
    if dropped > 0.1 * B:
        raise NumericalError(
            f"{dropped} of {B} bootstrap replicates failed to converge"
        )
    boot_arr = np.array(boot)
    p = (1.0 + float(np.sum(boot_arr >= stat))) / (boot_arr.size + 1.0)
    return DepTestResult(
        stat=stat,
        boot_dist=boot_arr,
        p_value=p,
        B=B,
        dropped=dropped,
        fit_full=fit_full,
        fit_null=fit_null,
    )
