"""Latent block models and exact theoretical wavelet moments.

A model is a sum of independent latent blocks, each routed onto a subset of
channels: white noise (wn), random walk (rw), quantization-style noise (qn,
modeled as the first difference of an i.i.d. sequence), deterministic linear
drift (dr), and first-order autoregressions (ar1).  Cross-channel dependence
exists only inside a block that loads several channels with
``correlated=True``; qn and dr never carry cross terms.

Theoretical moments come through two routes: per-kind closed forms (fast
path) and a quadratic-form oracle that pushes the differenced-process
covariance sequence through the level filter.  The oracle is the
authoritative definition; the closed forms are checked against it in the
test suite.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .errors import NumericalError, SpecValidationError
from .moments import MomentIndex, MomentVector, canonical_indices, moment_position
from .wavelet import build_filter

KINDS = ("wn", "rw", "qn", "dr", "ar1")

_SYM = {"wn": "sigma", "rw": "lambda", "qn": "q2", "dr": "omega", "ar1": "z"}
_COV_KINDS = ("wn", "rw", "ar1")

# Clip bounds for the unconstrained parameter space.  exp(+-60) spans the
# usable double range; tanh(18) is the largest argument that still maps
# strictly inside (-1, 1) in double precision.
_LOG_CLIP = 60.0
_TANH_CLIP = 18.0


def _as_tuple(x, n, what):
    arr = np.asarray(x, dtype=float)
    if arr.shape != (n,):
        raise SpecValidationError(f"{what} must have shape ({n},), got {arr.shape}")
    return tuple(float(v) for v in arr)


def _as_matrix(x, n, what):
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0 and n == 1:
        arr = arr.reshape(1, 1)
    if arr.shape != (n, n):
        raise SpecValidationError(f"{what} must have shape ({n},{n}), got {arr.shape}")
    return tuple(tuple(float(v) for v in row) for row in arr)


@dataclass(frozen=True)
class LatentBlock:
    """One latent component: kind, loaded channels, and optional values.

    ``channels`` holds 1-based channel labels in strictly increasing order.
    ``correlated`` makes the off-diagonal covariance entries free parameters
    (wn/rw/ar1 only).  Value fields may stay None for structure-only specs
    used as fit targets.
    """

    kind: str
    channels: tuple[int, ...]
    correlated: bool = False
    phi: tuple[float, ...] | None = None
    cov: tuple[tuple[float, ...], ...] | None = None
    q2: tuple[float, ...] | None = None
    omega: tuple[float, ...] | None = None

    def __post_init__(self):
        kind = str(self.kind).lower()
        if kind not in KINDS:
            raise SpecValidationError(f"unknown block kind {self.kind!r}")
        chans = self.channels
        if isinstance(chans, (int, np.integer)):
            chans = (int(chans),)
        chans = tuple(int(c) for c in chans)
        if not chans:
            raise SpecValidationError("block must load at least one channel")
        if any(c2 <= c1 for c1, c2 in zip(chans, chans[1:])):
            raise SpecValidationError(
                f"channels must be strictly increasing, got {chans}"
            )
        n = len(chans)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "channels", chans)
        object.__setattr__(self, "correlated", bool(self.correlated))
        for field_name, allowed in (
            ("phi", ("ar1",)),
            ("cov", _COV_KINDS),
            ("q2", ("qn",)),
            ("omega", ("dr",)),
        ):
            val = getattr(self, field_name)
            if val is None:
                continue
            if kind not in allowed:
                raise SpecValidationError(
                    f"{field_name} values are not meaningful for kind {kind!r}"
                )
            if field_name == "cov":
                object.__setattr__(self, "cov", _as_matrix(val, n, "cov"))
            else:
                object.__setattr__(
                    self, field_name, _as_tuple(val, n, field_name)
                )

    @property
    def n(self) -> int:
        return len(self.channels)

    @property
    def has_values(self) -> bool:
        if self.kind in ("wn", "rw"):
            return self.cov is not None
        if self.kind == "ar1":
            return self.cov is not None and self.phi is not None
        if self.kind == "qn":
            return self.q2 is not None
        return self.omega is not None

    # --- constructors ---

    @classmethod
    def wn(cls, channels, cov=None, correlated=False):
        return cls(kind="wn", channels=channels, cov=cov, correlated=correlated)

    @classmethod
    def rw(cls, channels, cov=None, correlated=False):
        return cls(kind="rw", channels=channels, cov=cov, correlated=correlated)

    @classmethod
    def qn(cls, channels, q2=None):
        return cls(kind="qn", channels=channels, q2=q2)

    @classmethod
    def dr(cls, channels, omega=None):
        return cls(kind="dr", channels=channels, omega=omega)

    @classmethod
    def ar1(cls, channels, phi=None, cov=None, correlated=False):
        return cls(kind="ar1", channels=channels, phi=phi, cov=cov, correlated=correlated)


@dataclass(frozen=True)
class ModelSpec:
    """Channel count plus an ordered tuple of latent blocks."""

    I: int
    blocks: tuple[LatentBlock, ...]
    class_tag: str = "auto"

    def __post_init__(self):
        object.__setattr__(self, "I", int(self.I))
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "class_tag", str(self.class_tag))

    @property
    def model_class(self) -> str:
        return classify(self)

    @property
    def has_values(self) -> bool:
        return all(b.has_values for b in self.blocks)

    def channel_blocks(self, i: int) -> list[int]:
        return [k for k, b in enumerate(self.blocks) if i in b.channels]


def classify(spec: ModelSpec) -> str:
    """Identifiability class: the two vetted block menus, else custom."""
    kinds = [b.kind for b in spec.blocks]
    counts = Counter(kinds)
    if not kinds:
        return "custom"
    if all(k in ("wn", "rw", "qn", "dr") for k in kinds) and max(counts.values()) <= 1:
        return "M1"
    if (
        all(k in ("wn", "qn", "ar1") for k in kinds)
        and counts["wn"] <= 1
        and counts["qn"] <= 1
        and counts["ar1"] >= 1
    ):
        return "M2"
    return "custom"


def validate(spec: ModelSpec) -> list[str]:
    """Check structural and domain rules; return a list of violations.

    An empty list means the spec is usable.  Value checks only run for
    blocks that carry values.  Specs outside the vetted classes trigger a
    warning (identifiability is then not guaranteed), not a violation.
    """
    out = []
    if spec.I < 1:
        out.append(f"channel count must be >= 1, got {spec.I}")
    if not spec.blocks:
        out.append("model has no blocks")

    # a matrix stored for an uncorrelated block must be diagonal
    for k, b in enumerate(spec.blocks):
        tag = f"block {k + 1} ({b.kind})"
        bad = [c for c in b.channels if not 1 <= c <= spec.I]
        if bad:
            out.append(f"{tag}: channels {bad} outside 1..{spec.I}")
        if b.kind in ("qn", "dr") and b.correlated:
            out.append(f"{tag}: this kind has no cross-channel parameters")
        if b.cov is not None:
            cov = np.array(b.cov)
            if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
                out.append(f"{tag}: covariance is not symmetric")
            elif b.correlated and b.n > 1:
                if np.linalg.eigvalsh(0.5 * (cov + cov.T)).min() <= 0:
                    out.append(f"{tag}: covariance is not positive definite")
            else:
                off = cov - np.diag(np.diag(cov))
                if np.any(off != 0.0):
                    out.append(
                        f"{tag}: off-diagonal covariance given but correlated=False"
                    )
            if np.any(np.diag(cov) <= 0):
                out.append(f"{tag}: diagonal covariance entries must be positive")
        if b.q2 is not None and any(v <= 0 for v in b.q2):
            out.append(f"{tag}: q2 entries must be positive")
        if b.omega is not None and any(v <= 0 for v in b.omega):
            out.append(f"{tag}: omega entries must be positive")
        if b.phi is not None and any(not 0.0 < abs(p) < 1.0 for p in b.phi):
            out.append(f"{tag}: phi entries must be nonzero and inside (-1, 1)")

    # same-kind blocks sharing a channel are not separately identifiable
    for kind in ("wn", "rw", "qn", "dr"):
        loaded: dict[int, int] = {}
        for k, b in enumerate(spec.blocks):
            if b.kind != kind:
                continue
            for c in b.channels:
                if c in loaded:
                    out.append(
                        f"blocks {loaded[c] + 1} and {k + 1}: two {kind} blocks "
                        f"load channel {c}; only their sum is identifiable"
                    )
                else:
                    loaded[c] = k

    # distinct nonzero ar1 coefficients per channel
    for c in range(1, spec.I + 1):
        phis = []
        for k, b in enumerate(spec.blocks):
            if b.kind == "ar1" and c in b.channels and b.phi is not None:
                phis.append((k, b.phi[b.channels.index(c)]))
        seen: dict[float, int] = {}
        for k, p in phis:
            if p in seen:
                out.append(
                    f"blocks {seen[p] + 1} and {k + 1}: equal ar1 coefficient "
                    f"{p} on channel {c}; coefficients must be distinct per channel"
                )
            else:
                seen[p] = k

    # exchangeable ar1 blocks must be in ascending-phi order
    groups: dict[tuple, list[tuple[int, float]]] = {}
    for k, b in enumerate(spec.blocks):
        if b.kind == "ar1" and b.phi is not None:
            groups.setdefault((b.channels, b.correlated), []).append((k, b.phi[0]))
    for members in groups.values():
        if len(members) > 1:
            phis = [p for _, p in members]
            if any(p2 <= p1 for p1, p2 in zip(phis, phis[1:])):
                ids = [k + 1 for k, _ in members]
                out.append(
                    f"blocks {ids}: interchangeable ar1 blocks must be ordered "
                    f"by ascending phi (canonical form)"
                )

    cls = classify(spec)
    if spec.class_tag in ("M1", "M2") and spec.class_tag != cls:
        out.append(
            f"class tag {spec.class_tag!r} does not match the block structure ({cls})"
        )
    elif spec.class_tag not in ("auto", "custom", "M1", "M2"):
        out.append(f"unknown class tag {spec.class_tag!r}")
    if cls == "custom" and not out:
        warnings.warn(
            "model is outside the vetted block classes; identifiability is "
            "not guaranteed",
            UserWarning,
            stacklevel=2,
        )
    return out


def ensure_valid(spec: ModelSpec) -> None:
    violations = validate(spec)
    if violations:
        raise SpecValidationError("; ".join(violations))


# --- parameter layout and transforms ---


@dataclass(frozen=True)
class ParamEntry:
    name: str
    block: int
    field: str  # "cov" | "q2" | "omega" | "phi"
    a: int
    b: int
    transform: str  # "log" | "atanh" | "corr"
    diag_pos: tuple[int, int] | None = None


@lru_cache(maxsize=None)
def layout(spec: ModelSpec) -> tuple[ParamEntry, ...]:
    """Free-parameter order: per block, diagonal entries before cross terms."""
    entries: list[ParamEntry] = []
    for k, blk in enumerate(spec.blocks):
        sym = _SYM[blk.kind]
        label = f"b{k + 1}.{sym}"
        if blk.kind == "ar1":
            for a, ch in enumerate(blk.channels):
                entries.append(
                    ParamEntry(f"b{k + 1}.phi({ch})", k, "phi", a, a, "atanh")
                )
        if blk.kind in _COV_KINDS:
            diag_at = {}
            for a, ch in enumerate(blk.channels):
                diag_at[a] = len(entries)
                entries.append(ParamEntry(f"{label}({ch})", k, "cov", a, a, "log"))
            if blk.correlated and blk.n > 1:
                for a in range(blk.n):
                    for b in range(a + 1, blk.n):
                        entries.append(
                            ParamEntry(
                                f"{label}({blk.channels[a]},{blk.channels[b]})",
                                k,
                                "cov",
                                a,
                                b,
                                "corr",
                                (diag_at[a], diag_at[b]),
                            )
                        )
        elif blk.kind == "qn":
            for a, ch in enumerate(blk.channels):
                entries.append(ParamEntry(f"{label}({ch})", k, "q2", a, a, "log"))
        elif blk.kind == "dr":
            for a, ch in enumerate(blk.channels):
                entries.append(ParamEntry(f"{label}({ch})", k, "omega", a, a, "log"))
    return tuple(entries)


def n_params(spec: ModelSpec) -> int:
    return len(layout(spec))


@dataclass(frozen=True)
class ParamVector:
    """Flat free-parameter values in natural units, aligned with layout(spec)."""

    spec: ModelSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        p = n_params(self.spec)
        if v.shape != (p,):
            raise SpecValidationError(
                f"parameter vector has shape {v.shape}, expected ({p},)"
            )
        object.__setattr__(self, "values", v)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in layout(self.spec))

    @property
    def entries(self) -> tuple[ParamEntry, ...]:
        return layout(self.spec)

    def asdict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values)}

    @classmethod
    def from_spec(cls, spec: ModelSpec) -> "ParamVector":
        """Pack the values embedded in the spec's blocks."""
        vals = np.empty(n_params(spec))
        for t, e in enumerate(layout(spec)):
            blk = spec.blocks[e.block]
            src = getattr(blk, e.field)
            if src is None:
                raise SpecValidationError(
                    f"block {e.block + 1} ({blk.kind}) carries no {e.field} values"
                )
            vals[t] = src[e.a][e.b] if e.field == "cov" else src[e.a]
        return cls(spec=spec, values=vals)

    def to_spec(self) -> ModelSpec:
        """Return the spec with these values written into its blocks."""
        blocks = []
        for k, blk in enumerate(self.spec.blocks):
            v = self.block_values(k)
            kwargs = {}
            if blk.kind in _COV_KINDS:
                kwargs["cov"] = tuple(tuple(row) for row in v["cov"])
            if blk.kind == "ar1":
                kwargs["phi"] = tuple(v["phi"])
            if blk.kind == "qn":
                kwargs["q2"] = tuple(v["q2"])
            if blk.kind == "dr":
                kwargs["omega"] = tuple(v["omega"])
            blocks.append(replace(blk, **kwargs))
        return replace(self.spec, blocks=tuple(blocks))

    def block_values(self, k: int) -> dict[str, np.ndarray]:
        blk = self.spec.blocks[k]
        n = blk.n
        out: dict[str, np.ndarray] = {}
        if blk.kind in _COV_KINDS:
            out["cov"] = np.zeros((n, n))
        if blk.kind == "ar1":
            out["phi"] = np.zeros(n)
        if blk.kind == "qn":
            out["q2"] = np.zeros(n)
        if blk.kind == "dr":
            out["omega"] = np.zeros(n)
        for t, e in enumerate(layout(self.spec)):
            if e.block != k:
                continue
            if e.field == "cov":
                out["cov"][e.a, e.b] = out["cov"][e.b, e.a] = self.values[t]
            else:
                out[e.field][e.a] = self.values[t]
        return out

    def to_unconstrained(self) -> np.ndarray:
        """Map to the unconstrained optimization space.

        Positive parameters go through log, ar1 coefficients through atanh,
        and cross-covariances through atanh of their implied correlation
        (clipped just inside (-1, 1) so boundary estimates stay mappable).
        """
        entries = layout(self.spec)
        u = np.empty(len(entries))
        for t, e in enumerate(entries):
            v = self.values[t]
            if e.transform == "log":
                if v <= 0:
                    raise NumericalError(f"{e.name}={v} must be positive")
                u[t] = np.log(v)
            elif e.transform == "atanh":
                if abs(v) >= 1:
                    raise NumericalError(f"{e.name}={v} must be inside (-1, 1)")
                u[t] = np.arctanh(v)
            else:
                va = self.values[e.diag_pos[0]]
                vb = self.values[e.diag_pos[1]]
                if va <= 0 or vb <= 0:
                    raise NumericalError(
                        f"{e.name}: diagonal entries must be positive to form "
                        f"a correlation"
                    )
                rho = np.clip(v / np.sqrt(va * vb), -1 + 1e-12, 1 - 1e-12)
                u[t] = np.arctanh(rho)
        return u

    @classmethod
    def from_unconstrained(cls, spec: ModelSpec, u) -> "ParamVector":
        entries = layout(spec)
        u = np.asarray(u, dtype=float)
        vals = np.empty(len(entries))
        for t, e in enumerate(entries):
            if e.transform == "log":
                vals[t] = np.exp(np.clip(u[t], -_LOG_CLIP, _LOG_CLIP))
            elif e.transform == "atanh":
                vals[t] = np.tanh(np.clip(u[t], -_TANH_CLIP, _TANH_CLIP))
            else:
                rho = np.tanh(np.clip(u[t], -_TANH_CLIP, _TANH_CLIP))
                vals[t] = rho * np.sqrt(vals[e.diag_pos[0]] * vals[e.diag_pos[1]])
        return cls(spec=spec, values=vals)


def as_param_vector(spec: ModelSpec, theta) -> ParamVector:
    if isinstance(theta, ParamVector):
        return theta
    return ParamVector(spec=spec, values=np.asarray(theta, dtype=float))


def canonicalize_ar1(spec: ModelSpec, values: np.ndarray) -> np.ndarray:
    """Reorder interchangeable ar1 blocks by ascending first phi.

    Blocks with identical channel sets and correlation structure can swap
    labels without changing the model; sorting removes that ambiguity from
    fitted values.
    """
    entries = layout(spec)
    values = np.array(values, dtype=float)
    groups: dict[tuple, list[int]] = {}
    for k, b in enumerate(spec.blocks):
        if b.kind == "ar1":
            groups.setdefault((b.channels, b.correlated), []).append(k)
    pos_by_block: dict[int, list[int]] = {}
    for t, e in enumerate(entries):
        pos_by_block.setdefault(e.block, []).append(t)
    for members in groups.values():
        if len(members) < 2:
            continue
        first_phi = [values[pos_by_block[k][0]] for k in members]
        order = np.argsort(first_phi, kind="stable")
        stacked = [values[pos_by_block[k]] for k in members]
        for dest, src in zip(members, order):
            values[pos_by_block[dest]] = stacked[src]
    return values


# --- differenced-process covariances and the quadratic-form oracle ---


def _diff_crosscov_values(kind, vals, a, b, lags: np.ndarray) -> np.ndarray:
    """Cov of the first-differenced block process at signed lags.

    Lag l pairs channel a at time t with channel b at time t + l.
    """
    lags = np.asarray(lags, dtype=int)
    if kind == "wn":
        s = vals["cov"][a, b]
        return np.where(lags == 0, 2.0 * s, np.where(np.abs(lags) == 1, -s, 0.0))
    if kind == "rw":
        lam = vals["cov"][a, b]
        return np.where(lags == 0, lam, 0.0)
    if kind == "qn":
        if a != b:
            return np.zeros(lags.shape)
        q = vals["q2"][a]
        absl = np.abs(lags)
        out = np.zeros(lags.shape)
        out[absl == 0] = 6.0 * q
        out[absl == 1] = -4.0 * q
        out[absl == 2] = q
        return out
    if kind == "ar1":
        z = vals["cov"][a, b]
        p1 = vals["phi"][a]
        p2 = vals["phi"][b]
        kappa = z / (1.0 - p1 * p2)
        # Factored form of 2 C(l) - C(l-1) - C(l+1); the naive difference
        # loses digits when phi approaches one.
        out = np.empty(lags.shape, dtype=float)
        pos = lags > 0
        neg = lags < 0
        out[lags == 0] = kappa * ((1.0 - p1) + (1.0 - p2))
        out[pos] = -kappa * (1.0 - p2) ** 2 * np.power(p2, lags[pos] - 1)
        out[neg] = -kappa * (1.0 - p1) ** 2 * np.power(p1, -lags[neg] - 1)
        return out
    return np.zeros(lags.shape)  # dr: no stochastic part


def block_diff_crosscov(block: LatentBlock, i: int, ip: int, lag: int) -> float:
    """Cross-covariance of the block's first differences at a signed lag.

    Uses the parameter values stored on the block; channels are the global
    1-based labels.
    """
    if i not in block.channels or ip not in block.channels:
        raise SpecValidationError(
            f"block does not load channels ({i},{ip}); it loads {block.channels}"
        )
    if not block.has_values:
        raise SpecValidationError("block carries no parameter values")
    vals = _block_value_dict(block)
    a = block.channels.index(i)
    b = block.channels.index(ip)
    return float(
        _diff_crosscov_values(block.kind, vals, a, b, np.array([lag]))[0]
    )


def _block_value_dict(block: LatentBlock) -> dict[str, np.ndarray]:
    out = {}
    if block.cov is not None:
        out["cov"] = np.array(block.cov, dtype=float)
    if block.phi is not None:
        out["phi"] = np.array(block.phi, dtype=float)
    if block.q2 is not None:
        out["q2"] = np.array(block.q2, dtype=float)
    if block.omega is not None:
        out["omega"] = np.array(block.omega, dtype=float)
    return out


def _quadform_block(kind, vals, a, b, j) -> float:
    """Stochastic moment contribution via the filter quadratic form.

    The cumulative taps at level j are exact multiples of 2**-j, so their
    autocorrelation is accumulated in int64 and scaled to float once. For
    the short-memory kinds the few-lag pattern of the differenced
    covariance is combined in exact integers as well; deep levels would
    otherwise lose most of their digits to cancellation.
    """
    c = build_filter(j).c
    lmax = c.size - 1
    if j <= 20:
        ci = np.rint(c * (1 << j)).astype(np.int64)
        kap_i = np.correlate(ci, ci, mode="full")  # lags -(L-2)..L-2, exact
        scale = 4.0 ** (-j)

        def kv(lag: int) -> int:
            idx = lag + lmax
            if idx < 0 or idx >= kap_i.size:
                return 0
            return int(kap_i[idx])

        if kind == "wn":
            s = vals["cov"][a, b]
            return float(2 * kv(0) - kv(1) - kv(-1)) * scale * s
        if kind == "rw":
            return float(kv(0)) * scale * vals["cov"][a, b]
        if kind == "qn":
            if a != b:
                return 0.0
            pattern = 6 * kv(0) - 4 * (kv(1) + kv(-1)) + kv(2) + kv(-2)
            return float(pattern) * scale * vals["q2"][a]
        if kind == "dr":
            return 0.0
        # ar1: accumulate in extended precision. The alternating-sign sum
        # cancels by up to ~1e7 at deep levels, which plain double terms
        # cannot survive at oracle tolerance.
        ld = np.longdouble
        one = ld(1.0)
        z = ld(vals["cov"][a, b])
        p1 = ld(vals["phi"][a])
        p2 = ld(vals["phi"][b])
        kappa = z / (one - p1 * p2)
        lags = np.arange(-lmax, lmax + 1)
        cd = np.empty(lags.shape, dtype=np.longdouble)
        pos = lags > 0
        neg = lags < 0
        cd[lags == 0] = kappa * ((one - p1) + (one - p2))
        cd[pos] = -kappa * (one - p2) ** 2 * np.power(p2, lags[pos] - 1)
        cd[neg] = -kappa * (one - p1) ** 2 * np.power(p1, -lags[neg] - 1)
        total = np.sum(kap_i.astype(np.longdouble) * cd)
        return float(total * ld(scale))
    kap = np.correlate(c, c, mode="full")
    lags = np.arange(-lmax, lmax + 1)
    return float(kap @ _diff_crosscov_values(kind, vals, a, b, lags))


# --- closed forms ---


def _geom0(phi, p, q):
    """sum_{d=p}^{q} phi**d for scalar phi != 1."""
    if q < p:
        return 0.0
    return (phi**p - phi ** (q + 1)) / (1.0 - phi)


def _geom1(phi, p, q):
    """sum_{d=p}^{q} d * phi**d for scalar phi != 1."""
    if q < p:
        return 0.0

    def upto(m):
        if m < 1:
            return 0.0
        return phi * (1.0 - (m + 1) * phi**m + m * phi ** (m + 1)) / (1.0 - phi) ** 2

    return upto(q) - upto(p - 1)


def _g_haar(phi, n):
    """Weighted power sum of the level filter's autocorrelation tail.

    Equals sum_{d>=1} kappa_h(d) * phi**d / a^2 where kappa_h is the raw
    tap autocorrelation (kappa_h(d)/a^2 = 2n - 3d for d < n and -(2n - d)
    for n <= d < 2n, with a the tap magnitude and 2n the filter length).
    Near phi = 1 both the geometric sums and the downstream combination
    2n + 2 g cancel badly, so a direct sum takes over on a wide margin.
    """
    if phi == 0.0:
        return 0.0
    if abs(1.0 - phi) * 2 * n < 0.05 and n <= (1 << 21):
        d = np.arange(1, 2 * n)
        shape = np.where(d < n, 2 * n - 3.0 * d, -(2.0 * n - d))
        return float(shape @ np.power(phi, d))
    return (
        2.0 * n * _geom0(phi, 1, n - 1)
        - 3.0 * _geom1(phi, 1, n - 1)
        - 2.0 * n * _geom0(phi, n, 2 * n - 1)
        + _geom1(phi, n, 2 * n - 1)
    )


def _ar1_factor(p1, p2, j) -> float:
    """Level-j lag-0 coefficient cross-moment of an ar1 pair per unit z."""
    n = 1 << (j - 1)
    a2 = 4.0 ** (-j)
    return (2.0 * n + _g_haar(p1, n) + _g_haar(p2, n)) * a2 / (1.0 - p1 * p2)


def _closed_block_value(kind, vals, a, b, j) -> float:
    tau = 2.0**j
    if kind == "wn":
        return vals["cov"][a, b] / tau
    if kind == "rw":
        return vals["cov"][a, b] * (tau * tau + 2.0) / (12.0 * tau)
    if kind == "qn":
        return 6.0 * vals["q2"][a] / (tau * tau) if a == b else 0.0
    if kind == "ar1":
        return vals["cov"][a, b] * _ar1_factor(vals["phi"][a], vals["phi"][b], j)
    return 0.0  # dr handled through the deterministic mean term


def _drift_totals(spec: ModelSpec, theta: ParamVector) -> np.ndarray:
    """Total per-channel ramp slope (index 0 is channel 1)."""
    totals = np.zeros(spec.I)
    for t, e in enumerate(layout(spec)):
        if e.field == "omega":
            ch = spec.blocks[e.block].channels[e.a]
            totals[ch - 1] += theta.values[t]
    return totals


def theoretical_moment(
    spec: ModelSpec, theta, idx: MomentIndex, method: str = "closed"
) -> float:
    """Model-implied moment at one (i, ip, j) coordinate.

    ``method="closed"`` uses the per-kind closed forms; ``"quadform"`` runs
    the filter quadratic form over the differenced-process covariances.
    Both add the deterministic ramp mean product, computed from the total
    per-channel slope so that ramps on different channels interact
    correctly even across blocks.
    """
    if method not in ("closed", "quadform"):
        raise SpecValidationError(f"unknown method {method!r}")
    theta = as_param_vector(spec, theta)
    i, ip = (idx.i, idx.ip) if idx.i <= idx.ip else (idx.ip, idx.i)
    j = idx.j
    total = 0.0
    for k, blk in enumerate(spec.blocks):
        if i in blk.channels and ip in blk.channels:
            a = blk.channels.index(i)
            b = blk.channels.index(ip)
            vals = theta.block_values(k)
            if method == "closed":
                total += _closed_block_value(blk.kind, vals, a, b, j)
            else:
                total += _quadform_block(blk.kind, vals, a, b, j)
    drifts = _drift_totals(spec, theta)
    if drifts[i - 1] != 0.0 and drifts[ip - 1] != 0.0:
        if method == "closed":
            m = 2.0 ** (j - 2)
            total += drifts[i - 1] * drifts[ip - 1] * m * m
        else:
            s = build_filter(j).c.sum()
            total += drifts[i - 1] * s * drifts[ip - 1] * s
    return total


# --- compiled evaluator for full vectors, Jacobians, and linear structure ---


class MomentModel:
    """Precompiled moment map nu(theta) for a fixed spec and level count.

    The map is linear in every covariance and q2 parameter with
    coefficients that depend only on the ar1 phi values, plus a bilinear
    ramp term in the omega parameters.  The constructor freezes the scatter
    pattern; evaluation is a handful of vector operations.
    """

    def __init__(self, spec: ModelSpec, J: int):
        self.spec = spec
        self.J = int(J)
        if self.J < 1:
            raise SpecValidationError(f"need at least one level, got J={J}")
        self.entries = layout(spec)
        self.p = len(self.entries)
        self.indices = canonical_indices(spec.I, self.J)
        self.dim = len(self.indices)
        self.taus = 2.0 ** np.arange(1, self.J + 1)

        phi_at = {}
        for t, e in enumerate(self.entries):
            if e.field == "phi":
                phi_at[(e.block, e.a)] = t

        # (param position, moment rows, static column or None, phi positions)
        self.linear: list[tuple[int, np.ndarray, np.ndarray | None, int, int]] = []
        self.phi_pos: list[int] = []
        self.omega_pos: dict[int, int] = {}
        for t, e in enumerate(self.entries):
            blk = spec.blocks[e.block]
            if e.field == "phi":
                self.phi_pos.append(t)
                continue
            if e.field == "omega":
                self.omega_pos[blk.channels[e.a]] = t
                continue
            i, ip = blk.channels[e.a], blk.channels[e.b]
            rows = np.array(
                [
                    moment_position(spec.I, self.J, i, ip, j)
                    for j in range(1, self.J + 1)
                ]
            )
            if blk.kind == "wn":
                col = 1.0 / self.taus
            elif blk.kind == "rw":
                col = (self.taus**2 + 2.0) / (12.0 * self.taus)
            elif blk.kind == "qn":
                col = 6.0 / self.taus**2
            else:  # ar1 z entry; column depends on the block's phi values
                self.linear.append(
                    (t, rows, None, phi_at[(e.block, e.a)], phi_at[(e.block, e.b)])
                )
                continue
            self.linear.append((t, rows, col, -1, -1))
        self.linear_pos = [t for (t, _, _, _, _) in self.linear]
        self.fully_linear = not self.phi_pos and not self.omega_pos
        self._drift_pairs = self._build_drift_pairs()

    def _build_drift_pairs(self):
        chans = sorted(self.omega_pos)
        pairs = []
        for ia, i in enumerate(chans):
            for ip in chans[ia:]:
                pair = (i - 1) * (2 * self.spec.I - i + 2) // 2 + (ip - i)
                pairs.append((self.omega_pos[i], self.omega_pos[ip], pair * self.J))
        return pairs

    def _ar1_col(self, p1, p2) -> np.ndarray:
        return np.array([_ar1_factor(p1, p2, j) for j in range(1, self.J + 1)])

    def linear_matrix(self, theta: np.ndarray) -> np.ndarray:
        """Columns d nu / d beta for the linearly entering parameters."""
        M = np.zeros((self.dim, len(self.linear)))
        for col_idx, (t, rows, col, pa, pb) in enumerate(self.linear):
            M[rows, col_idx] = (
                col if col is not None else self._ar1_col(theta[pa], theta[pb])
            )
        return M

    def _drift_term(self, theta: np.ndarray) -> np.ndarray:
        out = np.zeros(self.dim)
        scale = self.taus**2 / 16.0
        for pa, pb, start in self._drift_pairs:
            out[start : start + self.J] += theta[pa] * theta[pb] * scale
        return out

    def vector(self, theta: np.ndarray) -> np.ndarray:
        nu = np.zeros(self.dim)
        for (t, rows, col, pa, pb) in self.linear:
            nu[rows] += theta[t] * (
                col if col is not None else self._ar1_col(theta[pa], theta[pb])
            )
        if self.omega_pos:
            nu += self._drift_term(theta)
        return nu

    def jacobian(self, theta: np.ndarray) -> np.ndarray:
        """d nu / d theta in natural space.

        Covariance/q2 columns and omega columns are analytic; phi columns
        use central finite differences with a step scaled to the value and
        shrunk near the +-1 boundary.
        """
        theta = np.asarray(theta, dtype=float)
        A = np.zeros((self.dim, self.p))
        for (t, rows, col, pa, pb) in self.linear:
            A[rows, t] = col if col is not None else self._ar1_col(theta[pa], theta[pb])
        scale = self.taus**2 / 16.0
        for pa, pb, start in self._drift_pairs:
            sl = slice(start, start + self.J)
            A[sl, pa] += theta[pb] * scale
            A[sl, pb] += theta[pa] * scale
        for t in self.phi_pos:
            v = theta[t]
            h = 1e-6 * max(1.0, abs(v))
            if abs(v) + h >= 1.0:
                h = (1.0 - abs(v)) / 8.0
            tp = theta.copy()
            tm = theta.copy()
            tp[t] = v + h
            tm[t] = v - h
            A[:, t] = (self.vector(tp) - self.vector(tm)) / (2.0 * h)
        return A


@lru_cache(maxsize=64)
def moment_model(spec: ModelSpec, J: int) -> MomentModel:
    return MomentModel(spec, J)


def theoretical_vector(spec: ModelSpec, theta, J: int) -> MomentVector:
    """Model-implied moment vector at levels 1..J in canonical order."""
    theta = as_param_vector(spec, theta)
    model = moment_model(spec, J)
    return MomentVector(values=model.vector(theta.values), I=spec.I, J=J)


def jacobian(spec: ModelSpec, theta, J: int) -> np.ndarray:
    """Moment Jacobian with a rank diagnostic.

    A column-rank-deficient Jacobian means the parameters are not locally
    identified from these moments; a warning is emitted in that case.
    """
    theta = as_param_vector(spec, theta)
    model = moment_model(spec, J)
    A = model.jacobian(theta.values)
    if model.p and np.linalg.matrix_rank(A) < model.p:
        warnings.warn(
            "moment Jacobian is rank deficient; parameters are not locally "
            "identified at this point",
            UserWarning,
            stacklevel=2,
        )
    return A


def restrict_to_channel(spec: ModelSpec, i: int) -> tuple[ModelSpec, list[tuple[int, int]]]:
    """Single-channel restriction of a spec, for per-channel starting fits.

    Returns the restricted spec (channel relabeled to 1, cross terms
    dropped) and (restricted position, full position) pairs mapping its
    parameters back into the full layout.
    """
    if not 1 <= i <= spec.I:
        raise SpecValidationError(f"channel {i} outside 1..{spec.I}")
    blocks = []
    kept: list[tuple[int, int]] = []  # (full block index, in-block channel index)
    for k, blk in enumerate(spec.blocks):
        if i not in blk.channels:
            continue
        a = blk.channels.index(i)
        kwargs = {}
        if blk.cov is not None:
            kwargs["cov"] = ((blk.cov[a][a],),)
        if blk.phi is not None:
            kwargs["phi"] = (blk.phi[a],)
        if blk.q2 is not None:
            kwargs["q2"] = (blk.q2[a],)
        if blk.omega is not None:
            kwargs["omega"] = (blk.omega[a],)
        blocks.append(LatentBlock(kind=blk.kind, channels=(1,), **kwargs))
        kept.append((k, a))
    if not blocks:
        raise SpecValidationError(f"no block loads channel {i}")
    sub = ModelSpec(I=1, blocks=tuple(blocks))
    full_entries = layout(spec)
    mapping = []
    for st, se in enumerate(layout(sub)):
        fk, fa = kept[se.block]
        for ft, fe in enumerate(full_entries):
            if (
                fe.block == fk
                and fe.field == se.field
                and fe.a == fa
                and fe.b == fa
            ):
                mapping.append((st, ft))
                break
    return sub, mapping
