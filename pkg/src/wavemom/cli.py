"""Batch command-line front end.

Four workflows: simulate (spec file to CSV replicates), moments
(empirical wavelet moment table with confidence bands), fit (JSON
report plus a moment table carrying the model-implied values), and
test-dep (parametric bootstrap test of cross-channel dependence).
Outputs are plain CSV/JSON, written atomically; every command with an
explicit seed reruns byte-for-byte.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from dataclasses import dataclass
from typing import Optional

import numpy as np
import yaml

from .errors import DataError, NumericalError, SpecValidationError
from .estimator import dependence_test, fit
from .models import LatentBlock, ModelSpec, ParamVector, ensure_valid, layout
from .moments import (
    confidence_intervals,
    coefficient_stack,
    covariance_from_coefficients,
    default_bandwidth,
    moments_from_coefficients,
)
from .simulate import SimConfig, simulate_batch

__all__ = ["Dataset", "ingest", "read_spec", "main"]

_BLOCK_KINDS = ("wn", "rw", "qn", "dr", "ar1")


# --- dataset ingestion ---


@dataclass(frozen=True)
class Dataset:
    """Validated multichannel table: named channels, rows as samples."""

    channels: tuple[str, ...]
    data: np.ndarray
    rate: Optional[float] = None

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] != len(self.channels):
            raise DataError("dataset channels and data shape disagree")

    @property
    def I(self) -> int:
        return len(self.channels)

    @property
    def T(self) -> int:
        return self.data.shape[1]


def _locate_bad_cell(row, names, line):
    for k, cell in enumerate(row):
        name = names[k] if k < len(names) else f"#{k + 1}"
        s = cell.strip()
        if not s:
            raise DataError(f"line {line}, column {name!r}: missing value")
        try:
            float(s)
        except ValueError:
            raise DataError(
                f"line {line}, column {name!r}: non-numeric cell {s!r}"
            ) from None


def ingest(path, demean: bool = False, columns=None,
           rate: Optional[float] = None) -> Dataset:
    """Read a headered CSV into a Dataset, with cell-level error reports."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        names = [h.strip() for h in header]
        if any(not n for n in names):
            raise DataError(f"{path}: blank column name in header")
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue  # ignore trailing blank lines
            if len(row) != len(names):
                raise DataError(
                    f"line {line}: ragged row with {len(row)} cells, "
                    f"expected {len(names)}"
                )
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                _locate_bad_cell(row, names, line)
    if not rows:
        raise DataError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=float).T
    if not np.all(np.isfinite(data)):
        c, r = np.argwhere(~np.isfinite(data))[0]
        raise DataError(
            f"line {r + 2}, column {names[c]!r}: non-finite value"
        )
    if columns:
        try:
            idx = [names.index(c) for c in columns]
        except ValueError:
            missing = [c for c in columns if c not in names]
            raise DataError(
                f"{path}: unknown column(s) {missing}; file has {names}"
            ) from None
        names = [names[k] for k in idx]
        data = data[idx]
    if demean:
        data = data - data.mean(axis=1, keepdims=True)
    return Dataset(channels=tuple(names), data=data, rate=rate)


# --- model-spec files ---


def _block_from_dict(d, k):
    where = f"block {k + 1}"
    if not isinstance(d, dict):
        raise SpecValidationError(f"{where}: expected an object")
    unknown = set(d) - {"kind", "channels", "correlated", "init"}
    if unknown:
        raise SpecValidationError(f"{where}: unknown keys {sorted(unknown)}")
    kind = d.get("kind")
    if kind not in _BLOCK_KINDS:
        raise SpecValidationError(
            f"{where}: kind must be one of {_BLOCK_KINDS}, got {kind!r}"
        )
    chans = d.get("channels")
    if (not isinstance(chans, list) or not chans
            or not all(isinstance(c, int) and c >= 1 for c in chans)):
        raise SpecValidationError(
            f"{where}: channels must be a list of 1-based integers"
        )
    init = d.get("init", {})
    allowed = {"wn": {"cov"}, "rw": {"cov"}, "qn": {"q2"},
               "dr": {"omega"}, "ar1": {"phi", "cov"}}[kind]
    if not isinstance(init, dict) or set(init) - allowed:
        raise SpecValidationError(
            f"{where}: init for kind {kind!r} accepts only {sorted(allowed)}"
        )

    def tup(key):
        v = init.get(key)
        return tuple(v) if v is not None else None

    def mat(key):
        v = init.get(key)
        if v is None:
            return None
        if isinstance(v, list) and v and isinstance(v[0], list):
            return tuple(tuple(row) for row in v)
        raise SpecValidationError(f"{where}: init.{key} must be a matrix")

    kwargs = dict(channels=tuple(chans))
    if kind in ("wn", "rw", "ar1"):
        kwargs["correlated"] = bool(d.get("correlated", False))
        kwargs["cov"] = mat("cov")
    if kind == "ar1":
        kwargs["phi"] = tup("phi")
    if kind == "qn":
        kwargs["q2"] = tup("q2")
    if kind == "dr":
        kwargs["omega"] = tup("omega")
    return LatentBlock(kind=kind, **kwargs)


def read_spec(path) -> ModelSpec:
    """Parse and validate a model-spec file (JSON, or YAML by suffix)."""
    with open(path) as fh:
        text = fh.read()
    if str(path).endswith((".yaml", ".yml")):
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise SpecValidationError(f"{path}: not valid YAML ({e})") from None
    else:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise SpecValidationError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise SpecValidationError(f"{path}: top level must be an object")
    unknown = set(raw) - {"channels", "blocks"}
    if unknown:
        raise SpecValidationError(f"{path}: unknown keys {sorted(unknown)}")
    I = raw.get("channels")
    if not isinstance(I, int) or I < 1:
        raise SpecValidationError(f"{path}: channels must be a positive integer")
    blocks = raw.get("blocks")
    if not isinstance(blocks, list) or not blocks:
        raise SpecValidationError(f"{path}: blocks must be a non-empty list")
    spec = ModelSpec(
        I=I, blocks=tuple(_block_from_dict(b, k) for k, b in enumerate(blocks))
    )
    ensure_valid(spec)
    return spec


def _spec_summary(spec: ModelSpec) -> dict:
    return {
        "channels": spec.I,
        "blocks": [
            {
                "kind": b.kind,
                "channels": list(b.channels),
                "correlated": bool(b.correlated),
            }
            for b in spec.blocks
        ],
    }


# --- output helpers ---


def _fmt(v) -> str:
    return f"{float(v):.17g}"


def _atomic_write(path: str, text: str) -> None:
    target = os.path.abspath(path)
    fd, tmp = tempfile.mkstemp(
        dir=os.path.dirname(target), prefix=".wavemom-", suffix=".tmp"
    )
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, target)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def _write_json(path: str, report: dict) -> None:
    _atomic_write(
        path, json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n"
    )


def _moment_table(nu, cov, alpha: float, implied=None) -> str:
    """Plot-ready table: signed log-log overlays are a column mapping."""
    lo, hi = confidence_intervals(nu, cov, alpha)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["i", "ip", "j", "tau", "gamma_hat", "sign", "abs_gamma",
            "ci_lo", "ci_hi"]
    if implied is not None:
        head.append("implied")
    w.writerow(head)
    for k, m in enumerate(nu.indices):
        g = nu.values[k]
        row = [m.i, m.ip, m.j, m.tau, _fmt(g),
               "-1" if g < 0 else "1", _fmt(abs(g)), _fmt(lo[k]), _fmt(hi[k])]
        if implied is not None:
            row.append(_fmt(implied[k]))
        w.writerow(row)
    return buf.getvalue()


def _empirical_moments(ds: Dataset, levels, bandwidth, mode: str):
    W = coefficient_stack(ds.data, levels)
    nu = moments_from_coefficients(W)
    cov = covariance_from_coefficients(W, ds.T, bandwidth=bandwidth, mode=mode)
    return nu, cov


# --- commands ---


def cmd_simulate(args) -> int:
    spec = read_spec(args.spec)
    ParamVector.from_spec(spec)  # clear error before any file is touched
    cfg = SimConfig(spec=spec, T=args.T, seed=args.seed)
    base, ext = os.path.splitext(args.out)
    paths = (
        [args.out] if args.replicates == 1
        else [f"{base}_r{k + 1}{ext or '.csv'}" for k in range(args.replicates)]
    )
    names = [f"ch{i + 1}" for i in range(spec.I)]
    for path, x in zip(paths, simulate_batch(cfg, args.replicates)):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for t in range(x.shape[1]):
            w.writerow([_fmt(v) for v in x[:, t]])
        _atomic_write(path, buf.getvalue())
    print(f"wrote {len(paths)} file(s): {', '.join(paths)}")
    return 0


def cmd_moments(args) -> int:
    ds = ingest(args.data, demean=args.demean, columns=args.columns,
                rate=args.rate)
    nu, cov = _empirical_moments(ds, args.levels, args.bandwidth, "diag")
    _atomic_write(args.out, _moment_table(nu, cov, args.alpha))
    print(f"wrote {args.out}: {nu.dim} moment rows "
          f"(I={ds.I}, J={nu.J}, T={ds.T})")
    return 0


def cmd_fit(args) -> int:
    ds = ingest(args.data, demean=args.demean, columns=args.columns,
                rate=args.rate)
    spec = read_spec(args.spec)
    if ds.I != spec.I:
        raise SpecValidationError(
            f"data has {ds.I} channels but the spec declares {spec.I}"
        )
    try:
        theta0 = ParamVector.from_spec(spec).values
    except SpecValidationError:
        theta0 = None  # structure-only spec: derive starting values
    res = fit(
        ds.data, spec, J=args.levels, weighting=args.weighting,
        bandwidth=args.bandwidth, compute_se=True, theta0=theta0,
    )
    names = [e.name for e in layout(spec)]
    report = {
        "command": "fit",
        "data": {"path": args.data, "channels": list(ds.channels),
                 "T": ds.T, "rate": ds.rate},
        "spec": _spec_summary(spec),
        "settings": {
            "levels": res.nu_hat.J,
            "bandwidth": (args.bandwidth if args.bandwidth is not None
                          else default_bandwidth(ds.T)),
            "weighting": args.weighting,
            "alpha": args.alpha,
            "seed": args.seed,
        },
        "objective": res.objective_value,
        "converged": res.converged,
        "diagnostics": res.diagnostics,
        "parameters": [
            {"name": n, "estimate": v,
             "se": None if res.se is None else res.se[k]}
            for k, (n, v) in enumerate(zip(names, res.theta.values))
        ],
        "xi": res.xi,
        "moments": {
            "empirical": res.nu_hat.values,
            "implied": res.implied.values,
        },
    }
    _write_json(args.out, report)
    moments_out = args.moments_out
    if moments_out is None:
        stem, _ = os.path.splitext(args.out)
        moments_out = f"{stem}_moments.csv"
    _, cov = _empirical_moments(ds, res.nu_hat.J, args.bandwidth, "diag")
    _atomic_write(
        moments_out,
        _moment_table(res.nu_hat, cov, args.alpha, implied=res.implied.values),
    )
    print(f"wrote {args.out} and {moments_out}; objective "
          f"{res.objective_value:.6g}, converged={res.converged}")
    return 0 if res.converged else 3


def cmd_testdep(args) -> int:
    ds = ingest(args.data, demean=args.demean, columns=args.columns,
                rate=args.rate)
    spec = read_spec(args.spec)
    if ds.I != spec.I:
        raise SpecValidationError(
            f"data has {ds.I} channels but the spec declares {spec.I}"
        )
    res = dependence_test(
        ds.data, spec, B=args.bootstrap, seed=args.seed, J=args.levels,
        weighting=args.weighting, bandwidth=args.bandwidth,
    )
    report = {
        "command": "test-dep",
        "data": {"path": args.data, "channels": list(ds.channels), "T": ds.T},
        "spec": _spec_summary(spec),
        "settings": {"bootstrap": res.B, "seed": args.seed,
                     "alpha": args.alpha, "weighting": args.weighting},
        "stat": res.stat,
        "p_value": res.p_value,
        "reject": bool(res.p_value <= args.alpha),
        "dropped": res.dropped,
        "boot_dist": res.boot_dist,
        "objective_full": res.fit_full.objective_value,
        "objective_null": res.fit_null.objective_value,
    }
    _write_json(args.out, report)
    print(f"wrote {args.out}: stat {res.stat:.6g}, p = {res.p_value:.4g}")
    ok = res.fit_full.converged and res.fit_null.converged
    return 0 if ok else 3


# --- argument parsing ---


def _add_data_options(sp):
    sp.add_argument("--data", required=True, help="input CSV with header row")
    sp.add_argument("--demean", action="store_true",
                    help="remove each channel's mean after ingest")
    sp.add_argument("--columns", type=lambda s: s.split(","), default=None,
                    help="comma-separated channel names to keep, in order")
    sp.add_argument("--rate", type=float, default=None,
                    help="sampling rate in Hz (metadata only)")


def _add_moment_options(sp):
    sp.add_argument("--levels", type=int, default=None,
                    help="number of decomposition levels (default: deepest usable)")
    sp.add_argument("--bandwidth", type=int, default=None,
                    help="HAC truncation lag (default: floor(T^(1/3)); "
                         "increase toward 2^(levels+1) for walk-like signals)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="wavemom",
        description="Latent stochastic-error models matched to wavelet "
                    "cross-covariances: simulate, summarize, fit, and test "
                    "cross-channel dependence.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1,
                        help="reserved; the implementation is single-threaded")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", parents=[common],
                        help="draw series from a model-spec file")
    sp.add_argument("--spec", required=True, help="JSON model-spec file")
    sp.add_argument("--T", type=int, required=True, help="samples per channel")
    sp.add_argument("--replicates", "-R", type=int, default=1)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True,
                    help="output CSV (R>1 appends _r1.._rR)")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("moments", parents=[common],
                        help="empirical moment table with confidence bands")
    _add_data_options(sp)
    _add_moment_options(sp)
    sp.add_argument("--alpha", type=float, default=0.05,
                    help="two-sided band level (default 0.05)")
    sp.add_argument("--out", required=True, help="output CSV table")
    sp.set_defaults(func=cmd_moments)

    sp = sub.add_parser("fit", parents=[common],
                        help="estimate a model-spec from data")
    _add_data_options(sp)
    _add_moment_options(sp)
    sp.add_argument("--spec", required=True, help="JSON model-spec file")
    sp.add_argument("--weighting", choices=("diag", "full"), default="diag")
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--seed", type=int, default=None,
                    help="recorded in the report; the fit itself is "
                         "deterministic")
    sp.add_argument("--out", required=True, help="output JSON report")
    sp.add_argument("--moments-out", default=None,
                    help="moment table with the implied column "
                         "(default: <out>_moments.csv)")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("test-dep", parents=[common],
                        help="parametric bootstrap test of cross-channel "
                             "dependence")
    _add_data_options(sp)
    _add_moment_options(sp)
    sp.add_argument("--spec", required=True, help="JSON model-spec file")
    sp.add_argument("--weighting", choices=("diag", "full"), default="diag")
    sp.add_argument("--bootstrap", "-B", type=int, default=99)
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True, help="output JSON report")
    sp.set_defaults(func=cmd_testdep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise SpecValidationError("--threads must be at least 1")
        return args.func(args)
    except (SpecValidationError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
