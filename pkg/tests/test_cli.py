"""End-to-end checks for the command-line front end.

Most tests drive main() in-process for speed; one subprocess smoke test
confirms the module entry point wiring. File outputs go to tmp_path.
"""

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from wavemom.cli import Dataset, ingest, main, read_spec
from wavemom.errors import DataError, SpecValidationError
from wavemom.models import n_params
from wavemom.moments import moment_vector
from wavemom.simulate import SimConfig, simulate

from cases import spec_wnrw2

SPEC3_PATH = "docs/examples/three-channel-wn-corr-rw.json"
SPEC1_PATH = "docs/examples/one-channel-wn-rw-qn-dr.json"


def _write_csv(path, data, names=None):
    I = data.shape[0]
    names = names or [f"ch{i + 1}" for i in range(I)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for t in range(data.shape[1]):
            w.writerow([f"{v:.17g}" for v in data[:, t]])
    return str(path)


def _simulated_csv(tmp_path, spec, T, seed, name="data.csv"):
    x = simulate(SimConfig(spec=spec, T=T, seed=seed))
    return _write_csv(tmp_path / name, x), x


# --- ingestion ---


def test_ingest_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 64))
    path = _write_csv(tmp_path / "x.csv", x, names=["gyro_x", "gyro_y"])
    ds = ingest(path, rate=100.0)
    assert ds.channels == ("gyro_x", "gyro_y")
    assert ds.I == 2 and ds.T == 64
    assert ds.rate == 100.0
    assert np.allclose(ds.data, x, rtol=0, atol=0)


def test_ingest_column_subset_and_demean(tmp_path):
    rng = np.random.default_rng(1)
    x = rng.normal(loc=3.0, size=(3, 50))
    path = _write_csv(tmp_path / "x.csv", x, names=["a", "b", "c"])
    ds = ingest(path, demean=True, columns=["c", "a"])
    assert ds.channels == ("c", "a")
    assert np.allclose(ds.data.mean(axis=1), 0.0, atol=1e-12)
    assert np.allclose(ds.data[0], x[2] - x[2].mean())


def test_ingest_reports_ragged_row(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("a,b\n1.0,2.0\n3.0\n")
    with pytest.raises(DataError, match="line 3"):
        ingest(str(p))


def test_ingest_reports_bad_cell(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("a,b\n1.0,2.0\n3.0,oops\n")
    with pytest.raises(DataError, match=r"line 3, column 'b'.*oops"):
        ingest(str(p))
    p.write_text("a,b\n1.0,\n")
    with pytest.raises(DataError, match=r"line 2, column 'b': missing"):
        ingest(str(p))
    p.write_text("a,b\n1.0,nan\n")
    with pytest.raises(DataError, match="non-finite"):
        ingest(str(p))


def test_ingest_rejects_empty_and_unknown_column(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    with pytest.raises(DataError, match="empty"):
        ingest(str(p))
    p.write_text("a,b\n")
    with pytest.raises(DataError, match="no data rows"):
        ingest(str(p))
    p.write_text("a,b\n1.0,2.0\n")
    with pytest.raises(DataError, match="unknown column"):
        ingest(str(p), columns=["z"])


def test_dataset_shape_guard():
    with pytest.raises(DataError):
        Dataset(channels=("a",), data=np.zeros((2, 4)))


# --- model-spec files ---


def test_read_spec_shipped_examples():
    spec3 = read_spec(SPEC3_PATH)
    assert spec3.I == 3 and len(spec3.blocks) == 2
    assert spec3.blocks[1].correlated
    spec1 = read_spec(SPEC1_PATH)
    assert spec1.I == 1
    assert tuple(b.kind for b in spec1.blocks) == ("wn", "rw", "qn", "dr")


def test_read_spec_yaml(tmp_path):
    p = tmp_path / "m.yaml"
    p.write_text(
        "channels: 1\n"
        "blocks:\n"
        "  - kind: wn\n"
        "    channels: [1]\n"
        "    init:\n"
        "      cov: [[0.5]]\n"
    )
    spec = read_spec(str(p))
    assert spec.I == 1 and spec.blocks[0].kind == "wn"


@pytest.mark.parametrize(
    "text,msg",
    [
        ("{not json", "not valid JSON"),
        ('{"channels": 0, "blocks": []}', "positive integer"),
        ('{"channels": 1, "blocks": []}', "non-empty"),
        ('{"channels": 1, "blocks": [{"kind": "foo", "channels": [1]}]}',
         "kind"),
        ('{"channels": 1, "blocks": [{"kind": "wn", "channels": [0]}]}',
         "1-based"),
        ('{"channels": 1, "blocks": [{"kind": "wn", "channels": [1], '
         '"extra": 1}]}', "unknown keys"),
        ('{"channels": 1, "blocks": [{"kind": "qn", "channels": [1], '
         '"init": {"cov": [[1.0]]}}]}', "init"),
        ('{"channels": 2, "blocks": [{"kind": "rw", "channels": [1, 2], '
         '"correlated": true, "init": {"cov": [[1.0, 0.2], [0.3, 1.0]]}}]}',
         "symmetric"),
    ],
)
def test_read_spec_rejects(tmp_path, text, msg):
    p = tmp_path / "bad.json"
    p.write_text(text)
    with pytest.raises(SpecValidationError, match=msg):
        read_spec(str(p))


# --- simulate command ---


def test_simulate_cli_matches_library(tmp_path):
    out = tmp_path / "sim.csv"
    rc = main(["simulate", "--spec", SPEC3_PATH, "--T", "512",
               "--seed", "42", "--out", str(out)])
    assert rc == 0
    ds = ingest(str(out))
    x = simulate(SimConfig(spec=read_spec(SPEC3_PATH), T=512, seed=42))
    assert ds.channels == ("ch1", "ch2", "ch3")
    assert np.array_equal(ds.data, x)


def test_simulate_cli_replicate_suffixes(tmp_path):
    out = tmp_path / "sim.csv"
    rc = main(["simulate", "--spec", SPEC1_PATH, "--T", "128",
               "--seed", "7", "--replicates", "3", "--out", str(out)])
    assert rc == 0
    assert not out.exists()
    reps = [ingest(str(tmp_path / f"sim_r{k}.csv")) for k in (1, 2, 3)]
    assert all(r.T == 128 for r in reps)
    assert not np.array_equal(reps[0].data, reps[1].data)


def test_simulate_cli_requires_values(tmp_path):
    p = tmp_path / "bare.json"
    p.write_text('{"channels": 1, "blocks": [{"kind": "wn", "channels": [1]}]}')
    rc = main(["simulate", "--spec", str(p), "--T", "64", "--seed", "1",
               "--out", str(tmp_path / "x.csv")])
    assert rc == 2
    assert not (tmp_path / "x.csv").exists()


# --- moments command ---


def test_moments_cli_table(tmp_path):
    path, x = _simulated_csv(tmp_path, spec_wnrw2(0.012), 2048, seed=5)
    out = tmp_path / "mom.csv"
    rc = main(["moments", "--data", path, "--out", str(out),
               "--levels", "6", "--bandwidth", "64"])
    assert rc == 0
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    nu = moment_vector(x, 6)
    assert len(rows) == nu.dim
    got = np.array([float(r["gamma_hat"]) for r in rows])
    assert np.array_equal(got, nu.values)  # 17 digits round-trips exactly
    for r in rows:
        g = float(r["gamma_hat"])
        assert int(r["tau"]) == 2 ** int(r["j"])
        assert float(r["sign"]) == (-1.0 if g < 0 else 1.0)
        assert float(r["abs_gamma"]) == abs(g)
        assert float(r["ci_lo"]) <= g <= float(r["ci_hi"])


# --- fit command ---


def test_fit_cli_report(tmp_path):
    path, _ = _simulated_csv(tmp_path, spec_wnrw2(0.012), 4096, seed=11)
    out = tmp_path / "fit.json"
    rc = main(["fit", "--data", path, "--spec", SPEC3_PATH,
               "--out", str(out)])
    assert rc == 2  # channel count mismatch, caught before fitting

    spec_path = tmp_path / "wr2.json"
    spec_path.write_text(json.dumps({
        "channels": 2,
        "blocks": [
            {"kind": "wn", "channels": [1, 2],
             "init": {"cov": [[0.5, 0.0], [0.0, 0.8]]}},
            {"kind": "rw", "channels": [1, 2], "correlated": True,
             "init": {"cov": [[0.02, 0.012], [0.012, 0.03]]}},
        ],
    }))
    rc = main(["fit", "--data", path, "--spec", str(spec_path),
               "--out", str(out), "--levels", "6", "--bandwidth", "128",
               "--seed", "3"])
    assert rc == 0
    report = json.loads(out.read_text())
    assert report["converged"] is True
    assert report["settings"] == {
        "levels": 6, "bandwidth": 128, "weighting": "diag",
        "alpha": 0.05, "seed": 3,
    }
    names = [p["name"] for p in report["parameters"]]
    assert len(names) == n_params(spec_wnrw2(0.012))
    assert all(p["se"] > 0 for p in report["parameters"])
    assert len(report["moments"]["empirical"]) == len(
        report["moments"]["implied"])
    xi = np.asarray(report["xi"])
    assert xi.shape == (len(names), len(names))

    table = tmp_path / "fit_moments.csv"
    with open(table, newline="") as fh:
        rows = list(csv.DictReader(fh))
    implied = np.array([float(r["implied"]) for r in rows])
    assert np.array_equal(implied, np.asarray(report["moments"]["implied"]))


def test_fit_cli_rerun_is_byte_identical(tmp_path):
    path, _ = _simulated_csv(tmp_path, spec_wnrw2(0.0), 1024, seed=2)
    spec_path = tmp_path / "wr2.json"
    spec_path.write_text(json.dumps({
        "channels": 2,
        "blocks": [
            {"kind": "wn", "channels": [1, 2],
             "init": {"cov": [[0.5, 0.0], [0.0, 0.8]]}},
            {"kind": "rw", "channels": [1, 2],
             "init": {"cov": [[0.02, 0.0], [0.0, 0.03]]}},
        ],
    }))
    args = ["fit", "--data", path, "--spec", str(spec_path),
            "--levels", "5", "--bandwidth", "32", "--seed", "9"]
    out1, out2 = tmp_path / "a.json", tmp_path / "b.json"
    assert main(args + ["--out", str(out1)]) == 0
    assert main(args + ["--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    a = (tmp_path / "a_moments.csv").read_bytes()
    b = (tmp_path / "b_moments.csv").read_bytes()
    assert a == b


def test_fit_cli_structure_only_spec(tmp_path):
    path, _ = _simulated_csv(tmp_path, spec_wnrw2(0.012), 4096, seed=13)
    spec_path = tmp_path / "bare.json"
    spec_path.write_text(json.dumps({
        "channels": 2,
        "blocks": [
            {"kind": "wn", "channels": [1, 2]},
            {"kind": "rw", "channels": [1, 2], "correlated": True},
        ],
    }))
    out = tmp_path / "fit.json"
    rc = main(["fit", "--data", path, "--spec", str(spec_path),
               "--out", str(out), "--levels", "6", "--bandwidth", "128"])
    assert rc == 0
    report = json.loads(out.read_text())
    est = {p["name"]: p["estimate"] for p in report["parameters"]}
    assert est["b1.sigma(1)"] > 0 and est["b2.lambda(2)"] > 0


# --- test-dep command ---


def test_testdep_cli_report(tmp_path):
    path, _ = _simulated_csv(tmp_path, spec_wnrw2(0.0), 2048, seed=21)
    spec_path = tmp_path / "wr2.json"
    spec_path.write_text(json.dumps({
        "channels": 2,
        "blocks": [
            {"kind": "wn", "channels": [1, 2],
             "init": {"cov": [[0.5, 0.0], [0.0, 0.8]]}},
            {"kind": "rw", "channels": [1, 2], "correlated": True,
             "init": {"cov": [[0.02, 0.0], [0.0, 0.03]]}},
        ],
    }))
    out = tmp_path / "dep.json"
    rc = main(["test-dep", "--data", path, "--spec", str(spec_path),
               "--out", str(out), "--bootstrap", "19", "--seed", "4",
               "--levels", "5", "--bandwidth", "64"])
    assert rc == 0
    report = json.loads(out.read_text())
    assert 0.0 < report["p_value"] <= 1.0
    assert report["stat"] >= 0.0
    assert len(report["boot_dist"]) == 19 - report["dropped"]
    assert report["reject"] == (report["p_value"] <= 0.05)
    assert report["objective_null"] >= report["objective_full"] - 1e-9


# --- plumbing ---


def test_cli_exit_codes(tmp_path):
    rc = main(["moments", "--data", str(tmp_path / "none.csv"),
               "--out", str(tmp_path / "x.csv")])
    assert rc == 4
    bad = tmp_path / "bad.csv"
    bad.write_text("a\n1.0\nzz\n")
    rc = main(["moments", "--data", str(bad), "--out", str(tmp_path / "x.csv")])
    assert rc == 2
    rc = main(["simulate", "--spec", SPEC1_PATH, "--T", "64", "--seed", "1",
               "--threads", "0", "--out", str(tmp_path / "x.csv")])
    assert rc == 2


def test_cli_threads_flag_is_accepted(tmp_path):
    rc = main(["simulate", "--spec", SPEC1_PATH, "--T", "64", "--seed", "1",
               "--threads", "4", "--out", str(tmp_path / "x.csv")])
    assert rc == 0


def test_module_entry_point():
    res = subprocess.run(
        [sys.executable, "-m", "wavemom.cli", "--help"],
        capture_output=True, text=True,
    )
    assert res.returncode == 0
    for word in ("simulate", "moments", "fit", "test-dep"):
        assert word in res.stdout
