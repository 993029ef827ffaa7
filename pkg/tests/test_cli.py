import csv
import json

import numpy as np
import pytest

from mixedmds import cli, ingest, sampler
from mixedmds.cli import EXIT_DIAGNOSTICS, EXIT_OK, EXIT_VALIDATION

from conftest import make_state


def write_config(path, **cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def read_table(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


QUICK = ["--n-iter", "400", "--burn-in", "100", "--thin", "5"]


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    args = ["--out", str(out), "--seed", "4", "--chains", "2"] + QUICK
    assert cli.main(["simulate"] + args) == EXIT_OK
    assert cli.main(["fit"] + args) == EXIT_OK
    return out, args


@pytest.mark.trivial
def test_simulate_default_counts_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["simulate", "--out", str(a)]) == EXIT_OK
    assert cli.main(["simulate", "--out", str(b)]) == EXIT_OK
    rows = read_table(a / "data.csv")
    assert len(rows) == 168
    assert (a / "data.csv").read_bytes() == (b / "data.csv").read_bytes()
    assert (a / "truth.json").read_bytes() == (b / "truth.json").read_bytes()


@pytest.mark.trivial
def test_simulate_minimal_spec(tmp_path):
    cfg = write_config(tmp_path / "c.json", synthetic={"S": 2, "n": [3, 2], "H_true": 1, "feature_scales": [1.0]})
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
    rows = read_table(tmp_path / "o" / "data.csv")
    assert len(rows) == 5
    assert {(r["s"], r["r"]) for r in rows} == {("2", "1")}


def test_bad_synthetic_spec_exits_nonzero(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", synthetic={"S": 3, "H_true": 3})
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
    assert "error" in capsys.readouterr().err


def test_unknown_config_key(tmp_path):
    cfg = write_config(tmp_path / "c.json", sched={"n_iter": 5})
    assert cli.main(["simulate", "--config", cfg]) == EXIT_VALIDATION


@pytest.mark.trivial
def test_fit_two_chains(fitted):
    out, _ = fitted
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["chain_seeds"] == [4, 5]
    assert manifest["draws_per_chain"] == [60, 60]
    a, b = (cli.load_chain(out / f) for f in manifest["chain_files"])
    assert not np.array_equal(a.stack("sigma2"), b.stack("sigma2"))


@pytest.mark.trivial
def test_config_hash_ignores_seed_and_location(fitted, tmp_path):
    out, _ = fitted
    other = tmp_path / "other"
    args = ["--out", str(other), "--seed", "11", "--chains", "2", "--data", str(out / "data.csv")] + QUICK
    assert cli.main(["fit"] + args) == EXIT_OK
    first = json.loads((out / "manifest.json").read_text())
    second = json.loads((other / "manifest.json").read_text())
    assert second["chain_seeds"] == [11, 12]
    assert first["data_sha256"] == second["data_sha256"]
    # an explicit data path is part of the config, so compare against the same config without it
    base = cli.load_config(None, {"seed": 11, "out": str(other), "chains": 2,
                                  "schedule": {"n_iter": 400, "burn_in": 100, "thin": 5}})
    assert first["config_hash"] == cli.config_hash(base)
    assert cli.config_hash(dict(base, seed=99, out="elsewhere", workers=3)) == cli.config_hash(base)


def test_fit_is_skipped_when_up_to_date(fitted, caplog):
    out, args = fitted
    before = (out / "chains" / "chain_01.npz").stat().st_mtime_ns
    with caplog.at_level("INFO"):
        assert cli.main(["fit", "-v"] + args) == EXIT_OK
    assert "already present" in caplog.text
    assert (out / "chains" / "chain_01.npz").stat().st_mtime_ns == before


def test_chain_round_trip(fitted):
    out, _ = fitted
    chain = cli.load_chain(out / "chains" / "chain_01.npz")
    again = cli.chain_from_arrays(cli.chain_to_arrays(chain))
    np.testing.assert_array_equal(again.stack("sigma2"), chain.stack("sigma2"))
    np.testing.assert_array_equal(again.H_trace, chain.H_trace)
    assert cli.npz_bytes(cli.chain_to_arrays(again)) == cli.npz_bytes(cli.chain_to_arrays(chain))


def test_full_pipeline_tables(fitted):
    out, args = fitted
    assert cli.main(["postprocess"] + args) == EXIT_OK
    assert cli.main(["diagnose"] + args) in (EXIT_OK, EXIT_DIAGNOSTICS)
    assert cli.main(["summarize"] + args) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    tables = sorted((out / "tables").glob("*.csv"))
    assert {t.stem for t in tables} == {"group_distances", "individual_distances", "noise", "dimensions",
                                        "features", "weights", "traces"}
    for t in tables:
        rows = read_table(t)
        assert rows and all(r["config_hash"] == manifest["config_hash"] for r in rows)
    assert len(read_table(out / "tables" / "individual_distances.csv")) == 168
    assert len(read_table(out / "tables" / "group_distances.csv")) == 12
    for r in read_table(out / "tables" / "group_distances.csv"):
        assert float(r["lower"]) <= float(r["median"]) <= float(r["upper"])
    log = read_table(out / "perm_log.csv")
    assert len(log) == sum(manifest["draws_per_chain"])
    json.loads((out / "diagnostics.json").read_text())


def test_missing_artifact(tmp_path, capsys):
    for stage in ("fit", "postprocess", "diagnose"):
        assert cli.main([stage, "--out", str(tmp_path / "empty")]) == EXIT_VALIDATION
    assert "missing artifact" in capsys.readouterr().err


def test_invalid_dataset_lists_rows(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("group,subject,s,r,d\n1,1,2,1,0.5\n1,1,3,1,-2\n1,1,3,2,0.4\n")
    assert cli.main(["fit", "--data", str(bad), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
    err = capsys.readouterr().err
    assert "validation error" in err and "(3," in err


def _handmade_run(tmp_path, states_per_chain):
    """Store hand-built chains plus a matching manifest."""
    out = tmp_path / "hand"
    data, _ = ingest.generate_synthetic(ingest.SyntheticSpec(S=4, n=(2, 2), H_true=2, seed=3))
    cli.atomic_write_text(out / "data.csv", ingest.format_distances_csv(data))
    files = []
    for k, states in enumerate(states_per_chain):
        T = len(states)
        chain = sampler.ChainOutput(draws=states, iterations=np.arange(T), H_trace=np.full(T, states[0].H),
                                    D_trace=np.zeros(T), accept_rates={"eta": [0.4]},
                                    meta={"burn_in": 0, "frozen_H": states[0].H})
        path = out / "chains" / f"chain_{k + 1:02d}.npz"
        cli.save_chain(path, chain)
        files.append(str(path.relative_to(out)))
    cli.write_json(out / "manifest.json", {"config_hash": "x", "chain_files": files})
    return ["--out", str(out)]


@pytest.mark.trivial
def test_summarize_constant_chain_has_zero_width(tmp_path):
    base = make_state(S=4, H=2, n=(2, 2), seed=5)
    args = _handmade_run(tmp_path, [[base.copy() for _ in range(12)]])
    assert cli.main(["postprocess"] + args) == EXIT_OK
    assert cli.main(["summarize"] + args) == EXIT_OK
    out = tmp_path / "hand" / "tables"
    for name in ("group_distances", "individual_distances", "noise", "features", "weights"):
        for r in read_table(out / f"{name}.csv"):
            assert float(r["upper"]) - float(r["lower"]) == pytest.approx(0.0, abs=1e-12)


def test_diagnose_separated_chains_exit_code(tmp_path):
    a = make_state(S=4, H=2, n=(2, 2), seed=6)
    b = a.copy()
    b.sigma2 = a.sigma2 + 5.0
    b.eta = 3.0 * a.eta
    rng = np.random.default_rng(0)
    chains = []
    for base in (a, b):
        states = []
        for _ in range(20):
            s = base.copy()
            s.eta = base.eta + 1e-3 * rng.normal(size=base.eta.shape)
            states.append(s)
        chains.append(states)
    args = _handmade_run(tmp_path, chains)
    assert cli.main(["diagnose"] + args) == EXIT_DIAGNOSTICS
    report = json.loads((tmp_path / "hand" / "diagnostics.json").read_text())
    assert "sigma2[0]" in report["flags"] and "mpsrf" in report["flags"]


def test_identical_chains_diagnose_ok(tmp_path):
    rng = np.random.default_rng(1)
    base = make_state(S=4, H=2, n=(2, 2), seed=7)
    states = []
    for _ in range(20):
        s = base.copy()
        s.eta = base.eta + 0.01 * rng.normal(size=base.eta.shape)
        s.sigma2 = base.sigma2 * np.exp(0.01 * rng.normal(size=2))
        states.append(s)
    args = _handmade_run(tmp_path, [states, [s.copy() for s in states]])
    assert cli.main(["diagnose"] + args) == EXIT_OK
