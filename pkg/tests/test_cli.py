import csv
import json

import numpy as np
import pytest

from bgfe import chain_io
from bgfe.cli import main
from bgfe.dgp import DgpConfig, generate_simple_dgp
from bgfe.dp_prior import DpHyper
from bgfe.gibbs import run_chain
from bgfe.panel import ModelConfig, write_panel


@pytest.fixture(scope="module")
def panel_csv(tmp_path_factory):
    rng = np.random.default_rng(0)
    data, _ = generate_simple_dgp(DgpConfig(dgp_id=1, n=16, t=8), rng)
    path = tmp_path_factory.mktemp("data") / "panel.csv"
    write_panel(data, path)
    return path


@pytest.fixture(scope="module")
def pregroup_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "pregroup.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit", "prior_group"])
        for unit in range(1, 9):
            writer.writerow([unit, "a" if unit <= 4 else "b"])
    return path


class TestChainIo:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        data, _ = generate_simple_dgp(DgpConfig(dgp_id=1, n=10, t=7), rng)
        chain = run_chain(data, ModelConfig.for_data(data, heteroskedastic=False),
                          DpHyper.default(1, q=1), 20, 15, rng)
        csv_path = tmp_path / "chain.csv"
        meta_path = tmp_path / "chain_meta.json"
        chain_io.save_chain(chain, csv_path, meta_path, extra_meta={"seed": 1})
        back = chain_io.load_chain(csv_path, meta_path)
        assert np.array_equal(back.g, chain.g)
        assert np.array_equal(back.k, chain.k)
        assert np.array_equal(back.a, chain.a)
        assert np.array_equal(back.loglik, chain.loglik)
        assert np.array_equal(back.gamma, chain.gamma)
        for a1, a2 in zip(back.alpha, chain.alpha):
            assert np.array_equal(a1, a2)
        for s1, s2 in zip(back.sigma2, chain.sigma2):
            assert np.array_equal(s1, s2)
        assert back.meta["seed"] == 1

    def test_config_hash_stable(self):
        payload = {"b": 2, "a": [1, 2]}
        assert chain_io.config_hash(payload) == chain_io.config_hash(
            {"a": [1, 2], "b": 2}
        )


class TestEstimateCommand:
    def test_artifacts_written(self, panel_csv, tmp_path):
        out = tmp_path / "run"
        code = main([
            "estimate", "--panel", str(panel_csv), "--burn", "30", "--keep", "20",
            "--seed", "3", "--homoskedastic", "--out", str(out),
        ])
        assert code == 0
        for name in ("chain.csv", "chain_meta.json", "psm.csv", "partition.json",
                     "posterior-summary.json", "resolved_config.json"):
            assert (out / name).exists(), name
        partition = json.loads((out / "partition.json").read_text())
        assert len(partition["groups"]) == 16

    def test_missing_panel_is_usage_error(self, tmp_path):
        code = main([
            "estimate", "--panel", str(tmp_path / "nope.csv"),
            "--out", str(tmp_path / "o"),
        ])
        assert code == 2

    def test_determinism_bitwise(self, panel_csv, tmp_path):
        outs = []
        for run in ("a", "b"):
            out = tmp_path / run
            code = main([
                "estimate", "--panel", str(panel_csv), "--burn", "25",
                "--keep", "25", "--seed", "11", "--homoskedastic",
                "--out", str(out),
            ])
            assert code == 0
            outs.append((out / "chain.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_c_grid_writes_mdd(self, panel_csv, pregroup_csv, tmp_path):
        out = tmp_path / "grid"
        code = main([
            "estimate", "--panel", str(panel_csv), "--pregroup", str(pregroup_csv),
            "--burn", "15", "--keep", "15", "--seed", "4", "--homoskedastic",
            "--c-grid", "0,0.5", "--out", str(out),
        ])
        assert code == 0
        mdd = json.loads((out / "mdd.json").read_text())
        assert mdd["c_star"] in (0.0, 0.5)
        assert len(mdd["log_mdd"]) == 2


class TestForecastCommand:
    def test_holdout_metrics(self, panel_csv, tmp_path):
        out = tmp_path / "fc"
        code = main([
            "forecast", "--panel", str(panel_csv), "--burn", "30", "--keep", "30",
            "--seed", "5", "--homoskedastic", "--holdout", "1", "--out", str(out),
        ])
        assert code == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert set(metrics) == {"rmsfe", "coverage", "avg_length", "lps", "crps"}
        rows = list(csv.DictReader(open(out / "forecast.csv")))
        assert len(rows) == 16
        assert {"unit", "point", "lower", "upper"} <= set(rows[0])

    def test_without_outcomes_metrics_omitted(self, panel_csv, tmp_path):
        out = tmp_path / "fc2"
        code = main([
            "forecast", "--panel", str(panel_csv), "--burn", "15", "--keep", "15",
            "--seed", "6", "--homoskedastic", "--holdout", "0", "--out", str(out),
        ])
        assert code == 0
        assert not (out / "metrics.json").exists()
        assert (out / "forecast.csv").exists()

    def test_reuses_saved_chain(self, panel_csv, tmp_path):
        est_out = tmp_path / "est"
        main([
            "estimate", "--panel", str(panel_csv), "--burn", "30", "--keep", "30",
            "--seed", "7", "--homoskedastic", "--out", str(est_out),
        ])
        fc_out = tmp_path / "fc3"
        code = main([
            "forecast", "--panel", str(panel_csv), "--chain",
            str(est_out / "chain.csv"), "--holdout", "1", "--out", str(fc_out),
        ])
        assert code == 0
        assert (fc_out / "metrics.json").exists()


class TestOtherCommands:
    def test_pregroup_roundtrip(self, panel_csv, pregroup_csv, tmp_path):
        out = tmp_path / "constraints.csv"
        code = main([
            "pregroup", "--panel", str(panel_csv), "--pregroup", str(pregroup_csv),
            "--out", str(out),
        ])
        assert code == 0
        rows = list(csv.DictReader(open(out)))
        # 8 labeled units in two blocks of 4: 2 * C(4,2) PL + 16 NL
        assert len(rows) == 12 + 16

    def test_psm_and_partition_from_chain(self, panel_csv, tmp_path):
        est_out = tmp_path / "est2"
        main([
            "estimate", "--panel", str(panel_csv), "--burn", "25", "--keep", "25",
            "--seed", "8", "--homoskedastic", "--out", str(est_out),
        ])
        psm_out = tmp_path / "psm.csv"
        code = main(["psm", "--chain", str(est_out / "chain.csv"),
                     "--chain-meta", str(est_out / "chain_meta.json"),
                     "--out", str(psm_out)])
        assert code == 0
        part_out = tmp_path / "part.json"
        code = main(["partition", "--chain", str(est_out / "chain.csv"),
                     "--chain-meta", str(est_out / "chain_meta.json"),
                     "--out", str(part_out)])
        assert code == 0
        payload = json.loads(part_out.read_text())
        assert payload["k"] >= 1

    def test_spc_gfe_command(self, panel_csv, tmp_path):
        out = tmp_path / "gfe"
        code = main([
            "spc-gfe", "--panel", str(panel_csv), "--k", "4", "--seed", "2",
            "--out", str(out),
        ])
        assert code == 0
        payload = json.loads((out / "coefficients.json").read_text())
        assert len(payload["alpha_kt"]) == 4

    def test_simulate_command_tiny(self, tmp_path):
        out = tmp_path / "sim"
        code = main([
            "simulate", "--dgp", "1", "--reps", "1", "--n", "16", "--t", "6",
            "--burn", "15", "--keep", "15", "--seed", "1",
            "--estimators", "oracle,pooled", "--out", str(out),
        ])
        assert code == 0
        agg = json.loads((out / "mc_aggregate.json").read_text())
        assert agg["n_reps"] == 1
        assert (out / "mc_replications.csv").exists()

    def test_config_file_defaults(self, panel_csv, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text('burn = 10\nkeep = 10\nseed = 9\nhomoskedastic = true\n')
        out = tmp_path / "cfg_run"
        code = main([
            "--config", str(cfg), "estimate", "--panel", str(panel_csv),
            "--out", str(out),
        ])
        assert code == 0
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["burn"] == 10
        assert resolved["seed"] == 9
