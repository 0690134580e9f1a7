import csv
import json

import pytest

from aspanel import cli, panel
from aspanel.errors import AspanelError


def run(argv):
    return cli.main(argv)


@pytest.fixture
def events_file(tmp_path):
    rows = [
        {"ts": 50, "actor": "u3", "kind": "follow", "target": "alice"},
        {"ts": 100, "actor": "alice", "kind": "post", "text": "solar rollout"},
        {"ts": 110, "actor": "bob", "kind": "reply", "text": "solar yes", "target": "alice"},
        {"ts": 150, "actor": "carol", "kind": "follow", "target": "alice"},
        {"ts": 210, "actor": "alice", "kind": "repost", "text": "solar again"},
        {"ts": 260, "actor": "carol", "kind": "post", "text": "wind and solar"},
    ]
    p = tmp_path / "events.jsonl"
    p.write_text("\n".join(json.dumps(r) for r in rows))
    return p


@pytest.fixture
def panel_file(tmp_path):
    out = tmp_path / "panel.asp"
    assert run(["synth", "--n-agents", "40", "--seed", "3",
                "--out", str(out), "--out-dir", str(tmp_path)]) == 0
    return out


class TestConfig:
    def test_parse(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("mode = flip  # study kind\n\nsizes = 100 300\n")
        assert cli.read_kv_config(p) == {"mode": "flip", "sizes": "100 300"}

    def test_bad_line(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("just words\n")
        with pytest.raises(AspanelError):
            cli.read_kv_config(p)


class TestIngest:
    def test_end_to_end(self, events_file, tmp_path, capsys):
        out = tmp_path / "panel.asp"
        code = run(["ingest", str(events_file), "solar",
                    "--window-start", "100", "--window-end", "300", "--step", "100",
                    "--out", str(out), "--csv", "--out-dir", str(tmp_path)])
        assert code == 0
        assert "3 agents x 2 steps x 3 dims" in capsys.readouterr().out
        pn = panel.FeaturePanel.load(out)
        assert pn.agent_ids == ["alice", "bob", "carol"]
        assert (tmp_path / "panel.asp.csv").exists()
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["version"]
        assert str(out) in manifest["outputs"]

    def test_missing_events_is_usage_error(self, tmp_path):
        code = run(["ingest", str(tmp_path / "nope.jsonl"), "solar",
                    "--window-start", "0", "--window-end", "100", "--step", "100",
                    "--out-dir", str(tmp_path)])
        assert code == 2

    def test_empty_panel_is_data_error(self, events_file, tmp_path):
        code = run(["ingest", str(events_file), "solar",
                    "--window-start", "5000", "--window-end", "5100", "--step", "100",
                    "--out-dir", str(tmp_path)])
        assert code == 1


class TestSynth:
    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a.asp", tmp_path / "b.asp"
        for out in (a, b):
            assert run(["synth", "--n-agents", "25", "--law", "pareto_reach",
                        "--seed", "9", "--out", str(out), "--out-dir", str(tmp_path)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_missing_required_flag_is_usage_error(self, tmp_path):
        assert run(["synth", "--out-dir", str(tmp_path)]) == 2


class TestAttribute:
    def test_csv_and_summary(self, panel_file, tmp_path):
        out = tmp_path / "attr.csv"
        code = run(["attribute", str(panel_file), "--f", "var",
                    "--out", str(out), "--out-dir", str(tmp_path)])
        assert code == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 40
        norm_sum = sum(float(r["phi_norm"]) for r in rows)
        assert norm_sum == pytest.approx(1.0, abs=1e-9)
        summary = json.loads((tmp_path / "attr.csv.summary.json").read_text())
        assert summary["efficiency_residual_max"] <= 1e-9
        assert summary["n_agents"] == 40

    def test_midpoint_population_mean(self, panel_file, tmp_path):
        code = run(["attribute", str(panel_file), "--f", "heat",
                    "--method", "midpoint", "--baseline", "population_mean",
                    "--K", "50", "--out", str(tmp_path / "a.csv"),
                    "--out-dir", str(tmp_path)])
        assert code == 0

    def test_analytic_nonzero_baseline_is_usage_error(self, panel_file, tmp_path):
        code = run(["attribute", str(panel_file), "--f", "var",
                    "--method", "analytic", "--baseline", "population_mean",
                    "--out-dir", str(tmp_path)])
        assert code == 2

    def test_missing_panel_is_usage_error(self, tmp_path):
        assert run(["attribute", str(tmp_path / "nope.asp"), "--f", "var",
                    "--out-dir", str(tmp_path)]) == 2


class TestStudy:
    def test_flip_mode(self, tmp_path):
        cfg = tmp_path / "study.cfg"
        cfg.write_text(
            "mode = flip\nn_agents = 2000\nlaw = pareto_reach\npanel_seed = 7\n"
            "f = var\nprotocols = bias_visibility random\nsizes = 50\n"
            "seeds = 0 1 2\n"
        )
        assert run(["study", str(cfg), "--out-dir", str(tmp_path)]) == 0
        lines = (tmp_path / "flip_var.csv").read_text().strip().split("\n")
        assert len(lines) == 4

    def test_rescale_mode(self, tmp_path):
        cfg = tmp_path / "study.cfg"
        cfg.write_text(
            "mode = rescale\nn_agents = 1000\nlaw = pareto_reach\npanel_seed = 7\n"
            "f = lin var\nprotocols = bias_visibility\nsizes = 50\nseeds = 0 1\n"
        )
        assert run(["study", str(cfg), "--out-dir", str(tmp_path)]) == 0
        for name in ("lin", "var"):
            rows = (tmp_path / f"rescale_{name}.csv").read_text().strip().split("\n")
            assert rows[0].startswith("f_kind,n,seed")
            assert len(rows) == 3
        # linear family reconciles, variance does not
        eps_lin = [float(r.split(",")[4]) for r in
                   (tmp_path / "rescale_lin.csv").read_text().strip().split("\n")[1:]]
        assert max(eps_lin) <= 1e-9

    def test_kconv_mode(self, tmp_path):
        cfg = tmp_path / "study.cfg"
        cfg.write_text("mode = kconv\nn_agents = 200\nlaw = abs_gaussian\n"
                       "f = heat\nK_list = 5 10 20\n")
        assert run(["study", str(cfg), "--out-dir", str(tmp_path)]) == 0
        rows = (tmp_path / "kconv_heat.csv").read_text().strip().split("\n")
        assert rows[0] == "K,rel_l1_error,seconds"
        errs = [float(r.split(",")[1]) for r in rows[1:]]
        assert errs == sorted(errs, reverse=True)

    def test_unknown_mode_is_data_error(self, tmp_path):
        cfg = tmp_path / "study.cfg"
        cfg.write_text("mode = dance\n")
        assert run(["study", str(cfg), "--out-dir", str(tmp_path)]) == 1


class TestBench:
    def test_default_config(self, tmp_path, capsys):
        cfg = tmp_path / "bench.cfg"
        cfg.write_text("sizes = 10 30\nmethods = ours_analytic loo exact_shapley\n"
                       "repeats = 1\nf = var\n")
        assert run(["bench", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        assert "infeasible" in out
        assert (tmp_path / "bench.csv").exists()


class TestVerify:
    def test_passes_and_writes_report(self, tmp_path, capsys):
        assert run(["verify", "--out-dir", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        assert "all checks passed" in out
        rep = json.loads((tmp_path / "verify.json").read_text())
        assert rep["max_abs_error"] <= 1e-12
