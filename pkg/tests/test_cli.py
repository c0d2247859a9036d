"""Config parsing, CLI contract, and report determinism tests."""

import io
import json

import pytest

from moelab.cli import Report, RunConfig, demo_tie, load_config, main, run, sweep
from moelab.errors import ConfigurationError

SMALL_CONFIG = """
# desk-size lab for fast CLI tests
seed = 7
batch_size = 8
padding_lengths = 20,24
secret_count = 2
secret_len_min = 1
secret_len_max = 2
"""


@pytest.fixture
def small_config_file(tmp_path):
    path = tmp_path / "lab.cfg"
    path.write_text(SMALL_CONFIG)
    return path


class TestLoadConfig:
    def test_defaults_without_file(self):
        cfg = load_config(None)
        assert cfg.batch_size == 32
        assert cfg.padding_lengths == (20, 24, 30, 40, 50, 60)
        assert cfg.quant_decimals == 5
        assert cfg.phi == 0.85
        assert cfg.beta == 4
        assert cfg.gamma == 1.0

    def test_parses_values(self, small_config_file):
        cfg = load_config(str(small_config_file))
        assert cfg.batch_size == 8
        assert cfg.padding_lengths == (20, 24)
        assert cfg.secret_count == 2

    def test_unknown_key_fatal(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("not_a_real_key = 3\n")
        with pytest.raises(ConfigurationError, match="not_a_real_key"):
            load_config(str(path))

    def test_malformed_line_fatal(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("just some words\n")
        with pytest.raises(ConfigurationError):
            load_config(str(path))

    def test_bool_parsing(self, tmp_path):
        path = tmp_path / "defense.cfg"
        path.write_text("batch_isolation = true\ndense_control = false\n")
        cfg = load_config(str(path))
        assert cfg.batch_isolation is True
        assert cfg.dense_control is False


class TestDemoTie:
    def test_stable_router_matches_all_rows(self):
        buf = io.StringIO()
        assert demo_tie(RunConfig(), out=buf) == 0
        rows = [l for l in buf.getvalue().splitlines() if l.endswith("ok")]
        assert len(rows) == 6
        assert "MISMATCH" not in buf.getvalue()

    def test_randomized_router_flags_nondeterminism(self):
        buf = io.StringIO()
        cfg = RunConfig(tie_mode="randomized")
        assert demo_tie(cfg, out=buf) == 0
        assert "nondeterministic" in buf.getvalue()

    def test_dense_control_banner(self):
        buf = io.StringIO()
        cfg = RunConfig(dense_control=True)
        assert demo_tie(cfg, out=buf) == 0
        assert "no drop possible" in buf.getvalue()


class TestMain:
    def test_demo_tie_exit_zero(self, capsys):
        assert main(["demo-tie"]) == 0
        assert "Doesn't drop" in capsys.readouterr().out

    def test_malformed_config_exits_2_without_outputs(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("bogus_key = 1\n")
        out_dir = tmp_path / "out"
        code = main(
            ["--config", str(bad), "--out", str(out_dir), "leak"]
        )
        assert code == 2
        assert "bogus_key" in capsys.readouterr().err
        assert not out_dir.exists()

    def test_paths_reports_ball_sizes(self, capsys):
        assert main(["paths", "--beta", "4"]) == 0
        info = json.loads(capsys.readouterr().out)
        assert info["ball_size"] == 2517
        assert info["full_enumeration"] == 65536

    def test_oracle_command(self, small_config_file, capsys):
        code = main(["--config", str(small_config_file), "oracle", "--candidate", "ab"])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["accepted"] is True
        assert payload["target_queries"] == 2

    def test_leak_and_artifacts(self, small_config_file, tmp_path, capsys):
        out_dir = tmp_path / "results"
        code = main(
            ["--config", str(small_config_file), "--out", str(out_dir), "leak"]
        )
        assert code == 0
        report = json.loads((out_dir / "report.json").read_text())
        assert "token_recovery_rate" in report
        assert (out_dir / "expert_index_heatmap.csv").exists()
        assert (out_dir / "query_counts.csv").exists()

    def test_seed_override(self, small_config_file, capsys):
        code = main(
            ["--config", str(small_config_file), "--seed", "9", "paths"]
        )
        assert code == 0


class TestRunAndSweep:
    def test_rerun_byte_identical(self, tmp_path):
        cfg = load_config(None)
        cfg.batch_size = 8
        cfg.padding_lengths = (20, 24)
        cfg.secret_count = 2
        cfg.secret_len_min = 1
        cfg.secret_len_max = 2
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        run(cfg, out_dir=a_dir)
        run(cfg, out_dir=b_dir)
        for name in (
            "report.json",
            "expert_index_heatmap.csv",
            "query_counts.csv",
            "attack_progress.jsonl",
        ):
            assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes()

    def test_report_tally_consistency(self):
        cfg = load_config(None)
        cfg.batch_size = 8
        cfg.padding_lengths = (20, 24)
        cfg.secret_count = 3
        cfg.secret_len_min = 1
        cfg.secret_len_max = 2
        report = run(cfg)
        total_rec = sum(m.tokens_recovered for m in report.messages)
        by_len: dict[int, int] = {}
        for m in report.messages:
            by_len[m.tokens_total] = by_len.get(m.tokens_total, 0) + m.tokens_recovered
        assert sum(by_len.values()) == total_rec
        for m in report.messages:
            assert m.tokens_recovered <= m.tokens_total

    def test_sweep_padding_groups(self, tmp_path):
        cfg = load_config(None)
        cfg.batch_size = 8
        cfg.padding_lengths = (20, 24)
        cfg.secret_count = 2
        cfg.secret_len_min = 1
        cfg.secret_len_max = 1
        rows = sweep(cfg, "padding", out_dir=tmp_path)
        values = {r["value"] for r in rows}
        assert values == {20, 24}
        csv_text = (tmp_path / "sweep_padding.csv").read_text()
        assert csv_text.splitlines()[0] == "padding,message_length,success_rate,mean_target_queries"

    def test_sweep_single_value_axis(self):
        cfg = load_config(None)
        cfg.batch_size = 8
        cfg.padding_lengths = (20,)
        cfg.secret_count = 1
        cfg.secret_len_min = 1
        cfg.secret_len_max = 1
        rows = sweep(cfg, "padding")
        assert {r["value"] for r in rows} == {20}

    def test_sweep_unknown_axis_rejected(self):
        from moelab.errors import InvalidInputError

        with pytest.raises(InvalidInputError):
            sweep(load_config(None), "nonsense")

    def test_isolation_defense_run_recovers_nothing(self):
        cfg = load_config(None)
        cfg.batch_size = 8
        cfg.padding_lengths = (20, 24)
        cfg.secret = "a"
        cfg.batch_isolation = True
        report = run(cfg)
        assert report.defense_flags["batch_isolation"] is True
        assert report.token_recovery_rate == 0.0
