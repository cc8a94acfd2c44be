import json
import math

import pytest

from timebinqkd.cli import main
from timebinqkd.config import ConfigError, SweepSpec, derive_seeds, parse_config, parse_targets
from timebinqkd.report import (
    REPORT_COLUMNS,
    ReportTable,
    compare_protocols,
    emit_report,
    parse_report,
    run_sweep,
)
from timebinqkd.session import SessionConfig, run_session


# -- config ----------------------------------------------------------------------

def test_empty_config_gives_reference_points():
    cfg = parse_config("")
    pts = cfg.all_points()
    assert len(pts) == 8
    assert sorted({p.protocol for p in pts}) == ["2D", "4D"]
    assert sorted(p.loss_db for p in pts if p.protocol == "4D") == [5.1, 14.0, 23.0, 31.5]


def test_point_override_and_length_conversion():
    cfg = parse_config("points:\n  - {protocol: 4D, length_km: 65, mu1: 0.2}\n")
    (pt,) = cfg.all_points()
    sc = pt.session_config(cfg.defaults)
    assert sc.link.channel_loss_db == pytest.approx(65 * 0.204)
    assert sc.decoy.mu1 == 0.2


def test_defaults_reach_session_config():
    text = """
defaults:
  block_size: 100000
  eps_sec: 1e-6
  detector: {dead_time: 1.0e-5}
points:
  - {protocol: 2D, loss_db: 23, dark_count_rate: 10, p_Z_bob: 0.5}
"""
    cfg = parse_config(text)
    sc = cfg.all_points()[0].session_config(cfg.defaults)
    assert sc.security.block_size == 100000 and sc.security.eps_sec == 1e-6
    assert sc.link.detector.dead_time == 1e-5 and sc.link.detector.dark_count_rate == 10
    assert sc.p_Z_bob == 0.5


@pytest.mark.parametrize("text,line,needle", [
    ("points:\n  - {protocol: 4D, loss_db: -3}\n", 2, "loss_db"),
    ("points:\n  - protocol: 4D\n    loss_db: 5\n    mu1: 0.01\n    mu2: 0.05\n", 5, "mu2"),
    ("seed: 1\nbogus: 2\n", 2, "bogus"),
    ("points:\n  - {protocol: 3D, loss_db: 5}\n", 2, "protocol"),
    ("sweep: {protocols: [2D], step_db: 0}\n", 1, "step_db"),
])
def test_invalid_config_reports_path_and_line(text, line, needle):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == line
    assert needle in str(info.value)


def test_malformed_yaml():
    with pytest.raises(ConfigError):
        parse_config("points: [\n")


def test_sweep_grid():
    spec = SweepSpec(("2D",), 0.0, 1.0, 0.25)
    assert spec.losses() == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert len(SweepSpec(("2D", "4D"), 0, 1, 0.5).points()) == 6


def test_derive_seeds():
    assert derive_seeds(None, 3) == [None] * 3
    a = derive_seeds(5, 4)
    assert a == derive_seeds(5, 4) and len(set(a)) == 4


def test_parse_targets():
    proto, targets, cutoff = parse_targets(
        "protocol: 2D\ncutoff_db: 39\npoints:\n  - {loss_db: 5.1, mu1: 0.07, mu2: 0.03, p_Z_bob: 0.7, qber: 0.011}\n")
    assert (proto, cutoff, len(targets)) == ("2D", 39.0, 1)
    assert targets[0].qber == 0.011 and targets[0].phi_Z is None
    with pytest.raises(ConfigError):
        parse_targets("protocol: 2D\npoints: []\n")


# -- sweeps and reports ------------------------------------------------------------

def test_run_sweep_default_points_and_csv_round_trip(tmp_path):
    table = run_sweep(parse_config(""))
    assert len(table) == 8 and table.complete
    text = emit_report(table, "csv", tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == text
    rows = parse_report(text)
    assert len(rows) == 8 and tuple(rows[0]) == REPORT_COLUMNS
    for row, rep in zip(rows, table):
        assert row["skr_bps"] == rep.skr_bits_per_second
    assert json.loads(emit_report(table, "json"))[0]["protocol"] == table.rows[0].protocol


def test_empty_sweep_gives_empty_table():
    cfg = parse_config("sweep: {protocols: [4D], from_db: 10, to_db: 5, step_db: 1}\n")
    assert cfg.all_points() == []
    table = run_sweep(cfg)
    assert len(table) == 0 and emit_report(table).strip() == ",".join(REPORT_COLUMNS)


def test_parallel_sweep_matches_serial():
    cfg = parse_config("sweep: {protocols: [2D, 4D], from_db: 10, to_db: 12, step_db: 1}\n")
    serial = emit_report(run_sweep(cfg, workers=1))
    assert emit_report(run_sweep(cfg, workers=2)) == serial


def test_table_rejects_duplicates():
    rep = run_session(SessionConfig.for_point("4D", 14.0))
    table = ReportTable()
    table.add(rep)
    with pytest.raises(ValueError):
        table.add(rep)


def test_compare_identical_rows_and_missing_counterpart():
    rep4 = run_session(SessionConfig.for_point("4D", 14.0))
    twin = run_session(SessionConfig.for_point("4D", 14.0))
    twin.protocol = "2D"
    table = ReportTable()
    table.add(rep4), table.add(twin)
    table.add(run_session(SessionConfig.for_point("4D", 23.0)))
    comp = compare_protocols(table)
    assert comp.at(14.0).enhancement == 1.0 and comp.at(14.0).secret_fraction_ratio == 1.0
    assert comp.missing == [("4D", 23.0)]


def test_compare_zero_rates():
    rep = run_session(SessionConfig.for_point("4D", 14.0))
    zero = run_session(SessionConfig.for_point("2D", 14.0))
    zero.skr_bits_per_second = zero.secret_fraction = 0.0
    table = ReportTable([rep, zero])
    assert math.isinf(compare_protocols(table).at(14.0).enhancement)


# -- CLI -------------------------------------------------------------------------

def test_cli_run_default_is_deterministic(tmp_path, capsys):
    out = tmp_path / "a.csv"
    assert main(["run", "--out", str(out)]) == 0
    assert main(["run", "--out", str(tmp_path / "b.csv")]) == 0
    assert out.read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert len(out.read_text().splitlines()) == 9


def test_cli_json_to_stdout(capsys):
    assert main(["run", "--format", "json"]) == 0
    assert len(json.loads(capsys.readouterr().out)) == 8


def test_cli_config_error_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("points:\n  - {protocol: 4D, loss_db: -1}\n")
    assert main(["run", str(bad)]) == 2
    assert "line 2" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.yaml")]) == 2


def test_cli_unwritable_output_exit_1(tmp_path, capsys):
    target = tmp_path / "no" / "such" / "dir" / "r.csv"
    assert main(["run", "--out", str(target)]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_sweep_and_compare(tmp_path, capsys):
    assert main(["sweep", "--from-db", "20", "--to-db", "21", "--step-db", "1", "--protocol", "4D",
                 "--no-optimize"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 3
    assert main(["sweep", "--step-db", "0"]) == 2
    assert main(["compare"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("loss_db,skr_2d,skr_4d,enhancement") and len(lines) == 5


def test_cli_monte_carlo_seeded(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("defaults: {block_size: 20000}\npoints:\n  - {protocol: 4D, loss_db: 14}\n")
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["run", str(cfg), "--monte-carlo", "--seed", "4", "--out", str(a)]) == 0
    assert main(["run", str(cfg), "--monte-carlo", "--seed", "4", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_cli_calibrate_targets(tmp_path, capsys):
    t = tmp_path / "t.yaml"
    t.write_text("protocol: 2D\npoints:\n"
                 "  - {loss_db: 5.1, mu1: 0.07, mu2: 0.03, p_Z_bob: 0.7, qber: 0.0}\n"
                 "  - {loss_db: 14, mu1: 0.13, mu2: 0.06, p_Z_bob: 0.7, qber: 0.0}\n")
    assert main(["calibrate", "--targets", str(t), "--format", "json"]) == 0
    (rec,) = json.loads(capsys.readouterr().out)
    assert rec["adequate"] and rec["dark_count_rate"] == pytest.approx(0, abs=1e-3)
