import csv

import pytest

from fxsolve import cli
from fxsolve.errors import ConfigInvalid


def run(tmp_path, *args):
    return cli.main(list(args) + ["--out-dir", str(tmp_path)])


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def snapshot(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_defaults_hold_reference_settings():
    cfg = cli.resolve_config("tomo", {}, {})
    assert cfg["chi"] == 0.3 and cfg["bits"] == [8, 9, 10] and cfg["outer_loops"] == 5
    assert cfg["schedule"] == "decrement:2,80,-2" and cfg["period"] == 5
    cfg = cli.resolve_config("invert", {}, {})
    assert cfg["chi"] == 0.2 and cfg["kappas"] == [25.0, 11.1] and cfg["bits"] == [6, 7, 8, 52]
    assert cli.resolve_config("deconvolve", {}, {})["sigmas"] == [0.70, 0.75, 0.80, 0.85]


def test_precedence_and_rejection(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[solver]\nchi = 0.25\nmax-iters = 50\n")
    cfg = cli.resolve_config("invert", cli.read_config_file(ini), {"chi": "0.1"})
    assert cfg["chi"] == 0.1 and cfg["max_iters"] == 50
    with pytest.raises(ConfigInvalid, match="unknown"):
        cli.resolve_config("invert", {"colour": "red"}, {})
    with pytest.raises(ConfigInvalid, match="not used"):
        cli.resolve_config("invert", {"sigmas": "0.7"}, {})
    with pytest.raises(ConfigInvalid):
        cli.resolve_config("invert", {}, {"chi": "2"})


def test_exit_codes(tmp_path, capsys):
    assert run(tmp_path, "invert", "--chi", "1.5") == 2
    assert "config error" in capsys.readouterr().err
    ini = tmp_path / "c.ini"
    ini.write_text("[x]\nbogus = 1\n")
    assert run(tmp_path, "tomo", "--config", str(ini)) == 2
    assert run(tmp_path, "deconvolve", "--problem", str(tmp_path / "missing.pgm")) == 1
    assert run(tmp_path, "emulate", "--problem", "deconvolve", "--bits", "8") == 2


def test_dry_run_writes_nothing(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["invert", "--dry-run", "--bits", "8", "--eta-samples", "5",
                     "--out-dir", str(out)]) == 0
    assert "eta_max" in capsys.readouterr().out
    assert not out.exists()


def test_invert_outputs_and_reproducibility(tmp_path):
    args = ["invert", "--bits", "8", "--kappas", "11.1", "--eta-samples", "10"]
    assert run(tmp_path, *args) == 0
    first = snapshot(tmp_path)
    rows = read_rows(tmp_path / "invert_summary.csv")
    assert len(rows) == 1
    assert float(rows[0]["theta"]) <= float(rows[0]["theta_bound"])
    assert any(str(p).startswith("invert/") for p in first)
    assert run(tmp_path, *args) == 0
    assert snapshot(tmp_path) == first
    meta = (tmp_path / "invert_meta.txt").read_text()
    assert "chi = 0.2" in meta and "version = " in meta


def test_tomo_and_emulate(tmp_path):
    assert run(tmp_path, "tomo", "--bits", "8", "--eta-samples", "5") == 0
    row = read_rows(tmp_path / "tomo_summary.csv")[0]
    assert float(row["theta_residual"]) < 0.1
    assert {"tomo_richardson_L8.csv", "tomo_residual_L8.csv", "tomo_adaptive_L8.csv",
            "tomo_reference.csv"} <= {p.name for p in (tmp_path / "tomo").iterdir()}
    assert run(tmp_path, "emulate", "--bits", "8") == 0
    rows = read_rows(tmp_path / "emulate_summary.csv")
    assert len(rows) == 3 and all(r["identical"] == "True" for r in rows)
    assert all(int(r["block_issues"]) > 0 for r in rows)


def test_deconvolve_delta_kernel(tmp_path):
    assert run(tmp_path, "deconvolve", "--problem", "sprite", "--sigmas", "0",
               "--eta-samples", "5", "--max-iters", "10") == 0
    rows = read_rows(tmp_path / "deconvolve_summary.csv")
    assert float(rows[0]["kappa"]) == pytest.approx(1.0)
    assert float(rows[0]["theta"]) < 2.0 ** -6 * 16
