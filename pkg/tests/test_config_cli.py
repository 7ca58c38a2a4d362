import json
import os

import pytest

from carleman_mhd.cli import main
from carleman_mhd.config import parse_config
from carleman_mhd.errors import ConfigError

SMALL_VERIFY = """
[grid]
n = 8
nt = 8

[weights]
lambdas = 1, 2
s_values = 2, 4, 8

[verify]
estimates = elliptic_dirichlet
"""


def test_defaults_and_roundtrip():
    cfg = parse_config(None)
    dump = cfg.canonical_dump()
    cfg2 = parse_config(dump)
    assert cfg2.canonical_dump() == dump
    assert cfg.grid.n == 16
    assert cfg.estimate_ids()[0] == "elliptic_dirichlet"


def test_minimal_config_fills_defaults():
    cfg = parse_config("[grid]\nn = 12\n")
    assert cfg.grid.n == 12
    assert cfg.grid.nt == 32
    dump1 = cfg.canonical_dump()
    assert parse_config(dump1).canonical_dump() == dump1


def test_unknown_key_is_error():
    with pytest.raises(ConfigError, match="lamda"):
        parse_config("[weights]\nlamda = 1, 2\n")
    with pytest.raises(ConfigError, match="section"):
        parse_config("[wieghts]\ns_values = 2\n")


def test_empty_list_is_error():
    with pytest.raises(ConfigError):
        parse_config("[weights]\ns_values =\n")


def test_unknown_recipe_and_estimate():
    with pytest.raises(ConfigError, match="recipe"):
        parse_config("[scenario]\nrecipe = bogus\n")
    with pytest.raises(ConfigError, match="estimate"):
        parse_config("[verify]\nestimates = nope\n")


def test_cli_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[weights]\nlamda = 1\n")
    rc = main(["verify", "--config", str(bad), "--out", str(tmp_path)])
    assert rc == 1
    err = json.loads((tmp_path / "error.json").read_text())
    assert err["error_type"] == "config"


def test_cli_verify_counts_and_determinism(tmp_path):
    cfgfile = tmp_path / "cfg.ini"
    cfgfile.write_text(SMALL_VERIFY)
    out1 = tmp_path / "run1"
    out2 = tmp_path / "run2"
    assert main(["verify", "--config", str(cfgfile), "--out", str(out1)]) == 0
    assert main(["verify", "--config", str(cfgfile), "--out", str(out2)]) == 0
    csv1 = (out1 / "verify_elliptic_dirichlet.csv").read_text().splitlines()
    csv2 = (out2 / "verify_elliptic_dirichlet.csv").read_text().splitlines()
    body1 = [l for l in csv1 if not l.startswith("# generated_at")]
    body2 = [l for l in csv2 if not l.startswith("# generated_at")]
    assert body1 == body2
    data_rows = [l for l in csv1 if not l.startswith("#")]
    assert len(data_rows) == 1 + 2 * 3  # header + |lambdas| x |s_values|
    summary = json.loads((out1 / "verify_summary.json").read_text())
    assert summary["spread_threshold"] == 3.0


def test_cli_manufacture(tmp_path):
    cfgfile = tmp_path / "cfg.ini"
    cfgfile.write_text("[grid]\nn = 8\nnt = 8\n")
    assert main(["manufacture", "--config", str(cfgfile), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "assumptions.json").read_text())
    assert rep["passed"] is True


def test_cli_stability_counting(tmp_path):
    cfgfile = tmp_path / "cfg.ini"
    cfgfile.write_text(
        "[grid]\nn = 8\nnt = 16\n"
        "[scenario]\nrecipe = stability\n"
        "[stability]\nsigmas = 0.001, 0.0316\nseeds = 0, 1, 2\nmax_iter = 150\n"
        "[reconstruction]\nmax_iter = 150\n"
    )
    assert main(["stability", "--config", str(cfgfile), "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "stability.csv").read_text().splitlines()
    data = [l for l in lines if not l.startswith("#") and not l.startswith("mode")]
    assert len(data) == 6  # 2 sigma levels x 3 seeds
    fit = json.loads((tmp_path / "stability_fits.json").read_text())
    assert "slope" in fit["fit"]


def test_cli_out_env(tmp_path, monkeypatch):
    target = tmp_path / "envout"
    monkeypatch.setenv("CARLEMAN_MHD_OUT", str(target))
    cfgfile = tmp_path / "cfg.ini"
    cfgfile.write_text("[grid]\nn = 8\nnt = 8\n")
    assert main(["manufacture", "--config", str(cfgfile)]) == 0
    assert (target / "assumptions.json").exists()
