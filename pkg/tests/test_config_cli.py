from __future__ import annotations

import json
from pathlib import Path

import pytest

from impacthedge import __version__
from impacthedge.cli import main
from impacthedge.config import ConfigError, load, parse_text, render, resolve
from impacthedge.core_model import LinearCombination, Put, SmoothedCall

REPO = Path(__file__).resolve().parents[1]
FAST = ["grid.n_t=8", "grid.n_s=17", "grid.n_pi=25", "mc.n_paths=200", "mc.n_steps=16"]


def _args(*overrides):
    out = []
    for o in (*FAST, *overrides):
        out += ["--set", o]
    return out


# -- config ---------------------------------------------------------------------


def test_defaults_resolve():
    cfg = load()
    assert cfg.params.eta == 0.01 and cfg.params.lbar == 1.0
    assert isinstance(cfg.payoff, SmoothedCall)
    assert (cfg.grid.s_min, cfg.grid.s_max) == (-5.0, 5.0)
    assert cfg.study.eta_list == (0.04, 0.01, 0.0025)
    assert cfg.study.dQ is None


def test_shipped_config_matches_defaults():
    assert load(REPO / "configs" / "default.cfg").resolved == load().resolved


def test_render_roundtrip():
    cfg = load(None, ["payoff.variant=put", "payoff.strike=0.5", "scenario.Q=-1"])
    again = resolve(parse_text(render(cfg.resolved)))
    assert again.resolved == cfg.resolved
    assert again.payoff == Put(0.5)


def test_grid_centres_on_s0():
    cfg = load(None, ["scenario.s0=100", "market.sigma=10"])
    assert (cfg.grid.s_min, cfg.grid.s_max) == (50.0, 150.0)


def test_combination_terms():
    cfg = load(None, ["payoff.variant=combination", "payoff.terms=1 call strike=0; -1 call strike=1"])
    assert isinstance(cfg.payoff, LinearCombination)
    assert len(cfg.payoff.terms) == 2


@pytest.mark.parametrize("text,line", [
    ("[market]\nsigma = 1\nbogus = 2\n", 3),
    ("[nope]\n", 1),
    ("sigma = 1\n", 1),
    ("[market]\n\nsigma\n", 3),
    ("[market\n", 1),
])
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError) as exc:
        parse_text(text, "x.cfg")
    assert exc.value.where == f"x.cfg:{line}"


@pytest.mark.parametrize("override", [
    "market.sigma=-1", "market.eta=abc", "market.l=2", "scenario.t0=1", "grid.n_pi=3", "grid.cfl=2",
    "study.eta_list=0.01, 0.04", "output.formats=xml", "payoff.variant=bogus", "scenario.Q=3",
    "mc.n_paths=0", "market.penalty_mode=raw",
])
def test_invalid_values_rejected(override):
    with pytest.raises(ConfigError):
        load(None, [override])


def test_error_points_at_the_override():
    with pytest.raises(ConfigError) as exc:
        load(None, ["market.gamma=0"])
    assert exc.value.where == "--set market.gamma=0"


# -- cli ---------------------------------------------------------------------------


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[market]\nsigma = x\n")
    assert main(["solve", "--config", str(bad), "--out", str(tmp_path), "--quiet"]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config" and err["where"] == f"{bad}:2" and err["exit_code"] == 2


def test_cli_numerical_error_exit_code(tmp_path, capsys):
    # a price grid this narrow forces the simulated paths off the surface
    code = main(["hedge-sim", "--out", str(tmp_path), "--quiet",
                 *_args("grid.s_min=-0.5", "grid.s_max=0.5")])
    assert code == 3
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "numerical"


def test_cli_price_constant_claim(tmp_path):
    assert main(["price", "--out", str(tmp_path), "--quiet",
                 *_args("payoff.variant=constant", "payoff.level=5")]) == 0
    doc = json.loads((tmp_path / "price_report.json").read_text())
    assert doc["pstar_fd"] == pytest.approx(5.0, abs=1e-10)
    assert doc["pstar_mc"] == pytest.approx(5.0, abs=1e-10)
    assert doc["version"] == __version__
    assert doc["config"]["payoff"]["level"] == "5"
    csv = (tmp_path / "price_report.csv").read_text().splitlines()
    assert csv[0].startswith(f"# impacthedge {__version__} price")
    assert any(line == "# level = 5" for line in csv)


def test_cli_solve_and_expand(tmp_path):
    assert main(["solve", "--out", str(tmp_path), "--quiet", *_args()]) == 0
    text = (tmp_path / "value_surface.txt").read_text().splitlines()
    assert any(line.startswith(f'# version: "{__version__}"') for line in text)
    assert any(line.startswith("# config: ") for line in text)
    assert main(["expand", "--out", str(tmp_path), "--quiet", *_args()]) == 0
    doc = json.loads((tmp_path / "expansion_report.json").read_text())
    assert doc["total"] == pytest.approx(doc["base"] + doc["gamma_term"] + doc["displacement_term"])
    assert doc["config"]["market"]["eta"] == "0.01"


def test_cli_hedge_sim_outputs(tmp_path):
    assert main(["hedge-sim", "--out", str(tmp_path), "--quiet", *_args()]) == 0
    summary = json.loads((tmp_path / "hedge_summary.json").read_text())
    assert summary["seed"] == 42 and summary["version"] == __version__
    assert len(summary["martingale_z"]) > 0
    assert (tmp_path / "hedge_paths.csv").read_text().startswith("# impacthedge")


def test_cli_converge_single_eta(tmp_path):
    assert main(["converge", "--out", str(tmp_path), "--quiet", *_args("study.eta_list=0.01")]) == 0
    text = (tmp_path / "convergence.csv").read_text().splitlines()
    rows = [ln for ln in text if not ln.startswith("#")]
    assert rows[0].startswith("eta,pstar_fd") and len(rows) == 2
    assert rows[1].split(",")[-1] == "nan"  # no ratio for a single rung


def test_cli_outputs_are_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["price", "--out", str(a), "--quiet", *_args()]) == 0
    assert main(["price", "--out", str(b), "--quiet", "--threads", "3", *_args()]) == 0
    for name in ("price_report.json", "price_report.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_cli_rejects_bad_thread_count(tmp_path):
    assert main(["solve", "--out", str(tmp_path), "--threads", "0", "--quiet"]) == 2
