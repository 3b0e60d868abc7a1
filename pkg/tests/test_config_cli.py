import json
import re

import pytest

from radner import ConfigError, load_solution
from radner.cli import main
from radner.config import (build_dynamics, build_economy, build_grid,
                           build_kernel_spec, build_scheme, fingerprint_config,
                           parse_config, serialize_config)

BASE = """
[state]
dim = 1
drift = "zero"
diffusion = "constant:1.0"
regularity_K = 1.0
x0 = [0.0]
horizon = 1.0

[[agents]]
alpha = 1.0
endowment = "constant:0.3"
pi0 = 1.0
endowment_bound = 0.3

[grid]
t_steps = 80
x_lo = [-3.0]
x_hi = [3.0]
x_steps = [40]

[simulation]
n_paths = 64
n_steps = 64
seed = 7
subset_size = 16
clearing_tol = 1e-2

[oracle]
n_t = 16
n_x = 41
halfwidth = 0.5

[economy]
mu_e_bound = 0.0
"""


def test_parse_round_trip_and_defaults():
    cfg = parse_config(BASE)
    assert cfg.state["dim"] == 1
    assert cfg.scheme["picard_iters"] == 5
    assert cfg.scheme["stability_check"] is True
    assert cfg.simulation["n_paths"] == 64
    assert cfg.output["formats"] == ["npz", "json"]
    assert cfg.oracle["n_xi"] == 25
    again = parse_config(serialize_config(cfg))
    assert again.normalized() == cfg.normalized()
    assert fingerprint_config(again) == fingerprint_config(cfg)


def test_fingerprint_ignores_formatting_not_values():
    base = fingerprint_config(parse_config(BASE))
    reformatted = BASE.replace("alpha = 1.0", "# comment\nalpha   =  1.0")
    assert fingerprint_config(parse_config(reformatted)) == base
    changed = BASE.replace("alpha = 1.0", "alpha = 2.0")
    assert fingerprint_config(parse_config(changed)) != base
    # default-equal explicit settings normalize to the same fingerprint
    explicit = BASE + "\n[scheme]\npicard_iters = 5\n"
    assert fingerprint_config(parse_config(explicit)) == base


@pytest.mark.parametrize("mutation, message", [
    (("[economy]", "[portfolio]"), "unknown config sections"),
    (("mu_e_bound = 0.0", "mu_bound = 0.0"), "unknown keys"),
    (("pi0 = 1.0", "pi0 = 0.9"), "sum to 1"),
    (("dim = 1", "dim = 3"), "dim must be"),
    (("t_steps = 80", ""), "missing required key"),
    (("horizon = 1.0", "horizon = -1.0"), "horizon"),
    (("alpha = 1.0", "alpha = -0.5"), "alpha"),
])
def test_parse_rejections(mutation, message):
    old, new = mutation
    with pytest.raises(ConfigError, match=message):
        parse_config(BASE.replace(old, new))


def test_truncation_n0_requires_n():
    with pytest.raises(ConfigError, match="truncation_N"):
        parse_config(BASE + "\n[scheme]\ntruncation_N0 = 2.0\n")
    cfg = parse_config(BASE + "\n[scheme]\ntruncation_N = 4.0\ntruncation_N0 = 2.0\n")
    _, level = build_scheme(cfg)
    assert level.N == 4.0 and level.N0 == 2.0


def test_output_format_whitelist():
    with pytest.raises(ConfigError, match="format"):
        parse_config(BASE + '\n[output]\nformats = ["npz", "parquet"]\n')


def test_builders():
    cfg = parse_config(BASE)
    dyn = build_dynamics(cfg)
    assert dyn.dim == 1
    econ = build_economy(cfg, dyn)
    assert econ.n_agents == 1
    assert econ.mu_e is not None
    assert econ.mu_e_bound == 0.0
    grid = build_grid(cfg)
    assert grid.t_steps == 80
    scheme, level = build_scheme(cfg)
    assert level is None
    assert scheme.stability_check
    spec = build_kernel_spec(cfg, lam=1.0)
    assert spec.n_t == 16 and spec.x_halfwidth == 0.5


def test_bad_coefficient_name_is_a_config_error():
    cfg = parse_config(BASE.replace('drift = "zero"', 'drift = "vortex"'))
    with pytest.raises(ConfigError):
        build_dynamics(cfg)


# ---------------------------------------------------------------------------
# CLI end to end

@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.toml"
    cfg.write_text(BASE)
    return root, cfg


def test_cli_solve(workdir, capsys):
    root, cfg = workdir
    out = root / "out"
    assert main(["solve", str(cfg), "--out", str(out)]) == 0
    assert (out / "solution.npz").exists()
    summary = json.loads((out / "solve_summary.json").read_text())
    # constant endowment: A(0, x0) = exp(a(0)) = 1 + T
    assert summary["A0"] == pytest.approx(2.0, abs=5e-3)
    assert summary["fingerprint"]
    sol = load_solution(out / "solution.npz")
    assert sol.meta["economy_fingerprint"] == summary["fingerprint"]


def test_cli_verify_passes(workdir, capsys):
    root, cfg = workdir
    out = root / "out"
    assert main(["verify", str(cfg), "--out", str(out)]) == 0
    report = json.loads((out / "verify_report.json").read_text())
    assert report["n_failed"] == 0
    names = {c["name"]: c["status"] for c in report["checks"]}
    assert names["clearing_identity"] == "PASS"
    assert names["truncation_consistency"] == "PASS"
    lines = capsys.readouterr().out
    assert re.search(r"PASS +clearing_identity", lines)


def test_cli_simulate_is_byte_deterministic(workdir, capsys):
    root, cfg = workdir
    out = root / "out"
    assert main(["simulate", str(cfg), "--out", str(out)]) == 0
    first = (out / "diagnostics.json").read_bytes()
    assert main(["simulate", str(cfg), "--out", str(out)]) == 0
    assert (out / "diagnostics.json").read_bytes() == first
    # a different seed changes the measured residuals
    assert main(["simulate", str(cfg), "--out", str(out), "--seed", "8"]) == 0
    assert (out / "diagnostics.json").read_bytes() != first
    payload = json.loads(first)
    assert payload["clearing"]["sup_holdings_gap"] <= 1e-2
    assert payload["fingerprint"]


def test_cli_oracle(workdir, capsys):
    root, cfg = workdir
    out = root / "out"
    assert main(["oracle", str(cfg), "--out", str(out)]) == 0
    report = json.loads((out / "oracle_report.json").read_text())
    assert report["value_gap"] <= 1e-2
    assert report["contraction_factor"] <= 0.75


def test_cli_bad_config_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(BASE.replace("pi0 = 1.0", "pi0 = 0.5"))
    out = tmp_path / "out"
    assert main(["solve", str(cfg), "--out", str(out)]) == 2
    assert not (out / "solution.npz").exists()
    payload = json.loads(capsys.readouterr().out)
    assert payload["error"] == "ConfigError"
    assert "sum to 1" in payload["message"]


def test_cli_missing_config_exits_2(tmp_path):
    assert main(["solve", str(tmp_path / "nope.toml"), "--out",
                 str(tmp_path / "out")]) == 2


def test_cli_divergence_exits_3(tmp_path, capsys):
    text = BASE.replace('endowment = "constant:0.3"',
                        'endowment = "gaussian_bump:0.0,0.1,2000.0"')
    text = text.replace("endowment_bound = 0.3", "endowment_bound = 2000.0")
    text += "\n[scheme]\nstability_check = false\n"
    cfg = tmp_path / "diverging.toml"
    cfg.write_text(text)
    assert main(["solve", str(cfg), "--out", str(tmp_path / "out")]) == 3


def test_cli_fingerprint_mismatch_exits_4(workdir, tmp_path, capsys):
    root, cfg = workdir
    out = root / "out"
    tweaked = tmp_path / "tweaked.toml"
    tweaked.write_text(BASE.replace("endowment_bound = 0.3",
                                    "endowment_bound = 0.4"))
    assert main(["verify", str(tweaked), "--out", str(out)]) == 4


def test_cli_oracle_refuses_state_dependence(tmp_path, capsys):
    text = BASE.replace('diffusion = "constant:1.0"',
                        'diffusion = "ou_decay:1.0"')
    text = text.replace("regularity_K = 1.0", "regularity_K = 2.8")
    cfg = tmp_path / "ou.toml"
    cfg.write_text(text)
    assert main(["oracle", str(cfg), "--out", str(tmp_path / "out")]) == 5


def test_cli_csv_slices(tmp_path):
    text = BASE + '\n[output]\nslice_times = [0.0]\nformats = ["npz", "csv", "json"]\n'
    cfg = tmp_path / "slices.toml"
    cfg.write_text(text)
    out = tmp_path / "out"
    assert main(["solve", str(cfg), "--out", str(out)]) == 0
    slices = sorted(out.glob("slice_*.csv"))
    assert len(slices) == 1
    assert slices[0].read_text().startswith("# t = ")
