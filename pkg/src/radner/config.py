"""TOML run configuration: parsing, validation, serialization, fingerprints.

A run file describes the state dynamics, the agents, the lattice, the scheme
and the simulation in one place:

    [state]
    dim = 1
    drift = "zero"
    diffusion = "constant:1.0"
    regularity_K = 1.0
    x0 = [0.0]
    horizon = 1.0

    [[agents]]
    alpha = 1.0
    endowment = "zero"
    pi0 = 1.0

    [grid]
    t_steps = 400
    x_lo = [-4.0]
    x_hi = [4.0]
    x_steps = [160]

Optional sections: [scheme], [simulation], [output], [oracle], [economy].
Coefficient functions are registry keys (see fields.py). The fingerprint is
the sha256 of the canonical JSON of the normalized config, so formatting and
comments never change it, while any semantic change does. serialize_config
round-trips: parsing the emitted text reproduces the normalized config.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # python 3.10
    import tomli as tomllib

import numpy as np

from .drivers import TruncationLevel
from .errors import ConfigError, InputError
from .fields import diffusion_field, drift_field, scalar_field
from .jsonio import fingerprint
from .model import AgentSpec, Economy, StateDynamics, with_decomposition
from .pde_solver import GridSpec, SchemeParams
from .picard_kernel import KernelSpec, QuadPlan

_STATE_KEYS = {"dim", "drift", "diffusion", "regularity_K", "x0", "horizon",
               "terminal_holder_gamma"}
_AGENT_KEYS = {"alpha", "endowment", "pi0", "endowment_bound"}
_GRID_KEYS = {"t_steps", "x_lo", "x_hi", "x_steps"}
_SCHEME_KEYS = {"inner_picard", "picard_iters", "picard_tol", "blowup",
                "stability_check", "truncation_N", "truncation_N0"}
_SIM_KEYS = {"n_paths", "n_steps", "seed", "subset_size", "clearing_tol"}
_OUTPUT_KEYS = {"slice_times", "formats"}
_ORACLE_KEYS = {"beta", "n_t", "n_x", "halfwidth", "n_r", "n_xi", "xi_max",
                "truncation_N", "tol", "max_iter"}
_ECONOMY_KEYS = {"mu_e_bound"}
_SECTIONS = {"state", "agents", "grid", "scheme", "simulation", "output",
             "oracle", "economy"}


def _check_keys(section: str, table: dict, allowed: set) -> None:
    extra = set(table) - allowed
    if extra:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)} "
                          f"(allowed: {sorted(allowed)})")


def _need(section: str, table: dict, key: str):
    if key not in table:
        raise ConfigError(f"[{section}] is missing required key {key!r}")
    return table[key]


def _floats(section: str, key: str, v, length: int) -> list:
    if not isinstance(v, (list, tuple)) or len(v) != length:
        raise ConfigError(f"[{section}] {key} must be a list of {length} numbers")
    try:
        return [float(t) for t in v]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key} must contain numbers") from exc


@dataclass(frozen=True)
class RunConfig:
    state: dict
    agents: tuple
    grid: dict
    scheme: dict
    simulation: dict
    output: dict
    oracle: Optional[dict]
    economy: dict

    def normalized(self) -> dict:
        out = {
            "state": dict(self.state),
            "agents": [dict(a) for a in self.agents],
            "grid": dict(self.grid),
            "scheme": dict(self.scheme),
            "simulation": dict(self.simulation),
            "output": dict(self.output),
            "economy": dict(self.economy),
        }
        if self.oracle is not None:
            out["oracle"] = dict(self.oracle)
        return out


def parse_config(text: str) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML parse failure: {exc}") from exc

    extra = set(raw) - _SECTIONS
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    for requirement in ("state", "agents", "grid"):
        if requirement not in raw:
            raise ConfigError(f"config is missing the [{requirement}] section")

    st = raw["state"]
    _check_keys("state", st, _STATE_KEYS)
    dim = int(_need("state", st, "dim"))
    if dim not in (1, 2):
        raise ConfigError("state dim must be 1 or 2")
    state = {
        "dim": dim,
        "drift": str(_need("state", st, "drift")),
        "diffusion": str(_need("state", st, "diffusion")),
        "regularity_K": float(_need("state", st, "regularity_K")),
        "x0": _floats("state", "x0", _need("state", st, "x0"), dim),
        "horizon": float(_need("state", st, "horizon")),
        "terminal_holder_gamma": float(st.get("terminal_holder_gamma", 1.0)),
    }
    if state["horizon"] <= 0:
        raise ConfigError("horizon must be positive")

    agents_raw = raw["agents"]
    if not isinstance(agents_raw, list) or not agents_raw:
        raise ConfigError("[[agents]] must appear at least once")
    agents = []
    for k, ag in enumerate(agents_raw):
        _check_keys(f"agents[{k}]", ag, _AGENT_KEYS)
        alpha = float(_need(f"agents[{k}]", ag, "alpha"))
        if alpha <= 0:
            raise ConfigError(f"agents[{k}] alpha must be positive")
        entry = {
            "alpha": alpha,
            "endowment": str(_need(f"agents[{k}]", ag, "endowment")),
            "pi0": float(_need(f"agents[{k}]", ag, "pi0")),
        }
        if "endowment_bound" in ag:
            entry["endowment_bound"] = float(ag["endowment_bound"])
        agents.append(entry)
    pi_total = sum(a["pi0"] for a in agents)
    if abs(pi_total - 1.0) > 1e-12:
        raise ConfigError(f"initial holdings must sum to 1, got {pi_total!r}")

    gr = raw["grid"]
    _check_keys("grid", gr, _GRID_KEYS)
    grid = {
        "t_steps": int(_need("grid", gr, "t_steps")),
        "x_lo": _floats("grid", "x_lo", _need("grid", gr, "x_lo"), dim),
        "x_hi": _floats("grid", "x_hi", _need("grid", gr, "x_hi"), dim),
        "x_steps": [int(v) for v in _need("grid", gr, "x_steps")],
    }
    if len(grid["x_steps"]) != dim:
        raise ConfigError(f"x_steps must have {dim} entries")

    sc = raw.get("scheme", {})
    _check_keys("scheme", sc, _SCHEME_KEYS)
    scheme = {
        "inner_picard": bool(sc.get("inner_picard", False)),
        "picard_iters": int(sc.get("picard_iters", 5)),
        "picard_tol": float(sc.get("picard_tol", 1e-10)),
        "blowup": float(sc.get("blowup", 1e6)),
        "stability_check": bool(sc.get("stability_check", True)),
    }
    if "truncation_N" in sc:
        scheme["truncation_N"] = float(sc["truncation_N"])
        if "truncation_N0" in sc:
            scheme["truncation_N0"] = float(sc["truncation_N0"])
    elif "truncation_N0" in sc:
        raise ConfigError("truncation_N0 requires truncation_N")

    sim = raw.get("simulation", {})
    _check_keys("simulation", sim, _SIM_KEYS)
    simulation = {
        "n_paths": int(sim.get("n_paths", 1000)),
        "n_steps": int(sim.get("n_steps", 500)),
        "seed": int(sim.get("seed", 12345)),
        "subset_size": int(sim.get("subset_size", 256)),
        "clearing_tol": float(sim.get("clearing_tol", 1e-2)),
    }
    if simulation["n_paths"] < 1 or simulation["n_steps"] < 1:
        raise ConfigError("simulation needs n_paths >= 1 and n_steps >= 1")

    outp = raw.get("output", {})
    _check_keys("output", outp, _OUTPUT_KEYS)
    formats = list(outp.get("formats", ["npz", "json"]))
    for f in formats:
        if f not in ("npz", "csv", "json"):
            raise ConfigError(f"unknown output format {f!r}")
    output = {
        "slice_times": [float(v) for v in outp.get("slice_times", [])],
        "formats": formats,
    }

    oracle = None
    if "oracle" in raw:
        orc = raw["oracle"]
        _check_keys("oracle", orc, _ORACLE_KEYS)
        oracle = {
            "n_t": int(orc.get("n_t", 48)),
            "n_x": int(orc.get("n_x", 161)),
            "halfwidth": float(orc.get("halfwidth", 1.0)),
            "n_r": int(orc.get("n_r", 32)),
            "n_xi": int(orc.get("n_xi", 25)),
            "xi_max": float(orc.get("xi_max", 8.0)),
            "tol": float(orc.get("tol", 1e-8)),
            "max_iter": int(orc.get("max_iter", 60)),
        }
        if "beta" in orc:
            oracle["beta"] = float(orc["beta"])
        if "truncation_N" in orc:
            oracle["truncation_N"] = float(orc["truncation_N"])

    eco = raw.get("economy", {})
    _check_keys("economy", eco, _ECONOMY_KEYS)
    economy = {}
    if "mu_e_bound" in eco:
        economy["mu_e_bound"] = float(eco["mu_e_bound"])

    return RunConfig(state=state, agents=tuple(agents), grid=grid,
                     scheme=scheme, simulation=simulation, output=output,
                     oracle=oracle, economy=economy)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


# ---------------------------------------------------------------------------
# emission

def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        s = "%.17g" % v
        # a bare integer-looking literal would re-parse as int
        if "e" not in s and "." not in s and "n" not in s and "i" not in s:
            s += ".0"
        return s
    if isinstance(v, str):
        return '"%s"' % v.replace("\\", "\\\\").replace('"', '\\"')
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(t) for t in v) + "]"
    raise InputError(f"cannot serialize config value {v!r}")


def serialize_config(cfg: RunConfig) -> str:
    lines = []

    def table(name: str, data: dict):
        lines.append(f"[{name}]")
        for k, v in data.items():
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")

    table("state", cfg.state)
    for ag in cfg.agents:
        lines.append("[[agents]]")
        for k, v in ag.items():
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    table("grid", cfg.grid)
    table("scheme", cfg.scheme)
    table("simulation", cfg.simulation)
    table("output", cfg.output)
    if cfg.oracle is not None:
        table("oracle", cfg.oracle)
    if cfg.economy:
        table("economy", cfg.economy)
    return "\n".join(lines)


def fingerprint_config(cfg: RunConfig) -> str:
    return fingerprint(cfg.normalized())


# ---------------------------------------------------------------------------
# builders

def build_dynamics(cfg: RunConfig) -> StateDynamics:
    st = cfg.state
    try:
        drift = drift_field(st["drift"])
        diffusion = diffusion_field(st["diffusion"])
    except InputError as exc:
        raise ConfigError(str(exc)) from exc
    return StateDynamics(dim=st["dim"], drift=drift, diffusion=diffusion,
                         regularity_K=st["regularity_K"],
                         x0=np.asarray(st["x0"]))


def build_economy(cfg: RunConfig, dyn: StateDynamics) -> Economy:
    agents = []
    for ag in cfg.agents:
        try:
            endow = scalar_field(ag["endowment"])
        except InputError as exc:
            raise ConfigError(str(exc)) from exc
        agents.append(AgentSpec(risk_aversion=ag["alpha"], endowment=endow,
                                initial_holding=ag["pi0"],
                                endowment_bound=ag.get("endowment_bound")))
    econ = Economy(agents=tuple(agents), horizon_T=cfg.state["horizon"],
                   mu_e_bound=cfg.economy.get("mu_e_bound"))
    return with_decomposition(econ, dyn)


def build_grid(cfg: RunConfig) -> GridSpec:
    g = cfg.grid
    try:
        return GridSpec(t_steps=g["t_steps"], x_lo=tuple(g["x_lo"]),
                        x_hi=tuple(g["x_hi"]), x_steps=tuple(g["x_steps"]))
    except InputError as exc:
        raise ConfigError(str(exc)) from exc


def build_scheme(cfg: RunConfig) -> tuple[SchemeParams, Optional[TruncationLevel]]:
    sc = cfg.scheme
    try:
        scheme = SchemeParams(inner_picard=sc["inner_picard"],
                              picard_iters=sc["picard_iters"],
                              picard_tol=sc["picard_tol"],
                              blowup=sc["blowup"],
                              stability_check=sc["stability_check"])
        level = None
        if "truncation_N" in sc:
            level = TruncationLevel(N=sc["truncation_N"],
                                    N0=sc.get("truncation_N0"))
    except InputError as exc:
        raise ConfigError(str(exc)) from exc
    return scheme, level


def build_kernel_spec(cfg: RunConfig, lam: float) -> KernelSpec:
    orc = cfg.oracle or {}
    try:
        quad = QuadPlan(n_r=orc.get("n_r", 32), n_xi=orc.get("n_xi", 25),
                        xi_max=orc.get("xi_max", 8.0))
        return KernelSpec(lam=lam, beta=orc.get("beta"),
                          n_t=orc.get("n_t", 48), n_x=orc.get("n_x", 161),
                          x_center=float(cfg.state["x0"][0]),
                          x_halfwidth=orc.get("halfwidth", 1.0),
                          quad=quad)
    except InputError as exc:
        raise ConfigError(str(exc)) from exc
