"""Monte Carlo verification of the solved equilibrium.

Simulates the state ensemble forward (Euler, one Philox stream per path),
marches every agent's optimal wealth along it, and measures what the theory
pins down exactly: market clearing in holdings, goods and terminal wealth,
nonpositivity of the candidate-value drift with equality along the optimum,
the a-priori value bounds, and the BMO proxy for the volatility rows. The
result is a diagnostics report with a stable key set whose canonical JSON
form is byte-identical across reruns of the same config and seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .equilibrium import (ClearingReport, MarketBundle, StrategyPath,
                          optimality_drift_check, perturb_consumption,
                          perturb_holdings)
from .errors import DivergenceError, InputError
from .interp import LatticeInterp
from .model import Economy, StateDynamics
from .pde_solver import GridSpec, SolutionGrid, extract_Z, solve_linear_expectation


@dataclass(frozen=True)
class PathEnsemble:
    """Euler paths of the state and the Brownian increments that drove them."""

    times: np.ndarray        # (n_steps+1,)
    states: np.ndarray       # (n_paths, n_steps+1, d)
    increments: np.ndarray   # (n_paths, n_steps, d)
    seed: int
    algorithm: str = "philox-seedsequence"

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.increments.shape[1]

    def subset(self, n: int) -> "PathEnsemble":
        n = min(n, self.n_paths)
        return PathEnsemble(times=self.times, states=self.states[:n],
                            increments=self.increments[:n], seed=self.seed,
                            algorithm=self.algorithm)


def simulate_state(dyn: StateDynamics, horizon_T: float, n_paths: int,
                   n_steps: int, seed: int,
                   x0: Optional[np.ndarray] = None) -> PathEnsemble:
    """Euler recursion for the state with per-path Philox streams."""
    if n_paths < 1 or n_steps < 1:
        raise InputError("need at least one path and one step")
    d = dyn.dim
    x_init = dyn.x0 if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
    if x_init.shape != (d,):
        raise InputError(f"x0 must have shape ({d},)")
    dt = horizon_T / n_steps
    sqrt_dt = np.sqrt(dt)
    children = np.random.SeedSequence(seed).spawn(n_paths)
    increments = np.empty((n_paths, n_steps, d))
    for p, child in enumerate(children):
        gen = np.random.Generator(np.random.Philox(child))
        increments[p] = gen.normal(0.0, sqrt_dt, (n_steps, d))

    times = np.linspace(0.0, horizon_T, n_steps + 1)
    states = np.empty((n_paths, n_steps + 1, d))
    states[:, 0, :] = x_init
    for k in range(n_steps):
        t = float(times[k])
        x = states[:, k, :]
        lam = np.asarray(dyn.drift(t, x))
        sig = np.asarray(dyn.diffusion(t, x))
        states[:, k + 1, :] = (x + lam * dt
                               + np.einsum("nij,nj->ni", sig, increments[:, k, :]))
        if not np.all(np.isfinite(states[:, k + 1, :])):
            bad = int(np.argwhere(~np.isfinite(states[:, k + 1, :]))[0][0])
            raise DivergenceError(f"state path {bad} left the finite range at "
                                  f"step {k + 1}", step=k + 1, path=bad)
    return PathEnsemble(times=times, states=states, increments=increments,
                        seed=seed)


def ensemble_sanity(ens: PathEnsemble) -> dict:
    """Z-scores of the increment sample mean and variance against N(0, dt)."""
    dt = float(ens.times[1] - ens.times[0])
    flat = ens.increments.reshape(-1)
    n = flat.size
    z_mean = abs(float(flat.mean())) * np.sqrt(n / dt)
    z_var = abs(float(flat.var()) / dt - 1.0) * np.sqrt(n / 2.0)
    return {"z_mean": z_mean, "z_var": z_var, "n": n}


# ---------------------------------------------------------------------------
# a-priori bounds

def phi(x):
    """Lyapunov transform (e^{2|x|} - 1 - 2|x|) / 4: phi'' - 2|phi'| = 1."""
    ax = 2.0 * np.abs(x)
    return (np.expm1(ax) - ax) / 4.0


def phi_prime(x):
    return np.sign(x) * np.expm1(2.0 * np.abs(x)) / 2.0


def _mu_e_sup_on_lattice(sol: SolutionGrid, econ: Economy) -> float:
    X = sol.grid.nodes()
    worst = 0.0
    stride = max(1, sol.times.size // 64)
    for t in sol.times[::stride]:
        worst = max(worst, float(np.max(np.abs(econ.mu_e(float(t), X)))))
    return worst


def apriori_bounds(sol: SolutionGrid, econ: Economy) -> dict:
    """Supermartingale floor for a and the Gronwall envelope for the Y rows.

    Declared bounds (mu_e_bound, endowment bounds) are used when present;
    otherwise lattice sups stand in and the report says so.
    """
    T = econ.horizon_T
    empirical = econ.mu_e_bound is None
    mu_bar = econ.mu_e_bound if not empirical else _mu_e_sup_on_lattice(sol, econ)

    a = sol.values[:, :, 0]
    a_min = float(np.min(a))
    floor = -(T - sol.times)[:, None] * econ.ba * mu_bar
    margin = float(np.min(a - floor))
    a_lower = float(np.min(floor))

    C_a = T * econ.ba * mu_bar
    growth = np.exp(T * np.exp(C_a))
    y_sup = []
    gron = []
    gron_ok = True
    for i, agent in enumerate(econ.agents):
        if agent.endowment_bound is not None:
            m_e = agent.endowment_bound
        else:
            empirical = True
            X = sol.grid.nodes()
            m_e = max(float(np.max(np.abs(agent.endowment(float(t), X))))
                      for t in sol.times[:: max(1, sol.times.size // 32)])
        alpha = agent.risk_aversion
        bound = (alpha * m_e
                 + T * (np.exp(2.0 * C_a) + np.exp(C_a) * alpha * m_e)) * growth
        obs = float(np.max(np.abs(sol.values[:, :, i + 1])))
        y_sup.append(obs)
        gron.append(float(bound))
        gron_ok = gron_ok and obs <= bound + 1e-9

    return {
        "a_min": a_min,
        "a_lower_bound": a_lower,
        "supermartingale_margin": margin,
        "supermartingale_ok": bool(margin >= -1e-6),
        "Y_sup": y_sup,
        "gronwall_bound": gron,
        "gronwall_ok": bool(gron_ok),
        "mu_e_bound_used": float(mu_bar),
        "empirical_bounds": bool(empirical),
    }


def bmo_estimate(sol: SolutionGrid, econ: Economy, dyn: StateDynamics,
                 max_t_steps: int = 400) -> tuple[np.ndarray, np.ndarray]:
    """BMO proxy per volatility row and the explicit analytic bound.

    The proxy solves w_t + A w + |Z row|^2 = 0, w(T) = 0 and takes the
    lattice sup: w(t, x) is the conditional expected quadratic variation of
    the row from t on. Agent rows are bounded through the phi transform of
    the observed ||Y^i||; the a-row bound comes from Ito on a^2, which feeds
    on the agent-row bounds.
    """
    Z = extract_Z(sol, dyn)
    J = sol.n_rows
    T = econ.horizon_T
    z2 = np.sum(Z * Z, axis=3)  # (n_t+1, n_nodes, J)
    shape = (sol.times.size,) + tuple(k + 1 for k in sol.grid.x_steps) + (J,)
    source_interp = LatticeInterp(sol.times, sol.grid.axes(), z2.reshape(shape))

    grid = sol.grid
    if grid.t_steps > max_t_steps:
        grid = GridSpec(t_steps=max_t_steps, x_lo=grid.x_lo, x_hi=grid.x_hi,
                        x_steps=grid.x_steps)

    estimates = np.empty(J)
    for j in range(J):
        def src(t, X, _j=j):
            return source_interp.at(t, X)[:, _j]

        w = solve_linear_expectation(dyn, src, grid, T)
        estimates[j] = float(np.max(w.values))

    empirical = econ.mu_e_bound is None
    mu_bar = (econ.mu_e_bound if not empirical
              else _mu_e_sup_on_lattice(sol, econ))
    C_a = T * econ.ba * mu_bar
    alphas = econ.alphas()
    m_e = np.array([a.endowment_bound if a.endowment_bound is not None
                    else np.nan for a in econ.agents])
    if np.any(np.isnan(m_e)):
        X = sol.grid.nodes()
        stride = max(1, sol.times.size // 32)
        for i, agent in enumerate(econ.agents):
            if np.isnan(m_e[i]):
                m_e[i] = max(float(np.max(np.abs(agent.endowment(float(t), X))))
                             for t in sol.times[::stride])

    C_bmo = (2.0 * (np.exp(2.0 * C_a)
                    + np.exp(C_a) * (1.0 + float(np.max(alphas * m_e))))
             + 1.0 / min(T, 1.0))
    bounds = np.empty(J)
    for i in range(1, J):
        M = float(np.max(np.abs(sol.values[:, :, i])))
        bounds[i] = phi(M) + C_bmo * T * phi_prime(M) * (1.0 + M)
    a_sup = float(np.max(np.abs(sol.values[:, :, 0])))
    bounds[0] = (a_sup * a_sup
                 + 2.0 * a_sup * (T * (econ.ba * mu_bar + np.exp(C_a))
                                  + 0.5 * float(econ.kappas @ bounds[1:])))
    return estimates, bounds


# ---------------------------------------------------------------------------
# full equilibrium verification

@dataclass
class DiagnosticsReport:
    clearing: dict
    optimality: dict
    bounds: dict
    bmo: dict
    mesh: dict
    seed: int
    versions: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "clearing": self.clearing,
            "optimality": self.optimality,
            "bounds": self.bounds,
            "bmo": self.bmo,
            "mesh": self.mesh,
            "seed": self.seed,
            "versions": self.versions,
        }


def _holding_shift_pair(scale: float, T: float):
    def delta(t):
        return scale * np.sin(np.pi * t / T)

    def delta_prime(t):
        return scale * np.pi / T * np.cos(np.pi * t / T)

    return delta, delta_prime


def simulate_equilibrium(sol: SolutionGrid, bundle: MarketBundle,
                         econ: Economy, dyn: StateDynamics,
                         ensemble: PathEnsemble, subset_size: int = 256,
                         n_sample_steps: int = 32,
                         run_bounds: bool = True
                         ) -> tuple[list, DiagnosticsReport]:
    """March every agent's optimal wealth and assemble the diagnostics.

    Clearing residuals stream over the full ensemble; detailed strategy
    paths, the optimality sweep and the perturbed strategies use the leading
    subset of paths to keep memory flat. Returns the subset strategy paths
    (one per agent) and the report.
    """
    holdings = econ.initial_holdings()
    if abs(float(holdings.sum()) - 1.0) > 1e-12:
        raise InputError(f"initial annuity holdings must sum to 1, "
                         f"got {holdings.sum()!r}")

    times = ensemble.times
    states = ensemble.states
    incs = ensemble.increments
    n_paths, n_knots, d = states.shape
    I = econ.n_agents
    alphas = econ.alphas()
    n_sub = min(subset_size, n_paths)

    X = np.empty((n_paths, I))
    hold_gap = np.empty(n_knots)
    cons_gap = np.empty(n_knots)
    sub_wealth = np.empty((I, n_sub, n_knots))
    sub_cons = np.empty_like(sub_wealth)
    sub_hold = np.empty_like(sub_wealth)

    X[:] = holdings[None, :] * bundle.A_at(float(times[0]),
                                           states[:, 0, :])[:, None]
    for k in range(n_knots):
        t = float(times[k])
        x = states[:, k, :]
        A = bundle.A_at(t, x)
        ay = bundle.ay_at(t, x)
        e_agg = np.zeros(n_paths)
        c = np.empty((n_paths, I))
        for i, agent in enumerate(econ.agents):
            e_agg += np.asarray(agent.endowment(t, x))
            c[:, i] = ay[:, i] / alphas[i] + X[:, i] / A
        pi = X / A[:, None]
        hold_gap[k] = float(np.max(np.abs(pi.sum(axis=1) - 1.0)))
        cons_gap[k] = float(np.max(np.abs(c.sum(axis=1) - (e_agg + 1.0))))
        sub_wealth[:, :, k] = X[:n_sub].T
        sub_cons[:, :, k] = c[:n_sub].T
        sub_hold[:, :, k] = pi[:n_sub].T

        if k < n_knots - 1:
            dt = float(times[k + 1] - times[k])
            mu = bundle.mu_at(t, x)
            sigma = bundle.sigma_at(t, x)
            noise = np.einsum("nd,nd->n", sigma, incs[:, k, :])
            for i, agent in enumerate(econ.agents):
                e_i = np.asarray(agent.endowment(t, x))
                X[:, i] = (X[:, i] + (mu * X[:, i] + e_i - c[:, i]) * dt
                           + X[:, i] * noise)
            if not np.all(np.isfinite(X)):
                bad = int(np.argwhere(~np.isfinite(X))[0][0])
                raise DivergenceError(f"wealth path {bad} left the finite "
                                      f"range at step {k + 1}",
                                      step=k + 1, path=bad)

    term_gap = float(np.max(np.abs(X.sum(axis=1) - 1.0)))
    clearing = ClearingReport(times=times, holdings_gap=hold_gap,
                              consumption_gap=cons_gap,
                              terminal_wealth_gap=term_gap, n_paths=n_paths)

    sub_states = states[:n_sub]
    sub_incs = incs[:n_sub]
    paths = [StrategyPath(agent_index=i, label="optimal", times=times,
                          states=sub_states, increments=sub_incs,
                          wealth=sub_wealth[i], consumption=sub_cons[i],
                          holdings=sub_hold[i])
             for i in range(I)]

    # optimality sweep on sampled step blocks
    sample_idx = np.unique(np.linspace(0, n_knots - 1, n_sample_steps).astype(int))
    t_s = times[sample_idx]
    x_s = sub_states[:, sample_idx, :].transpose(1, 0, 2)
    max_opt = 0.0
    max_all = -np.inf
    min_all = np.inf
    n_strategies = 0
    T = econ.horizon_T
    for i in range(I):
        base = paths[i]
        mu_v = optimality_drift_check(bundle, econ, i, t_s, x_s,
                                      base.wealth[:, sample_idx].T,
                                      base.consumption[:, sample_idx].T)
        max_opt = max(max_opt, float(np.max(np.abs(mu_v))))
        max_all = max(max_all, float(np.max(mu_v)))
        min_all = min(min_all, float(np.min(mu_v)))

        perturbed = [perturb_consumption(bundle, econ, base, dlt)
                     for dlt in (-0.25, -0.15, -0.05, 0.05, 0.15, 0.25)]
        for scale in (-0.2, -0.1, 0.1, 0.2):
            dlt, dlt_p = _holding_shift_pair(scale, T)
            perturbed.append(perturb_holdings(bundle, econ, base, dlt, dlt_p,
                                              label=f"holdings{scale:+g}"))
        n_strategies += len(perturbed)
        for p in perturbed:
            mu_v = optimality_drift_check(bundle, econ, i, t_s, x_s,
                                          p.wealth[:, sample_idx].T,
                                          p.consumption[:, sample_idx].T)
            max_all = max(max_all, float(np.max(mu_v)))
            min_all = min(min_all, float(np.min(mu_v)))

    n_samples = int(t_s.size * n_sub)
    optimality = {
        "max_mu_V": max_all,
        "max_mu_V_optimal": max_opt,
        "min_mu_V": min_all,
        "n_samples": n_samples,
        "n_strategies": n_strategies,
    }

    if run_bounds:
        bounds = apriori_bounds(sol, econ)
        est, bnd = bmo_estimate(sol, econ, dyn)
        bmo = {
            "estimate": [float(v) for v in est],
            "analytic_bound": [float(v) for v in bnd],
            "ok": bool(np.all(est <= bnd + 1e-9)),
        }
    else:
        bounds = {}
        bmo = {}

    import scipy

    report = DiagnosticsReport(
        clearing={
            "sup_holdings_gap": clearing.max_holdings_gap,
            "sup_consumption_gap": clearing.max_consumption_gap,
            "terminal_wealth_gap": clearing.terminal_wealth_gap,
        },
        optimality=optimality,
        bounds=bounds,
        bmo=bmo,
        mesh={
            "t_steps": sol.grid.t_steps,
            "x_steps": list(sol.grid.x_steps),
            "dt": float(sol.meta.get("dt", sol.times[1] - sol.times[0])),
            "dx": list(sol.grid.spacings()),
            "n_paths": n_paths,
            "n_steps": int(ensemble.n_steps),
            "n_nodes": sol.grid.n_nodes,
        },
        seed=int(ensemble.seed),
        versions={"package": __version__, "numpy": np.__version__,
                  "scipy": scipy.__version__},
    )
    return paths, report
