"""Equilibrium objects read off the backward solution.

With u = (a, Y^1, ..., Y^I) and Z = Du Sigma, the traded annuity has price
A = exp(a), volatility sigma = Z row 0 and drift

    mu = ba mu_e + 1/2 |sigma|^2 - 1/2 sum_i kappa^i |Z^i|^2.

Agent i's optimal wealth follows

    dX = (mu X + e^i - c) dt + X sigma . dB,
    c_hat = (a + Y^i) / alpha^i + X / A,

and the market clears: sum_i X^i / A = 1 and sum_i c_hat^i = e + 1 up to
the scheme's clearing residual. The candidate-value drift

    mu_V = -exp(-alpha c) + U (1 - log U) - alpha c U,
    U = exp(-alpha X / A - Y - a),

is nonpositive for every self-financing (c, X) and vanishes exactly along
the optimum; the perturbation constructors below build self-financing
deviations for the verification harness.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InputError
from .interp import LatticeInterp
from .model import Economy, StateDynamics
from .pde_solver import SolutionGrid, extract_Z


@dataclass
class MarketBundle:
    """Annuity price system plus the per-agent value rows a + Y^i.

    A, mu are (n_t+1, n_nodes); sigma is (n_t+1, n_nodes, d); Z stacks the
    agent volatility rows (n_t+1, n_nodes, I, d). ay = a + Y^i is carried
    because strategies need it pointwise and it is not recoverable from the
    other fields agent by agent.
    """

    times: np.ndarray
    grid: object
    A: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    Z: np.ndarray
    ay: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(self.A <= 0):
            raise InputError("annuity price must be positive")
        if not np.allclose(self.A[-1], 1.0, atol=1e-12):
            raise InputError("annuity price must equal 1 at the horizon")
        self._cache = {}

    @property
    def n_agents(self) -> int:
        return self.Z.shape[2]

    def _interp(self, name: str) -> LatticeInterp:
        if name not in self._cache:
            arr = getattr(self, name)
            shape = ((self.times.size,) + tuple(k + 1 for k in self.grid.x_steps)
                     + arr.shape[2:])
            self._cache[name] = LatticeInterp(self.times, self.grid.axes(),
                                              arr.reshape(shape))
        return self._cache[name]

    def A_at(self, t, x):
        return self._interp("A").at(t, x)

    def mu_at(self, t, x):
        return self._interp("mu").at(t, x)

    def sigma_at(self, t, x):
        return self._interp("sigma").at(t, x)

    def ay_at(self, t, x):
        return self._interp("ay").at(t, x)

    def Z_at(self, t, x):
        return self._interp("Z").at(t, x)


def assemble_market(sol: SolutionGrid, econ: Economy, dyn: StateDynamics
                    ) -> MarketBundle:
    """Exponentiate the a-row and collect price drift/volatility and Z rows.

    Requires a solution of the untruncated system, or a truncated one whose
    truncation never activated (observed value and volatility sups strictly
    inside N).
    """
    if sol.n_rows != econ.n_agents + 1:
        raise InputError("solution row count does not match the economy")
    zfull = extract_Z(sol, dyn)
    trunc = sol.meta.get("truncation")
    if sol.meta.get("driver_kind", "full") != "full" and trunc is not None:
        y_sup = float(np.max(np.abs(sol.values)))
        z_sup = float(np.max(np.linalg.norm(zfull, axis=3)))
        if y_sup >= trunc["N"] or z_sup >= trunc["N"]:
            raise InputError(
                f"truncation at N={trunc['N']} is active (|y| up to {y_sup:.3g}, "
                f"|z| up to {z_sup:.3g}); refusing to build the market")

    a = sol.values[:, :, 0]
    A = np.exp(a)
    sigma = zfull[:, :, 0, :]
    Z = zfull[:, :, 1:, :]
    X = sol.grid.nodes()
    mu = np.empty_like(a)
    for m, t in enumerate(sol.times):
        mu_e = np.asarray(econ.mu_e(t, X))
        quad = np.einsum("nid,nid,i->n", Z[m], Z[m], econ.kappas)
        mu[m] = econ.ba * mu_e + 0.5 * np.sum(sigma[m] ** 2, axis=1) - 0.5 * quad
    ay = a[:, :, None] + sol.values[:, :, 1:]
    return MarketBundle(times=sol.times, grid=sol.grid, A=A, mu=mu,
                        sigma=sigma, Z=Z, ay=ay,
                        meta={"driver_kind": sol.meta.get("driver_kind"),
                              "economy_fingerprint":
                                  sol.meta.get("economy_fingerprint")})


def clearing_identity(sol: SolutionGrid, econ: Economy) -> float:
    """Sup over the lattice of |a + sum_i kappa^i Y^i - ba e|."""
    X = sol.grid.nodes()
    worst = 0.0
    G = sol.values[:, :, 0] + sol.values[:, :, 1:] @ econ.kappas
    for m, t in enumerate(sol.times):
        e = econ.aggregate_endowment(t, X)
        worst = max(worst, float(np.max(np.abs(G[m] - econ.ba * e))))
    return worst


def optimal_consumption(bundle: MarketBundle, econ: Economy, i: int,
                        t: float, x, X):
    alpha = econ.agents[i].risk_aversion
    ay = bundle.ay_at(t, x)[:, i]
    A = bundle.A_at(t, x)
    return ay / alpha + np.asarray(X) / A


def wealth_sde_step(bundle: MarketBundle, econ: Economy, i: int, t: float,
                    x, X, dt: float, dB):
    """One Euler step of the optimal wealth SDE; coefficients interpolated.

    Vectorized over paths: x is (n, d), X (n,), dB (n, d).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    X = np.asarray(X, dtype=float)
    dB = np.asarray(dB, dtype=float)
    if dB.ndim == 1:
        dB = dB[:, None]
    alpha = econ.agents[i].risk_aversion
    A = bundle.A_at(t, x)
    mu = bundle.mu_at(t, x)
    sigma = bundle.sigma_at(t, x)
    ay = bundle.ay_at(t, x)[:, i]
    e = np.asarray(econ.agents[i].endowment(t, x))
    drift = mu * X + e - ay / alpha - X / A
    return X + drift * dt + X * np.einsum("nd,nd->n", sigma, dB)


def candidate_value_drift(bundle: MarketBundle, econ: Economy, i: int,
                          t: float, x, X, c) -> np.ndarray:
    """mu_V at one time for a block of (state, wealth, consumption) samples."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    alpha = econ.agents[i].risk_aversion
    A = bundle.A_at(t, x)
    ay = bundle.ay_at(t, x)[:, i]
    w0 = -alpha * np.asarray(X) / A - ay          # log of the exp factor
    U = np.exp(w0)
    v = -(alpha * np.asarray(c) + w0)
    # 1 + v - e^v, evaluated as v - expm1(v) so the optimum sits at exact zero
    return U * (v - np.expm1(v))


def optimality_drift_check(bundle: MarketBundle, econ: Economy, i: int,
                           times, states, wealth, consumption) -> np.ndarray:
    """mu_V along a strategy sampled at the given step blocks.

    times is (K,); states (K, n, d); wealth and consumption (K, n). Returns
    (K, n). Nonpositivity holds for any inputs; zero identifies the optimum.
    """
    times = np.asarray(times, dtype=float)
    K = times.size
    out = np.empty((K,) + np.asarray(wealth).shape[1:])
    for k in range(K):
        out[k] = candidate_value_drift(bundle, econ, i, float(times[k]),
                                       states[k], wealth[k], consumption[k])
    return out


@dataclass
class StrategyPath:
    """A self-financing (consumption, wealth) pair along simulated states."""

    agent_index: int
    label: str
    times: np.ndarray
    states: np.ndarray        # (n_paths, n_steps+1, d)
    increments: np.ndarray    # (n_paths, n_steps, d)
    wealth: np.ndarray        # (n_paths, n_steps+1)
    consumption: np.ndarray   # (n_paths, n_steps+1)
    holdings: np.ndarray      # (n_paths, n_steps+1)


def simulate_wealth(bundle: MarketBundle, econ: Economy, i: int,
                    times, states, increments, consumption) -> np.ndarray:
    """Euler wealth path for a given consumption plan (self-financing)."""
    n_paths, n_knots, d = states.shape
    X = np.empty((n_paths, n_knots))
    X[:, 0] = econ.agents[i].initial_holding * bundle.A_at(
        float(times[0]), states[:, 0, :])
    for k in range(n_knots - 1):
        t = float(times[k])
        dt = float(times[k + 1] - times[k])
        x = states[:, k, :]
        mu = bundle.mu_at(t, x)
        sigma = bundle.sigma_at(t, x)
        e = np.asarray(econ.agents[i].endowment(t, x))
        noise = np.einsum("nd,nd->n", sigma, increments[:, k, :])
        X[:, k + 1] = (X[:, k] + (mu * X[:, k] + e - consumption[:, k]) * dt
                       + X[:, k] * noise)
    return X


def optimal_strategy(bundle: MarketBundle, econ: Economy, i: int,
                     times, states, increments) -> StrategyPath:
    """March the optimal wealth SDE and record consumption and holdings."""
    n_paths, n_knots, d = states.shape
    alpha = econ.agents[i].risk_aversion
    X = np.empty((n_paths, n_knots))
    c = np.empty_like(X)
    pi = np.empty_like(X)
    X[:, 0] = econ.agents[i].initial_holding * bundle.A_at(
        float(times[0]), states[:, 0, :])
    for k in range(n_knots):
        t = float(times[k])
        x = states[:, k, :]
        A = bundle.A_at(t, x)
        ay = bundle.ay_at(t, x)[:, i]
        c[:, k] = ay / alpha + X[:, k] / A
        pi[:, k] = X[:, k] / A
        if k < n_knots - 1:
            dt = float(times[k + 1] - times[k])
            X[:, k + 1] = wealth_sde_step(bundle, econ, i, t, x, X[:, k], dt,
                                          increments[:, k, :])
    return StrategyPath(agent_index=i, label="optimal", times=np.asarray(times),
                        states=states, increments=increments, wealth=X,
                        consumption=c, holdings=pi)


def perturb_consumption(bundle: MarketBundle, econ: Economy,
                        base: StrategyPath, delta: float) -> StrategyPath:
    """Shift consumption by a constant and let wealth absorb it."""
    c = base.consumption + delta
    X = simulate_wealth(bundle, econ, base.agent_index, base.times,
                        base.states, base.increments, c)
    A = np.empty_like(X)
    for k in range(base.times.size):
        A[:, k] = bundle.A_at(float(base.times[k]), base.states[:, k, :])
    return StrategyPath(agent_index=base.agent_index,
                        label=f"consumption{delta:+g}", times=base.times,
                        states=base.states, increments=base.increments,
                        wealth=X, consumption=c, holdings=X / A)


def perturb_holdings(bundle: MarketBundle, econ: Economy, base: StrategyPath,
                     delta: Callable, delta_prime: Callable,
                     label: str = "holdings-shift") -> StrategyPath:
    """Shift the annuity position by a deterministic delta(t), delta(0) = 0.

    The shifted pair X = X_hat + delta A, c = c_hat + delta - delta' A is
    self-financing exactly, given the base pair is.
    """
    t0 = float(base.times[0])
    if abs(float(delta(t0))) > 1e-12:
        raise InputError("holding shift must vanish at the initial time")
    n_knots = base.times.size
    X = np.empty_like(base.wealth)
    c = np.empty_like(base.consumption)
    pi = np.empty_like(base.holdings)
    for k in range(n_knots):
        t = float(base.times[k])
        A = bundle.A_at(t, base.states[:, k, :])
        dlt = float(delta(t))
        X[:, k] = base.wealth[:, k] + dlt * A
        c[:, k] = base.consumption[:, k] + dlt - float(delta_prime(t)) * A
        pi[:, k] = base.holdings[:, k] + dlt
    return StrategyPath(agent_index=base.agent_index, label=label,
                        times=base.times, states=base.states,
                        increments=base.increments, wealth=X,
                        consumption=c, holdings=pi)


@dataclass(frozen=True)
class ClearingReport:
    times: np.ndarray
    holdings_gap: np.ndarray      # per-time sup over paths of |sum pi - 1|
    consumption_gap: np.ndarray   # per-time sup of |sum c - (e + 1)|
    terminal_wealth_gap: float
    n_paths: int

    @property
    def max_holdings_gap(self) -> float:
        return float(np.max(self.holdings_gap))

    @property
    def max_consumption_gap(self) -> float:
        return float(np.max(self.consumption_gap))


def clearing_residuals(econ: Economy, paths: list) -> ClearingReport:
    """Market-clearing residuals across one strategy path per agent."""
    if len(paths) != econ.n_agents:
        raise InputError("need exactly one strategy path per agent")
    ref = paths[0]
    for p in paths[1:]:
        if p.times.shape != ref.times.shape or not np.array_equal(p.times, ref.times):
            raise InputError("strategy paths live on different time lattices")
        if p.states is not ref.states and not np.array_equal(p.states, ref.states):
            raise InputError("strategy paths live on different state paths")

    total_pi = sum(p.holdings for p in paths)
    total_c = sum(p.consumption for p in paths)
    total_X = sum(p.wealth for p in paths)
    n_knots = ref.times.size
    cons_gap = np.empty(n_knots)
    for k in range(n_knots):
        e = econ.aggregate_endowment(float(ref.times[k]), ref.states[:, k, :])
        cons_gap[k] = float(np.max(np.abs(total_c[:, k] - (e + 1.0))))
    hold_gap = np.max(np.abs(total_pi - 1.0), axis=0)
    term_gap = float(np.max(np.abs(total_X[:, -1] - 1.0)))
    return ClearingReport(times=ref.times, holdings_gap=hold_gap,
                          consumption_gap=cons_gap,
                          terminal_wealth_gap=term_gap,
                          n_paths=ref.wealth.shape[0])
