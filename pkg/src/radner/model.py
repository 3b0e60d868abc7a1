"""Economy and state-dynamics primitives.

The market trades one long-lived annuity paying a unit consumption stream
against I exponential-utility agents whose incomes load on an unspanned
Markov state xi with drift Lambda and diffusion Sigma on [0, T].

Risk aversions aggregate through 1/ba = sum_i 1/alpha^i with weights
kappa^i = ba / alpha^i, so sum_i kappa^i = 1 and kappa^i alpha^i = ba
identically; every driver and bound downstream reads (ba, kappa) from here.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InputError, SingularEndowmentError
from .fields import (ScalarField, _atleast_points, as_scalar_field, fd_grad,
                     fd_hess, fd_time)


def derived_constants(alphas) -> tuple[float, np.ndarray]:
    """Aggregate risk aversion ba and Pareto weights kappa from alpha^i."""
    alphas = np.asarray(alphas, dtype=float)
    if alphas.ndim != 1 or alphas.size == 0:
        raise InputError("alphas must be a nonempty 1-d array")
    if not np.all(np.isfinite(alphas)) or np.any(alphas <= 0):
        raise InputError("risk aversions must be finite and positive")
    ba = 1.0 / np.sum(1.0 / alphas)
    kappas = ba / alphas
    return float(ba), kappas


@dataclass(frozen=True, eq=False)
class StateDynamics:
    """State SDE d(xi) = Lambda dt + Sigma dB with a declared regularity K.

    drift: (t, x:(n,d)) -> (n,d); diffusion: (t, x:(n,d)) -> (n,d,d).
    K certifies boundedness/Lipschitz of the coefficients and the
    ellipticity floor |Sigma z| >= |z| / K; validate_state_dynamics probes it.
    """

    dim: int
    drift: Callable
    diffusion: Callable
    regularity_K: float
    x0: np.ndarray

    def __post_init__(self):
        if self.dim < 1:
            raise InputError("state dimension must be >= 1")
        if not (np.isfinite(self.regularity_K) and self.regularity_K > 0):
            raise InputError("regularity constant must be finite and positive")
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.shape != (self.dim,):
            raise InputError(f"x0 must have shape ({self.dim},), got {x0.shape}")
        object.__setattr__(self, "x0", x0)


@dataclass(frozen=True, eq=False)
class AgentSpec:
    """One agent: exponential utility exp(-alpha c), income field, annuity share.

    endowment_bound is the declared sup of |e^i|; explicit constants
    (Gronwall, BF split, BMO) need it, empirical fallbacks are flagged.
    """

    risk_aversion: float
    endowment: ScalarField
    initial_holding: float
    endowment_bound: Optional[float] = None

    def __post_init__(self):
        if not (np.isfinite(self.risk_aversion) and self.risk_aversion > 0):
            raise InputError("risk aversion must be finite and positive")
        object.__setattr__(self, "endowment", as_scalar_field(self.endowment))
        if self.endowment_bound is not None and self.endowment_bound < 0:
            raise InputError("endowment bound must be nonnegative")


@dataclass(frozen=True, eq=False)
class Economy:
    """Agents plus horizon, with the aggregate-endowment Ito coefficients.

    mu_e / sigma_e are the drift and volatility of the aggregate endowment
    e(t, xi) along the state (filled in by endowment_decomposition; solvers
    compute them on the fly when absent). mu_e_bound is a declared sup of
    |mu_e| feeding the explicit a-priori constants.
    """

    agents: tuple
    horizon_T: float
    mu_e: Optional[Callable] = None
    sigma_e: Optional[Callable] = None
    mu_e_bound: Optional[float] = None
    ba: float = field(init=False)
    kappas: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.agents:
            raise InputError("economy needs at least one agent")
        agents = tuple(self.agents)
        object.__setattr__(self, "agents", agents)
        if not (np.isfinite(self.horizon_T) and self.horizon_T > 0):
            raise InputError("horizon must be finite and positive")
        ba, kappas = derived_constants([a.risk_aversion for a in agents])
        object.__setattr__(self, "ba", ba)
        object.__setattr__(self, "kappas", kappas)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def aggregate_endowment(self, t, x):
        x = _atleast_points(x)
        total = np.zeros(x.shape[0])
        for a in self.agents:
            total += np.asarray(a.endowment(t, x))
        return total

    def alphas(self) -> np.ndarray:
        return np.array([a.risk_aversion for a in self.agents])

    def initial_holdings(self) -> np.ndarray:
        return np.array([a.initial_holding for a in self.agents])


@dataclass(frozen=True)
class SamplePlan:
    """Probe lattice for validation sweeps: ranges, count, seed."""

    horizon_T: float
    x_lo: tuple
    x_hi: tuple
    n_samples: int = 256
    seed: int = 0

    def draws(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.atleast_1d(np.asarray(self.x_lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.x_hi, dtype=float))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise InputError("sample plan needs x_lo < x_hi componentwise")
        rng = np.random.default_rng(self.seed)
        ts = rng.uniform(0.0, self.horizon_T, self.n_samples)
        xs = rng.uniform(lo, hi, (self.n_samples, lo.size))
        return ts, xs


@dataclass(frozen=True)
class StateValidationReport:
    declared_K: float
    drift_sup: float
    diffusion_sup: float
    drift_lipschitz: float
    diffusion_lipschitz: float
    ellipticity_min: float
    n_singular_probes: int
    bounded_ok: bool
    lipschitz_ok: bool
    elliptic_ok: bool

    @property
    def ok(self) -> bool:
        return self.bounded_ok and self.lipschitz_ok and self.elliptic_ok


def validate_state_dynamics(dyn: StateDynamics, plan: SamplePlan,
                            rtol: float = 1e-9) -> StateValidationReport:
    """Probe the declared regularity constant on sampled (t, x) pairs.

    A singular diffusion probe flags elliptic_ok rather than raising; shape
    or finiteness violations are rejected outright.
    """
    ts, xs = plan.draws()
    n = ts.size
    K = dyn.regularity_K
    tol = rtol * max(1.0, K)

    drift_sup = 0.0
    diff_sup = 0.0
    ell_min = np.inf
    n_singular = 0
    vals = []
    for t, x in zip(ts, xs):
        pt = x[None, :]
        lam = np.asarray(dyn.drift(t, pt))
        sig = np.asarray(dyn.diffusion(t, pt))
        if lam.shape != (1, dyn.dim) or sig.shape != (1, dyn.dim, dyn.dim):
            raise InputError(f"coefficient shapes {lam.shape}/{sig.shape} do not "
                             f"match dim={dyn.dim}")
        if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(sig))):
            raise InputError(f"non-finite coefficient at t={t}, x={x}")
        sv = np.linalg.svd(sig[0], compute_uv=False)
        drift_sup = max(drift_sup, float(np.linalg.norm(lam[0])))
        diff_sup = max(diff_sup, float(sv[0]))
        if sv[-1] < 1e-14:
            n_singular += 1
        ell_min = min(ell_min, float(sv[-1]))
        vals.append((lam[0], sig[0]))

    # pairwise equal-time difference quotients for the Lipschitz probe
    drift_lip = 0.0
    diff_lip = 0.0
    for a in range(0, n - 1, 2):
        t = ts[a]
        xa, xb = xs[a], xs[a + 1]
        gap = float(np.linalg.norm(xa - xb))
        if gap < 1e-12:
            continue
        la = np.asarray(dyn.drift(t, xa[None, :]))[0]
        lb = np.asarray(dyn.drift(t, xb[None, :]))[0]
        sa = np.asarray(dyn.diffusion(t, xa[None, :]))[0]
        sb = np.asarray(dyn.diffusion(t, xb[None, :]))[0]
        drift_lip = max(drift_lip, float(np.linalg.norm(la - lb)) / gap)
        diff_lip = max(diff_lip, float(np.linalg.norm(sa - sb, 2)) / gap)

    return StateValidationReport(
        declared_K=K,
        drift_sup=drift_sup,
        diffusion_sup=diff_sup,
        drift_lipschitz=drift_lip,
        diffusion_lipschitz=diff_lip,
        ellipticity_min=float(ell_min),
        n_singular_probes=n_singular,
        bounded_ok=(drift_sup <= K + tol) and (diff_sup <= K + tol),
        lipschitz_ok=(drift_lip <= K + tol) and (diff_lip <= K + tol),
        elliptic_ok=(n_singular == 0) and (ell_min >= 1.0 / K - tol),
    )


def ou_transform(theta: float, eta_bar: float, eta0: float, sigma_eta: float,
                 endow, horizon_T: float = 1.0) -> tuple[StateDynamics, ScalarField]:
    """Absorb an OU income driver into driftless state dynamics.

    For d(eta) = theta (eta_bar - eta) dt + sigma_eta dB the deterministic
    substitution eta(t, x) = eta_bar + (eta0 - eta_bar) e^{-theta t}
    + sigma_eta x turns income e(t, eta) into f(t, x) on a state with
    Lambda = 0, Sigma(t) = e^{-theta t} I and x_0 = 0. The returned
    regularity constant max(e^{theta T}, 1) certifies the ellipticity floor
    on [0, horizon_T].
    """
    if theta <= 0 or sigma_eta <= 0:
        raise InputError("ou_transform needs theta > 0 and sigma_eta > 0")
    e = as_scalar_field(endow)
    decay = np.exp(-theta * horizon_T)
    K = max(1.0 / decay, 1.0)

    def drift(t, x):
        return np.zeros_like(_atleast_points(x))

    def diffusion(t, x):
        x = _atleast_points(x)
        return np.exp(-theta * t) * np.ones((x.shape[0], 1, 1))

    dyn = StateDynamics(dim=1, drift=drift, diffusion=diffusion,
                        regularity_K=K, x0=np.zeros(1))

    def mean_path(t):
        return eta_bar + (eta0 - eta_bar) * np.exp(-theta * t)

    def eta_points(t, x):
        x = _atleast_points(x)
        return mean_path(t) + sigma_eta * x

    def fn(t, x):
        return e.fn(t, eta_points(t, x))

    if e.has_derivatives:
        def d_t(t, x):
            pts = eta_points(t, x)
            dm = -theta * (eta0 - eta_bar) * np.exp(-theta * t)
            return np.asarray(e.d_t(t, pts)) + np.asarray(e.d_x(t, pts))[:, 0] * dm

        def d_x(t, x):
            return np.asarray(e.d_x(t, eta_points(t, x))) * sigma_eta

        def d_xx(t, x):
            return np.asarray(e.d_xx(t, eta_points(t, x))) * sigma_eta ** 2

        f = ScalarField(fn=fn, d_t=d_t, d_x=d_x, d_xx=d_xx,
                        name=f"ou_transform({e.name})")
    else:
        f = ScalarField(fn=fn, name=f"ou_transform({e.name})")
    return dyn, f


def endowment_decomposition(econ: Economy, dyn: StateDynamics
                            ) -> tuple[Callable, Callable]:
    """Ito coefficients (mu_e, sigma_e) of the aggregate endowment.

    mu_e = d_t e + (d_x e) . Lambda + 1/2 Tr(d_xx e Sigma Sigma^T) and
    sigma_e = (d_x e) Sigma. Closed-form derivatives are used when every
    agent's field carries them; otherwise central differences with spacing
    1e-5 (1 + |x|) per coordinate (and 1e-5 (1 + |t|) in time).
    """
    fields_ = [a.endowment for a in econ.agents]
    closed = all(f.has_derivatives for f in fields_)

    def agg(t, x):
        return econ.aggregate_endowment(t, x)

    if closed:
        def d_t(t, x):
            return sum(np.asarray(f.d_t(t, x)) for f in fields_)

        def d_x(t, x):
            return sum(np.asarray(f.d_x(t, x)) for f in fields_)

        def d_xx(t, x):
            return sum(np.asarray(f.d_xx(t, x)) for f in fields_)
    else:
        def d_t(t, x):
            return fd_time(agg, t, x)

        def d_x(t, x):
            return fd_grad(agg, t, x)

        def d_xx(t, x):
            return fd_hess(agg, t, x)

    def mu_e(t, x):
        x = _atleast_points(x)
        lam = np.asarray(dyn.drift(t, x))
        sig = np.asarray(dyn.diffusion(t, x))
        S = np.einsum("nij,nkj->nik", sig, sig)
        out = (np.asarray(d_t(t, x))
               + np.einsum("nj,nj->n", np.asarray(d_x(t, x)), lam)
               + 0.5 * np.einsum("nij,nij->n", np.asarray(d_xx(t, x)), S))
        if not np.all(np.isfinite(out)):
            raise SingularEndowmentError(f"non-finite endowment drift at t={t}")
        return out

    def sigma_e(t, x):
        x = _atleast_points(x)
        sig = np.asarray(dyn.diffusion(t, x))
        out = np.einsum("ni,nij->nj", np.asarray(d_x(t, x)), sig)
        if not np.all(np.isfinite(out)):
            raise SingularEndowmentError(f"non-finite endowment volatility at t={t}")
        return out

    return mu_e, sigma_e


def with_decomposition(econ: Economy, dyn: StateDynamics,
                       mu_e_bound: Optional[float] = None) -> Economy:
    """Return the economy with (mu_e, sigma_e) attached."""
    mu_e, sigma_e = endowment_decomposition(econ, dyn)
    return dataclasses.replace(econ, mu_e=mu_e, sigma_e=sigma_e,
                               mu_e_bound=(mu_e_bound if mu_e_bound is not None
                                           else econ.mu_e_bound))


def sampled_sup(fn, plan: SamplePlan) -> float:
    """Empirical sup of |fn| over the plan's probes (vector values take norms)."""
    ts, xs = plan.draws()
    worst = 0.0
    for t, x in zip(ts, xs):
        v = np.asarray(fn(t, x[None, :]))
        worst = max(worst, float(np.max(np.linalg.norm(np.atleast_2d(v), axis=-1))))
    return worst


@dataclass(frozen=True)
class HolderReport:
    gamma: float
    coefficient: float
    n_pairs: int


def holder_report(g, plan: SamplePlan, gamma: float = 1.0) -> HolderReport:
    """Sampled Holder coefficient sup |g(x) - g(x')| / |x - x'|^gamma.

    gamma is declared by the caller, not estimated; the default 1.0 checks a
    Lipschitz modulus, which every registry builtin satisfies.
    """
    if not 0.0 < gamma <= 1.0:
        raise InputError("holder exponent must lie in (0, 1]")
    _, xs = plan.draws()
    n = xs.shape[0] // 2
    ga = np.asarray(g(xs[:n]))
    gb = np.asarray(g(xs[n:2 * n]))
    gaps = np.linalg.norm(xs[:n] - xs[n:2 * n], axis=1)
    keep = gaps > 1e-12
    diff = np.abs(ga[keep] - gb[keep])
    denom = (gaps[keep] ** gamma).reshape((-1,) + (1,) * (diff.ndim - 1))
    quot = diff / denom
    coeff = float(np.max(quot)) if quot.size else 0.0
    return HolderReport(gamma=gamma, coefficient=coeff, n_pairs=int(keep.sum()))
