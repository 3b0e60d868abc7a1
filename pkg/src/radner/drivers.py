"""Driver rows of the coupled quadratic BSDE system and their truncations.

Row layout everywhere: index 0 is the log-annuity row (a), rows 1..I are the
agent rows (Y^i). For y = (y^0, ..., y^I) and z rows z^l:

    f^0 = ba mu_e - 1/2 sum_l kappa^l |z^l|^2 - exp(-y^0)
    f^i = 1/2 |z^i|^2 + exp(-y^0) (1 + y^0 + y^i - alpha^i e^i)

The truncated system replaces |z|^2 by q_N(z) = |z| min(|z|, N) and the y
arguments by clamps at N; the intermediate system clamps y at a separate
level N0 <= N. Inactive truncations reproduce the full driver bit for bit
because both paths share one code path.

exp(-y^0) is evaluated with the argument clipped to +-700; clips are counted
per driver instance so diagnostics can surface them. A non-finite row raises
the overflow error rather than letting infinities propagate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (DriverOverflowError, InputError, InternalInvariantError)
from .fields import _atleast_points
from .model import Economy

EXP_CLIP = 700.0

DRIVER_KINDS = ("full", "truncated", "intermediate")


@dataclass(frozen=True)
class TruncationLevel:
    """z-truncation radius N and y-clamp level N0 (defaults to N)."""

    N: float
    N0: Optional[float] = None

    def __post_init__(self):
        if not (np.isfinite(self.N) and self.N > 0):
            raise InputError("truncation level N must be finite and positive")
        if self.N0 is not None:
            if not (np.isfinite(self.N0) and self.N0 > 0):
                raise InputError("y-clamp level N0 must be finite and positive")
            if self.N0 > self.N:
                raise InputError("y-clamp level N0 must not exceed N")

    @property
    def y_level(self) -> float:
        return self.N if self.N0 is None else self.N0


@dataclass
class DriverStats:
    n_exp_clamped: int = 0


@dataclass(frozen=True)
class DriverInput:
    """One evaluation point: scalars y per row, z rows against the noise."""

    t: float
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        z = np.atleast_2d(np.asarray(self.z, dtype=float))
        if z.shape != (y.size, x.size):
            raise InputError(f"z must be (rows, dim) = ({y.size}, {x.size}), "
                             f"got {z.shape}")
        for name, arr in (("x", x), ("y", y), ("z", z)):
            if not np.all(np.isfinite(arr)):
                raise InputError(f"non-finite driver input {name}")
        if not np.isfinite(self.t):
            raise InputError("non-finite driver input t")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)


def truncation_pair(N: float):
    """The clamp iota_N and the quadratic truncation q_N(z) = |z| iota_N(|z|)."""
    if N <= 0:
        raise InputError("truncation level must be positive")

    def iota(v):
        return np.clip(v, -N, N)

    def q(z):
        z = np.asarray(z, dtype=float)
        s = np.linalg.norm(np.atleast_2d(z), axis=-1)
        out = s * np.minimum(s, N)
        return out if out.size > 1 else float(out[0])

    return iota, q


def _require_mu_e(econ: Economy):
    if econ.mu_e is None:
        raise InputError("economy has no endowment decomposition attached; "
                         "call with_decomposition first")


def _rows(econ: Economy, t: float, x, y, z, z_cap: Optional[float],
          y_cap: Optional[float], stats: Optional[DriverStats]) -> np.ndarray:
    x = _atleast_points(x)
    n, d = x.shape
    J = econ.n_agents + 1
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    if y.shape != (n, J) or z.shape != (n, J, d):
        raise InputError(f"driver value shapes must be ({n},{J}) and ({n},{J},{d}), "
                         f"got {y.shape} and {z.shape}")

    s = np.linalg.norm(z, axis=2)
    s_eff = s if z_cap is None else np.minimum(s, z_cap)
    Q = s * s_eff

    yy = y if y_cap is None else np.clip(y, -y_cap, y_cap)
    y0 = yy[:, 0]
    arg = np.clip(y0, -EXP_CLIP, EXP_CLIP)
    if stats is not None and y_cap is None:
        stats.n_exp_clamped += int(np.count_nonzero(np.abs(y0) > EXP_CLIP))
    E = np.exp(-arg)

    out = np.empty((n, J))
    mu = np.asarray(econ.mu_e(t, x))
    # overflow surfaces as the typed error below, not as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        out[:, 0] = econ.ba * mu - 0.5 * (Q[:, 1:] @ econ.kappas) - E
        for i, agent in enumerate(econ.agents, start=1):
            ei = np.asarray(agent.endowment(t, x))
            out[:, i] = 0.5 * Q[:, i] + E * (1.0 + y0 + yy[:, i]
                                             - agent.risk_aversion * ei)

    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(out))[0]
        raise DriverOverflowError(
            f"driver row {bad[1]} overflowed at t={t}, node {bad[0]}",
            t=t, node=int(bad[0]))
    return out


class Driver:
    """Vectorized driver of one kind ("full", "truncated", "intermediate").

    f(t, x, y, z) evaluates the rows; F_pde supplies the PDE nonlinearity
    F(t, x, u, Du) = -f(t, x, u, Du Sigma) used by the backward scheme.
    """

    def __init__(self, econ: Economy, kind: str = "full",
                 level: Optional[TruncationLevel] = None):
        if kind not in DRIVER_KINDS:
            raise InputError(f"driver kind must be one of {DRIVER_KINDS}")
        if kind != "full" and level is None:
            raise InputError(f"driver kind {kind!r} requires a truncation level")
        _require_mu_e(econ)
        self.econ = econ
        self.kind = kind
        self.level = level
        self.stats = DriverStats()
        if kind == "full":
            self._z_cap = None
            self._y_cap = None
        elif kind == "truncated":
            self._z_cap = level.N
            self._y_cap = level.N
        else:
            self._z_cap = level.N
            self._y_cap = level.y_level

    def f(self, t: float, x, y, z) -> np.ndarray:
        return _rows(self.econ, t, x, y, z, self._z_cap, self._y_cap, self.stats)

    def f_at(self, inp: DriverInput) -> np.ndarray:
        return self.f(inp.t, inp.x[None, :], inp.y[None, :], inp.z[None, :, :])[0]

    def F_pde(self, t: float, x, u, du, sigma) -> np.ndarray:
        """Negated driver at z = Du Sigma; du is (n, J, d), sigma (n, d, d)."""
        z = np.einsum("njd,nde->nje", np.asarray(du), np.asarray(sigma))
        return -self.f(t, x, u, z)

    def terminal(self, x) -> np.ndarray:
        """Terminal rows g = (0, alpha^i e^i(T, x)), clamped when truncating."""
        x = _atleast_points(x)
        econ = self.econ
        out = np.zeros((x.shape[0], econ.n_agents + 1))
        for i, agent in enumerate(econ.agents, start=1):
            out[:, i] = agent.risk_aversion * np.asarray(agent.endowment(econ.horizon_T, x))
        if self.kind != "full":
            out = np.clip(out, -self.level.N, self.level.N)
        return out


def make_driver(econ: Economy, kind: str = "full",
                level: Optional[TruncationLevel] = None) -> Driver:
    return Driver(econ, kind, level)


# ---------------------------------------------------------------------------
# explicit constants and the Bensoussan-Frehse decomposition

def _declared_bounds(econ: Economy) -> tuple[float, np.ndarray]:
    if econ.mu_e_bound is None:
        raise InputError("explicit constants need a declared mu_e bound")
    bounds = []
    for a in econ.agents:
        if a.endowment_bound is None:
            raise InputError("explicit constants need declared endowment bounds")
        bounds.append(a.endowment_bound)
    return float(econ.mu_e_bound), np.asarray(bounds)


def universal_constant(econ: Economy, N0: float) -> float:
    """The constant C dominating the linear BF part and its growth bounds."""
    mu_bar, m_e = _declared_bounds(econ)
    alphas = econ.alphas()
    return float(econ.ba * mu_bar
                 + np.exp(N0) * (2.0 + 2.0 * N0 + np.max(alphas * m_e)))


@dataclass(frozen=True)
class BfBoundsReport:
    C: float
    f1_abs: np.ndarray
    f2_abs: np.ndarray
    f2_rhs: np.ndarray
    f1_ok: bool
    f2_ok: bool
    recomposition_residual: float


def bf_split(econ: Economy, level: TruncationLevel, inp: DriverInput
             ) -> tuple[np.ndarray, np.ndarray, BfBoundsReport]:
    """Split the intermediate driver into bounded and quadratic parts.

    f1 collects the exp/linear terms (uniformly bounded by the universal
    constant C), f2 the truncated quadratic terms; row 0's quadratic part is
    controlled by the total sum_j |z^j|^2 and each agent row only by its own
    |z^i|^2. Recomposition must reproduce the intermediate driver exactly.
    """
    _require_mu_e(econ)
    J = econ.n_agents + 1
    if inp.y.size != J:
        raise InputError(f"driver input has {inp.y.size} rows, economy wants {J}")
    N = level.N
    N0 = level.y_level
    iota, q = truncation_pair(N)
    iota0, _ = truncation_pair(N0)

    x = inp.x[None, :]
    mu = float(np.asarray(econ.mu_e(inp.t, x))[0])
    E = float(np.exp(-np.clip(iota0(inp.y[0]), -EXP_CLIP, EXP_CLIP)))
    qz = np.array([q(inp.z[l][None, :]) for l in range(J)])

    f1 = np.empty(J)
    f2 = np.empty(J)
    f1[0] = econ.ba * mu - E
    f2[0] = -0.5 * float(qz[1:] @ econ.kappas)
    for i, agent in enumerate(econ.agents, start=1):
        ei = float(np.asarray(agent.endowment(inp.t, x))[0])
        f1[i] = E * (1.0 + iota0(inp.y[0]) + iota0(inp.y[i])
                     - agent.risk_aversion * ei)
        f2[i] = 0.5 * qz[i]

    driver = Driver(econ, "intermediate", TruncationLevel(N=N, N0=N0))
    resid = float(np.max(np.abs(f1 + f2 - driver.f_at(inp))))
    if resid > 1e-12:
        raise InternalInvariantError(
            f"BF split fails to recompose the driver (residual {resid:.3e})")

    C = universal_constant(econ, N0)
    znorm2 = np.sum(inp.z * inp.z, axis=1)
    f2_rhs = np.empty(J)
    f2_rhs[0] = C * (1.0 + float(np.sum(znorm2[1:])))
    f2_rhs[1:] = C * (1.0 + znorm2[1:])
    report = BfBoundsReport(
        C=C,
        f1_abs=np.abs(f1),
        f2_abs=np.abs(f2),
        f2_rhs=f2_rhs,
        f1_ok=bool(np.all(np.abs(f1) <= C)),
        f2_ok=bool(np.all(np.abs(f2) <= f2_rhs)),
        recomposition_residual=resid,
    )
    return f1, f2, report


def lipschitz_certificate(econ: Economy, level: TruncationLevel) -> float:
    """Explicit Lipschitz constant of the truncated driver in (y, z).

    q_N has global Lipschitz constant 2N, so each row is N-Lipschitz in its
    z argument (the 1/2 prefactor); the y part is dominated by the clamped
    exponential and its linear companions at level N0.
    """
    _, m_e = _declared_bounds(econ)
    N0 = level.y_level
    alphas = econ.alphas()
    amax = float(np.max(alphas * m_e))
    l_z = level.N
    l_y = np.exp(N0) * np.sqrt((2.0 + 2.0 * N0 + amax) ** 2 + 1.0)
    return float(np.sqrt(l_y * l_y + l_z * l_z))


def sampled_lipschitz(f, n_rows: int, dim: int, horizon_T: float,
                      x_lo, x_hi, y_range: float, z_range: float,
                      n_pairs: int = 512, seed: int = 0) -> float:
    """Empirical Lipschitz constant of f(t, x, y, z) in (y, z).

    Difference quotients over uniform draws; a floor of 1e-12 on the pair
    distance keeps the quotient finite.
    """
    rng = np.random.default_rng(seed)
    lo = np.atleast_1d(np.asarray(x_lo, dtype=float))
    hi = np.atleast_1d(np.asarray(x_hi, dtype=float))
    n_t = 8
    m = max(1, n_pairs // n_t)
    worst = 0.0
    for _ in range(n_t):
        t = float(rng.uniform(0.0, horizon_T))
        x = rng.uniform(lo, hi, (m, dim))
        ya = rng.uniform(-y_range, y_range, (m, n_rows))
        yb = rng.uniform(-y_range, y_range, (m, n_rows))
        za = rng.uniform(-z_range, z_range, (m, n_rows, dim))
        zb = rng.uniform(-z_range, z_range, (m, n_rows, dim))
        fa = np.asarray(f(t, x, ya, za))
        fb = np.asarray(f(t, x, yb, zb))
        num = np.linalg.norm(fa - fb, axis=-1)
        den = np.sqrt(np.sum((ya - yb) ** 2, axis=1)
                      + np.sum((za - zb) ** 2, axis=(1, 2)))
        den = np.maximum(den, 1e-12)
        worst = max(worst, float(np.max(num / den)))
    return worst
