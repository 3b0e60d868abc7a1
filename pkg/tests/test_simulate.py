import numpy as np
import pytest

from radner import (AgentSpec, DivergenceError, Economy, GridSpec, InputError,
                    MarketBundle, apriori_bounds, assemble_market, bmo_estimate,
                    canonical_json, ensemble_sanity, phi, phi_prime,
                    scalar_field, simulate_equilibrium, simulate_state)


def test_state_paths_are_reproducible(unit_dynamics):
    a = simulate_state(unit_dynamics, 1.0, n_paths=16, n_steps=32, seed=42)
    b = simulate_state(unit_dynamics, 1.0, n_paths=16, n_steps=32, seed=42)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.increments, b.increments)
    c = simulate_state(unit_dynamics, 1.0, n_paths=16, n_steps=32, seed=43)
    assert not np.array_equal(a.increments, c.increments)


def test_leading_paths_do_not_depend_on_ensemble_size(unit_dynamics):
    # per-path streams: growing the ensemble must not reshuffle early paths
    small = simulate_state(unit_dynamics, 1.0, n_paths=8, n_steps=16, seed=5)
    big = simulate_state(unit_dynamics, 1.0, n_paths=32, n_steps=16, seed=5)
    assert np.array_equal(small.states, big.subset(8).states)


def test_unit_state_reduces_to_brownian_motion(unit_dynamics):
    ens = simulate_state(unit_dynamics, 1.0, n_paths=8, n_steps=32, seed=1)
    walked = np.diff(ens.states, axis=1)
    assert np.allclose(walked, ens.increments, atol=1e-14, rtol=0.0)


def test_increment_statistics(unit_dynamics):
    ens = simulate_state(unit_dynamics, 1.0, n_paths=64, n_steps=128, seed=9)
    sanity = ensemble_sanity(ens)
    assert sanity["n"] == 64 * 128
    assert sanity["z_mean"] < 4.0
    assert sanity["z_var"] < 4.0


def test_simulate_state_guards(unit_dynamics):
    with pytest.raises(InputError):
        simulate_state(unit_dynamics, 1.0, n_paths=0, n_steps=8, seed=0)
    with pytest.raises(InputError):
        simulate_state(unit_dynamics, 1.0, n_paths=8, n_steps=8, seed=0,
                       x0=np.zeros(3))


def test_lyapunov_transform_frozen_values():
    # phi(1) = (e^2 - 3) / 4
    assert phi(1.0) == pytest.approx((np.e ** 2 - 3.0) / 4.0, rel=1e-15)
    assert phi(0.0) == 0.0
    assert phi(-1.0) == phi(1.0)
    assert phi_prime(0.0) == 0.0
    assert phi_prime(-0.7) == -phi_prime(0.7)


def test_lyapunov_ode_identity():
    # phi'' - 2 |phi'| = 1 with phi'' = e^{2|x|}
    for x in (0.1, 0.5, 1.3):
        assert np.exp(2 * x) - 2 * abs(phi_prime(x)) == pytest.approx(1.0,
                                                                      rel=1e-12)
        h = 1e-6
        fd = (phi(x + h) - phi(x - h)) / (2 * h)
        assert fd == pytest.approx(phi_prime(x), rel=1e-8)


def test_apriori_bounds_no_endowment(zero_solution, zero_econ):
    out = apriori_bounds(zero_solution, zero_econ)
    # mu_e = 0 makes the floor 0 and a = log(1 + T - t) sits above it
    assert out["mu_e_bound_used"] == 0.0
    assert not out["empirical_bounds"]
    assert out["a_lower_bound"] == 0.0
    assert out["supermartingale_margin"] >= -1e-6
    assert out["supermartingale_ok"]
    assert out["Y_sup"][0] == pytest.approx(np.log(2.0), abs=5e-3)
    assert out["gronwall_ok"]
    assert out["Y_sup"][0] <= out["gronwall_bound"][0]


def test_apriori_bounds_fall_back_to_lattice_sups(zero_solution, unit_dynamics):
    econ = Economy(agents=(AgentSpec(1.0, scalar_field("zero"), 1.0),),
                   horizon_T=1.0,
                   mu_e=lambda t, X: np.zeros(X.shape[0]))
    out = apriori_bounds(zero_solution, econ)
    assert out["empirical_bounds"]
    assert out["gronwall_ok"]


def test_bmo_proxy_vanishes_without_volatility(zero_solution, zero_econ,
                                               unit_dynamics):
    est, bounds = bmo_estimate(zero_solution, zero_econ, unit_dynamics)
    # space-constant rows carry no volatility at all
    assert np.max(np.abs(est)) < 1e-8
    assert np.all(bounds > 0)
    assert np.all(est <= bounds)


@pytest.fixture(scope="module")
def diagnostics(const_solution, const_econ, unit_dynamics):
    bundle = assemble_market(const_solution, const_econ, unit_dynamics)
    ens = simulate_state(unit_dynamics, 1.0, n_paths=48, n_steps=64, seed=21)
    paths, report = simulate_equilibrium(const_solution, bundle, const_econ,
                                         unit_dynamics, ens, subset_size=16,
                                         n_sample_steps=8)
    return paths, report


def test_equilibrium_report_contents(diagnostics, const_econ):
    paths, report = diagnostics
    assert len(paths) == const_econ.n_agents
    assert paths[0].wealth.shape == (16, 65)
    clearing = report.clearing
    assert clearing["sup_holdings_gap"] < 5e-2
    assert clearing["sup_consumption_gap"] < 5e-2
    assert clearing["terminal_wealth_gap"] < 5e-2
    opt = report.optimality
    assert opt["max_mu_V_optimal"] < 1e-10
    assert opt["max_mu_V"] <= 1e-9
    assert opt["min_mu_V"] < -1e-5
    assert opt["n_strategies"] == 10 * const_econ.n_agents
    assert report.bounds["supermartingale_ok"]
    assert report.bounds["gronwall_ok"]
    assert report.bmo["ok"]
    assert report.mesh["n_paths"] == 48
    assert report.seed == 21


def test_report_is_byte_stable(diagnostics, const_solution, const_econ,
                               unit_dynamics):
    _, first = diagnostics
    bundle = assemble_market(const_solution, const_econ, unit_dynamics)
    ens = simulate_state(unit_dynamics, 1.0, n_paths=48, n_steps=64, seed=21)
    _, second = simulate_equilibrium(const_solution, bundle, const_econ,
                                     unit_dynamics, ens, subset_size=16,
                                     n_sample_steps=8)
    assert canonical_json(first.to_dict()) == canonical_json(second.to_dict())


def test_initial_holdings_must_clear(const_solution, unit_dynamics):
    agents = (AgentSpec(1.0, scalar_field("constant:0.3"), 0.5,
                        endowment_bound=0.3),
              AgentSpec(2.0, scalar_field("constant:0.5"), 0.3,
                        endowment_bound=0.5))
    econ = Economy(agents=agents, horizon_T=1.0,
                   mu_e=lambda t, X: np.zeros(X.shape[0]), mu_e_bound=0.0)
    bundle = assemble_market(const_solution, econ, unit_dynamics)
    ens = simulate_state(unit_dynamics, 1.0, n_paths=4, n_steps=8, seed=0)
    with pytest.raises(InputError, match="holdings"):
        simulate_equilibrium(const_solution, bundle, econ, unit_dynamics, ens)


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_reports_step_and_path(zero_solution, zero_econ,
                                          unit_dynamics):
    grid = GridSpec(t_steps=1, x_lo=(-1.0,), x_hi=(1.0,), x_steps=(4,))
    A = np.full((2, 5), 2.0)
    A[-1] = 1.0
    bundle = MarketBundle(times=np.linspace(0.0, 1.0, 2), grid=grid, A=A,
                          mu=np.full((2, 5), 1e160),
                          sigma=np.zeros((2, 5, 1)), Z=np.zeros((2, 5, 1, 1)),
                          ay=np.zeros((2, 5, 1)))
    ens = simulate_state(unit_dynamics, 1.0, n_paths=4, n_steps=8, seed=3)
    with pytest.raises(DivergenceError) as err:
        simulate_equilibrium(zero_solution, bundle, zero_econ, unit_dynamics,
                             ens, run_bounds=False)
    assert err.value.step is not None
    assert err.value.path is not None
