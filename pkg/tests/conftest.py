import numpy as np
import pytest

from radner import (AgentSpec, Economy, GridSpec, StateDynamics,
                    diffusion_field, drift_field, make_driver, scalar_field,
                    solve_backward, with_decomposition)


def unit_state(dim: int = 1, sigma: float = 1.0) -> StateDynamics:
    K = max(sigma, 1.0 / sigma)
    return StateDynamics(dim=dim, drift=drift_field("zero"),
                         diffusion=diffusion_field(f"constant:{sigma}"),
                         regularity_K=K, x0=np.zeros(dim))


@pytest.fixture(scope="session")
def unit_dynamics():
    return unit_state()


@pytest.fixture(scope="session")
def zero_econ(unit_dynamics):
    econ = Economy(agents=(AgentSpec(1.0, scalar_field("zero"), 1.0,
                                     endowment_bound=0.0),),
                   horizon_T=1.0, mu_e_bound=0.0)
    return with_decomposition(econ, unit_dynamics)


@pytest.fixture(scope="session")
def const_econ(unit_dynamics):
    # heterogeneous risk aversions, state-independent incomes
    agents = (AgentSpec(1.0, scalar_field("constant:0.3"), 0.7,
                        endowment_bound=0.3),
              AgentSpec(2.0, scalar_field("constant:0.5"), 0.3,
                        endowment_bound=0.5))
    econ = Economy(agents=agents, horizon_T=1.0, mu_e_bound=0.0)
    return with_decomposition(econ, unit_dynamics)


def ou_state() -> StateDynamics:
    return StateDynamics(dim=1, drift=drift_field("zero"),
                         diffusion=diffusion_field("ou_decay:1.0"),
                         regularity_K=float(np.exp(1.0)), x0=np.zeros(1))


def ou_economy(dyn: StateDynamics) -> Economy:
    agents = (AgentSpec(1.0, scalar_field("ou_income:1.0,0.0,0.4,0.5,0.3,0.6,0.5"),
                        0.6, endowment_bound=0.5),
              AgentSpec(2.0, scalar_field("ou_income:1.0,0.0,0.4,0.5,-0.2,0.8,0.8"),
                        0.4, endowment_bound=0.8))
    econ = Economy(agents=agents, horizon_T=1.0, mu_e_bound=1.0)
    return with_decomposition(econ, dyn)


@pytest.fixture(scope="session")
def ou_setup():
    dyn = ou_state()
    return dyn, ou_economy(dyn)


@pytest.fixture(scope="session")
def small_grid():
    return GridSpec(t_steps=200, x_lo=(-3.0,), x_hi=(3.0,), x_steps=(60,))


@pytest.fixture(scope="session")
def zero_solution(zero_econ, unit_dynamics, small_grid):
    driver = make_driver(zero_econ, "full")
    return solve_backward(zero_econ, unit_dynamics, driver, small_grid)


@pytest.fixture(scope="session")
def const_solution(const_econ, unit_dynamics, small_grid):
    driver = make_driver(const_econ, "full")
    return solve_backward(const_econ, unit_dynamics, driver, small_grid)
