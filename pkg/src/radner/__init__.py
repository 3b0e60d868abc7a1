"""Incomplete-market equilibrium engine.

Computes the single-annuity equilibrium of an economy of exponential-utility
agents with unspanned Markovian income by backward finite differences on the
equivalent semilinear PDE system, verifies it (structural identities,
a-priori bounds, Monte Carlo optimality), and cross-checks it against an
independent heat-kernel Picard solver on constant-coefficient states.
"""

__version__ = "0.1.0"

from .drivers import (Driver, DriverInput, TruncationLevel, bf_split,
                      lipschitz_certificate, make_driver, truncation_pair,
                      universal_constant)
from .equilibrium import (MarketBundle, StrategyPath, assemble_market,
                          candidate_value_drift, clearing_identity,
                          clearing_residuals, optimal_consumption,
                          optimal_strategy, optimality_drift_check,
                          perturb_consumption, perturb_holdings,
                          simulate_wealth, wealth_sde_step)
from .errors import (ConfigError, DivergenceError, DriverOverflowError,
                     EngineError, FingerprintMismatchError, InputError,
                     InternalInvariantError, NonContractionError,
                     OracleScaleError, OracleUnsupportedError, SchemeError,
                     SingularEndowmentError)
from .fields import ScalarField, diffusion_field, drift_field, scalar_field
from .model import (AgentSpec, Economy, SamplePlan, StateDynamics,
                    derived_constants, endowment_decomposition, holder_report,
                    ou_transform, validate_state_dynamics, with_decomposition)
from .pde_solver import (GridSpec, SchemeParams, SolutionGrid, extract_Z,
                         load_solution, save_solution, solve_backward,
                         solve_linear_expectation, write_slices)
from .picard_kernel import (KernelIterate, KernelSpec, PicardResult, QuadPlan,
                            apply_Phi, apply_Psi, heat_kernel,
                            oracle_nonlinearity, picard_solve, sup_norm,
                            weighted_norm)
from .jsonio import canonical_json, fingerprint, write_canonical
from .simulate import (DiagnosticsReport, PathEnsemble, apriori_bounds,
                       bmo_estimate, ensemble_sanity, phi, phi_prime,
                       simulate_equilibrium, simulate_state)

__all__ = [name for name in dir() if not name.startswith("_")]
