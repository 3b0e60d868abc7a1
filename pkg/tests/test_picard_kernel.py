import numpy as np
import pytest

from radner import (AgentSpec, Economy, InputError, KernelIterate, KernelSpec,
                    NonContractionError, OracleScaleError, QuadPlan,
                    TruncationLevel, apply_Phi, apply_Psi, heat_kernel,
                    make_driver, oracle_nonlinearity, picard_solve,
                    scalar_field, sup_norm, weighted_norm, with_decomposition)
from radner.model import StateDynamics
from radner.fields import diffusion_field, drift_field


def test_heat_kernel_frozen_value():
    # exp(-0.5) / sqrt(8 pi) for lam = 2 over a unit time gap at distance 2
    got = heat_kernel(2.0, 0.0, 0.0, 1.0, 2.0)
    assert got == pytest.approx(0.12098536225957168, rel=1e-15)


def test_heat_kernel_normalizes():
    xp = np.linspace(-15.0, 15.0, 4001)
    dens = heat_kernel(1.5, 0.2, 0.3, 1.0, xp)
    assert np.trapezoid(dens, xp) == pytest.approx(1.0, abs=1e-12)


def test_heat_kernel_guards():
    with pytest.raises(InputError):
        heat_kernel(1.0, 1.0, 0.0, 1.0, 0.0)
    with pytest.raises(InputError):
        heat_kernel(-1.0, 0.0, 0.0, 1.0, 0.0)


def test_quad_plan_guards():
    with pytest.raises(OracleScaleError):
        QuadPlan(xi_max=4.0)
    with pytest.raises(OracleScaleError):
        QuadPlan(n_xi=9, xi_max=8.0)
    with pytest.raises(OracleScaleError):
        QuadPlan(n_r=4)


def test_quad_weights_are_gaussian_moments():
    xi, w = QuadPlan().xi_nodes()
    # trapezoid on a uniformly sampled gaussian is accurate to machine noise
    assert np.sum(w) == pytest.approx(1.0, abs=1e-14)
    assert np.sum(w * xi) == pytest.approx(0.0, abs=1e-14)
    assert np.sum(w * xi * xi) == pytest.approx(1.0, abs=1e-12)


def test_kernel_spec_guards():
    with pytest.raises(InputError):
        KernelSpec(lam=0.0)
    with pytest.raises(InputError):
        KernelSpec(lam=1.0, beta=-2.0)
    with pytest.raises(OracleScaleError):
        KernelSpec(lam=1.0, n_x=9)
    with pytest.raises(InputError):
        KernelSpec(lam=1.0, x_halfwidth=0.0)


def test_lattice_padding():
    spec = KernelSpec(lam=0.5, x_center=1.0, x_halfwidth=2.0)
    times, xs = spec.lattice(horizon_T=4.0)
    # evaluation window plus 8 lam sqrt(T) on either side
    assert xs[0] == pytest.approx(1.0 - 2.0 - 8.0 * 0.5 * 2.0)
    assert xs[-1] == pytest.approx(1.0 + 2.0 + 8.0 * 0.5 * 2.0)
    assert times[0] == 0.0 and times[-1] == 4.0


def test_iterate_shape_guard():
    times = np.linspace(0.0, 1.0, 9)
    xs = np.linspace(-1.0, 1.0, 17)
    with pytest.raises(InputError):
        KernelIterate(times, xs, np.zeros((9, 16, 2)), np.zeros((9, 16, 2)))


def test_smoothing_is_exact_on_affine_and_quadratic():
    spec = KernelSpec(lam=0.7, n_t=12, n_x=41, x_halfwidth=1.0)
    T = 1.0

    def g(x):
        x = x[:, 0]
        return np.column_stack([2.0 + 3.0 * x, x * x])

    u = apply_Psi(g, spec, T)
    times, xs = spec.lattice(T)
    # affine data is reproduced with its own slope at every time slice
    for j, t in enumerate(times[:-1]):
        assert u.values[j, :, 0] == pytest.approx(2.0 + 3.0 * xs, abs=1e-10)
        assert u.gradients[j, :, 0] == pytest.approx(3.0, abs=1e-10)
        # the quadratic picks up the accumulated variance lam^2 (T - t)
        var = spec.lam ** 2 * (T - t)
        assert u.values[j, :, 1] == pytest.approx(xs * xs + var, abs=1e-10)
        assert u.gradients[j, :, 1] == pytest.approx(2.0 * xs, abs=1e-9)


def test_forward_integral_of_unit_source():
    spec = KernelSpec(lam=1.0, n_t=12, n_x=41, x_halfwidth=1.0)
    T = 1.0
    times, xs = spec.lattice(T)
    zero = KernelIterate(times, xs, np.zeros((times.size, xs.size, 1)),
                         np.zeros((times.size, xs.size, 1)))

    def F(s, xpts, y, w):
        return np.ones((xpts.shape[0], 1))

    phi = apply_Phi(zero, F, spec, T)
    # int_0^R 2r dr = T - t exactly (trapezoid is exact on linear integrands)
    expect = (T - times)[:, None]
    assert np.max(np.abs(phi.values[:, :, 0] - expect)) < 1e-12
    assert np.max(np.abs(phi.gradients)) < 1e-12


def test_weighted_norm_of_constant():
    times = np.linspace(0.0, 2.0, 2001)
    xs = np.linspace(-1.0, 1.0, 17)
    c = 1.75
    u = KernelIterate(times, xs, np.full((2001, 17, 1), c),
                      np.zeros((2001, 17, 1)))
    beta = 3.0
    expect = c * (1.0 - np.exp(-beta * 2.0)) / beta
    assert weighted_norm(u, beta, 2.0) == pytest.approx(expect, rel=1e-6)
    assert sup_norm(u) == pytest.approx(c)


def test_nonlinearity_scales_gradient_by_lam(zero_econ):
    drv = make_driver(zero_econ, "full")
    lam = 0.5
    F = oracle_nonlinearity(drv, lam)
    pts = np.array([[0.1], [-0.4]])
    y = np.array([[0.2, -0.1], [0.0, 0.3]])
    w = np.array([[0.6, -0.2], [1.0, 0.4]])
    got = F(0.3, pts, y, w)
    want = -drv.f(0.3, pts, y, (w * lam)[:, :, None])
    assert got == pytest.approx(want, rel=1e-14)


def test_closed_form_fixed_point(zero_econ):
    drv = make_driver(zero_econ, "full")
    spec = KernelSpec(lam=1.0, n_t=24, n_x=81, x_halfwidth=1.0)
    res = picard_solve(zero_econ, drv, spec)
    assert res.converged
    assert res.contraction_factor <= 0.75
    assert res.fixed_point_residual < 1e-7
    v0 = res.iterate.value_at(0.0, np.array([0.0]))[0]
    assert v0[0] == pytest.approx(np.log(2.0), abs=2e-3)
    assert v0[1] == pytest.approx(-np.log(2.0), abs=2e-3)
    g0 = res.iterate.grad_at(0.0, np.array([0.0]))[0]
    assert np.max(np.abs(g0)) < 2e-3
    assert res.beta_attempts[0]["beta"] == res.beta
    assert all(step["beta"] == res.beta for step in res.trace)


def _steep_affine_economy(slope: float = 5.0):
    # Steep enough that the first Picard sweeps grow before the quadratic
    # gradient coupling settles; an underweighted norm sees that transient
    # as a non-contraction.
    dyn = StateDynamics(dim=1, drift=drift_field("zero"),
                        diffusion=diffusion_field("constant:1.0"),
                        regularity_K=1.0, x0=np.zeros(1))
    econ = Economy(agents=(AgentSpec(1.0, scalar_field(f"affine:0.0,{slope}"), 1.0,
                                     endowment_bound=10.0 * slope),),
                   horizon_T=1.0, mu_e_bound=0.0)
    return with_decomposition(econ, dyn)


def test_explicit_beta_too_small_raises():
    econ = _steep_affine_economy()
    drv = make_driver(econ, "full")
    spec = KernelSpec(lam=1.0, beta=0.01, n_t=16, n_x=41, x_halfwidth=0.5)
    with pytest.raises(NonContractionError) as err:
        picard_solve(econ, drv, spec)
    assert err.value.factor > 1.0
    assert err.value.suggested_beta == pytest.approx(0.02)


def test_larger_weight_rescues_the_same_problem():
    econ = _steep_affine_economy()
    drv = make_driver(econ, "full")
    spec = KernelSpec(lam=1.0, beta=200.0, n_t=16, n_x=41, x_halfwidth=0.5)
    res = picard_solve(econ, drv, spec)
    assert res.converged
    assert res.beta == 200.0
    assert res.contraction_factor < 1.0
    assert res.sup_delta_final < 5e-3


def test_runaway_iteration_aborts_even_with_heavy_weight():
    # Truncation clamps bound the driver but the iterates still wander at
    # early times; a heavy weight must not paper over that.
    econ = _steep_affine_economy(slope=10.0)
    drv = make_driver(econ, "truncated", TruncationLevel(N=50.0))
    spec = KernelSpec(lam=1.0, beta=200.0, n_t=16, n_x=41, x_halfwidth=0.5)
    with pytest.raises(NonContractionError):
        picard_solve(econ, drv, spec, max_iter=40)
