"""First/second variations: FD oracles, linearity, cocycle composition."""

import numpy as np
import pytest

from bqlab.lagrangian import ExtendedState
from bqlab.linearization import (
    BaseRun,
    BaseRunConfig,
    SecondVariationState,
    VariationState,
    jacobian_action,
    variation_inner,
    variation_norm,
)
from bqlab.spectral import (
    GridSpec,
    PhysicalParams,
    ScalarField,
    SpectralState,
    random_state,
    trig_mode,
)

GRID = GridSpec(32)
P = PhysicalParams()
DT = 2.5e-3


def make_cfg(seed=11, U0=None, ext0=None, noise=True):
    return BaseRunConfig(GRID, P, DT, master_seed=seed, U0=U0, ext0=ext0, noise=noise)


def wrap_pi(d):
    return np.mod(d + np.pi, 2 * np.pi) - np.pi


@pytest.fixture(scope="module")
def base_setup():
    rng = np.random.default_rng(3)
    U0 = random_state(GRID, rng, max_mode=4, amplitude=0.3)
    ext0 = ExtendedState.default(x=(1.3, 2.1), tau=(0.5, -0.2), v=(0.6, 0.8))
    pert = random_state(GRID, rng, max_mode=3, amplitude=0.2)
    dirblocks = (
        pert,
        np.array([0.03, -0.07]),
        np.array([0.11, 0.05]),
        np.array([[0.02, -0.03], [0.05, 0.01]]),
    )
    return U0, ext0, dirblocks


class TestFirstVariation:
    def test_zero_direction_stays_zero(self, base_setup):
        U0, ext0, _ = base_setup
        var = VariationState.zero(GRID)
        run = BaseRun(make_cfg(U0=U0, ext0=ext0))
        run.advance_to_time(0.2, passengers=[var])
        assert variation_norm(var, P, blocks="all") == 0.0

    def test_heat_kernel_on_zero_base(self):
        # base U = 0: psi^2 decays exactly by the heat factor, psi^1 picks up
        # the buoyancy response ~ -g t sin x1
        var = VariationState.from_field(trig_mode(GRID, (1, 0), 0, "temperature"))
        run = BaseRun(make_cfg(noise=False))
        t = 0.05
        run.advance_to_time(t, passengers=[var])
        assert var.psi.theta.mode((1, 0)) == pytest.approx(
            0.5 * np.exp(-P.nu2 * t), rel=1e-12
        )
        x1, _ = GRID.points
        # -g t sin x1 up to the O(t^2) heat-kernel correction
        tol = 0.6 * (P.nu1 + P.nu2) * t**2 * abs(P.g)
        assert np.max(np.abs(var.psi.omega.to_physical() + P.g * t * np.sin(x1))) < tol

    def test_fd_consistency_mixed_blocks(self, base_setup):
        U0, ext0, (pert, y0, z0, B0) = base_setup
        T = 0.1

        def flow(eps):
            run = BaseRun(
                make_cfg(
                    U0=U0 + eps * pert,
                    ext0=ExtendedState(
                        ext0.x + eps * y0, ext0.tau + eps * z0, ext0.v.copy(), ext0.A + eps * B0
                    ),
                )
            )
            run.advance_to_time(T)
            return run

        base = flow(0.0)
        var = VariationState(pert, y0.copy(), z0.copy(), B0.copy())
        run = BaseRun(make_cfg(U0=U0, ext0=ext0))
        run.advance_to_time(T, passengers=[var])

        errs = []
        for eps in (1e-3, 5e-4, 2.5e-4):
            star = flow(eps)
            err = max(
                np.max(np.abs((star.U.omega.coeffs - base.U.omega.coeffs) / eps - var.psi.omega.coeffs)),
                np.max(np.abs((star.U.theta.coeffs - base.U.theta.coeffs) / eps - var.psi.theta.coeffs)),
                np.max(np.abs(wrap_pi(star.ext.x - base.ext.x) / eps - var.y)),
                np.max(np.abs((star.ext.tau - base.ext.tau) / eps - var.zeta)),
                np.max(np.abs((star.ext.A - base.ext.A) / eps - var.Bmat)),
            )
            errs.append(err)
        # order >= 0.9 under eps-halving (exact derivative of the discrete flow)
        order = np.log2(errs[0] / errs[1])
        order2 = np.log2(errs[1] / errs[2])
        assert min(order, order2) > 0.9

    def test_linearity_exact(self, base_setup):
        U0, ext0, (pert, y0, z0, B0) = base_setup
        var1 = VariationState(pert, y0.copy(), z0.copy(), B0.copy())
        var2 = var1.scale(2.5)
        run = BaseRun(make_cfg(U0=U0, ext0=ext0))
        run.advance_to_time(0.1, passengers=[var1, var2])
        assert np.max(np.abs(var2.psi.omega.coeffs - 2.5 * var1.psi.omega.coeffs)) < 1e-12
        assert np.max(np.abs(var2.y - 2.5 * var1.y)) < 1e-14
        assert np.max(np.abs(var2.Bmat - 2.5 * var1.Bmat)) < 1e-14


class TestJacobianAction:
    def test_identity_at_equal_times(self, base_setup):
        U0, ext0, (pert, y0, z0, B0) = base_setup
        var = VariationState(pert, y0, z0, B0)
        out = jacobian_action(var, 0.1, 0.1, make_cfg(U0=U0, ext0=ext0))
        assert np.array_equal(out.psi.omega.coeffs, var.psi.omega.coeffs)
        assert np.array_equal(out.y, var.y)

    def test_rejects_backward(self, base_setup):
        U0, ext0, (pert, *_rest) = base_setup
        with pytest.raises(ValueError):
            jacobian_action(VariationState.from_field(pert), 0.2, 0.1, make_cfg(U0=U0, ext0=ext0))

    def test_cocycle_composition(self, base_setup):
        U0, ext0, (pert, y0, z0, B0) = base_setup
        cfg = make_cfg(U0=U0, ext0=ext0)
        var = VariationState(pert, y0, z0, B0)
        direct = jacobian_action(var, 0.0, 0.2, cfg)
        mid = jacobian_action(var, 0.0, 0.1, cfg)
        chained = jacobian_action(mid, 0.1, 0.2, cfg)
        num = variation_norm(
            VariationState(
                direct.psi - chained.psi,
                direct.y - chained.y,
                direct.zeta - chained.zeta,
                direct.Bmat - chained.Bmat,
            ),
            P,
            blocks="all",
        )
        assert num / variation_norm(direct, P, blocks="all") < 1e-8


class TestSecondVariation:
    def test_zero_first_variation_keeps_second_zero(self, base_setup):
        U0, ext0, _ = base_setup
        var = VariationState.zero(GRID)
        sec = SecondVariationState.zero(GRID)
        run = BaseRun(make_cfg(U0=U0, ext0=ext0))
        run.advance_to_time(0.1, passengers=[var], second=[sec])
        assert np.max(np.abs(sec.phi.omega.coeffs)) == 0.0
        assert np.max(np.abs(sec.Cmat)) == 0.0

    def test_two_mode_source_on_zero_base(self):
        # base U=0, psi0 a single temperature mode: at small t the theta
        # second variation integrates -2 (K*psi^1).grad psi^2 where psi^1 is
        # the buoyancy response; leading behavior is O(t^3) and captured by
        # the closed two-mode product, which the FD oracle cross-checks.
        var = VariationState.from_field(trig_mode(GRID, (1, 0), 0, "temperature"))
        sec = SecondVariationState.zero(GRID)
        run = BaseRun(make_cfg(noise=False))
        run.advance_to_time(0.1, passengers=[var], second=[sec])

        def flow(eps):
            U0 = eps * trig_mode(GRID, (1, 0), 0, "temperature")
            r = BaseRun(make_cfg(U0=U0, noise=False))
            r.advance_to_time(0.1)
            return r.U

        eps = 1e-3
        plus, base, minus = flow(eps), flow(0.0), flow(-eps)
        d2 = (plus.theta.coeffs - 2 * base.theta.coeffs + minus.theta.coeffs) / eps**2
        assert np.max(np.abs(d2 - sec.phi.theta.coeffs)) < 1e-8

    def test_central_second_difference_full_blocks(self, base_setup):
        U0, ext0, (pert, y0, z0, B0) = base_setup
        var = VariationState(pert, y0.copy(), z0.copy(), B0.copy())
        sec = SecondVariationState.zero(GRID)
        run = BaseRun(make_cfg(U0=U0, ext0=ext0))
        T = 0.1
        run.advance_to_time(T, passengers=[var], second=[sec])

        def flow(eps):
            r = BaseRun(
                make_cfg(
                    U0=U0 + eps * pert,
                    ext0=ExtendedState(
                        ext0.x + eps * y0, ext0.tau + eps * z0, ext0.v.copy(), ext0.A + eps * B0
                    ),
                )
            )
            r.advance_to_time(T)
            return r

        eps = 1e-3
        plus, base, minus = flow(eps), flow(0.0), flow(-eps)
        d2_om = (plus.U.omega.coeffs - 2 * base.U.omega.coeffs + minus.U.omega.coeffs) / eps**2
        d2_x = (wrap_pi(plus.ext.x - base.ext.x) + wrap_pi(minus.ext.x - base.ext.x)) / eps**2
        d2_tau = (plus.ext.tau - 2 * base.ext.tau + minus.ext.tau) / eps**2
        d2_A = (plus.ext.A - 2 * base.ext.A + minus.ext.A) / eps**2
        assert np.max(np.abs(d2_om - sec.phi.omega.coeffs)) < 1e-7
        assert np.max(np.abs(d2_x - sec.z)) < 1e-7
        assert np.max(np.abs(d2_tau - sec.xi)) < 1e-7
        assert np.max(np.abs(d2_A - sec.Cmat)) < 1e-7


def test_tangent_block_matches_extended_dynamics(base_setup):
    """psi = 0 directions reproduce the tangent/Jacobian dynamics of the
    extended step: (y, zeta, B) evolve exactly like perturbations of
    (x, tau, A) under the same frozen velocities."""
    U0, ext0, _ = base_setup
    y0, z0, B0 = np.array([0.01, -0.02]), np.array([0.05, 0.03]), 0.01 * np.eye(2)
    var = VariationState(SpectralState.zero(GRID), y0.copy(), z0.copy(), B0.copy())
    run = BaseRun(make_cfg(U0=U0, ext0=ext0))
    T = 0.1
    run.advance_to_time(T, passengers=[var])

    def flow(eps):
        r = BaseRun(
            make_cfg(
                U0=U0,
                ext0=ExtendedState(
                    ext0.x + eps * y0, ext0.tau + eps * z0, ext0.v.copy(), ext0.A + eps * B0
                ),
            )
        )
        r.advance_to_time(T)
        return r

    eps = 1e-6
    star, base = flow(eps), flow(0.0)
    assert np.max(np.abs(wrap_pi(star.ext.x - base.ext.x) / eps - var.y)) < 1e-6
    assert np.max(np.abs((star.ext.tau - base.ext.tau) / eps - var.zeta)) < 1e-6
    assert np.max(np.abs((star.ext.A - base.ext.A) / eps - var.Bmat)) < 1e-6
    # with psi = 0 the field block stays exactly zero
    assert np.max(np.abs(var.psi.omega.coeffs)) == 0.0


def test_variation_inner_blocks():
    a = VariationState.zero(GRID)
    a.y = np.array([1.0, 0.0])
    a.zeta = np.array([0.0, 2.0])
    a.Bmat = np.eye(2)
    assert variation_inner(a, a, P, blocks="field") == 0.0
    assert variation_inner(a, a, P, blocks="lagrangian") == pytest.approx(1.0)
    assert variation_inner(a, a, P, blocks="tangent") == pytest.approx(5.0)
    assert variation_inner(a, a, P, blocks="jacobian") == pytest.approx(3.0)
    assert variation_inner(a, a, P, blocks="all") == pytest.approx(7.0)
