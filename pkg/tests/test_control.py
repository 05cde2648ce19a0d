"""Steering plans: bumps, closed forms, end-to-end verification."""

import numpy as np
import pytest

from bqlab.control import (
    Bump,
    ControlPlan,
    Stage,
    build_direction_plan,
    build_matrix_plan,
    build_position_plan,
    build_steering_plan,
    closed_form_residual,
    fit_bump,
    shortest_shift,
    signed_angle,
    verify_steering,
)
from bqlab.spectral import GridSpec, PhysicalParams

GRID = GridSpec(32)
P = PhysicalParams()


class TestBump:
    def test_integral_fit(self):
        b = fit_bump(0.0, 0.25, np.pi)
        assert b.integral() == pytest.approx(np.pi, rel=1e-12)

    def test_compact_support(self):
        b = fit_bump(0.2, 0.7, 1.0)
        assert b.val(0.2) == 0.0 and b.val(0.7) == 0.0 and b.val(0.1) == 0.0
        assert b.d1(0.2) == 0.0 and b.d2(0.7) == 0.0
        assert b.val(0.45) > 0.0

    def test_derivatives_by_fd(self):
        b = fit_bump(0.0, 1.0, 2.0)
        for t in (0.3, 0.5, 0.81):
            h = 1e-6
            fd1 = (b.val(t + h) - b.val(t - h)) / (2 * h)
            fd2 = (b.val(t + h) - 2 * b.val(t) + b.val(t - h)) / h**2
            assert b.d1(t) == pytest.approx(fd1, rel=1e-7, abs=1e-9)
            assert b.d2(t) == pytest.approx(fd2, rel=1e-4, abs=1e-5)


def test_shortest_shift():
    assert shortest_shift(0.3) == pytest.approx(0.3)
    assert shortest_shift(2 * np.pi - 0.3) == pytest.approx(-0.3)
    assert shortest_shift(np.pi) == pytest.approx(np.pi)


def test_signed_angle():
    assert signed_angle(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(np.pi / 2)
    assert signed_angle(np.array([1.0, 0.0]), np.array([0.0, -1.0])) == pytest.approx(-np.pi / 2)


class TestPlans:
    def test_identity_position_plan_is_silent(self):
        plan = build_position_plan((1.0, 2.0), (1.0, 2.0), P)
        for st in plan.stages:
            assert st.bump.c == 0.0
        h_per, h_lin = st.control_fields(GRID, (st.t0 + st.t1) / 2, P)
        assert np.max(np.abs(h_per.coeffs)) == 0.0 and np.max(np.abs(h_lin.coeffs)) == 0.0

    def test_direction_plan_zero_rotation(self):
        plan = build_direction_plan((0.6, 0.8), (0.6, 0.8), (1.0, 1.0), P)
        assert plan.stages[0].bump.c == 0.0

    def test_matrix_plan_validation(self):
        with pytest.raises(ValueError):
            build_matrix_plan(0.5, (0.0, 0.0), P)

    def test_json_roundtrip(self):
        plan = build_steering_plan((0.1, 0.2), (3.0, 2.0), (1.0, 0.0), (0.0, 1.0), P)
        back = ControlPlan.from_json(plan.to_json())
        assert len(back.stages) == 3
        for a, b in zip(plan.stages, back.stages):
            assert a.kind == b.kind and a.bump.c == b.bump.c and a.a == b.a and a.b == b.b
        assert back.targets["x_target"] == list(plan.targets["x_target"])

    def test_controls_supported_on_low_frequencies(self):
        plan = build_steering_plan((0.3, 5.0), (2.0, 1.0), (1.0, 0.0), (0.0, 1.0), P)
        for st in plan.stages:
            t = 0.5 * (st.t0 + st.t1)
            h_per, h_lin = st.control_fields(GRID, t, P)
            for field in (h_per, h_lin):
                bad = (np.abs(GRID.k1) > 2) | (np.abs(GRID.k2) > 2)
                scale = max(np.max(np.abs(field.coeffs)), 1e-300)
                assert np.max(np.abs(field.coeffs[bad])) < 1e-13 * scale


class TestClosedForms:
    def test_substitution_residual_all_kinds(self):
        rng = np.random.default_rng(0)
        plans = [
            build_steering_plan((0.0, 0.0), (2.5, 1.0), (1.0, 0.0), (0.0, 1.0), P),
            build_matrix_plan(np.e, (1.0, 2.0), P),
        ]
        for plan in plans:
            for st in plan.stages:
                for _ in range(5):
                    t = st.t0 + (st.t1 - st.t0) * rng.uniform(0.1, 0.9)
                    res = closed_form_residual(plan, GRID, P, t)
                    assert max(res.values()) < 1e-11

    def test_stage_boundaries_vanish(self):
        plan = build_position_plan((0.0, 0.0), (np.pi, np.pi / 2), P)
        for st in plan.stages:
            om, per, lin, vel = st.closed_state(GRID, st.t0, P)
            assert om.is_zero() and per.is_zero() and lin.is_zero()
            om, per, lin, vel = st.closed_state(GRID, st.t1, P)
            assert om.is_zero() and per.is_zero() and lin.is_zero()


class TestVerifySteering:
    def test_zero_plan_all_zero_report(self):
        plan = build_position_plan((1.0, 2.0), (1.0, 2.0), P)
        rep = verify_steering(plan, GRID, P, dt_max=1e-3)
        assert rep.endpoint_error < 1e-14
        assert rep.pde_residual == 0.0
        assert rep.state_return == 0.0
        assert rep.sim_error == 0.0

    def test_position_plan_example(self):
        # (0,0) -> (pi, pi/2): criterion-level tolerances
        plan = build_position_plan((0.0, 0.0), (np.pi, np.pi / 2), P)
        rep = verify_steering(plan, GRID, P)
        assert rep.position_error < 1e-6
        assert rep.pde_residual < 1e-8
        assert rep.state_return < 1e-8 and rep.lin_return < 1e-8
        assert rep.a_drift < 1e-8
        assert rep.shear_b_omega_max < 1e-12

    def test_quarter_turn(self):
        plan = build_direction_plan((1.0, 0.0), (0.0, 1.0), (2.0, 3.0), P)
        rep = verify_steering(plan, GRID, P)
        assert rep.angle_error < 1e-6
        assert rep.cell_center_drift < 1e-10
        assert rep.position_error < 1e-6  # the center is a stagnation point

    def test_matrix_plan_e(self):
        plan = build_matrix_plan(np.e, (1.0, 2.0), P)
        rep = verify_steering(plan, GRID, P)
        A = rep.final_state.A
        assert np.linalg.norm(A, 2) == pytest.approx(np.e, rel=1e-6)
        assert rep.det_error < 1e-8
