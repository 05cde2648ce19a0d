"""Closed-form bracket fields of the drift with the forced directions.

The chain sigma -> Y = [F, sigma] -> Z = [F, Y] -> [Z, sigma] generates, out
of the four forced temperature modes, temperature directions on neighbouring
modes and vorticity directions on modes with j1 != 0; the span fields V_j^m
package the induced velocities together with the position-bracket terms and
are probed on the tangent spaces of the two-point, tangent, and Jacobian
processes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import dissipation, drift, nonlinear_b, buoyancy
from .spectral import (
    GridSpec,
    PhysicalParams,
    ScalarField,
    SpectralState,
    SpectralError,
    VelocityField,
    biot_savart,
    eval_modes,
    in_positive_halflattice,
    trig_mode,
    trig_scalar,
)

FORCED_SET = ((1, 0), (0, 1))

FieldMap = Callable[[SpectralState], SpectralState]


@dataclass(frozen=True)
class BracketField:
    """A bracket field value with its construction tag and indices."""

    value: SpectralState
    kind: str  # "Y" | "Z" | "Z_sigma" | "J_jm" | "V_span"
    indices: tuple


def _check_mode(grid: GridSpec, j: tuple[int, int]) -> tuple[int, int]:
    j = (int(j[0]), int(j[1]))
    if not in_positive_halflattice(j):
        raise SpectralError(f"mode {j} not in the positive half-lattice")
    if not grid.in_truncation(j):
        raise SpectralError(f"mode {j} outside truncation")
    return j


def lie_bracket_fd(
    X: FieldMap,
    Y: FieldMap,
    U: SpectralState,
    eps: float,
) -> SpectralState:
    """[X, Y](U) = grad Y(U) X(U) - grad X(U) Y(U) by central differences.

    Exact (up to roundoff) whenever X and Y are polynomial of degree <= 2 in
    U, which covers the drift and all closed-form bracket fields here.
    """
    if eps < 1e-12:
        raise ValueError("eps below roundoff floor for central differences")
    XU = X(U)
    YU = Y(U)
    dY = (Y(U + eps * XU) - Y(U - eps * XU)) * (0.5 / eps)
    dX = (X(U + eps * YU) - X(U - eps * YU)) * (0.5 / eps)
    return dY - dX


def y_field(j: tuple[int, int], m: int, U: SpectralState, params: PhysicalParams) -> BracketField:
    """Y_j^m(U) = nu2 |j|^2 sigma_j^m + B(U, sigma_j^m) + (-1)^m g j1 psi_j^{m+1}."""
    grid = U.grid
    j = _check_mode(grid, j)
    jsq = float(j[0] ** 2 + j[1] ** 2)
    sig = trig_mode(grid, j, m, "temperature")
    val = params.nu2 * jsq * sig + nonlinear_b(U, sig)
    if j[0] != 0:
        val = val + ((-1.0) ** m * params.g * j[0]) * trig_mode(grid, j, m + 1, "vorticity")
    return BracketField(val, "Y", (j, m % 2))


def z_field(j: tuple[int, int], m: int, U: SpectralState, params: PhysicalParams) -> BracketField:
    """Z_j^m(U) = [F(U), Y_j^m(U)], assembled from its eight closed-form terms."""
    grid = U.grid
    j = _check_mode(grid, j)
    jsq = float(j[0] ** 2 + j[1] ** 2)
    sgn = (-1.0) ** m
    sig = trig_mode(grid, j, m, "temperature")
    psi = trig_mode(grid, j, m + 1, "vorticity")
    b_u_sig = nonlinear_b(U, sig)

    val = nonlinear_b(drift(U, params), sig)
    val = val + params.nu2**2 * jsq**2 * sig
    val = val + sgn * (params.nu1 + params.nu2) * params.g * j[0] * jsq * psi
    val = val + dissipation(b_u_sig, params)
    val = val + sgn * params.g * j[0] * nonlinear_b(psi, U)
    val = val - nonlinear_b(U, (-params.nu2 * jsq) * sig + (-sgn * params.g * j[0]) * psi)
    val = val + nonlinear_b(U, b_u_sig)
    val = val - buoyancy(b_u_sig, params)
    return BracketField(val, "Z", (j, m % 2))


def z_sigma_bracket(
    j: tuple[int, int],
    m: int,
    k: tuple[int, int],
    mp: int,
    params: PhysicalParams,
    grid: GridSpec,
) -> BracketField:
    """[Z_j^m(U), sigma_k^m'] -- independent of U:

    g ( (-1)^{m+1} j1 B(psi_j^{m+1}, sigma_k^{m'})
        + (-1)^{m'} k1 B(psi_k^{m'+1}, sigma_j^m) ).
    """
    j = _check_mode(grid, j)
    k = (int(k[0]), int(k[1]))
    if k not in FORCED_SET:
        raise SpectralError(f"second index {k} must be one of the forced modes {FORCED_SET}")
    term = SpectralState.zero(grid)
    if j[0] != 0:
        term = term + ((-1.0) ** (m + 1) * j[0]) * nonlinear_b(
            trig_mode(grid, j, m + 1, "vorticity"), trig_mode(grid, k, mp, "temperature")
        )
    if k[0] != 0:
        term = term + ((-1.0) ** mp * k[0]) * nonlinear_b(
            trig_mode(grid, k, mp + 1, "vorticity"), trig_mode(grid, j, m, "temperature")
        )
    return BracketField(params.g * term, "Z_sigma", (j, m % 2, k, mp % 2))


def _theta_affine_bracket(
    e_theta: ScalarField,
    U: SpectralState,
    params: PhysicalParams,
) -> SpectralState:
    """Theta component of [F(U), E] for a constant temperature-only field E.

    [F, E](U) = A E + B(U, E) - G E; the theta part, -nu2 lap(e) + u . grad e,
    is affine in U and concentrated in the temperature component.
    """
    grid = U.grid
    E = SpectralState(ScalarField.zero(grid), e_theta)
    adv = nonlinear_b(U, E)
    theta = params.nu2 * -1.0 * e_theta.laplacian() + adv.theta
    return SpectralState(ScalarField.zero(grid), theta)


def j_jm_field(
    j: tuple[int, int],
    m: int,
    U: SpectralState,
    ncut: int,
    params: PhysicalParams,
) -> BracketField:
    """The affine correction field J_{j,m}(U), projected to modes |j| <= ncut.

    For j1 != 0 the closed form is
        (-1)^m nu2 |j|^2 / (g j1) sigma_j^{m+1}
        + (-1)^m / (g j1) B(U, sigma_j^{m+1}).
    For j1 = 0 the displayed combination of theta-concentrated affine maps H
    is used, with H_{a,b}^{m,m'}(U) realized as the theta restriction of
    [F(U), [Z_a^m, sigma_b^{m'}]].  This branch is experimental: the
    coefficients of H are not pinned by a printed closed form, only its
    structure (affine in U, temperature-concentrated).
    """
    grid = U.grid
    j = _check_mode(grid, j)
    if ncut > grid.n // 2:
        raise SpectralError("projection cutoff exceeds the truncation")
    jsq = float(j[0] ** 2 + j[1] ** 2)
    if j[0] != 0:
        sgn = (-1.0) ** m
        sig1 = trig_mode(grid, j, m + 1, "temperature")
        val = (sgn * params.nu2 * jsq / (params.g * j[0])) * sig1
        val = val + (sgn / (params.g * j[0])) * nonlinear_b(U, sig1)
    else:
        a = (j[0] + 1, j[1])
        pref = (1.0 + jsq) / (params.g**2 * jsq**1.5)

        def H(ma: int, mb: int) -> SpectralState:
            e = z_sigma_bracket(a, ma, (1, 0), mb, params, grid).value.theta
            return _theta_affine_bracket(e, U, params)

        if m % 2 == 0:
            val = pref * (-1.0 * H(0, 0) - H(1, 1))
        else:
            val = pref * (-1.0 * H(0, 1) + H(1, 0))
    # spectral projection onto |j| <= ncut (Euclidean radius)
    keep = grid.ksq <= float(ncut) ** 2 + 1e-9
    val = SpectralState(
        ScalarField(grid, val.omega.coeffs * keep),
        ScalarField(grid, val.theta.coeffs * keep),
    )
    return BracketField(val, "J_jm", (j, m % 2, ncut))


# ---------------------------------------------------------------------------
# span vector fields on the torus and span probes on tangent spaces
# ---------------------------------------------------------------------------


def v_span_field(
    j: tuple[int, int],
    m: int,
    u_vel: VelocityField,
    ubar_vel: VelocityField,
    params: PhysicalParams,
) -> VelocityField:
    """Span velocity field

    V_j^m = (-1)^m g j1 (j_perp j^T / |j|^2) trig_j^{m+1} (u + ubar)
            - g j1 (j_perp . grad)(u + ubar) trig_j^m / |j|^2
            - (nu1 + nu2) g j1 j_perp trig_j^m.

    j1 = 0 yields the zero field (excluded from span sets).
    """
    grid = u_vel.grid
    j = _check_mode(grid, j)
    jp = (-j[1], j[0])
    zero = ScalarField.zero(grid)
    if j[0] == 0:
        return VelocityField(zero, zero)
    jsq = float(j[0] ** 2 + j[1] ** 2)
    g_j1 = params.g * j[0]
    tm = trig_scalar(grid, j, m)
    tm1 = trig_scalar(grid, j, m + 1)
    from .spectral import multiply

    v1 = u_vel.u1 + ubar_vel.u1
    v2 = u_vel.u2 + ubar_vel.u2
    # term 1: (-1)^m g j1 / |j|^2 * (j . v) trig^{m+1} * j_perp
    s1 = multiply(v1 * float(j[0]) + v2 * float(j[1]), tm1) * ((-1.0) ** m * g_j1 / jsq)
    # term 2: -g j1 / |j|^2 * trig^m * (j_perp . grad) v
    dd = lambda f: f.deriv(0) * float(jp[0]) + f.deriv(1) * float(jp[1])
    t2_1 = multiply(dd(v1), tm) * (-g_j1 / jsq)
    t2_2 = multiply(dd(v2), tm) * (-g_j1 / jsq)
    # term 3: -(nu1 + nu2) g j1 * trig^m * j_perp
    c3 = -(params.nu1 + params.nu2) * g_j1
    out1 = s1 * float(jp[0]) + t2_1 + (c3 * float(jp[0])) * tm
    out2 = s1 * float(jp[1]) + t2_2 + (c3 * float(jp[1])) * tm
    return VelocityField(out1, out2)


def span_modes(N: int) -> list[tuple[tuple[int, int], int]]:
    """Half-lattice modes with j1 != 0 and |j| <= N, both parities."""
    out = []
    for j1 in range(1, N + 1):
        for j2 in range(-N, N + 1):
            if j1 * j1 + j2 * j2 <= N * N:
                out.extend([((j1, j2), 0), ((j1, j2), 1)])
    return out


def _theta_rows(
    kind: str,
    state: dict,
    w: VelocityField,
) -> np.ndarray:
    """Row of the span matrix: the process vector field of w at the state."""
    grid = w.grid
    if kind == "two_point":
        x, y = state["x"], state["y"]
        return np.concatenate([w.eval_at(x), w.eval_at(y)])
    stack = np.stack(
        [
            w.u1.coeffs,
            w.u2.coeffs,
            w.u1.deriv(0).coeffs,
            w.u1.deriv(1).coeffs,
            w.u2.deriv(0).coeffs,
            w.u2.deriv(1).coeffs,
        ]
    )
    vals = eval_modes(grid, stack, np.asarray(state["x"]))
    wx = vals[:2]
    dw = np.array([[vals[2], vals[3]], [vals[4], vals[5]]])  # dw[i,k] = d_k w_i
    if kind == "tangent":
        return np.concatenate([wx, dw @ state["tau"]])
    if kind == "jacobian":
        A = state["A"]
        M = dw @ A
        # project onto T_A SL2 = {B : tr(A^-1 B) = 0} and take sl2 coordinates
        Ainv = np.linalg.inv(A)
        AmT = Ainv.T
        M = M - (np.trace(Ainv @ M) / np.sum(AmT * AmT)) * AmT
        sl2 = np.array([M[0, 0] - M[1, 1], M[0, 1] + M[1, 0], M[0, 1] - M[1, 0]]) / np.sqrt(2.0)
        return np.concatenate([wx, sl2])
    raise ValueError(f"unknown span kind {kind!r}")


def span_check(
    kind: str,
    state: dict,
    u_vel: VelocityField,
    ubar_vel: VelocityField,
    N: int,
    params: PhysicalParams,
    *,
    coincidence_tol: float = 1e-8,
) -> float:
    """Smallest singular value of the stacked span vectors at the given state.

    kind: "two_point" (state: x, y), "tangent" (state: x, tau),
    "jacobian" (state: x, A).  Fields V_j^m with |j| <= N, j1 != 0 are used.
    Returns 0 exactly when the vectors fail to span the tangent space.
    """
    if N < 2:
        raise ValueError("span check needs N >= 2")
    if kind == "two_point":
        dxy = np.mod(np.asarray(state["x"]) - np.asarray(state["y"]) + np.pi, 2 * np.pi) - np.pi
        if np.linalg.norm(dxy) < coincidence_tol:
            raise ValueError("two-point span probe undefined at coinciding particles")
    rows = []
    for j, m in span_modes(N):
        w = v_span_field(j, m, u_vel, ubar_vel, params)
        rows.append(_theta_rows(kind, state, w))
    mat = np.stack(rows)
    return float(np.linalg.svd(mat, compute_uv=False)[-1])


def velocity_of(U: SpectralState) -> VelocityField:
    return biot_savart(U.omega)
