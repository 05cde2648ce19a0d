"""Lagrangian, tangent, projective, and Jacobian processes over a base flow.

The particle block advances by classical RK4 against the velocity field frozen
for the current base step; velocities and their derivatives at particle
positions come from direct trigonometric summation (no interpolation error).

Matrix conventions: Du[i, j] = d_j u_i is the velocity Jacobian, A_t is the
flow Jacobian D_x x_t with dA/dt = Du(x) A and det A = 1, tangent vectors are
columns (tau_t = A_t tau_0), and the projective direction v stays on the unit
circle with dv/dt = ((Du v) . v_perp) v_perp.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .spectral import GridSpec, ScalarField

TWO_PI = 2.0 * np.pi


def perp(v: np.ndarray) -> np.ndarray:
    return np.array([-v[1], v[0]])


class CoincidenceError(ValueError):
    """Two-point probe called with coinciding particles."""


@dataclass
class ExtendedState:
    """Particle position, tangent vector, projective direction, flow Jacobian."""

    x: np.ndarray
    tau: np.ndarray
    v: np.ndarray
    A: np.ndarray

    @classmethod
    def default(cls, x=(0.0, 0.0), tau=(1.0, 0.0), v=(1.0, 0.0)) -> "ExtendedState":
        v = np.asarray(v, dtype=float)
        return cls(
            x=np.asarray(x, dtype=float).copy(),
            tau=np.asarray(tau, dtype=float).copy(),
            v=v / np.linalg.norm(v),
            A=np.eye(2),
        )

    def copy(self) -> "ExtendedState":
        return ExtendedState(self.x.copy(), self.tau.copy(), self.v.copy(), self.A.copy())


# ---------------------------------------------------------------------------
# frozen velocity fields with point derivatives
# ---------------------------------------------------------------------------


class FrozenVelocity:
    """Velocity (and derivatives) of a frozen vorticity field, evaluable anywhere.

    `levels` counts derivative levels: 1 = u only, 2 = u and Du, 3 = + second
    derivatives, 4 = + third derivatives.  All values at a point come from one
    batched direct summation over the retained modes.
    """

    # multiplier tables: derivative multi-indices per level
    _D2_PAIRS = ((0, 0), (0, 1), (1, 1))
    _D3_TRIPLES = ((0, 0, 0), (0, 0, 1), (0, 1, 1), (1, 1, 1))

    def __init__(self, grid: GridSpec, omega_coeffs: np.ndarray, levels: int = 2):
        if not 1 <= levels <= 4:
            raise ValueError("levels must be in 1..4")
        self.grid = grid
        self.levels = levels
        m = {1: 2, 2: 6, 3: 12, 4: 20}[levels]
        self._idx_du, self._idx_d2u, self._idx_d3u = 2, 6, 12
        self.stack = np.empty((m, grid.n, grid.n), dtype=np.complex128)
        self._flat = self.stack.reshape(m * grid.n, grid.n)
        self.wave = grid.wavenumbers.astype(float)
        ik1 = 1j * grid.k1.astype(float)
        ik2 = 1j * grid.k2.astype(float)
        ik = (ik1, ik2)
        # every stacked array is a fixed Fourier multiplier times the stream function
        mult = [-ik2 + 0j * ik1, ik1 + 0j * ik2]
        if levels >= 2:
            mult += [ik[j] * mult[i] for i in range(2) for j in range(2)]
        if levels >= 3:
            mult += [ik[j] * ik[k] * mult[i] for i in range(2) for (j, k) in self._D2_PAIRS]
        if levels >= 4:
            mult += [
                ik[j] * ik[k] * ik[l] * mult[i]
                for i in range(2)
                for (j, k, l) in self._D3_TRIPLES
            ]
        self._mult = np.stack(np.broadcast_arrays(*mult)).astype(np.complex128)
        self.refill(omega_coeffs)

    def refill(self, omega_coeffs: np.ndarray) -> None:
        """Recompute the derivative stack in place for a new vorticity field."""
        psi = -self.grid.inv_ksq * omega_coeffs
        np.multiply(self._mult, psi, out=self.stack)

    def raw_eval(self, x: np.ndarray) -> np.ndarray:
        e1 = np.exp(1j * self.wave * x[0])
        e2 = np.exp(1j * self.wave * x[1])
        partial = (self._flat @ e2).reshape(-1, self.grid.n)
        return np.real(partial @ e1)

    def eval(self, x: np.ndarray) -> "PointVelocity":
        vals = self.raw_eval(np.asarray(x, dtype=float))
        u = vals[:2]
        du = d2u = d3u = None
        if self.levels >= 2:
            du = vals[self._idx_du : self._idx_du + 4].reshape(2, 2)
        if self.levels >= 3:
            d2u = np.empty((2, 2, 2))
            for i in range(2):
                a, b, c = vals[self._idx_d2u + 3 * i : self._idx_d2u + 3 * i + 3]
                d2u[i] = [[a, b], [b, c]]
        if self.levels >= 4:
            d3u = np.empty((2, 2, 2, 2))
            for i in range(2):
                t0, t1, t2, t3 = vals[self._idx_d3u + 4 * i : self._idx_d3u + 4 * i + 4]
                full = {(0, 0, 0): t0, (0, 0, 1): t1, (0, 1, 1): t2, (1, 1, 1): t3}
                for j in range(2):
                    for k in range(2):
                        for l in range(2):
                            d3u[i, j, k, l] = full[tuple(sorted((j, k, l)))]
        return PointVelocity(u, du, d2u, d3u)


@dataclass
class PointVelocity:
    """u and derivatives at one point; du[i, j] = d_j u_i, etc."""

    u: np.ndarray
    du: np.ndarray | None = None
    d2u: np.ndarray | None = None  # d2u[i, j, k] = d_k d_j u_i
    d3u: np.ndarray | None = None  # d3u[i, j, k, l] = d_l d_k d_j u_i

    def du_directional(self, y: np.ndarray) -> np.ndarray:
        """(y . grad) Du as a 2x2 matrix."""
        return self.d2u @ y

    def d2u_directional(self, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        """(y . grad)(z . grad) Du as a 2x2 matrix (needs third derivatives)."""
        return (self.d3u @ z) @ y


def frozen_velocity_of(field: ScalarField, levels: int = 2) -> FrozenVelocity:
    return FrozenVelocity(field.grid, field.coeffs, levels)


# ---------------------------------------------------------------------------
# extended step
# ---------------------------------------------------------------------------


@dataclass
class StageTrace:
    """RK4 stage data kept for exact linearization of the discrete step."""

    xs: list[np.ndarray]
    taus: list[np.ndarray]
    As: list[np.ndarray]
    evals: list[PointVelocity]
    dt: float


def _step_extended_fast(state: ExtendedState, frozen: FrozenVelocity, dt: float) -> tuple[ExtendedState, float]:
    """Scalarized RK4 for the hot loop (no trace collection)."""
    x1, x2 = float(state.x[0]), float(state.x[1])
    t1, t2 = float(state.tau[0]), float(state.tau[1])
    v1, v2 = float(state.v[0]), float(state.v[1])
    (a11, a12), (a21, a22) = state.A
    point = np.empty(2)

    def rhs(px, py, q1, q2, w1, w2, b11, b12, b21, b22):
        point[0] = px
        point[1] = py
        vals = frozen.raw_eval(point)
        u1, u2, d11, d12, d21, d22 = (float(vals[i]) for i in range(6))
        # (Du w) . w_perp with w_perp = (-w2, w1)
        g1 = d11 * w1 + d12 * w2
        g2 = d21 * w1 + d22 * w2
        q = -g1 * w2 + g2 * w1
        return (
            u1,
            u2,
            d11 * q1 + d12 * q2,
            d21 * q1 + d22 * q2,
            -q * w2,
            q * w1,
            d11 * b11 + d12 * b21,
            d11 * b12 + d12 * b22,
            d21 * b11 + d22 * b21,
            d21 * b12 + d22 * b22,
            g1 * w1 + g2 * w2,
        )

    k1 = rhs(x1, x2, t1, t2, v1, v2, a11, a12, a21, a22)
    h = 0.5 * dt
    k2 = rhs(
        x1 + h * k1[0], x2 + h * k1[1], t1 + h * k1[2], t2 + h * k1[3],
        v1 + h * k1[4], v2 + h * k1[5], a11 + h * k1[6], a12 + h * k1[7],
        a21 + h * k1[8], a22 + h * k1[9],
    )
    k3 = rhs(
        x1 + h * k2[0], x2 + h * k2[1], t1 + h * k2[2], t2 + h * k2[3],
        v1 + h * k2[4], v2 + h * k2[5], a11 + h * k2[6], a12 + h * k2[7],
        a21 + h * k2[8], a22 + h * k2[9],
    )
    k4 = rhs(
        x1 + dt * k3[0], x2 + dt * k3[1], t1 + dt * k3[2], t2 + dt * k3[3],
        v1 + dt * k3[4], v2 + dt * k3[5], a11 + dt * k3[6], a12 + dt * k3[7],
        a21 + dt * k3[8], a22 + dt * k3[9],
    )
    w = dt / 6.0
    out = [0.0] * 10
    for i in range(10):
        out[i] = w * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    nx = np.mod([x1 + out[0], x2 + out[1]], TWO_PI)
    tau = np.array([t1 + out[2], t2 + out[3]])
    vv1, vv2 = v1 + out[4], v2 + out[5]
    nv = np.sqrt(vv1 * vv1 + vv2 * vv2)
    v = np.array([vv1 / nv, vv2 / nv])
    A = np.array([[a11 + out[6], a12 + out[7]], [a21 + out[8], a22 + out[9]]])
    dl = w * (k1[10] + 2.0 * k2[10] + 2.0 * k3[10] + k4[10])
    return ExtendedState(nx, tau, v, A), dl


def step_extended(
    state: ExtendedState,
    frozen: FrozenVelocity,
    dt: float,
    *,
    collect_trace: bool = False,
    proj_quad: bool = True,
) -> tuple[ExtendedState, float, StageTrace | None]:
    """One RK4 step of (x, tau, v, A) against a frozen velocity field.

    Returns the new state, the increment of the projective functional
    integral int v . Du(x) v dt accumulated over the step, and (optionally)
    the stage trace used by the first/second variation integrators.
    """
    if frozen.levels < 2:
        raise ValueError("extended step needs velocity gradients (levels >= 2)")
    if not collect_trace and proj_quad:
        new_state, dl = _step_extended_fast(state, frozen, dt)
        return new_state, dl, None

    def rhs(x, tau, v, A):
        pv = frozen.eval(x)
        if not np.all(np.isfinite(pv.u)) or not np.all(np.isfinite(pv.du)):
            raise RuntimeError("non-finite velocity data at particle position")
        duv = pv.du @ v
        vp = perp(v)
        q = float(duv @ vp)
        return pv, pv.u, pv.du @ tau, q * vp, pv.du @ A, float(v @ duv)

    x0, t0, v0, A0 = state.x, state.tau, state.v, state.A
    pv1, kx1, kt1, kv1, kA1, kl1 = rhs(x0, t0, v0, A0)
    pv2, kx2, kt2, kv2, kA2, kl2 = rhs(x0 + 0.5 * dt * kx1, t0 + 0.5 * dt * kt1, v0 + 0.5 * dt * kv1, A0 + 0.5 * dt * kA1)
    pv3, kx3, kt3, kv3, kA3, kl3 = rhs(x0 + 0.5 * dt * kx2, t0 + 0.5 * dt * kt2, v0 + 0.5 * dt * kv2, A0 + 0.5 * dt * kA2)
    pv4, kx4, kt4, kv4, kA4, kl4 = rhs(x0 + dt * kx3, t0 + dt * kt3, v0 + dt * kv3, A0 + dt * kA3)

    x = np.mod(x0 + dt / 6.0 * (kx1 + 2 * kx2 + 2 * kx3 + kx4), TWO_PI)
    tau = t0 + dt / 6.0 * (kt1 + 2 * kt2 + 2 * kt3 + kt4)
    v = v0 + dt / 6.0 * (kv1 + 2 * kv2 + 2 * kv3 + kv4)
    v = v / np.linalg.norm(v)
    A = A0 + dt / 6.0 * (kA1 + 2 * kA2 + 2 * kA3 + kA4)
    dl = dt / 6.0 * (kl1 + 2 * kl2 + 2 * kl3 + kl4) if proj_quad else 0.0

    trace = None
    if collect_trace:
        trace = StageTrace(
            xs=[x0, x0 + 0.5 * dt * kx1, x0 + 0.5 * dt * kx2, x0 + dt * kx3],
            taus=[t0, t0 + 0.5 * dt * kt1, t0 + 0.5 * dt * kt2, t0 + dt * kt3],
            As=[A0, A0 + 0.5 * dt * kA1, A0 + 0.5 * dt * kA2, A0 + dt * kA3],
            evals=[pv1, pv2, pv3, pv4],
            dt=dt,
        )
    return ExtendedState(x, tau, v, A), dl, trace


def two_point_step(
    x: np.ndarray,
    y: np.ndarray,
    frozen: FrozenVelocity,
    dt: float,
    *,
    coincidence_tol: float = 1e-12,
) -> tuple[np.ndarray, np.ndarray]:
    """Advect two particles by the same frozen field (RK4)."""
    dxy = np.mod(np.asarray(x) - np.asarray(y) + np.pi, TWO_PI) - np.pi
    if np.linalg.norm(dxy) < coincidence_tol:
        raise CoincidenceError("two-point step requires distinct particles")

    def advance(p):
        k1 = frozen.eval(p).u
        k2 = frozen.eval(p + 0.5 * dt * k1).u
        k3 = frozen.eval(p + 0.5 * dt * k2).u
        k4 = frozen.eval(p + dt * k3).u
        return np.mod(p + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), TWO_PI)

    return advance(np.asarray(x, dtype=float)), advance(np.asarray(y, dtype=float))


# ---------------------------------------------------------------------------
# Benettin bookkeeping
# ---------------------------------------------------------------------------


@dataclass
class CocycleAccumulator:
    """QR log-accumulation for the Jacobian cocycle, plus conservativity audit."""

    qr_logs: np.ndarray = field(default_factory=lambda: np.zeros(2))
    proj_integral: float = 0.0
    time: float = 0.0
    det_log_cum: float = 0.0
    det_drift_max: float = 0.0
    det_corrections: int = 0
    qr_stride: int = 20
    qr_threshold: float = 1e6
    det_tol: float = 1e-6
    _since_qr: int = 0

    def after_step(self, state: ExtendedState, dl: float, dt: float) -> None:
        self.proj_integral += dl
        self.time += dt
        self._since_qr += 1
        if self._since_qr >= self.qr_stride or np.abs(state.A).max() > self.qr_threshold:
            self.renormalize(state)

    def renormalize(self, state: ExtendedState) -> None:
        if self._since_qr == 0:
            return
        Q, R = np.linalg.qr(state.A)
        s = np.sign(np.diag(R))
        s[s == 0] = 1.0
        Q = Q * s
        diag = np.abs(np.diag(R))
        self.qr_logs += np.log(diag)
        # cumulative log|det| of the raw cocycle; zero for a conservative flow
        self.det_log_cum += float(np.log(diag[0]) + np.log(diag[1]) + np.log(abs(np.linalg.det(Q))))
        self.det_drift_max = max(self.det_drift_max, abs(self.det_log_cum))
        state.A = Q
        if abs(np.linalg.det(state.A) - 1.0) > self.det_tol:
            state.A = state.A / np.sqrt(abs(np.linalg.det(state.A)))
            self.det_corrections += 1
        self._since_qr = 0

    @property
    def lambda_qr(self) -> float:
        return float(self.qr_logs[0] / self.time) if self.time > 0 else 0.0

    @property
    def lambda_sum(self) -> float:
        return float(self.qr_logs.sum() / self.time) if self.time > 0 else 0.0

    @property
    def lambda_projective(self) -> float:
        return self.proj_integral / self.time if self.time > 0 else 0.0


@dataclass(frozen=True)
class LyapunovEstimate:
    """Time-averaged exponent estimate with ensemble confidence half-width."""

    lambda_top: float
    lambda_sum: float
    ci_halfwidth: float
    method: str  # "jacobian-log-norm" | "projective-average"
    samples: int
