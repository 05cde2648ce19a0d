"""First and second variations of the extended process.

The variation integrators are the exact derivatives of the discrete maps used
for the base process: the field block mirrors the exponential-Euler step with
coefficients frozen at the step's starting state, and the manifold block
mirrors the RK4 stage recursion of the extended step.  Finite differences of
the nonlinear discrete flow therefore converge to these variations purely in
the perturbation size, with no time-step floor.

The temperature equation of the linearized system advects grad(theta) by the
velocity induced by the vorticity perturbation (the velocity on the torus is
induced by vorticity alone); the same rule applies to the second variation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .dynamics import FrozenBase, Integrator, _to_phys
from .lagrangian import ExtendedState, FrozenVelocity, StageTrace, step_extended
from .rng import NoiseStream
from .spectral import (
    GridSpec,
    PhysicalParams,
    ScalarField,
    SpectralState,
    weighted_inner,
    weighted_norm_sq,
)


@dataclass
class VariationState:
    """First variation (psi, y, zeta, B) of (U, x, tau, A)."""

    psi: SpectralState
    y: np.ndarray
    zeta: np.ndarray
    Bmat: np.ndarray

    @classmethod
    def zero(cls, grid: GridSpec) -> "VariationState":
        return cls(SpectralState.zero(grid), np.zeros(2), np.zeros(2), np.zeros((2, 2)))

    @classmethod
    def from_field(cls, psi: SpectralState) -> "VariationState":
        return cls(psi, np.zeros(2), np.zeros(2), np.zeros((2, 2)))

    def copy(self) -> "VariationState":
        return VariationState(self.psi, self.y.copy(), self.zeta.copy(), self.Bmat.copy())

    def scale(self, a: float) -> "VariationState":
        return VariationState(self.psi * a, a * self.y, a * self.zeta, a * self.Bmat)

    def add(self, other: "VariationState") -> "VariationState":
        return VariationState(
            self.psi + other.psi, self.y + other.y, self.zeta + other.zeta, self.Bmat + other.Bmat
        )


@dataclass
class SecondVariationState:
    """Second variation (phi, z, xi, C); initial data is always zero."""

    phi: SpectralState
    z: np.ndarray
    xi: np.ndarray
    Cmat: np.ndarray

    @classmethod
    def zero(cls, grid: GridSpec) -> "SecondVariationState":
        return cls(SpectralState.zero(grid), np.zeros(2), np.zeros(2), np.zeros((2, 2)))


def variation_inner(
    a: VariationState,
    b: VariationState,
    params: PhysicalParams,
    *,
    s: int = 4,
    blocks: str = "tangent",
) -> float:
    """Pairing <a, b>: weighted H^s on the field plus the requested manifold blocks.

    blocks: "field" (psi only), "lagrangian" (+y), "tangent" (+y, zeta),
    "jacobian" (+y, B), "all" (+y, zeta, B).
    """
    val = weighted_inner(a.psi, b.psi, s, params)
    if blocks != "field":
        val += float(a.y @ b.y)
    if blocks in ("tangent", "all"):
        val += float(a.zeta @ b.zeta)
    if blocks in ("jacobian", "all"):
        val += float(np.sum(a.Bmat * b.Bmat))
    return val


def variation_norm(a: VariationState, params: PhysicalParams, *, s: int = 4, blocks: str = "tangent") -> float:
    return float(np.sqrt(max(variation_inner(a, a, params, s=s, blocks=blocks), 0.0)))


# ---------------------------------------------------------------------------
# field block: linearized exponential-Euler step
# ---------------------------------------------------------------------------


def step_variation_field(
    psi: SpectralState,
    integ: Integrator,
    frozen: FrozenBase,
    *,
    second_source: SpectralState | None = None,
) -> SpectralState:
    """psi_{k+1} = E (psi_k + dt * grad N(U_k) psi_k [+ dt * source]).

    grad N(U)psi = -B(psi, U) - B(U, psi) + G psi, with B(psi, .) induced by
    the vorticity perturbation psi^1.
    """
    ker = integ.ker
    grid = integ.grid
    pom, pth = psi.omega.coeffs, psi.theta.coeffs

    psi_vel = -ker.inv_ksq * pom
    buf = ker.scratch(6)
    np.multiply(-ker.ik2, psi_vel, out=buf[0])
    np.multiply(ker.ik1, psi_vel, out=buf[1])
    np.multiply(ker.ik1, pom, out=buf[2])
    np.multiply(ker.ik2, pom, out=buf[3])
    np.multiply(ker.ik1, pth, out=buf[4])
    np.multiply(ker.ik2, pth, out=buf[5])
    block = _to_phys(grid, buf)
    w1, w2 = block[0], block[1]

    adv = ker.spec_stack(
        np.stack(
            [
                w1 * frozen.grad_om[0] + w2 * frozen.grad_om[1] + frozen.u1 * block[2] + frozen.u2 * block[3],
                w1 * frozen.grad_th[0] + w2 * frozen.grad_th[1] + frozen.u1 * block[4] + frozen.u2 * block[5],
            ]
        )
    )
    n_om = -adv[0] + integ.params.g * (ker.ik1 * pth)
    n_th = -adv[1]
    if second_source is not None:
        n_om = n_om + second_source.omega.coeffs
        n_th = n_th + second_source.theta.coeffs
    om = integ.decay_om * (pom + integ.dt * n_om)
    th = integ.decay_th * (pth + integ.dt * n_th)
    return SpectralState(ScalarField(grid, om), ScalarField(grid, th))


def quadratic_source(psi: SpectralState, integ: Integrator) -> SpectralState:
    """-2 B(psi, psi): the only quadratic source of the field second variation."""
    ker = integ.ker
    grid = integ.grid
    pom, pth = psi.omega.coeffs, psi.theta.coeffs
    psi_vel = -ker.inv_ksq * pom
    buf = ker.scratch(6)
    np.multiply(-ker.ik2, psi_vel, out=buf[0])
    np.multiply(ker.ik1, psi_vel, out=buf[1])
    np.multiply(ker.ik1, pom, out=buf[2])
    np.multiply(ker.ik2, pom, out=buf[3])
    np.multiply(ker.ik1, pth, out=buf[4])
    np.multiply(ker.ik2, pth, out=buf[5])
    block = _to_phys(grid, buf)
    w1, w2 = block[0], block[1]
    adv = ker.spec_stack(
        np.stack([w1 * block[2] + w2 * block[3], w1 * block[4] + w2 * block[5]])
    )
    return SpectralState(
        ScalarField(grid, -2.0 * adv[0]), ScalarField(grid, -2.0 * adv[1])
    )


# ---------------------------------------------------------------------------
# manifold block: linearized RK4 stage recursion
# ---------------------------------------------------------------------------


@dataclass
class ManifoldStageTrace:
    """First-variation stage values, kept for second-variation stepping."""

    ys: list[np.ndarray]
    zetas: list[np.ndarray]
    Bs: list[np.ndarray]


def step_variation_manifold(
    var: VariationState,
    trace: StageTrace,
    psi_frozen: FrozenVelocity,
    *,
    collect: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, ManifoldStageTrace | None]:
    """Advance (y, zeta, B) by the tangent of the base RK4 step.

    `trace` holds the base stage positions/values; `psi_frozen` is the
    velocity field induced by psi^1 at the step start (levels >= 2; level 3
    second derivatives of the base velocity come via trace.evals).
    """
    dt = trace.dt
    y0, z0, B0 = var.y, var.zeta, var.Bmat
    ys, zs, Bs = [], [], []

    def stage_rhs(i: int, y, zeta, B):
        pv = trace.evals[i]
        x_i = trace.xs[i]
        tau_i = trace.taus[i]
        A_i = trace.As[i]
        wv = psi_frozen.eval(x_i)
        ddu = pv.du_directional(y)  # (y . grad) Du
        dy = pv.du @ y + wv.u
        dzeta = pv.du @ zeta + (wv.du + ddu) @ tau_i
        dB = pv.du @ B + (wv.du + ddu) @ A_i
        return dy, dzeta, dB

    ys.append(y0), zs.append(z0), Bs.append(B0)
    k1 = stage_rhs(0, y0, z0, B0)
    s2 = (y0 + 0.5 * dt * k1[0], z0 + 0.5 * dt * k1[1], B0 + 0.5 * dt * k1[2])
    ys.append(s2[0]), zs.append(s2[1]), Bs.append(s2[2])
    k2 = stage_rhs(1, *s2)
    s3 = (y0 + 0.5 * dt * k2[0], z0 + 0.5 * dt * k2[1], B0 + 0.5 * dt * k2[2])
    ys.append(s3[0]), zs.append(s3[1]), Bs.append(s3[2])
    k3 = stage_rhs(2, *s3)
    s4 = (y0 + dt * k3[0], z0 + dt * k3[1], B0 + dt * k3[2])
    ys.append(s4[0]), zs.append(s4[1]), Bs.append(s4[2])
    k4 = stage_rhs(3, *s4)

    y = y0 + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    zeta = z0 + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    B = B0 + dt / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    mtrace = ManifoldStageTrace(ys, zs, Bs) if collect else None
    return y, zeta, B, mtrace


def step_second_manifold(
    sec: SecondVariationState,
    trace: StageTrace,
    var_trace: ManifoldStageTrace,
    psi_frozen: FrozenVelocity,
    phi_frozen: FrozenVelocity,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Advance (z, xi, C): tangent of the first-variation stage recursion."""
    dt = trace.dt
    z0, x0, C0 = sec.z, sec.xi, sec.Cmat

    def stage_rhs(i: int, z, xi, C):
        pv = trace.evals[i]
        x_i, tau_i, A_i = trace.xs[i], trace.taus[i], trace.As[i]
        y_i, zeta_i, B_i = var_trace.ys[i], var_trace.zetas[i], var_trace.Bs[i]
        wv = psi_frozen.eval(x_i)
        fv = phi_frozen.eval(x_i)
        d_du = wv.du + pv.du_directional(y_i)  # delta Du
        dd_du = (
            fv.du
            + 2.0 * (wv.d2u @ y_i)
            + pv.du_directional(z)
            + pv.d2u_directional(y_i, y_i)
        )  # delta^2 Du
        dz = pv.du @ z + fv.u + 2.0 * (wv.du @ y_i) + (pv.d2u @ y_i) @ y_i
        dxi = pv.du @ xi + 2.0 * d_du @ zeta_i + dd_du @ tau_i
        dC = pv.du @ C + 2.0 * d_du @ B_i + dd_du @ A_i
        return dz, dxi, dC

    k1 = stage_rhs(0, z0, x0, C0)
    k2 = stage_rhs(1, z0 + 0.5 * dt * k1[0], x0 + 0.5 * dt * k1[1], C0 + 0.5 * dt * k1[2])
    k3 = stage_rhs(2, z0 + 0.5 * dt * k2[0], x0 + 0.5 * dt * k2[1], C0 + 0.5 * dt * k2[2])
    k4 = stage_rhs(3, z0 + dt * k3[0], x0 + dt * k3[1], C0 + dt * k3[2])
    z = z0 + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    xi = x0 + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    C = C0 + dt / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return z, xi, C


# ---------------------------------------------------------------------------
# replayable base run with variation passengers
# ---------------------------------------------------------------------------


# ---------------------------------------------------------------------------
# batched first-variation ensembles (quadrature passengers)
# ---------------------------------------------------------------------------


class VariationEnsemble:
    """Many first variations stepped in lockstep against one base trajectory.

    The field blocks of all members are transformed in one batched FFT call
    and the manifold blocks in one batched point evaluation per RK4 stage;
    this is what makes Gram assembly over dozens of seeded directions cheap.
    """

    def __init__(self, grid: GridSpec, params: PhysicalParams, capacity_hint: int = 8):
        from .dynamics import Kernels

        self.grid = grid
        self.params = params
        self.ker = Kernels.get(grid)
        n = grid.n
        ik1 = 1j * grid.k1.astype(float)
        ik2 = 1j * grid.k2.astype(float)
        inv = grid.inv_ksq
        # PDE block multipliers: velocity of psi^1, grad psi^1 (on psi^1),
        # grad psi^2 (on psi^2)
        self._mult_om = np.stack(
            np.broadcast_arrays(ik2 * inv + 0j, -ik1 * inv + 0j, ik1 + 0j * ik2, ik2 + 0j * ik1)
        ).astype(np.complex128)
        self._mult_th = np.stack(np.broadcast_arrays(ik1 + 0j * ik2, ik2 + 0j * ik1)).astype(
            np.complex128
        )
        # manifold eval multipliers on the stream function of psi^1:
        # [w1, w2, d1 w1, d2 w1, d1 w2, d2 w2]
        base = [-ik2 + 0j * ik1, ik1 + 0j * ik2]
        self._mult_ev = np.stack(
            np.broadcast_arrays(*base, *[ik * b for b in base for ik in (ik1, ik2)])
        ).astype(np.complex128)
        self.psi = np.zeros((0, 2, n, n), dtype=np.complex128)
        self.y = np.zeros((0, 2))
        self.zeta = np.zeros((0, 2))
        self.B = np.zeros((0, 2, 2))

    def __len__(self) -> int:
        return self.psi.shape[0]

    def add(self, var: VariationState) -> int:
        self.psi = np.concatenate(
            [self.psi, np.stack([var.psi.omega.coeffs, var.psi.theta.coeffs])[None]]
        )
        self.y = np.concatenate([self.y, var.y[None]])
        self.zeta = np.concatenate([self.zeta, var.zeta[None]])
        self.B = np.concatenate([self.B, var.Bmat[None]])
        return len(self) - 1

    def snapshot(self, i: int) -> VariationState:
        grid = self.grid
        return VariationState(
            SpectralState(
                ScalarField(grid, self.psi[i, 0].copy()), ScalarField(grid, self.psi[i, 1].copy())
            ),
            self.y[i].copy(),
            self.zeta[i].copy(),
            self.B[i].copy(),
        )

    def snapshot_all(self) -> list[VariationState]:
        return [self.snapshot(i) for i in range(len(self))]

    CHUNK = 32

    def step(self, integ: Integrator, frozen: FrozenBase, trace: StageTrace) -> None:
        if len(self) == 0:
            return
        self._step_manifold(integ, frozen, trace)
        for lo in range(0, len(self), self.CHUNK):
            self._step_field_chunk(slice(lo, min(lo + self.CHUNK, len(self))), integ, frozen)

    def _step_manifold(self, integ: Integrator, frozen: FrozenBase, trace: StageTrace) -> None:
        """RK4-tangent update of (y, zeta, B) for all members at once.

        Point values of the member velocities at the base stage positions are
        obtained by contracting the member stream functions against the stage
        evaluation kernels, one matrix product per stage.
        """
        n = self.grid.n
        P = len(self)
        stream_flat = (-self.grid.inv_ksq * self.psi[:, 0]).reshape(P, n * n)
        dt = trace.dt
        wave = self.grid.wavenumbers.astype(float)

        def eval_all(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            e1 = np.exp(1j * wave * x[0])
            e2 = np.exp(1j * wave * x[1])
            kernels = (self._mult_ev * np.outer(e1, e2)).reshape(6, n * n)
            vals = np.real(stream_flat @ kernels.T)  # (P, 6)
            return vals[:, :2], vals[:, 2:].reshape(P, 2, 2)  # w, dw[p,i,j]=d_j w_i

        y0, z0, B0 = self.y, self.zeta, self.B

        def stage_rhs(i, y, zeta, B):
            pv = trace.evals[i]
            w, dw = eval_all(trace.xs[i])
            ddu = np.einsum("ijk,pk->pij", pv.d2u, y)  # (y . grad) Du
            dy = y @ pv.du.T + w
            dzeta = zeta @ pv.du.T + np.einsum("pij,j->pi", dw + ddu, trace.taus[i])
            dB = np.einsum("ij,pjk->pik", pv.du, B) + np.einsum("pij,jk->pik", dw + ddu, trace.As[i])
            return dy, dzeta, dB

        k1 = stage_rhs(0, y0, z0, B0)
        k2 = stage_rhs(1, y0 + 0.5 * dt * k1[0], z0 + 0.5 * dt * k1[1], B0 + 0.5 * dt * k1[2])
        k3 = stage_rhs(2, y0 + 0.5 * dt * k2[0], z0 + 0.5 * dt * k2[1], B0 + 0.5 * dt * k2[2])
        k4 = stage_rhs(3, y0 + dt * k3[0], z0 + dt * k3[1], B0 + dt * k3[2])
        self.y = y0 + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        self.zeta = z0 + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        self.B = B0 + dt / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])

    def _step_field_chunk(self, sl: slice, integ: Integrator, frozen: FrozenBase) -> None:
        """Linearized exponential-Euler on the field blocks (half-spectrum batch)."""
        n = self.grid.n
        half = n // 2 + 1
        ker = self.ker
        om = self.psi[sl, 0]
        th = self.psi[sl, 1]
        P = om.shape[0]
        pde = np.empty((P, 6, n, half), dtype=np.complex128)
        pde[:, :4] = self._mult_om[None, :, :, :half] * om[:, None, :, :half]
        pde[:, 4:] = self._mult_th[None, :, :, :half] * th[:, None, :, :half]
        block = sfft.irfft2(pde, s=(n, n), axes=(-2, -1)) * n**2  # (P, 6, n, n) real
        w1, w2 = block[:, 0], block[:, 1]
        adv_phys = np.empty((P, 2, n, n))
        adv_phys[:, 0] = (
            w1 * frozen.grad_om[0] + w2 * frozen.grad_om[1] + frozen.u1 * block[:, 2] + frozen.u2 * block[:, 3]
        )
        adv_phys[:, 1] = (
            w1 * frozen.grad_th[0] + w2 * frozen.grad_th[1] + frozen.u1 * block[:, 4] + frozen.u2 * block[:, 5]
        )
        adv = ker.spec_stack(adv_phys)
        n_om = -adv[:, 0] + integ.params.g * (ker.ik1[None] * th)
        n_th = -adv[:, 1]
        self.psi[sl, 0] = integ.decay_om[None] * (om + integ.dt * n_om)
        self.psi[sl, 1] = integ.decay_th[None] * (th + integ.dt * n_th)


@dataclass
class BaseRunConfig:
    grid: GridSpec
    params: PhysicalParams
    dt: float
    master_seed: int = 0
    stream_index: int = 0
    noise: bool = True
    U0: SpectralState | None = None
    ext0: ExtendedState | None = None


class BaseRun:
    """Deterministic replayable base trajectory with variation passengers.

    The run owns its own integrator and noise stream; a passenger seeded at
    step s with data p is carried to any later step, realizing the action of
    the linearization J_{s,t} (and optionally the second variation) of the
    discrete flow.
    """

    def __init__(self, cfg: BaseRunConfig):
        self.cfg = cfg
        self.integ = Integrator(cfg.grid, cfg.params, cfg.dt)
        self.stream = NoiseStream(cfg.master_seed, cfg.stream_index)
        self.reset()

    def reset(self) -> None:
        cfg = self.cfg
        self.U = cfg.U0 if cfg.U0 is not None else SpectralState.zero(cfg.grid)
        self.ext = cfg.ext0.copy() if cfg.ext0 is not None else ExtendedState.default()
        self.step_index = 0
        self._frozen_vel = FrozenVelocity(cfg.grid, self.U.omega.coeffs, levels=4)

    @property
    def time(self) -> float:
        return self.step_index * self.cfg.dt

    def state_tuple(self) -> tuple[SpectralState, ExtendedState]:
        return self.U, self.ext.copy()

    def advance(
        self,
        n_steps: int,
        passengers: list[VariationState] | None = None,
        second: list[SecondVariationState] | None = None,
    ) -> None:
        """Advance base and passengers n_steps; passengers are updated in place."""
        passengers = passengers or []
        second = second or []
        if second and len(second) != len(passengers):
            raise ValueError("each second variation needs its matching first variation")
        grid = self.cfg.grid
        psi_froz = [FrozenVelocity(grid, p.psi.omega.coeffs, levels=3) for p in passengers]
        phi_froz = [FrozenVelocity(grid, s.phi.omega.coeffs, levels=2) for s in second]
        for _ in range(n_steps):
            frozen = self.integ.freeze(self.U)
            self._frozen_vel.refill(self.U.omega.coeffs)
            new_ext, _, trace = step_extended(
                self.ext, self._frozen_vel, self.cfg.dt, collect_trace=True
            )
            # passengers first: they linearize the map at the current state
            for i, p in enumerate(passengers):
                psi_froz[i].refill(p.psi.omega.coeffs)
                new_psi = step_variation_field(p.psi, self.integ, frozen)
                want_second = bool(second)
                y, zeta, B, mtrace = step_variation_manifold(
                    p, trace, psi_froz[i], collect=want_second
                )
                if second:
                    s = second[i]
                    phi_froz[i].refill(s.phi.omega.coeffs)
                    src = quadratic_source(p.psi, self.integ)
                    new_phi = step_variation_field(s.phi, self.integ, frozen, second_source=src)
                    z, xi, C = step_second_manifold(s, trace, mtrace, psi_froz[i], phi_froz[i])
                    s.phi, s.z, s.xi, s.Cmat = new_phi, z, xi, C
                p.psi, p.y, p.zeta, p.Bmat = new_psi, y, zeta, B
            inc = self.stream.increment(self.step_index, self.cfg.dt) if self.cfg.noise else None
            self.U = self.integ.step(self.U, inc, frozen=frozen, context=f"step={self.step_index}")
            self.ext = new_ext
            self.step_index += 1

    def advance_to_time(self, t: float, **kw) -> None:
        target = int(round(t / self.cfg.dt))
        if target < self.step_index:
            raise ValueError("cannot advance backwards; reset() and replay")
        self.advance(target - self.step_index, **kw)


def jacobian_action(
    direction: VariationState,
    s: float,
    t: float,
    run_cfg: BaseRunConfig,
) -> VariationState:
    """J_{s,t} applied to an extended direction, by forward integration.

    Replays the base trajectory from 0 to s, seeds the variation, and carries
    it to t.  J_{s,s} is the identity.
    """
    if t < s:
        raise ValueError("jacobian_action requires s <= t")
    run = BaseRun(run_cfg)
    run.advance_to_time(s)
    p = direction.copy()
    run.advance_to_time(t, passengers=[p])
    return p
