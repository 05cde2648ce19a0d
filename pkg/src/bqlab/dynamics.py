"""Drift, degenerate noise map, and time integration of the vorticity form.

The integrator is an exponential (integrating-factor) Euler-Maruyama scheme:
the diagonal dissipation exp(-nu |j|^2 dt) is applied exactly per mode, the
advection and buoyancy terms are explicit, and the additive noise on the four
forced temperature modes carries the exact Ornstein-Uhlenbeck variance of the
step.  Everything in the hot loop works on raw coefficient arrays; the
ScalarField/SpectralState wrappers appear only at API boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.fft as sfft

from .rng import NoiseIncrement, NoiseStream
from .spectral import (
    GridSpec,
    PhysicalParams,
    ScalarField,
    SpectralState,
    dissipation_norm_sq,
    weighted_norm_sq,
)


class CflError(RuntimeError):
    """Advection CFL guard tripped; carries a replayable context string."""


class DivergenceError(RuntimeError):
    """Non-finite coefficients encountered; carries a replayable context string."""


# ---------------------------------------------------------------------------
# raw-array kernels
# ---------------------------------------------------------------------------


def _to_phys(grid: GridSpec, c: np.ndarray) -> np.ndarray:
    """Real physical samples of Hermitian coefficient arrays (half-spectrum ifft).

    Accepts a single (n, n) array or a stack (..., n, n); stacked transforms
    go through one batched irfft2 call.
    """
    half = c[..., : grid.n // 2 + 1]
    return sfft.irfft2(half, s=(grid.n, grid.n), axes=(-2, -1)) * grid.n**2


def _to_spec(grid: GridSpec, p: np.ndarray) -> np.ndarray:
    """Full Hermitian coefficient arrays of real physical arrays (stackable)."""
    n = grid.n
    h = sfft.rfft2(p, axes=(-2, -1)) / n**2
    c = np.empty(p.shape[:-2] + (n, n), dtype=np.complex128)
    c[..., : n // 2 + 1] = h
    flip = (-np.arange(n)) % n
    c[..., n // 2 + 1 :] = np.conj(h[..., flip, 1 : n // 2][..., ::-1])
    return c


class Kernels:
    """Per-grid cached arrays and the advection composite."""

    _cache: dict[tuple[int, int], "Kernels"] = {}

    def __init__(self, grid: GridSpec):
        self.grid = grid
        self.ik1 = 1j * grid.k1.astype(np.float64)
        self.ik2 = 1j * grid.k2.astype(np.float64)
        self.inv_ksq = grid.inv_ksq
        self.mask = grid.dealias_mask & grid.retained
        self._scratch: dict[int, np.ndarray] = {}

    def scratch(self, m: int) -> np.ndarray:
        """Reusable (m, n, n) complex buffer for assembling transform stacks."""
        if m not in self._scratch:
            self._scratch[m] = np.empty((m, self.grid.n, self.grid.n), dtype=np.complex128)
        return self._scratch[m]

    @classmethod
    def get(cls, grid: GridSpec) -> "Kernels":
        key = (grid.n, grid.dealias_cut)
        if key not in cls._cache:
            cls._cache[key] = cls(grid)
        return cls._cache[key]

    def velocity_phys(self, omega_c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Physical Biot-Savart velocity of a vorticity coefficient array."""
        psi = -self.inv_ksq * omega_c
        pair = _to_phys(self.grid, np.stack([-self.ik2 * psi, self.ik1 * psi]))
        return pair[0], pair[1]

    def velocity_coeffs(self, omega_c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        psi = -self.inv_ksq * omega_c
        return -self.ik2 * psi, self.ik1 * psi

    def grad_phys(self, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pair = _to_phys(self.grid, np.stack([self.ik1 * c, self.ik2 * c]))
        return pair[0], pair[1]

    def phys_stack(self, arrays: list[np.ndarray]) -> np.ndarray:
        """Batched inverse transform of a list of coefficient arrays."""
        return _to_phys(self.grid, np.stack(arrays))

    def spec_stack(self, phys: np.ndarray) -> np.ndarray:
        """Batched forward transform; dealiased and mean-removed."""
        c = _to_spec(self.grid, phys)
        c *= self.mask
        c[..., 0, 0] = 0.0
        return c

    def advect(self, u1: np.ndarray, u2: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
        """Dealiased coefficients of u . grad f, from physical factors."""
        c = _to_spec(self.grid, u1 * gx + u2 * gy)
        c *= self.mask
        c[0, 0] = 0.0
        return c


# ---------------------------------------------------------------------------
# operators of the functional formulation
# ---------------------------------------------------------------------------


def nonlinear_b(U: SpectralState, V: SpectralState) -> SpectralState:
    """B(U, V) = ((K*omega_U).grad omega_V, (K*omega_U).grad theta_V), dealiased."""
    ker = Kernels.get(U.grid)
    u1, u2 = ker.velocity_phys(U.omega.coeffs)
    gox, goy = ker.grad_phys(V.omega.coeffs)
    gtx, gty = ker.grad_phys(V.theta.coeffs)
    bo = ker.advect(u1, u2, gox, goy)
    bt = ker.advect(u1, u2, gtx, gty)
    return SpectralState(ScalarField(U.grid, bo), ScalarField(U.grid, bt))


def buoyancy(U: SpectralState, params: PhysicalParams) -> SpectralState:
    """G U = (g d1 theta, 0)."""
    return SpectralState(U.theta.deriv(0) * params.g, ScalarField.zero(U.grid))


def dissipation(U: SpectralState, params: PhysicalParams) -> SpectralState:
    """A U = (-nu1 lap omega, -nu2 lap theta)."""
    return SpectralState(U.omega.laplacian() * (-params.nu1), U.theta.laplacian() * (-params.nu2))


def drift(U: SpectralState, params: PhysicalParams) -> SpectralState:
    """F(U) = -A U - B(U, U) + G U."""
    return -1.0 * dissipation(U, params) - nonlinear_b(U, U) + buoyancy(U, params)


_FORCED_MODES = (((1, 0), 0), ((1, 0), 1), ((0, 1), 0), ((0, 1), 1))


def forced_directions(grid: GridSpec, params: PhysicalParams) -> list[SpectralState]:
    """The four noise directions alpha_i * sigma_i (temperature component only)."""
    from .spectral import trig_mode

    return [
        trig_mode(grid, j, m, "temperature") * params.alphas[i]
        for i, (j, m) in enumerate(_FORCED_MODES)
    ]


def noise_map(inc: NoiseIncrement, params: PhysicalParams, grid: GridSpec) -> SpectralState:
    """Place the four increments on (cos x1, sin x1, cos x2, sin x2) in theta."""
    theta_c = np.zeros((grid.n, grid.n), dtype=np.complex128)
    for i, ((j1, j2), m) in enumerate(_FORCED_MODES):
        amp = params.alphas[i] * inc.dw[i] * (0.5 if m == 0 else -0.5j)
        theta_c[j1 % grid.n, j2 % grid.n] += amp
        theta_c[-j1 % grid.n, -j2 % grid.n] += np.conj(amp)
    return SpectralState(ScalarField.zero(grid), ScalarField(grid, theta_c))


# ---------------------------------------------------------------------------
# integrator
# ---------------------------------------------------------------------------


@dataclass
class FrozenBase:
    """Physical-space data of the current state, shared by one step's substeps."""

    u1: np.ndarray
    u2: np.ndarray
    grad_om: tuple[np.ndarray, np.ndarray]
    grad_th: tuple[np.ndarray, np.ndarray]
    max_speed: float


class Integrator:
    """Exponential Euler-Maruyama stepper for the stochastic vorticity system."""

    def __init__(self, grid: GridSpec, params: PhysicalParams, dt: float, *, cfl_factor: float = 0.5):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.grid = grid
        self.params = params
        self.dt = float(dt)
        self.cfl_factor = cfl_factor
        self.include_advection = True  # disabled by the OU audit (B switched off)
        self.ker = Kernels.get(grid)
        ksq = grid.ksq
        self.decay_om = np.exp(-params.nu1 * ksq * dt)
        self.decay_th = np.exp(-params.nu2 * ksq * dt)
        # exact OU std-dev factor relative to sqrt(dt) increments on |j|^2 = 1 modes
        self.ou_scale = float(np.sqrt((1.0 - np.exp(-2.0 * params.nu2 * dt)) / (2.0 * params.nu2 * dt)))
        self.cfl_speed = cfl_factor * (2.0 * np.pi / grid.n) / dt

    def freeze(self, U: SpectralState) -> FrozenBase:
        ker = self.ker
        om, th = U.omega.coeffs, U.theta.coeffs
        psi = -ker.inv_ksq * om
        buf = ker.scratch(6)
        np.multiply(-ker.ik2, psi, out=buf[0])
        np.multiply(ker.ik1, psi, out=buf[1])
        np.multiply(ker.ik1, om, out=buf[2])
        np.multiply(ker.ik2, om, out=buf[3])
        np.multiply(ker.ik1, th, out=buf[4])
        np.multiply(ker.ik2, th, out=buf[5])
        block = _to_phys(self.grid, buf)
        u1, u2 = block[0], block[1]
        return FrozenBase(
            u1=u1,
            u2=u2,
            grad_om=(block[2], block[3]),
            grad_th=(block[4], block[5]),
            max_speed=float(np.max(np.hypot(u1, u2))),
        )

    def _check(self, frozen: FrozenBase, context: str) -> None:
        if frozen.max_speed > self.cfl_speed:
            raise CflError(
                f"CFL violation: |u|={frozen.max_speed:.3g} exceeds {self.cfl_speed:.3g} [{context}]"
            )

    def explicit_tendency(self, U: SpectralState, frozen: FrozenBase) -> tuple[np.ndarray, np.ndarray]:
        """Coefficients of N(U) = -B(U,U) + G U."""
        ker = self.ker
        buoy = self.params.g * (ker.ik1 * U.theta.coeffs)
        if not self.include_advection:
            return buoy, np.zeros_like(buoy)
        phys = np.stack(
            [
                frozen.u1 * frozen.grad_om[0] + frozen.u2 * frozen.grad_om[1],
                frozen.u1 * frozen.grad_th[0] + frozen.u2 * frozen.grad_th[1],
            ]
        )
        adv = ker.spec_stack(phys)
        n_om = -adv[0] + buoy
        n_th = -adv[1]
        return n_om, n_th

    def step(
        self,
        U: SpectralState,
        inc: NoiseIncrement | None,
        *,
        frozen: FrozenBase | None = None,
        forcing: SpectralState | None = None,
        context: str = "",
    ) -> SpectralState:
        """One step; `forcing` is an optional deterministic theta-equation source."""
        frozen = frozen or self.freeze(U)
        self._check(frozen, context)
        n_om, n_th = self.explicit_tendency(U, frozen)
        if forcing is not None:
            n_th = n_th + forcing.theta.coeffs
            n_om = n_om + forcing.omega.coeffs
        om = self.decay_om * (U.omega.coeffs + self.dt * n_om)
        th = self.decay_th * (U.theta.coeffs + self.dt * n_th)
        if inc is not None:
            eta = noise_map(inc, self.params, self.grid)
            th = th + self.ou_scale * eta.theta.coeffs
        out = SpectralState(ScalarField(self.grid, om), ScalarField(self.grid, th))
        if not out.is_finite():
            raise DivergenceError(f"non-finite coefficients after step [{context}]")
        return out


def step_sde(
    U: SpectralState,
    dt: float,
    inc: NoiseIncrement,
    params: PhysicalParams,
    *,
    integrator: Integrator | None = None,
) -> SpectralState:
    """Single stochastic step (functional wrapper around :class:`Integrator`)."""
    integ = integrator or Integrator(U.grid, params, dt)
    return integ.step(U, inc)


def step_controlled(
    U: SpectralState,
    dt: float,
    forcing: SpectralState | Callable[[float], SpectralState],
    t: float,
    params: PhysicalParams,
    *,
    integrator: Integrator | None = None,
) -> SpectralState:
    """Single controlled step: deterministic forcing in place of the noise.

    `forcing` is either a state (theta-component source) or a callable t -> state.
    """
    integ = integrator or Integrator(U.grid, params, dt)
    h = forcing(t) if callable(forcing) else forcing
    return integ.step(U, None, forcing=h, context=f"t={t:.6g}")


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


@dataclass
class Diagnostics:
    """Per-sample energy diagnostics along a trajectory."""

    times: np.ndarray
    h_norm_sq: np.ndarray
    h1_norm_sq: np.ndarray
    dissipation_budget: np.ndarray
    super_lyapunov_v: np.ndarray
    decay_ratio: np.ndarray | None = None  # only for unforced runs


def super_lyapunov_v(U: SpectralState, params: PhysicalParams, *, iota: float = 1.0, delta: float = 1.0) -> float:
    """Diagnostic V(U) = iota * (|U|_H^2 + delta * |U|_{H^4}^{1/3})."""
    h = weighted_norm_sq(U, 0, params)
    h4 = weighted_norm_sq(U, 4, params)
    return iota * (h + delta * h4 ** (1.0 / 6.0))


def energy_report(
    states: list[SpectralState],
    times: np.ndarray,
    params: PhysicalParams,
    *,
    unforced: bool = False,
) -> Diagnostics:
    """Weighted norms, running dissipation integral, and (unforced) decay ratios."""
    times = np.asarray(times, dtype=np.float64)
    h = np.array([weighted_norm_sq(U, 0, params) for U in states])
    h1 = np.array([weighted_norm_sq(U, 1, params) for U in states])
    v = np.array([super_lyapunov_v(U, params) for U in states])
    budget = np.zeros_like(h1)
    if len(times) > 1:
        incr = 0.5 * (h1[1:] + h1[:-1]) * np.diff(times)
        budget[1:] = np.cumsum(incr)
    ratio = None
    if unforced:
        base = h[0] if h[0] > 0 else 1.0
        ratio = h * np.exp(params.kappa * (times - times[0])) / base
    return Diagnostics(times, h, h1, budget, v, ratio)


__all__ = [
    "CflError",
    "Diagnostics",
    "DivergenceError",
    "FrozenBase",
    "Integrator",
    "Kernels",
    "NoiseIncrement",
    "NoiseStream",
    "buoyancy",
    "dissipation",
    "dissipation_norm_sq",
    "drift",
    "energy_report",
    "forced_directions",
    "noise_map",
    "nonlinear_b",
    "step_controlled",
    "step_sde",
    "super_lyapunov_v",
]
