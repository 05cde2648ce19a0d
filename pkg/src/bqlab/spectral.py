"""Truncated Fourier representation of mean-zero fields on the 2pi-periodic torus.

Conventions used throughout the package:

- A scalar field is f(x) = sum_j c_j exp(i j.x) over integer wavevectors j with
  |j|_inf < n/2 (the Nyquist line is forced to zero so every retained mode has
  a conjugate partner).
- Coefficients are stored as a full complex (n, n) array in numpy fft layout:
  axis 0 <-> x1, axis 1 <-> x2, wavenumbers fftfreq(n) * n.
- Real-valued fields satisfy c(-j) = conj(c(j)); mean-zero fields have
  c(0,0) = 0.  Both are enforced at construction.
- perp gradient is grad^perp = (-d2, d1), so the Biot-Savart velocity is
  u = grad^perp lap^{-1} omega and grad^perp . u = omega.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

TWO_PI = 2.0 * np.pi
# physical-space area of the period box, used in all Parseval pairings
BOX_AREA = TWO_PI * TWO_PI


class SpectralError(ValueError):
    """Violation of a spectral-core contract (bad mode index, nonzero mean, ...)."""


@dataclass(frozen=True)
class GridSpec:
    """Square Fourier grid on [0, 2pi]^2 with n modes per axis.

    Parameters
    ----------
    n : int
        Modes per axis; must be even and >= 8.
    dealias_cut : int
        2/3-rule cutoff; coefficients with |j|_inf > dealias_cut are dropped
        by :func:`dealias`.  Defaults to floor(n/3).
    """

    n: int
    dealias_cut: int = -1  # -1 means "use the default floor(n/3)"

    def __post_init__(self) -> None:
        if self.n % 2 != 0 or self.n < 8:
            raise SpectralError(f"grid size must be even and >= 8, got {self.n}")
        if self.dealias_cut == -1:
            object.__setattr__(self, "dealias_cut", self.n // 3)
        if not (0 < self.dealias_cut <= self.n // 2):
            raise SpectralError(
                f"dealias_cut must lie in (0, n/2], got {self.dealias_cut}"
            )

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """Integer wavenumbers along one axis in fft order, shape (n,)."""
        return (np.fft.fftfreq(self.n) * self.n).astype(np.int64)

    @cached_property
    def k1(self) -> np.ndarray:
        return self.wavenumbers[:, None]

    @cached_property
    def k2(self) -> np.ndarray:
        return self.wavenumbers[None, :]

    @cached_property
    def ksq(self) -> np.ndarray:
        return (self.k1**2 + self.k2**2).astype(np.float64)

    @cached_property
    def inv_ksq(self) -> np.ndarray:
        """1/|j|^2 with the zero mode mapped to 0 (mean-zero inverse Laplacian)."""
        with np.errstate(divide="ignore"):
            inv = np.where(self.ksq > 0, 1.0 / np.where(self.ksq > 0, self.ksq, 1.0), 0.0)
        return inv

    @cached_property
    def retained(self) -> np.ndarray:
        """Boolean mask of modes kept by the truncation |j|_inf < n/2."""
        half = self.n // 2
        return (np.abs(self.k1) < half) & (np.abs(self.k2) < half)

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        cut = self.dealias_cut
        return (np.abs(self.k1) <= cut) & (np.abs(self.k2) <= cut)

    @cached_property
    def flip_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Index arrays mapping mode j to -j (for Hermitian projection)."""
        idx = -np.arange(self.n) % self.n
        return np.ix_(idx, idx)

    @cached_property
    def points(self) -> tuple[np.ndarray, np.ndarray]:
        """Collocation points (x1 varies along axis 0)."""
        x = np.linspace(0.0, TWO_PI, self.n, endpoint=False)
        return np.meshgrid(x, x, indexing="ij")

    def sobolev_weight(self, s: int) -> np.ndarray:
        """Per-mode weight sum_{k=0}^{s} |j|^{2k} of the W^{s,2} norm."""
        if s < 0 or s > self.n:
            raise SpectralError(f"Sobolev order {s} outside resolution")
        cache = self.__dict__.setdefault("_sobolev_cache", {})
        if s not in cache:
            w = np.zeros_like(self.ksq)
            for k in range(s + 1):
                w += self.ksq**k
            cache[s] = w
        return cache[s]

    def in_truncation(self, j: tuple[int, int]) -> bool:
        half = self.n // 2
        return abs(j[0]) < half and abs(j[1]) < half


def _enforce_reality(grid: GridSpec, coeffs: np.ndarray) -> np.ndarray:
    """Project onto the Hermitian, mean-zero, truncated coefficient set."""
    c = np.array(coeffs, dtype=np.complex128)
    c[~grid.retained] = 0.0
    c = 0.5 * (c + np.conj(c[grid.flip_index]))
    c[0, 0] = 0.0
    return c


@dataclass(frozen=True)
class ScalarField:
    """Mean-zero real scalar field held as truncated Fourier coefficients."""

    grid: GridSpec
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        self.coeffs.setflags(write=False)

    # -- constructors -------------------------------------------------------

    @classmethod
    def zero(cls, grid: GridSpec) -> "ScalarField":
        return cls(grid, np.zeros((grid.n, grid.n), dtype=np.complex128))

    @classmethod
    def from_coeffs(cls, grid: GridSpec, coeffs: np.ndarray, *, project: bool = True) -> "ScalarField":
        """Build a field from raw coefficients.

        With ``project=True`` (default) the array is projected onto the valid
        set (Hermitian symmetry, zero mean, truncation). With ``project=False``
        the array is validated instead and a :class:`SpectralError` is raised
        on violation; use this to assert invariants rather than hide bugs.
        """
        c = np.asarray(coeffs, dtype=np.complex128)
        if c.shape != (grid.n, grid.n):
            raise SpectralError(f"coefficient shape {c.shape} != {(grid.n, grid.n)}")
        if project:
            return cls(grid, _enforce_reality(grid, c))
        if abs(c[0, 0]) > 1e-13:
            raise SpectralError("field has a nonzero mean mode")
        probe = _enforce_reality(grid, c)
        if not np.allclose(probe, c, atol=1e-12):
            raise SpectralError("coefficients violate Hermitian symmetry or truncation")
        return cls(grid, c.copy())

    @classmethod
    def from_physical(cls, grid: GridSpec, values: np.ndarray) -> "ScalarField":
        c = np.fft.fft2(np.asarray(values, dtype=np.float64)) / grid.n**2
        return cls.from_coeffs(grid, c)

    @classmethod
    def from_modes(cls, grid: GridSpec, modes: dict[tuple[int, int], complex]) -> "ScalarField":
        """Field from {j: c_j}; the conjugate entries are filled in automatically."""
        c = np.zeros((grid.n, grid.n), dtype=np.complex128)
        for (j1, j2), cj in modes.items():
            if not grid.in_truncation((j1, j2)):
                raise SpectralError(f"mode {(j1, j2)} outside truncation")
            c[j1 % grid.n, j2 % grid.n] += cj
            c[-j1 % grid.n, -j2 % grid.n] += np.conj(cj)
        c[0, 0] = 0.0
        return cls(grid, c)

    # -- algebra ------------------------------------------------------------

    def __add__(self, other: "ScalarField") -> "ScalarField":
        return ScalarField(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other: "ScalarField") -> "ScalarField":
        return ScalarField(self.grid, self.coeffs - other.coeffs)

    def __mul__(self, a: float) -> "ScalarField":
        return ScalarField(self.grid, self.coeffs * a)

    __rmul__ = __mul__

    def __neg__(self) -> "ScalarField":
        return ScalarField(self.grid, -self.coeffs)

    # -- calculus -----------------------------------------------------------

    def deriv(self, axis: int) -> "ScalarField":
        k = self.grid.k1 if axis == 0 else self.grid.k2
        return ScalarField(self.grid, 1j * k * self.coeffs)

    def laplacian(self) -> "ScalarField":
        return ScalarField(self.grid, -self.grid.ksq * self.coeffs)

    def inv_laplacian(self) -> "ScalarField":
        return ScalarField(self.grid, -self.grid.inv_ksq * self.coeffs)

    # -- evaluation and norms ------------------------------------------------

    def to_physical(self) -> np.ndarray:
        return np.real(np.fft.ifft2(self.coeffs)) * self.grid.n**2

    def eval_at(self, x: np.ndarray) -> float:
        """Exact trigonometric summation at an off-grid point (spectral accuracy)."""
        return float(eval_modes(self.grid, self.coeffs[None, :, :], np.asarray(x))[0])

    def l2_norm_sq(self) -> float:
        return BOX_AREA * float(np.sum(np.abs(self.coeffs) ** 2))

    def sobolev_norm_sq(self, s: int) -> float:
        w = self.grid.sobolev_weight(s)
        return BOX_AREA * float(np.sum(w * np.abs(self.coeffs) ** 2))

    def is_zero(self, tol: float = 0.0) -> bool:
        return bool(np.max(np.abs(self.coeffs)) <= tol)

    def mode(self, j: tuple[int, int]) -> complex:
        return complex(self.coeffs[j[0] % self.grid.n, j[1] % self.grid.n])


def eval_modes(grid: GridSpec, coeff_stack: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate a stack of coefficient arrays at one point by direct summation.

    ``coeff_stack`` has shape (m, n, n); the return value is the length-m real
    vector of field values at x.  Cost is O(n^2) per stack, which is the point
    of the exercise: no interpolation error beyond the truncation itself.
    """
    e1 = np.exp(1j * grid.wavenumbers * x[0])
    e2 = np.exp(1j * grid.wavenumbers * x[1])
    return np.real(coeff_stack @ e2 @ e1) if coeff_stack.ndim == 2 else np.real(
        np.einsum("mab,a,b->m", coeff_stack, e1, e2)
    )


def inner_l2(a: ScalarField, b: ScalarField) -> float:
    return BOX_AREA * float(np.real(np.sum(np.conj(a.coeffs) * b.coeffs)))


def inner_sobolev(a: ScalarField, b: ScalarField, s: int) -> float:
    w = a.grid.sobolev_weight(s)
    return BOX_AREA * float(np.real(np.sum(w * np.conj(a.coeffs) * b.coeffs)))


def dealias(f: ScalarField) -> ScalarField:
    """Zero all coefficients with |j|_inf > dealias_cut (2/3 rule)."""
    return ScalarField(f.grid, f.coeffs * f.grid.dealias_mask)


def multiply(a: ScalarField, b: ScalarField, *, apply_dealias: bool = True) -> ScalarField:
    """Pseudo-spectral product of two fields; dealiased and mean-removed."""
    prod = a.to_physical() * b.to_physical()
    c = np.fft.fft2(prod) / a.grid.n**2
    c[0, 0] = 0.0
    out = ScalarField.from_coeffs(a.grid, c)
    return dealias(out) if apply_dealias else out


# ---------------------------------------------------------------------------
# coupled vorticity/temperature state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpectralState:
    """State U = (omega, theta) of the vorticity-temperature system."""

    omega: ScalarField
    theta: ScalarField

    @classmethod
    def zero(cls, grid: GridSpec) -> "SpectralState":
        z = ScalarField.zero(grid)
        return cls(z, z)

    @property
    def grid(self) -> GridSpec:
        return self.omega.grid

    def __add__(self, other: "SpectralState") -> "SpectralState":
        return SpectralState(self.omega + other.omega, self.theta + other.theta)

    def __sub__(self, other: "SpectralState") -> "SpectralState":
        return SpectralState(self.omega - other.omega, self.theta - other.theta)

    def __mul__(self, a: float) -> "SpectralState":
        return SpectralState(self.omega * a, self.theta * a)

    __rmul__ = __mul__

    def __neg__(self) -> "SpectralState":
        return SpectralState(-self.omega, -self.theta)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.omega.coeffs)) and np.all(np.isfinite(self.theta.coeffs)))


@dataclass(frozen=True)
class PhysicalParams:
    """Fixed physical constants of the system.

    alphas are the four noise amplitudes on (cos x1, sin x1, cos x2, sin x2)
    in the temperature component; all must be nonzero.
    """

    nu1: float = 0.1
    nu2: float = 0.1
    g: float = 1.0
    alphas: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)

    def __post_init__(self) -> None:
        if self.nu1 <= 0 or self.nu2 <= 0:
            raise SpectralError("viscosity and diffusivity must be positive")
        if self.g == 0:
            raise SpectralError("buoyancy coefficient g must be nonzero")
        if len(self.alphas) != 4 or any(a == 0 for a in self.alphas):
            raise SpectralError("all four noise amplitudes must be nonzero")
        if self.kappa >= 2:
            # normalization used by the analysis; harmless numerically
            warnings.warn("kappa = min(nu1, nu2) >= 2 leaves the normalized regime", stacklevel=2)

    @property
    def kappa(self) -> float:
        return min(self.nu1, self.nu2)

    @property
    def varkappa(self) -> float:
        return self.nu1 * self.nu2 / self.g**2


def weighted_norm_sq(state: SpectralState, s: int, params: PhysicalParams) -> float:
    """Squared weighted Sobolev norm: varkappa*|omega|_{W^{s,2}}^2 + |theta|_{W^{s,2}}^2."""
    return params.varkappa * state.omega.sobolev_norm_sq(s) + state.theta.sobolev_norm_sq(s)


def weighted_inner(a: SpectralState, b: SpectralState, s: int, params: PhysicalParams) -> float:
    return params.varkappa * inner_sobolev(a.omega, b.omega, s) + inner_sobolev(a.theta, b.theta, s)


def dissipation_norm_sq(state: SpectralState, params: PhysicalParams) -> float:
    """|U|^2 in D(A^{1/2}): varkappa*nu1*|grad omega|^2 + nu2*|grad theta|^2."""
    g1 = state.omega.sobolev_norm_sq(1) - state.omega.sobolev_norm_sq(0)
    g2 = state.theta.sobolev_norm_sq(1) - state.theta.sobolev_norm_sq(0)
    return params.varkappa * params.nu1 * g1 + params.nu2 * g2


# ---------------------------------------------------------------------------
# trigonometric basis and Biot-Savart
# ---------------------------------------------------------------------------


def in_positive_halflattice(j: tuple[int, int]) -> bool:
    """Membership in Z^2_+: j1 > 0, or j1 = 0 and j2 > 0."""
    return j[0] > 0 or (j[0] == 0 and j[1] > 0)


def _trig_coeffs(grid: GridSpec, j: tuple[int, int], m: int) -> np.ndarray:
    """Coefficients of cos(j.x) (m=0) or sin(j.x) (m=1)."""
    c = np.zeros((grid.n, grid.n), dtype=np.complex128)
    amp = 0.5 if m == 0 else -0.5j
    c[j[0] % grid.n, j[1] % grid.n] = amp
    c[-j[0] % grid.n, -j[1] % grid.n] = np.conj(amp)
    return c


def trig_mode(grid: GridSpec, j: tuple[int, int], m: int, slot: str) -> SpectralState:
    """Basis element sigma_j^m (slot='temperature') or psi_j^m (slot='vorticity').

    m is taken mod 2, matching the index convention used for iterated brackets.
    """
    j = (int(j[0]), int(j[1]))
    if not in_positive_halflattice(j):
        raise SpectralError(f"mode index {j} is not in the positive half-lattice")
    if not grid.in_truncation(j):
        raise SpectralError(f"mode index {j} outside truncation |j|_inf < {grid.n // 2}")
    if slot not in ("temperature", "vorticity"):
        raise SpectralError(f"unknown slot {slot!r}")
    f = ScalarField(grid, _trig_coeffs(grid, j, m % 2))
    z = ScalarField.zero(grid)
    return SpectralState(z, f) if slot == "temperature" else SpectralState(f, z)


def trig_scalar(grid: GridSpec, j: tuple[int, int], m: int) -> ScalarField:
    """The bare scalar cos(j.x) / sin(j.x) used to assemble velocity profiles."""
    return ScalarField(grid, _trig_coeffs(grid, j, m % 2))


@dataclass(frozen=True)
class VelocityField:
    """Divergence-free velocity as a pair of scalar components."""

    u1: ScalarField
    u2: ScalarField

    @property
    def grid(self) -> GridSpec:
        return self.u1.grid

    def __add__(self, other: "VelocityField") -> "VelocityField":
        return VelocityField(self.u1 + other.u1, self.u2 + other.u2)

    def __mul__(self, a: float) -> "VelocityField":
        return VelocityField(self.u1 * a, self.u2 * a)

    __rmul__ = __mul__

    def eval_at(self, x: np.ndarray) -> np.ndarray:
        stack = np.stack([self.u1.coeffs, self.u2.coeffs])
        return eval_modes(self.grid, stack, np.asarray(x))

    def max_speed(self) -> float:
        sp = np.hypot(self.u1.to_physical(), self.u2.to_physical())
        return float(np.max(sp))

    def curl(self) -> ScalarField:
        return self.u2.deriv(0) - self.u1.deriv(1)

    def divergence(self) -> ScalarField:
        return self.u1.deriv(0) + self.u2.deriv(1)


def biot_savart(omega: ScalarField) -> VelocityField:
    """u = grad^perp lap^{-1} omega with grad^perp = (-d2, d1).

    Exactly divergence-free in spectral space; curl(u) = omega on retained modes.
    """
    if abs(omega.coeffs[0, 0]) > 1e-13:
        raise SpectralError("Biot-Savart requires a mean-zero vorticity")
    psi = omega.inv_laplacian()
    return VelocityField(-psi.deriv(1), psi.deriv(0))


def random_state(grid: GridSpec, rng: np.random.Generator, *, max_mode: int = 6,
                 amplitude: float = 1.0) -> SpectralState:
    """Random smooth mean-zero state supported on |j|_inf <= max_mode."""

    def rand_field() -> ScalarField:
        c = np.zeros((grid.n, grid.n), dtype=np.complex128)
        for j1 in range(-max_mode, max_mode + 1):
            for j2 in range(-max_mode, max_mode + 1):
                if (j1, j2) <= (0, 0):
                    continue
                decay = np.exp(-0.5 * np.hypot(j1, j2))
                z = (rng.standard_normal() + 1j * rng.standard_normal()) * decay
                c[j1 % grid.n, j2 % grid.n] = z
                c[-j1 % grid.n, -j2 % grid.n] = np.conj(z)
        return ScalarField(grid, amplitude * c)

    return SpectralState(rand_field(), rand_field())
