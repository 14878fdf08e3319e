"""Closed-form trapping, release and occupation models.

Canonical units: energies in ueV, temperatures in K, rates in Hz,
frequencies in GHz. The trap-rate prefactor beta is quoted in MHz/eV^3 and
the phonon prefactor alpha in MHz/K^3, as in the literature; conversions
happen inside the functions that consume them.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from .constants import (GHZ_PER_UEV, H_UEV_PER_GHZ, HBAR_UEV_S, K_B_UEV,
                        OMEGA_DEBYE_AL, OMEGA_DEBYE_SI)
from .specfun import ZETA3, DomainError, debye_bracket, debye_cutoff_term

_MHZ = 1e6
_UEV_TO_EV = 1e-6


def ghz_to_uev(f_ghz):
    return np.multiply(f_ghz, H_UEV_PER_GHZ)


def uev_to_ghz(e_uev):
    return np.multiply(e_uev, GHZ_PER_UEV)


@dataclass(frozen=True)
class DeviceParams:
    """Junction description. Resonator fields are carried as metadata only."""

    gap: float = 185.0
    transparency: float = 1.0
    base_resonance_ghz: float = 4.301
    linewidth: float = 2 * math.pi * 250e3
    dispersive_shift: float = 2 * math.pi * 250e3

    def __post_init__(self):
        if not 0.0 <= self.transparency <= 1.0:
            raise DomainError("transparency must lie in [0, 1]")
        if self.gap <= 0:
            raise DomainError("gap must be positive")


@dataclass(frozen=True)
class TrapModelParams:
    beta: float = 8.73e15       # MHz / eV^3
    x_ne: float = 8.5e-7
    gap: float = 185.0          # ueV

    def __post_init__(self):
        if self.beta <= 0 or not 0 < self.x_ne < 1 or self.gap <= 0:
            raise DomainError("need beta > 0, 0 < x_ne < 1, gap > 0")


@dataclass(frozen=True)
class PhononModelParams:
    alpha: float = 38.51        # MHz / K^3
    sound_speed: float = float("nan")
    debye_omega: float = OMEGA_DEBYE_AL
    coupling: float = float("nan")

    def __post_init__(self):
        if self.alpha <= 0:
            raise DomainError("alpha must be positive")


def alpha_from_coupling(coupling, sound_speed):
    """alpha in MHz/K^3 from a clearing rate per phonon density (Hz m^3)."""
    kb = 1.380649e-23
    hbar = 1.054571817e-34
    return kb ** 3 / (2 * math.pi ** 2 * hbar ** 3 * sound_speed ** 3) * coupling / _MHZ


@dataclass(frozen=True)
class RateSet:
    trap: float
    release: float
    readout_clear: float = 0.0
    phonon_clear: float = 0.0

    def __post_init__(self):
        for name in ("trap", "release", "readout_clear", "phonon_clear"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} rate must be non-negative")


@dataclass(frozen=True)
class ReadoutClearingTable:
    """Piecewise-linear Gamma_RO(Delta_A); constant beyond the end knots."""

    depth_ghz: tuple
    rate_hz: tuple

    def __post_init__(self):
        d = np.asarray(self.depth_ghz, dtype=float)
        r = np.asarray(self.rate_hz, dtype=float)
        if d.ndim != 1 or d.shape != r.shape or d.size == 0:
            raise ValueError("readout table needs matching 1-D knot arrays")
        if np.any(np.diff(d) <= 0):
            raise ValueError("readout table knots must be strictly increasing")
        if np.any(r < 0):
            raise ValueError("readout clearing rates must be non-negative")

    def __call__(self, delta_a_uev):
        return np.interp(uev_to_ghz(np.asarray(delta_a_uev, dtype=float)),
                         self.depth_ghz, self.rate_hz)


@dataclass(frozen=True)
class PhysicsParams:
    """Everything needed to turn (T, flux) into trap and release rates."""

    gap: float = 185.0
    beta: float = 8.73e15
    x_ne: float = 8.5e-7
    alpha: float = 38.51
    sound_speed: float = float("nan")
    debye_omega: float = OMEGA_DEBYE_AL
    readout: ReadoutClearingTable = field(
        default_factory=lambda: ReadoutClearingTable((5.0, 13.0), (30e3, 30e3)))

    @property
    def trap(self):
        return TrapModelParams(self.beta, self.x_ne, self.gap)

    def rates(self, flux, temperature):
        delta_a = trap_depth(flux, self.gap)
        rs = release_rate(delta_a, temperature, self.alpha, float(self.readout(delta_a)))
        return RateSet(float(trap_rate(delta_a, temperature, self.trap)),
                       rs.release, rs.readout_clear, rs.phonon_clear)


def abs_energy(delta_phase, tau, gap):
    """Positive Andreev level Delta * sqrt(1 - tau sin^2(delta/2))."""
    if np.any(np.asarray(tau) < 0) or np.any(np.asarray(tau) > 1):
        raise DomainError("transparency must lie in [0, 1]")
    return gap * np.sqrt(1.0 - tau * np.sin(np.asarray(delta_phase) / 2.0) ** 2)


def trap_depth(flux, gap):
    """Trap depth Delta_A (ueV) of a fully transparent channel at phase pi*flux."""
    flux = np.asarray(flux, dtype=float)
    out = gap * (1.0 - np.abs(np.cos(np.pi * flux / 2.0)))
    return float(out) if out.ndim == 0 else out


def thermal_qp_density(temperature, gap):
    """Equilibrium fractional density sqrt(2 pi kT / Delta) exp(-Delta / kT)."""
    kt = K_B_UEV * np.asarray(temperature, dtype=float)
    return np.sqrt(2 * np.pi * kt / gap) * np.exp(-gap / kt)


def qp_density(temperature, params):
    if np.any(np.asarray(temperature) <= 0):
        raise DomainError("temperature must be positive")
    return params.x_ne + thermal_qp_density(temperature, params.gap)


def trap_rate(delta_a, temperature, params):
    """Gamma_trap in Hz: beta * Delta_A^3 * x(T)."""
    delta_a = np.asarray(delta_a, dtype=float)
    if np.any(delta_a < 0):
        raise DomainError("trap depth must be non-negative")
    return params.beta * _MHZ * (delta_a * _UEV_TO_EV) ** 3 * qp_density(temperature, params)


def phonon_density(delta_a, temperature, sound_speed, omega_d):
    """Density (1/m^3) of Debye phonons with energy between Delta_A and hbar omega_D."""
    delta_a = np.asarray(delta_a, dtype=float)
    temperature = np.asarray(temperature, dtype=float)
    if np.any(HBAR_UEV_S * np.asarray(omega_d) <= delta_a):
        raise DomainError("Debye energy must exceed the trap depth")
    kt = K_B_UEV * temperature
    scale = (kt / (HBAR_UEV_S * sound_speed)) ** 3 / (2 * np.pi ** 2)
    # both limits are tails of the same integral: below-cutoff = D(u) - D(u_D)
    return scale * (debye_bracket(delta_a / kt) - debye_cutoff_term(omega_d, temperature))


def phonon_release_rate(delta_a, temperature, alpha):
    """Gamma_phonon in Hz: alpha * T^3 * D(Delta_A / k_B T)."""
    temperature = np.asarray(temperature, dtype=float)
    if np.any(temperature <= 0):
        raise DomainError("temperature must be positive")
    u = np.asarray(delta_a, dtype=float) / (K_B_UEV * temperature)
    return alpha * _MHZ * temperature ** 3 * debye_bracket(u)


def release_rate(delta_a, temperature, alpha, gamma_ro):
    if gamma_ro < 0:
        raise DomainError("readout clearing rate must be non-negative")
    phonon = float(phonon_release_rate(delta_a, temperature, alpha))
    return RateSet(trap=0.0, release=gamma_ro + phonon,
                   readout_clear=gamma_ro, phonon_clear=phonon)


def mean_occupation(rates):
    """Stationary two-state occupation Gamma_trap / (Gamma_trap + Gamma_release)."""
    total = rates.trap + rates.release
    if total <= 0:
        raise ZeroDivisionError("both trap and release rates are zero")
    return rates.trap / total


def normalized_trap_rate(temperature, x_ne, gap):
    """Trap rate over its cold limit: 1 + x_thermal(T) / x_ne."""
    return 1.0 + thermal_qp_density(temperature, gap) / x_ne


def normalized_mean_occupation(delta_a, temperature, x_ne, gap, alpha_m):
    """Mean occupation over its cold limit; alpha_m = alpha / Gamma_RO in 1/K^3."""
    temperature = np.asarray(temperature, dtype=float)
    u = np.asarray(delta_a, dtype=float) / (K_B_UEV * temperature)
    num = normalized_trap_rate(temperature, x_ne, gap)
    return num / (1.0 + alpha_m * temperature ** 3 * debye_bracket(u))


def total_phonon_density(temperature, sound_speed):
    kt = K_B_UEV * np.asarray(temperature, dtype=float)
    return (kt / (HBAR_UEV_S * sound_speed)) ** 3 / (2 * np.pi ** 2) * 2 * ZETA3
