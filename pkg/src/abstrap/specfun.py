"""Special functions for the trapping models.

Polylogarithms of order 2 and 3 on [0, 1], the principal Lambert W branch,
and the Debye tail integral

    D(u) = int_u^inf t^2 / (e^t - 1) dt
         = -u^2 ln(1 - e^-u) + 2 u Li2(e^-u) + 2 Li3(e^-u).

All functions accept scalars or array-likes and return a float or ndarray
matching the input shape.
"""
import math

import numpy as np
from scipy.special import bernoulli

from .constants import HBAR_UEV_S, K_B_UEV

ZETA2 = math.pi ** 2 / 6.0
ZETA3 = 1.2020569031595942853997381615114
INV_E = math.exp(-1.0)

BRANCH_TOL = 1e-12
_SERIES_TOL = 1e-17
_SERIES_SWITCH = 0.5
_BRACKET_CUTOFF = 700.0


class DomainError(ValueError):
    """Argument outside the domain of a special function."""


def _zeta_int(n):
    """Riemann zeta at an integer n <= 3."""
    if n == 3:
        return ZETA3
    if n == 2:
        return ZETA2
    if n == 0:
        return -0.5
    if n == 1:
        raise ValueError("zeta pole at 1")
    m = -n
    return (-1) ** m * _BERNOULLI[m + 1] / (m + 1)


_NTERMS = 40
_BERNOULLI = bernoulli(_NTERMS + 2)


def _log_series_coeffs(s):
    # Li_s(e^mu) = mu^(s-1)/(s-1)! [H_(s-1) - ln(-mu)] + sum_{k != s-1} zeta(s-k) mu^k / k!
    c = np.zeros(_NTERMS)
    for k in range(_NTERMS):
        if k != s - 1:
            c[k] = _zeta_int(s - k) / math.factorial(k)
    return c


_LOG_COEFFS = {2: _log_series_coeffs(2), 3: _log_series_coeffs(3)}
_HARMONIC = {2: 1.0, 3: 1.5}


def _polylog_scalar(s, x):
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return ZETA2 if s == 2 else ZETA3
    if x <= _SERIES_SWITCH:
        total = 0.0
        xk = x
        k = 1
        while True:
            term = xk / k ** s
            total += term
            if term < _SERIES_TOL:
                break
            k += 1
            xk *= x
        return total
    # near 1 the power series crawls; expand in mu = ln x instead (|mu| < ln 2)
    mu = math.log(x)
    coeffs = _LOG_COEFFS[s]
    total = 0.0
    muk = 1.0
    for k in range(_NTERMS):
        total += coeffs[k] * muk
        muk *= mu
    singular = mu ** (s - 1) / math.factorial(s - 1)
    return total + singular * (_HARMONIC[s] - math.log(-mu))


def polylog(s, x):
    """Polylogarithm Li_s(x) for s in {2, 3} and real x in [0, 1]."""
    if s not in (2, 3):
        raise DomainError(f"polylog order must be 2 or 3, got {s}")
    arr = np.asarray(x, dtype=float)
    if np.any((arr < 0.0) | (arr > 1.0)) or np.any(np.isnan(arr)):
        raise DomainError("polylog argument must lie in [0, 1]")
    if arr.ndim == 0:
        return _polylog_scalar(s, float(arr))
    out = np.empty_like(arr)
    flat = out.reshape(-1)
    for i, v in enumerate(arr.reshape(-1)):
        flat[i] = _polylog_scalar(s, float(v))
    return out


def _lambert_w0_scalar(x):
    if x < -INV_E - BRANCH_TOL:
        raise DomainError(f"lambert_w0 undefined for x = {x!r} < -1/e")
    if x <= -INV_E:
        return -1.0
    if x == 0.0:
        return 0.0
    if x < -0.25:
        # branch-point expansion; Halley from ln(1+x) stalls near the double root
        p = math.sqrt(2.0 * (math.e * x + 1.0))
        w = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p ** 3
    elif abs(x) < 0.3:
        w = x
    else:
        w = math.log(x + 1.0)
    for _ in range(50):
        ew = math.exp(w)
        f = w * ew - x
        wp1 = w + 1.0
        if wp1 == 0.0:
            break
        denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1)
        dw = f / denom
        w -= dw
        if abs(dw) < 1e-14 * max(1.0, abs(w)):
            break
    return max(w, -1.0)


def lambert_w0(x):
    """Principal branch W0 of the Lambert W function for real x >= -1/e.

    Values within 1e-12 below -1/e are treated as the branch point and map
    to -1; anything further below raises :class:`DomainError`.
    """
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        return _lambert_w0_scalar(float(arr))
    out = np.empty_like(arr)
    flat = out.reshape(-1)
    for i, v in enumerate(arr.reshape(-1)):
        flat[i] = _lambert_w0_scalar(float(v))
    return out


def _bracket_scalar(u):
    if u < 0.0 or math.isnan(u):
        raise DomainError(f"bracket argument must be >= 0, got {u!r}")
    if u == 0.0:
        return 2.0 * ZETA3
    if u > _BRACKET_CUTOFF:
        return 0.0
    x = math.exp(-u)
    return (-u * u * math.log1p(-x)
            + 2.0 * u * _polylog_scalar(2, x)
            + 2.0 * _polylog_scalar(3, x))


def debye_bracket(u):
    """Phonon tail integral int_u^inf t^2/(e^t - 1) dt in closed form.

    ``u`` is the threshold energy over k_B T. ``u = 0`` returns the total
    2*zeta(3); arguments beyond 700 return 0.
    """
    arr = np.asarray(u, dtype=float)
    if arr.ndim == 0:
        return _bracket_scalar(float(arr))
    out = np.empty_like(arr)
    flat = out.reshape(-1)
    for i, v in enumerate(arr.reshape(-1)):
        flat[i] = _bracket_scalar(float(v))
    return out


def debye_cutoff_term(omega_d, temperature):
    """Upper-limit boundary term of the Debye integral, D(hbar omega_D / k_B T).

    ``omega_d`` in rad/s, ``temperature`` in K.
    """
    omega_d = np.asarray(omega_d, dtype=float)
    temperature = np.asarray(temperature, dtype=float)
    if np.any(omega_d <= 0) or np.any(temperature <= 0):
        raise DomainError("omega_D and T must be positive")
    return debye_bracket(HBAR_UEV_S * omega_d / (K_B_UEV * temperature))
