import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from abstrap import physics as ph
from abstrap.constants import HBAR_UEV_S, K_B_UEV, OMEGA_DEBYE_AL, OMEGA_DEBYE_SI
from abstrap.specfun import ZETA3, DomainError

GAP = 185.0
TRAP = ph.TrapModelParams(beta=8.73e15, x_ne=8.5e-7, gap=GAP)
NU = 6420.0


def density_by_quadrature(delta_a, temperature, nu, omega_d):
    # integrate in omega directly; the integrand is negligible past ~80 kT above the lower limit
    lo = delta_a / HBAR_UEV_S
    kt = K_B_UEV * temperature
    hi = min(omega_d, lo + 80 * kt / HBAR_UEV_S)
    scale = kt / HBAR_UEV_S

    def f(w):
        return w * w / math.expm1(HBAR_UEV_S * w / kt)

    if lo == 0.0:
        # w^2 / (e^{aw} - 1) -> w / a near zero; quad handles it once the origin is excluded
        lo = 1e-12 * scale
    val = quad(f, lo, hi, epsabs=0, epsrel=1e-12, limit=500, points=[lo + scale, lo + 5 * scale])[0]
    return val / (2 * math.pi ** 2 * nu ** 3)


class TestUnits:
    def test_ghz_round_trip(self):
        assert ph.uev_to_ghz(ph.ghz_to_uev(9.0)) == pytest.approx(9.0, rel=1e-15)

    def test_depth_unit_consistency(self):
        d = ph.trap_depth(0.5, GAP)
        assert ph.uev_to_ghz(d) == pytest.approx(d * 0.2417990, rel=1e-6)


class TestAbsEnergy:
    def test_zero_phase(self):
        assert ph.abs_energy(0.0, 0.3, GAP) == GAP

    def test_transparent_at_pi(self):
        assert ph.abs_energy(math.pi, 1.0, GAP) == pytest.approx(0.0, abs=1e-12)

    def test_quarter(self):
        assert ph.abs_energy(0.5 * math.pi, 1.0, GAP) == pytest.approx(GAP * math.cos(math.pi / 4))
        assert ph.abs_energy(0.5 * math.pi, 1.0, GAP) == pytest.approx(130.8, abs=0.05)

    @pytest.mark.parametrize("tau", [-0.01, 1.01])
    def test_transparency_domain(self, tau):
        with pytest.raises(DomainError):
            ph.abs_energy(0.1, tau, GAP)


class TestTrapDepth:
    def test_zero_flux(self):
        assert ph.trap_depth(0.0, GAP) == 0.0

    def test_sweep_endpoints(self):
        assert ph.trap_depth(0.5, GAP) == pytest.approx(54.18, abs=0.01)
        assert ph.uev_to_ghz(ph.trap_depth(0.5, GAP)) == pytest.approx(13.1, abs=0.05)
        assert ph.trap_depth(0.3, GAP) == pytest.approx(20.2, abs=0.05)
        assert ph.uev_to_ghz(ph.trap_depth(0.3, GAP)) == pytest.approx(4.9, abs=0.05)

    @given(st.floats(0.0, 1.0))
    def test_matches_transparent_level(self, flux):
        expect = GAP - ph.abs_energy(math.pi * flux, 1.0, GAP)
        # sqrt(1 - sin^2) loses digits as cos -> 0; scale the tolerance with it
        cos = abs(math.cos(math.pi * flux / 2))
        tol = 1e-10 + 4 * GAP * 2.2e-16 / max(cos, 1e-8)
        assert ph.trap_depth(flux, GAP) == pytest.approx(expect, abs=tol)

    def test_monotone_on_sweep(self):
        d = ph.trap_depth(np.linspace(0, 1, 101), GAP)
        assert np.all(np.diff(d) > 0)


class TestQpDensity:
    def test_cold_limit(self):
        assert ph.qp_density(0.03, TRAP) == pytest.approx(8.5e-7, rel=1e-20)
        assert ph.thermal_qp_density(0.03, GAP) < 1e-28

    def test_hot_value(self):
        kt = K_B_UEV * 0.2
        expect = 8.5e-7 + math.sqrt(2 * math.pi * kt / GAP) * math.exp(-GAP / kt)
        assert ph.qp_density(0.2, TRAP) == pytest.approx(expect, rel=1e-14)
        assert ph.qp_density(0.2, TRAP) == pytest.approx(1.76e-5, rel=0.01)

    def test_nonpositive_temperature(self):
        with pytest.raises(DomainError):
            ph.qp_density(0.0, TRAP)


class TestTrapRate:
    def test_no_depth(self):
        assert ph.trap_rate(0.0, 0.1, TRAP) == 0.0

    def test_cold_value(self):
        d = ph.ghz_to_uev(9.0)
        by_hand = 8.73e15 * 1e6 * (d * 1e-6) ** 3 * 8.5e-7
        assert ph.trap_rate(d, 0.03, TRAP) == pytest.approx(by_hand, rel=1e-12)
        assert ph.trap_rate(d, 0.03, TRAP) == pytest.approx(383.0, rel=2e-3)

    @given(st.floats(5, 13), st.floats(5, 13), st.floats(0.03, 0.3), st.floats(0.03, 0.3))
    def test_factorises(self, f1, f2, t1, t2):
        d1, d2 = ph.ghz_to_uev(f1), ph.ghz_to_uev(f2)
        lhs = ph.trap_rate(d1, t1, TRAP) * ph.trap_rate(d2, t2, TRAP)
        rhs = ph.trap_rate(d1, t2, TRAP) * ph.trap_rate(d2, t1, TRAP)
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_negative_depth(self):
        with pytest.raises(DomainError):
            ph.trap_rate(-1.0, 0.1, TRAP)


class TestPhononDensity:
    @pytest.mark.parametrize("f_ghz", [5.0, 9.0, 13.0])
    @pytest.mark.parametrize("temperature", [0.03, 0.1, 0.3])
    def test_quadrature_oracle(self, f_ghz, temperature):
        d = ph.ghz_to_uev(f_ghz)
        got = ph.phonon_density(d, temperature, NU, OMEGA_DEBYE_AL)
        assert got == pytest.approx(density_by_quadrature(d, temperature, NU, OMEGA_DEBYE_AL),
                                    rel=1e-9)

    def test_cutoff_reduces_density(self):
        # a low cutoff inside the thermal window must remove phonons, not add them
        t = 0.3
        omega_d = 3 * K_B_UEV * t / HBAR_UEV_S
        got = ph.phonon_density(5.0, t, NU, omega_d)
        uncut = ph.phonon_density(5.0, t, NU, 1e3 * omega_d)
        assert got < uncut
        assert got == pytest.approx(density_by_quadrature(5.0, t, NU, omega_d), rel=1e-9)

    def test_total_density(self):
        t = 0.1
        total = ph.total_phonon_density(t, NU)
        kt = K_B_UEV * t
        assert total == pytest.approx((kt / (HBAR_UEV_S * NU)) ** 3 / (2 * math.pi ** 2) * 2 * ZETA3)
        assert ph.phonon_density(0.0, t, NU, 1e30) == pytest.approx(total, rel=1e-14)

    @pytest.mark.parametrize("omega", [OMEGA_DEBYE_AL, OMEGA_DEBYE_SI])
    @pytest.mark.parametrize("temperature", [0.03, 0.1, 0.3])
    def test_cutoff_negligible(self, omega, temperature):
        d = ph.ghz_to_uev(5.0)
        with_cut = ph.phonon_density(d, temperature, NU, omega)
        without = ph.phonon_density(d, temperature, NU, 1e30)
        assert abs(with_cut - without) / without < 1e-12

    def test_cutoff_below_depth(self):
        with pytest.raises(DomainError):
            ph.phonon_density(50.0, 0.1, NU, 40.0 / HBAR_UEV_S)


class TestRelease:
    def test_phonon_value(self):
        d = ph.ghz_to_uev(9.0)
        rate = ph.phonon_release_rate(d, 0.2, 38.51)
        assert rate == pytest.approx(0.406e6, rel=2e-3)

    def test_cold_limit(self):
        assert ph.phonon_release_rate(20.0, 0.005, 38.51) < 1e-6
        rs = ph.release_rate(20.0, 0.005, 38.51, 30e3)
        assert rs.release == pytest.approx(30e3, rel=1e-12)

    def test_no_depth(self):
        assert ph.phonon_release_rate(0.0, 0.1, 38.51) == pytest.approx(38.51e6 * 1e-3 * 2 * ZETA3)

    def test_subtraction_identity(self):
        rs = ph.release_rate(30.0, 0.17, 38.51, 27e3)
        assert rs.release - rs.readout_clear == rs.phonon_clear
        assert ph.release_rate(30.0, 0.17, 38.51, 0.0).release == rs.phonon_clear

    @given(st.floats(5, 13), st.floats(0.01, 0.3), st.floats(0.01, 0.3))
    def test_monotone_in_temperature(self, f_ghz, t1, t2):
        d = ph.ghz_to_uev(f_ghz)
        lo, hi = sorted((t1, t2))
        assert (ph.release_rate(d, lo, 38.51, 3e4).release
                <= ph.release_rate(d, hi, 38.51, 3e4).release)

    def test_negative_readout(self):
        with pytest.raises(DomainError):
            ph.release_rate(30.0, 0.1, 38.51, -1.0)


class TestOccupation:
    def test_examples(self):
        assert ph.mean_occupation(ph.RateSet(1e3, 4e3)) == pytest.approx(0.2)
        assert ph.mean_occupation(ph.RateSet(7.0, 7.0)) == 0.5
        assert ph.mean_occupation(ph.RateSet(1.0, 1e12)) < 1e-11

    def test_stationary_form(self):
        rs = ph.RateSet(300.0, 2e4)
        p0 = rs.release / (rs.trap + rs.release)
        assert ph.mean_occupation(rs) == pytest.approx(p0 * rs.trap / rs.release, rel=1e-14)

    @given(st.floats(0, 1e7), st.floats(0, 1e7))
    def test_bounded(self, a, b):
        if a + b == 0:
            with pytest.raises(ZeroDivisionError):
                ph.mean_occupation(ph.RateSet(a, b))
        else:
            assert 0.0 <= ph.mean_occupation(ph.RateSet(a, b)) <= 1.0

    def test_negative_rates_rejected(self):
        with pytest.raises(DomainError):
            ph.RateSet(-1.0, 1.0)


class TestNormalised:
    def test_cold_limit(self):
        assert ph.normalized_mean_occupation(30.0, 0.005, 8.5e-7, GAP, 1283.0) == pytest.approx(1.0)

    def test_numerator_is_normalised_trap_rate(self):
        for t in (0.05, 0.15, 0.25):
            ratio = ph.trap_rate(30.0, t, TRAP) / ph.trap_rate(30.0, 1e-3, TRAP)
            assert ph.normalized_trap_rate(t, 8.5e-7, GAP) == pytest.approx(ratio, rel=1e-12)

    def test_dip_then_rise(self):
        # alpha_M from alpha and a 30 kHz readout clearing rate
        alpha_m = 38.51e6 / 30e3
        t = np.linspace(0.03, 0.3, 271)
        n = ph.normalized_mean_occupation(ph.ghz_to_uev(9.0), t, 8.5e-7, GAP, alpha_m)
        i = int(np.argmin(n))
        assert n[i] < 0.95
        assert 0.08 <= t[i] <= 0.2
        assert n[-1] > 1.0

    def test_matches_rate_ratio(self):
        p = ph.PhysicsParams(readout=ph.ReadoutClearingTable((5.0, 13.0), (3e4, 3e4)))
        flux, t = 0.4, 0.17
        hot, cold = p.rates(flux, t), p.rates(flux, 0.005)
        # in the n̄ << 1 regime the ratio form is exact for Gamma_trap / Gamma_release
        ratio = (hot.trap / hot.release) / (cold.trap / cold.release)
        got = ph.normalized_mean_occupation(ph.trap_depth(flux, p.gap), t, p.x_ne, p.gap,
                                            p.alpha * 1e6 / 3e4)
        assert got == pytest.approx(ratio, rel=1e-9)


class TestParams:
    def test_validation(self):
        with pytest.raises(DomainError):
            ph.TrapModelParams(x_ne=1.5)
        with pytest.raises(DomainError):
            ph.PhononModelParams(alpha=0.0)
        with pytest.raises(DomainError):
            ph.DeviceParams(transparency=2.0)

    def test_readout_table(self):
        tab = ph.ReadoutClearingTable((4.0, 9.0, 14.0), (40e3, 30e3, 25e3))
        assert tab(ph.ghz_to_uev(6.5)) == pytest.approx(35e3)
        assert tab(ph.ghz_to_uev(2.0)) == 40e3
        assert tab(ph.ghz_to_uev(20.0)) == 25e3
        with pytest.raises(ValueError):
            ph.ReadoutClearingTable((4.0, 4.0), (1.0, 1.0))

    def test_rates_bundle(self):
        p = ph.PhysicsParams()
        rs = p.rates(0.4, 0.1)
        d = ph.trap_depth(0.4, p.gap)
        assert rs.trap == pytest.approx(ph.trap_rate(d, 0.1, p.trap))
        assert rs.release == pytest.approx(rs.readout_clear + rs.phonon_clear)
        assert rs.readout_clear == 30e3

    def test_alpha_from_coupling(self):
        nu, alpha = 6420.0, 38.51
        unit = ph.alpha_from_coupling(1.0, nu)
        assert ph.alpha_from_coupling(alpha / unit, nu) == pytest.approx(alpha)
