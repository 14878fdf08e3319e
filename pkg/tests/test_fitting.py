import math
import warnings

import numpy as np
import pytest

from abstrap import fitting as ft
from abstrap import physics as ph

TABLE = ph.ReadoutClearingTable((4.0, 9.0, 14.0), (40e3, 30e3, 25e3))
PHYS = ph.PhysicsParams(readout=TABLE)
FLUXES = np.linspace(0.3, 0.5, 8)
# two very cold rows per depth keep every thermal and phonon term below 1e-12 of the baselines
COLD = [0.005, 0.006]
HOT = [0.12, 0.14, 0.16, 0.17, 0.18, 0.19, 0.2, 0.21]
NOISELESS_CFG = ft.FitConfig(weighting="none", trap_baseline_t_max=0.01,
                             release_baseline_t_max=0.01, occupation_baseline_t_max=0.01)


def alpha_m_truth(physics, depths):
    return physics.alpha * 1e6 / physics.readout(depths)


def noisy(ds, rng, records=8, duration=0.3):
    """Counting-statistics noise for ``records`` records of ``duration`` each."""
    out = ds.subset(np.arange(len(ds)))
    scale = 1.0 / math.sqrt(duration)
    seg = np.full(len(ds), records)
    tmp = ft.SweepDataset(ds.T_K, ds.flux, ds.delta_a_ueV, ds.gamma_trap_Hz, ds.gamma_release_Hz,
                          ds.n_bar, ds.eff_fs_Hz, ds.snr, ds.flags, segment=seg)
    out.gamma_trap_Hz = ds.gamma_trap_Hz + scale * ft.trap_rate_sigma(tmp) * rng.standard_normal(len(ds))
    out.gamma_release_Hz = ds.gamma_release_Hz + scale * ft.release_rate_sigma(tmp) * rng.standard_normal(len(ds))
    out.n_bar = ds.n_bar + scale * ft.occupation_sigma(tmp) * rng.standard_normal(len(ds))
    out.segment = seg
    return out


class TestLeastSquares:
    def test_linear_exact(self):
        x = np.linspace(0, 5, 11)
        res = ft.least_squares(lambda p, x: p[0] * x, x, 2.5 * x, (1.0,))
        assert res["p0"] == pytest.approx(2.5, rel=1e-12)
        assert res.residual_norm == pytest.approx(0.0, abs=1e-10)
        assert res.status == ft.CONVERGED
        assert res.dof == 10

    def test_quadratic_monte_carlo(self):
        # errors are 1-sigma: about 68 % of fits land within one error bar, nearly all within 3
        rng = np.random.default_rng(0)
        x = np.linspace(-1, 1, 40)
        truth = np.array([0.5, -1.0, 2.0])
        inside1 = inside3 = 0
        for _ in range(200):
            y = truth[0] + truth[1] * x + truth[2] * x ** 2 + 0.1 * rng.standard_normal(x.size)
            res = ft.least_squares(lambda p, x: p[0] + p[1] * x + p[2] * x ** 2, x, y,
                                   (1.0, 1.0, 1.0), sigma=np.full(x.size, 0.1),
                                   absolute_sigma=True)
            z = np.abs(res.values - truth) / res.errors
            inside1 += np.all(z < 1) * 1
            inside3 += np.all(z < 3)
        assert inside3 >= 196
        assert 0.68 ** 3 - 0.1 < inside1 / 200 < 0.68 ** 3 + 0.15

    def test_init_at_optimum(self):
        x = np.linspace(0.1, 2, 20)
        y = 3.0 * np.exp(-0.7 * x)
        res = ft.least_squares(lambda p, x: p[0] * np.exp(-p[1] * x), x, y, (3.0, 0.7))
        assert res.n_iter <= 2
        np.testing.assert_allclose(res.values, [3.0, 0.7], rtol=1e-14)

    def test_singular(self):
        x = np.linspace(0, 1, 10)
        res = ft.least_squares(lambda p, x: (p[0] + p[1]) * x, x, x, (0.3, 0.3))
        assert res.status == ft.SINGULAR
        assert np.all(np.isinf(res.errors))

    def test_bounds_and_validation(self):
        x = np.arange(5.0)
        res = ft.least_squares(lambda p, x: p[0] * x, x, -x, (1.0,), bounds=((0.0,), (10.0,)))
        assert res["p0"] == pytest.approx(0.0, abs=1e-8)
        with pytest.raises(ValueError):
            ft.least_squares(lambda p, x: p[0] * x, x, x, (20.0,), bounds=((0.0,), (10.0,)))
        with pytest.raises(ValueError):
            ft.least_squares(lambda p, x: p[0] + p[1] * x, x[:1], x[:1], (1.0, 1.0))

    def test_errors_nonnegative_and_dict(self):
        x = np.linspace(0, 1, 10)
        res = ft.least_squares(lambda p, x: p[0] * x + p[1], x, 2 * x + 0.01 * np.sin(7 * x),
                               (1.0, 0.0), names=("a", "b"))
        assert np.all(res.errors >= 0)
        d = res.as_dict()
        assert set(d["parameters"]) == {"a", "b"}
        assert d["status"] in (ft.CONVERGED, ft.MAX_ITER, ft.SINGULAR)

    def test_deterministic(self):
        x = np.linspace(0.1, 2, 20)
        y = 3.0 * np.exp(-0.7 * x) + 0.01 * np.cos(9 * x)
        a = ft.least_squares(lambda p, x: p[0] * np.exp(-p[1] * x), x, y, (1.0, 1.0))
        b = ft.least_squares(lambda p, x: p[0] * np.exp(-p[1] * x), x, y, (1.0, 1.0))
        assert a.values.tobytes() == b.values.tobytes()


class TestBaselines:
    def test_single_cold_row(self):
        ds = ft.model_dataset(PHYS, [0.03, 0.2], FLUXES[:2])
        b = ft.low_T_baseline(ds, 0.08, "gamma_trap_Hz")
        np.testing.assert_allclose(b.value, ds.gamma_trap_Hz[:2])

    def test_matches_cold_trap_law(self):
        ds = ft.model_dataset(PHYS, [0.03, 0.04, 0.05], FLUXES)
        b = ft.low_T_baseline(ds, 0.08, "gamma_trap_Hz")
        expect = PHYS.beta * 1e6 * (b.delta_a_ueV * 1e-6) ** 3 * PHYS.x_ne
        np.testing.assert_allclose(b.value, expect, rtol=1e-12)

    def test_missing(self):
        ds = ft.model_dataset(PHYS, [0.1, 0.2], FLUXES)
        with pytest.raises(ft.MissingBaselineError):
            ft.low_T_baseline(ds, 0.08, "gamma_trap_Hz")

    def test_lookup_unknown_depth(self):
        ds = ft.model_dataset(PHYS, [0.03], FLUXES[:2])
        b = ft.low_T_baseline(ds, 0.08, "n_bar")
        with pytest.raises(ft.MissingBaselineError):
            b.at(np.array([1.0]))


class TestNoiseless:
    ds = ft.model_dataset(PHYS, COLD + HOT, FLUXES)

    def test_full_protocol_exact(self):
        res = ft.run_staged_fit(self.ds, NOISELESS_CFG)
        assert res.stage1["gap"] == pytest.approx(PHYS.gap, rel=1e-6)
        assert res.stage1["beta"] == pytest.approx(PHYS.beta, rel=1e-6)
        assert res.stage2["x_ne"] == pytest.approx(PHYS.x_ne, rel=1e-6)
        assert res.release["alpha"] == pytest.approx(PHYS.alpha, rel=1e-6)
        np.testing.assert_allclose(res.occupation.alpha_m,
                                   alpha_m_truth(PHYS, res.occupation.delta_a_ueV), rtol=1e-6)
        np.testing.assert_allclose(res.consistency.ratio, 1.0, rtol=1e-6)
        assert not res.consistency.flagged
        assert res.warnings == []

    def test_poisson_weighting_also_exact(self):
        cfg = ft.FitConfig(trap_baseline_t_max=0.01, release_baseline_t_max=0.01,
                           occupation_baseline_t_max=0.01)
        res = ft.run_staged_fit(self.ds, cfg)
        assert res.stage1["beta"] == pytest.approx(PHYS.beta, rel=1e-6)
        assert res.release["alpha"] == pytest.approx(PHYS.alpha, rel=1e-6)

    def test_log_space_exact(self):
        cfg = ft.FitConfig(weighting="none", log_space=True, trap_baseline_t_max=0.01,
                           release_baseline_t_max=0.01, occupation_baseline_t_max=0.01)
        res = ft.run_staged_fit(self.ds, cfg)
        assert res.stage2["x_ne"] == pytest.approx(PHYS.x_ne, rel=1e-6)

    def test_single_depth_identifiable(self):
        one = self.ds.subset(self.ds.flux == FLUXES[4])
        tb = ft.low_T_baseline(one, 0.01, "gamma_trap_Hz")
        res = ft.fit_trap_stage1(one, tb, NOISELESS_CFG)
        assert res.status == ft.CONVERGED
        assert res["gap"] == pytest.approx(PHYS.gap, rel=1e-6)
        # the Jacobian keeps full rank: singular values well above rounding
        assert np.all(np.isfinite(res.errors))

    def test_single_depth_wider_errors(self):
        rng = np.random.default_rng(3)
        noisy_ds = noisy(self.ds, rng)
        cfg = ft.FitConfig(trap_baseline_t_max=0.01)
        full = ft.fit_trap_stage1(noisy_ds, ft.low_T_baseline(noisy_ds, 0.01, "gamma_trap_Hz"), cfg)
        one = noisy_ds.subset(noisy_ds.flux == FLUXES[4])
        part = ft.fit_trap_stage1(one, ft.low_T_baseline(one, 0.01, "gamma_trap_Hz"), cfg)
        assert part.error("gap") > full.error("gap")

    def test_cold_rows_only_degenerate(self):
        cold = ft.model_dataset(PHYS, [0.01, 0.02, 0.03], FLUXES)
        tb = ft.low_T_baseline(cold, 0.08, "gamma_trap_Hz")
        res = ft.fit_trap_stage2(cold, tb, PHYS.gap, beta=PHYS.beta, config=NOISELESS_CFG)
        assert res.status == ft.SINGULAR

    def test_normalised_trap_rate_collapses(self):
        tb = ft.low_T_baseline(self.ds, 0.01, "gamma_trap_Hz")
        base, _ = tb.at(self.ds.delta_a_ueV)
        norm = self.ds.gamma_trap_Hz / base
        for t in HOT:
            v = norm[self.ds.T_K == t]
            np.testing.assert_allclose(v, v[0], rtol=1e-12)

    def test_zero_readout_same_alpha(self):
        zero = ph.PhysicsParams(readout=ph.ReadoutClearingTable((4.0, 14.0), (0.0, 0.0)))
        ds0 = ft.model_dataset(zero, COLD + HOT, FLUXES, occupancy="two_state")
        a = ft.fit_release(self.ds, ft.low_T_baseline(self.ds, 0.01, "gamma_release_Hz"),
                           NOISELESS_CFG)
        b = ft.fit_release(ds0, ft.low_T_baseline(ds0, 0.01, "gamma_release_Hz"), NOISELESS_CFG)
        assert b["alpha"] == pytest.approx(a["alpha"], rel=1e-9)

    def test_occupation_cold_rows_normalise_to_one(self):
        nb = ft.low_T_baseline(self.ds, 0.01, "n_bar")
        cold = self.ds.subset(self.ds.T_K < 0.01)
        base, _ = nb.at(cold.delta_a_ueV)
        np.testing.assert_allclose(cold.n_bar / base, 1.0, rtol=1e-9)

    def test_occupation_dip_then_rise(self):
        ds = ft.model_dataset(PHYS, np.linspace(0.005, 0.3, 60), [0.4])
        nb = ft.low_T_baseline(ds, 0.01, "n_bar")
        norm = ds.n_bar / nb.at(ds.delta_a_ueV)[0]
        i = int(np.argmin(norm))
        assert 0.08 <= ds.T_K[i] <= 0.16
        assert norm[i] < 0.9 and norm[-1] > 1.0


class TestNoisy:
    """Counting noise on the cold-plus-hot grid, ten realisations each."""

    ds = ft.model_dataset(PHYS, [0.03, 0.035, 0.04, 0.045, 0.05, 0.055] + HOT, FLUXES)

    def test_paper_tolerances_every_seed(self):
        # eight 3 s records per point
        for seed in range(10):
            res = ft.run_staged_fit(noisy(self.ds, np.random.default_rng(seed), duration=3.0),
                                    ft.FitConfig())
            assert res.stage1["beta"] == pytest.approx(PHYS.beta, rel=0.05)
            assert res.stage1["gap"] == pytest.approx(PHYS.gap, rel=0.02)
            assert res.stage2["x_ne"] == pytest.approx(PHYS.x_ne, rel=0.05)
            assert res.release["alpha"] == pytest.approx(PHYS.alpha, rel=0.05)
            np.testing.assert_allclose(res.occupation.alpha_m,
                                       alpha_m_truth(PHYS, res.occupation.delta_a_ueV), rtol=0.1)
            assert res.consistency.nrms < 0.15

    def test_errors_calibrated(self):
        # eight 0.3 s records: the quoted 1-sigma errors cover the scatter
        z = []
        for seed in range(10):
            res = ft.run_staged_fit(noisy(self.ds, np.random.default_rng(100 + seed)),
                                    ft.FitConfig())
            for fr, name, truth in ((res.stage1, "beta", PHYS.beta), (res.stage1, "gap", PHYS.gap),
                                    (res.release, "alpha", PHYS.alpha)):
                z.append((fr[name] - truth) / fr.error(name))
        z = np.abs(z)
        assert z.max() < 4.0
        assert np.median(z) < 1.5

    def test_clipped_rows_excluded(self):
        ds = noisy(self.ds, np.random.default_rng(1))
        rb = ft.low_T_baseline(ds, 0.06, "gamma_release_Hz")
        ref = ft.fit_release(ds, rb)
        clipped = ds.subset(np.arange(len(ds)))
        # pretend the hottest deep rows were recorded at a rate they saturate
        hot = (clipped.T_K >= 0.2) & (clipped.flux >= 0.45)
        clipped.eff_fs_Hz = np.where(hot, clipped.gamma_release_Hz * 1.5, 5e6)
        with pytest.warns(RuntimeWarning, match="excluded"):
            res = ft.fit_release(clipped, rb)
        assert res.warnings
        assert res.n_points == ref.n_points - int(hot.sum())
        assert abs(res["alpha"] - ref["alpha"]) < ref.error("alpha")

    def test_include_below_cut_switch(self):
        ds = noisy(self.ds, np.random.default_rng(2))
        rb = ft.low_T_baseline(ds, 0.06, "gamma_release_Hz")
        a = ft.fit_release(ds, rb)
        b = ft.fit_release(ds, rb, ft.FitConfig(release_include_below_cut=True))
        assert b.n_points > a.n_points


class TestConsistency:
    def test_corrupted_readout_table_flagged(self):
        ds = ft.model_dataset(PHYS, COLD + HOT, FLUXES)
        bad = ph.PhysicsParams(readout=ph.ReadoutClearingTable((4.0, 9.0, 14.0), (80e3, 30e3, 5e3)))
        ds_bad = ft.model_dataset(bad, COLD + HOT, FLUXES)
        # release rates from the corrupted table, occupations from the true one
        ds.gamma_release_Hz = ds_bad.gamma_release_Hz
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = ft.run_staged_fit(ds, NOISELESS_CFG)
        assert res.consistency.flagged
        assert any("consistency" in w for w in res.warnings)

    def test_grid_mismatch(self):
        ds = ft.model_dataset(PHYS, COLD + HOT, FLUXES)
        nb = ft.low_T_baseline(ds, 0.01, "n_bar")
        rb = ft.low_T_baseline(ds.subset(ds.flux != FLUXES[0]), 0.01, "gamma_release_Hz")
        occ = ft.fit_mean_occupation(ds, nb, PHYS.x_ne, PHYS.gap, NOISELESS_CFG)
        with pytest.raises(ft.GridMismatchError):
            ft.consistency_check(PHYS.alpha, occ, rb)

    def test_nrms_definition(self):
        depths = np.array([20.0, 40.0])
        occ = ft.OccupationFits(depths, [
            ft.FitResult(("alpha_m",), np.array([v]), np.array([0.0]), 0.0, 1, ft.CONVERGED)
            for v in (1000.0, 2000.0)])
        rb = ft.Baseline(depths, np.array([40e3, 20e3]), np.zeros(2), "gamma_release_Hz", 0.06)
        rep = ft.consistency_check(40.0, occ, rb)
        np.testing.assert_allclose(rep.alpha_over_alpha_m, [40e3, 20e3])
        assert rep.nrms == pytest.approx(0.0)
        rep = ft.consistency_check(44.0, occ, rb)
        assert rep.nrms == pytest.approx(0.1)


class TestDataset:
    def test_usable_filters_flags_and_nan(self):
        ds = ft.model_dataset(PHYS, [0.03], FLUXES[:4])
        ds.flags = [(), ("gate",), ("downsampled_x2",), ()]
        ds.n_bar[3] = np.nan
        u = ds.usable()
        assert len(u) == 2
        assert u.flags[1] == ("downsampled_x2",)

    def test_collapse_means_and_counts(self):
        ds = ft.model_dataset(PHYS, [0.03, 0.03, 0.2], FLUXES[:1])
        ds.gamma_trap_Hz[:2] = [10.0, 20.0]
        c = ds.collapse()
        assert len(c) == 2
        assert c.gamma_trap_Hz[0] == 15.0
        np.testing.assert_array_equal(c.segment, [2, 1])

    def test_column_lengths_checked(self):
        with pytest.raises(ValueError):
            ft.SweepDataset([1, 2], [1], [1, 2], [1, 2], [1, 2], [1, 2], [1, 2], [1, 2], [(), ()])

    def test_flag_strings(self):
        ds = ft.SweepDataset([0.1], [0.4], [1.0], [1.0], [1.0], [0.1], [1e6], [9.0], ["gate|max_iter"])
        assert ds.flags == [("gate", "max_iter")]

    def test_empty(self):
        assert len(ft.SweepDataset.empty()) == 0

    def test_deterministic_protocol(self):
        ds = noisy(ft.model_dataset(PHYS, COLD + HOT, FLUXES), np.random.default_rng(5))
        cfg = ft.FitConfig(trap_baseline_t_max=0.01, release_baseline_t_max=0.01,
                           occupation_baseline_t_max=0.01)
        a, b = ft.run_staged_fit(ds, cfg), ft.run_staged_fit(ds, cfg)
        assert a.stage1.values.tobytes() == b.stage1.values.tobytes()
        assert a.occupation.alpha_m.tobytes() == b.occupation.alpha_m.tobytes()
