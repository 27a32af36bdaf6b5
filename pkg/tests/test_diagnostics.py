"""Autocorrelation, IACT/ESS, Geweke and MPSRF against analytic oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import lfilter

from haemoinfer.diagnostics import (autocorr, autocorr_spectrum, diagnose, geweke, iact_ess, mpsrf,
                                    spectral_variance, split_subchains)
from haemoinfer.errors import DegenerateChain, ValidationError


def ar1(phi, n, seed, burn=1000):
    e = np.random.default_rng(seed).standard_normal(n + burn)
    return lfilter([1.0], [1.0, -phi], e)[burn:]


class TestAutocorr:
    def test_lag_zero(self):
        assert autocorr(np.random.default_rng(0).standard_normal(50), 0) == 1.0

    def test_iid(self):
        x = np.random.default_rng(1).standard_normal(100_000)
        assert abs(autocorr(x, 1)) < 0.02

    def test_ar1_geometric(self):
        x = ar1(0.5, 200_000, 2)
        for lag in range(1, 6):
            # sampling sd of rho_l is below 1/sqrt(M) * sqrt((1 + phi^2) / (1 - phi^2)) ~ 0.003
            assert autocorr(x, lag) == pytest.approx(0.5**lag, abs=0.012)

    def test_hand_value(self):
        # centred (-1.5, -0.5, 0.5, 1.5): lag-1 products sum to 0.75 - 0.25 + 0.75 = 1.25 over 5
        assert autocorr([1.0, 2.0, 3.0, 4.0], 1) == pytest.approx(0.25, rel=1e-15)

    def test_constant(self):
        with pytest.raises(DegenerateChain):
            autocorr(np.ones(10), 1)

    def test_lag_range(self):
        with pytest.raises(ValidationError):
            autocorr(np.arange(5.0), 5)

    @settings(max_examples=30)
    @given(st.integers(0, 10_000), st.integers(5, 300))
    def test_fft_matches_direct(self, seed, n):
        x = np.random.default_rng(seed).standard_normal(n).cumsum()
        rho = autocorr_spectrum(x, 20)
        direct = [autocorr(x, lag) for lag in range(min(21, n))]
        assert np.allclose(rho, direct, atol=1e-12)
        assert rho[0] == 1.0 and np.all(np.abs(rho) <= 1.0)


class TestIACT:
    def test_iid(self):
        tau, ess, _ = iact_ess(np.random.default_rng(3).standard_normal(20_000))
        assert tau == pytest.approx(1.0, abs=0.1)
        assert ess == pytest.approx(20_000 / tau)

    def test_ar1(self):
        tau, _, _ = iact_ess(ar1(0.5, 50_000, 4))
        assert tau == pytest.approx(3.0, rel=0.15)

    def test_thirteen(self):
        # AR(1) with (1 + phi) / (1 - phi) = 13
        tau, ess, _ = iact_ess(ar1(6 / 7, 20_000, 5))
        assert 1200 <= ess <= 1800
        assert tau == pytest.approx(13, rel=0.2)

    @settings(max_examples=25)
    @given(st.integers(0, 10_000), st.floats(-0.5, 0.95))
    def test_ess_times_tau(self, seed, phi):
        x = ar1(phi, 2000, seed)
        tau, ess, L = iact_ess(x)
        assert ess * tau == pytest.approx(x.size, rel=1e-12)
        assert L >= 1

    def test_short(self):
        with pytest.raises(ValidationError):
            iact_ess(np.arange(50.0))


class TestGeweke:
    def test_equal_window_means(self):
        a = np.random.default_rng(6).standard_normal(100)
        x = np.concatenate([a, np.random.default_rng(7).standard_normal(400), np.tile(a, 5)])
        z, p = geweke(x)
        assert z == pytest.approx(0.0, abs=1e-12)
        assert p == pytest.approx(1.0, abs=1e-12)

    def test_mean_shift(self):
        x = np.random.default_rng(8).standard_normal(2000)
        x[1000:] += 5.0
        assert geweke(x)[1] < 0.001

    def test_iid_not_rejected_too_often(self):
        rng = np.random.default_rng(9)
        ps = [geweke(rng.standard_normal(1000))[1] for _ in range(200)]
        assert 0.01 <= np.mean(np.array(ps) < 0.05) <= 0.10

    def test_windows(self):
        with pytest.raises(ValidationError):
            geweke(np.random.default_rng(0).standard_normal(300))
        with pytest.raises(ValidationError):
            geweke(np.random.default_rng(0).standard_normal(3000), first=0.6, last=0.5)

    def test_constant(self):
        with pytest.raises(DegenerateChain):
            geweke(np.ones(1000))

    def test_spectral_variance_iid_and_ar1(self):
        # Bartlett estimator sd is about sqrt(4 L / 3 n) relative: 0.04 for L = 200, n = 2e5
        x = np.random.default_rng(10).standard_normal(200_000)
        assert spectral_variance(x, taper=0.001) == pytest.approx(1.0, rel=0.15)
        # long-run variance of AR(1) with unit innovations is 1 / (1 - phi)^2 = 4
        assert spectral_variance(ar1(0.5, 200_000, 11), taper=0.001) == pytest.approx(4.0, rel=0.15)


class TestMPSRF:
    def test_identical_chains(self):
        c = np.random.default_rng(12).standard_normal((500, 3))
        r = mpsrf(np.stack([c, c, c, c]))
        assert np.all(r.B == 0)
        assert r.R == pytest.approx(499 / 500, rel=1e-15)

    def test_iid_chains(self):
        X = np.random.default_rng(13).standard_normal((4, 10_000, 3))
        assert mpsrf(X).R < 1.01

    def test_separated(self):
        rng = np.random.default_rng(14)
        X = np.stack([rng.standard_normal((1000, 2)), 10 + rng.standard_normal((1000, 2))])
        assert mpsrf(X).R > 1.1

    def test_univariate_matches_psrf(self):
        # with d = 1, lambda1 = (B / M) / W, so R reduces to the classical PSRF form
        X = np.random.default_rng(15).standard_normal((3, 400)) + [[0.0], [0.2], [-0.1]]
        r = mpsrf(X)
        M, m = 400, 3
        W = np.mean(np.var(X, axis=1, ddof=1))
        B_over_M = np.var(X.mean(axis=1), ddof=1)
        assert r.R == pytest.approx((M - 1) / M + (m + 1) / m * B_over_M / W, rel=1e-12)

    def test_singular_within(self):
        X = np.zeros((2, 100, 2))
        X[:, :, 0] = np.random.default_rng(0).standard_normal((2, 100))
        with pytest.raises(DegenerateChain):
            mpsrf(X)

    def test_needs_two_chains(self):
        with pytest.raises(ValidationError):
            mpsrf(np.zeros((1, 10, 2)))

    @settings(max_examples=30)
    @given(st.integers(0, 10_000))
    def test_invariances(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((4, 200, 3)) + rng.standard_normal((4, 1, 3)) * 0.3
        r = mpsrf(X)
        assert r.R >= (200 - 1) / 200 - 1e-12
        perm = mpsrf(X[rng.permutation(4)])
        assert perm.R == pytest.approx(r.R, rel=1e-10)
        A = rng.standard_normal((3, 3)) + 3 * np.eye(3)
        Y = X @ A.T + rng.standard_normal(3) * 5
        assert mpsrf(Y).R == pytest.approx(r.R, rel=1e-8)


class TestReport:
    def test_single_chain_uses_subchains(self):
        X = np.random.default_rng(16).standard_normal((4000, 2))
        rep = diagnose(X, names=["a", "b"], subchains=4)
        assert rep.mpsrf_mode == "sub-chains"
        assert rep.mpsrf.m == 4 and rep.mpsrf.M == 1000
        assert [p.name for p in rep.parameters] == ["a", "b"]
        assert rep.parameters[0].ess == pytest.approx(4000 / rep.parameters[0].tau)

    def test_multi_chain(self):
        X = np.random.default_rng(17).standard_normal((3, 1000, 2))
        assert diagnose(X).mpsrf_mode == "multi-chain"

    def test_split(self):
        parts = split_subchains(np.arange(10.0), 3)
        assert parts.shape == (3, 3, 1)
        assert parts[2, 0, 0] == 6.0

    def test_names_length(self):
        with pytest.raises(ValidationError):
            diagnose(np.zeros((100, 2)), names=["a"])

    def test_to_dict_and_rows(self):
        rep = diagnose(np.random.default_rng(18).standard_normal((1000, 2)))
        d = rep.to_dict()
        assert d["n_samples"] == 1000 and d["mpsrf"]["mode"] == "sub-chains"
        assert len(rep.csv_rows()) == 2 and not math.isnan(rep.csv_rows()[0][3])
