"""MH, DR, AM and DRAM building blocks and whole chains on analytic targets."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from haemoinfer.errors import ValidationError
from haemoinfer.sampler import (RunningMoments, SamplerConfig, am_adapt, dr_accept_prob, gibbs_sigma2,
                                log_target, mh_accept_prob, proposal_from_hessian, run_chain)
from haemoinfer.stats import SENTINEL, ParamSpace


def gaussian_rss(mean, prec):
    """``S(theta) = (theta - mean)' P (theta - mean)``: posterior N(mean, P^-1) at sigma2 = 1."""
    mean = np.asarray(mean, dtype=float)
    prec = np.asarray(prec, dtype=float)

    def S(theta):
        r = np.asarray(theta) - mean
        return float(r @ prec @ r)

    return S


def space(lower, upper, scale=None, names=None):
    lower = np.asarray(lower, dtype=float)
    names = names or tuple(f"p{i}" for i in range(lower.size))
    scale = np.ones(lower.size) if scale is None else scale
    return ParamSpace(names, lower, np.asarray(upper, dtype=float), np.asarray(scale, dtype=float))


class TestAcceptance:
    def test_equal_is_one(self):
        assert mh_accept_prob(3.0, 3.0, 0.5, 0.5, 0.7) == 1.0

    def test_two_sigma2_gives_inverse_e(self):
        s2 = 0.37
        assert mh_accept_prob(1.0 + 2 * s2, 1.0, 0, 0, s2) == pytest.approx(math.exp(-1), rel=1e-14)
        assert mh_accept_prob(1.0 + 2 * s2, 1.0, 0, 0, s2) == pytest.approx(0.3679, abs=5e-5)

    def test_sentinel(self):
        assert mh_accept_prob(SENTINEL, 1.0, 0, 0, 1.0) < 1e-300
        assert log_target(SENTINEL, 0.0, 1.0) == -math.inf

    def test_sigma2_positive(self):
        with pytest.raises(ValidationError):
            mh_accept_prob(1.0, 1.0, 0, 0, 0.0)

    @given(st.floats(0, 1e3), st.floats(0, 1e3), st.floats(1e-3, 1e3))
    def test_noninformative_reduction(self, S1, S0, s2):
        a = -0.5 * (S1 - S0) / s2
        assert mh_accept_prob(S1, S0, 0.0, 0.0, s2) == (1.0 if a >= 0 else math.exp(a))


def dr_reference(lp_x, lp_1, lp_2, x, y1, y2, V):
    """Second-stage acceptance written out with Gaussian densities."""
    def a1(lp_to, lp_from):
        return min(1.0, math.exp(lp_to - lp_from)) if lp_to > -math.inf else 0.0

    q = sps.multivariate_normal(cov=V)
    num = math.exp(lp_2) * q.pdf(y1 - y2) * (1 - a1(lp_1, lp_2))
    den = math.exp(lp_x) * q.pdf(y1 - x) * (1 - a1(lp_1, lp_x))
    if num == 0:
        return 0.0
    return min(1.0, num / den)


class TestDelayedRejection:
    L = np.linalg.cholesky(np.array([[0.5, 0.1], [0.1, 0.3]]))

    def test_zero_target_at_second_proposal(self):
        x = np.zeros(2)
        assert dr_accept_prob(-1.0, -3.0, -math.inf, x, x + 1, x - 1, self.L) == 0.0

    def test_guard_when_first_would_be_accepted_from_second(self):
        x = np.zeros(2)
        # lp_1 >= lp_2 means alpha1(y2 -> y1) = 1, so stage two must reject
        assert dr_accept_prob(-1.0, -2.0, -2.5, x, x + 1, x - 1, self.L) == 0.0

    @settings(max_examples=200)
    @given(st.floats(-5, 0), st.floats(-10, 0), st.floats(-10, 0),
           st.lists(st.floats(-2, 2), min_size=6, max_size=6))
    def test_matches_density_formula(self, lp_x, d1, d2, pts):
        lp_1 = lp_x + d1 - 1e-3  # stage one was rejected, so y1 is worse than x
        lp_2 = lp_1 + abs(d2) + 1e-3  # and y2 must beat y1 for a non-zero answer
        x, y1, y2 = (np.array(pts[i:i + 2]) for i in (0, 2, 4))
        V = self.L @ self.L.T
        got = dr_accept_prob(lp_x, lp_1, lp_2, x, y1, y2, self.L)
        assert got == pytest.approx(dr_reference(lp_x, lp_1, lp_2, x, y1, y2, V), rel=1e-9, abs=1e-300)

    def test_uncorrected_uses_raw_differences(self):
        x, y1, y2 = np.zeros(2), np.array([0.1, 0.0]), np.array([0.0, 0.05])
        s = np.array([10.0, 1.0])
        V = self.L @ self.L.T
        ref = dr_reference(-1.0, -4.0, -2.0, x * s, y1 * s, y2 * s, V)
        assert dr_accept_prob(-1.0, -4.0, -2.0, x, y1, y2, self.L, dx_scale=s) == pytest.approx(ref, rel=1e-9)


class TestGibbs:
    def test_mean(self):
        rng = np.random.default_rng(0)
        draws = np.array([gibbs_sigma2(2.0, 4, 1.0, 1.0, rng) for _ in range(1_000_000)])
        assert abs(draws.mean() - 1.0) < 0.01

    def test_prior_dominates(self):
        rng = np.random.default_rng(1)
        draws = [gibbs_sigma2(500.0, 10, 1e9, 0.25, rng) for _ in range(100)]
        assert np.allclose(draws, 0.25, rtol=1e-3)

    def test_reproducible(self):
        a = gibbs_sigma2(3.0, 10, 1.0, 0.5, np.random.default_rng(7))
        b = gibbs_sigma2(3.0, 10, 1.0, 0.5, np.random.default_rng(7))
        assert a == b

    def test_frozen_theta_marginal(self):
        # zero proposal keeps theta fixed, so sigma2 draws are i.i.d. Inv-Gamma
        S0, n, n_s, g2 = 7.0, 12, 1.0, 0.4
        sp = space([-1.0], [1.0])
        cfg = SamplerConfig(iterations=100_000, algorithm="mh", gamma2=g2, n_s=n_s, seed=3)
        ch = run_chain(lambda t: S0, sp, cfg, [0.0], n, V0=np.zeros((1, 1)))
        ref = sps.invgamma(a=(n_s + n) / 2, scale=(n_s * g2 + S0) / 2)
        assert sps.kstest(ch.sigma2[1:], ref.cdf).pvalue > 0.01


class TestAdaptation:
    cfg = SamplerConfig(t_ad=100)

    def _moments(self, xs):
        m = RunningMoments.empty(xs.shape[1])
        for x in xs:
            m.push(x)
        return m

    def test_before_t_ad_keeps_previous(self):
        V0 = np.eye(2)
        m = self._moments(np.random.default_rng(0).standard_normal((50, 2)))
        assert am_adapt(m, 100, self.cfg, V0, V0) is V0

    def test_s_d_five_dimensions(self):
        xs = np.random.default_rng(0).standard_normal((300, 5))
        V = am_adapt(self._moments(xs), 201, self.cfg, np.eye(5), np.eye(5))
        assert 2.4**2 / 5 == pytest.approx(1.152)
        assert np.allclose(V, 1.152 * np.cov(xs.T) + 1e-10 * np.eye(5), rtol=1e-12, atol=1e-14)

    def test_off_schedule_carries(self):
        xs = np.random.default_rng(0).standard_normal((300, 2))
        prev = np.diag([3.0, 4.0])
        assert am_adapt(self._moments(xs), 250, self.cfg, np.eye(2), prev) is prev

    def test_constant_history_gives_jitter(self):
        xs = np.tile([0.3, -0.2], (300, 1))
        V = am_adapt(self._moments(xs), 201, self.cfg, np.eye(2), np.eye(2))
        assert np.allclose(V, 1e-10 * np.eye(2), rtol=0, atol=1e-24)

    @given(st.integers(0, 1000))
    def test_running_moments_match_numpy(self, seed):
        xs = np.random.default_rng(seed).standard_normal((40, 3)) * [1, 10, 0.1]
        m = self._moments(xs)
        assert np.allclose(m.mean, xs.mean(0), rtol=1e-12, atol=1e-14)
        assert np.allclose(m.cov(), np.cov(xs.T), rtol=1e-10, atol=1e-14)


class TestProposalFromHessian:
    sp = ParamSpace.for_model("4D")

    def test_laplace_form(self):
        H = np.diag([4.0, 2.0, 1.0, 0.5])
        V, how = proposal_from_hessian(H, 0.3, self.sp)
        assert how == "hessian"
        assert np.allclose(V, 2.4**2 / 4 * 2 * 0.3 * np.linalg.inv(H) + 1e-10 * np.eye(4), rtol=1e-12)

    @pytest.mark.parametrize("H", [None, -np.eye(4), np.full((4, 4), np.nan)])
    def test_fallback(self, H):
        V, how = proposal_from_hessian(H, 0.3, self.sp)
        assert how.startswith("diagonal fallback")
        assert np.allclose(np.diag(V), (0.01 * (self.sp.upper_s - self.sp.lower_s)) ** 2)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"beta": 0.0}, {"beta": 1.0}, {"t_ad": 0}, {"eps": 0.0}, {"n_s": -1.0},
                                    {"algorithm": "hmc"}, {"iterations": -1}, {"n_dr": 3}])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            SamplerConfig(**kw)

    def test_defaults(self):
        c = SamplerConfig()
        assert (c.beta, c.t_ad, c.b_t, c.eps, c.n_s, c.burn_in_scale) == (0.3, 1000, 1000, 1e-10, 1.0, 2.0)


class TestChains:
    sp = space([-3.0, -3.0], [3.0, 3.0])
    S = staticmethod(gaussian_rss([0.2, -0.1], [[2.0, 0.6], [0.6, 1.0]]))

    def _run(self, algorithm="dram", iterations=2000, **kw):
        cfg = SamplerConfig(iterations=iterations, algorithm=algorithm, t_ad=200, update_sigma2=False,
                            sigma2_0=1.0, seed=kw.pop("seed", 4), **kw)
        return run_chain(self.S, self.sp, cfg, [0.0, 0.0], 100, V0=0.1 * np.eye(2))

    @pytest.mark.parametrize("algorithm", ["mh", "dr"])
    def test_zero_proposal_is_constant(self, algorithm):
        # the adaptive samplers add eps I after t_ad, so only these two stay put forever
        cfg = SamplerConfig(iterations=300, algorithm=algorithm, seed=1)
        ch = run_chain(self.S, self.sp, cfg, [0.5, 0.5], 100, V0=np.zeros((2, 2)))
        assert np.all(ch.theta == [0.5, 0.5])

    def test_deterministic(self):
        a, b = self._run(), self._run()
        assert np.array_equal(a.theta, b.theta) and np.array_equal(a.stage, b.stage)

    @pytest.mark.parametrize("algorithm", ["mh", "dr", "am", "dram"])
    def test_resume_equals_uninterrupted(self, algorithm):
        full = self._run(algorithm, 900)
        half = self._run(algorithm, 400)
        cfg = SamplerConfig(iterations=900, algorithm=algorithm, t_ad=200, update_sigma2=False,
                            sigma2_0=1.0, seed=4)
        resumed = run_chain(self.S, self.sp, cfg, [0.0, 0.0], 100, V0=0.1 * np.eye(2), resume=half)
        assert np.array_equal(resumed.theta, full.theta)
        assert np.array_equal(resumed.stage, full.stage)

    def test_stays_in_bounds(self):
        # target piled up against the upper bound of p0
        S = gaussian_rss([2.9, 0.0], np.eye(2))
        cfg = SamplerConfig(iterations=3000, algorithm="dram", t_ad=300, seed=2)
        ch = run_chain(S, self.sp, cfg, [2.5, 0.0], 50, V0=0.5 * np.eye(2))
        assert np.all(ch.theta >= self.sp.lower) and np.all(ch.theta <= self.sp.upper)

    def test_evaluator_errors_never_stop_the_chain(self):
        def S(theta):
            if theta[0] > 0.3:
                raise RuntimeError("solver blew up")
            return float(theta @ theta)

        cfg = SamplerConfig(iterations=500, algorithm="dram", t_ad=100, seed=3)
        ch = run_chain(S, self.sp, cfg, [0.1, 0.1], 50, V0=0.2 * np.eye(2))
        assert ch.iterations == 500
        assert np.all(ch.theta[:, 0] <= 0.3)

    def test_stored_S_is_recomputable(self):
        ch = self._run(iterations=300)
        assert all(ch.S[k] == self.S(ch.theta[k]) for k in range(0, 301, 17))

    def test_burn_in_shrinks_proposal_on_rejection(self):
        # everything but the start is invalid, so every block rejects all proposals
        def S(theta):
            return 1.0 if np.all(theta == 0) else SENTINEL

        cfg = SamplerConfig(iterations=100, algorithm="am", t_ad=200, seed=1)
        ch = run_chain(S, self.sp, cfg, [0.0, 0.0], 50, V0=np.eye(2))
        # blocks of t_ad / 10 = 20 iterations, each halving the factor
        assert np.allclose(ch.meta["final_V"], np.eye(2) / 4**5, rtol=1e-15)

    def test_stage_rates(self):
        ch = self._run("dram", 1000)
        r = ch.stage_rates()
        assert r["stage1"] + r["stage2"] + r["reject"] == pytest.approx(1.0)
        assert ch.acceptance_rate == pytest.approx(r["stage1"] + r["stage2"])
        assert self._run("am", 1000).stage_counts()["stage2"] == 0

    def test_start_checks(self):
        cfg = SamplerConfig(iterations=10)
        with pytest.raises(ValidationError):
            run_chain(self.S, self.sp, cfg, [5.0, 0.0], 10)
        with pytest.raises(ValidationError):
            run_chain(lambda t: SENTINEL, self.sp, cfg, [0.0, 0.0], 10)

    def test_same_seed_shares_first_stage_draws(self):
        # MH and DR consume the same first-stage stream, so they agree up to the first DR acceptance
        mh, dr = self._run("mh", 500), self._run("dr", 500)
        k = np.argmax(dr.stage == "stage2")
        assert k > 0
        assert np.array_equal(mh.theta[:k], dr.theta[:k])


class TestScaling:
    """Chains in scaled and unscaled coordinates make the same decisions."""

    s = np.array([1e4, 1.0])
    mean = np.array([2.5e4, 0.3])
    prec = np.diag([1 / 4e3**2, 1 / 0.2**2])

    def _pair(self, corrected=True, algorithm="dr"):
        S = gaussian_rss(self.mean, self.prec)
        lo, hi = np.array([1e4, -1.0]), np.array([6e4, 2.0])
        scaled, plain = space(lo, hi, self.s), space(lo, hi)
        # a poorly sized first stage gives plenty of second-stage decisions
        V0s = np.diag([1.5, 0.8]) ** 2
        V0u = np.diag(self.s) @ V0s @ np.diag(self.s)
        cfg = SamplerConfig(iterations=3000, algorithm=algorithm, update_sigma2=False, sigma2_0=1.0,
                            seed=9, corrected=corrected)
        a = run_chain(S, scaled, cfg, self.mean, 100, V0=V0s)
        b = run_chain(S, plain, cfg, self.mean, 100, V0=V0u)
        return a, b

    @pytest.mark.parametrize("algorithm", ["dr", "dram"])
    def test_equivariant_decisions(self, algorithm):
        a, b = self._pair(algorithm=algorithm)
        assert np.sum(a.stage == "stage2") > 50
        assert np.array_equal(a.stage, b.stage)
        assert np.allclose(a.theta, b.theta, rtol=1e-9)

    def test_uncorrected_differs(self):
        a, _ = self._pair(corrected=True)
        u, _ = self._pair(corrected=False)
        assert not np.array_equal(a.stage, u.stage)


def test_dr_detailed_balance_on_1d_toy():
    """Transition counts between bins are symmetric for the non-adaptive DR kernel."""
    sp = space([-4.0], [4.0])
    cfg = SamplerConfig(iterations=60_000, algorithm="dr", update_sigma2=False, sigma2_0=1.0, seed=12)
    ch = run_chain(lambda t: float(t[0] ** 2), sp, cfg, [0.0], 10, V0=np.array([[4.0]]))
    edges = np.array([-1.5, -0.5, 0.5, 1.5])
    b = np.digitize(ch.theta[:, 0], edges)
    N = np.zeros((5, 5))
    np.add.at(N, (b[:-1], b[1:]), 1)
    for i in range(5):
        for j in range(i + 1, 5):
            n = N[i, j] + N[j, i]
            if n >= 50:
                # under reversibility N_ij ~ Binomial(n, 1/2) given n
                assert abs(N[i, j] - N[j, i]) <= 4 * math.sqrt(n)
