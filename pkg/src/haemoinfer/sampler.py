"""Metropolis-Hastings, delayed rejection and adaptive Metropolis samplers.

Proposals, adaptation and the prior live in scaled coordinates
``x = theta / s``; the model is always evaluated at the unscaled theta. The
second-stage acceptance probability of delayed rejection uses jump densities
of the scaled coordinates. ``corrected=False`` reproduces the older variant
that plugs unscaled differences into the scaled covariance, which lets the
jump-density ratio blow up and accept very poor proposals.

Random numbers come from counter-based Philox streams keyed by (seed,
chain id) with the iteration and purpose in the counter, so a chain resumed
from its CSV continues exactly as if it had never stopped, and different
algorithms run with the same seed see the same first-stage draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ValidationError
from .stats import SENTINEL, ParamSpace

ALGORITHMS = ("mh", "dr", "am", "dram")
STAGES = ("init", "stage1", "stage2", "reject")

_PROP1, _ACC1, _PROP2, _ACC2, _GIBBS = range(5)


@dataclass(frozen=True)
class SamplerConfig:
    """Design parameters of a chain.

    ``burn_in_time`` defaults to ``t_ad``, ``s_d`` to ``2.4**2 / d`` and
    ``gamma2`` to the initial noise variance ``sigma2_0``.
    """

    iterations: int = 10000
    algorithm: str = "dram"
    beta: float = 0.3
    n_dr: int = 2
    t_ad: int = 1000
    burn_in_time: int | None = None
    burn_in_scale: float = 2.0
    s_d: float | None = None
    eps: float = 1e-10
    n_s: float = 1.0
    gamma2: float | None = None
    sigma2_0: float | None = None
    update_sigma2: bool = True
    corrected: bool = True
    seed: int = 0
    chain_id: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValidationError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if not 0 < self.beta < 1:
            raise ValidationError("beta must lie in (0, 1)")
        if self.n_dr not in (1, 2):
            raise ValidationError("only one or two delayed-rejection stages are supported")
        if self.t_ad < 1:
            raise ValidationError("t_ad must be >= 1")
        if not self.eps > 0:
            raise ValidationError("eps must be positive")
        if self.n_s < 0:
            raise ValidationError("n_s must be >= 0")
        if not self.burn_in_scale > 1:
            raise ValidationError("burn_in_scale must exceed 1")
        if not 0 <= self.seed < 2**64 or not 0 <= self.chain_id < 2**64:
            raise ValidationError("seed and chain_id must be unsigned 64-bit integers")

    @property
    def delayed_rejection(self) -> bool:
        return self.algorithm in ("dr", "dram") and self.n_dr == 2

    @property
    def adaptive(self) -> bool:
        return self.algorithm in ("am", "dram")

    @property
    def b_t(self) -> int:
        return self.t_ad if self.burn_in_time is None else self.burn_in_time


def _rng(config: SamplerConfig, k: int, purpose: int) -> np.random.Generator:
    key = (config.seed << 64) | config.chain_id
    return np.random.Generator(np.random.Philox(key=key, counter=[0, k, purpose, 0]))


# -- acceptance probabilities ----------------------------------------------

def log_target(S, S_pri, sigma2) -> float:
    """Unnormalised log posterior ``-(S / sigma2 + S_pri) / 2``."""
    if S >= SENTINEL:
        return -math.inf
    return -0.5 * (S / sigma2 + S_pri)


def mh_accept_prob(S_new, S_old, Spri_new, Spri_old, sigma2) -> float:
    """First-stage acceptance ``min(1, exp(-[(S* - S)/sigma2 + Spri* - Spri]/2))``."""
    if not sigma2 > 0:
        raise ValidationError("sigma2 must be positive")
    a = -0.5 * ((S_new - S_old) / sigma2 + Spri_new - Spri_old)
    return 1.0 if a >= 0 else math.exp(a)


def _alpha1_log(lp_to, lp_from) -> float:
    if lp_to == -math.inf:
        return 0.0
    a = lp_to - lp_from
    return 1.0 if a >= 0 else math.exp(a)


def _quad(L, delta) -> float:
    z = solve_triangular(L, delta, lower=True, check_finite=False)
    return float(z @ z)


def dr_accept_prob(lp_cur, lp_1, lp_2, x_cur, x_1, x_2, L, dx_scale=None) -> float:
    """Second-stage acceptance after rejecting the first proposal.

    ``lp_*`` are log targets of the current point, the rejected first
    proposal and the second proposal; ``x_*`` the points in the coordinates
    in which the proposals were drawn, with lower Cholesky factor ``L`` of
    the first-stage proposal covariance. The second-stage proposal is
    symmetric, so only the first-stage jump densities enter.

    ``dx_scale`` multiplies the coordinate differences before they meet
    ``L``; passing the scale vector reproduces the uncorrected variant.
    """
    if lp_2 == -math.inf:
        return 0.0
    a_21 = _alpha1_log(lp_1, lp_2)
    if a_21 >= 1.0:
        return 0.0
    a_c1 = _alpha1_log(lp_1, lp_cur)
    if a_c1 >= 1.0:  # cannot happen after a genuine first-stage rejection
        return 0.0
    d21 = np.asarray(x_1) - np.asarray(x_2)
    dc1 = np.asarray(x_1) - np.asarray(x_cur)
    if dx_scale is not None:
        d21 = d21 * dx_scale
        dc1 = dc1 * dx_scale
    log_q_ratio = -0.5 * (_quad(L, d21) - _quad(L, dc1))
    la = (lp_2 - lp_cur) + log_q_ratio + math.log1p(-a_21) - math.log1p(-a_c1)
    if la >= 0:
        return 1.0
    return math.exp(la)


def gibbs_sigma2(S, n, n_s, gamma2, rng) -> float:
    """Draw from Inv-Gamma((n_s + n)/2, (n_s gamma2 + S)/2)."""
    shape = 0.5 * (n_s + n)
    scale = 0.5 * (n_s * gamma2 + S)
    return scale / rng.gamma(shape)


# -- adaptation --------------------------------------------------------------

@dataclass
class RunningMoments:
    """Welford mean and scatter of the scaled chain."""

    n: int
    mean: np.ndarray
    scatter: np.ndarray

    @classmethod
    def empty(cls, d):
        return cls(0, np.zeros(d), np.zeros((d, d)))

    def push(self, x):
        self.n += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.n
        self.scatter = self.scatter + np.outer(delta, x - self.mean)

    def cov(self):
        if self.n < 2:
            return np.zeros_like(self.scatter)
        c = self.scatter / (self.n - 1)
        return 0.5 * (c + c.T)


def am_adapt(history: RunningMoments, k: int, config: SamplerConfig, V0, V_prev, d=None):
    """Proposal covariance for the step after iteration ``k``.

    Returns ``V_prev`` up to ``t_ad`` and during burn-in (the initial
    proposal, possibly rescaled), the jittered scaled sample covariance at
    iterations ``k = 1 mod t_ad`` afterwards, and ``V_prev`` otherwise.
    ``V0`` is accepted for signature symmetry with the non-adaptive case.
    """
    d = V0.shape[0] if d is None else d
    if k <= config.t_ad or k < config.b_t:
        return V_prev
    if k % config.t_ad == 1 or config.t_ad == 1:
        s_d = 2.4**2 / d if config.s_d is None else config.s_d
        return s_d * history.cov() + config.eps * np.eye(d)
    return V_prev


def _chol(V):
    try:
        return np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        raise ValidationError("proposal covariance is not positive definite") from None


class ProposalState:
    """Lower Cholesky factor of the current proposal plus adaptation bookkeeping."""

    def __init__(self, V0, config: SamplerConfig, x0):
        self.config = config
        self.V0 = np.asarray(V0, dtype=float)
        self.V = self.V0.copy()
        self.L = _chol(self.V0) if np.any(self.V0) else np.zeros_like(self.V0)
        self.d = self.V0.shape[0]
        self.moments = RunningMoments.empty(self.d)
        self.moments.push(np.asarray(x0, dtype=float))
        self.block = max(10, config.t_ad // 10)
        self.block_rejects = 0

    def observe(self, k, x_k, rejected: bool):
        """Record iteration ``k`` and update the proposal for iteration ``k + 1``."""
        cfg = self.config
        self.moments.push(x_k)
        if not cfg.adaptive:
            return
        if k < cfg.b_t:
            # burn-in: rescale the proposal on extreme rejection rates
            self.block_rejects += int(rejected)
            if k % self.block == 0:
                rate = self.block_rejects / self.block
                if rate > 0.95:
                    self.L = self.L / cfg.burn_in_scale
                elif rate < 0.05:
                    self.L = self.L * cfg.burn_in_scale
                self.V = self.L @ self.L.T
                self.block_rejects = 0
            return
        V = am_adapt(self.moments, k, cfg, self.V0, self.V, self.d)
        if V is not self.V:
            self.V = V
            self.L = _chol(V)


# -- chains ------------------------------------------------------------------

@dataclass(frozen=True)
class Chain:
    """Samples ``theta`` (unscaled, shape (M + 1, d)) with row 0 the start point."""

    names: tuple
    theta: np.ndarray
    sigma2: np.ndarray
    S: np.ndarray
    S_pri: np.ndarray
    stage: np.ndarray
    config: SamplerConfig = field(default_factory=SamplerConfig)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for key in ("theta", "sigma2", "S", "S_pri", "stage"):
            a = np.array(getattr(self, key))
            a.setflags(write=False)
            object.__setattr__(self, key, a)

    @property
    def iterations(self) -> int:
        return self.theta.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.theta.shape[1]

    def stage_counts(self) -> dict:
        return {s: int(np.sum(self.stage[1:] == s)) for s in STAGES[1:]}

    @property
    def acceptance_rate(self) -> float:
        if self.iterations == 0:
            return math.nan
        c = self.stage_counts()
        return (c["stage1"] + c["stage2"]) / self.iterations

    def stage_rates(self) -> dict:
        M = self.iterations
        return {k: (v / M if M else math.nan) for k, v in self.stage_counts().items()}

    def post_burn_in(self, fraction=0.1) -> np.ndarray:
        start = int(math.floor(fraction * self.theta.shape[0]))
        return self.theta[start:]


def proposal_from_hessian(H, sigma2, space: ParamSpace, s_d=None, eps=1e-10):
    """Laplace-approximation proposal ``s_d * 2 sigma2 H^-1`` in scaled coordinates.

    ``H`` is the Hessian of S in scaled coordinates. Falls back to the
    diagonal ``(0.01 (b - a))^2`` when H is unusable.
    """
    d = space.dim
    s_d = 2.4**2 / d if s_d is None else s_d
    fallback = np.diag((0.01 * (space.upper_s - space.lower_s)) ** 2)
    if H is None:
        return fallback, "diagonal fallback (no Hessian)"
    H = 0.5 * (np.asarray(H, dtype=float) + np.asarray(H, dtype=float).T)
    if not np.all(np.isfinite(H)):
        return fallback, "diagonal fallback (non-finite Hessian)"
    w, U = np.linalg.eigh(H)
    if w.max() <= 0:
        return fallback, "diagonal fallback (Hessian not positive)"
    w = np.maximum(w, w.max() * 1e-10)
    V = s_d * 2.0 * sigma2 * (U / w) @ U.T + eps * np.eye(d)
    V = 0.5 * (V + V.T)
    try:
        np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        return fallback, "diagonal fallback (covariance not positive definite)"
    return V, "hessian"


def _safe_eval(evaluator, theta) -> float:
    try:
        S = float(evaluator(theta))
    except Exception:
        return SENTINEL
    return S if math.isfinite(S) and S < SENTINEL else SENTINEL


def run_chain(evaluator: Callable[[np.ndarray], float], space: ParamSpace, config: SamplerConfig,
              theta0, n_obs: int, V0=None, S0: float | None = None, resume: Chain | None = None,
              callback=None) -> Chain:
    """Run ``config.iterations`` iterations of the configured algorithm.

    Parameters
    ----------
    evaluator : callable
        ``theta -> S`` (residual sum of squares). Failures and exceptions are
        mapped to the sentinel and never stop the chain.
    space : ParamSpace
        Bounds, scaling and prior.
    config : SamplerConfig
        Algorithm and design parameters.
    theta0 : array_like
        Start point inside the bounds, usually the optimum.
    n_obs : int
        Number of data points, for the noise-variance update.
    V0 : array_like, optional
        Initial proposal covariance in scaled coordinates (default the
        diagonal ``(0.01 (b - a))^2``).
    S0 : float, optional
        RSS at ``theta0`` if already known.
    resume : Chain, optional
        Earlier output of the same configuration; the run continues after
        its last row and the result equals an uninterrupted run.
    """
    theta0 = np.asarray(theta0, dtype=float)
    d = space.dim
    if theta0.shape != (d,):
        raise ValidationError(f"theta0 must have length {d}")
    if not space.in_bounds(theta0):
        raise ValidationError("theta0 lies outside the bounds")
    if n_obs < 1:
        raise ValidationError("n_obs must be >= 1")
    if V0 is None:
        V0 = np.diag((0.01 * (space.upper_s - space.lower_s)) ** 2)
    V0 = np.asarray(V0, dtype=float)
    if V0.shape != (d, d):
        raise ValidationError(f"V0 must be {d}x{d}")
    if S0 is None:
        S0 = _safe_eval(evaluator, theta0)
    if S0 >= SENTINEL:
        raise ValidationError("model cannot be evaluated at theta0")
    sigma2_0 = config.sigma2_0
    if sigma2_0 is None:
        sigma2_0 = S0 / (n_obs - d) if n_obs > d else S0 / n_obs
    if not sigma2_0 > 0:
        raise ValidationError("initial noise variance must be positive")
    gamma2 = sigma2_0 if config.gamma2 is None else config.gamma2
    s = space.scale_factors
    dx_scale = None if config.corrected else s

    M = config.iterations
    thetas = np.empty((M + 1, d))
    sig = np.empty(M + 1)
    Ss = np.empty(M + 1)
    Sp = np.empty(M + 1)
    stage = np.empty(M + 1, dtype=object)
    thetas[0], sig[0], Ss[0], Sp[0], stage[0] = theta0, sigma2_0, S0, space.prior_quadratic(theta0), "init"
    prop = ProposalState(V0, config, space.scale(theta0))

    k0 = 1
    if resume is not None:
        R = resume.iterations
        if resume.theta.shape[1] != d or not np.array_equal(resume.theta[0], theta0):
            raise ValidationError("resume chain does not match theta0")
        if R > M:
            raise ValidationError("resume chain is longer than the requested run")
        thetas[: R + 1] = resume.theta
        sig[: R + 1] = resume.sigma2
        Ss[: R + 1] = resume.S
        Sp[: R + 1] = resume.S_pri
        stage[: R + 1] = resume.stage
        for k in range(1, R + 1):  # replay adaptation bookkeeping
            prop.observe(k, space.scale(thetas[k]), stage[k] == "reject")
        k0 = R + 1

    theta = thetas[k0 - 1].copy()
    S, Spri, sigma2 = Ss[k0 - 1], Sp[k0 - 1], sig[k0 - 1]
    for k in range(k0, M + 1):
        x = space.scale(theta)
        L = prop.L
        lp_cur = log_target(S, Spri, sigma2)
        u = _rng(config, k, _PROP1).standard_normal(d)
        x1 = x + L @ u
        th1 = space.unscale(x1)
        inb1 = space.in_bounds(th1)
        if inb1:
            S1 = _safe_eval(evaluator, th1)
            Sp1 = space.prior_quadratic(th1)
            a1 = _alpha1_log(log_target(S1, Sp1, sigma2), lp_cur)
        else:
            S1, Sp1, a1 = SENTINEL, math.inf, 0.0
        tag = "reject"
        if _rng(config, k, _ACC1).random() < a1:
            theta, S, Spri, tag = th1, S1, Sp1, "stage1"
        elif config.delayed_rejection:
            u2 = _rng(config, k, _PROP2).standard_normal(d)
            x2 = x + config.beta * (L @ u2)
            th2 = space.unscale(x2)
            if space.in_bounds(th2):
                S2 = _safe_eval(evaluator, th2)
                Sp2 = space.prior_quadratic(th2)
                lp1 = log_target(S1, Sp1, sigma2) if inb1 else -math.inf
                lp2 = log_target(S2, Sp2, sigma2)
                a2 = dr_accept_prob(lp_cur, lp1, lp2, x, x1, x2, L, dx_scale)
                if _rng(config, k, _ACC2).random() < a2:
                    theta, S, Spri, tag = th2, S2, Sp2, "stage2"
        if config.update_sigma2:
            sigma2 = gibbs_sigma2(S, n_obs, config.n_s, gamma2, _rng(config, k, _GIBBS))
        thetas[k], sig[k], Ss[k], Sp[k], stage[k] = theta, sigma2, S, Spri, tag
        prop.observe(k, space.scale(theta), tag == "reject")
        if callback is not None:
            callback(k, theta, S, tag)

    return Chain(names=tuple(space.names), theta=thetas, sigma2=sig, S=Ss, S_pri=Sp,
                 stage=stage.astype(str), config=config,
                 meta={"sigma2_0": sigma2_0, "gamma2": gamma2, "n_obs": n_obs,
                       "V0": V0.tolist(), "final_V": prop.V.tolist()})
