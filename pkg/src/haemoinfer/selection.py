"""Information criteria for comparing fitted models.

Plug-in criteria (AIC, AICc, BIC) come from the optimised residual sum of
squares. Posterior criteria (DIC, WAIC, LOO-CV lppd) come from a thinned
posterior sample and per-point Gaussian log densities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidSimulation, ValidationError

LOG_2PI = math.log(2 * math.pi)

CRITERIA = ("AIC", "AICc", "BIC", "DIC", "WAIC", "lppd_LOO")
HIGHER_IS_BETTER = {"lppd_LOO"}

SIGMA2_CONVENTIONS = {
    "AIC": "plug-in S/(n-d)",
    "AICc": "plug-in S/(n-d)",
    "BIC": "plug-in S/(n-d)",
    "DIC": "posterior mean sigma2",
    "WAIC": "per-sample sigma2",
    "lppd_LOO": "per-sample sigma2",
}


def plugin_sigma2(S: float, n: int, d: int) -> float:
    if n <= d:
        raise ValidationError("need more data points than parameters")
    return S / (n - d)


def aicc_bic(S: float, sigma2: float, n: int, d: int) -> tuple[float, float, float]:
    """Return ``(AIC, AICc, BIC)`` for a Gaussian model with RSS ``S``."""
    if not sigma2 > 0:
        raise ValidationError("sigma2 must be positive")
    if n <= d + 1:
        raise ValidationError("AICc needs n > d + 1")
    base = S / sigma2 + n * math.log(sigma2) + n * LOG_2PI
    aic = base + 2 * d
    aicc = aic + 2 * d * (d + 1) / (n - d - 1)
    bic = base + d * math.log(n)
    return aic, aicc, bic


def pointwise_loglik(y, m, sigma2: float) -> np.ndarray:
    """``log N(y_i | m_i, sigma2)`` for every data point."""
    r = np.asarray(y, dtype=float) - np.asarray(m, dtype=float)
    return -0.5 * (LOG_2PI + math.log(sigma2)) - 0.5 * r * r / sigma2


def _mean(v: np.ndarray) -> float:
    # exact when every entry is equal, so a zero-spread chain gives p_DIC = 0
    return float(v[0]) if np.all(v == v[0]) else float(np.mean(v))


@dataclass
class DICResult:
    DIC: float
    p_DIC: float
    loglik_at_mean: float
    flags: list = field(default_factory=list)


def dic(samples, loglik: Callable[[np.ndarray], float]) -> DICResult:
    """Deviance information criterion.

    Parameters
    ----------
    samples : array_like, shape (S, d)
        Posterior draws.
    loglik : callable
        ``theta -> log p(y | theta)``; may raise ``InvalidSimulation``.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if X.shape[0] < 1:
        raise ValidationError("need posterior samples")
    theta_hat = X.mean(axis=0) if not np.all(X == X[0]) else X[0].copy()
    try:
        l_hat = float(loglik(theta_hat))
    except InvalidSimulation as exc:
        raise InvalidSimulation(
            f"the posterior mean {theta_hat.tolist()} cannot be simulated ({exc}); "
            "the posterior may be multimodal, so DIC is not meaningful here") from None
    ls = np.array([loglik(t) for t in X], dtype=float)
    p = 2.0 * (l_hat - _mean(ls))
    flags = ["p_DIC negative: posterior is far from log-concave"] if p < 0 else []
    return DICResult(DIC=-2.0 * l_hat + 2.0 * p, p_DIC=p, loglik_at_mean=l_hat, flags=flags)


@dataclass
class WAICResult:
    WAIC: float
    lppd: float
    p_WAIC: float


def waic(logp) -> WAICResult:
    """WAIC from a matrix of per-point log densities ``logp[s, i]``."""
    L = np.asarray(logp, dtype=float)
    if L.ndim != 2:
        raise ValidationError("logp must have shape (samples, points)")
    S = L.shape[0]
    if S < 2:
        raise ValidationError("WAIC needs at least 2 posterior samples")
    lppd = float(np.sum(logsumexp(L, axis=0) - math.log(S)))
    p = float(np.sum(np.var(L, axis=0, ddof=1)))
    return WAICResult(WAIC=-2.0 * lppd + 2.0 * p, lppd=lppd, p_WAIC=p)


@dataclass
class LOOResult:
    lppd_loo: float
    method: str  # "importance-sampling approximation" or "exact refit"
    flagged_points: list = field(default_factory=list)


def loo_lppd(logp, weight_limit: float = 0.5) -> LOOResult:
    """Leave-one-out lppd by importance sampling over the full posterior.

    Each held-out point uses weights proportional to ``1 / p(y_i | theta_s)``;
    points where a single normalised weight exceeds ``weight_limit`` are
    flagged as unreliable.
    """
    L = np.asarray(logp, dtype=float)
    if L.ndim != 2 or L.shape[0] < 1:
        raise ValidationError("logp must have shape (samples, points)")
    S = L.shape[0]
    neg = -L
    lse = logsumexp(neg, axis=0)
    per_point = math.log(S) - lse
    wmax = np.exp(neg.max(axis=0) - lse)
    flagged = np.flatnonzero(wmax > weight_limit).tolist()
    return LOOResult(float(np.sum(per_point)), "importance-sampling approximation", flagged)


def loo_lppd_exact(heldout_logp: Callable[[int], np.ndarray], n: int) -> LOOResult:
    """Exact leave-one-out lppd.

    ``heldout_logp(i)`` must return ``log p(y_i | theta_s)`` for draws
    ``theta_s`` from the posterior fitted without point ``i``.
    """
    total = 0.0
    for i in range(n):
        a = np.asarray(heldout_logp(i), dtype=float)
        total += float(logsumexp(a) - math.log(a.size))
    return LOOResult(total, "exact refit")


def thin_indices(total: int, count: int = 1000, burn_frac: float = 0.1) -> np.ndarray:
    """``count`` evenly spaced indices after dropping the first ``burn_frac``."""
    start = int(math.floor(burn_frac * total))
    avail = total - start
    if avail < 1:
        raise ValidationError("no samples left after burn-in")
    if avail <= count:
        return np.arange(start, total)
    return start + np.round(np.linspace(0, avail - 1, count)).astype(int)


@dataclass
class ScoreReport:
    model_tag: str
    n: int
    d: int
    S: float
    AIC: float
    AICc: float
    BIC: float
    DIC: float
    p_DIC: float
    lppd: float
    p_WAIC: float
    WAIC: float
    lppd_LOO: float
    loo_method: str = "importance-sampling approximation"
    flags: list = field(default_factory=list)
    sigma2_conventions: dict = field(default_factory=lambda: dict(SIGMA2_CONVENTIONS))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def score_model(model_tag: str, y, predict: Callable, S_opt: float, d: int,
                theta_samples, sigma2_samples, thin: int = 1000, burn_frac: float = 0.1) -> ScoreReport:
    """All six criteria for one fitted model.

    Parameters
    ----------
    predict : callable
        ``theta -> model output aligned with y``, or ``None`` when the
        forward solve fails.
    S_opt : float
        Optimised residual sum of squares.
    theta_samples, sigma2_samples
        Full chain (burn-in included); thinning happens here.
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    th = np.asarray(theta_samples, dtype=float)
    s2 = np.asarray(sigma2_samples, dtype=float)
    if th.shape[0] != s2.shape[0]:
        raise ValidationError("theta and sigma2 chains differ in length")
    aic, aicc, bic = aicc_bic(S_opt, plugin_sigma2(S_opt, n, d), n, d)

    idx = thin_indices(th.shape[0], thin, burn_frac)
    flags = []
    preds = []
    keep = []
    for i in idx:
        m = predict(th[i])
        if m is None:
            flags.append(f"sample {int(i)} could not be simulated and was skipped")
            continue
        preds.append(np.asarray(m, dtype=float))
        keep.append(i)
    if len(keep) < 2:
        raise InvalidSimulation("fewer than 2 posterior samples could be simulated")
    keep = np.array(keep)
    logp = np.stack([pointwise_loglik(y, m, s2[i]) for m, i in zip(preds, keep)])

    w = waic(logp)
    loo = loo_lppd(logp)
    if loo.flagged_points:
        flags.append(f"importance weights degenerate at {len(loo.flagged_points)} points")

    sigma2_bar = float(np.mean(s2[keep]))
    cache = {i: m for i, m in zip(keep.tolist(), preds)}
    rows = {tuple(th[i]): cache[i] for i in cache}

    def loglik(theta):
        m = rows.get(tuple(theta))
        if m is None:
            m = predict(theta)
            if m is None:
                raise InvalidSimulation("forward solve failed")
        return float(np.sum(pointwise_loglik(y, m, sigma2_bar)))

    dres = dic(th[keep], loglik)
    flags.extend(dres.flags)
    return ScoreReport(model_tag=model_tag, n=n, d=d, S=float(S_opt), AIC=aic, AICc=aicc, BIC=bic,
                       DIC=dres.DIC, p_DIC=dres.p_DIC, lppd=w.lppd, p_WAIC=w.p_WAIC, WAIC=w.WAIC,
                       lppd_LOO=loo.lppd_loo, loo_method=loo.method, flags=flags)


@dataclass
class Comparison:
    models: tuple
    rows: list  # dicts: criterion, value_a, value_b, delta, preferred
    disagreement: bool

    def to_dict(self) -> dict:
        return {"models": list(self.models), "rows": self.rows, "disagreement": self.disagreement}

    def table(self) -> str:
        a, b = self.models
        head = f"{'criterion':<10} {a:>16} {b:>16} {'delta(b-a)':>14}  preferred"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r['criterion']:<10} {r['value_a']:>16.4f} {r['value_b']:>16.4f} "
                         f"{r['delta']:>14.4f}  {r['preferred']}")
        if self.disagreement:
            lines.append("criteria disagree on the preferred model")
        return "\n".join(lines)


def compare(a: ScoreReport, b: ScoreReport) -> Comparison:
    """Per-criterion deltas and preferred model (lower score wins; higher lppd wins)."""
    if a.n != b.n:
        raise ValidationError(f"reports are for different data sizes ({a.n} vs {b.n})")
    rows = []
    prefs = set()
    for c in CRITERIA:
        va, vb = getattr(a, c), getattr(b, c)
        delta = vb - va
        if delta == 0:
            pref = "tie"
        elif (delta < 0) != (c in HIGHER_IS_BETTER):
            pref = b.model_tag
        else:
            pref = a.model_tag
        prefs.add(pref)
        rows.append({"criterion": c, "value_a": va, "value_b": vb, "delta": delta, "preferred": pref})
    return Comparison((a.model_tag, b.model_tag), rows, len(prefs - {"tie"}) > 1)
