"""Convergence diagnostics for MCMC output.

Autocorrelation, integrated autocorrelation time and effective sample size
per parameter, the Geweke sub-chain mean test, and the multivariate potential
scale reduction factor over several chains (or sub-chains of one chain).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.stats import norm

from .errors import DegenerateChain, ValidationError


def _column(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValidationError("expected a 1D chain column")
    return x


def _centred(x: np.ndarray) -> tuple[np.ndarray, float]:
    c = x - x.mean()
    ss = float(c @ c)
    if not ss > 0:
        raise DegenerateChain("autocorrelation is undefined for a constant chain")
    return c, ss


def autocorr(x, lag: int) -> float:
    """Lag-``lag`` autocorrelation with the truncated-sum numerator.

    ``rho_l = sum_{k<M-l} c_k c_{k+l} / sum_k c_k^2`` where ``c`` is the
    centred chain.
    """
    x = _column(x)
    if not 0 <= lag < x.size:
        raise ValidationError(f"lag must lie in [0, {x.size})")
    c, ss = _centred(x)
    if lag == 0:
        return 1.0
    return float(c[:-lag] @ c[lag:]) / ss


def autocorr_spectrum(x, max_lag: int | None = None) -> np.ndarray:
    """``rho_0 .. rho_max_lag`` computed by FFT (same normalisation as ``autocorr``)."""
    x = _column(x)
    M = x.size
    max_lag = M - 1 if max_lag is None else min(int(max_lag), M - 1)
    c, ss = _centred(x)
    nfft = 1 << (2 * M - 1).bit_length()
    f = np.fft.rfft(c, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[: max_lag + 1]
    rho = acov / ss
    rho[0] = 1.0
    return np.clip(rho, -1.0, 1.0)


def iact_ess(x) -> tuple[float, float, int]:
    """Integrated autocorrelation time, effective sample size and cutoff lag.

    The sum ``tau = 1 + 2 sum_{l=1}^{L} rho_l`` is truncated by Geyer's
    initial positive sequence rule: consecutive pair sums
    ``rho_{2k} + rho_{2k+1}`` are accumulated while they stay positive.

    Returns
    -------
    tau, ess, L
        ``ess = M / tau``.
    """
    x = _column(x)
    M = x.size
    if M < 100:
        raise ValidationError("need at least 100 samples for the IACT")
    rho = autocorr_spectrum(x)
    total = 0.0
    L = 0
    for k in range(0, (M - 1) // 2):
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair <= 0:
            break
        total += pair
        L = 2 * k + 1
    # sum_{k} (rho_2k + rho_2k+1) counts rho_0 = 1 once
    tau = max(2.0 * total - 1.0, 1e-12)
    return float(tau), float(M / tau), L


def spectral_variance(x, taper: float = 0.04) -> float:
    """Spectral density at zero by a Bartlett lag window of width ``taper * n``."""
    x = _column(x)
    n = x.size
    c = x - x.mean()
    L = max(1, int(math.ceil(taper * n)))
    s0 = float(c @ c) / n
    for l in range(1, min(L, n - 1) + 1):
        s0 += 2.0 * (1.0 - l / (L + 1)) * float(c[:-l] @ c[l:]) / n
    return s0


def geweke(x, first: float = 0.1, last: float = 0.5, taper: float = 0.04) -> tuple[float, float]:
    """Geweke z-score comparing the means of the early and late windows.

    Returns ``(z, p)`` with a two-sided normal p-value.
    """
    x = _column(x)
    if not (0 < first < 1 and 0 < last < 1 and first + last <= 1):
        raise ValidationError("window fractions must be in (0, 1) and sum to at most 1")
    na = int(first * x.size)
    nb = int(last * x.size)
    if na < 50 or nb < 50:
        raise ValidationError("both Geweke windows need at least 50 samples")
    a = x[:na]
    b = x[x.size - nb:]
    va = spectral_variance(a, taper) / na
    vb = spectral_variance(b, taper) / nb
    if not va + vb > 0:
        raise DegenerateChain("Geweke variance is zero; the chain windows are constant")
    z = (a.mean() - b.mean()) / math.sqrt(va + vb)
    return float(z), float(2.0 * norm.sf(abs(z)))


@dataclass
class MPSRFResult:
    R: float
    W: np.ndarray
    B: np.ndarray
    lambda1: float
    m: int
    M: int


def mpsrf(chains) -> MPSRFResult:
    """Multivariate potential scale reduction factor.

    Parameters
    ----------
    chains : array_like, shape (m, M, d) or (m, M)
        ``m >= 2`` chains of equal length.

    Notes
    -----
    ``W`` and ``B`` are the within- and between-chain matrices, with ``B``
    carrying the factor ``M``. ``lambda1`` is the largest eigenvalue of
    ``W^{-1} B / M`` and ``R = (M-1)/M + (m+1)/m * lambda1``.
    """
    X = np.asarray(chains, dtype=float)
    if X.ndim == 2:
        X = X[:, :, None]
    if X.ndim != 3:
        raise ValidationError("chains must have shape (m, M, d)")
    m, M, d = X.shape
    if m < 2 or M < 2 or d < 1:
        raise ValidationError("need at least 2 chains of at least 2 samples")
    means = X.mean(axis=1)
    dev = X - means[:, None, :]
    W = np.einsum("ikp,ikq->pq", dev, dev) / (m * (M - 1))
    dm = means - means.mean(axis=0)
    B = M * (dm.T @ dm) / (m - 1)
    try:
        lam = scipy.linalg.eigh(B / M, W, eigvals_only=True)
    except (np.linalg.LinAlgError, ValueError):
        raise DegenerateChain("within-chain covariance is singular; run longer chains") from None
    lambda1 = max(0.0, float(lam[-1]))
    R = (M - 1) / M + (m + 1) / m * lambda1
    return MPSRFResult(R=float(R), W=W, B=B, lambda1=lambda1, m=m, M=M)


def split_subchains(samples, m: int) -> np.ndarray:
    """Cut one chain ``(M, d)`` into ``m`` contiguous sub-chains of equal length."""
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if m < 2:
        raise ValidationError("need at least 2 sub-chains")
    n = X.shape[0] // m
    if n < 2:
        raise ValidationError("chain too short to split")
    return X[: n * m].reshape(m, n, X.shape[1])


@dataclass
class ParameterDiagnostics:
    name: str
    mean: float
    sd: float
    tau: float
    ess: float
    cutoff: int
    geweke_z: float
    geweke_p: float
    rho: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class DiagnosticsReport:
    parameters: list
    n_samples: int
    mpsrf: MPSRFResult | None = None
    mpsrf_mode: str | None = None  # "multi-chain" or "sub-chains"
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {
            "n_samples": self.n_samples,
            "parameters": [p.to_dict() for p in self.parameters],
            "notes": list(self.notes),
            "mpsrf": None,
        }
        if self.mpsrf is not None:
            r = self.mpsrf
            out["mpsrf"] = {"mode": self.mpsrf_mode, "R": r.R, "lambda1": r.lambda1, "m": r.m,
                            "M": r.M, "W": r.W, "B": r.B}
        return out

    CSV_COLUMNS = ("parameter", "mean", "sd", "tau", "ess", "cutoff", "geweke_z", "geweke_p")

    def csv_rows(self):
        return [[p.name, p.mean, p.sd, p.tau, p.ess, p.cutoff, p.geweke_z, p.geweke_p]
                for p in self.parameters]


def _nan_if(fn, *args):
    try:
        return fn(*args)
    except ValidationError:
        return None


def diagnose(chains, names=None, subchains: int = 4) -> DiagnosticsReport:
    """Run every diagnostic.

    ``chains`` is either one chain ``(M, d)`` or several ``(m, M, d)``. Per
    parameter statistics use the pooled samples of the first chain; the MPSRF
    uses the given chains, or ``subchains`` contiguous pieces of a single
    chain, and the report records which.
    """
    X = np.asarray(chains, dtype=float)
    if X.ndim == 2:
        X = X[None]
        mode = "sub-chains"
    elif X.ndim == 3:
        mode = "multi-chain" if X.shape[0] > 1 else "sub-chains"
    else:
        raise ValidationError("chains must have shape (M, d) or (m, M, d)")
    m, M, d = X.shape
    names = list(names) if names is not None else [f"theta_{j + 1}" for j in range(d)]
    if len(names) != d:
        raise ValidationError("one name per parameter required")
    notes = []
    params = []
    first = X[0]
    for j, name in enumerate(names):
        col = first[:, j]
        r = _nan_if(iact_ess, col)
        gz = _nan_if(geweke, col)
        if r is None:
            notes.append(f"{name}: IACT/ESS skipped (constant chain or fewer than 100 samples)")
            tau = ess = math.nan
            cutoff = 0
            rho = []
        else:
            tau, ess, cutoff = r
            rho = autocorr_spectrum(col, cutoff).tolist()
        if gz is None:
            notes.append(f"{name}: Geweke skipped (windows too short or constant)")
            gz = (math.nan, math.nan)
        params.append(ParameterDiagnostics(name, float(col.mean()), float(col.std(ddof=1)) if M > 1 else math.nan,
                                           tau, ess, cutoff, gz[0], gz[1], rho))
    res = None
    try:
        res = mpsrf(X if mode == "multi-chain" else split_subchains(first, subchains))
    except ValidationError as exc:
        notes.append(f"MPSRF skipped: {exc}")
        mode = None
    return DiagnosticsReport(params, M, res, mode, notes)
