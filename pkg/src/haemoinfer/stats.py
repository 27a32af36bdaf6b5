"""Statistical model shared by the optimizer and the samplers.

Measured MPA pressure is modelled as ``y_i = m_i(theta) + e_i`` with i.i.d.
Gaussian errors. Everything downstream works with the residual sum of
squares ``S``, a quadratic prior term ``S_pri`` and a diagonal rescaling of
the parameters that brings them to a common order of magnitude.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSimulation, ValidationError
from .network import PARAM_NAMES_4D, PARAM_NAMES_5D, THETA_BOUNDS

SENTINEL = 1.0e10
DEFAULT_SCALE = {"f": 1.0e5, "r1": 1.0, "r2": 1.0, "c": 1.0, "xi": 1.0}


def residual_sum_of_squares(y, m) -> float:
    """Sum of squared residuals, or the sentinel if the model failed.

    ``m`` may be an array of model predictions, ``None`` or an
    :class:`InvalidSimulation` instance; the latter two give ``SENTINEL``.
    """
    if m is None or isinstance(m, InvalidSimulation):
        return SENTINEL
    y = np.asarray(y, dtype=float)
    m = np.asarray(m, dtype=float)
    if y.shape != m.shape:
        raise ValidationError(f"length mismatch: data {y.shape} vs model {m.shape}")
    if not np.all(np.isfinite(m)):
        return SENTINEL
    r = y - m
    return float(r @ r)


def log_likelihood(S, sigma2, n) -> float:
    """Gaussian log likelihood ``-n log sqrt(2 pi sigma2) - S / (2 sigma2)``."""
    if not sigma2 > 0:
        raise ValidationError("sigma2 must be positive")
    return -0.5 * n * math.log(2.0 * math.pi * sigma2) - S / (2.0 * sigma2)


def prior_quadratic(theta, mu, t2, noninformative=False) -> float:
    """``sum_j (theta_j - mu_j)^2 / t_j^2``; zero for a noninformative prior."""
    if noninformative:
        return 0.0
    theta = np.asarray(theta, dtype=float)
    mu = np.asarray(mu, dtype=float)
    t2 = np.asarray(t2, dtype=float)
    if not theta.shape == mu.shape == t2.shape:
        raise ValidationError("theta, mu and t2 must have equal shapes")
    d = theta - mu
    return float(np.sum(d * d / t2))


def log_jacobian(s) -> float:
    """Log determinant of the map ``theta = theta_s * s``.

    Constant in theta, so it cancels from every acceptance ratio when s is
    fixed; kept for completeness.
    """
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise ValidationError("scale factors must be positive")
    return float(np.sum(np.log(s)))


@dataclass(frozen=True)
class ParamSpace:
    """Names, bounds, scaling and prior of the free parameter vector.

    The prior is an independent Gaussian truncated to the box. Scaling and
    prior are both diagonal, so ``prior_quadratic`` gives the same value in
    scaled and unscaled coordinates.
    """

    names: tuple
    lower: np.ndarray
    upper: np.ndarray
    scale_factors: np.ndarray
    prior_mean: np.ndarray | None = None
    prior_var: np.ndarray | None = None
    noninformative: bool = True
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        d = len(self.names)
        for key in ("lower", "upper", "scale_factors"):
            arr = np.asarray(getattr(self, key), dtype=float)
            if arr.shape != (d,):
                raise ValidationError(f"{key} must have length {d}")
            object.__setattr__(self, key, arr)
        if np.any(self.lower >= self.upper):
            bad = [n for n, a, b in zip(self.names, self.lower, self.upper) if a >= b]
            raise ValidationError(f"need lower < upper for {bad}")
        if np.any(self.scale_factors <= 0):
            raise ValidationError("scale factors must be positive")
        if not self.noninformative:
            if self.prior_mean is None or self.prior_var is None:
                raise ValidationError("informative prior needs prior_mean and prior_var")
            mu = np.asarray(self.prior_mean, dtype=float)
            t2 = np.asarray(self.prior_var, dtype=float)
            if mu.shape != (d,) or t2.shape != (d,) or np.any(t2 <= 0):
                raise ValidationError("prior_mean/prior_var must have length d and positive variances")
            object.__setattr__(self, "prior_mean", mu)
            object.__setattr__(self, "prior_var", t2)

    @classmethod
    def for_model(cls, model_kind="5D", scale=None, bounds=None, prior_mean=None, prior_var=None):
        names = PARAM_NAMES_5D if model_kind.upper() == "5D" else PARAM_NAMES_4D
        b = dict(THETA_BOUNDS)
        if bounds:
            b.update(bounds)
        s = [DEFAULT_SCALE[n] for n in names] if scale is None else scale
        informative = prior_mean is not None or prior_var is not None
        return cls(
            names=tuple(names),
            lower=np.array([b[n][0] for n in names], dtype=float),
            upper=np.array([b[n][1] for n in names], dtype=float),
            scale_factors=np.asarray(s, dtype=float),
            prior_mean=None if prior_mean is None else np.asarray(prior_mean, dtype=float),
            prior_var=None if prior_var is None else np.asarray(prior_var, dtype=float),
            noninformative=not informative,
        )

    @property
    def dim(self) -> int:
        return len(self.names)

    def scale(self, theta):
        return np.asarray(theta, dtype=float) / self.scale_factors

    def unscale(self, theta_s):
        return np.asarray(theta_s, dtype=float) * self.scale_factors

    @property
    def lower_s(self):
        return self.lower / self.scale_factors

    @property
    def upper_s(self):
        return self.upper / self.scale_factors

    def in_bounds(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))

    def prior_quadratic(self, theta) -> float:
        if self.noninformative:
            return 0.0
        return prior_quadratic(theta, self.prior_mean, self.prior_var)

    def log_jacobian(self) -> float:
        return log_jacobian(self.scale_factors)


@dataclass(frozen=True)
class Measurement:
    """Pressure series ``y`` (mmHg) at times ``t`` over one period."""

    t: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if y.ndim != 1 or y.size < 2 or t.shape != y.shape:
            raise ValidationError("measurement needs matching 1D t and y with n >= 2")
        if not np.all(np.isfinite(y)):
            raise ValidationError("measurement contains non-finite values")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.size
