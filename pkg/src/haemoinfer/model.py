"""The forward map m(theta): parameters to simulated MPA pressure."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidSimulation, ValidationError
from .network import NominalWindkessel, ThetaVector, VesselNetwork, apply_theta
from .solver import GridConfig, InflowWaveform, Waveforms, simulate
from .stats import SENTINEL, residual_sum_of_squares


@dataclass(frozen=True)
class ForwardModel:
    """Network, nominal Windkessel, inflow and grid bundled into m(theta).

    ``theta`` arrays follow ``PARAM_NAMES_5D`` or ``PARAM_NAMES_4D``
    depending on ``model_kind``.
    """

    network: VesselNetwork
    nominal: NominalWindkessel
    inflow: InflowWaveform
    grid: GridConfig = GridConfig()
    model_kind: str = "5D"

    def __post_init__(self):
        kind = self.model_kind.upper()
        if kind not in ("4D", "5D"):
            raise ValidationError(f"model_kind must be 4D or 5D, got {self.model_kind!r}")
        object.__setattr__(self, "model_kind", kind)

    @property
    def dim(self) -> int:
        return 5 if self.model_kind == "5D" else 4

    def theta_vector(self, theta) -> ThetaVector:
        return ThetaVector.from_array(np.asarray(theta, dtype=float), self.model_kind)

    def waveforms(self, theta, locations=None) -> Waveforms:
        tv = self.theta_vector(theta)
        net, wk = apply_theta(self.network, self.nominal, tv)
        return simulate(net, wk, self.inflow, self.grid, locations=locations)

    def pressure(self, theta, t=None) -> np.ndarray:
        """MPA midpoint pressure over one period, optionally resampled at ``t``."""
        w = self.waveforms(theta)
        p = w.p["mpa_mid"]
        if t is None:
            return p
        T = self.network.period
        return np.interp(np.mod(t, T), np.append(w.t, T), np.append(p, p[0]))

    def rss(self, theta, y, t=None) -> float:
        """Residual sum of squares, ``SENTINEL`` when the model cannot be evaluated."""
        try:
            m = self.pressure(theta, t)
        except (InvalidSimulation, ValidationError):
            return SENTINEL
        return residual_sum_of_squares(y, m)


@dataclass(frozen=True)
class RSSObjective:
    """Picklable ``theta -> S`` for a fixed measurement."""

    model: ForwardModel
    y: np.ndarray
    t: np.ndarray | None = None

    def __call__(self, theta) -> float:
        return self.model.rss(theta, self.y, self.t)

    def predict(self, theta):
        """Model output aligned with ``y``; ``None`` when the solve fails."""
        try:
            return self.model.pressure(theta, self.t)
        except (InvalidSimulation, ValidationError):
            return None
