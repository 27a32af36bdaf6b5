"""Vessel network description and the five-parameter reduction.

The network is a rooted binary tree of elastic vessels. Each terminal vessel
carries a three-element Windkessel. Nominal Windkessel values come from
global haemodynamic measurements; the free parameters (f, r1, r2, c, xi)
rescale them and set the taper of the large arteries.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InvalidParameter, ValidationError

MMHG_TO_CGS = 1333.22  # 1 mmHg in g/(cm s^2)

PARAM_NAMES_5D = ("f", "r1", "r2", "c", "xi")
PARAM_NAMES_4D = ("f", "r1", "r2", "c")

THETA_BOUNDS = {
    "f": (1.0e4, 1.0e6),
    "r1": (-3.0, 2.5),
    "r2": (-3.0, 2.5),
    "c": (-3.0, 2.5),
    "xi": (0.0, 0.5),
}


@dataclass(frozen=True)
class Vessel:
    id: int
    length: float  # cm
    r_top: float  # inlet radius, cm
    r_bottom: float  # outlet radius, cm
    parent: int | None = None
    daughters: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.length > 0:
            raise ValidationError(f"vessel {self.id}: length must be > 0, got {self.length}")
        if not self.r_top > 0:
            raise ValidationError(f"vessel {self.id}: r_top must be > 0, got {self.r_top}")
        if not 0 < self.r_bottom <= self.r_top:
            raise ValidationError(
                f"vessel {self.id}: need 0 < r_bottom <= r_top, got {self.r_bottom} vs {self.r_top}"
            )
        if len(self.daughters) not in (0, 2):
            raise ValidationError(f"vessel {self.id}: must have 0 or 2 daughters, got {len(self.daughters)}")

    @property
    def is_terminal(self) -> bool:
        return not self.daughters

    @property
    def outlet_area(self) -> float:
        return math.pi * self.r_bottom**2


@dataclass(frozen=True)
class VesselNetwork:
    """Rooted binary tree of vessels plus blood properties.

    ``stiffness`` is the network-wide wall stiffness f in mmHg; it is unset on
    a freshly loaded network and filled in by :func:`apply_theta`.
    """

    vessels: tuple[Vessel, ...]
    root: int
    rho: float = 1.055  # g/ml
    mu: float = 0.049  # g/(cm s)
    period: float = 1.0  # s
    p0: float = 0.0  # mmHg, unstressed pressure of the wall law and Windkessel reference
    stiffness: float | None = None

    def __post_init__(self):
        if not (self.rho > 0 and self.mu >= 0 and self.period > 0):
            raise ValidationError("rho and period must be positive, mu non-negative")
        ids = [v.id for v in self.vessels]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate vessel ids")
        by_id = {v.id: v for v in self.vessels}
        if self.root not in by_id:
            raise ValidationError(f"root {self.root} is not a vessel id")
        if by_id[self.root].parent is not None:
            raise ValidationError("root vessel must not have a parent")
        roots = [v.id for v in self.vessels if v.parent is None]
        if roots != [self.root]:
            raise ValidationError(f"expected exactly one root, found {roots}")
        for v in self.vessels:
            for d in v.daughters:
                if d not in by_id:
                    raise ValidationError(f"vessel {v.id}: unknown daughter {d}")
                if by_id[d].parent != v.id:
                    raise ValidationError(f"vessel {d}: parent link does not point back to {v.id}")
        # every vessel reachable from the root exactly once
        seen = set()
        stack = [self.root]
        while stack:
            vid = stack.pop()
            if vid in seen:
                raise ValidationError("connectivity contains a cycle")
            seen.add(vid)
            stack.extend(by_id[vid].daughters)
        if seen != set(ids):
            raise ValidationError(f"vessels not connected to the root: {sorted(set(ids) - seen)}")

    def vessel(self, vid: int) -> Vessel:
        for v in self.vessels:
            if v.id == vid:
                return v
        raise KeyError(vid)

    @property
    def terminals(self) -> list[Vessel]:
        return [v for v in self.vessels if v.is_terminal]

    def order(self) -> list[Vessel]:
        """Vessels in breadth-first order from the root."""
        out, queue = [], [self.root]
        while queue:
            v = self.vessel(queue.pop(0))
            out.append(v)
            queue.extend(v.daughters)
        return out


@dataclass(frozen=True)
class WindkesselParams:
    """Per-terminal R1, R2 (mmHg s/ml) and C (ml/mmHg), keyed by vessel id."""

    R1: dict[int, float]
    R2: dict[int, float]
    C: dict[int, float]

    def __post_init__(self):
        for name in ("R1", "R2", "C"):
            for vid, val in getattr(self, name).items():
                if not val > 0:
                    raise InvalidParameter(f"{name} of terminal {vid} is not positive ({val:g})")


@dataclass(frozen=True)
class NominalWindkessel:
    R01: dict[int, float]
    R02: dict[int, float]
    C0: dict[int, float]
    total_resistance: float
    total_compliance: float


@dataclass(frozen=True)
class ThetaVector:
    f: float
    r1: float
    r2: float
    c: float
    xi: float = 0.0
    model_kind: str = "5D"

    def __post_init__(self):
        if self.model_kind not in ("4D", "5D"):
            raise ValidationError(f"model_kind must be '4D' or '5D', got {self.model_kind!r}")
        if self.model_kind == "4D" and self.xi != 0.0:
            raise ValidationError("4D model has xi fixed to 0")

    @property
    def names(self):
        return PARAM_NAMES_5D if self.model_kind == "5D" else PARAM_NAMES_4D

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in self.names], dtype=float)

    @classmethod
    def from_array(cls, values, model_kind: str | None = None) -> "ThetaVector":
        values = [float(v) for v in values]
        if model_kind is None:
            model_kind = "5D" if len(values) == 5 else "4D"
        expected = 5 if model_kind == "5D" else 4
        if len(values) != expected:
            raise ValidationError(f"{model_kind} theta needs {expected} values, got {len(values)}")
        return cls(*values, model_kind=model_kind)

    def out_of_bounds(self) -> list[str]:
        bad = []
        for n in self.names:
            lo, hi = THETA_BOUNDS[n]
            if not lo <= getattr(self, n) <= hi:
                bad.append(n)
        return bad


def estimate_nominal_windkessel(mean_pressure, mean_flow, terminals, decay_t=None, decay_p=None,
                                total_compliance=None) -> NominalWindkessel:
    """Nominal per-terminal Windkessel values from global measurements.

    Total resistance is ``mean_pressure / mean_flow`` with 20% assigned to the
    proximal resistor. Resistance is split across terminals inversely to outlet
    area and compliance proportionally to it, so the parallel combination of
    the terminal resistances reproduces the total.

    The total compliance is either given directly or obtained from a
    log-linear fit of a diastolic pressure decay ``p(t) ~ exp(-t / tau)``,
    with ``C_T = tau / R_T``.
    """
    if not (mean_pressure > 0 and mean_flow > 0):
        raise ValidationError("mean pressure and mean flow must be positive")
    if not terminals:
        raise ValidationError("need at least one terminal vessel")
    R_T = mean_pressure / mean_flow

    if total_compliance is None:
        if decay_t is None or decay_p is None:
            raise ValidationError("provide total_compliance or a diastolic decay series")
        t = np.asarray(decay_t, dtype=float)
        p = np.asarray(decay_p, dtype=float)
        if t.shape != p.shape or t.size < 3:
            raise ValidationError("decay series needs at least 3 matching samples")
        if np.any(p <= 0) or np.any(np.diff(p) >= 0):
            raise ValidationError("diastolic decay must be positive and strictly decreasing")
        slope, _ = np.polyfit(t, np.log(p), 1)
        tau = -1.0 / slope
        total_compliance = tau / R_T
    elif not total_compliance > 0:
        raise ValidationError("total compliance must be positive")

    areas = {v.id: v.outlet_area for v in terminals}
    a_sum = sum(areas.values())
    R01, R02, C0 = {}, {}, {}
    for vid, a in areas.items():
        r_j = R_T * a_sum / a
        R01[vid] = 0.2 * r_j
        R02[vid] = 0.8 * r_j
        C0[vid] = total_compliance * a / a_sum
    return NominalWindkessel(R01, R02, C0, R_T, float(total_compliance))


def apply_theta(network: VesselNetwork, nominal: NominalWindkessel, theta: ThetaVector):
    """Map the reduced parameters onto the full network.

    Returns a new network (stiffness set, non-terminal vessels tapered) and
    the scaled Windkessel parameters.
    """
    bad = theta.out_of_bounds()
    if bad:
        raise ValidationError(f"theta out of bounds in {bad}")
    R1 = {j: (1 - 0.5 * theta.r1) * v for j, v in nominal.R01.items()}
    R2 = {j: (1 - 0.5 * theta.r2) * v for j, v in nominal.R02.items()}
    C = {j: (1 - 0.5 * theta.c) * v for j, v in nominal.C0.items()}
    wk = WindkesselParams(R1, R2, C)

    taper = 1 - 0.5 * theta.xi
    vessels = tuple(
        v if v.is_terminal else replace(v, r_bottom=v.r_top * taper)
        for v in network.vessels
    )
    return replace(network, vessels=vessels, stiffness=theta.f), wk


def boundary_layer_thickness(network: VesselNetwork) -> float:
    return math.sqrt(network.mu * network.period / (2 * math.pi * network.rho))


# -- file format ----------------------------------------------------------

def _vessel_line(text: str, vid) -> int | None:
    m = re.search(r'"id"\s*:\s*%s\b' % re.escape(str(vid)), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def parse_network(text: str, source: str = "<network>") -> VesselNetwork:
    """Parse the JSON topology format with field-level error messages."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ValidationError(f"{source}: top level must be an object")
    unknown = set(doc) - {"vessels", "globals", "root"}
    if unknown:
        raise ValidationError(f"{source}: unknown top-level keys {sorted(unknown)}")
    g = doc.get("globals")
    if not isinstance(g, dict):
        raise ValidationError(f"{source}: 'globals' object is required")
    unknown = set(g) - {"rho", "mu", "period_s", "p0_mmHg"}
    if unknown:
        raise ValidationError(f"{source}: unknown globals {sorted(unknown)}")
    for key in ("rho", "mu", "period_s"):
        if not isinstance(g.get(key), (int, float)) or isinstance(g.get(key), bool):
            raise ValidationError(f"{source}: globals.{key} must be a number")
    raw = doc.get("vessels")
    if not isinstance(raw, list) or not raw:
        raise ValidationError(f"{source}: 'vessels' must be a non-empty array")

    required = {"id": int, "length_cm": (int, float), "r_top_cm": (int, float),
                "daughters": list, "terminal": bool}
    parents: dict[int, int] = {}
    entries = []
    for i, item in enumerate(raw):
        where = f"{source}: vessels[{i}]"
        if not isinstance(item, dict):
            raise ValidationError(f"{where}: must be an object")
        vid = item.get("id")
        line = _vessel_line(text, vid)
        if line is not None:
            where = f"{source}:{line}: vessels[{i}]"
        extra = set(item) - set(required) - {"r_bottom_cm"}
        if extra:
            raise ValidationError(f"{where}: unknown fields {sorted(extra)}")
        for key, typ in required.items():
            val = item.get(key)
            if val is None or not isinstance(val, typ) or (typ is int and isinstance(val, bool)):
                raise ValidationError(f"{where}.{key}: missing or wrong type")
        daughters = item["daughters"]
        if any(not isinstance(d, int) or isinstance(d, bool) for d in daughters):
            raise ValidationError(f"{where}.daughters: ids must be integers")
        if item["terminal"] != (len(daughters) == 0):
            raise ValidationError(f"{where}.terminal: inconsistent with daughters {daughters}")
        for d in daughters:
            if d in parents:
                raise ValidationError(f"{where}.daughters: vessel {d} already has parent {parents[d]}")
            parents[d] = vid
        entries.append((where, item))

    vessels = []
    for where, item in entries:
        try:
            vessels.append(Vessel(
                id=item["id"],
                length=float(item["length_cm"]),
                r_top=float(item["r_top_cm"]),
                r_bottom=float(item.get("r_bottom_cm", item["r_top_cm"])),
                parent=parents.get(item["id"]),
                daughters=tuple(item["daughters"]),
            ))
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from None

    roots = [v.id for v in vessels if v.parent is None]
    root = doc.get("root", roots[0] if len(roots) == 1 else None)
    if root is None:
        raise ValidationError(f"{source}: expected exactly one root vessel, found {roots}")
    try:
        return VesselNetwork(
            vessels=tuple(vessels), root=root, rho=float(g["rho"]), mu=float(g["mu"]),
            period=float(g["period_s"]), p0=float(g.get("p0_mmHg", 0.0)),
        )
    except ValidationError as exc:
        raise ValidationError(f"{source}: {exc}") from None


def load_network(path) -> VesselNetwork:
    path = Path(path)
    return parse_network(path.read_text(), source=str(path))


def network_to_json(network: VesselNetwork) -> str:
    doc = {
        "globals": {"rho": network.rho, "mu": network.mu, "period_s": network.period,
                    "p0_mmHg": network.p0},
        "root": network.root,
        "vessels": [
            {"id": v.id, "length_cm": v.length, "r_top_cm": v.r_top,
             "daughters": list(v.daughters), "terminal": v.is_terminal}
            for v in network.order()
        ],
    }
    return json.dumps(doc, indent=2)
