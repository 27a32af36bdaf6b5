"""Network solver: Lax-Wendroff interior, characteristic boundary coupling.

The interior of every vessel is advanced with the Richtmyer two-step scheme
on (A, q). Vessel ends are closed with the outgoing Riemann invariant, which
is carried to the end node along its characteristic, plus the physical
condition there: prescribed flow at the root inlet, flow conservation and
pressure continuity at bifurcations, and a three-element Windkessel at
terminal outlets. The Windkessel is integrated in the time domain as
``dp_wk/dt = (q - p_wk/R2)/C`` with ``p = p_wk + R1 q``, which has exactly
the impedance ``R1 + R2/(1 + i w C R2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from ..errors import NumericalDivergence, ValidationError
from ..network import MMHG_TO_CGS, VesselNetwork, WindkesselParams, boundary_layer_thickness
from . import _kernels as K

_FAIL_NAMES = {
    K.FAIL_AREA: "non-positive or non-finite area",
    K.FAIL_CFL: "CFL bound exceeded",
    K.FAIL_JUNCTION: "junction Newton solve did not converge",
    K.FAIL_OUTLET: "Windkessel outlet Newton solve did not converge",
}


@dataclass(frozen=True)
class GridConfig:
    """Discretisation and spin-up settings.

    ``dt`` fixes the time step; when ``None`` it is sized from the stiffness so
    that the CFL number at the reference state equals ``cfl``. The run is
    aborted (not adapted) if the CFL number ever exceeds ``cfl_max``.
    """

    dx_max: float = 0.05
    cfl: float = 0.4
    cfl_max: float = 0.5
    dt: float | None = None
    n_out: int = 1024
    min_cycles: int = 5
    max_cycles: int = 50
    tol: float = 1e-3

    def __post_init__(self):
        if not self.dx_max > 0:
            raise ValidationError("dx_max must be positive")
        if not 0 < self.cfl <= self.cfl_max:
            raise ValidationError("need 0 < cfl <= cfl_max")
        if self.n_out < 2 or self.min_cycles < 2 or self.max_cycles < self.min_cycles:
            raise ValidationError("need n_out >= 2 and 2 <= min_cycles <= max_cycles")


@dataclass(frozen=True)
class InflowWaveform:
    """One period of the prescribed root inflow, interpolated periodically."""

    t: np.ndarray
    q: np.ndarray
    period: float

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        q = np.asarray(self.q, dtype=float)
        if t.ndim != 1 or t.shape != q.shape:
            raise ValidationError("inflow t and q must be 1D arrays of equal length")
        if t.size < 16:
            raise ValidationError(f"inflow needs at least 16 samples, got {t.size}")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0) or t[-1] >= self.period:
            raise ValidationError("inflow sample times must increase over [0, period)")
        if not np.all(np.isfinite(q)):
            raise ValidationError("inflow contains non-finite values")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "q", q)

    def spline(self) -> CubicSpline:
        return CubicSpline(np.append(self.t, self.period), np.append(self.q, self.q[0]),
                           bc_type="periodic")

    def __call__(self, t):
        return self.spline()(np.mod(t, self.period))

    def mean(self) -> float:
        s = self.spline()
        return float(s.integrate(0.0, self.period) / self.period)

    @classmethod
    def harmonic(cls, period, mean, amplitudes=(), n=128):
        """Mean flow plus cosine harmonics ``a_k cos(2 pi k t / T)``."""
        t = np.arange(n) * period / n
        q = np.full(n, float(mean))
        for k, a in enumerate(amplitudes, start=1):
            q += a * np.cos(2 * np.pi * k * t / period)
        return cls(t, q, period)


@dataclass
class CompiledNetwork:
    """Flat arrays describing one parameterised network for the kernels."""

    order: list  # vessel ids, kernel index -> id
    vint: np.ndarray
    vdx: np.ndarray
    geo: np.ndarray
    root: int
    junctions: np.ndarray
    terminals: np.ndarray
    R1: np.ndarray
    R2: np.ndarray
    C: np.ndarray
    kk: float  # reference wave speed, cm/s
    k43f: float  # (4/3) f in CGS
    rho: float
    p0c: float
    period: float
    dt: float

    def index(self, vessel_id) -> int:
        return self.order.index(vessel_id)

    def node_slice(self, vessel_id) -> slice:
        v = self.index(vessel_id)
        lo, n = self.vint[v, 0], self.vint[v, 1]
        return slice(lo, lo + n)


def compile_network(network: VesselNetwork, wk: WindkesselParams, config: GridConfig) -> CompiledNetwork:
    if network.stiffness is None:
        raise ValidationError("network stiffness is not set; apply a theta first")
    f_cgs = network.stiffness * MMHG_TO_CGS
    rho = network.rho
    nu = network.mu / rho
    delta = boundary_layer_thickness(network)
    fric = 0.0 if delta == 0.0 else 2 * math.pi * nu / delta

    vessels = network.order()
    order = [v.id for v in vessels]
    nv = len(vessels)
    counts = [max(3, int(math.ceil(v.length / config.dx_max - 1e-12)) + 1) for v in vessels]
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    ntot = int(sum(counts))
    geo = np.zeros((6, ntot))
    vdx = np.zeros(nv)
    vint = np.full((nv, 6), -1, dtype=np.int64)
    term_ids = [v.id for v in vessels if v.is_terminal]
    for k, v in enumerate(vessels):
        n = counts[k]
        lo = offsets[k]
        dx = v.length / (n - 1)
        vdx[k] = dx
        x = np.linspace(0.0, v.length, n)
        slope = (v.r_bottom - v.r_top) / v.length
        r0 = v.r_top + slope * x
        A0 = math.pi * r0**2
        geo[0, lo:lo + n] = A0
        geo[1, lo:lo + n] = 2 * math.pi * r0 * slope
        geo[2, lo:lo + n] = fric * r0
        A0h = 0.5 * (A0[:-1] + A0[1:])
        geo[3, lo:lo + n - 1] = A0h
        geo[4, lo:lo + n - 1] = np.diff(A0) / dx
        geo[5, lo:lo + n - 1] = fric * np.sqrt(A0h / math.pi)
        vint[k, 0], vint[k, 1] = lo, n
        if v.parent is not None:
            vint[k, 2] = order.index(v.parent)
        if v.daughters:
            vint[k, 3] = order.index(v.daughters[0])
            vint[k, 4] = order.index(v.daughters[1])
        else:
            vint[k, 5] = term_ids.index(v.id)

    kk = math.sqrt(2.0 * f_cgs / (3.0 * rho))
    if config.dt is not None:
        dt = float(config.dt)
    else:
        dt = config.cfl * float(vdx.min()) / kk
    terminals = np.array([order.index(j) for j in term_ids], dtype=np.int64)
    return CompiledNetwork(
        order=order, vint=vint, vdx=vdx, geo=geo, root=order.index(network.root),
        junctions=np.array([k for k, v in enumerate(vessels) if v.daughters], dtype=np.int64),
        terminals=terminals,
        R1=np.array([wk.R1[j] for j in term_ids]), R2=np.array([wk.R2[j] for j in term_ids]),
        C=np.array([wk.C[j] for j in term_ids]),
        kk=kk, k43f=4.0 / 3.0 * f_cgs, rho=rho, p0c=network.p0 * MMHG_TO_CGS,
        period=network.period, dt=dt,
    )


@dataclass
class SolverState:
    """Flat (A, q) over all vessel nodes plus the Windkessel pressures (mmHg)."""

    A: np.ndarray
    q: np.ndarray
    p_wk: np.ndarray
    t: float = 0.0


def steady_initial_state(cn: CompiledNetwork, mean_flow: float) -> SolverState:
    """Mean-flow state: flow split by downstream Windkessel resistance.

    Vessel resistance is neglected; each vessel sits at the pressure its
    subtree's Windkessels need to pass its share of the mean flow.
    """
    nv = cn.vint.shape[0]
    req = np.zeros(nv)
    for k in reversed(range(nv)):  # breadth-first order, so daughters come later
        slot = cn.vint[k, 5]
        if slot >= 0:
            req[k] = cn.R1[slot] + cn.R2[slot]
        else:
            r1, r2 = req[cn.vint[k, 3]], req[cn.vint[k, 4]]
            req[k] = r1 * r2 / (r1 + r2)
    flow = np.zeros(nv)
    flow[cn.root] = mean_flow
    for k in range(nv):
        if cn.vint[k, 3] >= 0:
            d1, d2 = cn.vint[k, 3], cn.vint[k, 4]
            g1, g2 = 1 / req[d1], 1 / req[d2]
            flow[d1] = flow[k] * g1 / (g1 + g2)
            flow[d2] = flow[k] * g2 / (g1 + g2)
    A = np.empty(cn.geo.shape[1])
    q = np.empty_like(A)
    for k in range(nv):
        lo, n = cn.vint[k, 0], cn.vint[k, 1]
        dp = flow[k] * req[k] * MMHG_TO_CGS
        ratio = 1.0 - dp / cn.k43f
        if ratio <= 0.05:
            ratio = 0.05
        A[lo:lo + n] = cn.geo[0, lo:lo + n] / ratio**2
        q[lo:lo + n] = flow[k]
    p_wk = np.array([flow[k] * cn.R2[cn.vint[k, 5]] for k in cn.terminals])
    return SolverState(A=A, q=q, p_wk=p_wk)


@dataclass
class Waveforms:
    """Last simulated period at the requested locations.

    ``p`` (mmHg) and ``q`` (ml/s) map location names to arrays sampled at
    ``t = i * T / n`` within the period.
    """

    t: np.ndarray
    p: dict
    q: dict
    cycles: int
    converged: bool
    dt: float
    nodes: int
    max_junction_flow_residual: float
    max_junction_pressure_residual: float
    max_cfl: float
    last_cycle_change: float
    meta: dict = field(default_factory=dict)


def _locations(network: VesselNetwork, cn: CompiledNetwork, locations):
    if locations is None:
        locations = {}
    # the convergence monitor always comes first
    named = {"mpa_mid": (network.root, 0.5)}
    named.update(locations)
    names = list(named)
    loc_v = np.empty(len(names), dtype=np.int64)
    loc_pos = np.empty(len(names))
    for m, name in enumerate(names):
        vid, frac = named[name]
        if not 0.0 <= frac <= 1.0:
            raise ValidationError(f"location {name}: fraction must lie in [0, 1]")
        k = cn.index(vid)
        loc_v[m] = k
        loc_pos[m] = frac * (cn.vint[k, 1] - 1)
    return names, loc_v, loc_pos


def simulate(network: VesselNetwork, wk: WindkesselParams, inflow: InflowWaveform,
             config: GridConfig = GridConfig(), cycles: int | None = None,
             locations: dict | None = None) -> Waveforms:
    """Run whole cardiac cycles until the MPA midpoint pressure is periodic.

    Parameters
    ----------
    network : VesselNetwork
        Network with stiffness and taper applied (see ``apply_theta``).
    wk : WindkesselParams
        Terminal Windkessel values.
    inflow : InflowWaveform
        Root inflow over one period; its period must match the network's.
    config : GridConfig
        Discretisation and spin-up settings.
    cycles : int, optional
        Cap on the number of cycles (defaults to ``config.max_cycles``).
    locations : dict, optional
        Extra outputs as ``name -> (vessel id, fraction along vessel)``. The
        MPA midpoint ``"mpa_mid"`` is always included.

    Raises
    ------
    NumericalDivergence
        If the scheme breaks down; the message names the vessel and step.
    """
    if abs(inflow.period - network.period) > 1e-12 * network.period:
        raise ValidationError("inflow period does not match network period")
    cn = compile_network(network, wk, config)
    names, loc_v, loc_pos = _locations(network, cn, locations)
    max_cycles = config.max_cycles if cycles is None else int(cycles)
    min_cycles = min(config.min_cycles, max_cycles)

    state = steady_initial_state(cn, inflow.mean())
    spl = inflow.spline()
    n_out = config.n_out
    out_p = np.zeros((2, len(names), n_out))
    out_q = np.zeros((2, len(names), n_out))
    istats = np.zeros(5, dtype=np.int64)
    fstats = np.zeros(4)
    K.run(state.A, state.q, cn.vint, cn.vdx, cn.geo, cn.root, cn.junctions, cn.terminals,
          cn.R1, cn.R2, cn.C, state.p_wk, cn.dt, cn.period, cn.kk, cn.k43f, cn.rho, cn.p0c,
          config.cfl_max, np.ascontiguousarray(spl.x), np.ascontiguousarray(spl.c),
          loc_v, loc_pos, n_out, min_cycles, max_cycles, config.tol,
          out_p, out_q, istats, fstats)
    status = int(istats[0])
    if status < 0:
        k = int(istats[1])
        vessel = cn.order[k] if k >= 0 else None
        where = f"vessel {vessel}" if vessel is not None else "network"
        msg = f"{_FAIL_NAMES[status]} in {where} at step {int(istats[2])} (dt={cn.dt:.3e} s)"
        if status == K.FAIL_CFL:
            msg += f", CFL number {fstats[2]:.3f} > {config.cfl_max}"
        raise NumericalDivergence(msg, vessel=vessel, step=int(istats[2]))
    slot = int(istats[4])
    t = np.arange(n_out) * (network.period / n_out)
    return Waveforms(
        t=t,
        p={name: out_p[slot, m].copy() for m, name in enumerate(names)},
        q={name: out_q[slot, m].copy() for m, name in enumerate(names)},
        cycles=int(istats[3]), converged=status == K.OK, dt=cn.dt, nodes=int(cn.geo.shape[1]),
        max_junction_flow_residual=float(fstats[0]),
        max_junction_pressure_residual=float(fstats[1]),
        max_cfl=float(fstats[2]), last_cycle_change=float(fstats[3]),
    )


# -- standalone building blocks -------------------------------------------

def wall_pressure(A, A0, f, p0=0.0):
    """Linear elastic wall law, mmHg in and out."""
    A = np.asarray(A, dtype=float)
    A0 = np.asarray(A0, dtype=float)
    if np.any(A <= 0) or np.any(A0 <= 0):
        raise ValidationError("areas must be positive")
    if not f > 0:
        raise ValidationError("stiffness must be positive")
    return p0 + 4.0 / 3.0 * f * (1.0 - np.sqrt(A0 / A))


def wave_speed(A, A0, f, rho):
    """Pulse wave speed sqrt(A/rho dp/dA) in cm/s for stiffness f in mmHg."""
    kk = math.sqrt(2.0 * f * MMHG_TO_CGS / (3.0 * rho))
    return kk * (np.asarray(A0) / np.asarray(A)) ** 0.25


def lax_wendroff_step(state: SolverState, cn: CompiledNetwork, cfl_max: float = 0.5) -> SolverState:
    """Advance interior nodes of every vessel by one step; end nodes are copied."""
    A = state.A
    q = state.q
    Anew = A.copy()
    qnew = q.copy()
    Ah = np.zeros_like(A)
    qh = np.zeros_like(A)
    k43f_rho = cn.k43f / cn.rho
    for k in range(cn.vint.shape[0]):
        lo, n = cn.vint[k, 0], cn.vint[k, 1]
        sl = slice(lo, lo + n)
        if np.any(A[sl] <= 0):
            raise NumericalDivergence("non-positive area", vessel=cn.order[k])
        c = cn.kk * (cn.geo[0, sl] / A[sl]) ** 0.25
        cfl = np.max((np.abs(q[sl] / A[sl]) + c) * cn.dt / cn.vdx[k])
        if cfl > cfl_max:
            raise NumericalDivergence(f"CFL number {cfl:.3f} exceeds {cfl_max}", vessel=cn.order[k])
        bad = K.lw_interior(A, q, Anew, qnew, Ah, qh, lo, n, cn.vdx[k], cn.dt, cn.geo, k43f_rho)
        if bad >= 0 or np.any(Anew[sl] <= 0) or not np.all(np.isfinite(qnew[sl])):
            raise NumericalDivergence("non-positive or non-finite area", vessel=cn.order[k])
    return SolverState(A=Anew, q=qnew, p_wk=state.p_wk.copy(), t=state.t + cn.dt)


def riemann_invariants(A, q, A0, f, rho):
    """Forward and backward invariants ``u +/- 4 (c0 - c)`` of the wall law."""
    kk = math.sqrt(2.0 * f * MMHG_TO_CGS / (3.0 * rho))
    A = np.asarray(A, dtype=float)
    ph = 4.0 * kk * (1.0 - (np.asarray(A0) / A) ** 0.25)
    u = np.asarray(q) / A
    return u + ph, u - ph


@dataclass(frozen=True)
class JunctionSolution:
    A: np.ndarray  # parent end, daughter 1 start, daughter 2 start
    q: np.ndarray
    flow_residual: float
    pressure_residual: float  # mmHg
    iterations: int


def junction_solve(W_parent, W_d1, W_d2, A0, f, rho, p0=0.0, guess=None) -> JunctionSolution:
    """Bifurcation coupling given the invariants arriving at the three ends.

    ``A0`` holds the reference areas (parent end, daughter 1 start,
    daughter 2 start). Solved by damped Newton on flow conservation and
    pressure continuity.
    """
    A0 = np.asarray(A0, dtype=float)
    guess = A0.copy() if guess is None else np.asarray(guess, dtype=float)
    f_cgs = f * MMHG_TO_CGS
    kk = math.sqrt(2.0 * f_cgs / (3.0 * rho))
    out = np.zeros(8)
    it = K.junction_newton(float(W_parent), float(W_d1), float(W_d2), A0[0], A0[1], A0[2],
                           guess[0], guess[1], guess[2], kk, 4.0 / 3.0 * f_cgs,
                           p0 * MMHG_TO_CGS, out)
    if it < 0:
        raise NumericalDivergence("junction Newton solve did not converge")
    return JunctionSolution(A=out[[0, 2, 4]], q=out[[1, 3, 5]], flow_residual=out[6],
                            pressure_residual=out[7], iterations=it)


def windkessel_outflow(W, A0, f, rho, R1, R2, C, p_wk, q_prev, dt, p0=0.0, guess=None):
    """One outlet update: returns (A, q, new Windkessel pressure in mmHg).

    ``W`` is the forward invariant reaching the outlet node, ``p_wk`` and
    ``q_prev`` the capacitor pressure and outlet flow at the previous step.
    """
    f_cgs = f * MMHG_TO_CGS
    kk = math.sqrt(2.0 * f_cgs / (3.0 * rho))
    a, b = K.windkessel_coeffs(float(p_wk), float(q_prev), float(R2), float(C), float(dt))
    out = np.zeros(3)
    it = K.outlet_newton(float(W), float(A0), float(A0 if guess is None else guess), float(R1),
                         a, b, kk, 4.0 / 3.0 * f_cgs, p0 * MMHG_TO_CGS, out)
    if it < 0:
        raise NumericalDivergence("Windkessel outlet Newton solve did not converge")
    return out[0], out[1], a + b * out[1]


def windkessel_pressure(q, dt, R1, R2, C, p_wk0=None):
    """Outlet pressure series for a given outlet flow series (time-domain Windkessel).

    Starts from the steady capacitor pressure ``R2 q[0]`` unless given.
    """
    q = np.asarray(q, dtype=float)
    p = np.empty_like(q)
    pwk = R2 * q[0] if p_wk0 is None else float(p_wk0)
    p[0] = pwk + R1 * q[0]
    for n in range(1, q.size):
        a, b = K.windkessel_coeffs(pwk, q[n - 1], R2, C, dt)
        pwk = a + b * q[n]
        p[n] = pwk + R1 * q[n]
    return p


def impedance(omega, R1, R2, C):
    return R1 + R2 / (1 + 1j * omega * C * R2)
