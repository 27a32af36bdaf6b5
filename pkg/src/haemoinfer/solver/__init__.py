"""1D network flow solver."""

from .core import (
    CompiledNetwork,
    GridConfig,
    InflowWaveform,
    JunctionSolution,
    SolverState,
    Waveforms,
    compile_network,
    impedance,
    junction_solve,
    lax_wendroff_step,
    riemann_invariants,
    simulate,
    steady_initial_state,
    wall_pressure,
    wave_speed,
    windkessel_outflow,
    windkessel_pressure,
)

__all__ = [
    "CompiledNetwork", "GridConfig", "InflowWaveform", "JunctionSolution", "SolverState",
    "Waveforms", "compile_network", "impedance", "junction_solve", "lax_wendroff_step",
    "riemann_invariants", "simulate", "steady_initial_state", "wall_pressure", "wave_speed",
    "windkessel_outflow", "windkessel_pressure",
]
