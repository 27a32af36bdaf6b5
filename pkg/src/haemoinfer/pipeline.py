"""Batch workflow: simulate, synthesise data, optimise, sample, diagnose, select.

Every stage reads its inputs from the configuration file or from artifacts
written by earlier stages into the output directory, so stages can be rerun
independently. Artifacts carry a provenance block (configuration hash, seed,
package version) and contain no timestamps, so equal inputs give
byte-identical files.

Configuration (JSON; paths are relative to the configuration file)::

    {
      "network": "net.json", "inflow": "inflow.csv",
      "measurement": "y.csv",                    # optional, else <out>/measurement.csv
      "model": "5D",
      "nominal": {"mean_pressure": 20, "mean_flow": 4, "total_compliance": 0.1},
      "grid": {...GridConfig fields...},
      "params": {"scale": {...}, "bounds": {"f": [lo, hi]}, "prior_mean": {...}, "prior_var": {...}},
      "simulate": {"theta": {...}},
      "synth": {"model": "5D", "theta": {...}, "sigma_mmHg": 0.1, "n": 1024},
      "optimize": {"starts": 20, "workers": 1, ...OptConfig fields...},
      "sampler": {...SamplerConfig fields...},
      "diagnose": {"burn_in_fraction": 0.1, "subchains": 4},
      "select": {"thin": 1000, "burn_in_fraction": 0.1},
      "locations": {"name": [vessel_id, fraction]},
      "seed": 1
    }
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import diagnose
from .errors import ValidationError
from .io import (config_hash, file_hash, read_chain_csv, read_inflow_csv, read_json,
                 read_measurement_csv, write_chain_csv, write_json, write_measurement_csv,
                 write_waveform_csv)
from .model import ForwardModel, RSSObjective
from .network import (PARAM_NAMES_4D, PARAM_NAMES_5D, THETA_BOUNDS, NominalWindkessel, VesselNetwork,
                      estimate_nominal_windkessel, load_network)
from .optimize import OptConfig, OptProblem, multistart
from .sampler import SamplerConfig, proposal_from_hessian, run_chain
from .selection import compare, score_model
from .solver import GridConfig, InflowWaveform
from .stats import DEFAULT_SCALE, Measurement, ParamSpace

TOP_KEYS = {"network", "inflow", "measurement", "model", "nominal", "grid", "params", "simulate",
            "synth", "optimize", "sampler", "diagnose", "select", "locations", "seed"}
SAMPLER_KEYS = {f.name for f in dataclasses.fields(SamplerConfig)} - {"seed", "chain_id"}
OPT_KEYS = {f.name for f in dataclasses.fields(OptConfig)} | {"starts", "workers"}
GRID_KEYS = {f.name for f in dataclasses.fields(GridConfig)}


def _section(raw: dict, key: str) -> dict:
    sec = raw.get(key, {})
    if not isinstance(sec, dict):
        raise ValidationError(f"config: '{key}' must be an object")
    return sec


def _check_keys(sec: dict, allowed, where: str):
    unknown = sorted(set(sec) - set(allowed))
    if unknown:
        raise ValidationError(f"config: unknown key(s) in {where}: {', '.join(unknown)}")


def _model_tag(kind: str) -> str:
    return kind.lower()


@dataclass
class RunConfig:
    """Validated configuration with inputs loaded."""

    raw: dict
    base: Path
    network: VesselNetwork
    inflow: InflowWaveform
    nominal: NominalWindkessel
    grid: GridConfig
    model_kind: str
    seed: int
    input_hashes: dict

    @property
    def hash(self) -> str:
        return config_hash({"config": self.raw, "inputs": self.input_hashes})

    def provenance(self) -> dict:
        return {"config_hash": self.hash, "seed": self.seed, "version": __version__}

    def names(self, kind: str | None = None) -> tuple:
        kind = (kind or self.model_kind).upper()
        return PARAM_NAMES_5D if kind == "5D" else PARAM_NAMES_4D

    def path(self, key: str) -> Path:
        return (self.base / self.raw[key]).resolve()

    def param_space(self, kind: str | None = None) -> ParamSpace:
        kind = (kind or self.model_kind).upper()
        names = self.names(kind)
        p = _section(self.raw, "params")
        _check_keys(p, {"scale", "bounds", "prior_mean", "prior_var"}, "params")
        scale = dict(DEFAULT_SCALE)
        scale.update(p.get("scale", {}))
        bounds = {}
        for n, ab in p.get("bounds", {}).items():
            if n not in THETA_BOUNDS:
                raise ValidationError(f"config: params.bounds: unknown parameter {n!r}")
            if not (isinstance(ab, list) and len(ab) == 2):
                raise ValidationError(f"config: params.bounds.{n} must be [lower, upper]")
            lo, hi = float(ab[0]), float(ab[1])
            if not lo < hi:
                raise ValidationError(f"config: params.bounds.{n}: lower {lo} must be below upper {hi}")
            glo, ghi = THETA_BOUNDS[n]
            if lo < glo or hi > ghi:
                raise ValidationError(f"config: params.bounds.{n} must lie within [{glo}, {ghi}]")
            bounds[n] = (lo, hi)
        pm, pv = p.get("prior_mean"), p.get("prior_var")
        if (pm is None) != (pv is None):
            raise ValidationError("config: give both params.prior_mean and params.prior_var, or neither")
        if pm is not None:
            try:
                pm = [float(pm[n]) for n in names]
                pv = [float(pv[n]) for n in names]
            except KeyError as exc:
                raise ValidationError(f"config: prior missing parameter {exc.args[0]}") from None
        return ParamSpace.for_model(kind, scale=[float(scale[n]) for n in names], bounds=bounds,
                                    prior_mean=pm, prior_var=pv)

    def forward_model(self, kind: str | None = None) -> ForwardModel:
        return ForwardModel(self.network, self.nominal, self.inflow, self.grid, (kind or self.model_kind).upper())

    def theta_from(self, values: dict, kind: str | None, where: str) -> np.ndarray:
        kind = (kind or self.model_kind).upper()
        names = self.names(kind)
        if not isinstance(values, dict):
            raise ValidationError(f"config: {where} must map parameter names to values")
        _check_keys(values, names, f"{where} (model {kind})")
        missing = [n for n in names if n not in values]
        if missing:
            raise ValidationError(f"config: {where} is missing {', '.join(missing)}")
        theta = np.array([float(values[n]) for n in names])
        for n, v in zip(names, theta):
            lo, hi = THETA_BOUNDS[n]
            if not lo <= v <= hi:
                raise ValidationError(f"config: {where}.{n} = {v} outside [{lo}, {hi}]")
        return theta

    def locations(self) -> dict:
        locs = {}
        for v in self.network.terminals:
            locs[f"outlet_{v.id}"] = (v.id, 1.0)
        raw = _section(self.raw, "locations")
        for name, spec in raw.items():
            if not (isinstance(spec, list) and len(spec) == 2):
                raise ValidationError(f"config: locations.{name} must be [vessel_id, fraction]")
            locs[name] = (spec[0], float(spec[1]))
        return locs


def _synth_kind(raw: dict) -> str:
    syn = raw.get("synth")
    kind = syn.get("model", raw.get("model", "5D")) if isinstance(syn, dict) else raw.get("model", "5D")
    kind = str(kind).upper()
    if kind not in ("4D", "5D"):
        raise ValidationError(f"config: synth.model must be 4D or 5D, got {kind!r}")
    return kind


def _scan_for_xi(raw: dict):
    hits = []
    for sec in ("simulate", "synth"):
        if sec == "synth" and _synth_kind(raw) != "4D":
            continue
        th = raw.get(sec, {}).get("theta", {}) if isinstance(raw.get(sec), dict) else {}
        if isinstance(th, dict) and "xi" in th:
            hits.append(f"{sec}.theta")
    p = raw.get("params", {})
    if isinstance(p, dict):
        for key in ("scale", "bounds", "prior_mean", "prior_var"):
            if isinstance(p.get(key), dict) and "xi" in p[key]:
                hits.append(f"params.{key}")
    return hits


def load_config(path, seed=None, model=None, algorithm=None, uncorrected=False) -> RunConfig:
    """Read, override and validate a configuration; load the network and inflow."""
    path = Path(path)
    raw = read_json(path)
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: top level must be an object")
    raw = copy.deepcopy(raw)
    _check_keys(raw, TOP_KEYS, "top level")
    if seed is not None:
        raw["seed"] = int(seed)
    if model is not None:
        raw["model"] = model.upper()
    sampler = dict(_section(raw, "sampler"))
    if algorithm is not None:
        sampler["algorithm"] = algorithm
    if uncorrected:
        sampler["corrected"] = False
    raw["sampler"] = sampler

    kind = str(raw.get("model", "5D")).upper()
    if kind not in ("4D", "5D"):
        raise ValidationError(f"config: model must be 4D or 5D, got {raw.get('model')!r}")
    raw["model"] = kind
    hits = _scan_for_xi(raw) if kind == "4D" else []
    if kind == "5D" and _synth_kind(raw) == "4D":
        th = raw.get("synth", {}).get("theta", {})
        if isinstance(th, dict) and "xi" in th:
            hits.append("synth.theta")
    if hits:
        raise ValidationError(f"config: the 4D model has no xi, but xi appears in {', '.join(hits)}")
    s = raw.get("seed", 0)
    if not isinstance(s, int) or isinstance(s, bool) or not 0 <= s < 2**64:
        raise ValidationError("config: seed must be an unsigned 64-bit integer")
    raw["seed"] = s
    for key in ("network", "inflow"):
        if not isinstance(raw.get(key), str):
            raise ValidationError(f"config: '{key}' (path) is required")

    base = path.resolve().parent
    hashes = {}
    net_path = (base / raw["network"]).resolve()
    if not net_path.is_file():
        raise ValidationError(f"config: network file not found: {net_path}")
    network = load_network(net_path)
    hashes["network"] = file_hash(net_path)
    inflow_path = (base / raw["inflow"]).resolve()
    if not inflow_path.is_file():
        raise ValidationError(f"config: inflow file not found: {inflow_path}")
    inflow = read_inflow_csv(inflow_path, network.period)
    hashes["inflow"] = file_hash(inflow_path)
    if "measurement" in raw:
        mpath = (base / raw["measurement"]).resolve()
        if not mpath.is_file():
            raise ValidationError(f"config: measurement file not found: {mpath}")
        hashes["measurement"] = file_hash(mpath)

    grid_raw = _section(raw, "grid")
    _check_keys(grid_raw, GRID_KEYS, "grid")
    try:
        grid = GridConfig(**grid_raw)
    except TypeError as exc:
        raise ValidationError(f"config: grid: {exc}") from None

    nom = _section(raw, "nominal")
    _check_keys(nom, {"mean_pressure", "mean_flow", "total_compliance", "decay"}, "nominal")
    for key in ("mean_pressure", "mean_flow"):
        if key not in nom:
            raise ValidationError(f"config: nominal.{key} is required")
    decay_t = decay_p = None
    if "decay" in nom:
        dpath = (base / nom["decay"]).resolve()
        dm = read_measurement_csv(dpath)
        decay_t, decay_p = dm.t, dm.y
        hashes["decay"] = file_hash(dpath)
    nominal = estimate_nominal_windkessel(float(nom["mean_pressure"]), float(nom["mean_flow"]),
                                          network.terminals, decay_t, decay_p,
                                          nom.get("total_compliance"))

    _check_keys(_section(raw, "optimize"), OPT_KEYS, "optimize")
    _check_keys(sampler, SAMPLER_KEYS, "sampler")
    _check_keys(_section(raw, "diagnose"), {"burn_in_fraction", "subchains"}, "diagnose")
    _check_keys(_section(raw, "select"), {"thin", "burn_in_fraction"}, "select")
    _check_keys(_section(raw, "synth"), {"model", "theta", "sigma_mmHg", "n"}, "synth")
    _check_keys(_section(raw, "simulate"), {"theta"}, "simulate")
    rc = RunConfig(raw=raw, base=base, network=network, inflow=inflow, nominal=nominal, grid=grid,
                   model_kind=kind, seed=s, input_hashes=hashes)
    rc.param_space()  # validates bounds and priors before any solve
    rc.locations()
    return rc


# -- artifacts ----------------------------------------------------------------

def _out(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _measurement(rc: RunConfig, out: Path) -> tuple[Measurement, str]:
    p = rc.path("measurement") if "measurement" in rc.raw else out / "measurement.csv"
    if not p.is_file():
        raise ValidationError(f"no measurement: {p} does not exist (run 'synth' or set 'measurement')")
    return read_measurement_csv(p), file_hash(p)


def _read_artifact(path: Path, what: str) -> dict:
    if not path.is_file():
        raise ValidationError(f"{path} not found; run '{what}' first")
    return read_json(path)


def _sampler_config(rc: RunConfig) -> SamplerConfig:
    sec = dict(rc.raw.get("sampler", {}))
    try:
        return SamplerConfig(seed=rc.seed, **sec)
    except TypeError as exc:
        raise ValidationError(f"config: sampler: {exc}") from None


# -- stages -------------------------------------------------------------------

def cmd_simulate(rc: RunConfig, out) -> dict:
    """Simulate at ``simulate.theta`` (or ``synth.theta``) and write per-location waveforms."""
    out = _out(out)
    src = rc.raw.get("simulate", {}).get("theta")
    where, kind = "simulate.theta", rc.model_kind
    if src is None:
        src, where, kind = rc.raw.get("synth", {}).get("theta"), "synth.theta", _synth_kind(rc.raw)
    if src is None:
        raise ValidationError("config: simulate needs simulate.theta or synth.theta")
    theta = rc.theta_from(src, kind, where)
    w = rc.forward_model(kind).waveforms(theta, rc.locations())
    files = {}
    for name in w.p:
        fn = f"waveform_{name}.csv"
        write_waveform_csv(out / fn, w.t, w.p[name], w.q[name])
        files[name] = fn
    meta = {
        "provenance": rc.provenance(),
        "model": kind,
        "theta": dict(zip(rc.names(kind), theta.tolist())),
        "files": files,
        "grid": dataclasses.asdict(rc.grid),
        "dt": w.dt,
        "nodes": w.nodes,
        "cycles": w.cycles,
        "converged": w.converged,
        "last_cycle_change_mmHg": w.last_cycle_change,
        "max_cfl": w.max_cfl,
        "max_junction_flow_residual": w.max_junction_flow_residual,
        "max_junction_pressure_residual_mmHg": w.max_junction_pressure_residual,
    }
    write_json(out / "simulate.json", meta)
    return meta


def cmd_synth(rc: RunConfig, out) -> dict:
    """Simulated MPA pressure plus i.i.d. Gaussian noise."""
    out = _out(out)
    syn = rc.raw.get("synth")
    if not isinstance(syn, dict) or "theta" not in syn:
        raise ValidationError("config: synth.theta is required")
    kind = _synth_kind(rc.raw)
    theta = rc.theta_from(syn["theta"], kind, "synth.theta")
    sigma = float(syn.get("sigma_mmHg", 0.1))
    if not sigma >= 0:
        raise ValidationError("config: synth.sigma_mmHg must be >= 0")
    n = int(syn.get("n", rc.grid.n_out))
    if n < 2:
        raise ValidationError("config: synth.n must be >= 2")
    T = rc.network.period
    t = np.arange(n) * (T / n)
    m = rc.forward_model(kind).pressure(theta, t)
    rng = np.random.default_rng(rc.seed)
    y = m + sigma * rng.standard_normal(n) if sigma > 0 else m.copy()
    write_measurement_csv(out / "measurement.csv", t, y)
    truth = {
        "provenance": rc.provenance(),
        "model": kind,
        "theta": dict(zip(rc.names(kind), theta.tolist())),
        "sigma_mmHg": sigma,
        "n": n,
        "measurement_sha256": file_hash(out / "measurement.csv"),
    }
    write_json(out / "truth.json", truth)
    return truth


def cmd_optimize(rc: RunConfig, out, log=print) -> dict:
    """Sobol multistart SQP; writes ``optimize_<model>.json``."""
    out = _out(out)
    space = rc.param_space()
    meas, mhash = _measurement(rc, out)
    sec = dict(rc.raw.get("optimize", {}))
    count = int(sec.pop("starts", 20))
    workers = int(sec.pop("workers", 1))
    if count < 1:
        raise ValidationError("config: optimize.starts must be >= 1")
    try:
        ocfg = OptConfig(**sec)
    except TypeError as exc:
        raise ValidationError(f"config: optimize: {exc}") from None
    objective = RSSObjective(rc.forward_model(), meas.y, meas.t)
    problem = OptProblem(objective, space.lower, space.upper, space.scale_factors, names=space.names)
    res = multistart(problem, count=count, config=ocfg, workers=workers)
    best = res.best
    report = {
        "provenance": rc.provenance(),
        "model": rc.model_kind,
        "names": list(space.names),
        "measurement_sha256": mhash,
        "n": meas.n,
        "best": best.to_dict(),
        "starts": [r.to_dict() for r in res.results],
        "spread": res.spread,
        "distinct_optima": [{"theta": m.theta.tolist(), "S": m.S} for m in res.distinct],
    }
    truth_path = out / "truth.json"
    if truth_path.is_file():
        truth = read_json(truth_path)
        if truth.get("model") == rc.model_kind and truth.get("measurement_sha256") == mhash:
            tv = np.array([truth["theta"][n] for n in space.names])
            report["relative_error_vs_truth"] = dict(zip(space.names, (np.abs(best.theta / tv - 1)).tolist()))
    write_json(out / f"optimize_{_model_tag(rc.model_kind)}.json", report)
    log("best theta: " + ", ".join(f"{n}={v:.6g}" for n, v in zip(space.names, best.theta)))
    log(f"S* = {best.S:.6g} (start {best.start_index}, converged={best.converged})")
    return report


def cmd_sample(rc: RunConfig, out, resume: bool = False, log=print) -> dict:
    """Run the configured sampler from the optimum; writes the chain and its diagnostics."""
    out = _out(out)
    tag = _model_tag(rc.model_kind)
    opt = _read_artifact(out / f"optimize_{tag}.json", "optimize")
    space = rc.param_space()
    if opt.get("names") != list(space.names):
        raise ValidationError(f"optimize_{tag}.json was produced for parameters {opt.get('names')}")
    meas, mhash = _measurement(rc, out)
    if opt.get("measurement_sha256") != mhash:
        raise ValidationError("the optimisation report was computed for a different measurement file")
    cfg = _sampler_config(rc)
    best = opt["best"]
    theta0 = np.array(best["theta"], dtype=float)
    S0 = float(best["S"])
    n, d = meas.n, space.dim
    sigma2_0 = cfg.sigma2_0 if cfg.sigma2_0 is not None else S0 / (n - d)
    H = None if best.get("hessian") is None else np.array(best["hessian"], dtype=float)
    V0, v0_tag = proposal_from_hessian(H, sigma2_0, space, cfg.s_d, cfg.eps)
    objective = RSSObjective(rc.forward_model(), meas.y, meas.t)
    chain_path = out / f"chain_{tag}.csv"
    prior = None
    if resume and chain_path.is_file():
        prior = read_chain_csv(chain_path, cfg)
    chain = run_chain(objective, space, cfg, theta0, n, V0=V0, S0=S0, resume=prior)
    write_chain_csv(chain_path, chain)
    counts = chain.stage_counts()
    report = {
        "provenance": rc.provenance(),
        "model": rc.model_kind,
        "algorithm": cfg.algorithm,
        "corrected": cfg.corrected,
        "iterations": chain.iterations,
        "acceptance_rate": chain.acceptance_rate,
        "stage_counts": counts,
        "stage_rates": chain.stage_rates(),
        "V0_source": v0_tag,
        "V0": V0,
        "final_V": chain.meta["final_V"],
        "sigma2_0": chain.meta["sigma2_0"],
        "gamma2": chain.meta["gamma2"],
        "S0": S0,
        "chain_file": chain_path.name,
        "optimize_config_hash": opt["provenance"]["config_hash"],
        "resumed_from": None if prior is None else prior.iterations,
    }
    write_json(out / f"sample_{tag}.json", report)
    log(f"{cfg.algorithm} ({'corrected' if cfg.corrected else 'uncorrected'}): "
        f"{chain.iterations} iterations, acceptance {chain.acceptance_rate:.3f}")
    for k, v in counts.items():
        log(f"  {k}: {v}")
    report["diagnostics"] = cmd_diagnose(rc, out, chain=chain, log=log)
    return report


def cmd_diagnose(rc: RunConfig, out, chain=None, log=print) -> dict:
    """Convergence diagnostics of ``chain_<model>.csv`` after burn-in."""
    out = _out(out)
    tag = _model_tag(rc.model_kind)
    if chain is None:
        cpath = out / f"chain_{tag}.csv"
        if not cpath.is_file():
            raise ValidationError(f"{cpath} not found; run 'sample' first")
        chain = read_chain_csv(cpath)
    sec = rc.raw.get("diagnose", {})
    burn = float(sec.get("burn_in_fraction", 0.1))
    sub = int(sec.get("subchains", 4))
    if not 0 <= burn < 1:
        raise ValidationError("config: diagnose.burn_in_fraction must lie in [0, 1)")
    base = {"provenance": rc.provenance(), "model": rc.model_kind, "burn_in_fraction": burn}
    if chain.iterations == 0:
        msg = "chain has no iterations beyond the start point; diagnostics skipped"
        log(msg)
        doc = dict(base, skipped=True, notice=msg)
        write_json(out / f"diagnostics_{tag}.json", doc)
        return doc
    X = chain.post_burn_in(burn)
    rep = diagnose(X, chain.names, subchains=sub)
    doc = dict(base, skipped=False, **rep.to_dict())
    write_json(out / f"diagnostics_{tag}.json", doc)
    _write_table_mixed(out / f"diagnostics_{tag}.csv", rep.CSV_COLUMNS, rep.csv_rows())
    for note in rep.notes:
        log(f"note: {note}")
    if rep.mpsrf is not None:
        log(f"MPSRF ({rep.mpsrf_mode}) = {rep.mpsrf.R:.4f}")
    return doc


def _write_table_mixed(path: Path, columns, rows):
    with path.open("w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for r in rows:
            fh.write(",".join(v if isinstance(v, str) else repr(float(v)) for v in r) + "\n")


def cmd_select(rc: RunConfig, out, models=("4D", "5D"), log=print) -> dict:
    """Score two fitted models on the same measurement and compare them."""
    out = _out(out)
    meas, mhash = _measurement(rc, out)
    sec = rc.raw.get("select", {})
    thin = int(sec.get("thin", 1000))
    burn = float(sec.get("burn_in_fraction", 0.1))
    reports = []
    for kind in models:
        kind = kind.upper()
        if kind not in ("4D", "5D"):
            raise ValidationError(f"unknown model {kind!r}")
        tag = _model_tag(kind)
        opt = _read_artifact(out / f"optimize_{tag}.json", f"optimize --model {tag}")
        if opt.get("measurement_sha256") != mhash or opt.get("n") != meas.n:
            raise ValidationError(f"optimize_{tag}.json was fitted to different data")
        cpath = out / f"chain_{tag}.csv"
        if not cpath.is_file():
            raise ValidationError(f"{cpath} not found; run 'sample --model {tag}' first")
        chain = read_chain_csv(cpath)
        objective = RSSObjective(rc.forward_model(kind), meas.y, meas.t)
        rep = score_model(kind, meas.y, objective.predict, float(opt["best"]["S"]), len(opt["names"]),
                          chain.theta, chain.sigma2, thin=thin, burn_frac=burn)
        write_json(out / f"scores_{tag}.json", dict(rep.to_dict(), provenance=rc.provenance()))
        reports.append(rep)
    cmp = compare(reports[0], reports[1])
    doc = {"provenance": rc.provenance(), "comparison": cmp.to_dict(),
           "scores": {r.model_tag: r.to_dict() for r in reports}}
    write_json(out / "selection.json", doc)
    (out / "selection.txt").write_text(cmp.table() + "\n")
    log(cmp.table())
    return doc


__all__ = ["RunConfig", "load_config", "cmd_simulate", "cmd_synth", "cmd_optimize", "cmd_sample",
           "cmd_diagnose", "cmd_select"]
