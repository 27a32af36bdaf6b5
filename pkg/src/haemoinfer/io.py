"""CSV and JSON formats used by the command-line pipeline.

Floats are written with ``repr`` so every file round-trips bit-exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .solver import InflowWaveform
from .stats import Measurement


def _fmt(x) -> str:
    return repr(float(x))


def _read_table(path, columns):
    """Read a headed numeric CSV, checking the header and every field."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise ValidationError(f"{path}: cannot open ({exc.strerror})") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        if header != list(columns):
            raise ValidationError(f"{path}:1: expected header {','.join(columns)}, got {','.join(header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(columns):
                raise ValidationError(f"{path}:{lineno}: expected {len(columns)} fields, got {len(row)}")
            vals = []
            for name, cell in zip(columns, row):
                try:
                    v = float(cell)
                except ValueError:
                    raise ValidationError(f"{path}:{lineno}: field {name}: not a number: {cell!r}") from None
                if not math.isfinite(v):
                    raise ValidationError(f"{path}:{lineno}: field {name}: non-finite value")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    return np.array(rows, dtype=float)


def _write_table(path, columns, data):
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for row in data:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_inflow_csv(path, period: float) -> InflowWaveform:
    a = _read_table(path, ("t_s", "q_ml_per_s"))
    try:
        return InflowWaveform(a[:, 0], a[:, 1], period)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def write_inflow_csv(path, inflow: InflowWaveform):
    _write_table(path, ("t_s", "q_ml_per_s"), np.column_stack([inflow.t, inflow.q]))


def read_measurement_csv(path) -> Measurement:
    a = _read_table(path, ("t_s", "p_mmHg"))
    try:
        return Measurement(a[:, 0], a[:, 1])
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def write_measurement_csv(path, t, y):
    _write_table(path, ("t_s", "p_mmHg"), np.column_stack([t, y]))


def write_waveform_csv(path, t, p, q):
    _write_table(path, ("t_s", "p_mmHg", "q_ml_per_s"), np.column_stack([t, p, q]))


def read_waveform_csv(path):
    a = _read_table(path, ("t_s", "p_mmHg", "q_ml_per_s"))
    return a[:, 0], a[:, 1], a[:, 2]


def _clean(obj):
    """Make numpy values JSON-serialisable; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps_json(obj))


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise ValidationError(f"{path}: cannot open ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None


def config_hash(config: dict) -> str:
    """Stable SHA-256 of a configuration document."""
    return hashlib.sha256(json.dumps(_clean(config), sort_keys=True).encode()).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def chain_columns(names) -> tuple:
    return ("iter", *names, "sigma2", "S", "S_pri", "stage")


def write_chain_csv(path, chain):
    """One row per iteration; row 0 is the start point."""
    cols = chain_columns(chain.names)
    with Path(path).open("w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for k in range(chain.theta.shape[0]):
            vals = [str(k)] + [_fmt(v) for v in chain.theta[k]]
            vals += [_fmt(chain.sigma2[k]), _fmt(chain.S[k]), _fmt(chain.S_pri[k]), str(chain.stage[k])]
            fh.write(",".join(vals) + "\n")


def read_chain_csv(path, config=None):
    """Inverse of ``write_chain_csv``; returns a :class:`~haemoinfer.sampler.Chain`."""
    from .sampler import STAGES, Chain, SamplerConfig

    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise ValidationError(f"{path}: cannot open ({exc.strerror})") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        if len(header) < 6 or header[0] != "iter" or header[-4:] != ["sigma2", "S", "S_pri", "stage"]:
            raise ValidationError(f"{path}:1: not a chain file (expected iter,<params>,sigma2,S,S_pri,stage)")
        names = tuple(header[1:-4])
        rows, stages = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                k = int(row[0])
                vals = [float(c) for c in row[1:-1]]
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: malformed number") from None
            if k != len(rows):
                raise ValidationError(f"{path}:{lineno}: iterations must run 0, 1, 2, ... (got {k})")
            if row[-1] not in STAGES:
                raise ValidationError(f"{path}:{lineno}: unknown stage {row[-1]!r}")
            rows.append(vals)
            stages.append(row[-1])
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    a = np.array(rows, dtype=float)
    d = len(names)
    return Chain(names=names, theta=a[:, :d], sigma2=a[:, d], S=a[:, d + 1], S_pri=a[:, d + 2],
                 stage=np.array(stages), config=config if config is not None else SamplerConfig())
