"""Experiment configuration, seeded runs, sweeps and CSV/SVG output.

Configuration files are INI style with three sections::

    [scenario]
    preset = small
    power_dbm = 20
    gamma_s_db = 5
    phase_bits = continuous

    [solver]
    rho0 = 0.3

    [experiment]
    schemes = Proposed, FixedTraj
    sweep_param = power_dbm
    sweep_values = 0, 10, 20
    num_seeds = 2

Every key is optional.  Values given in dB / dBm are converted exactly
(``10**(x/10)`` and ``10**((x - 30)/10)`` watts).
"""

from __future__ import annotations

import configparser
import csv
import io
import math
import os
import re
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import baselines
from .errors import ParseError, UavIsacError, ValidationError
from .pdd import SolverConfig
from .scenario import (PRESETS, RNG_ALGORITHM, PhaseMode, PhysicalParams, db_to_linear, dbm_to_watt,
                       make_scenario)

SWEEP_PARAMS = ("power_dbm", "gamma_s_db", "nrf", "kappa")
RESULT_COLUMNS = ("scheme", "seed", "sweep_param", "sweep_value", "wsr", "violation", "feasible",
                  "iters", "seconds")
CONVERGENCE_COLUMNS = ("scheme", "seed", "sweep_value", "outer_iter", "wsr", "violation")
TRAJECTORY_COLUMNS = ("scheme", "seed", "sweep_value", "uav", "slot", "x", "y")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    preset: str = "small"
    scenario: dict = field(default_factory=dict)     # keyword arguments of make_scenario
    params: dict = field(default_factory=dict)       # PhysicalParams fields
    power_dbm: float = 20.0
    gamma_s_db: float = 10.0
    phase_bits: Optional[int] = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    schemes: tuple = ("Proposed",)
    sweep_param: Optional[str] = None
    sweep_values: tuple = ()
    num_seeds: int = 1
    seed: int = 0
    outdir: str = "results"
    record_timing: bool = False
    map_iters: int = 50
    rng: str = RNG_ALGORITHM

    def seeds(self):
        return [self.seed + i for i in range(self.num_seeds)]

    def points(self):
        """Sweep values to run; a single ``None`` when there is no sweep."""
        return list(self.sweep_values) if self.sweep_param else [None]

    def scenario_for(self, seed: int, sweep_value=None):
        """Scenario of one run, with the sweep parameter applied."""
        power, gamma, bits = self.power_dbm, self.gamma_s_db, self.phase_bits
        extra = dict(self.scenario)
        if self.sweep_param == "power_dbm":
            power = float(sweep_value)
        elif self.sweep_param == "gamma_s_db":
            gamma = float(sweep_value)
        elif self.sweep_param == "nrf":
            extra["Nrf"] = int(sweep_value)
        elif self.sweep_param == "kappa":
            bits = int(sweep_value) if sweep_value and sweep_value > 0 else None
        params = PhysicalParams(**self.params)
        return make_scenario(self.preset, seed, power_dbm=power, gamma_s_db=gamma,
                             phase_mode=PhaseMode(bits), params=params, **extra)

    def with_sweep(self, param: str, values) -> "ExperimentConfig":
        from dataclasses import replace
        return replace(self, sweep_param=param, sweep_values=tuple(float(v) for v in values))

    def problems(self):
        out = list(self.solver.problems())
        if self.rng.lower() != RNG_ALGORITHM:
            out.append(f"rng must be {RNG_ALGORITHM!r} (got {self.rng!r})")
        if self.num_seeds < 1:
            out.append("num_seeds must be >= 1")
        if self.preset not in PRESETS:
            out.append(f"unknown preset {self.preset!r}")
        for s in self.schemes:
            try:
                baselines.Scheme.parse(s)
            except ValueError as exc:
                out.append(str(exc))
        sweep_ok = True
        if self.sweep_param is not None:
            n_before = len(out)
            if self.sweep_param not in SWEEP_PARAMS:
                out.append(f"sweep_param must be one of {SWEEP_PARAMS}")
            vals = list(self.sweep_values)
            if not vals:
                out.append("sweep_values must not be empty")
            if not all(math.isfinite(v) for v in vals):
                out.append("sweep values must be finite")
            elif vals != sorted(vals):
                out.append("sweep values must be sorted ascending")
            sweep_ok = len(out) == n_before
        if not sweep_ok or self.preset not in PRESETS:
            return out
        for value in self.points():
            try:
                sc = self.scenario_for(self.seed, value)
            except (TypeError, ValueError) as exc:
                out.append(str(exc))
                break
            for p in sc.problems():
                msg = p if value is None else f"{p} (at {self.sweep_param}={value:g})"
                if msg not in out:
                    out.append(msg)
        return out

    def validate(self) -> "ExperimentConfig":
        problems = self.problems()
        if problems:
            raise ValidationError(problems)
        return self


def _to_int(text):
    value = float(text)
    if value != int(value):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(value)


def _to_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _to_floats(text):
    return tuple(float(x) for x in re.split(r"[,\s]+", text.strip()) if x)


def _to_phase_bits(text):
    low = text.strip().lower()
    if low in ("", "continuous", "inf", "none", "0"):
        return None
    return _to_int(low)


_SIZE_KEYS = ("Mt", "Mr", "Nt", "Nr", "Nrf", "K", "S", "T")
_SCENARIO_FLOATS = ("delta_t", "v_max", "d_min", "user_speed", "target_speed")
_PARAM_KEYS = {
    "altitude": ("altitude", float),
    "carrier_freq": ("carrier_freq", float),
    "antenna_spacing": ("antenna_spacing", float),
    "rcs_variance": ("rcs_variance", float),
    "ref_pathloss": ("ref_pathloss", float),
    "ref_pathloss_db": ("ref_pathloss", lambda s: float(db_to_linear(float(s)))),
    "noise_user": ("noise_user", float),
    "noise_user_dbm": ("noise_user", lambda s: float(dbm_to_watt(float(s)))),
    "noise_sensing": ("noise_sensing", float),
    "noise_sensing_dbm": ("noise_sensing", lambda s: float(dbm_to_watt(float(s)))),
}
_SOLVER_ALIASES = {"xi": "shrink_xi", "delta": "trust_region", "n1": "n1_max", "n2": "n2_max"}


def _option_lines(text):
    """Line number of every (section, key) in the file."""
    lines, section = {}, None
    for no, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip().lower()
            continue
        m = re.match(r"([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            lines.setdefault((section, m.group(1).strip().lower()), no)
    return lines


def load_config(text: str) -> ExperimentConfig:
    """Parse and validate an experiment configuration.

    Raises :class:`ParseError` (with line and field) for malformed input and
    :class:`ValidationError` listing every violated invariant.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ParseError("expected a [section] header", line=exc.lineno) from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ParseError(str(exc).split("\n")[0], line=exc.lineno,
                         field=getattr(exc, "option", None)) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ParseError("malformed line", line=line) from None

    where = _option_lines(text)
    cfg = ExperimentConfig()
    solver_changes = {}

    for section in parser.sections():
        sec = section.lower()
        if sec not in ("scenario", "solver", "experiment"):
            raise ParseError(f"unknown section [{section}]", line=where.get((sec, None)))
        for key, raw in parser.items(section):
            line = where.get((sec, key.lower()))
            try:
                _apply(cfg, solver_changes, sec, key, raw)
            except ParseError:
                raise
            except (TypeError, ValueError) as exc:
                raise ParseError(str(exc), line=line, field=f"{sec}.{key}") from None
            except KeyError:
                raise ParseError("unknown key", line=line, field=f"{sec}.{key}") from None

    if solver_changes:
        cfg.solver = cfg.solver.replace(**solver_changes)
    cfg.solver = cfg.solver.replace(seed=cfg.seed)
    return cfg.validate()


def _apply(cfg: ExperimentConfig, solver_changes: dict, sec: str, key: str, raw: str):
    value = raw.strip()
    if sec == "scenario":
        lower = key.lower()
        sizes = {k.lower(): k for k in _SIZE_KEYS}
        if lower == "preset":
            cfg.preset = value.lower()
        elif lower in sizes:
            cfg.scenario[sizes[lower]] = _to_int(value)
        elif lower in _SCENARIO_FLOATS:
            cfg.scenario[lower] = float(value)
        elif lower == "area":
            area = _to_floats(value)
            if len(area) != 2:
                raise ValueError("area needs two values: width, height")
            cfg.scenario["area"] = area
        elif lower == "power_dbm":
            cfg.power_dbm = float(value)
        elif lower == "power_w":
            cfg.power_dbm = 10.0 * math.log10(float(value)) + 30.0
        elif lower == "gamma_s_db":
            cfg.gamma_s_db = float(value)
        elif lower == "gamma_s":
            cfg.gamma_s_db = 10.0 * math.log10(float(value))
        elif lower in ("phase_bits", "kappa"):
            cfg.phase_bits = _to_phase_bits(value)
        elif lower == "weights":
            cfg.scenario["weights"] = np.array(_to_floats(value))
        elif lower in _PARAM_KEYS:
            name, conv = _PARAM_KEYS[lower]
            cfg.params[name] = conv(value)
        else:
            raise KeyError(key)
    elif sec == "solver":
        lower = _SOLVER_ALIASES.get(key.lower(), key.lower())
        if lower == "rng":
            cfg.rng = value
            return
        types = {f.name: f.type for f in fields(SolverConfig)}
        if lower not in types or lower == "seed":
            raise KeyError(key)
        kind = types[lower]
        if kind in ("int", int):
            solver_changes[lower] = _to_int(value)
        elif kind in ("bool", bool):
            solver_changes[lower] = _to_bool(value)
        else:
            solver_changes[lower] = float(value)
    else:
        lower = key.lower()
        if lower == "schemes":
            cfg.schemes = tuple(s.strip() for s in value.split(",") if s.strip())
        elif lower == "sweep_param":
            cfg.sweep_param = value.lower() or None
        elif lower == "sweep_values":
            cfg.sweep_values = _to_floats(value)
        elif lower == "num_seeds":
            cfg.num_seeds = _to_int(value)
        elif lower == "seed":
            cfg.seed = _to_int(value)
        elif lower == "outdir":
            cfg.outdir = value
        elif lower == "record_timing":
            cfg.record_timing = _to_bool(value)
        elif lower == "map_iters":
            cfg.map_iters = _to_int(value)
        else:
            raise KeyError(key)


def load_config_file(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return load_config(fh.read())


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

@dataclass
class ResultRecord:
    scheme: str
    seed: int
    sweep_param: Optional[str]
    sweep_value: Optional[float]
    wsr: float
    violation: float
    feasible: bool
    iters: int
    seconds: float
    status: str = ""
    error: Optional[str] = None
    trajectory: Optional[np.ndarray] = None     # (T, M, 2), rows of trajectories.csv
    convergence: list = field(default_factory=list)   # (outer_iter, wsr, violation)

    @property
    def failed(self) -> bool:
        return self.error is not None

    @property
    def key(self):
        return (self.scheme, self.seed, self.sweep_value)


def run_one(cfg: ExperimentConfig, scheme: str, seed: int, sweep_value=None) -> ResultRecord:
    """One deterministic scheme run; failures come back as a failed record."""
    name = baselines.Scheme.parse(scheme).value
    t0 = time.perf_counter()
    try:
        scenario = cfg.scenario_for(seed, sweep_value)
        sol, trace = baselines.run_scheme(name, scenario, cfg.solver.replace(seed=seed),
                                          map_iters=cfg.map_iters)
    except (UavIsacError, ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return ResultRecord(name, seed, cfg.sweep_param, sweep_value, float("nan"), float("nan"),
                            False, 0, time.perf_counter() - t0, status="Failed",
                            error=f"{type(exc).__name__}: {exc}")
    conv = [(row["outer_iter"], row["wsr"], row["violation"]) for row in trace.rows]
    violation = conv[-1][2] if conv else 0.0
    feasible = bool(sol.report.feasible and getattr(trace, "scheme_error", None) is None)
    return ResultRecord(name, seed, cfg.sweep_param, sweep_value, float(sol.wsr), float(violation),
                        feasible, int(sol.outer_iterations), time.perf_counter() - t0,
                        status=sol.status, trajectory=np.array(sol.Q), convergence=conv)


def run_experiment(cfg: ExperimentConfig, outdir: Optional[str] = None,
                   progress: Optional[Callable[[ResultRecord], None]] = None):
    """Run every (scheme, sweep value, seed) combination in a fixed order.

    With ``outdir`` the CSV files are rewritten from scratch and each record
    is appended (and flushed) as soon as its run finishes; plots are drawn
    at the end.  Failed runs are recorded, never raised.
    """
    writer = _Writer(outdir, cfg.record_timing) if outdir else None
    records = []
    try:
        for scheme in cfg.schemes:
            for value in cfg.points():
                for seed in cfg.seeds():
                    rec = run_one(cfg, scheme, seed, value)
                    records.append(rec)
                    if writer:
                        writer.append(rec)
                    if progress:
                        progress(rec)
    finally:
        if writer:
            writer.close()
    if outdir and records:
        write_plots(records, outdir)
    return records


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


class _Writer:
    """Appends records to the three CSV tables, flushing after every run."""

    def __init__(self, outdir, record_timing=False):
        try:
            os.makedirs(outdir, exist_ok=True)
            self._files = {
                name: open(os.path.join(outdir, name), "w", newline="", encoding="utf-8")
                for name in ("results.csv", "convergence.csv", "trajectories.csv")
            }
        except OSError as exc:
            raise IOError(f"cannot write to {outdir!r}: {exc}") from exc
        self.timing = record_timing
        self._csv = {k: csv.writer(f, lineterminator="\n") for k, f in self._files.items()}
        self._csv["results.csv"].writerow(RESULT_COLUMNS)
        self._csv["convergence.csv"].writerow(CONVERGENCE_COLUMNS)
        self._csv["trajectories.csv"].writerow(TRAJECTORY_COLUMNS)

    def append(self, r: ResultRecord):
        secs = _fmt(round(r.seconds, 3)) if self.timing else ""
        self._csv["results.csv"].writerow([
            r.scheme, r.seed, r.sweep_param or "", _fmt(r.sweep_value), _fmt(r.wsr),
            _fmt(r.violation), _fmt(r.feasible), r.iters, secs])
        for outer, wsr, viol in r.convergence:
            self._csv["convergence.csv"].writerow(
                [r.scheme, r.seed, _fmt(r.sweep_value), outer, _fmt(wsr), _fmt(viol)])
        if r.trajectory is not None:
            T, M, _ = r.trajectory.shape
            for m in range(M):
                for t in range(T):
                    x, y = r.trajectory[t, m]
                    self._csv["trajectories.csv"].writerow(
                        [r.scheme, r.seed, _fmt(r.sweep_value), m + 1, t, _fmt(x), _fmt(y)])
        for f in self._files.values():
            f.flush()

    def close(self):
        for f in self._files.values():
            f.close()


def emit_outputs(records, outdir, record_timing: bool = False):
    """Write results.csv, convergence.csv, trajectories.csv and SVG plots."""
    records = list(records)
    if not records:
        raise ValueError("no records to write")
    writer = _Writer(outdir, record_timing)
    try:
        for r in records:
            writer.append(r)
    finally:
        writer.close()
    return write_plots(records, outdir)


def mean_wsr(records, scheme: str):
    """Mean WSR per sweep value over successful runs, sorted by value."""
    groups = {}
    for r in records:
        if r.scheme == scheme and not r.failed:
            groups.setdefault(r.sweep_value, []).append(r.wsr)
    keys = sorted(groups, key=lambda v: (v is not None, v or 0.0))
    return [(k, float(np.mean(groups[k]))) for k in keys]


# minimal SVG line plots ------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")


def svg_lines(series, title="", xlabel="", ylabel="", width=560, height=380) -> str:
    """Polyline plot of ``[(label, xs, ys), ...]`` as an SVG string."""
    pad_l, pad_r, pad_t, pad_b = 60, 110, 30, 45
    pts = [(x, y) for _, xs, ys in series for x, y in zip(xs, ys) if np.isfinite(x) and np.isfinite(y)]
    if not pts:
        pts = [(0.0, 0.0), (1.0, 1.0)]
    xs_all, ys_all = zip(*pts)
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ys_all), max(ys_all)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def sx(x):
        return pad_l + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return pad_t + (1 - (y - y0) / (y1 - y0)) * ph

    out = io.StringIO()
    out.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
              f'font-family="sans-serif" font-size="11">\n')
    out.write(f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>\n')
    out.write(f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>\n')
    out.write(f'<text x="{pad_l + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{xlabel}</text>\n')
    out.write(f'<text x="14" y="{pad_t + ph / 2:.1f}" text-anchor="middle" '
              f'transform="rotate(-90 14 {pad_t + ph / 2:.1f})">{ylabel}</text>\n')
    for v, anchor, xy in ((x0, "start", (sx(x0), pad_t + ph + 14)), (x1, "end", (sx(x1), pad_t + ph + 14))):
        out.write(f'<text x="{xy[0]:.1f}" y="{xy[1]:.1f}" text-anchor="{anchor}">{v:.4g}</text>\n')
    for v in (y0, y1):
        out.write(f'<text x="{pad_l - 4}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:.4g}</text>\n')
    for i, (label, xs, ys) in enumerate(series):
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys)
                          if np.isfinite(x) and np.isfinite(y))
        out.write(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>\n')
        ly = pad_t + 12 + 14 * i
        out.write(f'<line x1="{width - pad_r + 8}" y1="{ly - 4}" x2="{width - pad_r + 24}" '
                  f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>\n')
        out.write(f'<text x="{width - pad_r + 28}" y="{ly}">{label}</text>\n')
    out.write("</svg>\n")
    return out.getvalue()


def write_plots(records, outdir):
    """Convergence, trajectory and sweep plots; returns the written paths."""
    os.makedirs(outdir, exist_ok=True)
    written = []

    def save(name, text):
        path = os.path.join(outdir, name)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        written.append(path)

    ok = [r for r in records if not r.failed]
    if ok:
        first = ok[0]
        series = [(f"{r.scheme} s{r.seed}", [c[0] for c in r.convergence], [c[1] for c in r.convergence])
                  for r in ok if r.sweep_value == first.sweep_value][:8]
        save("convergence.svg", svg_lines(series, "WSR per outer iteration", "outer iteration",
                                          "WSR (bit/s/Hz)"))
        if first.trajectory is not None:
            Q = first.trajectory
            series = [(f"UAV {m + 1}", Q[:, m, 0], Q[:, m, 1]) for m in range(Q.shape[1])]
            save("trajectories.svg", svg_lines(series, f"Trajectories ({first.scheme}, seed {first.seed})",
                                               "x (m)", "y (m)"))
    param = next((r.sweep_param for r in records if r.sweep_param), None)
    if param and ok:
        series = []
        for scheme in dict.fromkeys(r.scheme for r in ok):
            pts = mean_wsr(ok, scheme)
            series.append((scheme, [p[0] for p in pts], [p[1] for p in pts]))
        save(f"wsr_vs_{param}.svg", svg_lines(series, f"Mean WSR versus {param}", param, "WSR (bit/s/Hz)"))
    return written


def read_results(path):
    """results.csv as a list of dicts (strings)."""
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


__all__ = ["ExperimentConfig", "ResultRecord", "load_config", "load_config_file", "run_one",
           "run_experiment", "emit_outputs", "mean_wsr", "svg_lines", "write_plots", "read_results",
           "SWEEP_PARAMS", "RESULT_COLUMNS"]
