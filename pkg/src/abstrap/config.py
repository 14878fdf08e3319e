"""Pipeline configuration: a YAML document validated against fixed sections.

Unknown keys are rejected. Every error names the offending field and, when
the value came from a file, the line it sits on.
"""
from dataclasses import dataclass, field, fields, asdict
import math
from pathlib import Path
import re

import numpy as np
import yaml

from .fitting import FitConfig
from .physics import PhysicsParams, ReadoutClearingTable
from .simulator import EmissionPlan
from .constants import OMEGA_DEBYE_AL


class ConfigValidationError(ValueError):
    pass


@dataclass
class PhysicsSection:
    gap_ueV: float = 185.0
    beta: float = 8.73e15
    x_ne: float = 8.5e-7
    alpha: float = 38.51
    debye_omega: float = OMEGA_DEBYE_AL
    readout_depth_GHz: list = field(default_factory=lambda: [4.0, 9.0, 14.0])
    readout_rate_Hz: list = field(default_factory=lambda: [40e3, 30e3, 25e3])


@dataclass
class GridSection:
    temperatures_K: list = field(default_factory=lambda: [0.03, 0.05, 0.12, 0.16, 0.2])
    fluxes: list = field(default_factory=lambda: [0.3, 0.4, 0.5])
    powers_dBm: list = field(default_factory=lambda: [-133.0])


@dataclass
class SimulatorSection:
    sample_rate_Hz: float = 5e6
    rate_fraction: float = 0.0      # > 0: per-point f_s = fastest rate / rate_fraction
    duration_s: float = 0.3
    seed: int = 0
    segments: int = 1
    mode: str = "ctmc"
    sigma: float = 1e-3
    snr_at_reference: float = 25.0
    reference_power_dBm: float = -133.0
    angle_rad: float = 0.0


@dataclass
class HmmSection:
    n_states: int = 3
    snr_min: float = 3.0
    tol: float = 1e-3
    max_iter: int = 200
    max_downsample: int = 64
    bootstrap_powers: bool = True
    reuse_trans: bool = False


@dataclass
class FittingSection:
    trap_baseline_t_max: float = 0.080
    release_baseline_t_max: float = 0.060
    occupation_baseline_t_max: float = 0.060
    release_t_cut: float = 0.090
    release_include_below_cut: bool = False
    clip_fraction: float = 0.5
    weighting: str = "poisson"
    log_space: bool = False
    gap_init: float = 180.0
    consistency_threshold: float = 0.15


@dataclass
class OutputSection:
    dir: str = "out"
    compare_truth: bool = True


SECTIONS = {
    "physics": PhysicsSection,
    "grid": GridSection,
    "simulator": SimulatorSection,
    "hmm": HmmSection,
    "fitting": FittingSection,
    "output": OutputSection,
}


@dataclass
class PipelineConfig:
    physics: PhysicsSection = field(default_factory=PhysicsSection)
    grid: GridSection = field(default_factory=GridSection)
    simulator: SimulatorSection = field(default_factory=SimulatorSection)
    hmm: HmmSection = field(default_factory=HmmSection)
    fitting: FittingSection = field(default_factory=FittingSection)
    output: OutputSection = field(default_factory=OutputSection)
    source: str = ""

    def physics_params(self):
        p = self.physics
        return PhysicsParams(gap=p.gap_ueV, beta=p.beta, x_ne=p.x_ne, alpha=p.alpha,
                             debye_omega=p.debye_omega,
                             readout=ReadoutClearingTable(tuple(p.readout_depth_GHz),
                                                          tuple(p.readout_rate_Hz)))

    def emission_plan(self):
        s = self.simulator
        return EmissionPlan(sigma=s.sigma, snr_at_reference=s.snr_at_reference,
                            reference_power=s.reference_power_dBm, angle=s.angle_rad)

    def fit_config(self):
        f = self.fitting
        return FitConfig(trap_baseline_t_max=f.trap_baseline_t_max,
                         release_baseline_t_max=f.release_baseline_t_max,
                         occupation_baseline_t_max=f.occupation_baseline_t_max,
                         release_t_cut=f.release_t_cut,
                         release_include_below_cut=f.release_include_below_cut,
                         clip_fraction=f.clip_fraction, weighting=f.weighting,
                         log_space=f.log_space, gap_init=f.gap_init,
                         consistency_threshold=f.consistency_threshold)

    def to_dict(self):
        out = {name: asdict(getattr(self, name)) for name in SECTIONS}
        return out


# --------------------------------------------------------------------------
# loading


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot or sign (1e6)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                   |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                   |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                   |[-+]?\.(?:inf|Inf|INF)
                   |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def _where(source, node):
    if node is None:
        return source or "<config>"
    return f"{source or '<config>'}:{node.start_mark.line + 1}"


def _node_value(node):
    """Plain Python value of a YAML node."""
    return yaml.load(yaml.serialize(node), Loader=_Loader)


def _mapping_items(node, where, path):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigValidationError(f"{where(node)}: {path or 'document'} must be a mapping")
    seen = set()
    for k, v in node.value:
        key = _node_value(k)
        if key in seen:
            raise ConfigValidationError(f"{where(k)}: duplicate key {path + '.' if path else ''}{key}")
        seen.add(key)
        yield key, k, v


def _check_type(name, value, default, where_node):
    kind = type(default)
    if kind is bool:
        ok = isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif kind is list:
        ok = isinstance(value, list) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
        value = [float(v) for v in value] if ok else value
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConfigValidationError(f"{where_node}: {name} should be {kind.__name__}, "
                                    f"got {type(value).__name__}")
    return value


def parse_config(text, source=""):
    """Build a validated :class:`PipelineConfig` from YAML text."""
    try:
        root = yaml.compose(text, Loader=_Loader)
    except yaml.YAMLError as err:
        raise ConfigValidationError(f"{source or '<config>'}: YAML syntax error: {err}") from err

    def where(node):
        return _where(source, node)

    cfg = PipelineConfig(source=str(source))
    lines = {}
    if root is None:
        validate(cfg, lines)
        return cfg
    for sec_name, knode, vnode in _mapping_items(root, where, ""):
        if sec_name not in SECTIONS:
            raise ConfigValidationError(f"{where(knode)}: unknown section {sec_name!r} "
                                        f"(expected one of {', '.join(SECTIONS)})")
        section = getattr(cfg, sec_name)
        known = {f.name: f for f in fields(section)}
        for key, kn, vn in _mapping_items(vnode, where, sec_name):
            dotted = f"{sec_name}.{key}"
            if key not in known:
                raise ConfigValidationError(f"{where(kn)}: unknown key {dotted}")
            value = _node_value(vn)
            value = _check_type(dotted, value, getattr(section, key), where(vn))
            setattr(section, key, value)
            lines[dotted] = where(vn)
    validate(cfg, lines)
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigValidationError(f"{path}: cannot read config ({err.strerror})") from err
    return parse_config(text, str(path))


def dump_config(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=None)


def validate(cfg, lines=None):
    """Range and consistency checks; raises :class:`ConfigValidationError`."""
    lines = lines or {}

    def fail(name, msg):
        loc = lines.get(name, cfg.source or "<config>")
        raise ConfigValidationError(f"{loc}: {name}: {msg}")

    def positive(name, v):
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
            fail(name, f"must be positive, got {v!r}")

    p, g, s, h, f = cfg.physics, cfg.grid, cfg.simulator, cfg.hmm, cfg.fitting
    for name in ("gap_ueV", "beta", "x_ne", "debye_omega"):
        positive(f"physics.{name}", getattr(p, name))
    if not (math.isfinite(p.alpha) and p.alpha >= 0):
        fail("physics.alpha", "must be non-negative")
    d, r = np.asarray(p.readout_depth_GHz), np.asarray(p.readout_rate_Hz)
    if d.size == 0 or d.shape != r.shape:
        fail("physics.readout_rate_Hz", "needs one rate per readout_depth_GHz knot")
    if np.any(np.diff(d) <= 0):
        fail("physics.readout_depth_GHz", "knots must be strictly increasing")
    if np.any(r < 0):
        fail("physics.readout_rate_Hz", "rates must be non-negative")

    if not g.temperatures_K:
        fail("grid.temperatures_K", "must not be empty")
    if any(not (t > 0) for t in g.temperatures_K):
        fail("grid.temperatures_K", "temperatures must be positive")
    if not g.fluxes:
        fail("grid.fluxes", "must not be empty")
    for v in g.fluxes:
        if not (0.0 <= v <= 1.0):
            fail("grid.fluxes", f"flux {v!r} outside [0, 1]")
    if not g.powers_dBm:
        fail("grid.powers_dBm", "must not be empty")
    for name in ("temperatures_K", "fluxes", "powers_dBm"):
        vals = getattr(g, name)
        if len(set(vals)) != len(vals):
            fail(f"grid.{name}", "values must be unique")

    positive("simulator.sample_rate_Hz", s.sample_rate_Hz)
    positive("simulator.duration_s", s.duration_s)
    positive("simulator.sigma", s.sigma)
    positive("simulator.snr_at_reference", s.snr_at_reference)
    if s.seed < 0 or s.seed >= 2 ** 64:
        fail("simulator.seed", "must fit in an unsigned 64-bit integer")
    if not 0.0 <= s.rate_fraction < 0.5:
        fail("simulator.rate_fraction", "must lie in [0, 0.5); 0 keeps sample_rate_Hz fixed")
    if s.segments < 1:
        fail("simulator.segments", "must be at least 1")
    if s.mode not in ("ctmc", "discrete"):
        fail("simulator.mode", f"must be 'ctmc' or 'discrete', got {s.mode!r}")

    if h.n_states < 2:
        fail("hmm.n_states", "must be at least 2")
    positive("hmm.snr_min", h.snr_min)
    positive("hmm.tol", h.tol)
    if h.max_iter < 1:
        fail("hmm.max_iter", "must be at least 1")
    if h.max_downsample < 1:
        fail("hmm.max_downsample", "must be at least 1")

    for name in ("trap_baseline_t_max", "release_baseline_t_max", "occupation_baseline_t_max",
                 "release_t_cut", "clip_fraction", "consistency_threshold"):
        positive(f"fitting.{name}", getattr(f, name))
    if f.weighting not in ("poisson", "none"):
        fail("fitting.weighting", f"must be 'poisson' or 'none', got {f.weighting!r}")
    if not (100.0 <= f.gap_init <= 300.0):
        fail("fitting.gap_init", "must lie in [100, 300] ueV")
    if not cfg.output.dir:
        fail("output.dir", "must not be empty")
    return cfg
