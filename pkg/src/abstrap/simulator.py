"""Synthetic telegraph records: hidden occupation paths and IQ emissions."""
from dataclasses import dataclass, field, replace
import math

import numpy as np

from . import _kernels
from .physics import PhysicsParams, trap_depth


class ConfigError(ValueError):
    """Invalid generator configuration (rates, matrices, durations)."""


@dataclass(frozen=True)
class GaussianEmission:
    center: tuple
    std_dev: tuple

    def __post_init__(self):
        if len(self.center) != 2 or len(self.std_dev) != 2:
            raise ValueError("emissions are two-dimensional (I, Q)")
        if min(self.std_dev) <= 0:
            raise ValueError("emission standard deviations must be positive")

    @property
    def mean_std(self):
        """Geometric mean of the per-axis standard deviations."""
        return math.sqrt(self.std_dev[0] * self.std_dev[1])


@dataclass
class Record:
    """Uniformly sampled (I, Q) voltages plus acquisition metadata."""

    samples: np.ndarray
    sample_rate: float
    temperature: float = float("nan")
    flux: float = float("nan")
    power: float = float("nan")
    seed: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 2 or self.samples.shape[1] != 2:
            raise ValueError("record samples must have shape (n, 2)")
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self):
        return len(self) / self.sample_rate


@dataclass
class StateSequence:
    states: np.ndarray
    sample_rate: float
    mean_occupation: float = field(init=False)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        self.mean_occupation = float(self.states.mean()) if self.states.size else float("nan")

    def __len__(self):
        return self.states.shape[0]


def n_samples_for(sample_rate, duration):
    if sample_rate <= 0 or duration < 0:
        raise ConfigError("sample rate must be positive and duration non-negative")
    return int(round(sample_rate * duration))


def stationary_distribution(generator=None, trans=None):
    """Stationary vector of a rate matrix (``generator`` off-diagonals) or a transition matrix."""
    if generator is not None:
        q = np.array(generator, dtype=float)
        np.fill_diagonal(q, 0.0)
        np.fill_diagonal(q, -q.sum(axis=1))
    else:
        q = np.asarray(trans, dtype=float) - np.eye(len(trans))
    k = q.shape[0]
    a = np.vstack([q.T, np.ones(k)])
    rhs = np.zeros(k + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(a, rhs, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def _initial_state(dist, rng):
    return int(min(np.searchsorted(np.cumsum(dist), rng.random(), side="right"), len(dist) - 1))


def check_rates(rates, sample_rate):
    rates = np.asarray(rates, dtype=float)
    if rates.ndim != 2 or rates.shape[0] != rates.shape[1]:
        raise ConfigError("rate matrix must be square")
    off = rates[~np.eye(len(rates), dtype=bool)]
    if np.any(off < 0) or not np.all(np.isfinite(off)):
        raise ConfigError("transition rates must be finite and non-negative")
    if off.size and off.max() >= sample_rate / 2:
        raise ConfigError(
            f"rate {off.max():.4g} Hz is not below half the sample rate ({sample_rate / 2:.4g} Hz)")


def simulate_states_ctmc(rates, sample_rate, duration, seed, start_state=None, backend=None):
    """Continuous-time chain with exponential dwells, sampled and held at ``sample_rate``.

    ``rates[i, j]`` is the i -> j rate in Hz (diagonal ignored). The start
    state is drawn from the stationary distribution unless given; a chain
    with no transitions starts in state 0.
    """
    rates = np.array(rates, dtype=float)
    np.fill_diagonal(rates, 0.0)
    check_rates(rates, sample_rate)
    n = n_samples_for(sample_rate, duration)
    rng = np.random.default_rng(seed)
    if start_state is None:
        start_state = 0 if not rates.any() else _initial_state(
            stationary_distribution(generator=rates), rng)
    states = _kernels.ctmc_path(rates, sample_rate, n, start_state, rng, backend)
    return StateSequence(states, sample_rate)


def check_transition_matrix(trans):
    trans = np.asarray(trans, dtype=float)
    if trans.ndim != 2 or trans.shape[0] != trans.shape[1]:
        raise ConfigError("transition matrix must be square")
    if np.any(trans < 0) or np.any(trans > 1):
        raise ConfigError("transition probabilities must lie in [0, 1]")
    if np.any(np.abs(trans.sum(axis=1) - 1.0) > 1e-12):
        raise ConfigError("transition matrix rows must sum to 1")


def simulate_states_discrete(trans, sample_rate, duration, seed, start_state=None, backend=None):
    """Discrete-time chain stepping once per sample with probabilities ``trans``."""
    check_transition_matrix(trans)
    trans = np.asarray(trans, dtype=float)
    n = n_samples_for(sample_rate, duration)
    rng = np.random.default_rng(seed)
    if start_state is None:
        start_state = 0 if np.allclose(trans, np.eye(len(trans))) else _initial_state(
            stationary_distribution(trans=trans), rng)
    states = _kernels.discrete_path(trans, n, start_state, rng, backend)
    return StateSequence(states, sample_rate)


def transition_matrix_from_rates(rates, sample_rate):
    """Per-step matrix with off-diagonals (G/f_s) exp(-G/f_s), the HMM's rate link."""
    from .hmm import transition_prob_from_rate

    rates = np.array(rates, dtype=float)
    np.fill_diagonal(rates, 0.0)
    trans = transition_prob_from_rate(rates, sample_rate)
    np.fill_diagonal(trans, 0.0)
    np.fill_diagonal(trans, 1.0 - trans.sum(axis=1))
    if np.any(np.diag(trans) < 0):
        raise ConfigError("rates too fast for a per-step transition matrix at this sample rate")
    return trans


def emit_iq(states, emissions, seed, sample_rate=None, **metadata):
    """Draw one independent 2-D Gaussian sample per time step, conditioned on state."""
    if isinstance(states, StateSequence):
        sample_rate = states.sample_rate if sample_rate is None else sample_rate
        states = states.states
    states = np.asarray(states, dtype=np.int64)
    if states.size and states.max() >= len(emissions):
        raise ValueError("need one emission per state")
    centers = np.array([e.center for e in emissions], dtype=float)
    stds = np.array([e.std_dev for e in emissions], dtype=float)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((states.size, 2))
    samples = centers[states] + stds[states] * noise
    rec_seed = int(seed) if isinstance(seed, (int, np.integer)) else 0
    return Record(samples, sample_rate, seed=rec_seed, **metadata)


def snr(a, b):
    """Power SNR: squared center separation over the product of mean widths."""
    d = np.subtract(a.center, b.center)
    return float(d @ d) / (a.mean_std * b.mean_std)


def boxcar_downsample(record, factor):
    """Average non-overlapping blocks of ``factor`` samples; drops a partial tail."""
    factor = int(factor)
    if factor < 1:
        raise ValueError("downsampling factor must be a positive integer")
    if factor > len(record):
        raise ValueError("downsampling factor exceeds the record length")
    if factor == 1:
        return record
    m = len(record) // factor
    blocks = record.samples[: m * factor].reshape(m, factor, 2)
    return replace(record, samples=blocks.mean(axis=1), sample_rate=record.sample_rate / factor)


# --------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class EmissionPlan:
    """Emission geometry as a function of readout power.

    State ``n`` (n trapped QPs) sits at ``origin + n * separation * (cos a, sin a)``
    with isotropic width ``sigma``. The separation follows from the SNR, which
    scales linearly with readout power around ``reference_power``.
    """

    sigma: float = 1e-3
    snr_at_reference: float = 16.0
    reference_power: float = -133.0
    angle: float = 0.0
    origin: tuple = (0.0, 0.0)

    def snr_at(self, power):
        if power is None or np.isnan(power):
            return self.snr_at_reference
        return self.snr_at_reference * 10.0 ** ((power - self.reference_power) / 10.0)

    def emissions(self, n_states, power=None):
        sep = self.sigma * math.sqrt(self.snr_at(power))
        ux, uy = math.cos(self.angle), math.sin(self.angle)
        return [GaussianEmission((self.origin[0] + n * sep * ux, self.origin[1] + n * sep * uy),
                                 (self.sigma, self.sigma))
                for n in range(n_states)]


@dataclass
class SweepPoint:
    temperature: float
    flux: float
    power: float
    segment: int
    seed: int
    delta_a: float
    rates: np.ndarray
    record: Record
    truth: StateSequence


_U64 = (1 << 64) - 1


def point_seed(seed, *index):
    """Deterministic per-point seed, independent of iteration order."""
    # two's complement keeps negative coordinates (dBm) valid as entropy words
    ss = np.random.SeedSequence([int(seed) & _U64, *[int(i) & _U64 for i in index]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def sweep_rate_matrix(physics, flux, temperature):
    rs = physics.rates(flux, temperature)
    return np.array([[0.0, rs.trap], [rs.release, 0.0]])


def point_sample_rate(rates, sample_rate, rate_fraction=None):
    """Sample rate for one sweep point.

    With ``rate_fraction`` set, f_s is chosen so the fastest rate is that
    fraction of f_s (rounded up to a whole kHz); otherwise the fixed
    ``sample_rate`` is used.
    """
    if not rate_fraction:
        return float(sample_rate)
    if not 0 < rate_fraction < 0.5:
        raise ConfigError("rate_fraction must lie in (0, 0.5)")
    fastest = float(np.max(rates))
    return float(math.ceil(fastest / rate_fraction / 1e3) * 1e3) if fastest > 0 else float(sample_rate)


def synthesize_point(physics, plan, temperature, flux, power, segment, sample_rate, duration,
                     seed, mode="ctmc", backend=None, rate_fraction=None):
    """One record plus its ground-truth path for a single sweep coordinate."""
    rates = sweep_rate_matrix(physics, flux, temperature)
    sample_rate = point_sample_rate(rates, sample_rate, rate_fraction)
    check_rates(rates, sample_rate)
    s = point_seed(seed, segment, *np.round(np.array([temperature * 1e6, flux * 1e6,
                                                      (0 if np.isnan(power) else power) * 1e3])))
    state_seed, emit_seed = np.random.SeedSequence(s).spawn(2)
    if mode == "ctmc":
        truth = simulate_states_ctmc(rates, sample_rate, duration, state_seed, backend=backend)
    elif mode == "discrete":
        trans = transition_matrix_from_rates(rates, sample_rate)
        truth = simulate_states_discrete(trans, sample_rate, duration, state_seed, backend=backend)
    else:
        raise ConfigError(f"unknown generator mode {mode!r}")
    emissions = plan.emissions(2, power)
    rec = emit_iq(truth, emissions, emit_seed, temperature=float(temperature),
                  flux=float(flux), power=float(power))
    rec.seed = s
    return SweepPoint(float(temperature), float(flux), float(power), int(segment), s,
                      trap_depth(flux, physics.gap), rates, rec, truth)


def synthesize_sweep(temperatures, fluxes, physics, plan, sample_rate, duration, seed,
                     powers=(float("nan"),), segments=1, mode="ctmc", backend=None,
                     rate_fraction=None):
    """Generate every (T, flux, power, segment) point of a sweep, in grid order."""
    if physics is None:
        physics = PhysicsParams()
    # validate the whole grid before spending time generating
    for t in temperatures:
        for f in fluxes:
            rates = sweep_rate_matrix(physics, f, t)
            check_rates(rates, point_sample_rate(rates, sample_rate, rate_fraction))
    return [synthesize_point(physics, plan, t, f, p, s, sample_rate, duration, seed, mode, backend,
                             rate_fraction)
            for t in temperatures for f in fluxes for p in powers for s in range(segments)]
