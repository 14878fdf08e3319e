"""Gaussian-emission hidden Markov models for trapped-QP telegraph records.

The fitting is Baum-Welch EM with diagonal-covariance 2-D Gaussian
emissions. State 0 is always the most occupied state (no trapped QP); the
remaining states are ordered by distance of their emission centers from
state 0, so state 1 is "one trapped QP".
"""
from dataclasses import dataclass, field, replace
import math

import numpy as np

from . import _kernels
from .simulator import GaussianEmission, Record, StateSequence, boxcar_downsample, snr
from .specfun import INV_E, lambert_w0

CLAMP_TOL = 1e-9
NEUTRAL_STAY = 0.999
INIT_MAX_SAMPLES = 250_000
MERGE_SNR = 0.01   # two states closer than this are one cluster


class DegenerateFitError(RuntimeError):
    """A hidden state lost (nearly) all of its responsibility mass."""

    def __init__(self, message, collapsed=(), model=None):
        super().__init__(message)
        self.collapsed = tuple(collapsed)
        self.model = model


class IdentifiabilityError(ValueError):
    """Transition probability above 1/e: the rate cannot be resolved at this f_s."""


@dataclass(frozen=True)
class HmmModel:
    trans: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    initial: np.ndarray
    sample_rate: float
    occupancy: np.ndarray = None
    log_likelihood: float = float("nan")
    history: tuple = ()
    n_iter: int = 0
    converged: bool = False

    def __post_init__(self):
        trans = np.asarray(self.trans, dtype=float)
        k = trans.shape[0]
        if k < 2 or trans.shape != (k, k):
            raise ValueError("need a square transition matrix with at least 2 states")
        if np.any(trans < 0) or np.any(trans > 1) or np.any(np.abs(trans.sum(1) - 1) > 1e-12):
            raise ValueError("transition matrix must be row-stochastic")
        object.__setattr__(self, "trans", trans)
        object.__setattr__(self, "means", np.asarray(self.means, dtype=float).reshape(k, 2))
        object.__setattr__(self, "stds", np.asarray(self.stds, dtype=float).reshape(k, 2))
        object.__setattr__(self, "initial", np.asarray(self.initial, dtype=float).reshape(k))
        if self.occupancy is None:
            from .simulator import stationary_distribution
            object.__setattr__(self, "occupancy", stationary_distribution(trans=trans))
        if np.any(self.stds <= 0):
            raise ValueError("emission widths must be positive")

    @property
    def n_states(self):
        return self.trans.shape[0]

    @property
    def emissions(self):
        return [GaussianEmission(tuple(m), tuple(s)) for m, s in zip(self.means, self.stds)]

    def snr(self):
        """SNR between the two most-occupied states."""
        a, b = np.argsort(-self.occupancy, kind="stable")[:2]
        em = self.emissions
        return snr(em[a], em[b])

    def rates(self):
        return rates_from_transition_matrix(self.trans, self.sample_rate)

    def log_emission(self, samples, backend=None):
        return _kernels.log_emission(samples, self.means, self.stds, backend)


@dataclass
class AnalysisResult:
    model: HmmModel
    decoded: StateSequence
    rates: np.ndarray
    mean_occupation: float
    effective_sample_rate: float
    achieved_snr: float
    log_likelihood: float
    downsample_factor: int = 1
    flags: tuple = ()

    @property
    def trap_rate(self):
        return float(self.rates[0, 1]) if self.rates is not None else float("nan")

    @property
    def release_rate(self):
        return float(self.rates[1, 0]) if self.rates is not None else float("nan")

    @property
    def gate_failed(self):
        return any(f in self.flags for f in ("gate", "degenerate", "unresolvable"))


# --------------------------------------------------------------------------
# rate link


def transition_prob_from_rate(rate, sample_rate):
    """Probability of exactly one Poisson event per sample: (G/f_s) exp(-G/f_s)."""
    x = np.asarray(rate, dtype=float) / sample_rate
    if np.any(x < 0):
        raise ValueError("rates must be non-negative")
    out = x * np.exp(-x)
    return float(out) if out.ndim == 0 else out


def rates_from_transition_matrix(trans, sample_rate):
    """Off-diagonal rates G_ij = -f_s W0(-T_ij); the diagonal is zero."""
    trans = np.asarray(trans, dtype=float)
    off = ~np.eye(trans.shape[0], dtype=bool)
    p = trans[off]
    if np.any(p > INV_E + CLAMP_TOL):
        i, j = np.argwhere((trans > INV_E + CLAMP_TOL) & off)[0]
        raise IdentifiabilityError(
            f"T[{i},{j}] = {trans[i, j]:.6g} exceeds 1/e; rate not resolvable at f_s = {sample_rate:g} Hz")
    p = np.minimum(p, INV_E)
    out = np.zeros_like(trans)
    out[off] = -sample_rate * lambert_w0(-p)
    return out


def mode_lifetimes(trans, sample_rate):
    """Per-state mean dwell -1 / (f_s ln T_ii) in seconds."""
    diag = np.diag(np.asarray(trans, dtype=float))
    if np.any(diag <= 0):
        raise ValueError("mode lifetime undefined for T_ii = 0")
    with np.errstate(divide="ignore"):
        out = -1.0 / (sample_rate * np.log(diag))
    out[diag == 1.0] = np.inf
    return out


# --------------------------------------------------------------------------
# fitting


def neutral_init(record, n_states):
    """Deterministic starting model for telegraph data.

    Two k-means passes place the dominant (median) cluster and the second
    cluster; extra states continue the ladder of equally spaced centers,
    mirroring the additive shift per trapped QP. Long records are clustered
    on an evenly strided subset; EM refines the result anyway.
    """
    x = np.asarray(record.samples, dtype=float)
    x = x[:: max(1, -(-len(x) // INIT_MAX_SAMPLES))]
    c0 = np.median(x, axis=0)
    d = np.linalg.norm(x - c0, axis=1)
    far = x[d >= np.quantile(d, 0.999)]
    c1 = far.mean(axis=0)
    for _ in range(2):
        near1 = ((x - c1) ** 2).sum(1) < ((x - c0) ** 2).sum(1)
        if near1.all() or not near1.any():
            break
        c0 = x[~near1].mean(axis=0)
        c1 = x[near1].mean(axis=0)
    near1 = ((x - c1) ** 2).sum(1) < ((x - c0) ** 2).sum(1)
    if near1.mean() > 0.5:
        c0, c1 = c1, c0
        near1 = ~near1
    resid = np.where(near1[:, None], x - c1, x - c0)
    pooled = np.sqrt(np.maximum((resid ** 2).mean(axis=0), 1e-30))
    step = c1 - c0
    means = np.array([c0 + n * step for n in range(n_states)])
    stds = np.tile(pooled, (n_states, 1))
    trans = np.full((n_states, n_states), (1.0 - NEUTRAL_STAY) / (n_states - 1))
    np.fill_diagonal(trans, NEUTRAL_STAY)
    initial = np.full(n_states, 1.0 / n_states)
    return HmmModel(trans, means, stds, initial, record.sample_rate)


def _order_states(trans, means, stds, initial, mass):
    first = int(np.argmax(mass))
    dist = np.linalg.norm(means - means[first], axis=1)
    dist[first] = -1.0
    order = np.argsort(dist, kind="stable")
    return (trans[np.ix_(order, order)], means[order], stds[order], initial[order],
            mass[order])


def _merged_states(means, stds, mass):
    """Less-occupied member of every pair of states with pair SNR below MERGE_SNR."""
    out = set()
    k = len(means)
    for i in range(k):
        for j in range(i + 1, k):
            sep = np.sum((means[i] - means[j]) ** 2)
            if sep / math.sqrt(np.prod(stds[i]) * np.prod(stds[j])) < MERGE_SNR:
                out.add(j if mass[j] <= mass[i] else i)
    return sorted(out)


def fit_hmm(record, n_states=3, init=None, max_iter=200, tol=1e-3, min_state_mass=None,
            backend=None, fix_trans=False):
    """Baum-Welch fit of a diagonal-Gaussian HMM to ``record``.

    Stops when the log-likelihood changes by less than ``tol`` or after
    ``max_iter`` iterations. Raises :class:`DegenerateFitError` if a state's
    expected sample count drops below ``min_state_mass`` (default: 1e-4 of
    the record, at least 5 samples) or if two states end up at the same
    center (pair SNR below ``MERGE_SNR``). With ``fix_trans`` the transition
    matrix of ``init`` is held fixed and only emissions are refitted.
    """
    x = np.asarray(record.samples, dtype=float)
    n = x.shape[0]
    if n == 0:
        raise ValueError("cannot fit an empty record")
    if init is None:
        init = neutral_init(record, n_states)
    elif init.n_states != n_states:
        raise ValueError(f"init has {init.n_states} states, expected {n_states}")
    if min_state_mass is None:
        min_state_mass = max(5.0, 1e-4 * n)

    var_floor = 1e-6 * x.var(axis=0) + 1e-300
    trans, means, stds, initial = init.trans, init.means, init.stds, init.initial
    model = replace(init, sample_rate=record.sample_rate)
    history = []
    converged = False
    for it in range(max_iter):
        log_b = model.log_emission(x, backend)
        gamma, xi, ll = _kernels.forward_backward(log_b, trans, initial, backend)
        mass, means, var = _kernels.weighted_moments(gamma, x, backend)
        if history and abs(ll - history[-1]) < tol:
            history.append(ll)
            converged = True
            break
        history.append(ll)
        low = np.flatnonzero(mass < min_state_mass)
        if low.size:
            raise DegenerateFitError(
                f"state(s) {low.tolist()} collapsed (mass {mass[low].round(2).tolist()})",
                collapsed=low, model=model)
        # M step
        if not fix_trans:
            rows = xi.sum(axis=1, keepdims=True)
            trans = np.where(rows > 0, xi / np.where(rows > 0, rows, 1.0), np.eye(n_states))
            trans = trans / trans.sum(axis=1, keepdims=True)
        initial = gamma[0] / gamma[0].sum()
        stds = np.sqrt(np.maximum(var, var_floor))
        model = HmmModel(trans, means, stds, initial, record.sample_rate, occupancy=mass / n)

    merged = _merged_states(model.means, model.stds, mass)
    if merged:
        raise DegenerateFitError(f"state(s) {merged} coincide with a more occupied state",
                                 collapsed=merged, model=model)
    trans, means, stds, initial, mass = _order_states(model.trans, model.means, model.stds,
                                                      model.initial, mass)
    return HmmModel(trans, means, stds, initial, record.sample_rate, occupancy=mass / n,
                    log_likelihood=float(history[-1]), history=tuple(history),
                    n_iter=len(history), converged=converged)


def viterbi(model, record, backend=None):
    """Most likely state path; the mean of the path is the mean occupation."""
    if not math.isclose(model.sample_rate, record.sample_rate, rel_tol=1e-9):
        raise ValueError("model and record sample rates differ")
    with np.errstate(divide="ignore"):
        path, _ = _kernels.viterbi(model.log_emission(record.samples), np.log(model.trans),
                                   np.log(model.initial), backend)
    return StateSequence(path, record.sample_rate)


def path_log_probability(model, record, states):
    """Joint log-probability of ``states`` and the observations under ``model``."""
    states = np.asarray(getattr(states, "states", states), dtype=np.int64)
    log_b = model.log_emission(record.samples)
    with np.errstate(divide="ignore"):
        lt = np.log(model.trans)
        li = np.log(model.initial)
    return float(li[states[0]] + log_b[np.arange(len(states)), states].sum()
                 + lt[states[:-1], states[1:]].sum())


# --------------------------------------------------------------------------
# gated analysis


def _occupied(model, min_fraction=1e-3):
    return np.flatnonzero(model.occupancy >= min_fraction)


def _min_lifetime(model):
    occ = _occupied(model)
    diag = np.diag(model.trans)[occ]
    if np.any(diag <= 0):
        return 0.0
    return float(mode_lifetimes(np.diag(diag), model.sample_rate).min())


def _rescaled_init(model, factor, sample_rate, n_states):
    """Carry a fitted model over to a record boxcar-averaged by ``factor``."""
    keep = np.sort(np.argsort(-model.occupancy, kind="stable")[:n_states])
    try:
        rates = rates_from_transition_matrix(model.trans, model.sample_rate)[np.ix_(keep, keep)]
        trans = transition_prob_from_rate(rates, sample_rate)
        np.fill_diagonal(trans, 0.0)
        np.fill_diagonal(trans, 1.0 - trans.sum(axis=1))
        if np.any(np.diag(trans) <= 0):
            raise IdentifiabilityError("rates too fast after rescaling")
    except IdentifiabilityError:
        trans = np.full((n_states, n_states), (1.0 - NEUTRAL_STAY) / (n_states - 1))
        np.fill_diagonal(trans, NEUTRAL_STAY)
    initial = np.full(n_states, 1.0 / n_states)
    return HmmModel(trans, model.means[keep], model.stds[keep] / math.sqrt(factor), initial,
                    sample_rate)


def _drop_states(model, drop):
    keep = np.setdiff1d(np.arange(model.n_states), drop)
    if keep.size < 2:
        return None
    trans = model.trans[np.ix_(keep, keep)]
    trans = trans / trans.sum(axis=1, keepdims=True)
    initial = model.initial[keep] / model.initial[keep].sum()
    return HmmModel(trans, model.means[keep], model.stds[keep], initial, model.sample_rate)


def _failed_result(record, factor, flags, model=None):
    return AnalysisResult(model, None, None, float("nan"), record.sample_rate,
                          float("nan") if model is None else model.snr(),
                          float("nan"), factor, tuple(flags))


def analyze_record(record, init=None, snr_min=3.0, n_states=3, max_iter=200, tol=1e-3,
                   max_downsample=64, backend=None, fix_trans=False):
    """Fit, gate and decode one record.

    If the fitted SNR is below ``snr_min`` the record is boxcar-averaged by 2
    and refitted, as long as the integration time stays within half the
    shortest occupied mode lifetime. Conflicting constraints are reported
    via the ``gate`` flag rather than raised. ``fix_trans`` keeps the
    transition matrix of ``init`` (rescaled to each sample rate) fixed.
    """
    rec = record
    factor = 1
    flags = []
    current_init = init
    states = n_states if init is None else init.n_states
    while True:
        try:
            model = fit_hmm(rec, states, init=current_init, max_iter=max_iter, tol=tol,
                            backend=backend, fix_trans=fix_trans and current_init is not None)
        except DegenerateFitError as err:
            if states > 2:
                current_init = _drop_states(err.model, err.collapsed) if err.model is not None else None
                states = current_init.n_states if current_init is not None else states - 1
                continue
            flags.append("degenerate")
            return _failed_result(rec, factor, flags)
        if not model.converged:
            flags.append("max_iter")
        achieved = model.snr()
        lifetime = _min_lifetime(model)
        lifetime_ok = 1.0 / rec.sample_rate <= lifetime / 2.0
        if achieved >= snr_min:
            if not lifetime_ok:
                flags.append("gate")
            break
        # SNR too low: average down unless that breaks the lifetime rule
        next_rate = rec.sample_rate / 2.0
        if (not lifetime_ok or 1.0 / next_rate > lifetime / 2.0 or factor * 2 > max_downsample
                or len(rec) < 4 * max(states, 2)):
            flags.append("gate")
            break
        rec = boxcar_downsample(rec, 2)
        factor *= 2
        current_init = _rescaled_init(model, 2, rec.sample_rate, states)

    decoded = viterbi(model, rec, backend)
    try:
        rates = model.rates()
    except IdentifiabilityError:
        flags.append("unresolvable")
        rates = None
    if "degenerate" not in flags and factor > 1:
        flags.append(f"downsampled_x{factor}")
    return AnalysisResult(model, decoded, rates, decoded.mean_occupation, rec.sample_rate,
                          achieved, model.log_likelihood, factor, tuple(flags))


def _bootstrap_init(prev, record, n_states, reuse_trans=False):
    """Emission guess for the next (lower power) record from the previous fit."""
    m = prev.model
    keep = np.sort(np.argsort(-m.occupancy, kind="stable")[:n_states])
    stds = m.stds[keep] * math.sqrt(prev.downsample_factor)
    if reuse_trans:
        trans = m.trans[np.ix_(keep, keep)]
        if not math.isclose(m.sample_rate, record.sample_rate, rel_tol=1e-12):
            trans = transition_prob_from_rate(
                rates_from_transition_matrix(trans, m.sample_rate), record.sample_rate)
            np.fill_diagonal(trans, 0.0)
            np.fill_diagonal(trans, 1.0 - trans.sum(axis=1))
        trans = trans / trans.sum(axis=1, keepdims=True)
    else:
        trans = np.full((n_states, n_states), (1.0 - NEUTRAL_STAY) / (n_states - 1))
        np.fill_diagonal(trans, NEUTRAL_STAY)
    return HmmModel(trans, m.means[keep], stds, np.full(n_states, 1.0 / n_states),
                    record.sample_rate)


def bootstrap_powers(records, snr_min=3.0, n_states=3, max_iter=200, tol=1e-3,
                     max_downsample=64, backend=None, reuse_trans=False):
    """Analyze records of one grid point from high to low readout power.

    Each fit seeds the next one's emissions. Stops after the first record
    whose gates fail; the returned list holds the records actually analyzed,
    in descending power order. With ``reuse_trans`` the transition matrix
    of the first (highest power) fit is carried over and held fixed.
    """
    ordered = sorted(records, key=lambda r: -r.power if not math.isnan(r.power) else math.inf)
    results = []
    prev = None
    for rec in ordered:
        init = None
        if prev is not None and prev.model is not None:
            init = _bootstrap_init(prev, rec, prev.model.n_states, reuse_trans)
        res = analyze_record(rec, init=init, snr_min=snr_min, n_states=n_states,
                             max_iter=max_iter, tol=tol, max_downsample=max_downsample,
                             backend=backend, fix_trans=reuse_trans)
        results.append(res)
        if res.gate_failed:
            break
        prev = res
    return results
