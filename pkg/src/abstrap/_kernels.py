"""Sequential inner loops, in numba and pure-numpy form.

Each public entry point takes a ``backend`` argument ("numba" or "numpy");
``None`` picks the environment default from :mod:`abstrap._backend`. Both
variants consume identical inputs (random draws are made by the caller), so
they produce the same results up to floating-point summation order.
"""
import math

import numpy as np

from ._backend import njit, resolve

# --------------------------------------------------------------------------
# continuous-time Markov chain, sampled and held


def _ctmc_fill_py(out, k, t_now, state, rates, exit_rates, f_s, exps, unis):
    n = out.shape[0]
    n_states = rates.shape[0]
    used = 0
    while k < n and used < exps.shape[0]:
        lam = exit_rates[state]
        if lam <= 0.0:
            out[k:] = state
            return n, t_now, state, used
        t_jump = t_now + exps[used] / lam
        # samples sit at times k / f_s; fill those strictly before the jump
        k_end = int(np.ceil(t_jump * f_s))
        if k_end > n:
            k_end = n
        if k_end > k:
            out[k:k_end] = state
            k = k_end
        u = unis[used] * lam
        acc = 0.0
        nxt = state
        for j in range(n_states):
            if j == state:
                continue
            acc += rates[state, j]
            nxt = j
            if u < acc:
                break
        state = nxt
        t_now = t_jump
        used += 1
    return k, t_now, state, used


_ctmc_fill_nb = njit(cache=True)(_ctmc_fill_py)


def ctmc_path(rates, f_s, n_samples, start_state, rng, backend=None):
    """Sample-and-hold path of a CTMC with off-diagonal ``rates`` (Hz)."""
    backend = resolve(backend)
    fill = _ctmc_fill_nb if backend == "numba" else _ctmc_fill_py
    rates = np.ascontiguousarray(rates, dtype=np.float64)
    exit_rates = rates.sum(axis=1) - np.diag(rates)
    rates = rates - np.diag(np.diag(rates))
    out = np.empty(n_samples, dtype=np.int64)
    duration = n_samples / f_s
    chunk = int(min(exit_rates.max() * duration * 1.2 + 64, 1 << 22)) if n_samples else 0
    k, t_now, state = 0, 0.0, int(start_state)
    while k < n_samples:
        exps = rng.standard_exponential(chunk)
        unis = rng.random(chunk)
        k, t_now, state, _ = fill(out, k, t_now, state, rates, exit_rates, float(f_s), exps, unis)
    return out


# --------------------------------------------------------------------------
# discrete-time Markov chain


@njit(cache=True)
def _discrete_nb(cum, start, unis):
    n = unis.shape[0]
    n_states = cum.shape[0]
    out = np.empty(n, dtype=np.int64)
    state = start
    for t in range(n):
        out[t] = state
        u = unis[t]
        nxt = n_states - 1
        for j in range(n_states):
            if u < cum[state, j]:
                nxt = j
                break
        state = nxt
    return out


def _discrete_np(cum, start, unis):
    n = unis.shape[0]
    out = np.empty(n, dtype=np.int64)
    last = cum.shape[0] - 1
    state = start
    for t in range(n):
        out[t] = state
        state = min(int(np.searchsorted(cum[state], unis[t], side="right")), last)
    return out


def discrete_path(trans, n_samples, start_state, rng, backend=None):
    """Path of a discrete Markov chain; one uniform draw per step."""
    backend = resolve(backend)
    cum = np.cumsum(np.asarray(trans, dtype=np.float64), axis=1)
    cum[:, -1] = np.inf
    unis = rng.random(n_samples)
    fn = _discrete_nb if backend == "numba" else _discrete_np
    return fn(cum, int(start_state), unis)


# --------------------------------------------------------------------------
# forward-backward with per-sample log offsets
#
# Emissions arrive as log densities; each row is shifted by its maximum
# before exponentiation so nothing underflows, and the shifts are added back
# into the log-likelihood. Forward/backward messages are normalised per step.


@njit(cache=True)
def _forward_backward_nb(log_b, trans, init):
    n, k = log_b.shape
    b = np.empty((n, k))
    log_offsets = np.empty(n)
    for t in range(n):
        m = log_b[t, 0]
        for j in range(1, k):
            if log_b[t, j] > m:
                m = log_b[t, j]
        log_offsets[t] = m
        for j in range(k):
            b[t, j] = np.exp(log_b[t, j] - m)

    alpha = np.empty((n, k))
    scale = np.empty(n)
    s = 0.0
    for j in range(k):
        alpha[0, j] = init[j] * b[0, j]
        s += alpha[0, j]
    scale[0] = s
    for j in range(k):
        alpha[0, j] /= s
    for t in range(1, n):
        s = 0.0
        for j in range(k):
            acc = 0.0
            for i in range(k):
                acc += alpha[t - 1, i] * trans[i, j]
            acc *= b[t, j]
            alpha[t, j] = acc
            s += acc
        scale[t] = s
        for j in range(k):
            alpha[t, j] /= s

    # compensated sum: EM monotonicity checks need ~1e-9 absolute on ~1e6 terms
    loglik = 0.0
    comp = 0.0
    for t in range(n):
        y = log_offsets[t] + np.log(scale[t]) - comp
        tot = loglik + y
        comp = (tot - loglik) - y
        loglik = tot

    gamma = np.empty((n, k))
    xi = np.zeros((k, k))
    beta = np.ones(k)
    new = np.empty(k)
    tmp = np.empty(k)
    for j in range(k):
        gamma[n - 1, j] = alpha[n - 1, j]
    for t in range(n - 2, -1, -1):
        inv = 1.0 / scale[t + 1]
        for j in range(k):
            tmp[j] = b[t + 1, j] * beta[j] * inv
        for i in range(k):
            acc = 0.0
            for j in range(k):
                w = trans[i, j] * tmp[j]
                xi[i, j] += alpha[t, i] * w
                acc += w
            new[i] = acc
        for i in range(k):
            beta[i] = new[i]
            gamma[t, i] = alpha[t, i] * new[i]
    return gamma, xi, loglik


def _forward_backward_np(log_b, trans, init):
    n, k = log_b.shape
    m = log_b.max(axis=1)
    b = np.exp(log_b - m[:, None])
    alpha = np.empty((n, k))
    scale = np.empty(n)
    a = init * b[0]
    scale[0] = a.sum()
    alpha[0] = a / scale[0]
    for t in range(1, n):
        a = (alpha[t - 1] @ trans) * b[t]
        scale[t] = a.sum()
        alpha[t] = a / scale[t]
    loglik = math.fsum(m + np.log(scale))

    gamma = np.empty((n, k))
    gamma[n - 1] = alpha[n - 1]
    xi = np.zeros((k, k))
    beta = np.ones(k)
    for t in range(n - 2, -1, -1):
        w = trans * (b[t + 1] * beta)[None, :] / scale[t + 1]
        xi += alpha[t][:, None] * w
        beta = w.sum(axis=1)
        gamma[t] = alpha[t] * beta
    return gamma, xi, loglik


def forward_backward(log_b, trans, init, backend=None):
    """Posterior state marginals, summed transition posteriors, log-likelihood."""
    backend = resolve(backend)
    log_b = np.ascontiguousarray(log_b, dtype=np.float64)
    trans = np.ascontiguousarray(trans, dtype=np.float64)
    init = np.ascontiguousarray(init, dtype=np.float64)
    fn = _forward_backward_nb if backend == "numba" else _forward_backward_np
    return fn(log_b, trans, init)


# --------------------------------------------------------------------------
# Viterbi


@njit(cache=True)
def _viterbi_nb(log_b, log_trans, log_init):
    n, k = log_b.shape
    back = np.empty((n, k), dtype=np.int8)
    score = np.empty(k)
    new = np.empty(k)
    for j in range(k):
        score[j] = log_init[j] + log_b[0, j]
    for t in range(1, n):
        for j in range(k):
            best = score[0] + log_trans[0, j]
            arg = 0
            for i in range(1, k):
                v = score[i] + log_trans[i, j]
                if v > best:
                    best = v
                    arg = i
            new[j] = best + log_b[t, j]
            back[t, j] = arg
        for j in range(k):
            score[j] = new[j]
    path = np.empty(n, dtype=np.int64)
    best = score[0]
    arg = 0
    for j in range(1, k):
        if score[j] > best:
            best = score[j]
            arg = j
    path[n - 1] = arg
    for t in range(n - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, best


def _viterbi_np(log_b, log_trans, log_init):
    n, k = log_b.shape
    back = np.empty((n, k), dtype=np.int8)
    score = log_init + log_b[0]
    for t in range(1, n):
        cand = score[:, None] + log_trans
        back[t] = cand.argmax(axis=0)
        score = cand.max(axis=0) + log_b[t]
    path = np.empty(n, dtype=np.int64)
    path[n - 1] = int(score.argmax())
    best = float(score.max())
    for t in range(n - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, best


def viterbi(log_b, log_trans, log_init, backend=None):
    """Most likely state path and its joint log-probability."""
    backend = resolve(backend)
    log_b = np.ascontiguousarray(log_b, dtype=np.float64)
    log_trans = np.ascontiguousarray(log_trans, dtype=np.float64)
    log_init = np.ascontiguousarray(log_init, dtype=np.float64)
    fn = _viterbi_nb if backend == "numba" else _viterbi_np
    path, score = fn(log_b, log_trans, log_init)
    return path, float(score)


# --------------------------------------------------------------------------
# diagonal Gaussian emissions and their M-step moments


@njit(cache=True)
def _log_emission_nb(x, means, stds):
    n = x.shape[0]
    k = means.shape[0]
    out = np.empty((n, k))
    norm = np.empty(k)
    inv0 = np.empty(k)
    inv1 = np.empty(k)
    for j in range(k):
        norm[j] = np.log(2.0 * np.pi * stds[j, 0] * stds[j, 1])
        inv0[j] = 1.0 / stds[j, 0]
        inv1[j] = 1.0 / stds[j, 1]
    for t in range(n):
        for j in range(k):
            z0 = (x[t, 0] - means[j, 0]) * inv0[j]
            z1 = (x[t, 1] - means[j, 1]) * inv1[j]
            out[t, j] = -0.5 * (z0 * z0 + z1 * z1) - norm[j]
    return out


def _log_emission_np(x, means, stds):
    z = (x[:, None, :] - means[None, :, :]) / stds[None, :, :]
    norm = np.log(2.0 * np.pi * stds[:, 0] * stds[:, 1])
    return -0.5 * (z * z).sum(axis=2) - norm[None, :]


def log_emission(x, means, stds, backend=None):
    """Per-sample, per-state log density of diagonal 2-D Gaussians."""
    backend = resolve(backend)
    x = np.ascontiguousarray(x, dtype=np.float64)
    means = np.ascontiguousarray(means, dtype=np.float64)
    stds = np.ascontiguousarray(stds, dtype=np.float64)
    fn = _log_emission_nb if backend == "numba" else _log_emission_np
    return fn(x, means, stds)


@njit(cache=True)
def _moments_nb(gamma, x):
    n, k = gamma.shape
    mass = np.zeros(k)
    means = np.zeros((k, 2))
    var = np.zeros((k, 2))
    for t in range(n):
        for j in range(k):
            g = gamma[t, j]
            mass[j] += g
            means[j, 0] += g * x[t, 0]
            means[j, 1] += g * x[t, 1]
    for j in range(k):
        if mass[j] > 0.0:
            means[j, 0] /= mass[j]
            means[j, 1] /= mass[j]
    for t in range(n):
        for j in range(k):
            g = gamma[t, j]
            r0 = x[t, 0] - means[j, 0]
            r1 = x[t, 1] - means[j, 1]
            var[j, 0] += g * r0 * r0
            var[j, 1] += g * r1 * r1
    for j in range(k):
        if mass[j] > 0.0:
            var[j, 0] /= mass[j]
            var[j, 1] /= mass[j]
    return mass, means, var


def _moments_np(gamma, x):
    mass = gamma.sum(axis=0)
    safe = np.where(mass > 0, mass, 1.0)[:, None]
    means = (gamma.T @ x) / safe
    var = np.empty_like(means)
    for j in range(gamma.shape[1]):
        r = x - means[j]
        var[j] = gamma[:, j] @ (r * r)
    return mass, means, var / safe


def weighted_moments(gamma, x, backend=None):
    """Responsibility-weighted mass, mean and (two-pass) variance per state."""
    backend = resolve(backend)
    gamma = np.ascontiguousarray(gamma, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    fn = _moments_nb if backend == "numba" else _moments_np
    return fn(gamma, x)
