"""Compiled inner loops for message passing.

Sequences are passed concatenated: ``obs`` holds every observation, ``acts[n]``
is the action taken after ``obs[n]`` (ignored at the last step of a sequence)
and ``seq_bounds`` holds the start offsets plus the total length.

Return status is ``-1`` on success, otherwise the global index of the first
step whose forward message vanished.
"""
import numpy as np
from numba import njit

OK = -1


# --------------------------------------------------------------------------- clone-sparse path

@njit(cache=True)
def clone_offsets(bounds, obs):
    N = obs.shape[0]
    off = np.empty(N + 1, np.int64)
    off[0] = 0
    for n in range(N):
        off[n + 1] = off[n] + bounds[obs[n] + 1] - bounds[obs[n]]
    return off


@njit(cache=True)
def sparse_forward(T, bounds, pi, obs, acts, seq_bounds, off, alpha, log_norms):
    for s in range(seq_bounds.shape[0] - 1):
        first = seq_bounds[s]
        last = seq_bounds[s + 1]
        for n in range(first, last):
            j0 = bounds[obs[n]]
            j1 = bounds[obs[n] + 1]
            o = off[n]
            if n == first:
                for j in range(j0, j1):
                    alpha[o + j - j0] = pi[j]
            else:
                a = acts[n - 1]
                i0 = bounds[obs[n - 1]]
                i1 = bounds[obs[n - 1] + 1]
                po = off[n - 1]
                for j in range(j0, j1):
                    acc = 0.0
                    for i in range(i0, i1):
                        acc += alpha[po + i - i0] * T[a, i, j]
                    alpha[o + j - j0] = acc
            tot = 0.0
            for j in range(j1 - j0):
                tot += alpha[o + j]
            if not tot > 0.0:
                return n
            for j in range(j1 - j0):
                alpha[o + j] /= tot
            log_norms[n] = np.log(tot)
    return OK


@njit(cache=True)
def sparse_backward(T, bounds, obs, acts, seq_bounds, off, alpha, beta, counts, pi_counts, want_counts):
    """Backward pass; optionally accumulates pairwise posteriors into ``counts``."""
    for s in range(seq_bounds.shape[0] - 1):
        first = seq_bounds[s]
        last = seq_bounds[s + 1]
        n = last - 1
        o = off[n]
        for j in range(off[n + 1] - o):
            beta[o + j] = 1.0
        for n in range(last - 2, first - 1, -1):
            a = acts[n]
            i0 = bounds[obs[n]]
            i1 = bounds[obs[n] + 1]
            j0 = bounds[obs[n + 1]]
            j1 = bounds[obs[n + 1] + 1]
            o = off[n]
            no = off[n + 1]
            tot = 0.0
            for i in range(i0, i1):
                acc = 0.0
                for j in range(j0, j1):
                    acc += T[a, i, j] * beta[no + j - j0]
                beta[o + i - i0] = acc
                tot += acc
            if want_counts:
                norm = 0.0
                for i in range(i1 - i0):
                    norm += alpha[o + i] * beta[o + i]
                if norm > 0.0:
                    for i in range(i0, i1):
                        ai = alpha[o + i - i0] / norm
                        if ai == 0.0:
                            continue
                        for j in range(j0, j1):
                            counts[a, i, j] += ai * T[a, i, j] * beta[no + j - j0]
            if tot > 0.0:
                for i in range(i1 - i0):
                    beta[o + i] /= tot
        if want_counts:
            i0 = bounds[obs[first]]
            i1 = bounds[obs[first] + 1]
            o = off[first]
            norm = 0.0
            for i in range(i1 - i0):
                norm += alpha[o + i] * beta[o + i]
            if norm > 0.0:
                for i in range(i0, i1):
                    pi_counts[i] += alpha[o + i - i0] * beta[o + i - i0] / norm


@njit(cache=True)
def sparse_viterbi(T, bounds, pi, obs, acts, off, delta, back):
    """Max-product on one sequence; ``back`` stores global predecessor states."""
    N = obs.shape[0]
    for n in range(N):
        j0 = bounds[obs[n]]
        j1 = bounds[obs[n] + 1]
        o = off[n]
        if n == 0:
            for j in range(j0, j1):
                delta[o + j - j0] = pi[j]
                back[o + j - j0] = -1
        else:
            a = acts[n - 1]
            i0 = bounds[obs[n - 1]]
            i1 = bounds[obs[n - 1] + 1]
            po = off[n - 1]
            for j in range(j0, j1):
                best = -1.0
                arg = -1
                for i in range(i0, i1):
                    c = delta[po + i - i0] * T[a, i, j]
                    if c > best:
                        best = c
                        arg = i
                delta[o + j - j0] = best
                back[o + j - j0] = arg
        m = 0.0
        for j in range(j1 - j0):
            if delta[o + j] > m:
                m = delta[o + j]
        if not m > 0.0:
            return n
        for j in range(j1 - j0):
            delta[o + j] /= m
    return OK


# --------------------------------------------------------------------------- general (CSR) path

@njit(cache=True)
def csr_forward(indptr, indices, data, E, pi, obs, acts, seq_bounds, alpha, log_norms):
    Z = E.shape[0]
    for s in range(seq_bounds.shape[0] - 1):
        first = seq_bounds[s]
        last = seq_bounds[s + 1]
        for n in range(first, last):
            x = obs[n]
            if n == first:
                for k in range(Z):
                    alpha[n, k] = pi[k] * E[k, x]
            else:
                a = acts[n - 1]
                for k in range(Z):
                    alpha[n, k] = 0.0
                for j in range(Z):
                    aj = alpha[n - 1, j]
                    if aj == 0.0:
                        continue
                    for p in range(indptr[a, j], indptr[a, j + 1]):
                        alpha[n, indices[p]] += aj * data[p]
                for k in range(Z):
                    alpha[n, k] *= E[k, x]
            tot = 0.0
            for k in range(Z):
                tot += alpha[n, k]
            if not tot > 0.0:
                return n
            for k in range(Z):
                alpha[n, k] /= tot
            log_norms[n] = np.log(tot)
    return OK


@njit(cache=True)
def csr_backward(indptr, indices, data, E, obs, acts, seq_bounds, alpha, beta,
                 tcounts, ecounts, gsum, pi_counts, want_t, want_e):
    Z = E.shape[0]
    scratch = np.empty(Z)
    for s in range(seq_bounds.shape[0] - 1):
        first = seq_bounds[s]
        last = seq_bounds[s + 1]
        for k in range(Z):
            beta[last - 1, k] = 1.0
        for n in range(last - 2, first - 1, -1):
            a = acts[n]
            x = obs[n + 1]
            for k in range(Z):
                scratch[k] = E[k, x] * beta[n + 1, k]
            tot = 0.0
            for j in range(Z):
                acc = 0.0
                for p in range(indptr[a, j], indptr[a, j + 1]):
                    acc += data[p] * scratch[indices[p]]
                beta[n, j] = acc
                tot += acc
            if want_t:
                norm = 0.0
                for j in range(Z):
                    norm += alpha[n, j] * beta[n, j]
                if norm > 0.0:
                    for j in range(Z):
                        aj = alpha[n, j] / norm
                        if aj == 0.0:
                            continue
                        for p in range(indptr[a, j], indptr[a, j + 1]):
                            tcounts[p] += aj * data[p] * scratch[indices[p]]
            if tot > 0.0:
                for j in range(Z):
                    beta[n, j] /= tot
        for n in range(first, last):
            norm = 0.0
            for k in range(Z):
                norm += alpha[n, k] * beta[n, k]
            if not norm > 0.0:
                continue
            if want_e:
                x = obs[n]
                for k in range(Z):
                    g = alpha[n, k] * beta[n, k] / norm
                    ecounts[k, x] += g
                    gsum[k] += g
            if n == first:
                for k in range(Z):
                    pi_counts[k] += alpha[n, k] * beta[n, k] / norm


@njit(cache=True)
def csr_viterbi(indptr, indices, data, E, pi, obs, acts, delta, back):
    N = obs.shape[0]
    Z = E.shape[0]
    for n in range(N):
        x = obs[n]
        if n == 0:
            for k in range(Z):
                delta[0, k] = pi[k] * E[k, x]
                back[0, k] = -1
        else:
            a = acts[n - 1]
            for k in range(Z):
                delta[n, k] = -1.0
                back[n, k] = -1
            for j in range(Z):
                dj = delta[n - 1, j]
                if dj <= 0.0:
                    continue
                for p in range(indptr[a, j], indptr[a, j + 1]):
                    k = indices[p]
                    c = dj * data[p]
                    if c > delta[n, k] or (c == delta[n, k] and j < back[n, k]):
                        delta[n, k] = c
                        back[n, k] = j
            for k in range(Z):
                if delta[n, k] < 0.0:
                    delta[n, k] = 0.0
                delta[n, k] *= E[k, x]
        m = 0.0
        for k in range(Z):
            if delta[n, k] > m:
                m = delta[n, k]
        if not m > 0.0:
            return n
        for k in range(Z):
            delta[n, k] /= m
    return OK


# --------------------------------------------------------------------------- emission EM, whole loop

@njit(cache=True)
def emission_em(indptr, indices, data, pi, obs, acts, seq_bounds, group_of, group_size, tie,
                E, pseudocount, max_iters, tol, trace):
    """EM over ``E`` with ``T`` fixed; ``E`` is overwritten with the best iterate.

    Returns the number of evaluations written to ``trace``, or ``-(n + 2)``
    when step ``n`` has zero probability.
    """
    N = obs.shape[0]
    Z, n_obs = E.shape
    n_groups = group_size.shape[0]
    alpha = np.zeros((N, Z))
    beta = np.zeros((N, Z))
    log_norms = np.zeros(N)
    ec = np.zeros((Z, n_obs))
    gsum = np.zeros(Z)
    pooled_ec = np.zeros((n_groups, n_obs))
    pooled_gs = np.zeros(n_groups)
    no_t = np.zeros(1)
    no_pi = np.zeros(Z)
    best_E = E.copy()
    best = np.inf
    n_done = 0
    for it in range(max_iters):
        status = csr_forward(indptr, indices, data, E, pi, obs, acts, seq_bounds, alpha, log_norms)
        if status != OK:
            return -(status + 2)
        value = 0.0
        for n in range(N):
            value -= log_norms[n]
        value /= N
        trace[it] = value
        n_done = it + 1
        if value < best:
            best = value
            best_E[:, :] = E
        if it > 0 and abs(trace[it - 1] - value) < tol:
            break
        if it == max_iters - 1:
            break
        ec[:, :] = 0.0
        gsum[:] = 0.0
        csr_backward(indptr, indices, data, E, obs, acts, seq_bounds, alpha, beta,
                     no_t, ec, gsum, no_pi, False, True)
        if tie:
            pooled_ec[:, :] = 0.0
            pooled_gs[:] = 0.0
            for k in range(Z):
                g = group_of[k]
                pooled_gs[g] += gsum[k]
                for x in range(n_obs):
                    pooled_ec[g, x] += ec[k, x]
            for k in range(Z):
                g = group_of[k]
                gsum[k] = pooled_gs[g] / group_size[g]
                for x in range(n_obs):
                    ec[k, x] = pooled_ec[g, x] / group_size[g]
        for k in range(Z):
            den = gsum[k] + pseudocount * n_obs
            if den > 0.0:
                for x in range(n_obs):
                    E[k, x] = (ec[k, x] + pseudocount) / den
    E[:, :] = best_E
    return n_done
