"""Compiled inner loops over the (state, reward-index) box.

Every array passed here is in box coordinates: column ``j`` of a stage-t
table holds reward index ``k = klo_t + j``.  Summation order inside each cell
is fixed by the outcome order, so results do not depend on how callers
schedule stages or threads.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def post_values(v_next, klo_next, post_rows, kzlo, ptr, nxt, prob, rn, rn_units, out):
    """Expected continuation value of each post-decision state.

    out[m, j] = sum_o p_o * (r_o + v_next[s'_o, kz + rn_units_o - klo_next])
    with kz = kzlo + j.
    """
    nz = out.shape[1]
    for i in range(post_rows.shape[0]):
        m = post_rows[i]
        row = out[m]
        for j in range(nz):
            row[j] = 0.0
        for o in range(ptr[m], ptr[m + 1]):
            p = prob[o]
            r = rn[o]
            src = v_next[nxt[o]]
            off = kzlo + rn_units[o] - klo_next
            for j in range(nz):
                row[j] += p * (r + src[off + j])


@njit(cache=True, nogil=True)
def bellman_max(w, kzlo, states, klo, act_ptr, act_idx, post_state, rd, rd_units,
                incumbent, use_incumbent, eps_tie, v_out, a_out, tie_out):
    """Maximise over admissible actions for every cell of one stage.

    Ties (within ``eps_tie`` of the max) keep the incumbent's action when one
    is supplied, otherwise the lowest action index.
    """
    nk = v_out.shape[1]
    qbuf = np.empty(act_idx.shape[0])
    for i in range(states.shape[0]):
        s = states[i]
        lo = act_ptr[s]
        hi = act_ptr[s + 1]
        for j in range(nk):
            k = klo + j
            best = -np.inf
            for n in range(lo, hi):
                a = act_idx[n]
                q = rd[s, a] + w[post_state[s, a], k + rd_units[s, a] - kzlo]
                qbuf[n] = q
                if q > best:
                    best = q
            inc = incumbent[s, j] if use_incumbent else -1
            chosen = -1
            ties = 0
            keep = False
            for n in range(lo, hi):
                if qbuf[n] >= best - eps_tie:
                    ties += 1
                    a = act_idx[n]
                    if chosen < 0:
                        chosen = a
                    if a == inc:
                        keep = True
            if keep:
                chosen = inc
            v_out[s, j] = best
            a_out[s, j] = chosen
            tie_out[s, j] = min(ties, 255)


@njit(cache=True, nogil=True)
def policy_q(w, kzlo, states, klo, table, tab_off, post_state, rd, rd_units, v_out):
    """Value of following ``table`` for one stage, given post-decision values."""
    nk = v_out.shape[1]
    ncol = table.shape[1]
    for i in range(states.shape[0]):
        s = states[i]
        for j in range(nk):
            c = j + tab_off
            a = table[s, c] if 0 <= c < ncol else -1
            if a < 0:
                v_out[s, j] = np.nan
            else:
                v_out[s, j] = rd[s, a] + w[post_state[s, a], klo + j + rd_units[s, a] - kzlo]


@njit(cache=True, nogil=True)
def forward_step(mass, m1, m2, klo, states, tab_a, off_a, tab_b, off_b, weight_b,
                 post_state, rd, rd_units, ptr, nxt, prob, rn, rn_units, klo_next,
                 out_mass, out_m1, out_m2):
    """Push cell masses (and mass-weighted reward moments) one stage forward.

    Two decision tables are blended with weights (1 - weight_b, weight_b).
    ``m1``/``m2`` carry sum(mass * A) and sum(mass * A^2) of the exact
    accumulated reward A, so moments stay exact even when the reward index
    is a snapped approximation.  Returns (s, k) of the first reached cell
    without a defined action, or (-1, 0).
    """
    nk = mass.shape[1]
    w_a = 1.0 - weight_b
    for i in range(states.shape[0]):
        s = states[i]
        for j in range(nk):
            p0 = mass[s, j]
            if p0 == 0.0:
                continue
            k = klo + j
            for branch in range(2):
                if branch == 0:
                    wt = w_a
                    tab = tab_a
                    c = j + off_a
                else:
                    wt = weight_b
                    tab = tab_b
                    c = j + off_b
                if wt == 0.0:
                    continue
                a = tab[s, c] if 0 <= c < tab.shape[1] else -1
                if a < 0:
                    return s, k
                pm = p0 * wt
                a1 = m1[s, j] * wt
                a2 = m2[s, j] * wt
                m = post_state[s, a]
                r_d = rd[s, a]
                kd = k + rd_units[s, a]
                for o in range(ptr[m], ptr[m + 1]):
                    p = prob[o]
                    r = r_d + rn[o]
                    s2 = nxt[o]
                    c2 = kd + rn_units[o] - klo_next
                    out_mass[s2, c2] += p * pm
                    out_m1[s2, c2] += p * (a1 + r * pm)
                    out_m2[s2, c2] += p * (a2 + 2.0 * r * a1 + r * r * pm)
    return -1, 0


@njit(cache=True, nogil=True)
def moments_step(f1n, f2n, klo_next, states, klo, table, tab_off, post_state, rd,
                 rd_units, ptr, nxt, prob, rn, rn_units, out_f1, out_f2):
    """Conditional first/second moments of future reward under ``table``."""
    nk = out_f1.shape[1]
    ncol = table.shape[1]
    for i in range(states.shape[0]):
        s = states[i]
        for j in range(nk):
            c = j + tab_off
            a = table[s, c] if 0 <= c < ncol else -1
            if a < 0:
                out_f1[s, j] = np.nan
                out_f2[s, j] = np.nan
                continue
            m = post_state[s, a]
            r_d = rd[s, a]
            kd = klo + j + rd_units[s, a] - klo_next
            e1 = 0.0
            e2 = 0.0
            for o in range(ptr[m], ptr[m + 1]):
                p = prob[o]
                r = r_d + rn[o]
                c2 = kd + rn_units[o]
                g1 = f1n[nxt[o], c2]
                e1 += p * (r + g1)
                e2 += p * (r * r + 2.0 * r * g1 + f2n[nxt[o], c2])
            out_f1[s, j] = e1
            out_f2[s, j] = e2


@njit(cache=True, nogil=True)
def reach_all(mask, klo, states, act_ptr, act_idx, post_state, rd_units, ptr, nxt,
              rn_units, klo_next, out_mask):
    """Forward closure of reachable cells under every admissible action."""
    nk = mask.shape[1]
    for i in range(states.shape[0]):
        s = states[i]
        for j in range(nk):
            if not mask[s, j]:
                continue
            k = klo + j
            for n in range(act_ptr[s], act_ptr[s + 1]):
                a = act_idx[n]
                m = post_state[s, a]
                kd = k + rd_units[s, a] - klo_next
                for o in range(ptr[m], ptr[m + 1]):
                    out_mask[nxt[o], kd + rn_units[o]] = True


@njit(cache=True, nogil=True)
def best_tied_swap(cell_s, cell_c, klo, act_ptr, act_idx, post_state, rd, rd_units, ptr, nxt,
                   prob, rn, rn_units, klo_next, v_next, f1n, f2n, f1, f2, mass, m1, table,
                   eps_tie, mean, second, lam, budget):
    """Score single-cell swaps to tied actions by their effect on J.

    For each listed cell, actions within ``eps_tie`` of the best action value
    (from ``v_next``) other than ``table``'s choice are candidates.  A swap
    changes the total reward moments by mass * (conditional moment change),
    so J of the swapped policy follows without re-evaluation.  Returns
    (best J, cell position, action, candidates scored).
    """
    best_mv = -np.inf
    best_i = -1
    best_a = -1
    used = 0
    qbuf = np.empty(act_idx.shape[0])
    for i in range(cell_s.shape[0]):
        s = cell_s[i]
        c = cell_c[i]
        k = klo + c
        lo = act_ptr[s]
        hi = act_ptr[s + 1]
        top = -np.inf
        for n in range(lo, hi):
            a = act_idx[n]
            m = post_state[s, a]
            kd = k + rd_units[s, a] - klo_next
            acc = 0.0
            for o in range(ptr[m], ptr[m + 1]):
                acc += prob[o] * (rn[o] + v_next[nxt[o], kd + rn_units[o]])
            q = rd[s, a] + acc
            qbuf[n] = q
            if q > top:
                top = q
        chosen = table[s, c]
        for n in range(lo, hi):
            a = act_idx[n]
            if a == chosen or qbuf[n] < top - eps_tie:
                continue
            if used >= budget:
                return best_mv, best_i, best_a, used
            used += 1
            m = post_state[s, a]
            kd = k + rd_units[s, a] - klo_next
            g1 = 0.0
            g2 = 0.0
            for o in range(ptr[m], ptr[m + 1]):
                r = rd[s, a] + rn[o]
                c2 = kd + rn_units[o]
                h1 = f1n[nxt[o], c2]
                g1 += prob[o] * (r + h1)
                g2 += prob[o] * (r * r + 2.0 * r * h1 + f2n[nxt[o], c2])
            d1 = g1 - f1[s, c]
            mu = mean + mass[s, c] * d1
            sec = second + 2.0 * m1[s, c] * d1 + mass[s, c] * (g2 - f2[s, c])
            var = sec - mu * mu
            if var < 0.0:
                var = 0.0
            mv = mu - lam * var
            if mv > best_mv:
                best_mv = mv
                best_i = i
                best_a = a
    return best_mv, best_i, best_a, used
