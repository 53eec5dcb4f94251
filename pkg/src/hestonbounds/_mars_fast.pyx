# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hinge-sweep kernel: single pass over the parent's support points
in descending variable order, maintaining running sums so each candidate
knot is scored in O(m). Contract identical to _mars_py.hinge_sweep."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def hinge_sweep(
    double[::1] x,
    double[::1] p,
    double[:, :] w,
    double[::1] r,
    cnp.int64_t[::1] idx_sup,
    cnp.int64_t[::1] eval_pos,
    double lin_gain,
    double eps_rel,
):
    cdef Py_ssize_t n_sup = idx_sup.shape[0]
    cdef Py_ssize_t m = w.shape[1]
    cdef Py_ssize_t n_eval = eval_pos.shape[0]

    aw_arr = np.zeros(m)
    bw_arr = np.zeros(m)
    cdef double[::1] aw = aw_arr
    cdef double[::1] bw = bw_arr

    cdef double ar = 0.0, br = 0.0, a2 = 0.0, b2 = 0.0, c2 = 0.0
    cdef double best_score = -1.0, best_knot = 0.0
    cdef double eta, h2, hw, proj2, htil2, hr, score, pi, xi, ri, pxi, pri, wil
    cdef Py_ssize_t t, e = 0, l, i
    cdef bint have_best = 0

    with nogil:
        for t in range(n_sup):
            while e < n_eval and eval_pos[e] == t:
                i = idx_sup[t]
                eta = x[i]
                h2 = a2 - 2.0 * eta * b2 + eta * eta * c2
                proj2 = 0.0
                for l in range(m):
                    hw = aw[l] - eta * bw[l]
                    proj2 += hw * hw
                htil2 = h2 - proj2
                score = lin_gain
                if h2 > 0.0 and htil2 > eps_rel * h2:
                    hr = ar - eta * br
                    score += hr * hr / htil2
                if not have_best or score > best_score:
                    best_score = score
                    best_knot = eta
                    have_best = 1
                e += 1
            i = idx_sup[t]
            pi = p[i]
            xi = x[i]
            ri = r[i]
            pxi = pi * xi
            pri = pi * ri
            ar += pri * xi
            br += pri
            a2 += pxi * pxi
            b2 += pxi * pi
            c2 += pi * pi
            for l in range(m):
                wil = w[i, l]
                aw[l] += pxi * wil
                bw[l] += pi * wil

    return float(best_score), float(best_knot)
