"""Pure-numpy hinge-sweep kernel: the fallback twin of _mars_fast.

For one (parent term, variable) pair, score every candidate knot eta by the
residual-sum-of-squares drop from adding the mirrored hinge pair
p*(x-eta)+ / p*(eta-x)+ with all coefficients refit. The pair spans the same
space as {p*x, p*(x-eta)+}, so the score is the linear-column gain plus the
gain of the hinge column orthogonalized against the current basis; running
prefix sums over points sorted by descending x make the whole scan O(N*m).
"""

from __future__ import annotations

import numpy as np


def hinge_sweep(x, p, w, r, idx_sup, eval_pos, lin_gain, eps_rel):
    """Return (best_score, best_knot) over the candidate knots.

    x, p, r: (N,) variable column, parent column, residual.
    w: (N, m) orthonormal basis columns (residual is orthogonal to them).
    idx_sup: indices of parent-support points sorted by descending x.
    eval_pos: positions into idx_sup where a knot candidate is evaluated;
        candidates are run starts of distinct x values, so the points
        accumulated before position t are exactly those with x > knot.
    lin_gain: gain already credited to the linear column in w's last slot.
    """
    xs = x[idx_sup]
    ps = p[idx_sup]
    rs = r[idx_sup]
    ws = w[idx_sup]

    pw = ps[:, None] * ws
    pr = ps * rs
    pp = ps * ps

    # prefix[t] = sum over the first t support points (exclusive prefix)
    def prefix(arr):
        c = np.cumsum(arr, axis=0)
        out = np.empty_like(c)
        out[0] = 0.0
        out[1:] = c[:-1]
        return out[eval_pos]

    a_w = prefix(pw * xs[:, None])
    b_w = prefix(pw)
    a_r = prefix(pr * xs)
    b_r = prefix(pr)
    a2 = prefix(pp * xs * xs)
    b2 = prefix(pp * xs)
    c2 = prefix(pp)

    eta = xs[eval_pos]
    h_w = a_w - eta[:, None] * b_w
    h_r = a_r - eta * b_r
    h2 = a2 - 2.0 * eta * b2 + eta * eta * c2
    htil2 = h2 - np.einsum("ij,ij->i", h_w, h_w)

    valid = htil2 > eps_rel * np.maximum(h2, 1e-300)
    gain = np.zeros_like(eta)
    np.divide(h_r * h_r, htil2, out=gain, where=valid)
    score = lin_gain + gain
    best = int(np.argmax(score))
    return float(score[best]), float(eta[best])
