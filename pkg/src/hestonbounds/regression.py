"""Cross-sectional regression estimators for the backward induction:
k-nearest-neighbour kernel averaging and adaptive hinge regression
(forward selection of mirrored hinge pairs, GCV-pruned backward deletion)
with analytic gradients.

The forward-pass knot scan is the hot loop; it runs through a compiled
kernel when the extension built, with a numpy fallback selected at import
(HESTONBOUNDS_PURE_PYTHON=1 forces the fallback).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InputError

if os.environ.get("HESTONBOUNDS_PURE_PYTHON"):
    from ._mars_py import hinge_sweep

    KERNEL = "python"
else:
    try:
        from ._mars_fast import hinge_sweep

        KERNEL = "compiled"
    except ImportError:
        from ._mars_py import hinge_sweep

        KERNEL = "python"

_DEP_TOL = 1e-10  # relative tolerance for dropping dependent basis columns


# ---------------------------------------------------------------------------
# k-nearest-neighbour kernel
# ---------------------------------------------------------------------------


def knn_fit_predict(x: np.ndarray, y: np.ndarray, k: int) -> np.ndarray:
    """Kernel average over each point's k nearest neighbours (self included
    in the average, excluded from the neighbour count, so the generic
    denominator is k+1). Distance ties at the k-th neighbour widen the ball:
    every point at distance <= d_k enters and the denominator becomes the
    actual count.

    y may be (N,) or (N, t) for several targets sharing the neighbourhoods.
    """
    x = np.ascontiguousarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    y2 = y[:, None] if single else y
    n = x.shape[0]
    if y2.shape[0] != n:
        raise InputError("x and y must have matching first dimension")
    if not 1 <= k <= n - 1:
        raise InputError(f"k must be in [1, N-1], got k={k}, N={n}")

    if np.all(x == x[0]):
        out = np.tile(y2.mean(axis=0), (n, 1))
        return out[:, 0] if single else out

    tree = cKDTree(x)
    m = min(k + 2, n)
    dist, ind = tree.query(x, k=m, workers=-1)
    d_k = dist[:, k]
    preds = y2[ind[:, : k + 1]].sum(axis=1) / (k + 1)

    tie_tol = 1.0 + 1e-12
    if m > k + 1:
        tied = dist[:, k + 1] <= d_k * tie_tol
    else:
        tied = np.zeros(n, dtype=bool)
    for i in np.flatnonzero(tied):
        ball = tree.query_ball_point(x[i], r=d_k[i] * tie_tol)
        preds[i] = y2[ball].sum(axis=0) / len(ball)
    return preds[:, 0] if single else preds


# ---------------------------------------------------------------------------
# adaptive hinge regression
# ---------------------------------------------------------------------------

Hinge = tuple[int, float, int]  # (variable, knot, sign): sign*(x_var - knot) clipped at 0
Term = tuple[Hinge, ...]  # product of hinges; () is the intercept


def _term_column(term: Term, x: np.ndarray) -> np.ndarray:
    col = np.ones(x.shape[0])
    for var, knot, sign in term:
        col = col * np.maximum(sign * (x[:, var] - knot), 0.0)
    return col


def _term_vars(term: Term):
    return {var for var, _, _ in term}


@dataclass(frozen=True)
class MarsFit:
    """Fitted hinge expansion: intercept + sum of coef * product-of-hinges."""

    intercept: float
    coefs: np.ndarray
    terms: tuple[Term, ...]
    rss: float
    gcv: float
    n_inputs: int
    forward_rss: tuple[float, ...] = field(default=(), compare=False)

    @property
    def n_terms(self) -> int:
        return len(self.terms) + 1

    def predict(self, x) -> np.ndarray:
        x = _as_2d(x, self.n_inputs)
        out = np.full(x.shape[0], self.intercept)
        for coef, term in zip(self.coefs, self.terms):
            out += coef * _term_column(term, x)
        return out

    def gradient(self, x) -> np.ndarray:
        """Analytic gradient; on a knot the right derivative is used."""
        x = _as_2d(x, self.n_inputs)
        grad = np.zeros_like(x)
        for coef, term in zip(self.coefs, self.terms):
            factors = []
            for var, knot, sign in term:
                z = sign * (x[:, var] - knot)
                val = np.maximum(z, 0.0)
                if sign > 0:
                    dv = np.where(x[:, var] >= knot, 1.0, 0.0)
                else:
                    dv = np.where(x[:, var] < knot, -1.0, 0.0)
                factors.append((var, val, dv))
            for i, (var, _, dv) in enumerate(factors):
                part = coef * dv
                for j, (_, val_j, _) in enumerate(factors):
                    if j != i:
                        part = part * val_j
                grad[:, var] += part
        return grad

    def to_text(self) -> str:
        lines = ["hinge-fit v1", f"intercept {float(self.intercept)!r}"]
        for coef, term in zip(self.coefs, self.terms):
            factors = " ".join(f"{var}:{sign:+d}:{float(knot)!r}" for var, knot, sign in term)
            lines.append(f"term {float(coef)!r} {factors}".rstrip())
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, n_inputs: int | None = None) -> "MarsFit":
        lines = [l for l in text.splitlines() if l.strip()]
        if not lines or lines[0] != "hinge-fit v1":
            raise InputError("not a hinge-fit serialization")
        intercept = float(lines[1].split()[1])
        coefs, terms = [], []
        max_var = -1
        for line in lines[2:]:
            parts = line.split()
            if parts[0] != "term":
                raise InputError(f"bad term line: {line!r}")
            coefs.append(float(parts[1]))
            term = []
            for factor in parts[2:]:
                var_s, sign_s, knot_s = factor.split(":")
                term.append((int(var_s), float(knot_s), int(sign_s)))
                max_var = max(max_var, int(var_s))
            terms.append(tuple(term))
        return cls(
            intercept=intercept,
            coefs=np.array(coefs),
            terms=tuple(terms),
            rss=float("nan"),
            gcv=float("nan"),
            n_inputs=n_inputs if n_inputs is not None else max_var + 1,
        )


def _as_2d(x, n_inputs=None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :] if (n_inputs is not None and x.size == n_inputs) else x[:, None]
    return x


def _project_out(col: np.ndarray, qt: np.ndarray, passes: int = 1) -> np.ndarray:
    """Project col out of the span of qt's rows (orthonormal)."""
    for _ in range(passes if qt.shape[0] else 0):
        col = col - qt.T @ (qt @ col)
    return col


def mars_fit(
    x,
    y,
    max_terms: int = 21,
    degree: int = 2,
    knots: int | str = "all",
    penalty: float = 3.0,
    fit_subsample: int | None = None,
    min_rsq_gain: float = 0.0,
) -> MarsFit:
    """Greedy forward selection of mirrored hinge pairs, then GCV pruning.

    At each forward step every (existing term, variable, knot) triple is
    scored by the exact RSS drop with all coefficients refit; the best pair
    is added until max_terms basis functions (intercept included) are
    reached. Knots sit on observed coordinates of the parent's support; a
    product never repeats a variable, and products are capped at `degree`
    factors. The backward pass deletes terms one at a time (smallest RSS
    increase) and keeps the subset minimizing generalized cross-validation
    with `penalty` extra parameters charged per knot.

    knots: "all" scans every distinct coordinate, an integer caps the number
    of candidate knots per scan (thinned evenly through the sorted values).
    fit_subsample: run the forward scan on an evenly strided subset of the
    rows this size; pruning and coefficients still use every row.
    min_rsq_gain: stop the forward pass once the best pair improves R-squared
    by less than this fraction of the centered sum of squares.
    """
    x = np.ascontiguousarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=float)
    n, d = x.shape
    if y.shape != (n,):
        raise InputError(f"y must be ({n},), got {y.shape}")
    if degree not in (1, 2):
        raise InputError(f"degree must be 1 or 2, got {degree}")
    if max_terms >= n:
        raise InputError(f"max_terms={max_terms} must be below the sample size {n}")

    if fit_subsample is not None and n > fit_subsample:
        stride = -(-n // fit_subsample)
        x_sel, y_sel = x[::stride], y[::stride]
    else:
        x_sel, y_sel = x, y

    terms, forward_rss = _forward_pass(x_sel, y_sel, max_terms, degree, knots, min_rsq_gain)
    return _prune_and_refit(x, y, terms, penalty, forward_rss)


def _forward_pass(x, y, max_terms, degree, knots, min_rsq_gain=0.0):
    n, d = x.shape
    orders = [np.argsort(-x[:, j], kind="stable") for j in range(d)]
    x_cols = [np.ascontiguousarray(x[:, j]) for j in range(d)]

    terms: list[Term] = [()]
    b = np.empty((n, max_terms + 2))
    q = np.empty((n, max_terms + 3))  # row-contiguous view for the sweep kernel
    qt = np.empty((max_terms + 3, n))  # transposed twin for fast projections
    b[:, 0] = 1.0
    q[:, 0] = 1.0 / np.sqrt(n)
    qt[0] = q[:, 0]
    m = 1
    resid = y - y.mean()
    rss = float(resid @ resid)
    yss = max(float(y @ y), 1e-300)
    centered_ss = max(rss, 1e-300)
    gain_floor = max(1e-12 * yss, min_rsq_gain * centered_ss)
    forward_rss = [rss]

    while m + 2 <= max_terms:
        if rss <= 1e-12 * yss:
            break
        best = None  # (score, parent_idx, var, knot)
        for p_idx, parent in enumerate(terms):
            if len(parent) >= degree:
                continue
            p_col = np.ascontiguousarray(b[:, p_idx])
            support = p_col != 0.0
            n_sup_total = int(support.sum())
            if n_sup_total < 2:
                continue
            parent_vars = _term_vars(parent)
            for j in range(d):
                if j in parent_vars:
                    continue
                order = orders[j]
                idx_sup = order[support[order]]
                xs = x_cols[j][idx_sup]
                starts = np.flatnonzero(np.diff(xs) != 0.0) + 1
                eval_pos = np.concatenate(([0], starts))
                if eval_pos.size < 2:
                    continue
                if isinstance(knots, int) and eval_pos.size > knots:
                    sel = np.linspace(0, eval_pos.size - 1, knots).round().astype(int)
                    eval_pos = eval_pos[np.unique(sel)]

                u = p_col * x_cols[j]
                u_norm2 = float(u @ u)
                u_orth = _project_out(u, qt[:m])
                nu2 = float(u_orth @ u_orth)
                if u_norm2 > 0 and nu2 > _DEP_TOL * u_norm2:
                    q[:, m] = u_orth / np.sqrt(nu2)
                    lin_gain = float(q[:, m] @ resid) ** 2
                    w_cols = m + 1
                else:
                    q[:, m] = 0.0
                    lin_gain = 0.0
                    w_cols = m
                score, knot = hinge_sweep(
                    x_cols[j],
                    p_col,
                    q[:, :w_cols],
                    np.ascontiguousarray(resid),
                    idx_sup,
                    eval_pos,
                    lin_gain,
                    _DEP_TOL,
                )
                if best is None or score > best[0]:
                    best = (score, p_idx, j, knot)
        if best is None or best[0] <= gain_floor:
            break
        _, p_idx, j, knot = best
        parent = terms[p_idx]
        added = 0
        for sign in (1, -1):
            term = parent + ((j, knot, sign),)
            col = _term_column(term, x)
            raw2 = float(col @ col)
            col_orth = _project_out(col, qt[:m], passes=2)
            nc2 = float(col_orth @ col_orth)
            if raw2 <= 0 or nc2 <= _DEP_TOL * raw2:
                continue  # dependent column: drop this half of the pair
            q[:, m] = col_orth / np.sqrt(nc2)
            qt[m] = q[:, m]
            b[:, m] = col
            proj = float(q[:, m] @ resid)
            resid = resid - proj * q[:, m]
            rss -= proj * proj
            terms.append(term)
            m += 1
            added += 1
        forward_rss.append(rss)
        if added == 0:
            break
    return terms, forward_rss


def _knot_count(terms) -> int:
    return len({(var, knot) for term in terms for var, knot, _ in term})


def _gcv(rss, n, n_terms, n_knots, penalty) -> float:
    c_eff = n_terms + penalty * n_knots
    if c_eff >= n:
        return np.inf
    return (rss / n) / (1.0 - c_eff / n) ** 2


def _prune_and_refit(x, y, terms: list[Term], penalty: float, forward_rss=()) -> MarsFit:
    n = x.shape[0]
    m = len(terms)
    b = np.empty((n, m))
    for i, t in enumerate(terms):
        b[:, i] = _term_column(t, x)
    g = b.T @ b
    c = b.T @ y
    yy = float(y @ y)
    # Equilibrate: raw hinge products of differently scaled inputs make
    # B'B catastrophically ill-conditioned, which silently shifts fitted
    # means. Scale to unit column norms and refine against the data matrix.
    scale = np.sqrt(np.maximum(np.diag(g), 1e-300))
    gs = g / np.outer(scale, scale)

    def _scaled_solve(idx, rhs):
        gi = gs[np.ix_(idx, idx)]
        try:
            return np.linalg.solve(gi, rhs)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(gi, rhs, rcond=None)[0]

    def subset_rss(idx):
        """Equilibrated normal-equation solve; used for pruning decisions."""
        ci = c[idx] / scale[idx]
        beta_s = _scaled_solve(idx, ci)
        return max(yy - float(ci @ beta_s), 0.0), beta_s / scale[idx]

    def subset_beta_refined(idx):
        """Final coefficients: one step of iterative refinement against the
        data matrix recovers the digits the normal equations lose."""
        _, beta = subset_rss(idx)
        for _ in range(2):
            resid = y - b[:, idx] @ beta
            corr = b[:, idx].T @ resid / scale[idx]
            beta = beta + _scaled_solve(idx, corr) / scale[idx]
        resid = y - b[:, idx] @ beta
        return beta, float(resid @ resid)

    current = list(range(m))
    rss, beta_full = subset_rss(current)
    best_sets = [(_gcv(rss, n, len(current), _knot_count(terms), penalty), list(current))]
    while len(current) > 1:
        best_del = None
        for t in current:
            if t == 0:
                continue  # intercept stays
            trial = [s for s in current if s != t]
            trial_rss, _ = subset_rss(trial)
            if best_del is None or trial_rss < best_del[0]:
                best_del = (trial_rss, trial)
        if best_del is None:
            break
        rss, current = best_del[0], best_del[1]
        kept_terms = [terms[s] for s in current]
        best_sets.append((_gcv(rss, n, len(current), _knot_count(kept_terms), penalty), list(current)))

    gcv_val, chosen = min(best_sets, key=lambda t: t[0])
    beta, final_rss = subset_beta_refined(chosen)

    kept = [(terms[s], beta[i]) for i, s in enumerate(chosen)]
    intercept = next(co for t, co in kept if t == ())
    out_terms = tuple(t for t, _ in kept if t != ())
    out_coefs = np.array([co for t, co in kept if t != ()])
    return MarsFit(
        intercept=float(intercept),
        coefs=out_coefs,
        terms=out_terms,
        rss=final_rss,
        gcv=float(gcv_val),
        n_inputs=x.shape[1],
        forward_rss=tuple(forward_rss),
    )


def mars_predict(fit: MarsFit, x) -> np.ndarray:
    return fit.predict(x)


def mars_gradient(fit: MarsFit, x) -> np.ndarray:
    g = fit.gradient(np.atleast_2d(np.asarray(x, dtype=float)))
    return g[0] if np.asarray(x).ndim == 1 else g
