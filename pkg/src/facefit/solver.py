"""Box-constrained linear least squares.

Minimizes ||J x - b||^2 subject to elementwise bounds lower <= x <= upper,
using an interior reflective Newton method: iterates stay inside the box,
search directions are Newton steps of the bound-scaled problem (solved
iteratively with LSMR, so J is never densified), and each step is chosen
among the truncated Newton step, its reflection off the first bound hit,
and a scaled steepest-descent step by exact objective decrease. Because the
residual is affine, the quadratic model is exact and the objective sequence
is non-increasing by construction.

A finishing pass identifies the active set of the converged iterate, snaps
those coordinates onto their bounds exactly, re-solves the free coordinates,
and accepts the result only when the KKT conditions verify.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.sparse.linalg import LinearOperator, lsmr

_STALL_DECREASE = 1e-16


@dataclasses.dataclass
class BoxLsqResult:
    x: np.ndarray
    iterations: int
    converged: bool
    objective: float  # ||J x - b||^2 at the returned point
    objective_history: np.ndarray  # non-increasing, one entry per accepted iterate


def _as_bound(value, n, default):
    if value is None:
        return np.full(n, default, dtype=np.float64)
    if np.isscalar(value):
        return np.full(n, float(value), dtype=np.float64)
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (n,):
        raise ValueError("bound: expected scalar or shape (%d,), got %r" % (n, arr.shape))
    return arr.copy()


def _make_strictly_interior(x, lb, ub, rstep=1e-10):
    """Clip into the box; with rstep > 0, push off the faces by a relative margin."""
    x = np.clip(np.asarray(x, dtype=np.float64), lb, ub)
    if rstep <= 0.0:
        return x
    lo = np.where(np.isfinite(lb), lb + rstep * np.maximum(1.0, np.abs(lb)), lb)
    hi = np.where(np.isfinite(ub), ub - rstep * np.maximum(1.0, np.abs(ub)), ub)
    out = np.minimum(np.maximum(x, lo), hi)
    bad = lo > hi  # box narrower than twice the margin: fall back to the midpoint
    if np.any(bad):
        out[bad] = (0.5 * (lb + ub))[bad]
    return out


def _scaling(x, g, lb, ub):
    """Coleman-Li scaling vector v and its derivative signs dv."""
    v = np.ones_like(x)
    dv = np.zeros_like(x)
    m = (g < 0.0) & np.isfinite(ub)
    v[m] = ub[m] - x[m]
    dv[m] = -1.0
    m = (g > 0.0) & np.isfinite(lb)
    v[m] = x[m] - lb[m]
    dv[m] = 1.0
    return v, dv


def _step_to_bound(x, s, lb, ub):
    """Largest alpha >= 0 keeping x + alpha*s in the box, and which bounds stop it."""
    steps = np.full_like(x, np.inf)
    pos = s > 0.0
    neg = s < 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        steps[pos] = (ub[pos] - x[pos]) / s[pos]
        steps[neg] = (lb[neg] - x[neg]) / s[neg]
    steps[steps < 0.0] = 0.0  # guard tiny negative values from prior clipping
    alpha = float(np.min(steps)) if steps.size else np.inf
    hits = np.zeros(x.shape[0], dtype=np.int8)
    if np.isfinite(alpha):
        hits[steps == alpha] = np.sign(s[steps == alpha]).astype(np.int8)
    return alpha, hits


def _newton_direction(J, JT, d, diag_h, r, maxiter):
    """Newton step of the bound-scaled quadratic, via LSMR on the augmented system."""
    m, n = J.shape
    root_c = np.sqrt(diag_h)

    def matvec(p):
        return np.concatenate([J @ (d * p), root_c * p])

    def rmatvec(q):
        return d * (JT @ q[:m]) + root_c * q[m:]

    op = LinearOperator((m + n, n), matvec=matvec, rmatvec=rmatvec, dtype=np.float64)
    rhs = np.concatenate([-r, np.zeros(n)])
    p_hat = lsmr(op, rhs, atol=1e-12, btol=1e-12, conlim=0.0, maxiter=maxiter)[0]
    return d * p_hat


def _minimize_quadratic_1d(a, b_lin, lo, hi):
    """Argmin of a*t^2 + b_lin*t on [lo, hi] (a >= 0), with its value."""
    candidates = [lo, hi]
    if a > 0.0:
        t_star = -b_lin / (2.0 * a)
        if lo < t_star < hi:
            candidates.append(t_star)
    values = [a * t * t + b_lin * t for t in candidates]
    i = int(np.argmin(values))
    return candidates[i], values[i]


class _Objective:
    """Exact decrease of 0.5*||J(x+s) - b||^2 relative to x, for affine residuals."""

    def __init__(self, J, g):
        self.J = J
        self.g = g

    def decrease(self, s):
        Js = self.J @ s
        return float(self.g @ s + 0.5 * (Js @ Js))


def _select_step(x, p, sd, obj, lb, ub, theta):
    """Best step among truncated Newton, reflected Newton, and scaled Cauchy."""
    best_step = None
    best_dec = 0.0

    def consider(step):
        nonlocal best_step, best_dec
        dec = obj.decrease(step)
        if dec < best_dec:
            best_dec = dec
            best_step = step

    alpha_p, hits = _step_to_bound(x, p, lb, ub)
    if alpha_p >= 1.0:
        consider(p)  # full Newton step stays in the box
    else:
        if alpha_p > 0.0:
            consider(theta * alpha_p * p)
        # reflect off the first bound hit and search along the folded ray
        p_bound = alpha_p * p
        refl = p.copy()
        refl[hits != 0] *= -1.0
        alpha_r, _ = _step_to_bound(x + p_bound, refl, lb, ub)
        if alpha_r > 0.0:
            t_hi = theta * alpha_r
            J_refl = obj.J @ refl
            a = 0.5 * float(J_refl @ J_refl)
            base = obj.J @ p_bound
            b_lin = float(obj.g @ refl + base @ J_refl)
            if np.isfinite(t_hi):
                t_lo = (1.0 - theta) * alpha_r
                t, _ = _minimize_quadratic_1d(a, b_lin, t_lo, t_hi)
                consider(p_bound + t * refl)
            elif a > 0.0 and b_lin < 0.0:
                consider(p_bound + (-b_lin / (2.0 * a)) * refl)

    # scaled steepest descent (Cauchy) fallback
    alpha_c, _ = _step_to_bound(x, sd, lb, ub)
    if alpha_c > 0.0:
        J_sd = obj.J @ sd
        a = 0.5 * float(J_sd @ J_sd)
        b_lin = float(obj.g @ sd)
        cap = theta * alpha_c
        if np.isfinite(cap):
            t, _ = _minimize_quadratic_1d(a, b_lin, 0.0, cap)
            consider(t * sd)
        elif a > 0.0 and b_lin < 0.0:
            consider((-b_lin / (2.0 * a)) * sd)

    return best_step, best_dec


def _sliceable_columns(J):
    if isinstance(J, np.ndarray):
        return J
    if hasattr(J, "tocsc"):
        return J.tocsc()
    return None


def _active_set_polish(J, JT, b, x, lb, ub, f_current):
    """Snap near-bound coordinates onto their bounds and re-solve the rest.

    Returns (x_polished, kkt_verified) or (None, False) when no KKT-verified
    point better than f_current is found. Only runs when J supports column
    slicing (dense array or sparse matrix).
    """
    Jc = _sliceable_columns(J)
    if Jc is None:
        return None, False
    n = x.shape[0]
    m = J.shape[0]

    snap = 1e-7
    active_low = np.isfinite(lb) & (x - lb <= snap * np.maximum(1.0, np.abs(lb)))
    active_high = np.isfinite(ub) & (ub - x <= snap * np.maximum(1.0, np.abs(ub)))
    active_high &= ~active_low

    for _ in range(3 * n + 3):
        x_try = np.where(active_low, lb, np.where(active_high, ub, 0.0))
        free = ~(active_low | active_high)
        if np.any(free):
            b_eff = b - J @ np.where(free, 0.0, x_try)
            idx = np.flatnonzero(free)
            sol = lsmr(Jc[:, idx], b_eff, atol=1e-14, btol=1e-14, conlim=0.0,
                       maxiter=max(100, 4 * (m + n)))[0]
            x_try[idx] = sol

        viol_low = free & (x_try < lb)
        viol_high = free & (x_try > ub)
        if np.any(viol_low) or np.any(viol_high):
            active_low |= viol_low
            active_high |= viol_high
            continue

        g = JT @ (J @ x_try - b)
        eps_g = 1e-11 * max(1.0, float(np.max(np.abs(g))) if n else 1.0)
        rel_low = active_low & (g < -eps_g)
        rel_high = active_high & (g > eps_g)
        if not (np.any(rel_low) or np.any(rel_high)):
            r_try = J @ x_try - b
            f_try = float(r_try @ r_try)
            if f_try <= f_current * (1.0 + 1e-12) + 1e-12:
                return x_try, True
            return None, False
        # release the single worst offender to avoid cycling
        scores = np.where(rel_low, -g, 0.0) + np.where(rel_high, g, 0.0)
        worst = int(np.argmax(scores))
        active_low[worst] = False
        active_high[worst] = False
    return None, False


def solve_box_lsq(
    J,
    b,
    lower=None,
    upper=None,
    x0=None,
    *,
    grad_tolerance=1e-8,
    max_iterations=200,
) -> BoxLsqResult:
    """Minimize ||J x - b||^2 subject to lower <= x <= upper.

    Args:
        J: (m, n) dense array, sparse matrix, or object supporting @ and .T.
        b: (m,) target vector.
        lower/upper: scalars, (n,) arrays, or None for unbounded. May contain
            +-inf or very large finite surrogates.
        x0: optional start, clipped into the box (defaults to its center,
            or 0 where unbounded).
        grad_tolerance: relative tolerance on the scaled gradient inf-norm.
        max_iterations: cap on accepted interior steps; 0 returns the clipped
            start with converged=False.

    Returns:
        BoxLsqResult. Every returned coordinate lies inside [lower, upper]
        exactly, and objective_history is non-increasing.
    """
    m, n = J.shape
    b = np.asarray(b, dtype=np.float64).reshape(m)
    lb = _as_bound(lower, n, -np.inf)
    ub = _as_bound(upper, n, np.inf)
    if np.any(lb > ub):
        raise ValueError("bounds: lower exceeds upper at index %d" % int(np.argmax(lb > ub)))
    JT = J.T

    if x0 is None:
        x0 = np.where(np.isfinite(lb) & np.isfinite(ub), 0.5 * (lb + ub), 0.0)
    if max_iterations > 0:
        x = _make_strictly_interior(np.asarray(x0, dtype=np.float64), lb, ub)
    else:
        x = np.clip(np.asarray(x0, dtype=np.float64), lb, ub)

    r = J @ x - b
    g = JT @ r
    f_half = 0.5 * float(r @ r)
    history = [2.0 * f_half]

    iterations = 0
    converged = False
    gnorm0 = None
    lsmr_maxiter = max(100, 4 * (m + n))

    if max_iterations > 0:
        while True:
            v, dv = _scaling(x, g, lb, ub)
            gnorm = float(np.max(np.abs(v * g))) if n else 0.0
            if gnorm0 is None:
                gnorm0 = gnorm
            if gnorm <= grad_tolerance * max(1.0, gnorm0):
                converged = True
                break
            if iterations >= max_iterations:
                break

            d = np.sqrt(v)
            diag_h = g * dv  # curvature of the scaling; >= 0 by construction
            p = _newton_direction(J, JT, d, diag_h, r, lsmr_maxiter)
            sd = -v * g
            theta = max(0.995, 1.0 - gnorm / max(1.0, gnorm0))

            obj = _Objective(J, g)
            step, dec = _select_step(x, p, sd, obj, lb, ub, theta)
            if step is None or dec >= -_STALL_DECREASE * max(1.0, f_half):
                break

            x_new = np.clip(x + step, lb, ub)
            r_new = J @ x_new - b
            f_new = 0.5 * float(r_new @ r_new)
            if f_new > f_half:  # clipping spoiled the exact decrease; keep the old iterate
                break
            x, r, f_half = x_new, r_new, f_new
            g = JT @ r
            iterations += 1
            history.append(2.0 * f_half)

        x_polished, kkt = _active_set_polish(J, JT, b, x, lb, ub, 2.0 * f_half)
        if x_polished is not None:
            r_pol = J @ x_polished - b
            f_pol = 0.5 * float(r_pol @ r_pol)
            # accept only if the recomputed value does not break monotonicity,
            # so objective == objective_history[-1] holds exactly
            if 2.0 * f_pol <= history[-1]:
                x, r, f_half = x_polished, r_pol, f_pol
                converged = converged or kkt
                history.append(2.0 * f_half)

    x = np.clip(x, lb, ub)
    return BoxLsqResult(
        x=x,
        iterations=iterations,
        converged=converged,
        objective=2.0 * f_half,
        objective_history=np.asarray(history, dtype=np.float64),
    )
