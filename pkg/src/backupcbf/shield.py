"""Minimum-intervention safety filter over the sampled barrier.

The filter computes the feasibility margin gamma from the barrier value and
the best achievable barrier rate. Inside the feasible region it blends the
QP-filtered desired control with an augmented (barrier-weighted) backup
control; outside it executes the backup policy selected by a switching index
q that only changes when gamma changes sign between consecutive queries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backup as bk
from .backup import smoothstep
from .barrier import BarrierConfig, box_max_linear, evaluate_barrier
from .dynamics import Box


class AugmentedControlError(RuntimeError):
    """No backup index clears the epsilon margin; the caller is outside int S-bar."""


@dataclass(frozen=True)
class SigmaBlend:
    """Blend profile: 0 below 0, 1 above 1, strictly increasing C^1 ramp between."""

    def __call__(self, a):
        return smoothstep(np.asarray(a, dtype=float))


@dataclass
class ShieldState:
    """Switching variable q plus the gamma sign at the previous query.

    q may only change when the gamma sign flips between consecutive queries,
    which is the sampled-time realization of switching on the boundary of the
    feasible region.
    """

    q: int
    prev_gamma_sign: int | None = None


@dataclass
class QpResult:
    u_star: np.ndarray
    constraint_slack: float
    objective: float
    status: str  # "optimal" | "infeasible"


def _project_box_halfspace(u_d, a, b, box: Box, tol=1e-12):
    """Exact projection of u_d onto {u in box : a . u >= b}.

    KKT form u(lam) = clip(u_d + lam a, box) with a . u(lam) piecewise linear
    and nondecreasing in lam >= 0; walk its breakpoints to solve
    a . u(lam) = b exactly. Returns (u, feasible).
    """
    u0 = box.clip(u_d)
    if a @ u0 >= b - tol:
        return u0, True
    if b > box_max_linear(a, box) + tol:
        return u0, False
    # Breakpoints where a coordinate of u_d + lam a hits a box face.
    lams = [0.0]
    for i in range(box.dim):
        if abs(a[i]) > tol:
            for bound in (box.lower[i], box.upper[i]):
                lam = (bound - u_d[i]) / a[i]
                if lam > 0:
                    lams.append(lam)
    lams = sorted(set(lams))
    phi_prev = a @ box.clip(u_d)
    for k, lam in enumerate(lams):
        u_lam = box.clip(u_d + lam * a)
        phi = a @ u_lam
        if phi >= b - tol:
            # Solve within the previous segment: phi is linear there.
            lo = lams[k - 1] if k > 0 else 0.0
            u_lo = box.clip(u_d + lo * a)
            phi_lo = a @ u_lo
            if phi - phi_lo > tol:
                t = (b - phi_lo) / (phi - phi_lo)
                return box.clip(u_d + (lo + t * (lam - lo)) * a), True
            return u_lam, True
        phi_prev = phi
    # Beyond the last breakpoint phi grows with slope sum of a_i^2 over free coords.
    lam = lams[-1]
    u_lam = box.clip(u_d + lam * a)
    free = (u_lam > box.lower + tol) & (u_lam < box.upper - tol)
    slope = float(np.sum(a[free] ** 2))
    if slope <= tol:
        return u_lam, bool(a @ u_lam >= b - tol)
    lam += (b - a @ u_lam) / slope
    return box.clip(u_d + lam * a), True


def solve_safety_qp(evaluation, u_d, box: Box, cfg: BarrierConfig):
    """argmin ||u - u_d||^2 over the box subject to L_f h + L_g h . u + alpha (h - eps) >= 0.

    The single linear constraint makes this a projection onto box-intersect-
    halfspace, solved exactly. Reports infeasible when the constraint cannot
    be met anywhere in the box (never the case on the feasible region Gamma).
    """
    u_d = np.asarray(u_d, dtype=float)
    a = np.asarray(evaluation.L_g_h, dtype=float)
    b = -(evaluation.L_f_h + cfg.alpha * (evaluation.h - cfg.epsilon))
    u, feasible = _project_box_halfspace(u_d, a, b, box)
    slack = float(a @ u - b)
    status = "optimal" if feasible else "infeasible"
    return QpResult(u_star=u, constraint_slack=slack,
                    objective=float(np.sum((u - u_d) ** 2)), status=status)


def qp_batch_m1(u_d, lgh, rhs_bound, box: Box):
    """Vectorized scalar-control QP: clip u_d into [lo, hi] intersect {a u >= b}.

    u_d, lgh, rhs_bound have shape (...,); returns (u, feasible) with u
    already box-clipped where infeasible.
    """
    lo = np.full_like(u_d, box.lower[0])
    hi = np.full_like(u_d, box.upper[0])
    a = lgh
    with np.errstate(divide="ignore", invalid="ignore"):
        thresh = rhs_bound / a
    pos = a > 0
    neg = a < 0
    zero = ~pos & ~neg
    lo = np.where(pos, np.maximum(lo, thresh), lo)
    hi = np.where(neg, np.minimum(hi, thresh), hi)
    feasible = np.where(zero, rhs_bound <= 0.0, lo <= hi)
    u = np.clip(u_d, np.minimum(lo, hi), np.maximum(lo, hi))
    u = np.where(feasible, u, np.clip(u_d, box.lower[0], box.upper[0]))
    return u, feasible


def backup_controls_at(suite, x):
    """All backup controls evaluated at x, stacked as (..., P, m)."""
    return np.stack([bk.backup_policy(suite, j)(x) for j in range(suite.n_policies)],
                    axis=-2)


def augmented_backup_control(h_j, suite, x, epsilon, u_backups=None):
    """Barrier-weighted convex combination of the backup controls.

    Weights are h_j - epsilon over the active indices {j : h_j >= epsilon};
    valid only in the interior of the union of the epsilon-superlevel sets.
    """
    h_j = np.asarray(h_j, dtype=float)
    if u_backups is None:
        u_backups = backup_controls_at(suite, x)
    w = np.where(h_j >= epsilon, h_j - epsilon, 0.0)
    total = np.sum(w, axis=-1)
    if np.any(total <= 0.0):
        raise AugmentedControlError("no backup index clears the epsilon margin")
    return np.einsum("...j,...jm->...m", w, u_backups) / total[..., None]


def initial_shield_state(evaluation):
    """q(0) = argmax_j h_j(x0)."""
    return ShieldState(q=int(np.argmax(evaluation.h_j)), prev_gamma_sign=None)


def _gamma_sign(gamma):
    return int(np.sign(gamma))


def apply_filter(h_j, gamma, L_f_h, L_g_h, h, u_backups, u_d, state: ShieldState,
                 cfg: BarrierConfig, box: Box, sigma=SigmaBlend()):
    """Filter branch logic on precomputed barrier numbers (single state).

    Returns (u, new_state). Shared by the reference shield_control and the
    compiled benchmark engine so the switching semantics exist exactly once.
    """
    sign = _gamma_sign(gamma)
    q = state.q
    if state.prev_gamma_sign is not None and sign != state.prev_gamma_sign:
        eligible = np.nonzero(h_j >= cfg.epsilon)[0]
        if eligible.size:
            q = int(eligible[0])
    new_state = ShieldState(q=q, prev_gamma_sign=sign)

    if gamma <= 0.0:
        return u_backups[q].copy(), new_state

    w = np.where(h_j >= cfg.epsilon, h_j - cfg.epsilon, 0.0)
    total = w.sum()
    if total <= 0.0:
        raise AugmentedControlError("gamma > 0 but no backup index clears epsilon")
    u_a = (w @ u_backups) / total
    b = -(L_f_h + cfg.alpha * (h - cfg.epsilon))
    u_star, feasible = _project_box_halfspace(np.asarray(u_d, dtype=float),
                                              np.asarray(L_g_h, dtype=float), b, box)
    if not feasible:
        return u_backups[q].copy(), new_state
    s = sigma(gamma)
    return (1.0 - s) * u_a + s * u_star, new_state


def shield_control(sys, suite, h_s, u_d, x, state: ShieldState, cfg: BarrierConfig,
                   method="forward", sigma=SigmaBlend()):
    """One safety-filter query; returns (u, BarrierEvaluation, new ShieldState).

    gamma <= 0 executes the held backup policy u_{b_q}; gamma > 0 blends the
    augmented backup control with the QP solution by sigma(gamma). q is
    reassigned to the smallest index of {j : h_j >= eps} whenever the gamma
    sign flips between consecutive queries.
    """
    x = np.asarray(x, dtype=float)
    ev = evaluate_barrier(sys, suite, h_s, x, cfg, method=method)
    u_backups = backup_controls_at(suite, x)
    u, new_state = apply_filter(ev.h_j, float(ev.gamma), float(ev.L_f_h), ev.L_g_h,
                                float(ev.h), u_backups, u_d, state, cfg,
                                sys.control_box, sigma=sigma)
    return u, ev, new_state
