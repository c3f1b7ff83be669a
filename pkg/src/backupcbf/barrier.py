"""Sampled soft-min/soft-max barrier over backup-policy flows.

For each backup index j the barrier value h_j(x) is a soft minimum of the
safety function evaluated along the sampled closed-loop flow under that
backup policy, together with a terminal backup-set membership term; h(x) is
the soft maximum over indices. Exact (hard min/max, finely sampled)
counterparts are provided as oracles, along with the sampling-gap margin
eps_s that compensates for between-sample excursions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import backup as bk
from .dynamics import Box, FlowConfig, SystemModel, flow, flow_sensitivity_adjoint, \
    flow_sensitivity_forward


def _logsumexp(z, axis=-1):
    m = np.max(z, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))).squeeze(axis)


def softmin_rho(rho, values, axis=-1):
    """softmin_rho(z) = -(1/rho) log sum_i exp(-rho z_i), max-shifted for stability.

    Always <= min(z) and >= min(z) - log(N)/rho.
    """
    values = np.asarray(values, dtype=float)
    if values.shape[axis] == 0:
        raise ValueError("softmin of an empty value list")
    if rho <= 0:
        raise ValueError("rho must be positive")
    return -_logsumexp(-rho * values, axis=axis) / rho


def softmax_rho(rho, values, axis=-1):
    """softmax_rho(z) = (1/rho) log sum_i exp(rho z_i) - log(N)/rho.

    The -log(N)/rho correction makes softmax_rho(z, ..., z) = z exactly;
    always <= max(z) and >= max(z) - log(N)/rho.
    """
    values = np.asarray(values, dtype=float)
    n = values.shape[axis]
    if n == 0:
        raise ValueError("softmax of an empty value list")
    if rho <= 0:
        raise ValueError("rho must be positive")
    return _logsumexp(rho * values, axis=axis) / rho - np.log(n) / rho


def softmin_weights(rho, values, axis=-1):
    """Partial derivatives of softmin_rho w.r.t. its inputs (sum to one)."""
    values = np.asarray(values, dtype=float)
    z = -rho * values
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_weights(rho, values, axis=-1):
    values = np.asarray(values, dtype=float)
    z = rho * values
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass(frozen=True)
class SoftParams:
    """Sharpness of the trajectory soft minimum (rho2) and the index soft maximum (rho3)."""

    rho2: float = 100.0
    rho3: float = 100.0

    def __post_init__(self):
        if self.rho2 <= 0 or self.rho3 <= 0:
            raise ValueError("rho2 and rho3 must be positive")


@dataclass(frozen=True)
class BarrierConfig:
    """Everything the barrier and the shield need beyond the suite itself.

    epsilon is the filter margin; forward-invariance guarantees ask for
    epsilon >= epsilon_s. alpha is the barrier-rate coefficient of the QP
    constraint; kappa_h and kappa_beta scale the feasibility margin gamma.
    """

    flow: FlowConfig
    soft: SoftParams = SoftParams()
    epsilon: float = 0.0
    epsilon_s: float = 0.0
    alpha: float = 5.0
    kappa_h: float = 1.0
    kappa_beta: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0 or self.epsilon_s < 0:
            raise ValueError("epsilon and epsilon_s must be nonnegative")
        if self.alpha <= 0 or self.kappa_h <= 0 or self.kappa_beta <= 0:
            raise ValueError("alpha, kappa_h, kappa_beta must be positive")

    def claims_invariance(self):
        return self.epsilon >= self.epsilon_s

    def with_epsilon(self, epsilon, epsilon_s=None):
        eps_s = self.epsilon_s if epsilon_s is None else epsilon_s
        return replace(self, epsilon=epsilon, epsilon_s=eps_s)


@dataclass
class BarrierEvaluation:
    """Barrier quantities at one state: per-index values, h, gradient, Lie derivatives."""

    h_j: np.ndarray
    h: float
    grad_h: np.ndarray | None
    L_f_h: float | None
    L_g_h: np.ndarray | None
    beta: float | None
    gamma: float | None
    bundle: np.ndarray | None


def _trajectory_values(suite, h_s, samples, j):
    """Softmin argument list for index j: h_s at every sample plus the terminal term."""
    hs_vals = h_s(samples)  # (..., N+1)
    terminal = bk.terminal_set_value(suite, j, samples[..., -1, :])
    return np.concatenate([hs_vals, terminal[..., None]], axis=-1)


def h_j_value(sys: SystemModel, suite, h_s, j, x, cfg: BarrierConfig):
    """Barrier value for one backup index; returns (value, samples)."""
    samples = flow(sys, bk.backup_policy(suite, j), x, cfg.flow)
    vals = _trajectory_values(suite, h_s, samples, j)
    return softmin_rho(cfg.soft.rho2, vals, axis=-1), samples


def h_value(sys: SystemModel, suite, h_s, x, cfg: BarrierConfig):
    """All h_j plus their soft maximum h; returns a values-only BarrierEvaluation.

    Batched: x may carry leading dimensions, in which case h_j has shape
    (..., P) and the bundle (..., P, N+1, n).
    """
    hj, bundles = [], []
    for j in range(suite.n_policies):
        v, samples = h_j_value(sys, suite, h_s, j, x, cfg)
        hj.append(v)
        bundles.append(samples)
    hj = np.stack(hj, axis=-1)
    bundle = np.stack(bundles, axis=-3)
    h = softmax_rho(cfg.soft.rho3, hj, axis=-1)
    return BarrierEvaluation(h_j=hj, h=h, grad_h=None, L_f_h=None, L_g_h=None,
                             beta=None, gamma=None, bundle=bundle)


def _grad_h_j_forward(sys, suite, h_s, j, x, cfg):
    policy = bk.backup_policy(suite, j)
    samples, qs = flow_sensitivity_forward(sys, policy, x, cfg.flow)
    vals = _trajectory_values(suite, h_s, samples, j)
    s = softmin_weights(cfg.soft.rho2, vals, axis=-1)
    hs_grads = h_s.gradient(samples)  # (..., N+1, n)
    cot = s[..., :-1, None] * hs_grads
    cot = cot.copy()
    term_grad = bk.terminal_set_grad(suite, j, samples[..., -1, :])
    cot[..., -1, :] += s[..., -1, None] * term_grad
    grad = np.einsum("...inj,...in->...j", qs, cot)
    return softmin_rho(cfg.soft.rho2, vals, axis=-1), grad, samples


def _grad_h_j_adjoint(sys, suite, h_s, j, x, cfg):
    policy = bk.backup_policy(suite, j)
    samples = flow(sys, policy, x, cfg.flow)
    vals = _trajectory_values(suite, h_s, samples, j)
    s = softmin_weights(cfg.soft.rho2, vals, axis=-1)
    hs_grads = h_s.gradient(samples)
    n_samples = samples.shape[-2]
    cotangents = []
    for i in range(n_samples):
        v = s[..., i, None] * hs_grads[..., i, :]
        if i == n_samples - 1:
            v = v + s[..., -1, None] * bk.terminal_set_grad(suite, j, samples[..., -1, :])
        cotangents.append((i, v))
    grad = flow_sensitivity_adjoint(sys, policy, x, cfg.flow, cotangents)
    return softmin_rho(cfg.soft.rho2, vals, axis=-1), grad, samples


def grad_h(sys: SystemModel, suite, h_s, x, cfg: BarrierConfig, method="forward"):
    """Exact chain-rule gradient of h through softmax(softmin(flow samples)).

    Per-sample cotangents are the softmin partial weights times the safety
    gradient, pulled back through the flow sensitivities either by forward
    contraction or by the adjoint pass; the two agree to machine precision.
    Returns a BarrierEvaluation with grad_h and Lie derivatives filled in.
    """
    if method not in ("forward", "adjoint"):
        raise ValueError(f"unknown gradient method {method!r}")
    compute = _grad_h_j_forward if method == "forward" else _grad_h_j_adjoint
    hj, grads, bundles = [], [], []
    for j in range(suite.n_policies):
        v, g, samples = compute(sys, suite, h_s, j, x, cfg)
        hj.append(v)
        grads.append(g)
        bundles.append(samples)
    hj = np.stack(hj, axis=-1)
    grads = np.stack(grads, axis=-2)  # (..., P, n)
    w = softmax_weights(cfg.soft.rho3, hj, axis=-1)
    gh = np.einsum("...j,...jn->...n", w, grads)
    h = softmax_rho(cfg.soft.rho3, hj, axis=-1)
    lfh = np.einsum("...n,...n->...", gh, sys.f(x))
    lgh = np.einsum("...n,...nm->...m", gh, sys.g(x))
    return BarrierEvaluation(h_j=hj, h=h, grad_h=gh, L_f_h=lfh, L_g_h=lgh,
                             beta=None, gamma=None, bundle=np.stack(bundles, axis=-3))


def box_max_linear(coeffs, box: Box):
    """max over u in box of coeffs . u, in closed form (componentwise corner pick)."""
    coeffs = np.asarray(coeffs, dtype=float)
    return np.sum(np.maximum(coeffs * box.lower, coeffs * box.upper), axis=-1)


def beta_value(evaluation: BarrierEvaluation, box: Box, cfg: BarrierConfig):
    """Best achievable barrier rate: L_f h + alpha (h - eps) + max_u L_g h . u."""
    return (evaluation.L_f_h + cfg.alpha * (evaluation.h - cfg.epsilon)
            + box_max_linear(evaluation.L_g_h, box))


def gamma_value(evaluation: BarrierEvaluation, cfg: BarrierConfig):
    """Feasibility margin min{(h - eps)/kappa_h, beta/kappa_beta}."""
    return np.minimum((evaluation.h - cfg.epsilon) / cfg.kappa_h,
                      evaluation.beta / cfg.kappa_beta)


def evaluate_barrier(sys, suite, h_s, x, cfg: BarrierConfig, method="forward"):
    """Fully populated BarrierEvaluation (values, gradient, beta, gamma)."""
    ev = grad_h(sys, suite, h_s, x, cfg, method=method)
    ev.beta = beta_value(ev, sys.control_box, cfg)
    ev.gamma = gamma_value(ev, cfg)
    return ev


def epsilon_s_estimate(sys: SystemModel, suite, h_s, state_box: Box,
                       cfg: BarrierConfig, grid_per_dim=101):
    """Sampling-gap margin (T_s / 2) * l_phi * l_s estimated over a state box.

    l_phi is the largest closed-loop speed over the box across all backup
    policies, l_s the largest safety-gradient norm; both are dense-grid
    maxima (the global suprema are infinite for polynomial-growth systems, so
    the box — which must contain every state the shield can visit — stands in).
    """
    axes = [np.linspace(lo, hi, grid_per_dim)
            for lo, hi in zip(state_box.lower, state_box.upper)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, sys.n)
    l_phi = 0.0
    for j in range(suite.n_policies):
        rhs = sys.closed_loop(bk.backup_policy(suite, j))
        speeds = np.linalg.norm(rhs(grid), axis=-1)
        l_phi = max(l_phi, float(np.max(speeds)))
    l_s = float(np.max(np.linalg.norm(h_s.gradient(grid), axis=-1)))
    return 0.5 * cfg.flow.sample_dt * l_phi * l_s


def h_star_components(sys, suite, h_s, x, fine_cfg: FlowConfig):
    """Exact per-index barrier: hard min of finely sampled h_s and the terminal term."""
    out = []
    for j in range(suite.n_policies):
        samples = flow(sys, bk.backup_policy(suite, j), x, fine_cfg)
        hs_min = np.min(h_s(samples), axis=-1)
        terminal = bk.terminal_set_value(suite, j, samples[..., -1, :])
        out.append(np.minimum(hs_min, terminal))
    return np.stack(out, axis=-1)


def h_star_exact(sys, suite, h_s, x, fine_cfg: FlowConfig):
    """Exact barrier h_*(x) = max_j h_*j(x); oracle for containment checks.

    fine_cfg should sample at least 10x more densely than the soft barrier's
    flow grid.
    """
    return np.max(h_star_components(sys, suite, h_s, x, fine_cfg), axis=-1)
