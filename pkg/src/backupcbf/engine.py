"""Engine API over the barrier stack: batched evaluation, rollouts, ZOH steps.

`ReferenceEngine` works for any system/suite through the generic barrier
path. `make_engine` picks the compiled pendulum kernel when the stack matches
its specialization and numba is importable, otherwise falls back to the
reference implementation (identical semantics, slower).
"""

from __future__ import annotations

import numpy as np

from . import backup as bk
from .barrier import grad_h, h_value
from .dynamics import FlowConfig, flow


class ReferenceEngine:
    """Pure-numpy engine over the generic barrier path."""

    def __init__(self, sys, suite, h_s, cfg):
        self.sys = sys
        self.suite = suite
        self.h_s = h_s
        self.cfg = cfg

    @property
    def n_pol(self):
        return self.suite.n_policies

    def set_weights(self, neural):
        self.suite = self.suite.replace_neural(neural)

    def barrier_batch(self, X, want_grad=True, want_samples=False):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if want_grad:
            ev = grad_h(self.sys, self.suite, self.h_s, X, self.cfg)
        else:
            ev = h_value(self.sys, self.suite, self.h_s, X, self.cfg)
        out = {"h_j": ev.h_j, "h": ev.h}
        if want_grad:
            out.update(grad_h=ev.grad_h, L_f_h=ev.L_f_h, L_g_h=ev.L_g_h)
        if want_samples:
            bundle = ev.bundle  # (B, P, N+1, n)
            u_at = np.stack(
                [bk.backup_policy(self.suite, j)(bundle[:, j])[..., 0]
                 for j in range(self.suite.n_policies)], axis=1)
            one_step = FlowConfig(horizon_T=self.cfg.flow.sample_dt, num_samples_N=1,
                                  substeps_per_sample=self.cfg.flow.substeps_per_sample)
            extra = np.stack(
                [flow(self.sys, bk.backup_policy(self.suite, j), bundle[:, j, -1],
                      one_step)[:, -1] for j in range(self.suite.n_policies)], axis=1)
            out.update(bundle=bundle, u_at_samples=u_at, extra_next=extra)
        return out

    def backup_controls(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.stack([bk.backup_policy(self.suite, j)(X)[..., 0]
                         for j in range(self.suite.n_policies)], axis=-1)

    def rollout_policy(self, X, policy_index, duration, dt, substeps=2):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        steps = int(round(duration / dt))
        cfg = FlowConfig(horizon_T=steps * dt, num_samples_N=steps,
                         substeps_per_sample=substeps)
        return flow(self.sys, bk.backup_policy(self.suite, policy_index), X, cfg)

    def zoh_step(self, X, U, dt, substeps=2):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.asarray(U, dtype=float).reshape(X.shape[0], -1)

        class _Held:
            def __call__(self_inner, x):
                return U if x.ndim == X.ndim else U[0]

        cfg = FlowConfig(horizon_T=dt, num_samples_N=1, substeps_per_sample=substeps)
        return flow(self.sys, _Held(), X, cfg)[:, -1]


def make_engine(stack, prefer_fast=True):
    """Fast compiled engine when the stack supports it, reference otherwise."""
    if prefer_fast:
        try:
            from .fastpath import NUMBA_AVAILABLE, FastPendulumEngine

            if NUMBA_AVAILABLE:
                return FastPendulumEngine(stack.sys, stack.suite, stack.h_s, stack.cfg)
        except (ImportError, ValueError):
            pass
    return ReferenceEngine(stack.sys, stack.suite, stack.h_s, stack.cfg)
