"""Inverted-pendulum benchmark: safety set, backup suite, rewards, default configs.

The safe set is the 100-norm superellipse h_s(x) = 1 - ||diag(1/(pi-0.5), 0.5) x||_100,
the backup suite is the two-ellipse pendulum suite, and the performance reward
is r_p(angle, rate, u) = -(angle - 0.8)^2 - 0.1 rate^2 - 0.001 u^2, maximized
at rest at angle 0.8 with zero torque.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backup import BackupSuite, MlpPolicy, make_pendulum_suite
from .barrier import BarrierConfig, SoftParams, epsilon_s_estimate
from .dynamics import Box, FlowConfig, SystemModel, make_pendulum


class WeightedPNormSafety:
    """h_s(x) = 1 - ||W x||_p with diagonal W, computed in max-factored form.

    Factoring out the largest |W_i x_i| keeps the p-th powers in [0, 1], so
    the evaluation never overflows even for p = 100.
    """

    def __init__(self, diag_weights, p=100.0):
        self.w = np.asarray(diag_weights, dtype=float)
        self.p = float(p)

    def __call__(self, x):
        z = np.abs(np.asarray(x, dtype=float) * self.w)
        m = np.max(z, axis=-1)
        safe_m = np.where(m > 0.0, m, 1.0)
        r = np.sum((z / safe_m[..., None]) ** self.p, axis=-1) ** (1.0 / self.p)
        return 1.0 - m * r

    def gradient(self, x):
        """d h_s / d x; defined as 0 at the origin (the norm's kink)."""
        x = np.asarray(x, dtype=float)
        z = np.abs(x * self.w)
        m = np.max(z, axis=-1)
        safe_m = np.where(m > 0.0, m, 1.0)
        zn = z / safe_m[..., None]
        r = np.sum(zn ** self.p, axis=-1) ** (1.0 / self.p)
        # d||z||_p/dz_i = (z_i/||z||)^(p-1); ||z|| = m*r
        ratio = np.where(r[..., None] > 0.0, zn / np.where(r[..., None] == 0.0, 1.0, r[..., None]), 0.0)
        dnorm = ratio ** (self.p - 1.0)
        grad = -dnorm * np.sign(x * self.w) * self.w
        return np.where(m[..., None] > 0.0, grad, 0.0)


PENDULUM_SAFETY = WeightedPNormSafety(np.array([1.0 / (np.pi - 0.5), 0.5]), p=100.0)
X_OPT = np.array([0.8, 0.0])

# State box for grid oracles, Lipschitz estimates, and set exports; contains
# the safe superellipse with margin.
STATE_BOX = Box(np.array([-np.pi - 0.2, -2.4]), np.array([np.pi + 0.2, 2.4]))


def performance_reward(x, u):
    """r_p = -(angle - 0.8)^2 - 0.1 rate^2 - 0.001 u^2 (batched)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    usq = np.sum(u ** 2, axis=-1) if u.ndim and u.shape[-1:] == (1,) else u ** 2
    usq = np.squeeze(usq) if np.ndim(usq) > np.ndim(x[..., 0]) else usq
    return -(x[..., 0] - 0.8) ** 2 - 0.1 * x[..., 1] ** 2 - 0.001 * usq


@dataclass
class BenchmarkStack:
    """Everything the runner needs, wired together."""

    sys: SystemModel
    suite: BackupSuite
    h_s: WeightedPNormSafety
    cfg: BarrierConfig
    state_box: Box = STATE_BOX
    x_opt: np.ndarray = field(default_factory=lambda: X_OPT.copy())

    def with_suite(self, suite):
        return BenchmarkStack(self.sys, suite, self.h_s, self.cfg, self.state_box,
                              self.x_opt)


DEFAULT_FLOW = dict(horizon_T=1.5, num_samples_N=150, substeps_per_sample=1)
DEFAULT_SOFT = dict(rho2=100.0, rho3=100.0)
# Benchmark-scale filter constants. h is capped near the backup-set level
# 0.02, so the gamma scales are far below the library's order-one defaults.
DEFAULT_SHIELD = dict(alpha=50.0, kappa_h=0.002, kappa_beta=0.05)
DEFAULT_MLP_HIDDEN = (24, 24)


def make_benchmark(neural=None, gain_K=None, rho1=100.0, nu=None,
                   flow_overrides=None, soft_overrides=None, shield_overrides=None,
                   epsilon="auto", epsilon_margin=1.0):
    """Assemble the pendulum stack with benchmark defaults.

    epsilon="auto" sets epsilon = epsilon_margin * estimated eps_s (and records
    the estimate); pass a float to pin it.
    """
    sys_ = make_pendulum()
    kwargs = {}
    if nu is not None:
        kwargs["nu"] = nu
    suite = make_pendulum_suite(gain_K=gain_K, neural=neural, rho1=rho1, **kwargs)
    flow_cfg = FlowConfig(**{**DEFAULT_FLOW, **(flow_overrides or {})})
    soft = SoftParams(**{**DEFAULT_SOFT, **(soft_overrides or {})})
    shield_kw = {**DEFAULT_SHIELD, **(shield_overrides or {})}
    cfg = BarrierConfig(flow=flow_cfg, soft=soft, epsilon=0.0, epsilon_s=0.0, **shield_kw)
    if epsilon == "auto":
        eps_s = epsilon_s_estimate(sys_, suite, PENDULUM_SAFETY, STATE_BOX, cfg)
        cfg = cfg.with_epsilon(epsilon_margin * eps_s, eps_s)
    else:
        eps_s = epsilon_s_estimate(sys_, suite, PENDULUM_SAFETY, STATE_BOX, cfg)
        cfg = cfg.with_epsilon(float(epsilon), eps_s)
    return BenchmarkStack(sys=sys_, suite=suite, h_s=PENDULUM_SAFETY, cfg=cfg)


def fresh_neural_policy(rng, hidden=DEFAULT_MLP_HIDDEN, box=None):
    if box is None:
        box = make_pendulum().control_box
    return MlpPolicy.random(2, list(hidden), box, rng, scale=0.5)
