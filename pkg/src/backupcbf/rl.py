"""Replay data for training the neural backup policy.

Every safety-filter query already integrates one trajectory per backup
policy; those samples become transitions, and every transition from backup
j's trajectory carries the identical reward h_j evaluated at the query
state. The final sample's successor comes from one extra sample-interval
step, so each query contributes exactly (number of policies) x N transitions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backup as bk
from .dynamics import FlowConfig, flow


@dataclass(frozen=True)
class Transition:
    x: np.ndarray
    u: np.ndarray
    r: float
    x_next: np.ndarray


@dataclass(frozen=True)
class MdpConfig:
    """Zero-order-hold MDP wrapper around the continuous dynamics."""

    dt: float = 0.01
    horizon_H: int = 200
    discount: float = 0.99
    init_dist: object = None  # callable(rng) -> x0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must be in (0, 1)")


class ReplayBuffer:
    """Fixed-capacity ring buffer of (x, u, r, x_next) rows with uniform sampling."""

    def __init__(self, capacity, n, m):
        self.capacity = int(capacity)
        self.x = np.zeros((self.capacity, n))
        self.u = np.zeros((self.capacity, m))
        self.r = np.zeros(self.capacity)
        self.x_next = np.zeros((self.capacity, n))
        self.ptr = 0
        self.size = 0

    def __len__(self):
        return self.size

    def append_batch(self, x, u, r, x_next):
        x = np.atleast_2d(x)
        u = np.atleast_2d(u)
        r = np.atleast_1d(r)
        x_next = np.atleast_2d(x_next)
        count = x.shape[0]
        if count > self.capacity:
            raise ValueError("batch larger than buffer capacity")
        end = self.ptr + count
        if end <= self.capacity:
            sl = slice(self.ptr, end)
            self.x[sl] = x
            self.u[sl] = u
            self.r[sl] = r
            self.x_next[sl] = x_next
        else:
            head = self.capacity - self.ptr
            for buf, data in ((self.x, x), (self.u, u), (self.r, r),
                              (self.x_next, x_next)):
                buf[self.ptr:] = data[:head]
                buf[: count - head] = data[head:]
        self.ptr = int(end % self.capacity)
        self.size = int(min(self.size + count, self.capacity))

    def append(self, transition: Transition):
        self.append_batch(transition.x, transition.u, transition.r, transition.x_next)

    def sample(self, batch_size, rng):
        if batch_size > self.size:
            raise ValueError("batch size exceeds buffer size")
        idx = rng.integers(0, self.size, size=batch_size)
        return {"x": self.x[idx], "u": self.u[idx], "r": self.r[idx],
                "x_next": self.x_next[idx]}


def assign_backup_rewards(sys, suite, samples, h_j, cfg_flow: FlowConfig,
                          u_at_samples=None, extra_next=None):
    """Turn one query's backup trajectories into reward-labeled transitions.

    samples: (P, N+1, n) sampled flows from the barrier evaluation; h_j the
    matching per-index barrier values. For each index j the transitions are
    (x_i, u_bj(x_i), h_j, x_{i+1}) for samples i = 1..N, where the successor
    of sample N comes from one extra sample-interval step. Returns
    (x, u, r, x_next) arrays with P*N rows, ordered by index then time.
    """
    samples = np.asarray(samples, dtype=float)
    p, n_plus_1, n = samples.shape
    n_samples = n_plus_1 - 1
    one_step = FlowConfig(horizon_T=cfg_flow.sample_dt, num_samples_N=1,
                          substeps_per_sample=cfg_flow.substeps_per_sample)
    xs, us, rs, xns = [], [], [], []
    for j in range(p):
        x_j = samples[j, 1:]
        if u_at_samples is None:
            u_j = np.atleast_2d(bk.backup_policy(suite, j)(x_j))
        else:
            u_j = np.asarray(u_at_samples[j, 1:], dtype=float).reshape(n_samples, -1)
        if extra_next is None:
            last_next = flow(sys, bk.backup_policy(suite, j), samples[j, -1],
                             one_step)[-1]
        else:
            last_next = np.asarray(extra_next[j], dtype=float)
        xn_j = np.concatenate([samples[j, 2:], last_next[None, :]], axis=0)
        xs.append(x_j)
        us.append(u_j)
        rs.append(np.full(n_samples, float(h_j[j])))
        xns.append(xn_j)
    return (np.concatenate(xs), np.concatenate(us), np.concatenate(rs),
            np.concatenate(xns))
