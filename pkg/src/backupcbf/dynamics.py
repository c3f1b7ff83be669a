"""Control-affine dynamics, fixed-step RK4 flow maps, and trajectory sensitivities.

Systems are x' = f(x) + g(x) u(x) with f: R^n -> R^n and g: R^n -> R^{n x m}.
All state-valued callables accept arrays with an arbitrary batch of leading
dimensions, i.e. x of shape (..., n), and return matching batch shapes. Flows
are integrated with fixed-step RK4 so that trajectories, their sensitivities,
and their adjoints are all derivatives of the same discrete map: repeated runs
are bit-identical and forward/adjoint gradients agree to machine precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class IntegrationDivergedError(RuntimeError):
    """Raised when a flow produces non-finite states.

    ``last_valid_index`` is the last sample index at which every state in the
    batch was still finite.
    """

    def __init__(self, msg, last_valid_index):
        super().__init__(msg)
        self.last_valid_index = last_valid_index


def require_finite(x, name="array"):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


@dataclass(frozen=True)
class Box:
    """Axis-aligned compact box, used for admissible controls and state boxes."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = require_finite(self.lower, "lower")
        hi = require_finite(self.upper, "upper")
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if np.any(lo > hi):
            raise ValueError("box requires lower <= upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self):
        return self.lower.shape[0]

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)

    @property
    def half_width(self):
        return 0.5 * (self.upper - self.lower)

    def contains(self, u, tol=0.0):
        u = np.asarray(u, dtype=float)
        return np.all(u >= self.lower - tol, axis=-1) & np.all(u <= self.upper + tol, axis=-1)

    def clip(self, u):
        return np.clip(np.asarray(u, dtype=float), self.lower, self.upper)

    def sample(self, rng, size=None):
        shape = (self.dim,) if size is None else (size, self.dim)
        return rng.uniform(self.lower, self.upper, size=shape)


# Kept under the name the rest of the code base uses for control boxes.
AdmissibleBox = Box


@dataclass(frozen=True)
class SystemModel:
    """Control-affine system with analytic Jacobians.

    f(x): (..., n) -> (..., n)
    g(x): (..., n) -> (..., n, m)
    jac_f(x): (..., n) -> (..., n, n)
    jac_g_cols(x): (..., n) -> (..., m, n, n), Jacobian of each column of g.
    """

    n: int
    m: int
    f: callable
    g: callable
    jac_f: callable
    jac_g_cols: callable
    control_box: Box

    def closed_loop(self, policy):
        """Vector field x -> f(x) + g(x) policy(x)."""

        def rhs(x):
            u = np.asarray(policy(x), dtype=float)
            return self.f(x) + np.einsum("...nm,...m->...n", self.g(x), u)

        return rhs

    def closed_loop_with_jacobian(self, policy):
        """Returns rhs(x) -> (xdot, A) with A = d(f + g u(x))/dx.

        A = jac_f + sum_k u_k * jac_g_cols[k] + g @ du/dx. The policy must
        expose ``input_jacobian(x) -> (..., m, n)``.
        """

        def rhs(x):
            u = np.asarray(policy(x), dtype=float)
            ju = np.asarray(policy.input_jacobian(x), dtype=float)
            xdot = self.f(x) + np.einsum("...nm,...m->...n", self.g(x), u)
            a = self.jac_f(x)
            a = a + np.einsum("...m,...mij->...ij", u, self.jac_g_cols(x))
            a = a + np.einsum("...nm,...mj->...nj", self.g(x), ju)
            return xdot, a

        return rhs


@dataclass(frozen=True)
class FlowConfig:
    """Sampling grid for finite-horizon flows: N samples over [0, T].

    The sample spacing is T_s = horizon_T / num_samples_N; each sample interval
    is integrated with ``substeps_per_sample`` internal RK4 steps.
    """

    horizon_T: float
    num_samples_N: int
    substeps_per_sample: int = 10
    method: str = "rk4"

    def __post_init__(self):
        if self.horizon_T <= 0:
            raise ValueError("horizon_T must be positive")
        if self.num_samples_N < 1 or self.substeps_per_sample < 1:
            raise ValueError("num_samples_N and substeps_per_sample must be >= 1")
        if self.method != "rk4":
            raise ValueError(f"unsupported integration method {self.method!r}")

    @property
    def sample_dt(self):
        return self.horizon_T / self.num_samples_N


@dataclass
class TrajectoryBundle:
    """Sampled closed-loop flows, one row of samples per backup policy.

    samples[j] has shape (N+1, n) (or (..., N+1, n) for batched initial
    states); samples[j][0] equals the initial state.
    """

    samples: list = field(default_factory=list)
    policy_ids: list = field(default_factory=list)


def rk4_step(rhs, x, h):
    k1 = rhs(x)
    k2 = rhs(x + 0.5 * h * k1)
    k3 = rhs(x + 0.5 * h * k2)
    k4 = rhs(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_finite_sample(x, index):
    if not np.all(np.isfinite(x)):
        raise IntegrationDivergedError(
            f"flow diverged between samples {index - 1} and {index}", index - 1
        )


def flow(sys: SystemModel, policy, x0, cfg: FlowConfig):
    """Integrate the closed loop from x0, returning samples at i*T_s, i=0..N.

    x0 may carry leading batch dimensions; the result has shape
    (..., N+1, n). Raises IntegrationDivergedError on non-finite states.
    """
    x0 = require_finite(x0, "x0")
    rhs = sys.closed_loop(policy)
    h = cfg.sample_dt / cfg.substeps_per_sample
    out = np.empty(x0.shape[:-1] + (cfg.num_samples_N + 1, sys.n))
    x = x0
    out[..., 0, :] = x
    for i in range(1, cfg.num_samples_N + 1):
        for _ in range(cfg.substeps_per_sample):
            x = rk4_step(rhs, x, h)
        _check_finite_sample(x, i)
        out[..., i, :] = x
    return out


def flow_sensitivity_forward(sys: SystemModel, policy, x0, cfg: FlowConfig):
    """Flow plus sensitivity matrices Q_i = d phi(x0, i*T_s) / d x0.

    Integrates the augmented system (x, Q) with Q' = A(x) Q on the same RK4
    grid as the state, so Q is the exact derivative of the discrete flow map.
    Returns (samples, Q) of shapes (..., N+1, n) and (..., N+1, n, n).
    """
    x0 = require_finite(x0, "x0")
    rhs = sys.closed_loop_with_jacobian(policy)
    n = sys.n
    h = cfg.sample_dt / cfg.substeps_per_sample

    def aug_rhs(xq):
        x, q = xq
        xdot, a = rhs(x)
        return _AugPair(xdot, np.einsum("...ij,...jk->...ik", a, q))

    samples = np.empty(x0.shape[:-1] + (cfg.num_samples_N + 1, n))
    qs = np.empty(x0.shape[:-1] + (cfg.num_samples_N + 1, n, n))
    x = x0
    q = np.broadcast_to(np.eye(n), x0.shape[:-1] + (n, n)).copy()
    samples[..., 0, :] = x
    qs[..., 0, :, :] = q
    state = _AugPair(x, q)
    for i in range(1, cfg.num_samples_N + 1):
        for _ in range(cfg.substeps_per_sample):
            state = rk4_step(aug_rhs, state, h)
        _check_finite_sample(state.x, i)
        samples[..., i, :] = state.x
        qs[..., i, :, :] = state.q
    return samples, qs


class _AugPair:
    """(x, Q) pair supporting the arithmetic rk4_step needs."""

    __slots__ = ("x", "q")

    def __init__(self, x, q):
        self.x = x
        self.q = q

    def __iter__(self):
        return iter((self.x, self.q))

    def __add__(self, other):
        return _AugPair(self.x + other.x, self.q + other.q)

    def __radd__(self, other):
        return self.__add__(other)

    def __mul__(self, s):
        return _AugPair(self.x * s, self.q * s)

    __rmul__ = __mul__


def _rk4_step_record(rhs_jac, x, h):
    """One RK4 step recording stage states and stage Jacobians for the reverse pass."""
    k1, a1 = rhs_jac(x)
    x2 = x + 0.5 * h * k1
    k2, a2 = rhs_jac(x2)
    x3 = x + 0.5 * h * k2
    k3, a3 = rhs_jac(x3)
    x4 = x + h * k3
    k4, a4 = rhs_jac(x4)
    x_next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x_next, (a1, a2, a3, a4)

def _rk4_step_reverse(tape, h, abar):
    """Pull a cotangent back through one recorded RK4 step.

    Reverse-mode of x_next = x + h/6 (k1 + 2 k2 + 2 k3 + k4) with
    k1 = F(x), k2 = F(x + h/2 k1), k3 = F(x + h/2 k2), k4 = F(x + h k3).
    """
    a1, a2, a3, a4 = tape
    gx = abar.copy()
    bk1 = (h / 6.0) * abar
    bk2 = (h / 3.0) * abar
    bk3 = (h / 3.0) * abar
    bk4 = (h / 6.0) * abar
    # k4 = F(x + h k3)
    g4 = np.einsum("...ij,...i->...j", a4, bk4)
    gx += g4
    bk3 = bk3 + h * g4
    # k3 = F(x + h/2 k2)
    g3 = np.einsum("...ij,...i->...j", a3, bk3)
    gx += g3
    bk2 = bk2 + 0.5 * h * g3
    # k2 = F(x + h/2 k1)
    g2 = np.einsum("...ij,...i->...j", a2, bk2)
    gx += g2
    bk1 = bk1 + 0.5 * h * g2
    # k1 = F(x)
    gx += np.einsum("...ij,...i->...j", a1, bk1)
    return gx


def flow_sensitivity_adjoint(sys: SystemModel, policy, x0, cfg: FlowConfig, seed_cotangents):
    """Gradient sum_i v_i^T d phi(x0, i*T_s) / d x0 via a backward adjoint pass.

    ``seed_cotangents`` is a list of (sample_index, covector). The backward
    pass walks sample intervals from N down to 0, re-integrating the forward
    states of each interval from its checkpointed sample (rather than storing
    the whole substep history) and injecting cotangents at sample times. The
    reverse pass is the exact discrete adjoint of the RK4 map, so it matches
    flow_sensitivity_forward contractions to machine precision.
    """
    if not seed_cotangents:
        raise ValueError("seed_cotangents must be nonempty")
    for idx, _ in seed_cotangents:
        if not 0 <= idx <= cfg.num_samples_N:
            raise ValueError(f"cotangent index {idx} outside 0..{cfg.num_samples_N}")
    x0 = require_finite(x0, "x0")
    rhs_jac = sys.closed_loop_with_jacobian(policy)
    h = cfg.sample_dt / cfg.substeps_per_sample

    samples = flow(sys, policy, x0, cfg)  # checkpoints at sample times
    inject = {}
    for idx, v in seed_cotangents:
        v = require_finite(v, "cotangent")
        inject[idx] = inject.get(idx, 0.0) + v

    abar = np.zeros_like(x0)
    if cfg.num_samples_N in inject:
        abar = abar + inject[cfg.num_samples_N]
    for i in range(cfg.num_samples_N, 0, -1):
        # Re-integrate interval [i-1, i] recording stage Jacobians.
        x = samples[..., i - 1, :]
        tapes = []
        for _ in range(cfg.substeps_per_sample):
            x, tape = _rk4_step_record(rhs_jac, x, h)
            tapes.append(tape)
        for tape in reversed(tapes):
            abar = _rk4_step_reverse(tape, h, abar)
        if (i - 1) in inject:
            abar = abar + inject[i - 1]
    return abar


def simulate(sys: SystemModel, policy, x0, duration, dt, substeps=1):
    """Closed-loop rollout sampled every dt for `duration` seconds.

    Convenience wrapper over `flow` used by invariance screenings; returns
    (num_steps+1, n) (batched as (..., num_steps+1, n)).
    """
    steps = int(round(duration / dt))
    cfg = FlowConfig(horizon_T=steps * dt, num_samples_N=steps, substeps_per_sample=substeps)
    return flow(sys, policy, x0, cfg)


def make_pendulum():
    """Torque-limited inverted pendulum: x = [angle, rate], f = [rate, sin(angle)].

    The angle is measured from the upright equilibrium; the admissible torque
    is the box [-1.5, 1.5].
    """

    def f(x):
        x = np.asarray(x, dtype=float)
        return np.stack([x[..., 1], np.sin(x[..., 0])], axis=-1)

    def g(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (2, 1))
        out[..., 1, 0] = 1.0
        return out

    def jac_f(x):
        x = np.asarray(x, dtype=float)
        a = np.zeros(x.shape[:-1] + (2, 2))
        a[..., 0, 1] = 1.0
        a[..., 1, 0] = np.cos(x[..., 0])
        return a

    def jac_g_cols(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (1, 2, 2))

    box = Box(np.array([-1.5]), np.array([1.5]))
    return SystemModel(n=2, m=1, f=f, g=g, jac_f=jac_f, jac_g_cols=jac_g_cols, control_box=box)


def make_linear_system(a_matrix, control_box=None):
    """x' = A x with no control effect; handy as an analytic test system."""
    a_matrix = require_finite(a_matrix, "A")
    n = a_matrix.shape[0]
    if control_box is None:
        control_box = Box(-np.ones(1), np.ones(1))

    def f(x):
        return np.einsum("ij,...j->...i", a_matrix, np.asarray(x, dtype=float))

    def g(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (n, control_box.dim))

    def jac_f(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(a_matrix, x.shape[:-1] + (n, n)).copy()

    def jac_g_cols(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (control_box.dim, n, n))

    return SystemModel(n=n, m=control_box.dim, f=f, g=g, jac_f=jac_f,
                       jac_g_cols=jac_g_cols, control_box=control_box)


class ZeroPolicy:
    """u(x) = 0, with a zero input Jacobian."""

    def __init__(self, m, n):
        self.m = m
        self.n = n

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (self.m,))

    def input_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (self.m, self.n))
