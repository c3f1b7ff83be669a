"""Backup sets and policies, the blended neural backup policy, and its softmax set.

A backup suite bundles ell designed (set, policy) pairs with an optional
neural policy. The neural backup control follows the designed policy inside
its backup set, hands over to the raw network far away, and blends the two
through a C^1 homotopy in a nu-thick boundary layer, so trajectories that
start inside a backup set can never be dragged out by an untrained network.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .dynamics import Box, require_finite


class BackupOverlapError(RuntimeError):
    """Two designed backup sets are active at the same state (configuration bug)."""


def smoothstep(t):
    """C^1 ramp: 0 for t <= 0, 1 for t >= 1, 3t^2 - 2t^3 between."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def smoothstep_deriv(t):
    inside = (t > 0.0) & (t < 1.0)
    t = np.clip(t, 0.0, 1.0)
    return np.where(inside, 6.0 * t * (1.0 - t), 0.0)


@dataclass(frozen=True)
class HomotopyXi:
    """Blending profile xi: 0 below -nu, 1 above 0, strictly increasing between."""

    nu: float

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("nu must be positive")

    def __call__(self, a):
        return smoothstep((np.asarray(a, dtype=float) + self.nu) / self.nu)

    def deriv(self, a):
        return smoothstep_deriv((np.asarray(a, dtype=float) + self.nu) / self.nu) / self.nu


class QuadraticBackupSet:
    """h_b(x) = level - (x - center)^T P (x - center), P symmetric positive definite."""

    def __init__(self, center, p_matrix, level=0.02):
        self.center = require_finite(center, "center")
        p = require_finite(p_matrix, "P")
        if not np.allclose(p, p.T):
            raise ValueError("P must be symmetric")
        if np.any(np.linalg.eigvalsh(p) <= 0):
            raise ValueError("P must be positive definite")
        self.p_matrix = p
        self.level = float(level)

    def h_b(self, x):
        d = np.asarray(x, dtype=float) - self.center
        return self.level - np.einsum("...i,ij,...j->...", d, self.p_matrix, d)

    def grad_h_b(self, x):
        d = np.asarray(x, dtype=float) - self.center
        return -2.0 * np.einsum("ij,...j->...i", self.p_matrix, d)

    __call__ = h_b


class SaturatedLinearPolicy:
    """u(x) = mid + half * tanh(K (x - center) / half); output strictly inside the box."""

    def __init__(self, gain, center, box: Box):
        self.gain = np.atleast_2d(require_finite(gain, "gain"))
        self.center = require_finite(center, "center")
        self.box = box
        self._mid = box.center
        self._half = box.half_width
        if np.any(self._half <= 0):
            raise ValueError("control box must have positive width for saturation")

    def __call__(self, x):
        d = np.asarray(x, dtype=float) - self.center
        z = np.einsum("mj,...j->...m", self.gain, d) / self._half
        return self._mid + self._half * np.tanh(z)

    def input_jacobian(self, x):
        d = np.asarray(x, dtype=float) - self.center
        z = np.einsum("mj,...j->...m", self.gain, d) / self._half
        sech2 = 1.0 - np.tanh(z) ** 2
        return sech2[..., :, None] * self.gain


class MlpPolicy:
    """Deterministic MLP policy with tanh hidden layers and box-squashed output.

    u(x) = mid + half * tanh(W_L a + b_L); everything is plain numpy and
    vectorized over leading batch dimensions. ``input_jacobian`` is the exact
    chain-rule Jacobian, required by the sensitivity ODEs.
    """

    ACTIVATION = "tanh"

    def __init__(self, weights, biases, box: Box):
        self.weights = [require_finite(w, "W") for w in weights]
        self.biases = [require_finite(b, "b") for b in biases]
        self.box = box
        self._mid = box.center
        self._half = box.half_width
        self.n_in = self.weights[0].shape[0]
        self.m_out = self.weights[-1].shape[1]
        if self.m_out != box.dim:
            raise ValueError("output width must match the control box dimension")

    @classmethod
    def random(cls, n_in, hidden, box: Box, rng, scale=1.0):
        widths = [n_in, *hidden, box.dim]
        weights, biases = [], []
        for a, b in zip(widths[:-1], widths[1:]):
            weights.append(rng.normal(0.0, scale / np.sqrt(a), size=(a, b)))
            biases.append(np.zeros(b))
        return cls(weights, biases, box)

    def _forward(self, x):
        a = np.asarray(x, dtype=float)
        pre = []
        acts = [a]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = a @ w + b
            pre.append(z)
            a = np.tanh(z)
            acts.append(a)
        z_out = a @ self.weights[-1] + self.biases[-1]
        return pre, acts, z_out

    def __call__(self, x):
        _, _, z_out = self._forward(x)
        return self._mid + self._half * np.tanh(z_out)

    def input_jacobian(self, x):
        pre, _, z_out = self._forward(x)
        # Backward accumulate J = d u / d x, shape (..., m, n).
        j = self._half[:, None] * (1.0 - np.tanh(z_out) ** 2)[..., :, None] \
            * self.weights[-1].T
        for w, z in zip(reversed(self.weights[:-1]), reversed(pre)):
            sech2 = (1.0 - np.tanh(z) ** 2)[..., None, :]
            j = np.einsum("...mh,hj->...mj", j * sech2, w.T)
        return j

    def flat_parameters(self):
        return np.concatenate([p.ravel() for pair in zip(self.weights, self.biases)
                               for p in pair])

    def with_parameters(self, flat):
        """New policy with the same shapes and the given flat parameter vector."""
        flat = np.asarray(flat, dtype=float)
        weights, biases, k = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(flat[k:k + w.size].reshape(w.shape)); k += w.size
            biases.append(flat[k:k + b.size].reshape(b.shape)); k += b.size
        if k != flat.size:
            raise ValueError("flat parameter vector has the wrong length")
        return MlpPolicy(weights, biases, self.box)


_WEIGHTS_MAGIC = b"MLPW"


def save_mlp_policy(path, policy: MlpPolicy):
    """Binary weight file: uint32-length JSON header, then flat float64 LE params.

    Header records layer shapes, the activation id, and the output box so a
    file round-trips to an identical policy.
    """
    header = {
        "layer_shapes": [list(w.shape) for w in policy.weights],
        "activation": policy.ACTIVATION,
        "box_lower": policy.box.lower.tolist(),
        "box_upper": policy.box.upper.tolist(),
    }
    blob = json.dumps(header).encode("utf-8")
    flat = policy.flat_parameters().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(flat.tobytes())


def load_mlp_policy(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _WEIGHTS_MAGIC:
            raise ValueError(f"not a policy weight file: {path}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        flat = np.frombuffer(fh.read(), dtype="<f8")
    if header["activation"] != MlpPolicy.ACTIVATION:
        raise ValueError(f"unsupported activation {header['activation']!r}")
    box = Box(np.array(header["box_lower"]), np.array(header["box_upper"]))
    weights, biases, k = [], [], 0
    for shape in header["layer_shapes"]:
        a, b = shape
        weights.append(flat[k:k + a * b].reshape(a, b).copy()); k += a * b
        biases.append(flat[k:k + b].copy()); k += b
    return MlpPolicy(weights, biases, box)


@dataclass
class BackupSuite:
    """ell designed (backup set, backup policy) pairs plus an optional neural policy.

    ``neural`` may be None (designed-only shielding). rho1 sets the sharpness
    of the softmax backup set attached to the neural policy.
    """

    designed: list
    neural: MlpPolicy | None
    xi: HomotopyXi
    rho1: float = 100.0

    @property
    def n_designed(self):
        return len(self.designed)

    @property
    def n_policies(self):
        return self.n_designed + (1 if self.neural is not None else 0)

    def replace_neural(self, policy: MlpPolicy):
        """Whole-parameter snapshot swap; evaluation stays pure per snapshot."""
        return BackupSuite(self.designed, policy, self.xi, self.rho1)

    def designed_h_values(self, x):
        """Stack of h_bj(x), shape (..., ell)."""
        return np.stack([s.h_b(x) for s, _ in self.designed], axis=-1)


def active_backup_index(suite: BackupSuite, x):
    """Unique designed index j with h_bj(x) >= -nu, or None.

    Raises BackupOverlapError when two designed sets are simultaneously
    active, which violates the disjointness the blended policy relies on.
    Scalar states only; the batched evaluation lives in neural_backup_control.
    """
    h = suite.designed_h_values(x)
    active = np.nonzero(h >= -suite.xi.nu)[0]
    if active.size > 1:
        raise BackupOverlapError(
            f"backup sets {active.tolist()} are all active at {np.asarray(x).tolist()}"
        )
    return int(active[0]) if active.size == 1 else None


def _active_masks(suite, x):
    h = suite.designed_h_values(x)  # (..., ell)
    active = h >= -suite.xi.nu
    counts = active.sum(axis=-1)
    if np.any(counts > 1):
        bad = np.argwhere(counts > 1)
        raise BackupOverlapError(f"overlapping backup sets at batch indices {bad[:5].tolist()}")
    idx = np.argmax(active, axis=-1)
    has = counts == 1
    h_active = np.take_along_axis(h, idx[..., None], axis=-1)[..., 0]
    return has, idx, h_active


def neural_backup_control(suite: BackupSuite, x):
    """Blended neural backup control.

    Inside the active backup set: the designed backup control. In the
    nu-layer below it: xi-weighted blend of designed and network outputs.
    Elsewhere: the raw network. Always inside the control box.
    """
    if suite.neural is None:
        raise ValueError("suite has no neural policy")
    x = np.asarray(x, dtype=float)
    has, idx, h_active = _active_masks(suite, x)
    u_net = suite.neural(x)
    u_des = np.stack([pol(x) for _, pol in suite.designed], axis=-2)  # (..., ell, m)
    u_act = np.take_along_axis(u_des, idx[..., None, None], axis=-2)[..., 0, :]
    w = suite.xi(h_active)[..., None]
    blended = w * u_act + (1.0 - w) * u_net
    use_designed = (has & (h_active >= 0.0))[..., None]
    in_layer = (has & (h_active < 0.0))[..., None]
    return np.where(use_designed, u_act, np.where(in_layer, blended, u_net))


def neural_backup_jacobian(suite: BackupSuite, x):
    """Exact input Jacobian of neural_backup_control, (..., m, n).

    In the blend layer the product rule contributes
    (u_des - u_net) xi'(h_b) grad h_b^T on top of the blended Jacobians.
    """
    if suite.neural is None:
        raise ValueError("suite has no neural policy")
    x = np.asarray(x, dtype=float)
    has, idx, h_active = _active_masks(suite, x)
    j_net = suite.neural.input_jacobian(x)
    j_des = np.stack([pol.input_jacobian(x) for _, pol in suite.designed], axis=-3)
    j_act = np.take_along_axis(j_des, idx[..., None, None, None], axis=-3)[..., 0, :, :]
    u_net = suite.neural(x)
    u_des = np.stack([pol(x) for _, pol in suite.designed], axis=-2)
    u_act = np.take_along_axis(u_des, idx[..., None, None], axis=-2)[..., 0, :]
    g_des = np.stack([s.grad_h_b(x) for s, _ in suite.designed], axis=-2)
    g_act = np.take_along_axis(g_des, idx[..., None, None], axis=-2)[..., 0, :]

    w = suite.xi(h_active)[..., None, None]
    dw = suite.xi.deriv(h_active)[..., None, None]
    j_blend = (w * j_act + (1.0 - w) * j_net
               + dw * (u_act - u_net)[..., :, None] * g_act[..., None, :])
    use_designed = (has & (h_active >= 0.0))[..., None, None]
    in_layer = (has & (h_active < 0.0))[..., None, None]
    return np.where(use_designed, j_act, np.where(in_layer, j_blend, j_net))


class NeuralBackupPolicy:
    """Policy adapter exposing the blended control to the flow integrators."""

    def __init__(self, suite: BackupSuite):
        self.suite = suite

    def __call__(self, x):
        return neural_backup_control(self.suite, x)

    def input_jacobian(self, x):
        return neural_backup_jacobian(self.suite, x)


def neural_backup_set_value(suite: BackupSuite, x):
    """Softmax backup set value attached to the neural policy.

    softmax_rho1 over the designed h_bj; its zero-superlevel set inner
    approximates the union of the designed backup sets.
    """
    from .barrier import softmax_rho  # local import to avoid a cycle

    return softmax_rho(suite.rho1, suite.designed_h_values(x), axis=-1)


def neural_backup_set_grad(suite: BackupSuite, x):
    from .barrier import softmax_weights

    h = suite.designed_h_values(x)
    w = softmax_weights(suite.rho1, h, axis=-1)
    g = np.stack([s.grad_h_b(x) for s, _ in suite.designed], axis=-2)
    return np.einsum("...j,...ji->...i", w, g)


def backup_policy(suite: BackupSuite, j):
    """Policy for barrier index j: designed for j < ell, blended neural for j = ell."""
    if j < suite.n_designed:
        return suite.designed[j][1]
    if suite.neural is None or j != suite.n_designed:
        raise IndexError(f"no backup policy with index {j}")
    return NeuralBackupPolicy(suite)


def terminal_set_value(suite: BackupSuite, j, x):
    """Terminal membership value for index j: h_bj, or the softmax set for the neural index."""
    if j < suite.n_designed:
        return suite.designed[j][0].h_b(x)
    if suite.neural is None or j != suite.n_designed:
        raise IndexError(f"no backup set with index {j}")
    return neural_backup_set_value(suite, x)


def terminal_set_grad(suite: BackupSuite, j, x):
    if j < suite.n_designed:
        return suite.designed[j][0].grad_h_b(x)
    return neural_backup_set_grad(suite, x)


# Pendulum benchmark constants: two quadratic backup sets at the upright and
# quarter-turn equilibria with saturated linear policies sharing one gain row.
PENDULUM_P1 = np.array([[0.625, 0.125], [0.125, 0.125]])
PENDULUM_P2 = np.array([[0.650, 0.150], [0.150, 0.240]])
PENDULUM_CENTERS = (np.array([0.0, 0.0]), np.array([np.pi / 2.0, 0.0]))
PENDULUM_LEVEL = 0.02
DEFAULT_PENDULUM_GAIN = np.array([[-13.0, -25.0]])
DEFAULT_NU = 0.005


def make_pendulum_suite(gain_K=None, nu=DEFAULT_NU, neural=None, rho1=100.0,
                        control_box=None):
    """Two-backup pendulum suite with saturated linear policies.

    The gain must stabilize both backup sets; `screen_backup_invariance`
    checks that by simulation, and suite construction with a bad gain is a
    configuration error caught there.
    """
    from .dynamics import make_pendulum

    if control_box is None:
        control_box = make_pendulum().control_box
    gain = DEFAULT_PENDULUM_GAIN if gain_K is None else np.atleast_2d(gain_K)
    designed = []
    for center, p in zip(PENDULUM_CENTERS, (PENDULUM_P1, PENDULUM_P2)):
        designed.append((QuadraticBackupSet(center, p, PENDULUM_LEVEL),
                         SaturatedLinearPolicy(gain, center, control_box)))
    return BackupSuite(designed=designed, neural=neural, xi=HomotopyXi(nu), rho1=rho1)


def screen_backup_invariance(sys, suite, rng, n_rollouts=1000, duration=10.0,
                             dt=0.01, tol=1e-3):
    """Simulation screening of backup-set invariance.

    Draws states inside each designed backup set, rolls the closed loop under
    that set's policy, and returns the worst h_bj dip. Values below -tol mean
    the configuration violates the invariance the shield depends on.
    """
    from .dynamics import simulate

    worst = np.inf
    for bset, pol in suite.designed:
        x0 = _sample_in_set(bset, rng, n_rollouts)
        traj = simulate(sys, pol, x0, duration, dt)
        worst = min(worst, float(np.min(bset.h_b(traj))))
    return worst


def _sample_in_set(bset: QuadraticBackupSet, rng, count):
    """Uniform rejection samples from a quadratic backup set."""
    evals, evecs = np.linalg.eigh(bset.p_matrix)
    radii = np.sqrt(bset.level / evals)
    out = np.empty((count, bset.center.size))
    k = 0
    while k < count:
        cand = rng.uniform(-1.0, 1.0, size=(2 * (count - k), bset.center.size))
        cand = bset.center + (cand * radii) @ evecs.T
        ok = bset.h_b(cand) >= 0.0
        take = cand[ok][: count - k]
        out[k:k + take.shape[0]] = take
        k += take.shape[0]
    return out
