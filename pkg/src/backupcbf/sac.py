"""Soft actor-critic on the numpy MLP machinery.

Squashed-Gaussian actor (one network emitting mean and log-std), twin
critics with Polyak-averaged targets, and optional automatic entropy-
temperature tuning toward a target entropy of minus the action dimension.
All gradients are exact reverse-mode through `nets.Mlp`; the reparameterized
actor loss backpropagates through the critic input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backup import MlpPolicy
from .dynamics import Box
from .nets import Adam, Mlp, polyak_update

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class SacConfig:
    hidden: tuple = (24, 24)
    critic_hidden: tuple = (64, 64)
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    lr_alpha: float = 3e-4
    tau: float = 0.005
    discount: float = 0.99
    batch_size: int = 256
    updates_per_call: int = 40
    entropy_coef: float | None = None  # None = auto-tune toward -action_dim
    init_log_alpha: float = 0.0
    # Rewards are scaled by this factor inside the TD target only (buffers
    # keep raw rewards); SAC's effective exploration strength is the ratio of
    # entropy bonus to reward magnitude, so small-scale rewards need this.
    reward_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.lr_actor, self.lr_critic, self.lr_alpha) < 0:
            raise ValueError("learning rates must be nonnegative")
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must be in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


class TrainingDivergedError(RuntimeError):
    """A loss went non-finite; carries the diagnostics dict."""

    def __init__(self, msg, diagnostics):
        super().__init__(msg)
        self.diagnostics = diagnostics


def _squash_log_prob(z, log_std, zeta, half):
    """log pi of a = mid + half*tanh(z), z = mean + std*zeta, summed over action dims.

    Uses log(1 - tanh(z)^2) = 2 (log 2 - z - softplus(-2z)) for stability.
    """
    log_unsquashed = -0.5 * zeta ** 2 - log_std - _HALF_LOG_2PI
    correction = 2.0 * (np.log(2.0) - z - np.logaddexp(0.0, -2.0 * z))
    return np.sum(log_unsquashed - correction - np.log(half), axis=-1)


class SacAgent:
    """One agent: stochastic policy over a control box plus twin Q critics."""

    def __init__(self, n, box: Box, cfg: SacConfig, rng):
        self.n = n
        self.m = box.dim
        self.box = box
        self.cfg = cfg
        self.mid = box.center
        self.half = box.half_width
        self.actor = Mlp([n, *cfg.hidden, 2 * self.m], rng, w_scale=0.5)
        self.q1 = Mlp([n + self.m, *cfg.critic_hidden, 1], rng)
        self.q2 = Mlp([n + self.m, *cfg.critic_hidden, 1], rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.opt_actor = Adam(self.actor.get_flat().size, lr=cfg.lr_actor)
        self.opt_q1 = Adam(self.q1.get_flat().size, lr=cfg.lr_critic)
        self.opt_q2 = Adam(self.q2.get_flat().size, lr=cfg.lr_critic)
        self.log_alpha = float(cfg.init_log_alpha)
        self.alpha_m = 0.0
        self.alpha_v = 0.0
        self.alpha_t = 0
        self.target_entropy = -float(self.m)

    # ---- acting -----------------------------------------------------------
    def _dist(self, x):
        out, cache = self.actor.forward(np.atleast_2d(x))
        mean = out[:, : self.m]
        log_std = np.clip(out[:, self.m:], LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std, out, cache

    def act(self, x, rng=None, deterministic=False):
        """Sample (or take the mean of) the squashed policy; returns (batch, m)."""
        mean, log_std, _, _ = self._dist(x)
        if deterministic or rng is None:
            z = mean
        else:
            z = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        return self.mid + self.half * np.tanh(z)

    @property
    def alpha(self):
        if self.cfg.entropy_coef is not None:
            return self.cfg.entropy_coef
        return float(np.exp(self.log_alpha))

    def deterministic_policy(self):
        """Mean head of the actor as an MlpPolicy (exact same squashed output)."""
        weights = [w.copy() for w in self.actor.weights]
        biases = [b.copy() for b in self.actor.biases]
        weights[-1] = weights[-1][:, : self.m]
        biases[-1] = biases[-1][: self.m]
        return MlpPolicy(weights, biases, self.box)

    def load_policy_weights(self, policy: MlpPolicy):
        """Install mean-head weights from a saved policy (log-std head untouched)."""
        for i in range(len(self.actor.weights) - 1):
            self.actor.weights[i] = policy.weights[i].copy()
            self.actor.biases[i] = policy.biases[i].copy()
        self.actor.weights[-1][:, : self.m] = policy.weights[-1]
        self.actor.biases[-1][: self.m] = policy.biases[-1]

    # ---- losses (pure given the sampled noise; used by updates and tests) --
    def critic_loss_and_grads(self, batch, zeta_next):
        """TD loss for both critics against the entropy-regularized target."""
        x, u, r, xn = batch["x"], batch["u"], batch["r"], batch["x_next"]
        mean_n, log_std_n, _, _ = self._dist(xn)
        z_n = mean_n + np.exp(log_std_n) * zeta_next
        a_n = self.mid + self.half * np.tanh(z_n)
        logp_n = _squash_log_prob(z_n, log_std_n, zeta_next, self.half)
        q1_n = self.q1_target(np.concatenate([xn, a_n], axis=1))[:, 0]
        q2_n = self.q2_target(np.concatenate([xn, a_n], axis=1))[:, 0]
        y = (self.cfg.reward_scale * r
             + self.cfg.discount * (np.minimum(q1_n, q2_n) - self.alpha * logp_n))

        xu = np.concatenate([x, u], axis=1)
        out1, cache1 = self.q1.forward(xu)
        out2, cache2 = self.q2.forward(xu)
        e1 = out1[:, 0] - y
        e2 = out2[:, 0] - y
        batch_n = x.shape[0]
        loss = float(np.mean(e1 ** 2) + np.mean(e2 ** 2))
        gw1, gb1, _ = self.q1.backward(cache1, (2.0 * e1 / batch_n)[:, None])
        gw2, gb2, _ = self.q2.backward(cache2, (2.0 * e2 / batch_n)[:, None])
        return loss, Mlp.flatten_grads(gw1, gb1), Mlp.flatten_grads(gw2, gb2)

    def actor_loss_and_grads(self, batch, zeta):
        """Reparameterized actor loss mean(alpha logpi - min Q); grads w.r.t. actor."""
        x = batch["x"]
        batch_n = x.shape[0]
        mean, log_std, out, cache = self._dist(x)
        std = np.exp(log_std)
        z = mean + std * zeta
        t = np.tanh(z)
        a = self.mid + self.half * t
        logp = _squash_log_prob(z, log_std, zeta, self.half)

        xa = np.concatenate([x, a], axis=1)
        q1_out, q1_cache = self.q1.forward(xa)
        q2_out, q2_cache = self.q2.forward(xa)
        q_min = np.minimum(q1_out[:, 0], q2_out[:, 0])
        loss = float(np.mean(self.alpha * logp - q_min))

        # d loss / d a through the active critic only.
        pick1 = (q1_out[:, 0] <= q2_out[:, 0])[:, None]
        dq = np.full((batch_n, 1), -1.0 / batch_n)
        _, _, dxa1 = self.q1.backward(q1_cache, dq * pick1)
        _, _, dxa2 = self.q2.backward(q2_cache, dq * (~pick1))
        da = (dxa1 + dxa2)[:, self.n:]

        # d loss / d logp and the explicit logp dependence on (z, log_std):
        # logp = sum(-0.5 zeta^2 - log_std - c - 2(log2 - z - softplus(-2z)) - log half)
        dlogp = np.full(batch_n, self.alpha / batch_n)
        sech2 = 1.0 - t ** 2
        # Through a = mid + half tanh(z):
        dz = da * self.half * sech2
        # logp's dependence on z: d logp / d z = 2 tanh(z) (per dim).
        dz += dlogp[:, None] * 2.0 * t
        # Backprop z = mean + std * zeta into heads.
        dmean = dz
        dlog_std = dz * std * zeta
        # logp's explicit log_std term: d/dlog_std = -1 per dim.
        dlog_std += -dlogp[:, None]
        # Clip boundary: clipped log-std entries carry no gradient.
        raw_log_std = out[:, self.m:]
        inside = (raw_log_std > LOG_STD_MIN) & (raw_log_std < LOG_STD_MAX)
        dlog_std = np.where(inside, dlog_std, 0.0)
        dout = np.concatenate([dmean, dlog_std], axis=1)
        gw, gb, _ = self.actor.backward(cache, dout)
        return loss, Mlp.flatten_grads(gw, gb), logp

    def alpha_loss_and_grad(self, logp):
        loss = float(np.mean(-self.log_alpha * (logp + self.target_entropy)))
        grad = float(np.mean(-(logp + self.target_entropy)))
        return loss, grad

    # ---- one full update round ---------------------------------------------
    def update(self, batch, rng):
        zeta_next = rng.standard_normal((batch["x"].shape[0], self.m))
        closs, g1, g2 = self.critic_loss_and_grads(batch, zeta_next)
        self.q1.set_flat(self.opt_q1.step(self.q1.get_flat(), g1))
        self.q2.set_flat(self.opt_q2.step(self.q2.get_flat(), g2))

        zeta = rng.standard_normal((batch["x"].shape[0], self.m))
        aloss, ga, logp = self.actor_loss_and_grads(batch, zeta)
        self.actor.set_flat(self.opt_actor.step(self.actor.get_flat(), ga))

        if self.cfg.entropy_coef is None and self.cfg.lr_alpha > 0:
            _, galpha = self.alpha_loss_and_grad(logp)
            # Adam on the scalar log_alpha.
            self.alpha_t += 1
            self.alpha_m = 0.9 * self.alpha_m + 0.1 * galpha
            self.alpha_v = 0.999 * self.alpha_v + 0.001 * galpha * galpha
            mh = self.alpha_m / (1.0 - 0.9 ** self.alpha_t)
            vh = self.alpha_v / (1.0 - 0.999 ** self.alpha_t)
            self.log_alpha -= self.cfg.lr_alpha * mh / (np.sqrt(vh) + 1e-8)

        polyak_update(self.q1_target, self.q1, self.cfg.tau)
        polyak_update(self.q2_target, self.q2, self.cfg.tau)

        diag = {"critic_loss": closs, "actor_loss": aloss, "alpha": self.alpha,
                "mean_logp": float(np.mean(logp))}
        if not all(np.isfinite(v) for v in diag.values()):
            raise TrainingDivergedError("non-finite SAC loss", diag)
        return diag


def sac_update(buffer, agent: SacAgent, rng, updates=None):
    """Run a round of SAC updates from uniformly sampled buffer batches."""
    updates = agent.cfg.updates_per_call if updates is None else updates
    diag = {}
    for _ in range(updates):
        if len(buffer) < agent.cfg.batch_size:
            break
        batch = buffer.sample(agent.cfg.batch_size, rng)
        diag = agent.update(batch, rng)
    return diag
