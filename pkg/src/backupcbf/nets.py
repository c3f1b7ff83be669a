"""Minimal reverse-mode MLP machinery for the actor-critic updates.

Plain numpy, tanh hidden layers, linear output head. Forward passes return a
cache; backward passes turn an output cotangent into parameter gradients and
an input cotangent. Training code owns the composition (losses, reparam
sampling); this module only does exact layer-by-layer differentiation.
"""

from __future__ import annotations

import numpy as np


class Mlp:
    """Tanh MLP with a linear output layer."""

    def __init__(self, widths, rng=None, w_scale=1.0):
        """widths = [in, hidden..., out]; weights are fan-in-scaled Gaussians."""
        self.widths = list(widths)
        self.weights = []
        self.biases = []
        rng = rng or np.random.default_rng(0)
        for a, b in zip(widths[:-1], widths[1:]):
            self.weights.append(rng.normal(0.0, w_scale / np.sqrt(a), size=(a, b)))
            self.biases.append(np.zeros(b))

    def forward(self, x):
        """Returns (out, cache); x is (batch, in)."""
        acts = [np.asarray(x, dtype=float)]
        pres = []
        a = acts[0]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = a @ w + b
            pres.append(z)
            a = np.tanh(z)
            acts.append(a)
        out = a @ self.weights[-1] + self.biases[-1]
        return out, (acts, pres)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, dout):
        """Accumulates parameter grads and the input cotangent from d loss / d out."""
        acts, pres = cache
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        d = np.asarray(dout, dtype=float)
        grads_w[-1] = acts[-1].T @ d
        grads_b[-1] = d.sum(axis=0)
        d = d @ self.weights[-1].T
        for k in range(len(self.weights) - 2, -1, -1):
            d = d * (1.0 - np.tanh(pres[k]) ** 2)
            grads_w[k] = acts[k].T @ d
            grads_b[k] = d.sum(axis=0)
            d = d @ self.weights[k].T
        return grads_w, grads_b, d

    # Flat-parameter helpers (used by optimizers and finite-difference probes)
    def get_flat(self):
        return np.concatenate([p.ravel() for pair in zip(self.weights, self.biases)
                               for p in pair])

    def set_flat(self, flat):
        k = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = flat[k:k + w.size].reshape(w.shape).copy(); k += w.size
            self.biases[i] = flat[k:k + b.size].reshape(b.shape).copy(); k += b.size
        if k != np.size(flat):
            raise ValueError("flat vector length mismatch")

    @staticmethod
    def flatten_grads(grads_w, grads_b):
        return np.concatenate([g.ravel() for pair in zip(grads_w, grads_b)
                               for g in pair])

    def copy(self):
        other = Mlp.__new__(Mlp)
        other.widths = list(self.widths)
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other


class Adam:
    """Adam on a flat parameter vector."""

    def __init__(self, size, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads * grads
        mh = self.m / (1.0 - self.beta1 ** self.t)
        vh = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * mh / (np.sqrt(vh) + self.eps)


def polyak_update(target: Mlp, source: Mlp, tau):
    for i in range(len(target.weights)):
        target.weights[i] += tau * (source.weights[i] - target.weights[i])
        target.biases[i] += tau * (source.biases[i] - target.biases[i])
