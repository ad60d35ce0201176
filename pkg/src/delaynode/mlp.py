"""Two-hidden-layer tanh network with hand-written reverse-mode derivatives.

y = W3 tanh(W2 tanh(W1 z + b1) + b2), no output bias, identity output layer.
Forward caches the post-activations (enough to run the exact backward pass,
since d tanh = 1 - tanh^2); backward returns gradients for every parameter
block and for the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MlpParameters:
    W1: np.ndarray  # (H1, n_in)
    b1: np.ndarray  # (H1,)
    W2: np.ndarray  # (H2, H1)
    b2: np.ndarray  # (H2,)
    W3: np.ndarray  # (n_out, H2)

    @property
    def dims(self):
        return (self.W1.shape[1], self.W1.shape[0], self.W2.shape[0], self.W3.shape[0])

    @property
    def n_in(self):
        return self.W1.shape[1]

    @property
    def n_out(self):
        return self.W3.shape[0]

    def as_dict(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2, "W3": self.W3}

    def __eq__(self, other):
        if not isinstance(other, MlpParameters):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in _FIELDS)


_FIELDS = ("W1", "b1", "W2", "b2", "W3")


def params_from_dict(d) -> MlpParameters:
    return MlpParameters(W1=d["W1"], b1=d["b1"], W2=d["W2"], b2=d["b2"], W3=d["W3"])


@dataclass
class ForwardCache:
    """Saved forward activations: input and the two hidden tanh outputs."""

    z: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    single: bool


@dataclass
class MlpGrads:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray

    def as_dict(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2, "W3": self.W3}


def zero_grads(p: MlpParameters) -> MlpGrads:
    return MlpGrads(*(np.zeros_like(getattr(p, f)) for f in _FIELDS))


def init_glorot(seed, dims) -> MlpParameters:
    """Glorot-uniform weights on [-L, L], L = sqrt(6/(fan_in+fan_out)); zero biases.

    dims = (n_in, H1, H2, n_out).  Deterministic in the seed.
    """
    n_in, h1, h2, n_out = dims
    rng = np.random.default_rng(seed)

    def w(rows, cols):
        limit = np.sqrt(6.0 / (rows + cols))
        return rng.uniform(-limit, limit, size=(rows, cols))

    return MlpParameters(
        W1=w(h1, n_in),
        b1=np.zeros(h1),
        W2=w(h2, h1),
        b2=np.zeros(h2),
        W3=w(n_out, h2),
    )


def forward(p: MlpParameters, z):
    """Evaluate the network; z is (n_in,) or a batch (B, n_in)."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite input")
    single = z.ndim == 1
    zb = z.reshape(1, -1) if single else z
    a1 = np.tanh(zb @ p.W1.T + p.b1)
    a2 = np.tanh(a1 @ p.W2.T + p.b2)
    y = a2 @ p.W3.T
    cache = ForwardCache(z=zb, a1=a1, a2=a2, single=single)
    return (y[0] if single else y), cache


def backward(p: MlpParameters, cache: ForwardCache, g_out):
    """Reverse-mode derivatives for the forward call that produced `cache`.

    g_out is the cotangent of the output, same leading shape as the output.
    Returns (MlpGrads, input gradient).
    """
    gy = np.asarray(g_out, dtype=float)
    if cache.single:
        gy = gy.reshape(1, -1)
    ga2 = gy @ p.W3
    d2 = ga2 * (1.0 - cache.a2**2)
    ga1 = d2 @ p.W2
    d1 = ga1 * (1.0 - cache.a1**2)
    gz = d1 @ p.W1
    grads = MlpGrads(
        W1=d1.T @ cache.z,
        b1=d1.sum(axis=0),
        W2=d2.T @ cache.a1,
        b2=d2.sum(axis=0),
        W3=gy.T @ cache.a2,
    )
    return grads, (gz[0] if cache.single else gz)
