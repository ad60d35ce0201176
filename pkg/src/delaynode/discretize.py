"""Finite-dimensional representation of a solution history.

A history grid stacks the current state with M equally spaced past values,
newest first:

    X = [x(t), x(t-h), ..., x(t-Mh)]   (flat, length n*(M+1))

Two sparse-structured operators act on it: a differentiation matrix D that
transports the past blocks, and a delay-dependent interpolation matrix P that
extracts x(t - tau_i) for each delay by linear interpolation between the two
bracketing blocks.  P is piecewise linear in each delay, which is what makes
the delays trainable; dp_dtau supplies its (one-sided at grid crossings)
derivative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ALPHA_SNAP = 1e-9


def build_dm(scheme, n, M, h):
    """Differentiation matrix of shape (n*M, n*(M+1)).

    scheme "forward-euler": row block j is (X_j - X_{j+1})/h.
    scheme "central": interior row blocks are (X_j - X_{j+2})/(2h); the last
    row block falls back to forward Euler because X_{M+2} does not exist.
    """
    if n < 1 or M < 1 or h <= 0:
        raise ValueError("need n >= 1, M >= 1, h > 0")
    if scheme == "central" and M < 2:
        raise ValueError("mesh too coarse")
    eye = np.eye(n)
    D = np.zeros((n * M, n * (M + 1)))
    if scheme == "forward-euler":
        for j in range(M):
            D[j * n : (j + 1) * n, j * n : (j + 1) * n] = eye / h
            D[j * n : (j + 1) * n, (j + 1) * n : (j + 2) * n] = -eye / h
    elif scheme == "central":
        for j in range(M - 1):
            D[j * n : (j + 1) * n, j * n : (j + 1) * n] = eye / (2 * h)
            D[j * n : (j + 1) * n, (j + 2) * n : (j + 3) * n] = -eye / (2 * h)
        j = M - 1
        D[j * n : (j + 1) * n, j * n : (j + 1) * n] = eye / h
        D[j * n : (j + 1) * n, (j + 1) * n : (j + 2) * n] = -eye / h
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return D


def delay_offsets(delays, M, h):
    """Grid decomposition tau_i = (j_i + alpha_i) * h with j integer, alpha in [0, 1].

    Values within 1e-9 grid units of a node snap onto it, and tau = M*h maps
    to (M-1, 1) so the interpolation columns stay in range.
    """
    delays = np.atleast_1d(np.asarray(delays, dtype=float))
    if np.any(delays < -1e-12) or np.any(delays > M * h * (1 + 1e-12)):
        raise ValueError("delay out of range")
    js = np.empty(len(delays), dtype=int)
    alphas = np.empty(len(delays))
    for i, tau in enumerate(delays):
        pos = tau / h
        j = int(np.floor(pos + _ALPHA_SNAP))
        a = pos - j
        if a < _ALPHA_SNAP:
            a = 0.0
        if j >= M:
            j, a = M - 1, 1.0
        js[i] = j
        alphas[i] = a
    return js, alphas


@dataclass(frozen=True)
class InterpMatrix:
    """Assembled interpolation matrix with its grid decomposition."""

    mat: np.ndarray  # (d*n, n*(M+1))
    j: np.ndarray  # (d,) int
    alpha: np.ndarray  # (d,)
    n: int
    M: int
    h: float

    @property
    def d(self):
        return len(self.j)


def build_p(delays, n, M, h) -> InterpMatrix:
    """Interpolation matrix P with P @ X = [x(t-tau_1); ...; x(t-tau_d)].

    Block row i carries weights (1 - alpha_i, alpha_i) on blocks j_i+1 and
    j_i+2 (1-indexed), so it is exact for signals affine in t.
    """
    delays = np.atleast_1d(np.asarray(delays, dtype=float))
    js, alphas = delay_offsets(delays, M, h)
    d = len(delays)
    P = np.zeros((d * n, n * (M + 1)))
    eye = np.eye(n)
    for i, (j, a) in enumerate(zip(js, alphas)):
        P[i * n : (i + 1) * n, j * n : (j + 1) * n] = (1.0 - a) * eye
        if a > 0.0:
            P[i * n : (i + 1) * n, (j + 1) * n : (j + 2) * n] = a * eye
    return InterpMatrix(mat=P, j=js, alpha=alphas, n=n, M=M, h=h)


def dp_dtau(delays, n, M, h):
    """Derivative of build_p with respect to each delay (right-sided at nodes).

    Block row i of the i-th matrix holds -I/h and +I/h on blocks j_i+1 and
    j_i+2; applied to a history grid it approximates -xdot(t - tau_i).
    """
    delays = np.atleast_1d(np.asarray(delays, dtype=float))
    js, _ = delay_offsets(delays, M, h)
    eye = np.eye(n)
    out = []
    for i, j in enumerate(js):
        dP = np.zeros((len(delays) * n, n * (M + 1)))
        dP[i * n : (i + 1) * n, j * n : (j + 1) * n] = -eye / h
        dP[i * n : (i + 1) * n, (j + 1) * n : (j + 2) * n] = eye / h
        out.append(dP)
    return out


def compose_discretized_rhs(g_tilde, dm):
    """Full right-hand side on the history grid: X -> [g_tilde(X); D @ X]."""

    def rhs(X):
        X = np.asarray(X, dtype=float)
        top = np.atleast_1d(np.asarray(g_tilde(X), dtype=float))
        low = dm @ X
        if len(top) + len(low) != len(X):
            raise ValueError("dimension mismatch between g_tilde, D and X")
        return np.concatenate([top, low])

    return rhs


def history_grid_from_window(window):
    """Flatten a chronological sample window (M+1 rows, oldest first) into a
    history grid (newest block first)."""
    window = np.asarray(window, dtype=float)
    if window.ndim == 1:
        window = window[:, None]
    return window[::-1].reshape(-1)


def constant_history_grid(c, n, M):
    c = np.broadcast_to(np.atleast_1d(np.asarray(c, dtype=float)), (n,))
    return np.tile(c, M + 1)


def history_grid_from_function(fn, M, h):
    """Sample x(t) = fn(t) at t = 0, -h, ..., -Mh into a history grid."""
    rows = [np.atleast_1d(np.asarray(fn(-k * h), dtype=float)) for k in range(M + 1)]
    return np.concatenate(rows)


def rk4_fixed(f, x0, n_steps, dt):
    """Fixed-step RK4 for a plain ODE; returns states at every step, x0 first."""
    x = np.asarray(x0, dtype=float).copy()
    out = np.empty((n_steps + 1, len(x)))
    out[0] = x
    for k in range(n_steps):
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k + 1] = x
    return out
