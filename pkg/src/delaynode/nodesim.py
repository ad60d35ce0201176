"""Neural ODE on the history grid: assembly, simulation, and exact gradients.

The right-hand side stacks a network fed with interpolated delayed states on
top of the transport rows:

    dX/dt = [ net(P X) ; D X ]

Integration is fixed-step RK4 with `substeps` sub-intervals per sample step
h.  Every stage input and network activation is recorded on a tape, and the
backward pass differentiates the discrete integrator exactly - including the
delays, which enter through P.  Gradients are therefore gradients of the loss
actually computed, not of a continuous-time idealization.

Batches integrate as rows of a (B, n(M+1)) array; members are independent,
and reductions run in fixed index order, so results do not depend on batch
composition order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import mlp as mlpmod
from .dde import DivergenceError
from .discretize import InterpMatrix, build_dm, build_p, delay_offsets
from .mlp import MlpParameters

BLOWUP_LIMIT = 1.0e6


@dataclass
class NodeSystem:
    """Assembled system: network, delays, and the matrices derived from them.

    `net` is an MlpParameters (trainable) or any object with a
    forward(Z) -> (Y, cache) method (reference nonlinearities).  P must stay
    consistent with the delays; use `with_delays` instead of mutating.
    """

    net: object
    delays: np.ndarray
    n: int
    M: int
    h: float
    interp: InterpMatrix = field(repr=False)
    dm: np.ndarray = field(repr=False)


def make_node_system(net, delays, n, M, h) -> NodeSystem:
    delays = np.atleast_1d(np.asarray(delays, dtype=float)).copy()
    return NodeSystem(
        net=net,
        delays=delays,
        n=n,
        M=M,
        h=h,
        interp=build_p(delays, n, M, h),
        dm=build_dm("central", n, M, h),
    )


def with_delays(sys: NodeSystem, delays) -> NodeSystem:
    delays = np.atleast_1d(np.asarray(delays, dtype=float)).copy()
    return NodeSystem(
        net=sys.net,
        delays=delays,
        n=sys.n,
        M=sys.M,
        h=sys.h,
        interp=build_p(delays, sys.n, sys.M, sys.h),
        dm=sys.dm,
    )


def _net_forward(net, Z):
    if isinstance(net, MlpParameters):
        return mlpmod.forward(net, Z)
    return net.forward(Z)


def node_rhs(sys: NodeSystem, X):
    """Stacked derivative [net(P X); D X] for a single grid X or a batch."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    Xb = X.reshape(1, -1) if single else X
    if Xb.shape[1] != sys.n * (sys.M + 1):
        raise ValueError("dimension mismatch: X length != n*(M+1)")
    out, _ = _rhs_stage(sys, Xb)
    return out[0] if single else out


def _rhs_stage(sys, Xb):
    Z = Xb @ sys.interp.mat.T
    Y, cache = _net_forward(sys.net, Z)
    out = np.empty_like(Xb)
    out[:, : sys.n] = Y
    out[:, sys.n :] = Xb @ sys.dm.T
    return out, (Xb, cache)


@dataclass
class SimTape:
    """Stage record of one simulation, sufficient for the exact reverse pass."""

    N: int
    substeps: int
    dt: float
    single: bool
    stages: list = field(default_factory=list)  # (Xb, cache) per RK4 stage
    pred: np.ndarray = None  # (B, N, n)
    diverged: np.ndarray = None  # (B,) bool


def integrate(sys: NodeSystem, X0, N, substeps=10):
    """Advance the system N sample steps of length h from history grid X0.

    X0 is one grid (n(M+1),) or a batch (B, n(M+1)).  Returns the predicted
    first block at the N sample times plus the tape.  A single trajectory
    whose magnitude crosses the blow-up guard raises DivergenceError (tape
    attached); in a batch the offending members are frozen and flagged in
    tape.diverged so the caller can discard them.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    if N < 0:
        raise ValueError("N must be >= 0")
    X0 = np.asarray(X0, dtype=float)
    single = X0.ndim == 1
    Xb = (X0.reshape(1, -1) if single else X0).copy()
    B, width = Xb.shape
    if width != sys.n * (sys.M + 1):
        raise ValueError("dimension mismatch: X0 length != n*(M+1)")
    dt = sys.h / substeps
    tape = SimTape(N=N, substeps=substeps, dt=dt, single=single)
    tape.pred = np.empty((B, N, sys.n))
    tape.diverged = np.zeros(B, dtype=bool)

    x = Xb
    for j in range(N):
        for _ in range(substeps):
            k1, s1 = _rhs_stage(sys, x)
            u2 = x + (0.5 * dt) * k1
            k2, s2 = _rhs_stage(sys, u2)
            u3 = x + (0.5 * dt) * k2
            k3, s3 = _rhs_stage(sys, u3)
            u4 = x + dt * k3
            k4, s4 = _rhs_stage(sys, u4)
            xn = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            bad = np.max(np.abs(xn), axis=1) > BLOWUP_LIMIT
            if bad.any():
                if single:
                    raise DivergenceError("divergence", tape=tape)
                tape.diverged |= bad
            if tape.diverged.any():
                # freeze diverged members; they are excluded from loss and
                # gradients, the rest of the batch continues untouched
                xn[tape.diverged] = x[tape.diverged]
            tape.stages.extend((s1, s2, s3, s4))
            x = xn
        tape.pred[:, j, :] = x[:, : sys.n]

    pred = tape.pred[0] if single else tape.pred
    return pred, tape


def loss(pred, target):
    """One-norm simulation loss: sum over sample steps of |pred - target|_1."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError("prediction/target length mismatch")
    return float(np.abs(pred - target).sum())


def member_losses(tape: SimTape, target, sentinel=1.0e6):
    """Per-member one-norm losses for a batched tape; diverged members get
    the sentinel value."""
    target = np.asarray(target, dtype=float).reshape(tape.pred.shape)
    out = np.abs(tape.pred - target).sum(axis=(1, 2))
    out[tape.diverged] = sentinel
    return out


def backprop(sys: NodeSystem, tape: SimTape, target):
    """Gradients of the (batch-summed) loss for the run recorded on `tape`.

    Returns a dict with keys W1, b1, W2, b2, W3, tau.  Diverged members
    contribute nothing.  The subgradient of |r| at r = 0 is taken as 0.
    """
    if not isinstance(sys.net, MlpParameters):
        raise TypeError("backprop requires an MLP network")
    n = sys.n
    B = tape.pred.shape[0]
    target = np.asarray(target, dtype=float).reshape(tape.pred.shape)
    sign = np.sign(tape.pred - target)
    if tape.diverged.any():
        sign[tape.diverged] = 0.0

    grads = mlpmod.zero_grads(sys.net)
    gtau = np.zeros(len(sys.delays))
    xbar = np.zeros((B, n * (sys.M + 1)))
    dt = tape.dt

    js, _ = delay_offsets(sys.delays, sys.M, sys.h)
    P = sys.interp.mat
    D = sys.dm

    def pull_back(stage, kbar):
        # cotangent of one rhs evaluation: kbar^T d(rhs)/dX, accumulating
        # parameter and delay gradients on the way
        Xs, cache = stage
        g, gz = mlpmod.backward(sys.net, cache, kbar[:, :n])
        grads.W1 += g.W1
        grads.b1 += g.b1
        grads.W2 += g.W2
        grads.b2 += g.b2
        grads.W3 += g.W3
        for i, j in enumerate(js):
            diff = (Xs[:, (j + 1) * n : (j + 2) * n] - Xs[:, j * n : (j + 1) * n]) / sys.h
            gtau[i] += float(np.sum(gz[:, i * n : (i + 1) * n] * diff))
        return gz @ P + kbar[:, n:] @ D

    pos = len(tape.stages)
    for j in range(tape.N - 1, -1, -1):
        xbar[:, :n] += sign[:, j, :]
        for _ in range(tape.substeps):
            s1, s2, s3, s4 = tape.stages[pos - 4 : pos]
            pos -= 4
            kb1 = (dt / 6.0) * xbar
            kb2 = (dt / 3.0) * xbar
            kb3 = (dt / 3.0) * xbar
            kb4 = (dt / 6.0) * xbar
            ub4 = pull_back(s4, kb4)
            kb3 += dt * ub4
            ub3 = pull_back(s3, kb3)
            kb2 += (0.5 * dt) * ub3
            ub2 = pull_back(s2, kb2)
            kb1 += (0.5 * dt) * ub2
            ub1 = pull_back(s1, kb1)
            xbar = xbar + ub1 + ub2 + ub3 + ub4

    out = grads.as_dict()
    out["tau"] = gtau
    return out


# ---------------------------------------------------------------------------
# checkpoint format: plain text, 17 significant digits, bitwise round-trip

_MODEL_VERSION = 1


def save_model(path, sys: NodeSystem):
    if not isinstance(sys.net, MlpParameters):
        raise TypeError("only MLP-backed systems can be checkpointed")
    p = sys.net
    with open(path, "w") as f:
        f.write(f"version {_MODEL_VERSION}\n")
        f.write(f"n {sys.n}\n")
        f.write(f"d {len(sys.delays)}\n")
        f.write(f"M {sys.M}\n")
        f.write(f"h {sys.h:.17g}\n")
        f.write(f"tau_max {sys.M * sys.h:.17g}\n")
        f.write("delays " + " ".join(f"{t:.17g}" for t in sys.delays) + "\n")
        f.write("dims " + " ".join(str(v) for v in p.dims) + "\n")
        for name in ("W1", "b1", "W2", "b2", "W3"):
            arr = getattr(p, name)
            f.write(f"{name}\n")
            for row in np.atleast_2d(arr):
                f.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_model(path) -> NodeSystem:
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f]
    it = iter(lines)

    def kv(expect):
        key, _, val = next(it).partition(" ")
        if key != expect:
            raise ValueError(f"bad checkpoint: expected {expect}, got {key}")
        return val

    version = int(kv("version"))
    if version != _MODEL_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    n = int(kv("n"))
    d = int(kv("d"))
    M = int(kv("M"))
    h = float(kv("h"))
    float(kv("tau_max"))  # recomputable; kept in the file for readability
    delays = np.array([float(v) for v in kv("delays").split()])
    dims = tuple(int(v) for v in kv("dims").split())
    if len(delays) != d or dims[0] != d * n or dims[3] != n:
        raise ValueError("bad checkpoint: inconsistent dimensions")

    def block(name, rows, cols):
        if next(it) != name:
            raise ValueError(f"bad checkpoint: missing block {name}")
        arr = np.array([[float(v) for v in next(it).split()] for _ in range(rows)])
        if arr.shape != (rows, cols):
            raise ValueError(f"bad checkpoint: block {name} shape")
        return arr

    _, h1, h2, _ = dims
    params = MlpParameters(
        W1=block("W1", h1, dims[0]),
        b1=block("b1", 1, h1)[0],
        W2=block("W2", h2, h1),
        b2=block("b2", 1, h2)[0],
        W3=block("W3", n, h2),
    )
    return make_node_system(params, delays, n, M, h)
