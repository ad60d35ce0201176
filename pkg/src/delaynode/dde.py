"""Ground-truth delay differential equation integration and data generation.

The integrator advances a DDE with constant delays by the method of steps:
classical fixed-step RK4 in time, with delayed states read from the dense
output through cubic Hermite interpolation (node values plus stored
derivatives, locally 4th order).  Fixed stepping keeps runs bit-reproducible.

The Mackey-Glass system lives here too, together with the trajectory
sampler that turns simulations into a train/test dataset.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy.interpolate import CubicSpline

BLOWUP_LIMIT = 1.0e6

# RK4 stage offsets as fractions of the step (k1 handled via the stored
# node derivative, so only stages 2..4 need delayed lookups).
_STAGE_FRACTIONS = (0.5, 0.5, 1.0)


class DivergenceError(RuntimeError):
    """State magnitude crossed the blow-up guard during integration."""

    def __init__(self, message="divergence", tape=None):
        super().__init__(message)
        self.tape = tape


@dataclass(frozen=True)
class MgParams:
    """Mackey-Glass parameters: dx/dt = beta*x(t-tau)/(1+x(t-tau)^delta) - gamma*x."""

    beta: float = 4.0
    gamma: float = 2.0
    delta: float = 9.65
    tau: float = 1.0

    def __post_init__(self):
        if self.beta <= 0 or self.gamma <= 0 or self.delta <= 0 or self.tau < 0:
            raise ValueError("MgParams requires beta, gamma, delta > 0 and tau >= 0")


def mg_rhs(x, x_delayed, p: MgParams):
    """Mackey-Glass right-hand side; accepts scalars or arrays elementwise."""
    x = np.asarray(x, dtype=float)
    x_delayed = np.asarray(x_delayed, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(x_delayed))):
        raise ValueError("non-finite state")
    return p.beta * x_delayed / (1.0 + x_delayed**p.delta) - p.gamma * x


def _mg_delayed(x, xdel, p):
    return mg_rhs(x, xdel[0], p)


def make_mg_delayed_rhs(p: MgParams):
    """Adapter to the generic solver signature rhs(x, xdel) with xdel[i] = x(t - tau_i)."""
    return partial(_mg_delayed, p=p)


class MackeyGlassNet:
    """Exact Mackey-Glass nonlinearity wearing the network interface.

    forward(Z) with Z = [x(t), x(t-tau)] per row returns the true derivative.
    Used as the reference right-hand side wherever a learned network would
    otherwise sit; it has no trainable parameters.
    """

    def __init__(self, p: MgParams):
        self.p = p
        self.n_in = 2
        self.n_out = 1

    def forward(self, z):
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        zb = z.reshape(1, -1) if single else z
        y = mg_rhs(zb[:, :1], zb[:, 1:2], self.p)
        return (y[0] if single else y), None


class HistorySpec:
    """Initial data of a DDE on [-tau_max, 0].

    Either a constant function or cubic-spline interpolation through equally
    spaced samples (oldest first, newest at t = 0).
    """

    def __init__(self, kind, tau_max, n, constant=None, spline=None):
        self.kind = kind
        self.tau_max = float(tau_max)
        self.n = n
        self._constant = constant
        self._spline = spline

    @classmethod
    def constant(cls, c, tau_max, n=None):
        c = np.atleast_1d(np.asarray(c, dtype=float))
        return cls("constant", tau_max, len(c) if n is None else n, constant=c)

    @classmethod
    def from_samples(cls, values, tau_max):
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if len(values) < 2:
            raise ValueError("sample history needs at least two points")
        ts = np.linspace(-tau_max, 0.0, len(values))
        spline = CubicSpline(ts, values, axis=0)
        return cls("samples", tau_max, values.shape[1], spline=spline)

    def value(self, t):
        if self.kind == "constant":
            return self._constant
        return self._spline(t)

    def slope(self, t):
        if self.kind == "constant":
            return np.zeros(self.n)
        return self._spline(t, 1)


@dataclass
class DenseTrajectory:
    """Solution on a uniform grid with stored derivatives for Hermite evaluation.

    Covers [t0, t_end_grid] where t0 = -tau_max; queries at t <= 0 are answered
    by the history function itself so the initial data stays exact.
    """

    t0: float
    dt: float
    nodes: np.ndarray  # (K, n)
    derivs: np.ndarray  # (K, n)
    history: HistorySpec
    n: int = field(init=False)

    def __post_init__(self):
        self.n = self.nodes.shape[1]

    @property
    def t_end(self):
        return self.t0 + (len(self.nodes) - 1) * self.dt

    def times(self):
        return self.t0 + self.dt * np.arange(len(self.nodes))

    def eval(self, t):
        """Cubic Hermite value at time t (exact at grid nodes)."""
        if t <= 0.0:
            return np.array(self.history.value(t), dtype=float)
        pos = (t - self.t0) / self.dt
        k = int(math.floor(pos + 1e-9))
        theta = pos - k
        if theta < 1e-9:
            return self.nodes[k].copy()
        if k + 1 >= len(self.nodes):
            raise ValueError(f"time {t} beyond dense output")
        return _hermite(
            theta, self.dt, self.nodes[k], self.nodes[k + 1], self.derivs[k], self.derivs[k + 1]
        )

    def sample(self, ts):
        return np.stack([self.eval(t) for t in np.asarray(ts, dtype=float)])

    def node_index(self, t):
        pos = (t - self.t0) / self.dt
        k = round(pos)
        if abs(pos - k) > 1e-6:
            raise ValueError(f"time {t} is not on the dense grid")
        return int(k)


def _hermite(theta, dt, y0, y1, m0, m1):
    t2 = theta * theta
    t3 = t2 * theta
    w00 = 2 * t3 - 3 * t2 + 1
    w10 = t3 - 2 * t2 + theta
    w01 = -2 * t3 + 3 * t2
    w11 = t3 - t2
    return w00 * y0 + w01 * y1 + dt * (w10 * m0 + w11 * m1)


def _hermite_weights(theta):
    t2 = theta * theta
    t3 = t2 * theta
    return 2 * t3 - 3 * t2 + 1, t3 - 2 * t2 + theta, -2 * t3 + 3 * t2, t3 - t2


def simulate_dde(rhs, history: HistorySpec, delays, t_end, dt) -> DenseTrajectory:
    """Integrate dx/dt = rhs(x, xdel) by the method of steps.

    rhs receives the current state x (n,) and xdel of shape (d, n) holding
    x(t - tau_i) for each delay.  A zero delay feeds the current stage state
    back, so rhs may mix instantaneous and delayed arguments freely.

    Requires dt <= min positive delay (delayed lookups then never reach into
    the interval currently being integrated) and dt dividing tau_max.
    """
    delays = np.atleast_1d(np.asarray(delays, dtype=float))
    tau_max = history.tau_max
    if np.any(delays < 0) or np.any(delays > tau_max * (1 + 1e-12)):
        raise ValueError("delay out of range")
    positive = delays[delays > 0]
    if positive.size and dt > positive.min() * (1 + 1e-12):
        raise ValueError("step exceeds delay")
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    n_hist = int(round(tau_max / dt)) if tau_max > 0 else 0
    if abs(n_hist * dt - tau_max) > 1e-9 * max(1.0, tau_max):
        raise ValueError("dt must divide the history span")

    n_fwd = int(math.floor(t_end / dt + 1e-9))
    t0 = -tau_max
    x0 = np.atleast_1d(np.asarray(history.value(0.0), dtype=float))
    n = len(x0)
    K = n_hist + n_fwd + 1
    nodes = np.empty((K, n))
    derivs = np.empty((K, n))
    for k in range(n_hist):
        t = t0 + k * dt
        nodes[k] = history.value(t)
        derivs[k] = history.slope(t)
    nodes[n_hist] = x0

    # Per (stage, delay) lookup plan: with fixed dt and constant delays the
    # query sits at a fixed offset from the current node, so the Hermite
    # weights are constant across the whole run.
    d = len(delays)
    plans = []
    for c in _STAGE_FRACTIONS:
        stage_plan = []
        for tau in delays:
            if tau == 0.0:
                stage_plan.append(("self", 0, 0, None))
                continue
            rho = c - tau / dt
            base = math.floor(rho + 1e-9)
            theta = rho - base
            if theta < 1e-9:
                # exactly on a stored node; history nodes are prefilled, so
                # no special routing is needed
                stage_plan.append(("node", base, -1, None))
            else:
                # a Hermite segment with its right endpoint at or before
                # t = 0 would interpolate across the history kink; route
                # those queries to the history function itself
                hist_until = n_hist - base
                stage_plan.append(("hermite", base, hist_until, _hermite_weights(theta)))
        plans.append(stage_plan)

    def delayed(plan, k, t, x_stage, out):
        for i in range(d):
            mode, base, hist_until, wts = plan[i]
            if mode == "self":
                out[i] = x_stage
            elif mode == "node":
                out[i] = nodes[k + base]
            elif k < hist_until:
                out[i] = history.value(t - delays[i])
            else:
                s = k + base
                w00, w10, w01, w11 = wts
                out[i] = (
                    w00 * nodes[s]
                    + w01 * nodes[s + 1]
                    + dt * (w10 * derivs[s] + w11 * derivs[s + 1])
                )
        return out

    xdel = np.empty((d, n))
    plan2, plan3, plan4 = plans

    # derivative at t = 0 (right-sided: the history may kink there)
    for i in range(d):
        xdel[i] = x0 if delays[i] == 0.0 else history.value(-delays[i])
    derivs[n_hist] = rhs(x0, xdel)

    half = 0.5 * dt
    sixth = dt / 6.0
    for k in range(n_hist, K - 1):
        t = t0 + k * dt
        x = nodes[k]
        k1 = derivs[k]
        x2 = x + half * k1
        k2 = rhs(x2, delayed(plan2, k, t + half, x2, xdel))
        x3 = x + half * k2
        k3 = rhs(x3, delayed(plan3, k, t + half, x3, xdel))
        x4 = x + dt * k3
        kd4 = delayed(plan4, k, t + dt, x4, xdel)
        k4 = rhs(x4, kd4)
        xn = x + sixth * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if np.max(np.abs(xn)) > BLOWUP_LIMIT:
            raise DivergenceError("divergence")
        nodes[k + 1] = xn
        # stage-4 lookups are exactly the node-(k+1) lookups; only zero-delay
        # entries need refreshing with the accepted state
        for i in range(d):
            if delays[i] == 0.0:
                kd4[i] = xn
        derivs[k + 1] = rhs(xn, kd4)

    return DenseTrajectory(t0=t0, dt=dt, nodes=nodes, derivs=derivs, history=history)


@dataclass
class TrajectoryDataset:
    """Sampled trajectories on a shared time grid, split into train and test."""

    n: int
    h: float
    tau_max: float
    M: int
    times: np.ndarray  # (n_samples,)
    values: list  # per trajectory: (n_samples, n)
    n_train: int

    @property
    def n_traj(self):
        return len(self.values)

    @property
    def n_test(self):
        return len(self.times) - self.n_train

    def train_values(self, i):
        return self.values[i][: self.n_train]

    def test_values(self, i):
        return self.values[i][self.n_train :]


def _simulate_one_trajectory(c, p, tau_max, t_end, dt, sample_times):
    history = HistorySpec.constant(c, tau_max)
    traj = simulate_dde(make_mg_delayed_rhs(p), history, [p.tau], t_end, dt)
    return traj.sample(sample_times)


def generate_dataset(
    p: MgParams = MgParams(),
    n_traj=100,
    h=0.05,
    tau_max=1.5,
    t_drop=10.0,
    t_train_end=17.0,
    t_test_end=20.0,
    substeps=10,
    threads=1,
) -> TrajectoryDataset:
    """Simulate constant-history trajectories and sample them at spacing h.

    Trajectory i starts from x(t) = c with c = 0.5 + i/(n_traj-1) (c = 0.5
    for a single trajectory).  The transient before t_drop is discarded;
    samples up to t_train_end are the training split, the remainder up to
    t_test_end the test split.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    if t_drop >= t_train_end:
        raise ValueError("empty training window")
    if t_train_end > t_test_end:
        raise ValueError("t_test_end must not precede t_train_end")
    M = int(round(tau_max / h))
    if abs(M * h - tau_max) > 1e-9 * max(1.0, tau_max):
        raise ValueError("h must divide tau_max")
    dt = h / substeps
    n_samples = int(math.floor((t_test_end - t_drop) / h + 1e-9)) + 1
    times = t_drop + h * np.arange(n_samples)
    cs = [0.5 + (i / (n_traj - 1) if n_traj > 1 else 0.0) for i in range(n_traj)]
    worker = partial(
        _simulate_one_trajectory,
        p=p,
        tau_max=tau_max,
        t_end=t_test_end,
        dt=dt,
        sample_times=times,
    )
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(worker, cs))
    else:
        values = [worker(c) for c in cs]

    n_train = int(np.sum(times <= t_train_end + 1e-9))
    return TrajectoryDataset(
        n=values[0].shape[1],
        h=h,
        tau_max=tau_max,
        M=M,
        times=times,
        values=values,
        n_train=n_train,
    )


def write_dataset(ds: TrajectoryDataset, path):
    """CSV with a `# n= h= tau_max= M=` header, rows traj_id,t,x_1..x_n."""
    with open(path, "w") as f:
        f.write(f"# n={ds.n} h={ds.h:.15g} tau_max={ds.tau_max:.15g} M={ds.M}\n")
        cols = ",".join(f"x_{j+1}" for j in range(ds.n))
        f.write(f"traj_id,t,{cols}\n")
        for i, vals in enumerate(ds.values):
            for t, row in zip(ds.times, vals):
                xs = ",".join(f"{v:.17g}" for v in row)
                f.write(f"{i},{t:.15g},{xs}\n")


def read_dataset(path, train_end=17.0) -> TrajectoryDataset:
    with open(path) as f:
        header = f.readline().strip()
        if not header.startswith("# "):
            raise ValueError("missing dataset header")
        meta = dict(item.split("=") for item in header[2:].split())
        f.readline()  # column names
        rows = [line.strip().split(",") for line in f if line.strip()]
    n = int(meta["n"])
    by_traj = {}
    for parts in rows:
        tid = int(parts[0])
        by_traj.setdefault(tid, []).append([float(v) for v in parts[1:]])
    values = []
    times = None
    for tid in sorted(by_traj):
        arr = np.asarray(by_traj[tid])
        if times is None:
            times = arr[:, 0]
        values.append(arr[:, 1 : 1 + n])
    n_train = int(np.sum(times <= train_end + 1e-9))
    return TrajectoryDataset(
        n=n,
        h=float(meta["h"]),
        tau_max=float(meta["tau_max"]),
        M=int(meta["M"]),
        times=times,
        values=values,
        n_train=n_train,
    )
