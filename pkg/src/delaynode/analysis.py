"""Post-training validation of a learned system.

Because the delays are explicit parameters, the first block of the neural
ODE can be read off as a standalone neural delay differential equation and
studied like any DDE: simulate it under parameter or initial-condition
changes, sweep its delay for a bifurcation diagram, and compare its
nonlinearity surface against the truth.  A linear-stability calculation for
the Mackey-Glass equilibrium provides an independent cross-check on where
oscillations must set in.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial

import numpy as np

from .dde import DivergenceError, HistorySpec, MgParams, simulate_dde
from .nodesim import NodeSystem, _net_forward

EQUILIBRIUM_SPREAD = 1e-4
CLUSTER_TOL = 0.01
CHAOS_CLUSTER_COUNT = 8


@dataclass
class NddeModel:
    """Delay differential equation dx/dt = net([x(t-tau_1); ...; x(t-tau_d)])."""

    net: object
    delays: np.ndarray
    n: int

    def rhs_value(self, delayed_states):
        """Evaluate the right-hand side at exact delayed values (d, n)."""
        z = np.asarray(delayed_states, dtype=float).reshape(-1)
        y, _ = _net_forward(self.net, z)
        return np.atleast_1d(y)

    def swept_rhs(self):
        """Picklable rhs(x, x_tau) for delay sweeps; needs delays (0, tau)."""
        if len(self.delays) != 2 or self.delays[0] != 0.0:
            raise ValueError("delay sweep needs a model with delays (0, tau)")
        return partial(_pair_rhs, model=self)


def extract_ndde(sys: NodeSystem) -> NddeModel:
    """First block of the neural ODE, read off as a standalone DDE."""
    return NddeModel(net=sys.net, delays=sys.delays.copy(), n=sys.n)


def _ndde_rhs(x, xdel, model: NddeModel):
    return model.rhs_value(xdel)


def _pair_rhs(x, x_tau, model: NddeModel):
    return model.rhs_value(np.stack([np.atleast_1d(x), np.atleast_1d(x_tau)]))


def simulate_ndde(model: NddeModel, history: HistorySpec, t_end, dt, delays=None):
    """Method-of-steps simulation of the extracted DDE.

    `delays` overrides the model's trained delays (same count), which is how
    the learned nonlinearity is probed at delay values never seen in
    training.
    """
    use = model.delays if delays is None else np.asarray(delays, dtype=float)
    if len(use) != len(model.delays):
        raise ValueError("delay override must keep the delay count")
    return simulate_dde(partial(_ndde_rhs, model=model), history, use, t_end, dt)


def local_extrema(x, dt):
    """Local maxima and minima of a sampled signal, amplitude-refined by a
    parabola through the three bracketing samples."""
    x = np.asarray(x, dtype=float)
    maxima, minima = [], []
    for i in range(1, len(x) - 1):
        left, mid, right = x[i - 1], x[i], x[i + 1]
        if mid >= left and mid >= right and (mid > left or mid > right):
            maxima.append(_refine(left, mid, right))
        elif mid <= left and mid <= right and (mid < left or mid < right):
            minima.append(_refine(left, mid, right))
    return np.asarray(maxima), np.asarray(minima)


def _refine(left, mid, right):
    curv = left - 2.0 * mid + right
    if curv == 0.0:
        return mid
    slope = 0.5 * (right - left)
    return mid - slope * slope / (2.0 * curv)


def cluster_count(values, tol=CLUSTER_TOL):
    """Number of distinct value clusters: sorted gaps larger than tol split."""
    if len(values) == 0:
        return 0
    s = np.sort(np.asarray(values, dtype=float))
    return 1 + int(np.sum(np.diff(s) > tol))


def cluster_levels(values, tol=CLUSTER_TOL):
    """Mean value of each cluster, ascending."""
    if len(values) == 0:
        return np.empty(0)
    s = np.sort(np.asarray(values, dtype=float))
    splits = np.flatnonzero(np.diff(s) > tol) + 1
    return np.array([seg.mean() for seg in np.split(s, splits)])


@dataclass
class BifurcationDiagram:
    """Steady-state extrema per delay value (equilibria collapse to one point)."""

    taus: np.ndarray
    maxima: list  # per tau: ndarray of steady-state local maxima
    minima: list
    failed: np.ndarray  # per tau: True if the run diverged

    def points(self):
        """Flat (tau, extremum) rows, maxima then minima per tau."""
        rows = []
        for t, mx, mn in zip(self.taus, self.maxima, self.minima):
            for v in mx:
                rows.append((t, v))
            for v in mn:
                rows.append((t, v))
        return np.asarray(rows).reshape(-1, 2)

    def maxima_clusters(self, tol=CLUSTER_TOL):
        return np.array([cluster_count(mx, tol) for mx in self.maxima])

    def chaos_onset(self, tol=CLUSTER_TOL, threshold=CHAOS_CLUSTER_COUNT):
        """First tau whose maxima spread over more than `threshold` clusters;
        a rough proxy, reported but never asserted against."""
        counts = self.maxima_clusters(tol)
        hits = np.flatnonzero(counts > threshold)
        return float(self.taus[hits[0]]) if hits.size else None


def _scan_one(tau, rhs, t_transient, t_measure, history_value, dt_target):
    if tau > 0:
        dt = tau / math.ceil(tau / dt_target - 1e-9)
    else:
        dt = dt_target
    history = HistorySpec.constant(history_value, max(tau, 0.0))
    try:
        traj = simulate_dde(
            partial(_swept_rhs, user_rhs=rhs), history, [tau], t_transient + t_measure, dt
        )
    except DivergenceError:
        return None
    i0 = int(math.ceil((t_transient - traj.t0) / traj.dt - 1e-9))
    tail = traj.nodes[i0:, 0]
    if tail.max() - tail.min() < EQUILIBRIUM_SPREAD:
        # equilibrium: one diagram point, carried on the maxima side
        return np.array([float(tail.mean())]), np.empty(0)
    mx, mn = local_extrema(tail, traj.dt)
    return mx, mn


def _swept_rhs(x, xdel, user_rhs):
    return user_rhs(x, xdel[0])


def bifurcation_scan(
    rhs,
    tau_grid,
    t_transient=200.0,
    t_measure=100.0,
    history_value=0.9,
    dt=0.01,
    threads=1,
) -> BifurcationDiagram:
    """Brute-force bifurcation diagram of dx/dt = rhs(x, x(t-tau)) over tau_grid.

    Each delay value is simulated independently from the same constant
    history; the transient is discarded and the steady-state local extrema
    collected.  A tail flatter than 1e-4 collapses to a single equilibrium
    point.  Runs that diverge are flagged and the scan continues.  With
    threads > 1 the delay values are farmed out to worker processes (rhs
    must then be picklable); results merge in grid order either way.
    """
    tau_grid = np.asarray(tau_grid, dtype=float)
    worker = partial(
        _scan_one,
        rhs=rhs,
        t_transient=t_transient,
        t_measure=t_measure,
        history_value=history_value,
        dt_target=dt,
    )
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            raw = list(pool.map(worker, tau_grid))
    else:
        raw = [worker(t) for t in tau_grid]
    maxima, minima, failed = [], [], np.zeros(len(tau_grid), dtype=bool)
    for i, res in enumerate(raw):
        if res is None:
            failed[i] = True
            maxima.append(np.empty(0))
            minima.append(np.empty(0))
        else:
            maxima.append(res[0])
            minima.append(res[1])
    return BifurcationDiagram(taus=tau_grid, maxima=maxima, minima=minima, failed=failed)


def write_diagram(diag: BifurcationDiagram, path):
    with open(path, "w") as f:
        f.write("tau,extremum\n")
        for t, v in diag.points():
            f.write(f"{t:.15g},{v:.17g}\n")


def read_diagram(path):
    with open(path) as f:
        f.readline()
        rows = [line.strip().split(",") for line in f if line.strip()]
    return np.array([[float(a), float(b)] for a, b in rows]).reshape(-1, 2)


def diagram_hausdorff(diag_a: BifurcationDiagram, diag_b: BifurcationDiagram):
    """Per-tau symmetric Hausdorff distance between the two extrema sets.

    Requires matching tau grids; taus where either scan failed or is empty
    give NaN."""
    if len(diag_a.taus) != len(diag_b.taus) or np.max(np.abs(diag_a.taus - diag_b.taus)) > 1e-12:
        raise ValueError("diagrams must share the tau grid")
    out = np.full(len(diag_a.taus), np.nan)
    for i in range(len(diag_a.taus)):
        a = np.concatenate([diag_a.maxima[i], diag_a.minima[i]])
        b = np.concatenate([diag_b.maxima[i], diag_b.minima[i]])
        if len(a) == 0 or len(b) == 0:
            continue
        d_ab = np.max([np.min(np.abs(b - v)) for v in a])
        d_ba = np.max([np.min(np.abs(a - v)) for v in b])
        out[i] = max(d_ab, d_ba)
    return out


def hopf_oracle(p: MgParams):
    """Critical delay of the positive Mackey-Glass equilibrium from the
    characteristic equation lambda = a + b*exp(-lambda*tau).

    At the equilibrium x* with 1 + x*^delta = beta/gamma, the linearization
    has a = -gamma and b = beta*(1 + (1-delta)*x*^delta)/(1+x*^delta)^2; the
    first root crossing lambda = i*omega gives omega = sqrt(b^2 - a^2) and
    tau_c = theta/omega with cos(theta) = -a/b, sin(theta) = -omega/b.
    Returns (tau_c, omega).
    """
    if p.beta <= p.gamma:
        raise ValueError("no positive equilibrium: beta must exceed gamma")
    xs_delta = p.beta / p.gamma - 1.0  # x*^delta
    a = -p.gamma
    b = p.beta * (1.0 + (1.0 - p.delta) * xs_delta) / (1.0 + xs_delta) ** 2
    if abs(b) <= abs(a):
        raise ValueError("no Hopf in this parameterization")
    omega = math.sqrt(b * b - a * a)
    theta = math.atan2(-omega / b, -a / b)
    if theta < 0:
        theta += 2.0 * math.pi
    return theta / omega, omega


@dataclass
class SurfaceGrid:
    """Right-hand sides over a rectangular (x, x_delayed) grid."""

    x: np.ndarray  # (nx,)
    x_delayed: np.ndarray  # (ny,)
    truth: np.ndarray  # (nx, ny)
    model: np.ndarray  # (nx, ny)

    @property
    def error(self):
        return self.model - self.truth

    def mean_abs_error(self):
        return float(np.mean(np.abs(self.error)))


def surface_error(truth_rhs, model: NddeModel, bounds=(0.2, 1.4), resolution=101) -> SurfaceGrid:
    """Evaluate truth and model right-hand sides on a grid of (x, x_delayed).

    The model must have two delays with the first equal to zero, so its
    network consumes exactly [x; x_delayed].  truth_rhs(x, x_delayed) is any
    scalar-state delayed right-hand side.
    """
    if len(model.delays) != 2 or model.delays[0] != 0.0:
        raise ValueError("surface comparison needs delays (0, tau)")
    lo, hi = bounds
    nx = resolution if np.isscalar(resolution) else resolution[0]
    ny = resolution if np.isscalar(resolution) else resolution[1]
    xs = np.linspace(lo, hi, nx) if nx > 1 else np.array([0.5 * (lo + hi)])
    ys = np.linspace(lo, hi, ny) if ny > 1 else np.array([0.5 * (lo + hi)])
    U, V = np.meshgrid(xs, ys, indexing="ij")
    Z = np.stack([U.ravel(), V.ravel()], axis=1)
    model_vals, _ = _net_forward(model.net, Z)
    model_surf = np.asarray(model_vals).reshape(U.shape)
    truth_surf = np.asarray(truth_rhs(U, V), dtype=float)
    return SurfaceGrid(x=xs, x_delayed=ys, truth=truth_surf, model=model_surf)


def write_surface(grid: SurfaceGrid, path):
    err = grid.error
    with open(path, "w") as f:
        f.write("x,x_delayed,truth,model,error\n")
        for i, u in enumerate(grid.x):
            for j, v in enumerate(grid.x_delayed):
                f.write(
                    f"{u:.15g},{v:.15g},{grid.truth[i, j]:.17g},"
                    f"{grid.model[i, j]:.17g},{err[i, j]:.17g}\n"
                )


def read_surface(path):
    with open(path) as f:
        f.readline()
        rows = [[float(v) for v in line.strip().split(",")] for line in f if line.strip()]
    return np.asarray(rows).reshape(-1, 5)
