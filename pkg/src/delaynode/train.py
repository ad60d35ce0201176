"""Batched training of the neural ODE: pair extraction, Adam, the loop.

Each iteration samples a batch of (history grid -> N-step target) pairs,
simulates them together, backpropagates through the integrator, and applies
one Adam update to all weights, biases and trainable delays jointly.  Delays
are clamped to [0, tau_max] and the interpolation matrix is rebuilt from
them, so a delay may cross grid nodes freely as it learns.

Sampling is stratified (the same number of pairs from every trajectory)
whenever the batch size is a multiple of the trajectory count, and falls
back to uniform sampling otherwise.  One RNG stream per purpose (weights,
delay init, batch sampling), all derived from the config seed, keeps runs
bit-reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .dde import TrajectoryDataset
from .discretize import history_grid_from_window
from .mlp import init_glorot, params_from_dict
from .nodesim import NodeSystem, backprop, integrate, make_node_system, member_losses, with_delays

DIVERGED_LOSS_SENTINEL = 1.0e6


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 2000
    batch_size: int = 1000
    horizon: int = 10
    seed: int = 0
    tau_max: float = 1.5
    M: int = 30
    h: float = 0.05
    d: int = 2
    hidden: tuple = (5, 5)
    substeps: int = 10
    fix_first_delay: bool = True

    def __post_init__(self):
        if min(self.eta, self.beta1, self.beta2, self.eps, self.tau_max, self.h) <= 0:
            raise ValueError("config values must be positive")
        if self.iterations < 0 or self.batch_size < 1 or self.horizon < 0:
            raise ValueError("invalid iteration/batch/horizon counts")


@dataclass
class AdamState:
    """First/second moment estimates per parameter tensor plus step counter."""

    m: dict
    v: dict
    k: int = 0


def adam_init(theta: dict) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(val) for name, val in theta.items()},
        v={name: np.zeros_like(val) for name, val in theta.items()},
        k=0,
    )


def adam_step(theta: dict, g: dict, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update; returns (new theta, new state)."""
    k = state.k + 1
    new_theta, new_m, new_v = {}, {}, {}
    c1 = 1.0 - cfg.beta1**k
    c2 = 1.0 - cfg.beta2**k
    for name, val in theta.items():
        grad = g[name]
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * grad**2
        mhat = m / c1
        vhat = v / c2
        new_theta[name] = val - cfg.eta / (np.sqrt(vhat) + cfg.eps) * mhat
        new_m[name] = m
        new_v[name] = v
    return new_theta, AdamState(m=new_m, v=new_v, k=k)


def clamp_delays(delays, tau_max):
    return np.clip(np.asarray(delays, dtype=float), 0.0, tau_max)


@dataclass
class PairSet:
    """Sliding-window training pairs pooled across trajectories."""

    X0: np.ndarray  # (n_pairs, n*(M+1)) history grids
    targets: np.ndarray  # (n_pairs, N, n)
    traj_id: np.ndarray  # (n_pairs,)
    n_traj: int

    @property
    def n_pairs(self):
        return len(self.X0)


def build_pairs(ds: TrajectoryDataset, M, N) -> PairSet:
    """Stride-1 windows over the training split of every trajectory.

    Pair k of a trajectory uses samples [k, k+M] as the history (newest
    sample becomes the first grid block) and samples [k+M+1, k+M+N] as the
    targets, yielding n_train - M - N pairs per trajectory.
    """
    per_traj = ds.n_train - M - N
    if per_traj < 1:
        raise ValueError("trajectory too short for this M and horizon")
    X0s, tgts, tids = [], [], []
    for i in range(ds.n_traj):
        train = ds.train_values(i)
        for k in range(per_traj):
            X0s.append(history_grid_from_window(train[k : k + M + 1]))
            tgts.append(train[k + M + 1 : k + M + 1 + N])
            tids.append(i)
    return PairSet(
        X0=np.asarray(X0s),
        targets=np.asarray(tgts).reshape(len(X0s), N, ds.n),
        traj_id=np.asarray(tids),
        n_traj=ds.n_traj,
    )


@dataclass
class TrainLog:
    """Per-iteration record: summed batch loss, delay values, skipped members,
    wall time."""

    loss: np.ndarray
    delays: np.ndarray  # (iterations, d)
    skipped: np.ndarray
    wall: np.ndarray

    @property
    def iterations(self):
        return len(self.loss)


def write_trainlog(log: TrainLog, path):
    d = log.delays.shape[1]
    with open(path, "w") as f:
        f.write("iter,loss," + ",".join(f"tau_{i+1}" for i in range(d)) + ",skipped\n")
        for k in range(log.iterations):
            taus = ",".join(f"{v:.17g}" for v in log.delays[k])
            f.write(f"{k+1},{log.loss[k]:.17g},{taus},{log.skipped[k]}\n")


def read_trainlog(path) -> TrainLog:
    with open(path) as f:
        header = f.readline().strip().split(",")
        d = len(header) - 3
        rows = [line.strip().split(",") for line in f if line.strip()]
    loss = np.array([float(r[1]) for r in rows])
    delays = np.array([[float(v) for v in r[2 : 2 + d]] for r in rows]).reshape(len(rows), d)
    skipped = np.array([int(r[-1]) for r in rows])
    return TrainLog(loss=loss, delays=delays, skipped=skipped, wall=np.zeros(len(rows)))


def _sample_batch(rng, pairs: PairSet, batch_size):
    if batch_size > pairs.n_pairs:
        raise ValueError("batch size exceeds number of pairs")
    per = batch_size // pairs.n_traj
    if per * pairs.n_traj == batch_size:
        # stratified: `per` pairs from each trajectory, without replacement
        idx = []
        for t in range(pairs.n_traj):
            tidx = np.flatnonzero(pairs.traj_id == t)
            idx.append(rng.choice(tidx, size=per, replace=False))
        return np.concatenate(idx)
    return rng.choice(pairs.n_pairs, size=batch_size, replace=False)


def init_system(cfg: TrainConfig, n) -> NodeSystem:
    """Fresh system: Glorot weights, zero biases, uniformly drawn delays.

    With cfg.fix_first_delay the first delay is pinned at zero (the usual
    known-instantaneous-term setup) and the remaining d-1 delays are drawn
    uniformly on [0, tau_max]; otherwise all d delays are drawn uniformly.
    """
    ss = np.random.SeedSequence(cfg.seed)
    seed_w, seed_tau, _ = ss.spawn(3)
    dims = (cfg.d * n, cfg.hidden[0], cfg.hidden[1], n)
    params = init_glorot(seed_w, dims)
    rng_tau = np.random.default_rng(seed_tau)
    delays = rng_tau.uniform(0.0, cfg.tau_max, size=cfg.d)
    if cfg.fix_first_delay:
        delays[0] = 0.0
    return make_node_system(params, delays, n, cfg.M, cfg.h)


def train(ds: TrajectoryDataset, cfg: TrainConfig, callback=None):
    """Run the full training loop; returns (trained system, TrainLog).

    `callback(iteration, system, log_row)` fires after each update when
    given (used for periodic checkpoints).
    """
    if abs(ds.h - cfg.h) > 1e-12 or ds.M != cfg.M or abs(ds.tau_max - cfg.tau_max) > 1e-12:
        raise ValueError("dataset grid (h, M, tau_max) does not match config")
    pairs = build_pairs(ds, cfg.M, cfg.horizon)
    sysm = init_system(cfg, ds.n)
    _, _, seed_batch = np.random.SeedSequence(cfg.seed).spawn(3)
    rng = np.random.default_rng(seed_batch)

    theta = dict(sysm.net.as_dict())
    theta["tau"] = sysm.delays.copy()
    state = adam_init(theta)

    losses = np.zeros(cfg.iterations)
    delay_path = np.zeros((cfg.iterations, cfg.d))
    skipped = np.zeros(cfg.iterations, dtype=int)
    wall = np.zeros(cfg.iterations)
    t_prev = time.perf_counter()

    for it in range(cfg.iterations):
        idx = _sample_batch(rng, pairs, cfg.batch_size)
        _, tape = integrate(sysm, pairs.X0[idx], cfg.horizon, cfg.substeps)
        mlosses = member_losses(tape, pairs.targets[idx], sentinel=DIVERGED_LOSS_SENTINEL)
        n_bad = int(tape.diverged.sum())
        alive = cfg.batch_size - n_bad
        grads = backprop(sysm, tape, pairs.targets[idx])
        if alive > 0:
            for g in grads.values():
                g /= alive
        if cfg.fix_first_delay:
            grads["tau"][0] = 0.0
        theta, state = adam_step(theta, grads, state, cfg)
        theta["tau"] = clamp_delays(theta["tau"], cfg.tau_max)
        sysm = with_delays(replace_net(sysm, params_from_dict(theta)), theta["tau"])
        losses[it] = float(mlosses.sum())
        delay_path[it] = theta["tau"]
        skipped[it] = n_bad
        t_now = time.perf_counter()
        wall[it] = t_now - t_prev
        t_prev = t_now
        if callback is not None:
            callback(it + 1, sysm, (losses[it], delay_path[it], n_bad))

    log = TrainLog(loss=losses, delays=delay_path, skipped=skipped, wall=wall)
    return sysm, log


def replace_net(sysm: NodeSystem, net) -> NodeSystem:
    return NodeSystem(
        net=net, delays=sysm.delays, n=sysm.n, M=sysm.M, h=sysm.h, interp=sysm.interp, dm=sysm.dm
    )


def detect_plateau(log: TrainLog, window=100, min_rel_improvement=0.01):
    """First iteration after which the loss improved by less than the given
    fraction over `window` iterations, or None.  Reported only, never acted on."""
    for k in range(window, log.iterations):
        past = log.loss[k - window]
        if past > 0 and (past - log.loss[k]) / past < min_rel_improvement:
            return k + 1
    return None
