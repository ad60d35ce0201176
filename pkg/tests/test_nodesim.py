"""Neural ODE assembly, integration tape, loss, and backprop-through-RK4."""

import numpy as np
import pytest

from delaynode.dde import DivergenceError, MackeyGlassNet
from delaynode.discretize import build_dm, constant_history_grid
from delaynode.mlp import MlpParameters, init_glorot
from delaynode.nodesim import (
    backprop,
    integrate,
    load_model,
    loss,
    make_node_system,
    node_rhs,
    save_model,
    with_delays,
)


def zero_mlp(n_in=2, n_out=1):
    return MlpParameters(
        W1=np.zeros((5, n_in)), b1=np.zeros(5), W2=np.zeros((5, 5)), b2=np.zeros(5),
        W3=np.zeros((n_out, 5)),
    )


class QuadraticNet:
    """Deliberately unstable test nonlinearity: dx1/dt = s * x1^2."""

    def __init__(self, scale):
        self.scale = scale

    def forward(self, z):
        zb = np.atleast_2d(z)
        y = self.scale * zb[:, :1] ** 2
        return (y[0] if np.asarray(z).ndim == 1 else y), None


class TestNodeRhs:
    def test_zero_network_constant_grid(self):
        sysm = make_node_system(zero_mlp(), [0.0, 1.0], 1, 30, 0.05)
        out = node_rhs(sysm, np.ones(31))
        assert np.all(out == 0.0)

    def test_exact_nonlinearity_matches_composed_system(self, mg):
        from delaynode.discretize import compose_discretized_rhs
        from delaynode.dde import mg_rhs

        sysm = make_node_system(MackeyGlassNet(mg), [0.0, 1.0], 1, 30, 0.05)
        dm = build_dm("central", 1, 30, 0.05)
        composed = compose_discretized_rhs(
            lambda X: np.atleast_1d(mg_rhs(X[0], X[20], mg)), dm
        )
        X = 0.5 + 0.1 * np.random.default_rng(3).random(31)
        assert np.array_equal(node_rhs(sysm, X), composed(X))

    def test_lower_blocks_are_transport(self, rng):
        sysm = make_node_system(init_glorot(0, (2, 5, 5, 1)), [0.0, 0.7], 1, 20, 0.05)
        X = rng.normal(size=21)
        dm = build_dm("central", 1, 20, 0.05)
        assert np.allclose(node_rhs(sysm, X)[1:], dm @ X, atol=1e-15)

    def test_dimension_mismatch(self):
        sysm = make_node_system(zero_mlp(), [0.0, 1.0], 1, 30, 0.05)
        with pytest.raises(ValueError, match="dimension mismatch"):
            node_rhs(sysm, np.ones(30))


class TestIntegrate:
    def test_exact_nonlinearity_tracks_dde(self, mg, ref_traj):
        # initial grid sampled from the reference at t = 10, ten steps ahead
        M, h = 30, 0.05
        sysm = make_node_system(MackeyGlassNet(mg), [0.0, 1.0], 1, M, h)
        X0 = np.array([ref_traj.eval(10.0 - k * h)[0] for k in range(M + 1)])
        pred, _ = integrate(sysm, X0, 10, substeps=10)
        for j in range(10):
            assert abs(pred[j, 0] - ref_traj.eval(10.0 + (j + 1) * h)[0]) < 0.02

    def test_zero_network_keeps_constant_grid(self):
        sysm = make_node_system(zero_mlp(), [0.0, 0.4], 1, 10, 0.05)
        pred, _ = integrate(sysm, constant_history_grid(0.63, 1, 10), 5)
        assert np.allclose(pred[:, 0], 0.63, atol=1e-14)

    def test_substep_self_convergence(self, mg, ref_traj):
        M, h = 30, 0.05
        sysm = make_node_system(MackeyGlassNet(mg), [0.0, 1.0], 1, M, h)
        X0 = np.array([ref_traj.eval(10.0 - k * h)[0] for k in range(M + 1)])
        p10, _ = integrate(sysm, X0, 10, substeps=10)
        p20, _ = integrate(sysm, X0, 10, substeps=20)
        assert np.max(np.abs(p10 - p20)) < 1e-8

    def test_structural_consistency_of_lower_blocks(self, mg, ref_traj):
        # after N steps, block j+1 should hold x(t - j h) up to discretization error
        M, h, N = 30, 0.05, 10
        sysm = make_node_system(MackeyGlassNet(mg), [0.0, 1.0], 1, M, h)
        X0 = np.array([ref_traj.eval(10.0 - k * h)[0] for k in range(M + 1)])
        # the fourth-stage input of the last substep approximates X(t_final)
        pred, tape = integrate(sysm, X0[None, :], N, substeps=10)
        final_stage = tape.stages[-1][0][0]
        t_final = 10.0 + N * h
        for j in range(0, M + 1, 5):
            assert abs(final_stage[j] - ref_traj.eval(t_final - j * h)[0]) < 0.03

    def test_single_divergence_raises(self):
        sysm = make_node_system(QuadraticNet(1e3), [0.0, 0.2], 1, 4, 0.05)
        X0 = constant_history_grid(5.0, 1, 4)
        with pytest.raises(DivergenceError, match="divergence") as err:
            integrate(sysm, X0, 50, substeps=10)
        assert err.value.tape is not None

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_batch_divergence_freezes_member(self):
        sysm = make_node_system(QuadraticNet(1e3), [0.0, 0.2], 1, 4, 0.05)
        good = constant_history_grid(0.0, 1, 4)
        bad = constant_history_grid(5.0, 1, 4)
        pred, tape = integrate(sysm, np.stack([good, bad]), 50, substeps=10)
        assert list(tape.diverged) == [False, True]
        assert np.all(np.isfinite(pred))
        solo, _ = integrate(sysm, good, 50, substeps=10)
        assert np.array_equal(pred[0], solo)

    def test_zero_horizon(self):
        sysm = make_node_system(zero_mlp(), [0.0, 0.4], 1, 10, 0.05)
        pred, tape = integrate(sysm, constant_history_grid(1.0, 1, 10), 0)
        assert pred.shape == (0, 1)
        assert loss(pred, np.empty((0, 1))) == 0.0
        grads = backprop(sysm, tape, np.empty((0, 1)))
        assert all(np.all(g == 0.0) for g in grads.values())


class TestLoss:
    def test_zero_on_match(self):
        p = np.array([[1.0], [2.0]])
        assert loss(p, p) == 0.0

    def test_hand_sum(self):
        assert loss(np.array([[1.0], [2.0]]), np.zeros((2, 1))) == 3.0

    def test_permutation_invariance(self, rng):
        pred = rng.normal(size=(6, 1))
        target = rng.normal(size=(6, 1))
        perm = rng.permutation(6)
        assert loss(pred, target) == pytest.approx(loss(pred[perm], target[perm]))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            loss(np.zeros((2, 1)), np.zeros((3, 1)))


class TestBackprop:
    def _setup(self, seed, M=10, horizon=3, alpha_half=True):
        rng = np.random.default_rng(seed)
        params = init_glorot(seed, (2, 5, 5, 1))
        h = 0.05
        j = int(rng.integers(2, M - 1))
        tau2 = h * (j + 0.5) if alpha_half else h * j
        sysm = make_node_system(params, [0.0, tau2], 1, M, h)
        X0 = 0.9 + 0.1 * rng.standard_normal(M + 1)
        target = 0.9 + 0.1 * rng.standard_normal((horizon, 1))
        return sysm, X0, target

    def test_zero_residuals_zero_grads(self):
        sysm, X0, _ = self._setup(0)
        pred, tape = integrate(sysm, X0, 3, substeps=5)
        grads = backprop(sysm, tape, pred)  # target == prediction exactly
        assert all(np.all(g == 0.0) for g in grads.values())

    @pytest.mark.parametrize("seed", range(5))
    def test_weight_gradients_vs_finite_differences(self, seed):
        sysm, X0, target = self._setup(seed)
        _, tape = integrate(sysm, X0, 3, substeps=5)
        grads = backprop(sysm, tape, target)
        eps = 1e-6
        for name in ("W1", "b1", "W2", "b2", "W3"):
            arr = getattr(sysm.net, name)
            fd = np.zeros_like(arr)
            flat, out = arr.reshape(-1), fd.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + eps
                up, _ = integrate(sysm, X0, 3, substeps=5)
                flat[i] = old - eps
                down, _ = integrate(sysm, X0, 3, substeps=5)
                flat[i] = old
                out[i] = (loss(up, target) - loss(down, target)) / (2 * eps)
            rel = np.max(np.abs(grads[name] - fd)) / (np.max(np.abs(fd)) + 1e-12)
            assert rel < 1e-5, f"seed {seed} {name}: rel err {rel}"

    @pytest.mark.parametrize("seed", range(5))
    def test_delay_gradient_vs_finite_differences(self, seed):
        sysm, X0, target = self._setup(seed)
        _, tape = integrate(sysm, X0, 3, substeps=5)
        grads = backprop(sysm, tape, target)
        eps = 1e-5
        tau2 = sysm.delays[1]
        ls = []
        for t2 in (tau2 + eps, tau2 - eps):
            pred, _ = integrate(with_delays(sysm, [0.0, t2]), X0, 3, substeps=5)
            ls.append(loss(pred, target))
        fd = (ls[0] - ls[1]) / (2 * eps)
        assert abs(grads["tau"][1] - fd) / (abs(fd) + 1e-12) < 1e-3

    def test_gradient_of_batch_is_sum_of_members(self, rng):
        sysm, X0a, ta = self._setup(11)
        X0b = 0.9 + 0.1 * rng.standard_normal(len(X0a))
        tb = 0.9 + 0.1 * rng.standard_normal(ta.shape)
        _, tape_a = integrate(sysm, X0a, 3, substeps=5)
        _, tape_b = integrate(sysm, X0b, 3, substeps=5)
        _, tape_ab = integrate(sysm, np.stack([X0a, X0b]), 3, substeps=5)
        ga = backprop(sysm, tape_a, ta)
        gb = backprop(sysm, tape_b, tb)
        gab = backprop(sysm, tape_ab, np.stack([ta, tb]))
        for name in gab:
            assert np.allclose(gab[name], ga[name] + gb[name], rtol=1e-12, atol=1e-14)

    def test_tape_determinism(self):
        sysm, X0, target = self._setup(4)
        _, tape1 = integrate(sysm, X0, 3, substeps=5)
        _, tape2 = integrate(sysm, X0, 3, substeps=5)
        g1 = backprop(sysm, tape1, target)
        g2 = backprop(sysm, tape2, target)
        for name in g1:
            assert np.array_equal(g1[name], g2[name])

    def test_requires_mlp(self, mg):
        sysm = make_node_system(MackeyGlassNet(mg), [0.0, 1.0], 1, 10, 0.15)
        _, tape = integrate(sysm, constant_history_grid(1.0, 1, 10), 2)
        with pytest.raises(TypeError):
            backprop(sysm, tape, np.ones((2, 1)))


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        params = init_glorot(9, (2, 5, 5, 1))
        sysm = make_node_system(params, [0.0, 0.9939675007353685], 1, 30, 0.05)
        path = tmp_path / "model.txt"
        save_model(path, sysm)
        back = load_model(path)
        assert back.net == params
        assert np.array_equal(back.delays, sysm.delays)
        assert (back.n, back.M, back.h) == (1, 30, 0.05)
        # saving again is byte-identical
        path2 = tmp_path / "model2.txt"
        save_model(path2, back)
        assert path.read_bytes() == path2.read_bytes()

    def test_rejects_non_mlp(self, tmp_path, mg):
        sysm = make_node_system(MackeyGlassNet(mg), [0.0, 1.0], 1, 30, 0.05)
        with pytest.raises(TypeError):
            save_model(tmp_path / "m.txt", sysm)

    def test_rejects_corrupt_file(self, tmp_path):
        path = tmp_path / "m.txt"
        path.write_text("version 99\n")
        with pytest.raises(ValueError):
            load_model(path)
