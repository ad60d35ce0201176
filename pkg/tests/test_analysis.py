"""Extraction, simulation, bifurcation machinery, and the stability oracle."""

from functools import partial

import numpy as np
import pytest

from delaynode.analysis import (
    BifurcationDiagram,
    bifurcation_scan,
    cluster_count,
    cluster_levels,
    diagram_hausdorff,
    extract_ndde,
    hopf_oracle,
    local_extrema,
    read_diagram,
    read_surface,
    simulate_ndde,
    surface_error,
    write_diagram,
    write_surface,
)
from delaynode.dde import HistorySpec, MackeyGlassNet, MgParams, mg_rhs
from delaynode.mlp import init_glorot
from delaynode.nodesim import load_model, make_node_system, node_rhs, save_model


class TestExtract:
    def test_equilibrium_transfers(self, mg):
        sysm = make_node_system(MackeyGlassNet(mg), [0.0, 1.0], 1, 30, 0.05)
        model = extract_ndde(sysm)
        assert model.rhs_value([[1.0], [1.0]])[0] == 0.0

    def test_matches_node_rhs_on_grid_aligned_delays(self, rng):
        params = init_glorot(0, (2, 5, 5, 1))
        sysm = make_node_system(params, [0.0, 0.5], 1, 30, 0.05)  # alpha = 0
        model = extract_ndde(sysm)
        X = 0.9 + 0.1 * rng.standard_normal(31)
        exact = model.rhs_value([[X[0]], [X[10]]])  # x(t), x(t - 0.5)
        assert exact[0] == node_rhs(sysm, X)[0]

    def test_round_trip_bitwise_rhs(self, tmp_path, rng):
        params = init_glorot(4, (2, 5, 5, 1))
        sysm = make_node_system(params, [0.0, 0.7321], 1, 30, 0.05)
        save_model(tmp_path / "m.txt", sysm)
        back = extract_ndde(load_model(tmp_path / "m.txt"))
        model = extract_ndde(sysm)
        for _ in range(10):
            z = rng.normal(size=(2, 1))
            assert model.rhs_value(z)[0] == back.rhs_value(z)[0]


class TestSimulateNdde:
    def test_exact_nonlinearity_converges_to_equilibrium(self, mg):
        model = extract_ndde(make_node_system(MackeyGlassNet(mg), [0.0, 0.1], 1, 30, 0.05))
        traj = simulate_ndde(model, HistorySpec.constant(0.9, 0.1), 50.0, 0.01)
        assert abs(traj.eval(50.0)[0] - 1.0) < 1e-3

    def test_zero_network_stays_at_history_value(self):
        from delaynode.mlp import MlpParameters

        zero = MlpParameters(
            W1=np.zeros((5, 2)), b1=np.zeros(5), W2=np.zeros((5, 5)), b2=np.zeros(5),
            W3=np.zeros((1, 5)),
        )
        model = extract_ndde(make_node_system(zero, [0.0, 0.4], 1, 30, 0.05))
        traj = simulate_ndde(model, HistorySpec.constant(0.77, 0.4), 5.0, 0.01)
        assert np.max(np.abs(traj.nodes - 0.77)) == 0.0

    def test_delay_override_changes_count_rejected(self, mg):
        model = extract_ndde(make_node_system(MackeyGlassNet(mg), [0.0, 1.0], 1, 30, 0.05))
        with pytest.raises(ValueError, match="delay count"):
            simulate_ndde(model, HistorySpec.constant(0.2, 1.0), 1.0, 0.01, delays=[0.8])

    def test_consistent_with_node_over_shared_horizon(self, ref_traj):
        # the extracted DDE and the full grid system must agree from the same
        # initial history, up to the grid system's own discretization error
        from delaynode.nodesim import integrate

        params = init_glorot(6, (2, 5, 5, 1))
        M, h, N = 30, 0.05, 10
        sysm = make_node_system(params, [0.0, 1.0], 1, M, h)
        window = np.array([ref_traj.eval(10.0 - 1.5 + 0.05 * k)[0] for k in range(M + 1)])
        X0 = window[::-1].copy()  # newest first
        pred, _ = integrate(sysm, X0, N, substeps=10)

        model = extract_ndde(sysm)
        hist = HistorySpec.from_samples(window, 1.5)
        traj = simulate_ndde(model, hist, N * h, 0.005)
        for j in range(N):
            assert abs(pred[j, 0] - traj.eval((j + 1) * h)[0]) < 0.02


class TestExtrema:
    def test_sine_maxima(self):
        t = np.arange(0.0, 5.0, 0.001)
        mx, mn = local_extrema(np.sin(2 * np.pi * t), 0.001)
        assert len(mx) == 5
        assert np.max(np.abs(mx - 1.0)) < 1e-4
        assert np.max(np.abs(mn + 1.0)) < 1e-4

    def test_monotone_has_none(self):
        mx, mn = local_extrema(np.linspace(0, 1, 100), 0.01)
        assert len(mx) == 0 and len(mn) == 0

    def test_cluster_count(self):
        assert cluster_count([]) == 0
        assert cluster_count([1.0, 1.005, 1.002]) == 1
        assert cluster_count([1.0, 1.2, 1.201, 0.5]) == 3
        assert np.allclose(cluster_levels([1.0, 1.2, 1.201, 0.5]), [0.5, 1.0, 1.2005])


class TestHopfOracle:
    def test_reference_parameterization(self, mg):
        tau_c, omega = hopf_oracle(mg)
        assert tau_c == pytest.approx(0.2486, abs=5e-4)
        assert omega == pytest.approx(7.38394, abs=1e-4)

    def test_no_delayed_instability(self):
        with pytest.raises(ValueError, match="no Hopf"):
            hopf_oracle(MgParams(delta=2.0))

    def test_requires_positive_equilibrium(self):
        with pytest.raises(ValueError, match="positive equilibrium"):
            hopf_oracle(MgParams(beta=1.0, gamma=2.0))


class TestScan:
    def test_pre_hopf_single_point(self, mg):
        diag = bifurcation_scan(partial(mg_rhs, p=mg), [0.1], t_transient=100.0, t_measure=50.0)
        assert len(diag.maxima[0]) == 1
        assert diag.maxima[0][0] == pytest.approx(1.0, abs=1e-6)
        assert not diag.failed[0]

    def test_zero_delay_runs(self, mg):
        diag = bifurcation_scan(partial(mg_rhs, p=mg), [0.0], t_transient=50.0, t_measure=20.0)
        assert diag.maxima[0][0] == pytest.approx(1.0, abs=1e-6)

    def test_divergent_delay_flagged_and_scan_continues(self):
        def unstable(x, x_tau):
            return x * x * 50.0

        diag = bifurcation_scan(unstable, [0.1, 0.2], t_transient=5.0, t_measure=5.0,
                                history_value=2.0)
        assert list(diag.failed) == [True, True]
        assert diag.points().shape == (0, 2)

    def test_parallel_matches_serial(self, mg):
        rhs = partial(mg_rhs, p=mg)
        kw = dict(t_transient=60.0, t_measure=30.0)
        a = bifurcation_scan(rhs, [0.1, 0.3], threads=1, **kw)
        b = bifurcation_scan(rhs, [0.1, 0.3], threads=2, **kw)
        for i in range(2):
            assert np.array_equal(a.maxima[i], b.maxima[i])

    def test_diagram_csv_round_trip(self, mg, tmp_path):
        diag = bifurcation_scan(partial(mg_rhs, p=mg), [0.3], t_transient=100.0, t_measure=50.0)
        path = tmp_path / "diag.csv"
        write_diagram(diag, path)
        pts = read_diagram(path)
        assert np.allclose(pts, diag.points())

    def test_hausdorff(self):
        taus = np.array([0.1, 0.2])
        a = BifurcationDiagram(taus=taus, maxima=[np.array([1.0]), np.array([1.0, 1.2])],
                               minima=[np.array([1.0]), np.array([0.8])],
                               failed=np.zeros(2, bool))
        b = BifurcationDiagram(taus=taus, maxima=[np.array([1.05]), np.array([1.0, 1.2])],
                               minima=[np.array([1.05]), np.array([0.8])],
                               failed=np.zeros(2, bool))
        d = diagram_hausdorff(a, b)
        assert d[0] == pytest.approx(0.05)
        assert d[1] == 0.0


class TestSurface:
    def test_truth_against_itself_is_zero(self, mg):
        model = extract_ndde(make_node_system(MackeyGlassNet(mg), [0.0, 1.0], 1, 30, 0.05))
        grid = surface_error(partial(mg_rhs, p=mg), model, bounds=(0.2, 1.4), resolution=11)
        assert np.max(np.abs(grid.error)) < 1e-14
        assert grid.mean_abs_error() < 1e-14

    def test_degenerate_single_point(self, mg):
        model = extract_ndde(make_node_system(MackeyGlassNet(mg), [0.0, 1.0], 1, 30, 0.05))
        grid = surface_error(partial(mg_rhs, p=mg), model, bounds=(0.5, 0.7), resolution=1)
        assert grid.truth.shape == (1, 1)
        assert grid.truth[0, 0] == mg_rhs(0.6, 0.6, mg)

    def test_requires_zero_first_delay(self, mg):
        model = extract_ndde(make_node_system(MackeyGlassNet(mg), [0.1, 1.0], 1, 30, 0.05))
        with pytest.raises(ValueError, match="delays"):
            surface_error(partial(mg_rhs, p=mg), model)

    def test_csv_round_trip(self, mg, tmp_path):
        model = extract_ndde(make_node_system(MackeyGlassNet(mg), [0.0, 1.0], 1, 30, 0.05))
        grid = surface_error(partial(mg_rhs, p=mg), model, bounds=(0.2, 1.4), resolution=4)
        path = tmp_path / "surf.csv"
        write_surface(grid, path)
        rows = read_surface(path)
        assert rows.shape == (16, 5)
        assert np.allclose(rows[:, 2], grid.truth.ravel())
