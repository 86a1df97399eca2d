import numpy as np
import pytest

from frealab.feasibility import (
    ConstantFeasibility, DatasetWriter, FeasibilityNets, LongitudinalInstance, OfflineData, OfflineTrainer, TransitionRecord,
    expectile_loss, feasibility_advantage, grid_dataset, grid_value_iteration, lfr_membership, qh_target,
    read_dataset, train_offline, validate_dataset, write_dataset,
)
from frealab.feasibility.grid import Axis, ConvergenceError, FeasibleValueGrid, infeasible_counts_by_speed
from frealab.world import Action

# minimizer of E[|0.9 - 1(q - c > 0)| (q - c)^2] over c for q uniform on {0, 1}, by Brent root finding
CONSTANT_EXPECTILE = 0.1


class TestFormulas:
    @pytest.mark.parametrize("u,tau,want", [(1.0, 0.9, 0.09999999999999998), (-1.0, 0.9, 0.9), (0.0, 0.9, 0.0)])
    def test_expectile_loss(self, u, tau, want):
        assert abs(expectile_loss(u, tau) - want) <= 1e-12

    def test_expectile_tau_range(self):
        with pytest.raises(ValueError):
            expectile_loss(1.0, 0.4)

    @pytest.mark.parametrize("h,v,want", [(-1.0, -1.0, -1.0), (18.0, -1.0, 18.0), (-1.0, 5.0, 4.88)])
    def test_qh_target(self, h, v, want):
        assert abs(qh_target(h, v, 0.98) - want) <= 1e-12

    def test_qh_target_terminal(self):
        assert qh_target(-1.0, 5.0, 0.98, done=True) == -1.0
        assert qh_target(-1.0, 5.0, 0.98, done=True, h_next=18.0) == pytest.approx(17.62, abs=1e-12)

    @pytest.mark.parametrize("args,want", [((-1, -1, -1, -1), 0.0), ((-1, 18, -1, 18), 19.0), ((18, -1, 18, -1), 0.0)])
    def test_feasibility_advantage(self, args, want):
        assert feasibility_advantage(*args) == want

    @pytest.mark.parametrize("v,want", [(-1.0, True), (0.0, True), (0.001, False)])
    def test_lfr_membership(self, v, want):
        assert lfr_membership(v) is want


class TestGrid:
    def test_absorbing_violation(self):
        # every state violates: the value is M everywhere
        axes = [Axis("x", 0.0, 1.0, 3)]
        g = grid_value_iteration(axes, lambda p: np.full(len(p), 18.0), lambda p, a: p, 0.98, (0.0,))
        np.testing.assert_array_equal(g.values, 18.0)

    def test_stopping_instance(self):
        inst = LongitudinalInstance(gap_max=50.0, hazard_speeds=None)
        g = inst.solve()
        assert g.iteration_residual <= 1e-6
        assert g.interpolate(np.array([[50.0, 0.0]]))[0] == -1.0
        assert np.all(np.diff(g.values, axis=1) >= 0.0)

    def test_contraction(self):
        g = LongitudinalInstance(gap_max=20.0, hazard_speeds=(0.0, 6.0, 4)).solve()
        r = np.array(g.residuals)
        nz = r[:-1] > 0
        assert np.all(r[1:][nz] <= 0.98 * r[:-1][nz] + 1e-12)

    def test_lower_bound_and_monotone(self):
        g = LongitudinalInstance().solve()
        assert np.all(g.values >= g.h)
        assert np.all(np.diff(infeasible_counts_by_speed(g)) >= 0)

    def test_gamma_range(self):
        with pytest.raises(ValueError):
            LongitudinalInstance().solve(gamma=1.0)

    def test_non_convergence_reports_residual(self):
        with pytest.raises(ConvergenceError) as e:
            LongitudinalInstance().solve(max_iter=2)
        assert e.value.residual > 0

    def test_save_load(self, tmp_path):
        g = LongitudinalInstance(gap_max=10.0, hazard_speeds=None).solve()
        g.save(tmp_path / "g.npz")
        g2 = FeasibleValueGrid.load(tmp_path / "g.npz")
        np.testing.assert_array_equal(g.values, g2.values)
        assert [a.name for a in g2.axes] == ["gap", "av_speed"]
        g.slice_csv(tmp_path / "s.csv", {})
        assert (tmp_path / "s.csv").read_text().startswith("gap,av_speed,value\n")


def _toy_data(n, h_value=-1.0, seed=0):
    rng = np.random.default_rng(seed)
    obs = rng.standard_normal((n, 3))
    return OfflineData(obs, rng.standard_normal((n, 1)), obs + 0.1 * rng.standard_normal((n, 3)),
                       np.full(n, h_value), np.full(n, h_value), np.zeros(n, bool), ["toy"] * n)


class TestOffline:
    def test_all_safe_converges_below_zero(self):
        nets = FeasibilityNets.init(3, 1, np.random.default_rng(0), (32, 32))
        nets, curves = train_offline(_toy_data(512), nets, 1500, 128, np.random.default_rng(1), lr=1e-3)
        assert np.mean(curves.v_mean[-100:]) < 0.0
        assert nets.values(_toy_data(64, seed=5).obs).max() < 0.0

    def test_constant_expectile(self):
        # linear nets: V is a bare bias on a constant input, the frozen target Q reads the action (0 or 1)
        nets = FeasibilityNets.init(1, 1, np.random.default_rng(0), hidden=(), tau=0.9)
        nets.v_net = nets.v_net.map(np.zeros_like)
        nets.q_target.weights[0][:] = [[0.0], [1.0]]
        nets.q_target.biases[0][:] = 0.0
        n = 512
        data = OfflineData(np.zeros((n, 1)), np.tile([0.0, 1.0], n // 2)[:, None], np.zeros((n, 1)),
                           np.full(n, -1.0), np.full(n, -1.0), np.zeros(n, bool))
        trainer = OfflineTrainer.create(nets, 10**9, lr=1e-2)
        for _ in range(3000):
            trainer.step(data, np.arange(n), rho=0.0)
        assert abs(trainer.nets.v_net.biases[0][0] - CONSTANT_EXPECTILE) <= 1e-6

    def test_empty(self):
        nets = FeasibilityNets.init(3, 1, np.random.default_rng(0))
        with pytest.raises(ValueError):
            train_offline(_toy_data(0), nets, 1)

    def test_tau_validation(self):
        with pytest.raises(ValueError):
            FeasibilityNets.init(3, 1, np.random.default_rng(0), tau=0.4)

    def test_grid_dataset_size(self):
        inst = LongitudinalInstance(gap_max=5.0, hazard_speeds=None)
        data = grid_dataset(inst)
        cells = int(np.prod([a.n for a in inst.axes]))
        assert len(data) == cells * len(inst.action_set)

    def test_save_load(self, tmp_path):
        nets = FeasibilityNets.init(3, 1, np.random.default_rng(0), obs_scale=[1, 2, 3])
        nets.save(tmp_path / "f.npz")
        n2, _ = FeasibilityNets.load(tmp_path / "f.npz")
        x = np.random.default_rng(1).standard_normal((5, 3))
        np.testing.assert_array_equal(nets.values(x), n2.values(x))

    def test_constant_stub(self):
        c = ConstantFeasibility()
        assert c.value(np.zeros(6)) == -1.0
        np.testing.assert_array_equal(c.values(np.zeros((4, 5, 6))), -1.0)


def _records(n, tags=("standard", "aggressive", "random"), violating=0):
    rng = np.random.default_rng(0)
    out = []
    for i in range(n):
        h = 18.0 if i < violating else -1.0
        s = rng.standard_normal((5, 6))
        out.append(TransitionRecord(s, Action(rng.uniform(-3, 3), rng.uniform(-0.3, 0.3)), s + 0.1, -1.0, h,
                                    h > 0, tags[i % len(tags)]))
    return out


class TestDataset:
    def test_roundtrip(self, tmp_path):
        recs = _records(7, violating=2)
        write_dataset(tmp_path / "d.csv", recs)
        back = read_dataset(tmp_path / "d.csv")
        assert len(back) == 7
        for a, b in zip(recs, back):
            np.testing.assert_array_equal(a.pseudo_state, b.pseudo_state)
            assert (a.av_action, a.h_next, a.done, a.source_policy) == (b.av_action, b.h_next, b.done, b.source_policy)

    def test_append_only_writer(self, tmp_path):
        p = tmp_path / "d.csv"
        with DatasetWriter(p, (5, 6)) as w:
            for r in _records(3):
                w.write(r)
        with DatasetWriter(p, (5, 6)) as w:
            w.write(_records(1)[0])
        assert len(read_dataset(p)) == 4

    def test_field_count_checked(self, tmp_path):
        p = tmp_path / "d.csv"
        write_dataset(p, _records(2))
        p.write_text(p.read_text() + "standard,0,-1.0\n")
        with pytest.raises(ValueError, match=":4"):
            read_dataset(p)

    def test_record_validation(self):
        with pytest.raises(ValueError):
            TransitionRecord(np.zeros((5, 6)), Action(), np.zeros((5, 6)), 3.0, -1.0, False, "x")

    def test_report_all_safe(self):
        rep = validate_dataset(_records(30))
        assert rep["positive_fraction"] == 0.0 and rep["imbalanced"]
        assert set(rep["sources"]) == {"standard", "aggressive", "random"}
        assert all(abs(f - 1 / 3) < 1e-12 for f in rep["source_fractions"].values())

    def test_report_empty(self):
        with pytest.raises(ValueError):
            validate_dataset([])
