import numpy as np
import pytest

from frealab import nn

from gradcheck import REL_TOL, SHAPES, probe_input_gradient, probe_network


def reference_forward(p: nn.MlpParams, x):
    """Plain-Python loops, no numpy linear algebra."""
    h = [float(v) for v in x]
    n = len(p.weights)
    for layer, (w, b) in enumerate(zip(p.weights, p.biases)):
        out = []
        for j in range(w.shape[1]):
            acc = float(b[j])
            for i in range(w.shape[0]):
                acc += h[i] * float(w[i, j])
            out.append(acc if layer == n - 1 else max(acc, 0.0))
        h = out
    return np.array(h)


class TestForward:
    def test_zero_net(self):
        p = nn.MlpParams.init([4, 8, 3], np.random.default_rng(0)).map(np.zeros_like)
        assert not nn.forward(p, np.arange(4.0)).any()

    def test_identity(self):
        p = nn.MlpParams([3, 3], [np.eye(3)], [np.zeros(3)])
        x = np.array([1.5, -2.0, 0.25])
        np.testing.assert_array_equal(nn.forward(p, x), x)

    def test_matches_reference(self):
        rng = np.random.default_rng(42)
        p = nn.MlpParams.init([6, 64, 64, 1], rng)
        p = p.map(lambda a: a + 0.1 * rng.standard_normal(a.shape))
        x = rng.standard_normal(6)
        assert abs(nn.forward(p, x)[0] - reference_forward(p, x)[0]) <= 1e-12

    def test_batch_invariance(self):
        rng = np.random.default_rng(3)
        p = nn.MlpParams.init([30, 256, 256, 2], rng)
        x = rng.standard_normal((257, 30))
        full = nn.forward(p, x)
        for i in (0, 100, 256):
            np.testing.assert_array_equal(nn.forward(p, x[i]), full[i])

    def test_bad_shape(self):
        p = nn.MlpParams.init([3, 4, 1], np.random.default_rng(0))
        with pytest.raises(ValueError, match="input shape"):
            nn.forward(p, np.zeros(4))


class TestBackward:
    def test_linear_scalar(self):
        p = nn.MlpParams([1, 1], [np.array([[0.7]])], [np.array([0.2])])
        g = nn.backward(p, np.array([3.0]), np.array([1.0]))
        assert g.weights[0][0, 0] == 3.0 and g.biases[0][0] == 1.0

    def test_zero_upstream(self):
        rng = np.random.default_rng(0)
        p = nn.MlpParams.init([5, 16, 2], rng)
        g = nn.backward(p, rng.standard_normal((4, 5)), np.zeros((4, 2)))
        assert all(not a.any() for a in g.arrays())

    @pytest.mark.parametrize("name", sorted(SHAPES))
    def test_finite_differences(self, name):
        assert probe_network(SHAPES[name], 100) <= REL_TOL

    def test_input_gradient(self):
        assert probe_input_gradient([6, 64, 64, 1]) <= REL_TOL


class TestAdam:
    def test_zero_gradient(self):
        p = nn.MlpParams.init([2, 3, 1], np.random.default_rng(0))
        opt = nn.OptimizerState.for_params(p, 1e-2, 100)
        q = nn.adam_step(opt, p, p.zeros_like())
        for a, b in zip(p.arrays(), q.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_first_step_is_lr_times_sign(self):
        w = [np.array([1.0, -2.0, 0.5])]
        opt = nn.OptimizerState.for_params(w, 1e-3, 10**9)
        new = nn.adam_update(opt, w, [np.array([0.3, -4.0, 1e-2])])[0]
        np.testing.assert_allclose(w[0] - new, 1e-3 * np.array([1.0, -1.0, 1.0]), rtol=1e-2)

    def test_converges_on_quadratic(self):
        w = [np.array([0.0])]
        opt = nn.OptimizerState.for_params(w, 0.1, 10**9)
        for _ in range(200):
            w = nn.adam_update(opt, w, [2.0 * (w[0] - 3.0)])
        assert abs(w[0][0] - 3.0) <= 1e-2

    def test_non_finite_rejected(self):
        w = [np.zeros(2)]
        opt = nn.OptimizerState.for_params(w, 0.1, 10)
        with pytest.raises(FloatingPointError):
            nn.adam_update(opt, w, [np.array([np.nan, 0.0])])
        assert opt.step == 0

    def test_shape_mismatch(self):
        opt = nn.OptimizerState.for_params([np.zeros(2)], 0.1, 10)
        with pytest.raises(ValueError):
            nn.adam_update(opt, [np.zeros(2)], [np.zeros(3)])


class TestSchedules:
    def test_linear_lr(self):
        opt = nn.OptimizerState(3e-4, 1000)
        assert nn.linear_lr(opt) == 3e-4
        opt.step = 500
        assert nn.linear_lr(opt) == pytest.approx(1.5e-4, abs=1e-18)
        opt.step = 1000
        assert nn.linear_lr(opt) == 0.0

    def test_soft_update(self):
        rng = np.random.default_rng(0)
        t = nn.MlpParams.init([2, 3, 1], rng).map(np.zeros_like)
        o = t.map(np.ones_like)
        assert all(not a.any() for a in nn.soft_update(t, o, 0.0).arrays())
        assert all((a == 1.0).all() for a in nn.soft_update(t, o, 1.0).arrays())
        assert all(np.allclose(a, 0.005, atol=1e-15) for a in nn.soft_update(t, o, 5e-3).arrays())
        with pytest.raises(ValueError):
            nn.soft_update(t, o, 1.5)

    def test_clip_by_global_norm(self):
        g, norm = nn.clip_by_global_norm([np.array([3.0]), np.array([4.0])], 1.0)
        assert norm == 5.0
        np.testing.assert_allclose([g[0][0], g[1][0]], [0.6, 0.8])


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    p = nn.MlpParams.init([4, 8, 2], rng)
    opt = nn.OptimizerState.for_params(p, 1e-3, 50)
    p = nn.adam_step(opt, p, p.map(lambda a: np.ones_like(a)))
    nn.save_checkpoint(tmp_path / "c.npz", {"net": p}, {"opt": opt}, {"scale": np.arange(3.0)}, {"kind": "x"})
    ck = nn.load_checkpoint(tmp_path / "c.npz")
    for a, b in zip(p.arrays(), ck["nets"]["net"].arrays()):
        np.testing.assert_array_equal(a, b)
    assert ck["optimizers"]["opt"].step == 1
    np.testing.assert_array_equal(ck["optimizers"]["opt"].m[0], opt.m[0])
    assert ck["meta"] == {"kind": "x"}
    with pytest.raises(FileNotFoundError):
        nn.load_checkpoint(tmp_path / "missing.npz")
