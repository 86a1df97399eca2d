import numpy as np
import pytest

from frealab.adversary import (
    ConfigError, Learner, PolicyNet, RolloutBuffer, TrainConfig, ValueNet, compute_advantages, fppo_rs_reward, gae,
    gae_linked, hybrid_advantage, ppo_clip_term, select_mode, squash, update_policy,
)
from frealab.adversary.ppo import TelemetryWriter, config_dict, config_from_dict, policy_gradients
from frealab.feasibility import feasibility_advantage


class TestGae:
    def test_one_step(self):
        adv, target = gae([1.0], [0.0], 0.0, [False], 0.98, 0.5)
        assert adv[0] == 1.0 and target[0] == 1.0

    def test_zeros(self):
        adv, _ = gae(np.zeros(5), np.zeros(5), 0.0, np.zeros(5, bool))
        assert not adv.any()

    def test_brute_force(self):
        rng = np.random.default_rng(7)
        r, v = rng.standard_normal(3), rng.standard_normal(3)
        nv, g, lam = rng.standard_normal(), 0.98, 0.9
        vn = np.append(v[1:], nv)
        delta = r + g * vn - v
        want = [sum((g * lam) ** k * delta[t + k] for k in range(3 - t)) for t in range(3)]
        adv, target = gae(r, v, nv, [False] * 3, g, lam)
        np.testing.assert_allclose(adv, want, rtol=0, atol=1e-14)
        np.testing.assert_allclose(target, np.array(want) + v, atol=1e-14)

    def test_terminal_no_bootstrap(self):
        adv, _ = gae([1.0], [0.5], 100.0, [True])
        assert adv[0] == 0.5

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            gae([1.0, 2.0], [0.0], 0.0, [False])

    def test_interleaved_segments_equal_separate(self):
        rng = np.random.default_rng(1)
        ra, va, rb, vb = (rng.standard_normal(4) for _ in range(4))
        order = ["a", "b", "a", "a", "b", "b", "a", "b"]
        buf = RolloutBuffer(8)
        ia = ib = 0
        for key in order:
            r, v, i = (ra, va, ia) if key == "a" else (rb, vb, ib)
            buf.add(key, obs=np.zeros(1), u=np.zeros(2), log_prob=0.0, reward=r[i], v_r=v[i], h=-1.0, h_next=-1.0,
                    v_h=-1.0, v_h_next=-1.0)
            if key == "a":
                ia += 1
            else:
                ib += 1
        buf.end_segment("a", True)
        buf.end_segment("b", False, 0.7)
        batch = buf.seal()
        adv, _ = gae_linked(batch.reward, batch.v_r, batch.next_v_r, batch.done, batch.seg_end, batch.link, 0.98, 0.98)
        want_a, _ = gae(ra, va, 0.0, [False, False, False, True])
        want_b, _ = gae(rb, vb, 0.7, [False] * 4)
        got_a = adv[[i for i, k in enumerate(order) if k == "a"]]
        got_b = adv[[i for i, k in enumerate(order) if k == "b"]]
        np.testing.assert_allclose(got_a, want_a, atol=1e-14)
        np.testing.assert_allclose(got_b, want_b, atol=1e-14)


class TestFormulas:
    @pytest.mark.parametrize("a_r,a_h,v_s,v_n,want", [(2, -5, -1, -1, 2), (2, -5, -1, 3, -5), (2, -5, 0, 0, 2)])
    def test_hybrid(self, a_r, a_h, v_s, v_n, want):
        assert hybrid_advantage(a_r, a_h, v_s, v_n) == want

    @pytest.mark.parametrize("ratio,adv,want", [(1.0, 2.0, 2.0), (1.5, 1.0, 1.2), (0.5, -1.0, -0.8)])
    def test_clip(self, ratio, adv, want):
        assert abs(ppo_clip_term(ratio, adv, 0.2) - want) <= 1e-12

    @pytest.mark.parametrize("v_h,want", [(-1.0, 1.0), (4.0, 0.5), (10.0, 0.0)])
    def test_fppo_rs(self, v_h, want):
        assert abs(fppo_rs_reward(1.0, v_h, 8.0, 1.0) - want) <= 1e-12

    def test_hybrid_sign_table(self):
        # both endpoints feasible -> reward advantage, otherwise the feasibility advantage
        for v_s in (-1.0, 0.0, 5.0):
            for v_n in (-1.0, 0.0, 5.0):
                for h_s in (-1.0, 18.0):
                    for h_n in (-1.0, 18.0):
                        a_h = feasibility_advantage(h_s, h_n, v_s, v_n)
                        got = hybrid_advantage(0.123, a_h, v_s, v_n)
                        assert got == (0.123 if v_s <= 0 and v_n <= 0 else a_h)


class TestModes:
    def test_ppo_without_feasibility(self):
        assert select_mode("PPO").learns

    def test_frea_needs_feasibility(self):
        with pytest.raises(ConfigError):
            select_mode("FREA")

    def test_unknown(self):
        with pytest.raises(ConfigError):
            select_mode("SAC")

    def test_standard_never_updates(self):
        learner, batch = _learner_and_batch(64)
        before = learner.policy.trunk.copy()
        stats = update_policy(batch, learner, select_mode("Standard"), TrainConfig(batch_size=32, horizon=64),
                              np.random.default_rng(0))
        assert stats.minibatches == 0
        for a, b in zip(before.arrays(), learner.policy.trunk.arrays()):
            np.testing.assert_array_equal(a, b)


def _learner_and_batch(n, obs_dim=6, seed=0, v_h=None):
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(batch_size=min(32, n), horizon=n)
    learner = Learner.create(PolicyNet.init(obs_dim, rng, (16, 16)), ValueNet.init(obs_dim, rng, (16, 16)), cfg)
    buf = RolloutBuffer(n)
    obs = rng.standard_normal((n, obs_dim))
    u, logp = learner.policy.sample(obs, rng)
    vh = rng.uniform(-2, 2, n) if v_h is None else np.full(n, v_h)
    for i in range(n):
        key = i // 10
        buf.add(key, obs=obs[i], u=u[i], log_prob=float(logp[i]), reward=float(rng.standard_normal()),
                v_r=float(learner.critic(obs[i:i + 1])[0]), h=-1.0, h_next=18.0 if i % 17 == 0 else -1.0,
                v_h=float(vh[i]), v_h_next=float(vh[i]))
        if i % 10 == 9 or i == n - 1:
            buf.end_segment(key, i % 20 == 9, 0.1)
    return learner, buf.seal()


class TestUpdate:
    def test_first_ratios_exactly_one(self):
        learner, batch = _learner_and_batch(64)
        cfg = TrainConfig(batch_size=32, horizon=64)
        stats = update_policy(batch, learner, select_mode("PPO"), cfg, np.random.default_rng(0))
        assert stats.first_ratio_max_dev == 0.0

    def test_zero_advantage_is_entropy_only(self):
        learner, batch = _learner_and_batch(32)
        cfg = TrainConfig(batch_size=32, horizon=32)
        _, g_trunk, g_log_std, _ = policy_gradients(learner.policy, batch.obs, batch.u, batch.log_prob, np.zeros(32), cfg)
        assert all(not a.any() for a in g_trunk.arrays())
        np.testing.assert_array_equal(g_log_std, -cfg.ent_coef)

    def test_policy_gradient_matches_finite_differences(self):
        learner, batch = _learner_and_batch(32)
        cfg = TrainConfig(batch_size=32, horizon=32)
        pol = learner.policy
        rng = np.random.default_rng(3)
        adv = rng.standard_normal(32)
        # move away from theta_k so some ratios clip
        pol.trunk = pol.trunk.map(lambda a: a + 0.05 * rng.standard_normal(a.shape))
        _, g, g_ls, _ = policy_gradients(pol, batch.obs, batch.u, batch.log_prob, adv, cfg)

        def loss():
            return policy_gradients(pol, batch.obs, batch.u, batch.log_prob, adv, cfg)[0]

        arrays, grads = pol.trunk.arrays(), g.arrays()
        for _ in range(30):
            k = int(rng.integers(len(arrays)))
            idx = tuple(int(rng.integers(s)) for s in arrays[k].shape)
            old = arrays[k][idx]
            arrays[k][idx] = old + 1e-6
            lp = loss()
            arrays[k][idx] = old - 1e-6
            lm = loss()
            arrays[k][idx] = old
            fd = (lp - lm) / 2e-6
            assert abs(fd - grads[k][idx]) <= 1e-6 + 1e-4 * abs(fd)
        for j in range(2):
            old = pol.log_std[j]
            pol.log_std[j] = old + 1e-6
            lp = loss()
            pol.log_std[j] = old - 1e-6
            lm = loss()
            pol.log_std[j] = old
            assert abs((lp - lm) / 2e-6 - g_ls[j]) <= 1e-6

    def test_frea_with_constant_stub_equals_ppo(self):
        la, batch = _learner_and_batch(64, v_h=-1.0)
        lb, _ = _learner_and_batch(64, v_h=-1.0)
        cfg = TrainConfig(batch_size=32, horizon=64)
        update_policy(batch, la, select_mode("PPO"), cfg, np.random.default_rng(9))
        update_policy(batch, lb, select_mode("FREA", object()), cfg, np.random.default_rng(9))
        for a, b in zip(la.policy.trunk.arrays() + la.critic.params.arrays(),
                        lb.policy.trunk.arrays() + lb.critic.params.arrays()):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(la.policy.log_std, lb.policy.log_std)

    def test_frea_uses_negated_feasibility_advantage(self):
        _, batch = _learner_and_batch(40)
        cfg = TrainConfig(batch_size=20, horizon=40)
        a_ppo, _ = compute_advantages(batch, select_mode("PPO"), cfg)
        a_frea, _ = compute_advantages(batch, select_mode("FREA", object()), cfg)
        inside = (batch.v_h <= 0) & (batch.v_h_next <= 0)
        np.testing.assert_array_equal(a_frea[inside], a_ppo[inside])
        a_h = feasibility_advantage(batch.h, batch.h_next, batch.v_h, batch.v_h_next)
        np.testing.assert_array_equal(a_frea[~inside], -a_h[~inside])

    def test_non_finite_rolls_back(self):
        learner, batch = _learner_and_batch(32)
        batch.reward[3] = np.nan
        before = learner.policy.trunk.copy()
        stats = update_policy(batch, learner, select_mode("PPO"), TrainConfig(batch_size=16, horizon=32),
                              np.random.default_rng(0))
        assert stats.aborted
        for a, b in zip(before.arrays(), learner.policy.trunk.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_bandit_converges(self):
        rng = np.random.default_rng(0)
        cfg = TrainConfig(batch_size=64, horizon=256, lr=3e-3, total_steps=50 * 256, ent_coef=0.0)
        learner = Learner.create(PolicyNet.init(1, rng, (16,)), ValueNet.init(1, rng, (16,)), cfg)
        spec = select_mode("PPO")
        obs = np.zeros((256, 1))
        for _ in range(50):
            u, logp = learner.policy.sample(obs, rng)
            reward = -(squash(u)[:, 0] - 0.5) ** 2
            buf = RolloutBuffer(256)
            for i in range(256):
                buf.add(i, obs=obs[i], u=u[i], log_prob=float(logp[i]), reward=float(reward[i]),
                        v_r=float(learner.critic(obs[:1])[0]), h=-1.0, h_next=-1.0, v_h=-1.0, v_h_next=-1.0)
                buf.end_segment(i, True)
            update_policy(buf.seal(), learner, spec, cfg, rng)
        assert abs(learner.policy.deterministic(obs[:1])[0, 0] - 0.5) <= 0.05


class TestPolicy:
    def test_actions_in_bounds_for_wild_parameters(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = PolicyNet.init(6, rng, (8,))
            p.trunk = p.trunk.map(lambda a: 50.0 * rng.standard_normal(a.shape))
            u, logp = p.sample(rng.standard_normal((64, 6)) * 100, rng)
            a = squash(u)
            assert np.all(np.abs(a[:, 0]) <= 3.0) and np.all(np.abs(a[:, 1]) <= 0.3)
            assert np.all(np.isfinite(logp))

    def test_log_prob_integrates_to_one(self):
        # squashed density in action space integrates to one along each axis
        p = PolicyNet.init(1, np.random.default_rng(0), (4,))
        p.log_std[:] = np.log([0.7, 0.4])
        mu = p.mean(np.zeros((1, 1)))[0]
        a0 = np.linspace(-3, 3, 20001)[1:-1]
        u0 = np.arctanh(a0 / 3.0)
        u = np.stack([u0, np.full_like(u0, mu[1])], 1)
        dens = np.exp(p.log_prob(np.zeros((len(u), 1)), u))
        # divide out the fixed second coordinate's marginal density
        sd = 0.4
        a1 = 0.3 * np.tanh(mu[1])
        m1 = np.exp(-0.5 * 0 - np.log(sd) - 0.5 * np.log(2 * np.pi)) / (0.3 * (1 - np.tanh(mu[1]) ** 2))
        assert np.trapezoid(dens / m1, a0) == pytest.approx(1.0, abs=2e-3)
        assert abs(a1) <= 0.3


def test_config_roundtrip_and_validation(tmp_path):
    cfg = TrainConfig(total_steps=4096, seed=3)
    assert config_from_dict(config_dict(cfg)) == cfg
    with pytest.raises(ConfigError):
        config_from_dict({"nope": 1})
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=4096, horizon=2048)
    w = TelemetryWriter(tmp_path / "t.csv")
    w.write({"step": 1, "episode_return": 0.5})
    w.close()
    assert (tmp_path / "t.csv").read_text().splitlines()[0].startswith("step")
