import numpy as np
import pytest

from dnc_rl import envs, nn, policy, trpo
from dnc_rl.envs import EpisodeRecord, MdpSpec, StepResult, collect_trajectories
from dnc_rl.errors import EmptyBatchError
from dnc_rl.policy import GaussianPolicy, make_policy, policy_params, policy_with_params
from dnc_rl.rng import Rng
from dnc_rl.trpo import (
    AdvantageBatch,
    TrpoConfig,
    ValueFunction,
    compute_advantages,
    conjugate_gradient,
    episode_returns_to_go,
    fisher_vector_product,
    fit_value_function,
    gae_episode,
    make_value_function,
    surrogate_loss,
    surrogate_loss_value,
    trpo_step,
)


class BanditEnv:
    """One-step env with reward -(a - 3)^2; the optimum is a = 3."""

    name = "bandit"

    def __init__(self):
        self.spec = MdpSpec(1, 1, 1, np.full(1, -10.0), np.full(1, 10.0))
        self.reward_range = (-200.0, 0.0)

    def reset(self, rng):
        return np.zeros(1)

    def step(self, state, action):
        a = float(np.clip(action[0], -10, 10))
        return StepResult(np.zeros(1), -((a - 3.0) ** 2), True)

    def success(self, episode):
        return abs(float(episode.actions[-1][0]) - 3.0) < 0.1


def make_episode(seed, t_len=12, state_dim=3, action_dim=2, terminated=False):
    rng = Rng(seed)
    return EpisodeRecord(
        rng.normal((t_len + 1, state_dim)),
        rng.normal((t_len, action_dim)),
        rng.normal(t_len),
        rng.normal(t_len),
        terminated=terminated,
    )


def gae_double_loop(rewards, values, mask_last, gamma, lam):
    """Brute-force A_t = sum_l (gamma*lam)^l * delta_{t+l}."""
    t_len = len(rewards)
    mask = np.ones(t_len)
    mask[-1] = mask_last
    deltas = [
        rewards[t] + gamma * values[t + 1] * mask[t] - values[t] for t in range(t_len)
    ]
    out = np.zeros(t_len)
    for t in range(t_len):
        for l in range(t_len - t):
            out[t] += (gamma * lam) ** l * deltas[t + l]
    return out


class TestAdvantages:
    def test_lambda_zero_gives_td_errors(self):
        ep = make_episode(0, terminated=True)
        values = Rng(1).normal(len(ep) + 1)
        adv = gae_episode(ep, values, 0.99, 0.0)
        mask = np.ones(len(ep))
        mask[-1] = 0.0
        deltas = ep.rewards + 0.99 * values[1:] * mask - values[:-1]
        np.testing.assert_allclose(adv, deltas, atol=1e-12)

    def test_lambda_one_zero_values_gives_returns_to_go(self):
        ep = make_episode(2, terminated=True)
        values = np.zeros(len(ep) + 1)
        adv = gae_episode(ep, values, 0.9, 1.0)
        expected = np.zeros(len(ep))
        acc = 0.0
        for t in range(len(ep) - 1, -1, -1):
            acc = ep.rewards[t] + 0.9 * acc
            expected[t] = acc
        np.testing.assert_allclose(adv, expected, atol=1e-12)

    @pytest.mark.parametrize("terminated", [True, False])
    def test_matches_double_loop_oracle(self, terminated):
        ep = make_episode(3, t_len=17, terminated=terminated)
        values = Rng(4).normal(len(ep) + 1)
        adv = gae_episode(ep, values, 0.97, 0.95)
        oracle = gae_double_loop(
            ep.rewards, values, 0.0 if terminated else 1.0, 0.97, 0.95
        )
        np.testing.assert_allclose(adv, oracle, atol=1e-12)

    def test_batch_is_normalized(self):
        eps = [make_episode(s, terminated=True) for s in range(4)]
        vf = make_value_function(3, (8,), Rng(5))
        batch = compute_advantages(eps, vf, TrpoConfig())
        assert batch.advantages.mean() == pytest.approx(0.0, abs=1e-12)
        assert batch.advantages.std() == pytest.approx(1.0, abs=1e-9)

    def test_empty_raises(self):
        vf = make_value_function(3, (8,), Rng(6))
        with pytest.raises(EmptyBatchError):
            compute_advantages([], vf, TrpoConfig())


class TestValueFunction:
    def constant_reward_episodes(self, n=6, t_len=20, reward=2.0):
        """Each episode pays a constant reward, readable from the state.

        Episodes are time-limit truncations, so the bootstrapped return
        target converges to the state-constant value r / (1 - gamma).
        """
        eps = []
        for s in range(n):
            rng = Rng(s)
            r = reward * (1.0 + 0.5 * s)
            states = np.column_stack(
                [np.full(t_len + 1, r), 0.1 * rng.normal(t_len + 1)]
            )
            eps.append(
                EpisodeRecord(
                    states,
                    np.zeros((t_len, 1)),
                    np.full(t_len, r),
                    np.zeros(t_len),
                    terminated=False,
                )
            )
        return eps

    def test_constant_returns_learned(self):
        cfg = TrpoConfig(
            discount=0.9, vf_hidden=(16,), vf_train_steps=50, vf_step_size=0.05
        )
        eps = self.constant_reward_episodes()
        vf = make_value_function(2, (16,), Rng(7))
        for _ in range(60):  # long training = repeated fits
            vf = fit_value_function(vf, eps, cfg)
        states = np.concatenate([ep.states[:-1] for ep in eps])
        targets = np.concatenate(
            [episode_returns_to_go(ep, vf, cfg.discount) for ep in eps]
        )
        mse = float(((vf.predict(states) - targets) ** 2).mean())
        assert mse < 0.1 * targets.var()
        # limit value of a constant reward stream is r / (1 - gamma)
        for ep in eps:
            limit = ep.rewards[0] / (1.0 - cfg.discount)
            pred = float(vf.predict(ep.states[:1])[0])
            assert pred == pytest.approx(limit, rel=0.15)

    def test_zero_rewards_give_zero_values(self):
        cfg = TrpoConfig(vf_hidden=(8,), vf_train_steps=50)
        eps = self.constant_reward_episodes(reward=0.0)
        vf = make_value_function(2, (8,), Rng(8))
        preds = []
        states = np.concatenate([ep.states[:-1] for ep in eps])
        for _ in range(10):
            vf = fit_value_function(vf, eps, cfg)
            preds.append(np.abs(vf.predict(states)).max())
        assert preds[-1] < 1e-3
        assert preds[-1] < preds[0]  # shrinking toward zero

    def test_fitting_reduces_mse(self):
        cfg = TrpoConfig(vf_hidden=(8,), vf_train_steps=50, vf_step_size=0.01)
        eps = [make_episode(s, terminated=True) for s in range(5)]
        vf = make_value_function(3, (8,), Rng(9))
        targets = np.concatenate(
            [episode_returns_to_go(ep, vf, cfg.discount) for ep in eps]
        )
        states = np.concatenate([ep.states[:-1] for ep in eps])
        before = float(((vf.predict(states) - targets) ** 2).mean())
        fitted = fit_value_function(vf, eps, cfg)
        after = float(((fitted.predict(states) - targets) ** 2).mean())
        assert after < before

    def test_truncated_episode_bootstraps_tail(self):
        ep = make_episode(10, terminated=False)
        vf = make_value_function(3, (8,), Rng(11))
        rtg = episode_returns_to_go(ep, vf, 0.9)
        tail = float(vf.predict(ep.states[-1:])[0])
        expected = ep.rewards[-1] + 0.9 * tail
        assert rtg[-1] == pytest.approx(expected, rel=1e-12)


class TestSurrogate:
    def setup_batch(self, seed=12, n=40):
        rng = Rng(seed)
        pol = make_policy(3, 2, (6,), rng.child(0))
        states = rng.child(1).normal((n, 3))
        actions = np.stack(
            [policy.sample_action(pol, s, rng.child(2, i)).action for i, s in enumerate(states)]
        )
        old_logp = policy.log_density_batch(pol, states, actions)
        adv = rng.child(3).normal(n)
        adv = (adv - adv.mean()) / adv.std()
        return pol, AdvantageBatch(states, actions, old_logp, adv)

    def test_unchanged_policy_zero_loss(self):
        pol, batch = self.setup_batch()
        loss, _ = surrogate_loss(pol, batch)
        assert abs(loss) < 1e-12

    def test_gradient_matches_finite_differences(self):
        pol, batch = self.setup_batch()
        # perturb so the ratio is not identically 1
        theta = policy_params(pol) + 0.01 * Rng(13).normal(pol.n_params)
        pol2 = policy_with_params(pol, theta)
        _, grad = surrogate_loss(pol2, batch)
        t0 = policy_params(pol2)

        def f(v):
            return surrogate_loss_value(policy_with_params(pol2, v), batch)

        eps = 1e-6
        fd = np.zeros_like(t0)
        for i in range(len(t0)):
            e = np.zeros_like(t0)
            e[i] = eps
            fd[i] = (f(t0 + e) - f(t0 - e)) / (2 * eps)
        assert np.abs(fd - grad).max() / max(np.abs(fd).max(), 1e-10) < 1e-5

    def test_zero_advantages_zero_gradient(self):
        pol, batch = self.setup_batch()
        zeroed = AdvantageBatch(
            batch.states, batch.actions, batch.old_log_probs, np.zeros(len(batch))
        )
        loss, grad = surrogate_loss(pol, zeroed)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)


class TestFisherVectorProduct:
    def tiny_policy(self, seed=14):
        # 1-2-1 net: 7 mean params + 1 log_std = 8 total, small enough
        # for an explicit Hessian
        rng = Rng(seed)
        pol = make_policy(1, 1, (2,), rng)
        return pol, rng.child(1).normal((15, 1))

    def test_zero_vector(self):
        pol, states = self.tiny_policy()
        out = fisher_vector_product(pol, states, np.zeros(pol.n_params), 0.0)
        np.testing.assert_array_equal(out, 0.0)

    def test_matches_explicit_hessian(self):
        pol, states = self.tiny_policy()
        n = pol.n_params
        theta0 = policy_params(pol)
        h = 1e-5
        hess = np.zeros((n, n))
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            _, gp = policy.kl_grad_wrt_second(
                pol, policy_with_params(pol, theta0 + e), states
            )
            _, gm = policy.kl_grad_wrt_second(
                pol, policy_with_params(pol, theta0 - e), states
            )
            hess[:, i] = (gp - gm) / (2 * h)
        rng = Rng(15)
        for _ in range(5):
            v = rng.normal(n)
            hv = fisher_vector_product(pol, states, v, 0.0)
            expected = hess @ v
            assert np.abs(hv - expected).max() / np.abs(expected).max() < 1e-4

    def test_symmetry_and_psd(self):
        pol, states = self.tiny_policy(16)
        rng = Rng(17)
        for _ in range(10):
            u, v = rng.normal(pol.n_params), rng.normal(pol.n_params)
            hu = fisher_vector_product(pol, states, u, 0.0)
            hv = fisher_vector_product(pol, states, v, 0.0)
            assert abs(u @ hv - v @ hu) < 1e-8
            assert v @ hv >= -1e-8


class TestConjugateGradient:
    def test_identity_converges_in_one_iteration(self):
        b = Rng(18).normal(6)
        x, res = conjugate_gradient(lambda v: v, b, 1)
        np.testing.assert_allclose(x, b, rtol=1e-12)
        assert res < 1e-12

    def test_random_spd_matches_direct_solve(self):
        rng = Rng(19)
        m = rng.normal((10, 10))
        h = m @ m.T + 0.5 * np.eye(10)
        b = rng.normal(10)
        x, res = conjugate_gradient(lambda v: h @ v, b, 50)
        np.testing.assert_allclose(x, np.linalg.solve(h, b), atol=1e-6)
        assert res < 1e-6

    def test_zero_rhs(self):
        x, res = conjugate_gradient(lambda v: v, np.zeros(4), 10)
        np.testing.assert_array_equal(x, 0.0)
        assert res == 0.0


class TestTrpoStep:
    def collect_batch(self, env, pol, vf, cfg, rng, n=100):
        eps = collect_trajectories(env, pol, None, n, rng)
        return compute_advantages(eps, vf, cfg)

    def test_accepted_step_respects_contract(self):
        env = BanditEnv()
        cfg = TrpoConfig(max_kl=0.05, vf_hidden=(8,), vf_train_steps=20, vf_step_size=0.05)
        rng = Rng(20)
        pol = make_policy(1, 1, (8,), rng.child(0))
        vf = make_value_function(1, (8,), rng.child(1))
        accepted = 0
        for it in range(10):
            batch = self.collect_batch(env, pol, vf, cfg, rng.child(2, it))
            new_pol, diag = trpo_step(pol, batch, cfg)
            if diag["accepted"]:
                accepted += 1
                measured = float(
                    policy.kl_batch(pol, new_pol, batch.states).mean()
                )
                assert measured <= cfg.max_kl + 1e-12
                assert diag["surrogate_after"] < diag["surrogate_before"]
            pol = new_pol
        assert accepted > 0

    def test_bandit_reaches_optimum(self):
        env = BanditEnv()
        cfg = TrpoConfig(max_kl=0.05, vf_hidden=(8,), vf_train_steps=20, vf_step_size=0.05)
        rng = Rng(21)
        pol = make_policy(1, 1, (8,), rng.child(0))
        vf = make_value_function(1, (8,), rng.child(1))
        for it in range(200):
            eps = collect_trajectories(env, pol, None, 100, rng.child(2, it))
            batch = compute_advantages(eps, vf, cfg)
            pol, _ = trpo_step(pol, batch, cfg)
            vf = fit_value_function(vf, eps, cfg)
        mean_action = float(policy.mean_batch(pol, np.zeros((1, 1)))[0, 0])
        assert abs(mean_action - 3.0) < 0.1

    def test_rejected_step_returns_old_policy(self):
        # zero advantages make improvement impossible
        rng = Rng(22)
        pol = make_policy(2, 1, (6,), rng.child(0))
        states = rng.child(1).normal((30, 2))
        actions = np.stack(
            [policy.sample_action(pol, s, rng.child(2, i)).action for i, s in enumerate(states)]
        )
        batch = AdvantageBatch(
            states,
            actions,
            policy.log_density_batch(pol, states, actions),
            np.zeros(30),
        )
        new_pol, diag = trpo_step(pol, batch, TrpoConfig())
        assert not diag["accepted"]
        np.testing.assert_array_equal(policy_params(new_pol), policy_params(pol))

    def test_diagnostics_keys_fixed(self):
        pol = make_policy(1, 1, (4,), Rng(23))
        batch = AdvantageBatch(
            np.zeros((5, 1)), np.zeros((5, 1)),
            policy.log_density_batch(pol, np.zeros((5, 1)), np.zeros((5, 1))),
            np.ones(5),
        )
        _, diag = trpo_step(pol, batch, TrpoConfig())
        assert {
            "surrogate_before", "surrogate_after", "mean_kl",
            "cg_residual", "backtracks", "accepted",
        } <= set(diag)
