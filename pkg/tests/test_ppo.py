import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matl import numerics as nx
from matl.envs import EnvConfig, env_reset, env_step
from matl.networks import ActorParams, CriticParams, actor_forward, actor_logits
from matl.numerics import Adam, Tensor
from matl.ppo import (
    PpoConfig,
    RolloutBuffer,
    TrainingDivergence,
    add_rate_for_epoch,
    collect_rollouts,
    compute_gae,
    evaluate_greedy,
    evaluate_uniform_random,
    gae,
    init_networks,
    normalize,
    ppo_loss,
    ppo_update,
    sample_actions,
    train,
)

from gradcheck import numeric_grad, rel_error
from test_networks import np_critic, np_mlp


def tiny_env(**kw):
    base = dict(env_kind="predator_prey", n_agents=2, grid_dim=5, episode_length=10, n_prey=1)
    base.update(kw)
    return EnvConfig(**base)


def tiny_nets(env, seed=0):
    return init_networks(env, seed, hidden=(8,), embed_dim=6)


# ---------------------------------------------------------------- GAE

def brute_force_gae(rewards, values, dones, gamma, lam):
    """A_t = sum_l (prod_{k=t}^{l-1} gamma*lam*(1-d_k)) * delta_l, written as two nested loops."""
    T = len(rewards)
    deltas = []
    for t in range(T):
        v_next = values[t + 1] if t + 1 < T else 0.0
        deltas.append(rewards[t] + gamma * v_next * (1 - dones[t]) - values[t])
    out = []
    for t in range(T):
        total = 0.0
        for l in range(t, T):
            coef = 1.0
            for k in range(t, l):
                coef *= gamma * lam * (1 - dones[k])
            total += coef * deltas[l]
        out.append(total)
    return np.array(out)


@pytest.mark.parametrize("seed", range(25))
def test_gae_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=5), rng.normal(size=5)
    d = (rng.random(5) < 0.3).astype(float)
    gamma, lam = rng.uniform(0.5, 1.0), rng.uniform(0.0, 1.0)
    got = gae(r[:, None], v[:, None], d[:, None], gamma, lam)[:, 0]
    assert np.max(np.abs(got - brute_force_gae(r, v, d, gamma, lam))) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.booleans()), min_size=1, max_size=12),
       st.floats(0.1, 1.0))
def test_lambda_zero_is_one_step_td(rows, gamma):
    r = np.array([x[0] for x in rows])[:, None]
    v = np.array([x[1] for x in rows])[:, None]
    d = np.array([x[2] for x in rows], dtype=float)[:, None]
    v_next = np.vstack([v[1:], [[0.0]]])
    expected = r + gamma * v_next * (1.0 - d) - v
    assert np.array_equal(gae(r, v, d, gamma, 0.0), expected)


def test_undiscounted_zero_values_gives_reward_to_go():
    r = np.array([[1.0], [-2.0], [0.5], [3.0]])
    adv = gae(r, np.zeros_like(r), np.zeros_like(r), 1.0, 1.0)
    assert np.array_equal(adv[:, 0], np.cumsum(r[::-1, 0])[::-1])


def test_single_step_base_case():
    r, v = np.array([[2.0], [0.0]]), np.array([[0.5], [1.5]])
    adv = gae(r, v, np.zeros_like(r), 0.9, 0.7)
    assert adv[0, 0] == pytest.approx(2.0 + 0.9 * 1.5 - 0.5 + 0.9 * 0.7 * (0.0 - 1.5), abs=1e-15)
    assert adv[1, 0] == 0.0 - 1.5


def test_done_cuts_bootstrap_per_agent():
    r = np.array([[1.0, 1.0], [1.0, 1.0]])
    v = np.array([[0.0, 0.0], [5.0, 5.0]])
    d = np.array([[1.0, 0.0], [0.0, 0.0]])
    adv = gae(r, v, d, 1.0, 1.0)
    assert adv[0].tolist() == [1.0, 1.0 + 5.0 + (1.0 - 5.0)]


def test_compute_gae_fills_returns():
    rng = np.random.default_rng(0)
    buf = RolloutBuffer(np.zeros((4, 2, 3)), np.zeros((4, 2), dtype=int), np.zeros((4, 2)),
                        rng.normal(size=(4, 2)), rng.normal(size=(4, 2)), np.zeros((4, 2), dtype=bool),
                        np.ones((4, 2), dtype=bool))
    compute_gae(buf, 0.99, 0.95)
    assert np.array_equal(buf.returns, buf.advantages + buf.values)


def test_normalize_uses_active_samples_only():
    adv = np.array([[1.0, 100.0], [3.0, -50.0]])
    mask = np.array([[True, False], [True, False]])
    out = normalize(adv, mask)
    assert out[mask].mean() == pytest.approx(0.0, abs=1e-12)
    assert out[mask].std() == pytest.approx(1.0, abs=1e-6)


# ---------------------------------------------------------------- loss oracles

def _logsumexp(row):
    m = max(row)
    return m + math.log(sum(math.exp(x - m) for x in row))


def scalar_loss_oracle(actor, critic, obs, actions, old_logp, adv, returns, mask, cfg):
    """Per-sample Python arithmetic over a [B, n, d] batch."""
    logits = np_mlp([w.data for w in actor.mlp.weights], [b.data for b in actor.mlp.biases], obs)
    B, n = actions.shape
    count = float(mask.sum())
    pol = val = ent = 0.0
    for t in range(B):
        values = np_critic(critic, obs[t])
        for i in range(n):
            if not mask[t, i]:
                continue
            row = list(logits[t, i])
            lse = _logsumexp(row)
            logp = [x - lse for x in row]
            ratio = math.exp(logp[actions[t, i]] - old_logp[t, i])
            clipped = min(max(ratio, 1 - cfg.clip_epsilon), 1 + cfg.clip_epsilon)
            pol += min(ratio * adv[t, i], clipped * adv[t, i])
            val += (values[i] - returns[t, i]) ** 2
            ent += -sum(math.exp(lp) * lp for lp in logp)
    return -pol / count + cfg.value_coef * val / count - cfg.entropy_coef * ent / count


def fixed_batch(seed, B=2, n=2, d=77, k=5):
    rng = np.random.default_rng(seed)
    obs = rng.normal(size=(B, n, d))
    actions = rng.integers(k, size=(B, n))
    old_logp = np.log(rng.uniform(0.05, 0.5, size=(B, n)))
    adv = rng.normal(size=(B, n))
    returns = rng.normal(size=(B, n))
    return obs, actions, old_logp, adv, returns


@pytest.mark.parametrize("seed", range(5))
def test_loss_matches_scalar_oracle_on_four_samples(seed):
    actor = ActorParams.init(77, 5, hidden=(16, 16), seed=seed)
    critic = CriticParams.init(77, embed_dim=8, head_hidden=(8,), seed=seed + 1)
    for _, t in actor.named_parameters():
        t.data += np.random.default_rng(seed + 50).normal(scale=0.3, size=t.shape)
    obs, actions, old_logp, adv, returns = fixed_batch(seed)
    mask = np.ones((2, 2), dtype=bool)
    cfg = PpoConfig()
    loss, _ = ppo_loss(actor, critic, obs, actions, old_logp, adv, returns, mask, cfg)
    oracle = scalar_loss_oracle(actor, critic, obs, actions, old_logp, adv, returns, mask, cfg)
    assert abs(loss.item() - oracle) < 1e-10


def test_masked_samples_do_not_count():
    actor = ActorParams.init(77, 5, hidden=(8,), seed=1)
    critic = CriticParams.init(77, embed_dim=6, head_hidden=(6,), seed=2)
    obs, actions, old_logp, adv, returns = fixed_batch(3, B=3)
    mask = np.array([[True, False], [False, True], [True, True]])
    cfg = PpoConfig()
    loss, _ = ppo_loss(actor, critic, obs, actions, old_logp, adv, returns, mask, cfg)
    oracle = scalar_loss_oracle(actor, critic, obs, actions, old_logp, adv, returns, mask, cfg)
    assert abs(loss.item() - oracle) < 1e-10


def _current_logp(actor, obs, actions):
    probs = actor_forward(actor, obs.reshape(-1, obs.shape[-1])).data.reshape(*obs.shape[:-1], -1)
    return np.log(np.take_along_axis(probs, actions[..., None], axis=-1)[..., 0])


def test_ratio_one_surrogate_is_mean_advantage():
    actor = ActorParams.init(77, 5, hidden=(8,), seed=4)
    critic = CriticParams.init(77, embed_dim=6, head_hidden=(6,), seed=5)
    obs, actions, _, adv, returns = fixed_batch(6)
    old_logp = _current_logp(actor, obs, actions)
    mask = np.ones((2, 2), dtype=bool)
    _, stats = ppo_loss(actor, critic, obs, actions, old_logp, adv, returns, mask, PpoConfig())
    assert stats["policy_loss"] == pytest.approx(-adv.mean(), abs=1e-12)
    assert stats["clip_fraction"] == 0.0


def test_clip_arithmetic_single_sample():
    actor = ActorParams.init(77, 5, hidden=(8,), seed=4)
    critic = CriticParams.init(77, embed_dim=6, head_hidden=(6,), seed=5)
    obs, actions, _, _, returns = fixed_batch(7, B=1, n=1)
    old_logp = _current_logp(actor, obs, actions) - math.log(1.5)
    cfg = PpoConfig(clip_epsilon=0.2)
    _, stats = ppo_loss(actor, critic, obs, actions, old_logp, np.ones((1, 1)), returns,
                        np.ones((1, 1), dtype=bool), cfg)
    assert stats["policy_loss"] == pytest.approx(-1.2, abs=1e-12)
    assert stats["clip_fraction"] == 1.0


def test_infinite_clip_gradient_equals_vanilla_policy_gradient():
    actor = ActorParams.init(77, 5, hidden=(8,), seed=8)
    critic = CriticParams.init(77, embed_dim=6, head_hidden=(6,), seed=9)
    obs, actions, _, adv, returns = fixed_batch(10, B=3)
    mask = np.ones((3, 2), dtype=bool)
    old_logp = _current_logp(actor, obs, actions)
    cfg = PpoConfig(clip_epsilon=math.inf, value_coef=0.0, entropy_coef=0.0)
    loss, _ = ppo_loss(actor, critic, obs, actions, old_logp, adv, returns, mask, cfg)
    for p in actor.parameters():
        p.grad = None
    loss.backward()
    ppo_grads = [p.grad.copy() for p in actor.parameters()]

    for p in actor.parameters():
        p.grad = None
    logp = nx.take_last(nx.log_softmax_rows(actor_logits(actor, Tensor(obs))), actions)
    vanilla = nx.scale(nx.mean(nx.mul(logp, Tensor(adv))), -1.0)
    vanilla.backward()
    for g_ppo, p in zip(ppo_grads, actor.parameters()):
        assert np.max(np.abs(g_ppo - p.grad)) < 1e-8


@pytest.mark.parametrize("seed", range(3))
def test_full_loss_gradient_matches_finite_differences(seed):
    actor = ActorParams.init(77, 5, hidden=(6,), seed=seed)
    critic = CriticParams.init(77, embed_dim=4, d_k=3, d_v=3, head_hidden=(4,), seed=seed + 1)
    obs, actions, _, adv, returns = fixed_batch(seed + 20)
    # keep every ratio well inside the clip band so the loss is smooth around the point
    old_logp = _current_logp(actor, obs, actions) + np.random.default_rng(seed).uniform(-0.05, 0.05, (2, 2))
    mask = np.ones((2, 2), dtype=bool)
    cfg = PpoConfig()

    def build():
        return ppo_loss(actor, critic, obs, actions, old_logp, adv, returns, mask, cfg)[0]

    params = actor.parameters() + critic.parameters()
    for p in params:
        p.grad = None
    build().backward()
    for p in params:
        def f(x, p=p):
            saved = p.data
            p.data = x
            try:
                with nx.no_grad():
                    return build().item()
            finally:
                p.data = saved
        assert rel_error(p.grad, numeric_grad(f, p.data)) < 1e-3


# ---------------------------------------------------------------- rollouts

def test_zero_actor_samples_uniformly():
    env = EnvConfig(env_kind="predator_prey", n_agents=2, grid_dim=7, episode_length=50)
    actor, critic = tiny_nets(env)
    for p in actor.parameters():
        p.data[...] = 0.0
    buf = collect_rollouts(actor, critic, env, 10, np.random.default_rng(0))
    counts = np.bincount(buf.actions.reshape(-1), minlength=5)
    assert counts.sum() == 1000
    chi2 = float(((counts - 200.0) ** 2 / 200.0).sum())
    assert chi2 < 18.47  # 0.999 quantile of chi-square with 4 degrees of freedom


def test_buffer_length_without_early_termination():
    env = EnvConfig(env_kind="traffic_junction", n_agents=3, grid_dim=7, episode_length=12,
                    tj_roads=1, tj_two_way=False)
    actor, critic = tiny_nets(env)
    buf = collect_rollouts(actor, critic, env, 4, np.random.default_rng(1))
    assert len(buf) == 4 * 12 * 3
    assert buf.observations.shape == (48, 3, 16)
    for name in ("actions", "log_probs", "rewards", "values", "dones", "active"):
        assert getattr(buf, name).shape == (48, 3)


def test_recorded_log_probs_recompute():
    env = tiny_env()
    actor, critic = tiny_nets(env, seed=3)
    buf = collect_rollouts(actor, critic, env, 2, np.random.default_rng(2))
    flat_obs = buf.observations.reshape(-1, buf.observations.shape[-1])
    probs = actor_forward(actor, flat_obs).data
    recomputed = np.log(probs[np.arange(len(flat_obs)), buf.actions.reshape(-1)])
    assert np.allclose(recomputed, buf.log_probs.reshape(-1), rtol=0, atol=1e-12)


def test_network_env_mismatch_is_rejected():
    actor, critic = tiny_nets(tiny_env())
    tj_env = EnvConfig(env_kind="traffic_junction", n_agents=2, grid_dim=7, tj_roads=1, tj_two_way=False)
    with pytest.raises(nx.ShapeError):
        collect_rollouts(actor, critic, tj_env, 1, np.random.default_rng(0))


def test_sample_actions_one_hot_rows():
    logp = np.log(np.array([[1e-300, 1.0, 1e-300], [1.0, 1e-300, 1e-300]]))
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert sample_actions(logp, rng).tolist() == [1, 0]


# ---------------------------------------------------------------- update and training

def test_update_requires_advantages():
    env = tiny_env()
    actor, critic = tiny_nets(env)
    buf = collect_rollouts(actor, critic, env, 1, np.random.default_rng(0))
    with pytest.raises(nx.UsageError):
        ppo_update(actor, critic, buf, PpoConfig(), Adam(actor.parameters()), np.random.default_rng(0))


def test_update_report_ranges():
    env = tiny_env()
    actor, critic = tiny_nets(env)
    buf = compute_gae(collect_rollouts(actor, critic, env, 2, np.random.default_rng(0)), 0.99, 0.95)
    opt = Adam(actor.parameters() + critic.parameters(), learning_rate=1e-2)
    report = ppo_update(actor, critic, buf, PpoConfig(minibatch_size=4), opt, np.random.default_rng(1))
    assert 0.0 <= report.clip_fraction <= 1.0
    assert 0.0 <= report.entropy <= math.log(5) + 1e-12


def test_nan_loss_aborts():
    env = tiny_env()
    actor, critic = tiny_nets(env)
    buf = compute_gae(collect_rollouts(actor, critic, env, 1, np.random.default_rng(0)), 0.99, 0.95)
    critic.head.biases[-1].data[...] = np.nan
    opt = Adam(actor.parameters() + critic.parameters())
    with pytest.raises(TrainingDivergence, match="non-finite"):
        ppo_update(actor, critic, buf, PpoConfig(), opt, np.random.default_rng(0))


def test_training_is_bit_identical():
    env = tiny_env()
    cfg = PpoConfig(total_epochs=3, episodes_per_batch=2, minibatch_size=4)
    a = train(env, cfg, seed=7, hidden=(8,), embed_dim=6)
    b = train(env, cfg, seed=7, hidden=(8,), embed_dim=6)
    assert [r.csv_row() for r in a.reports] == [r.csv_row() for r in b.reports]
    for (_, x), (_, y) in zip(a.actor.named_parameters(), b.actor.named_parameters()):
        assert x.data.tobytes() == y.data.tobytes()


def test_training_changes_parameters():
    env = tiny_env()
    cfg = PpoConfig(total_epochs=1, episodes_per_batch=1)
    before = [p.data.copy() for p in tiny_nets(env, seed=0)[0].parameters()]
    actor = train(env, cfg, seed=0, hidden=(8,), embed_dim=6).actor
    assert any(not np.array_equal(a, p.data) for a, p in zip(before, actor.parameters()))


def test_add_rate_schedule():
    env = EnvConfig(env_kind="traffic_junction", add_rate_max=0.05, add_rate_min=0.02)
    rates = [add_rate_for_epoch(env, e, 11) for e in range(11)]
    assert rates[0] == 0.05 and rates[-1] == pytest.approx(0.02, abs=1e-15)
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    assert add_rate_for_epoch(env, 0, 1) == 0.05


@pytest.mark.parametrize("kwargs", [
    {"clip_epsilon": 0.0}, {"clip_epsilon": 1.0}, {"discount_gamma": 0.0},
    {"gae_lambda": 1.5}, {"minibatch_size": 0},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        PpoConfig(**kwargs)


def test_infinite_clip_allowed():
    assert math.isinf(PpoConfig(clip_epsilon=math.inf).clip_epsilon)


# ---------------------------------------------------------------- evaluation

def test_greedy_evaluation_is_deterministic():
    env = tiny_env(episode_length=15)
    actor, _ = tiny_nets(env, seed=2)
    a = evaluate_greedy(actor, env, 20, seed=4)
    b = evaluate_greedy(actor, env, 20, seed=4)
    assert a.mean_total_reward == b.mean_total_reward
    assert len(a.episodes) == 20


def test_greedy_ties_pick_lowest_index():
    env = tiny_env(episode_length=8, grid_dim=6)
    actor, _ = tiny_nets(env)
    for p in actor.parameters():
        p.data[...] = 0.0
    result = evaluate_greedy(actor, env, 3, seed=0)
    for record in result.episodes:
        state, _ = env_reset(env.replace(seed=record.seed))
        total, done = 0.0, False
        while not done:
            step = env_step(state, np.zeros(2, dtype=np.int64))  # action 0 for everyone
            total += step.rewards.sum()
            done = step.done
        assert record.total_reward == total


def test_default_episode_count_is_protocol_count():
    import inspect
    assert inspect.signature(evaluate_greedy).parameters["n_episodes"].default == 100


def test_random_baseline_shares_episode_seeds():
    env = tiny_env()
    actor, _ = tiny_nets(env)
    g = evaluate_greedy(actor, env, 5, seed=9)
    u = evaluate_uniform_random(env, 5, seed=9)
    assert [e.seed for e in g.episodes] == [e.seed for e in u.episodes]
