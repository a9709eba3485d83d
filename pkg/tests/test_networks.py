import math

import numpy as np
import pytest

from matl import numerics as nx
from matl.networks import (
    ActorParams,
    CriticParams,
    GraphConvParams,
    actor_forward,
    attention_weights,
    critic_forward,
    graph_conv,
    self_attention,
)
from matl.numerics import Tensor

from gradcheck import numeric_grad, rel_error


def zero_out(params):
    for _, t in params.named_parameters():
        t.data[...] = 0.0


def small_critic(obs_dim=5, seed=0):
    return CriticParams.init(obs_dim, embed_dim=6, d_k=3, d_v=4, head_hidden=(5,), seed=seed)


def small_gc(d=3, d_k=2, d_v=4, seed=0):
    return GraphConvParams.init(d, d_k, d_v, d, np.random.default_rng(seed))


# ---------------------------------------------------------------- straight-line oracles

def np_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def np_mlp(weights, biases, x):
    for i, (w, b) in enumerate(zip(weights, biases)):
        x = x @ w + b
        if i < len(weights) - 1:
            x = np.tanh(x)
    return x


def np_gc(p: GraphConvParams, h):
    q, k, v = h @ p.w_query.data, h @ p.w_key.data, h @ p.w_value.data
    att = np_softmax(q @ k.T / math.sqrt(p.d_k)) @ v
    return np.maximum(np.hstack([att, h]) @ p.w_out.data + p.b_out.data, 0.0)


def np_critic(c: CriticParams, obs):
    e = np_mlp([w.data for w in c.embed.weights], [b.data for b in c.embed.biases], obs)
    h1 = np_gc(c.gc1, e)
    h2 = np_gc(c.gc2, h1)
    out = np_mlp([w.data for w in c.head.weights], [b.data for b in c.head.biases], e + h1 + h2)
    return out[:, 0]


# ---------------------------------------------------------------- actor

def test_zero_actor_is_uniform():
    actor = ActorParams.init(6, 4, hidden=(8,), seed=1)
    zero_out(actor)
    probs = actor_forward(actor, np.random.default_rng(0).normal(size=(3, 6))).data
    assert np.array_equal(probs, np.full((3, 4), 0.25))


def test_actor_rows_independent_of_agent_count():
    actor = ActorParams.init(6, 5, seed=2)
    row = np.random.default_rng(1).normal(size=6)
    one = actor_forward(actor, row[None, :]).data
    five = actor_forward(actor, np.tile(row, (5, 1))).data
    for r in five:
        assert np.array_equal(r, one[0])


def test_actor_matches_independent_script():
    actor = ActorParams.init(7, 4, hidden=(9, 5), seed=3)
    for _, t in actor.named_parameters():
        t.data[...] = np.random.default_rng(t.data.size).normal(size=t.shape)
    obs = np.random.default_rng(4).normal(size=(3, 7))
    probs = actor_forward(actor, obs).data
    expected = np_softmax(np_mlp([w.data for w in actor.mlp.weights],
                                 [b.data for b in actor.mlp.biases], obs))
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12, rtol=0)
    assert np.allclose(probs, expected, atol=1e-14, rtol=1e-12)


def test_actor_shape_error():
    actor = ActorParams.init(6, 4)
    with pytest.raises(nx.ShapeError):
        actor_forward(actor, np.zeros((2, 5)))


# ---------------------------------------------------------------- attention / graph conv

def test_single_node_attention_is_identity_weight():
    p = small_gc()
    h = np.array([[0.3, -1.2, 2.0]])
    assert attention_weights(p, Tensor(h)).data.tolist() == [[1.0]]
    assert np.allclose(self_attention(p, h).data, h @ p.w_value.data, rtol=0, atol=1e-15)


def test_zero_query_gives_uniform_attention():
    p = small_gc(seed=3)
    p.w_query.data[...] = 0.0
    h = np.random.default_rng(5).normal(size=(4, 3))
    out = self_attention(p, h).data
    mean_row = (h @ p.w_value.data).mean(axis=0)
    assert np.allclose(out, np.tile(mean_row, (4, 1)), rtol=0, atol=1e-14)


def test_two_node_attention_hand_computed():
    eye = np.eye(2)
    p = GraphConvParams(Tensor(eye), Tensor(eye), Tensor(eye), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)), d_k=1)
    h = np.eye(2)
    e = math.e
    weights = attention_weights(p, Tensor(h)).data
    expected = np.array([[e / (e + 1), 1 / (e + 1)], [1 / (e + 1), e / (e + 1)]])
    assert np.allclose(weights, expected, rtol=0, atol=1e-15)
    # W_V = I and h = I: the output rows are the attention rows themselves
    assert np.allclose(self_attention(p, h).data, expected, rtol=0, atol=1e-15)


@pytest.mark.parametrize("n", [1, 2, 3, 8, 50])
def test_attention_rows_are_stochastic(n):
    p = GraphConvParams.init(5, 4, 4, 5, np.random.default_rng(n))
    h = np.random.default_rng(100 + n).normal(scale=3.0, size=(n, 5))
    w = attention_weights(p, Tensor(h)).data
    assert w.shape == (n, n)
    assert np.all(w >= 0)
    assert np.all(np.abs(w.sum(axis=1) - 1.0) <= 1e-12)


def test_zero_feedforward_outputs_activation_of_bias():
    p = small_gc()
    p.w_out.data[...] = 0.0
    p.b_out.data[...] = [0.5, -1.0, 2.0]
    out = graph_conv(p, np.random.default_rng(0).normal(size=(4, 3))).data
    assert np.array_equal(out, np.tile([0.5, 0.0, 2.0], (4, 1)))


def test_graph_conv_matches_composition():
    p = small_gc(seed=7)
    h = np.random.default_rng(8).normal(size=(3, 3))
    assert np.allclose(graph_conv(p, h).data, np_gc(p, h), rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_graph_conv_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    p = small_gc(seed=seed)
    h = rng.normal(size=(5, 3))
    perm = rng.permutation(5)
    assert np.allclose(graph_conv(p, h[perm]).data, graph_conv(p, h).data[perm], rtol=0, atol=1e-12)


# ---------------------------------------------------------------- critic

def test_zero_critic_values_equal_head_bias():
    critic = small_critic()
    zero_out(critic)
    critic.head.biases[-1].data[...] = 1.75
    values = critic_forward(critic, np.random.default_rng(0).normal(size=(4, 5))).values.data
    assert np.array_equal(values, np.full(4, 1.75))


def test_swapping_agents_swaps_values():
    critic = small_critic(seed=1)
    obs = np.random.default_rng(2).normal(size=(3, 5))
    base = critic_forward(critic, obs).values.data
    swapped = critic_forward(critic, obs[[1, 0, 2]]).values.data
    assert np.allclose(swapped[:2], base[[1, 0]], rtol=0, atol=1e-12)
    assert swapped[2] == base[2] or abs(swapped[2] - base[2]) < 1e-15


def test_critic_matches_straight_line():
    critic = small_critic(seed=4)
    obs = np.random.default_rng(5).normal(size=(2, 5))
    trace = critic_forward(critic, obs)
    assert trace.E.shape == trace.H.shape == trace.H_prime.shape == (2, 6)
    assert np.allclose(trace.values.data, np_critic(critic, obs), rtol=1e-12, atol=1e-14)


def test_batched_critic_matches_per_timestep():
    critic = small_critic(seed=6)
    obs = np.random.default_rng(7).normal(size=(4, 3, 5))
    batched = critic_forward(critic, obs).values.data
    for t in range(4):
        assert np.allclose(batched[t], critic_forward(critic, obs[t]).values.data, rtol=1e-13, atol=1e-14)


def test_same_params_run_at_every_agent_count():
    critic = small_critic()
    actor = ActorParams.init(5, 3, hidden=(4,))
    rng = np.random.default_rng(0)
    for n in (1, 2, 17, 80):
        obs = rng.normal(size=(n, 5))
        assert critic_forward(critic, obs).values.shape == (n,)
        assert actor_forward(actor, obs).shape == (n, 3)


def _param_gradcheck(params, build_loss, tol):
    named = list(params.named_parameters())
    for _, t in named:
        t.grad = None
    build_loss().backward()
    analytic = {name: t.grad.copy() for name, t in named}
    for name, t in named:
        def f(x, t=t):
            saved = t.data
            t.data = x
            try:
                with nx.no_grad():
                    return build_loss().item()
            finally:
                t.data = saved
        assert rel_error(analytic[name], numeric_grad(f, t.data)) < tol, name


@pytest.mark.parametrize("n", [2, 4])
def test_critic_parameter_gradients(n):
    critic = small_critic(seed=n)
    rng = np.random.default_rng(n)
    obs = rng.normal(size=(n, 5))
    target = rng.normal(size=n)

    def loss():
        v = critic_forward(critic, obs).values
        return nx.sum(nx.square(nx.sub(v, Tensor(target))))

    _param_gradcheck(critic, loss, 1e-3)


@pytest.mark.parametrize("seed", range(3))
def test_critic_loss_gradient_three_agents(seed):
    critic = small_critic(seed=seed)
    rng = np.random.default_rng(seed + 10)
    obs = rng.normal(size=(3, 5))
    weights = rng.normal(size=3)

    def loss():
        trace = critic_forward(critic, obs)
        return nx.sum(nx.mul(nx.tanh(trace.values), Tensor(weights)))

    _param_gradcheck(critic, loss, 1e-3)


def test_critic_input_gradient():
    critic = small_critic(seed=9)
    obs = np.random.default_rng(9).normal(size=(3, 5))
    x = Tensor(obs, requires_grad=True)
    nx.sum(critic_forward(critic, x).values).backward()
    fd = numeric_grad(lambda o: float(critic_forward(critic, o).values.data.sum()), obs)
    assert rel_error(x.grad, fd) < 1e-4
