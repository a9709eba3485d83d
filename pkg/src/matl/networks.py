"""Shared decentralized actor and graph-attention centralized critic.

The actor is a plain MLP applied row-by-row to local observations. The
critic embeds every agent's observation, mixes the embeddings through two
self-attention graph-convolution layers, sums the three per-agent feature
vectors and maps each sum to a scalar value with a shared head MLP.

No parameter shape depends on the number of agents, so one parameter set
runs at any agent count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

DEFAULT_HIDDEN = (64, 64)
DEFAULT_EMBED_DIM = 64


def orthogonal_init(rng: np.random.Generator, n_in: int, n_out: int, gain: float = 1.0) -> np.ndarray:
    flat = rng.normal(size=(max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return np.ascontiguousarray(gain * q[:n_in, :n_out])


class Mlp:
    """Dense layers with tanh between them and a linear output."""

    def __init__(self, weights: list[Tensor], biases: list[Tensor]):
        if len(weights) != len(biases) or not weights:
            raise ShapeError("an MLP needs one bias per weight matrix and at least one layer")
        for w, nxt in zip(weights, weights[1:]):
            if w.shape[1] != nxt.shape[0]:
                raise ShapeError(f"layer shapes {list(w.shape)} -> {list(nxt.shape)} do not chain")
        self.weights = weights
        self.biases = biases

    @classmethod
    def init(cls, layer_sizes, rng: np.random.Generator, output_gain: float = 1.0) -> "Mlp":
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ShapeError(f"invalid layer sizes {sizes}")
        weights, biases = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
            gain = output_gain if i == len(sizes) - 2 else 1.0
            weights.append(Tensor(orthogonal_init(rng, n_in, n_out, gain), requires_grad=True))
            biases.append(Tensor(np.zeros(n_out), requires_grad=True))
        return cls(weights, biases)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weights[0].shape[0]:
            raise ShapeError(f"input width {x.shape[-1]} does not match MLP input {self.weights[0].shape[0]}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = nx.add(nx.matmul(x, w), b)
            if i < last:
                x = nx.tanh(x)
        return x

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.{i}.weight", w
            yield f"{prefix}.{i}.bias", b


def _mlp_from(arrays: dict[str, np.ndarray], prefix: str) -> Mlp:
    weights, biases = [], []
    i = 0
    while f"{prefix}.{i}.weight" in arrays:
        weights.append(Tensor(arrays[f"{prefix}.{i}.weight"], requires_grad=True))
        biases.append(Tensor(arrays[f"{prefix}.{i}.bias"], requires_grad=True))
        i += 1
    return Mlp(weights, biases)


class ActorParams:
    """Policy MLP shared by every agent: observation row -> action logits."""

    kind = "actor"

    def __init__(self, mlp: Mlp):
        self.mlp = mlp

    @classmethod
    def init(cls, obs_dim: int, n_actions: int, hidden=DEFAULT_HIDDEN, seed: int = 0) -> "ActorParams":
        rng = np.random.default_rng(seed)
        return cls(Mlp.init([obs_dim, *hidden, n_actions], rng, output_gain=0.01))

    @property
    def obs_dim(self) -> int:
        return self.mlp.layer_sizes[0]

    @property
    def n_actions(self) -> int:
        return self.mlp.layer_sizes[-1]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.mlp.named_parameters("actor.mlp")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_parameters()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ActorParams":
        return cls(_mlp_from(arrays, "actor.mlp"))


def actor_logits(params: ActorParams, observations: Tensor) -> Tensor:
    observations = nx.as_tensor(observations)
    if observations.shape[-1] != params.obs_dim:
        raise ShapeError(f"observation width {observations.shape[-1]} != actor input {params.obs_dim}")
    return params.mlp(observations)


def actor_forward(params: ActorParams, observations) -> Tensor:
    """Per-agent action probabilities, [n, n_actions]."""
    return nx.softmax_rows(actor_logits(params, observations))


@dataclass
class GraphConvParams:
    """Query/key/value projections plus the one-layer feed-forward map."""

    w_query: Tensor
    w_key: Tensor
    w_value: Tensor
    w_out: Tensor
    b_out: Tensor
    d_k: float = 0.0  # attention scaling dimension; 0 means the query width

    def __post_init__(self):
        if self.d_k <= 0:
            self.d_k = float(self.w_query.shape[1])
        d = self.w_query.shape[0]
        if self.w_key.shape[0] != d or self.w_value.shape[0] != d:
            raise ShapeError("query, key and value projections must share their input width")
        if self.w_query.shape[1] != self.w_key.shape[1] or self.w_query.shape[1] < 1:
            raise ShapeError("query and key projections must share a positive width d_k")
        if self.w_out.shape[0] != self.w_value.shape[1] + d:
            raise ShapeError(f"feed-forward input must be d_v + d = {self.w_value.shape[1] + d}")

    @classmethod
    def init(cls, d_in: int, d_k: int, d_v: int, d_out: int, rng: np.random.Generator) -> "GraphConvParams":
        def leaf(a):
            return Tensor(a, requires_grad=True)

        return cls(
            leaf(orthogonal_init(rng, d_in, d_k)),
            leaf(orthogonal_init(rng, d_in, d_k)),
            leaf(orthogonal_init(rng, d_in, d_v)),
            leaf(orthogonal_init(rng, d_v + d_in, d_out)),
            leaf(np.zeros(d_out)),
            float(d_k),
        )

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w_query", self.w_query
        yield f"{prefix}.w_key", self.w_key
        yield f"{prefix}.w_value", self.w_value
        yield f"{prefix}.w_out", self.w_out
        yield f"{prefix}.b_out", self.b_out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str) -> "GraphConvParams":
        names = ("w_query", "w_key", "w_value", "w_out", "b_out")
        d_k = float(np.asarray(arrays[f"{prefix}.d_k"]).reshape(-1)[0]) if f"{prefix}.d_k" in arrays else 0.0
        return cls(*(Tensor(arrays[f"{prefix}.{n}"], requires_grad=True) for n in names), d_k)


def attention_weights(params: GraphConvParams, h: Tensor) -> Tensor:
    """Row-stochastic [n, n] (or [B, n, n]) attention matrix."""
    q = nx.matmul(h, params.w_query)
    k = nx.matmul(h, params.w_key)
    scores = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(params.d_k))
    return nx.softmax_rows(scores)


def self_attention(params: GraphConvParams, h) -> Tensor:
    h = nx.as_tensor(h)
    if h.shape[-1] != params.w_query.shape[0]:
        raise ShapeError(f"input width {h.shape[-1]} != attention input {params.w_query.shape[0]}")
    return nx.matmul(attention_weights(params, h), nx.matmul(h, params.w_value))


def graph_conv(params: GraphConvParams, h) -> Tensor:
    """relu(concat[self_attention(h), h] W + b)."""
    h = nx.as_tensor(h)
    mixed = nx.concat_columns(self_attention(params, h), h)
    return nx.relu(nx.add(nx.matmul(mixed, params.w_out), params.b_out))


@dataclass
class CriticTrace:
    E: Tensor
    H: Tensor
    H_prime: Tensor
    values: Tensor


class CriticParams:
    kind = "critic"

    def __init__(self, embed: Mlp, gc1: GraphConvParams, gc2: GraphConvParams, head: Mlp):
        d_e = embed.layer_sizes[-1]
        for gc in (gc1, gc2):
            if gc.w_query.shape[0] != d_e or gc.w_out.shape[1] != d_e:
                raise ShapeError(f"graph-conv layers must map width {d_e} to {d_e}")
        if head.layer_sizes[0] != d_e or head.layer_sizes[-1] != 1:
            raise ShapeError(f"value head must map {d_e} -> 1")
        self.embed, self.gc1, self.gc2, self.head = embed, gc1, gc2, head

    @classmethod
    def init(cls, obs_dim: int, embed_dim: int = DEFAULT_EMBED_DIM, d_k: int | None = None,
             d_v: int | None = None, head_hidden=(DEFAULT_EMBED_DIM,), seed: int = 0) -> "CriticParams":
        rng = np.random.default_rng(seed)
        d_k = d_k or embed_dim
        d_v = d_v or embed_dim
        embed = Mlp.init([obs_dim, embed_dim, embed_dim], rng)
        gc1 = GraphConvParams.init(embed_dim, d_k, d_v, embed_dim, rng)
        gc2 = GraphConvParams.init(embed_dim, d_k, d_v, embed_dim, rng)
        head = Mlp.init([embed_dim, *head_hidden, 1], rng)
        return cls(embed, gc1, gc2, head)

    @property
    def obs_dim(self) -> int:
        return self.embed.layer_sizes[0]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.embed.named_parameters("critic.embed")
        yield from self.gc1.named_parameters("critic.gc1")
        yield from self.gc2.named_parameters("critic.gc2")
        yield from self.head.named_parameters("critic.head")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: t.data for name, t in self.named_parameters()}
        arrays["critic.gc1.d_k"] = np.array(self.gc1.d_k)
        arrays["critic.gc2.d_k"] = np.array(self.gc2.d_k)
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "CriticParams":
        return cls(
            _mlp_from(arrays, "critic.embed"),
            GraphConvParams.from_arrays(arrays, "critic.gc1"),
            GraphConvParams.from_arrays(arrays, "critic.gc2"),
            _mlp_from(arrays, "critic.head"),
        )


def critic_forward(params: CriticParams, observations) -> CriticTrace:
    """Per-agent values for [n, d_obs] observations (or a [B, n, d_obs] batch)."""
    obs = nx.as_tensor(observations)
    if obs.ndim < 2 or obs.shape[-2] < 1:
        raise ShapeError(f"critic needs at least one agent row, got shape {list(obs.shape)}")
    if obs.shape[-1] != params.obs_dim:
        raise ShapeError(f"observation width {obs.shape[-1]} != critic input {params.obs_dim}")
    E = params.embed(obs)
    H = graph_conv(params.gc1, E)
    H_prime = graph_conv(params.gc2, H)
    features = nx.add(nx.add(E, H), H_prime)
    v = params.head(features)
    values = nx.reshape(v, v.shape[:-1])
    return CriticTrace(E, H, H_prime, values)
