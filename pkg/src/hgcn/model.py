"""Hierarchical graph capsule network forward pass.

Nodes become primary capsules through K disentangled projections. Each
capsule layer then has one single-layer GCN per higher capsule (TGNN) cast
votes, routes them by agreement, coarsens the adjacency with the routing
weights and adds a global-average residual from the layer below.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graphs import GraphInstance, normalize_adjacency
from .tensor import ParamStore, Tensor


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    capsule_counts: tuple[int, ...]
    K: int = 4
    h: int = 32
    R: int = 3
    disentangle: bool = True
    residual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "capsule_counts", tuple(int(n) for n in self.capsule_counts))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.K < 1 or self.h % self.K:
            raise ValueError(f"h={self.h} must be a positive multiple of K={self.K}")
        if self.R < 1:
            raise ValueError("R must be at least 1")
        if not self.capsule_counts or min(self.capsule_counts) < 1:
            raise ValueError(f"capsule counts must be positive, got {self.capsule_counts}")

    @classmethod
    def for_dataset(cls, input_dim: int, num_classes: int, hidden=(8,), **kw) -> "ModelConfig":
        return cls(input_dim=input_dim, capsule_counts=(*hidden, num_classes), **kw)

    @property
    def num_classes(self) -> int:
        return self.capsule_counts[-1]

    @property
    def num_layers(self) -> int:
        return len(self.capsule_counts)

    @property
    def capsule_dim(self) -> int:
        # every layer shares the primary capsule width so the residual type-checks
        return self.h


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


def init_params(config: ModelConfig, seed: int = 0) -> ParamStore:
    """All trainable tensors: projections, per-whole TGNN weights, decoder."""
    from .objectives import add_decoder_params

    rng = np.random.default_rng(seed)
    params = ParamStore()
    d, h = config.input_dim, config.h
    if config.disentangle:
        f = h // config.K
        for k in range(config.K):
            params.add(f"disentangle.W{k}", glorot(rng, d, f))
            params.add(f"disentangle.b{k}", np.zeros(f))
    else:
        params.add("primary.W", glorot(rng, d, h))
        params.add("primary.b", np.zeros(h))
    for layer, n_next in enumerate(config.capsule_counts, start=1):
        for j in range(n_next):
            params.add(f"tgnn{layer}.W{j}", glorot(rng, h, h))
    add_decoder_params(params, config.num_classes * h, h, rng)
    return params


def tgnn_param_count(params: ParamStore, layer: int) -> int:
    return params.count(f"tgnn{layer}.")


# ---------------------------------------------------------------------------
# building blocks


def squash(z, axis: int = -1) -> Tensor:
    """Rescale to length |z|^2 / (1 + |z|^2), keeping direction; 0 maps to 0."""
    return T.squash(z, axis=axis)


def disentangle(X, params: ParamStore, config: ModelConfig) -> Tensor:
    """Pre-squash primary poses, one row per node.

    With disentanglement each of the K factor blocks is tanh(X W_k) + b_k,
    concatenated in factor order. Without it a single affine map X W + b.
    """
    X = T.as_tensor(X)
    if X.ndim != 2 or X.shape[1] != config.input_dim:
        raise T.ShapeError("disentangle", X.shape, (None, config.input_dim))
    if not config.disentangle:
        return T.add_along(X @ params["primary.W"], params["primary.b"])
    blocks = [T.add_along(T.tanh(X @ params[f"disentangle.W{k}"]), params[f"disentangle.b{k}"])
              for k in range(config.K)]
    return blocks[0] if len(blocks) == 1 else T.concat(blocks, axis=1)


def tgnn_vote(poses, a_hat, weight, activation: bool = True) -> Tensor:
    """Votes of every part for one whole: tanh(A_hat u W), row i from part i."""
    out = T.as_tensor(a_hat) @ T.as_tensor(poses) @ weight
    return T.tanh(out) if activation else out


def _all_votes(poses: Tensor, a_hat: Tensor, weights: list[Tensor]) -> Tensor:
    # one matmul for all wholes; block j of the columns belongs to whole j
    n, d_out = poses.shape[0], weights[0].shape[1]
    stacked = T.concat(weights, axis=1)
    return T.reshape(T.tanh(a_hat @ poses @ stacked), (n, len(weights), d_out))


@dataclass
class RoutingIteration:
    logits: np.ndarray      # b before the softmax of this iteration
    weights: np.ndarray     # c
    poses: np.ndarray       # u after squash
    updated_logits: np.ndarray


def route(votes, R: int, history: list | None = None) -> tuple[Tensor, Tensor]:
    """Dynamic routing between two capsule layers.

    ``votes`` is either a list with one (parts x dim) tensor per whole or a
    stacked (parts x wholes x dim) tensor. Returns the higher-level poses and
    the routing weights of the last iteration. Gradients flow through all R
    iterations.
    """
    u, c, _ = _route(votes, R, history)
    return u, c


def _route(votes, R: int, history: list | None = None) -> tuple[Tensor, Tensor, Tensor]:
    # also returns the last pre-squash weighted vote sum, where the residual enters
    if R < 1:
        raise ValueError("R must be at least 1")
    V = T.stack(votes, axis=1) if isinstance(votes, (list, tuple)) else votes
    n, m, _ = V.shape
    b = Tensor(np.zeros((n, m)))
    for _ in range(R):
        c = T.softmax(b, axis=1)
        s = T.einsum("nm,nmd->md", c, V)
        u = squash(s)
        new_b = b + T.einsum("nmd,md->nm", V, u)
        if history is not None:
            history.append(RoutingIteration(b.data.copy(), c.data.copy(),
                                            u.data.copy(), new_b.data.copy()))
        b = new_b
    return u, c, s


def coarsen(A, C) -> Tensor:
    C = T.as_tensor(C)
    return C.T @ T.as_tensor(A) @ C


def residual_add(next_poses, prev_poses) -> Tensor:
    """Add the global average of the lower layer to every higher capsule, then squash."""
    next_poses, prev_poses = T.as_tensor(next_poses), T.as_tensor(prev_poses)
    if next_poses.shape[1] != prev_poses.shape[1]:
        raise T.ShapeError("residual_add", next_poses.shape, prev_poses.shape)
    return squash(T.add_along(next_poses, T.mean(prev_poses, axis=0)))


# ---------------------------------------------------------------------------
# full network


@dataclass
class LayerTrace:
    votes: Tensor
    weights: Tensor
    adjacency: Tensor        # coarsened, input to the next layer
    poses: Tensor            # output capsules after residual
    iterations: list[RoutingIteration] = field(default_factory=list)


@dataclass
class RoutingTrace:
    layers: list[LayerTrace] = field(default_factory=list)


@dataclass
class ForwardResult:
    class_capsules: Tensor
    trace: RoutingTrace
    primary: Tensor

    @property
    def lengths(self) -> np.ndarray:
        return np.linalg.norm(self.class_capsules.data, axis=1)

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.lengths))


def forward(graph: GraphInstance, params: ParamStore, config: ModelConfig,
            record_iterations: bool = False) -> ForwardResult:
    X = graph.features
    if X is None:
        raise ValueError("graph has no features; run build_features first")
    primary = squash(disentangle(X, params, config))
    u = primary
    A = Tensor(graph.adjacency)
    trace = RoutingTrace()
    for layer, n_next in enumerate(config.capsule_counts, start=1):
        a_hat = normalize_adjacency(A)
        weights = [params[f"tgnn{layer}.W{j}"] for j in range(n_next)]
        votes = _all_votes(u, a_hat, weights)
        history = [] if record_iterations else None
        u_next, c, summed = _route(votes, config.R, history)
        A = coarsen(A, c)
        if config.residual:
            # enters before the final squash; adding to squashed poses and
            # squashing again would cap lengths at squash(2) = 0.8 < m_plus
            u_next = residual_add(summed, u)
        trace.layers.append(LayerTrace(votes, c, A, u_next, history or []))
        u = u_next
    return ForwardResult(u, trace, primary)


def predict(graph: GraphInstance, params: ParamStore, config: ModelConfig) -> int:
    return forward(graph, params, config).prediction
