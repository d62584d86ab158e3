"""Margin loss, adjacency reconstruction and the combined objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ParamStore, Tensor

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class MarginConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5

    def __post_init__(self):
        if not 0 < self.m_minus < self.m_plus < 1:
            raise ValueError(f"need 0 < m_minus < m_plus < 1, got {self.m_minus}, {self.m_plus}")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")


@dataclass(frozen=True)
class ObjectiveConfig:
    beta: float = 0.1
    recon_enabled: bool = True

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


def add_decoder_params(params: ParamStore, in_dim: int, out_dim: int,
                       rng: np.random.Generator) -> None:
    s = np.sqrt(6.0 / (in_dim + out_dim))
    params.add("recon.W", rng.uniform(-s, s, size=(in_dim, out_dim)))
    params.add("recon.b", np.zeros(out_dim))


def margin_loss(class_capsules, label: int, cfg: MarginConfig = MarginConfig()) -> Tensor:
    class_capsules = T.as_tensor(class_capsules)
    n_classes = class_capsules.shape[0]
    if not 0 <= label < n_classes:
        raise ValueError(f"label {label} outside [0, {n_classes})")
    target = np.zeros(n_classes)
    target[label] = 1.0
    lengths = T.norm(class_capsules, axis=1)
    present = T.square(T.relu(cfg.m_plus - lengths))
    absent = T.square(T.relu(lengths - cfg.m_minus))
    return T.sum(present * target + absent * (cfg.lam * (1.0 - target)))


def masked_embed(primary, class_capsules, label: int, params: ParamStore) -> Tensor:
    """Primary poses shifted by a decoding of the true-class capsule only.

    The same correction vector is added to every node row.
    """
    class_capsules = T.as_tensor(class_capsules)
    mask = np.zeros((class_capsules.shape[0], 1))
    mask[label] = 1.0
    flat = T.reshape(class_capsules * mask, (1, class_capsules.size))
    correction = T.add_along(flat @ params["recon.W"], params["recon.b"])
    return T.as_tensor(primary) + correction


def reconstruction_loss(A, Z) -> Tensor:
    """Mean binary cross-entropy of sigmoid(Z Z^T) against A over all N^2 pairs."""
    A = np.asarray(A.data if isinstance(A, Tensor) else A, dtype=np.float64)
    Z = T.as_tensor(Z)
    if A.shape != (Z.shape[0], Z.shape[0]):
        raise T.ShapeError("reconstruction_loss", A.shape, Z.shape)
    p = T.clip(T.sigmoid(Z @ Z.T), PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = T.log(p) * A + T.log(1.0 - p) * (1.0 - A)
    return -T.mean(ll)


@dataclass
class LossBreakdown:
    total: Tensor
    margin: Tensor
    reconstruction: Tensor | None


def total_objective(graph, fwd, params: ParamStore,
                    margin_cfg: MarginConfig = MarginConfig(),
                    objective_cfg: ObjectiveConfig = ObjectiveConfig()) -> LossBreakdown:
    """Margin loss plus beta times the reconstruction loss (when enabled)."""
    margin = margin_loss(fwd.class_capsules, graph.label, margin_cfg)
    if not objective_cfg.recon_enabled:
        return LossBreakdown(margin, margin, None)
    Z = masked_embed(fwd.primary, fwd.class_capsules, graph.label, params)
    recon = reconstruction_loss(graph.adjacency, Z)
    return LossBreakdown(margin + T.scale(recon, objective_cfg.beta), margin, recon)
