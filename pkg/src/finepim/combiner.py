"""Fusion of selected points into one prediction, and the training losses.

Two fusion heads are provided. ``concat_predict`` is the plain fully
connected head over the flattened point matrix. ``gcn_fuse`` is the graph
head used by default:

1. adjacency ``A = softmax_rows(X X^T / temperature)`` over node features X
2. ``gcn_layers`` rounds of ``X <- ReLU(A X Theta)``
3. soft assignment ``S = softmax_over_nodes(X Phi)`` pools nodes into
   ``num_supernodes`` super nodes, ``Z = S^T X``
4. super nodes are averaged and a linear classifier produces class scores

Every step is equivariant in node order and the final average is invariant,
so the prediction does not depend on how the points were ordered.

Losses: each block's logits are averaged over all positions and scored with
softmax cross entropy; the combiner's scores get the same treatment. The
total is a weighted sum with unit weights by default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .rng import stream
from .selector import PixelLogits, SelectedPoints
from .tensor import Tensor


@dataclass(frozen=True)
class GcnConfig:
    num_supernodes: int = 4
    gcn_layers: int = 1
    adjacency_temperature: float = 1.0
    hidden_dim: int | None = None      # None: same width as the node features

    def __post_init__(self):
        if self.num_supernodes <= 0 or self.gcn_layers <= 0:
            raise ConfigError("num_supernodes and gcn_layers must be positive")
        if not self.adjacency_temperature > 0:
            raise ConfigError("adjacency_temperature must be positive")
        if self.hidden_dim is not None and self.hidden_dim <= 0:
            raise ConfigError("hidden_dim must be positive")


@dataclass
class ConcatFeatures:
    """Selected points of all blocks stacked along the node axis: ``N x N_total x C'``."""

    matrix: Tensor

    @property
    def num_nodes(self) -> int:
        return self.matrix.shape[1]


def concat_points(points: Sequence[SelectedPoints]) -> ConcatFeatures:
    return ConcatFeatures(T.concat([p.features for p in points], axis=1))


def _as_matrix(points) -> Tensor:
    if isinstance(points, ConcatFeatures):
        return points.matrix
    if isinstance(points, Tensor):
        return points if points.ndim == 3 else T.reshape(points, (1,) + points.shape)
    return concat_points(points).matrix


# ---------------------------------------------------------------------------
# parameters


def init_concat_head(num_nodes: int, num_classes: int, seed: int) -> dict[str, Tensor]:
    rng = stream(seed, "init/concat-head")
    fan_in = num_nodes * num_classes
    return {
        "combiner.fc.weight": Tensor(rng.normal(0, 1 / math.sqrt(fan_in), (fan_in, num_classes)), True),
        "combiner.fc.bias": Tensor(np.zeros(num_classes), True),
    }


def init_gcn(num_classes: int, config: GcnConfig, seed: int) -> dict[str, Tensor]:
    rng = stream(seed, "init/gcn")
    d = num_classes
    h = config.hidden_dim or d
    params = {}
    for layer in range(config.gcn_layers):
        d_in = d if layer == 0 else h
        params[f"combiner.gcn.{layer}.theta"] = Tensor(
            rng.normal(0, math.sqrt(2.0 / d_in), (d_in, h)), True)
    params["combiner.pool.phi"] = Tensor(rng.normal(0, 1 / math.sqrt(h), (h, config.num_supernodes)), True)
    params["combiner.classifier.weight"] = Tensor(rng.normal(0, 1 / math.sqrt(h), (h, num_classes)), True)
    params["combiner.classifier.bias"] = Tensor(np.zeros(num_classes), True)
    return params


# ---------------------------------------------------------------------------
# heads


def _row_linear(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` applied to the last axis of a ``B x n x d`` tensor."""
    b, n, d = x.shape
    return T.reshape(T.matmul(T.reshape(x, (b * n, d)), w), (b, n, w.shape[1]))


def _plus_bias(x: Tensor, bias: Tensor) -> Tensor:
    return T.add(x, T.broadcast_to(bias, x.shape))


def concat_predict(points, weight: Tensor, bias: Tensor) -> Tensor:
    """Class scores ``flatten(F_concat) @ W + b`` for each image, ``N x C'``."""
    x = _as_matrix(points)
    n, nodes, c = x.shape
    if weight.shape[0] != nodes * c:
        raise ValueError(f"fc weight expects {weight.shape[0] // max(c, 1)} points, got {nodes}")
    return _plus_bias(T.matmul(T.reshape(x, (n, nodes * c)), weight), bias)


def gcn_fuse(points, config: GcnConfig, params: dict[str, Tensor]) -> Tensor:
    """Graph-convolution fusion of ``N x n x d`` node features into ``N x C'`` scores."""
    x = _as_matrix(points)
    b, n, _ = x.shape
    if n < config.num_supernodes:
        raise ValueError(f"{n} nodes cannot be pooled into {config.num_supernodes} super nodes")
    sim = T.matmul(x, T.transpose(x, (0, 2, 1)))
    adj = T.softmax(T.scale(sim, 1.0 / config.adjacency_temperature), axis=-1)
    for layer in range(config.gcn_layers):
        x = T.relu(_row_linear(T.matmul(adj, x), params[f"combiner.gcn.{layer}.theta"]))
    assign = T.softmax(_row_linear(x, params["combiner.pool.phi"]), axis=1)
    supernodes = T.matmul(T.transpose(assign, (0, 2, 1)), x)          # B, K, h
    pooled = T.mean(supernodes, axis=1)
    return _plus_bias(T.matmul(pooled, params["combiner.classifier.weight"]),
                      params["combiner.classifier.bias"])


def average_predict(logits: PixelLogits | Tensor) -> Tensor:
    """Mean of the class logits over all positions, ``N x C'``."""
    x = logits.logits if isinstance(logits, PixelLogits) else logits
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    return T.mean(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# losses


def _labels(labels, n: int, c: int) -> np.ndarray:
    lab = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if lab.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {lab.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got {lab.tolist()}")
    return lab


def cross_entropy(scores: Tensor, labels) -> Tensor:
    """Per-sample ``-log softmax(scores)[label]``, shape ``N``."""
    if scores.ndim == 1:
        scores = T.reshape(scores, (1, scores.shape[0]))
    n, c = scores.shape
    lab = _labels(labels, n, c)
    picked = T.take_along_axis(T.log_softmax(scores, axis=1), lab[:, None], axis=1)
    return T.neg(T.reshape(picked, (n,)))


def block_loss(v: Tensor, labels) -> Tensor:
    """Batch-mean cross entropy of averaged block logits."""
    return T.mean(cross_entropy(v, labels))


@dataclass
class LossReport:
    block_losses: list[float]
    combiner_loss: float
    total: float
    weights: list[float] = field(default_factory=lambda: [1.0] * 5)

    def as_record(self, **extra) -> dict:
        return {**extra, "block_losses": self.block_losses,
                "combiner_loss": self.combiner_loss, "total": self.total}


def total_loss(blocks: Sequence[PixelLogits | Tensor], combiner_scores: Tensor, labels,
               weights: Sequence[float] | None = None) -> tuple[Tensor, LossReport]:
    """Weighted sum of the per-block losses and the combiner loss.

    ``weights`` has one entry per block followed by the combiner weight.
    """
    w = list(weights) if weights is not None else [1.0] * (len(blocks) + 1)
    if len(w) != len(blocks) + 1:
        raise ValueError(f"need {len(blocks) + 1} loss weights, got {len(w)}")
    terms = [block_loss(average_predict(b), labels) for b in blocks]
    terms.append(block_loss(combiner_scores, labels))
    total = T.scale(terms[0], w[0])
    for term, wi in zip(terms[1:], w[1:]):
        total = T.add(total, T.scale(term, wi))
    report = LossReport([t.item() for t in terms[:-1]], terms[-1].item(), total.item(), w)
    return total, report
