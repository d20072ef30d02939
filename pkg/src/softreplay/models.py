"""The classifier MLP and the soft-label generator network.

The generator is a small MLP over the classifier's predicted probabilities
(taken with gradients stopped).  Its raw output rows pass through a row-wise
softmax, get mixed with a frozen snapshot of the network by an EMA weight,
and are anchored to the one-hot label:

    label = ((1 - beta) * live(p) + beta * old(p) + onehot) / 2

Both EMA terms and the one-hot are distributions, so every label row is a
distribution with at least 0.5 mass on the true class, and the normalizer is
the constant 2, which keeps the whole map exactly differentiable in the live
network's weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import ShapeError, TargetError

Array = np.ndarray


@dataclass(frozen=True)
class ClassifierConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (100, 100)
    num_classes: int = 10
    init_seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ShapeError("input_dim must be >= 1")
        if self.num_classes < 2:
            raise ShapeError("num_classes must be >= 2")
        if any(h < 1 for h in self.hidden_dims):
            raise ShapeError("hidden widths must be >= 1")


def _he_mlp_params(rng: np.random.Generator, dims: list[int]) -> list[tuple[str, Array]]:
    """He-style init: weights ~ N(0, 2/fan_in), zero biases."""
    params = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        params.append((f"w{i}", w))
        params.append((f"b{i}", np.zeros(fan_out)))
    return params


def _mlp_graph(leaves: dict[str, ad.Tensor], x: Array, n_layers: int) -> ad.Tensor:
    h = ad.constant(x)
    for i in range(n_layers - 1):
        h = ad.relu(ad.affine(h, leaves[f"w{i}"], leaves[f"b{i}"]))
    last = n_layers - 1
    return ad.affine(h, leaves[f"w{last}"], leaves[f"b{last}"])


def _mlp_values(theta: ad.ParameterSet, x: Array, n_layers: int,
                values: Array | None = None) -> Array:
    segs = theta.unflatten(theta.values if values is None else values)
    h = x
    for i in range(n_layers - 1):
        h = kernels.relu_fwd(kernels.affine_fwd(h, segs[f"w{i}"], segs[f"b{i}"]))
    last = n_layers - 1
    return kernels.affine_fwd(h, segs[f"w{last}"], segs[f"b{last}"])


class Classifier:
    """Fully connected classifier; parameters live in one flat vector."""

    def __init__(self, config: ClassifierConfig):
        self.config = config
        dims = [config.input_dim, *config.hidden_dims, config.num_classes]
        self._n_layers = len(dims) - 1
        rng = np.random.default_rng(config.init_seed)
        self.theta = ad.ParameterSet.build(_he_mlp_params(rng, dims))

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def _check_input(self, x: Array) -> Array:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ShapeError(
                f"expected input of shape (B, {self.config.input_dim}), got {x.shape}")
        return np.ascontiguousarray(x)

    def leaves(self, values: Array | None = None) -> dict[str, ad.Tensor]:
        return self.theta.leaves(values)

    def logits_graph(self, leaves: dict[str, ad.Tensor], x: Array) -> ad.Tensor:
        return _mlp_graph(leaves, self._check_input(x), self._n_layers)

    def logits(self, x: Array, values: Array | None = None) -> Array:
        """Forward pass without tape; same kernels as the graph path."""
        return _mlp_values(self.theta, self._check_input(x), self._n_layers, values)

    def probs(self, x: Array, values: Array | None = None) -> Array:
        return kernels.softmax_rows(self.logits(x, values))


@dataclass
class SoftLabelBatch:
    """Generated label rows plus the stream indices of the items they label."""
    labels: Array
    sources: Array

    def __post_init__(self):
        if np.any(self.labels < 0.0) or np.any(np.abs(self.labels.sum(axis=1) - 1.0) > 1e-9):
            raise TargetError("soft label rows must be distributions")


class SoftLabelNet:
    """Probability-to-soft-label MLP with an EMA'd frozen copy of itself.

    ``omega`` holds the live weights, ``omega_old`` the snapshot taken at the
    last task boundary; ``beta`` weights the snapshot in the output mix.
    Hidden widths default to (200, 200); tiny instances shrink them so finite
    difference oracles over the full weight vector stay cheap.
    """

    def __init__(self, num_classes: int, hidden_dims: tuple[int, ...] = (200, 200),
                 beta: float = 0.9, init_seed: int = 0):
        if not 0.0 <= beta <= 1.0:
            raise ShapeError(f"beta must lie in [0, 1], got {beta}")
        self.num_classes = num_classes
        self.beta = float(beta)
        dims = [num_classes, *hidden_dims, num_classes]
        self._n_layers = len(dims) - 1
        rng = np.random.default_rng(init_seed)
        self.omega = ad.ParameterSet.build(_he_mlp_params(rng, dims))
        self.omega_old = self.omega.copy()

    def _check_probs(self, probs: Array) -> Array:
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[1] != self.num_classes:
            raise ShapeError(f"expected (B, {self.num_classes}) probabilities")
        ad.check_target_rows(probs)
        return np.ascontiguousarray(probs)

    def raw_dist(self, params: ad.ParameterSet, probs: Array) -> Array:
        """Value-only generator output: MLP then row softmax."""
        probs = self._check_probs(probs)
        return kernels.softmax_rows(_mlp_values(params, probs, self._n_layers))

    def raw_dist_graph(self, leaves: dict[str, ad.Tensor], probs: Array) -> ad.Tensor:
        probs = self._check_probs(probs)
        return ad.softmax_rows(_mlp_graph(leaves, probs, self._n_layers))

    def soft_labels_graph(self, probs: Array, y_onehot: Array,
                          values: Array | None = None
                          ) -> tuple[ad.Tensor, dict[str, ad.Tensor]]:
        """Differentiable label rows; gradient flows only through the live
        weights (the snapshot branch and the anchor are constants)."""
        y_onehot = np.asarray(y_onehot, dtype=np.float64)
        ad.check_target_rows(y_onehot)
        leaves = self.omega.leaves(values)
        live = self.raw_dist_graph(leaves, probs)
        old = self.raw_dist(self.omega_old, probs)
        labels = ad.ema_anchor(live, old, self.beta, y_onehot)
        return labels, leaves

    def make_soft_labels(self, classifier: Classifier, x_buf: Array,
                         y_onehot: Array, sources: Array | None = None) -> SoftLabelBatch:
        """Labels for a buffer batch; classifier probabilities are computed
        value-only, so the result carries no dependence on theta."""
        probs = classifier.probs(x_buf)
        labels, _ = self.soft_labels_graph(probs, y_onehot)
        if sources is None:
            sources = np.arange(len(labels.data), dtype=np.int64)
        return SoftLabelBatch(labels=labels.data, sources=np.asarray(sources, dtype=np.int64))

    def snapshot_old(self) -> None:
        """Freeze the live weights as the EMA reference; call at task end."""
        self.omega_old = self.omega.copy()
