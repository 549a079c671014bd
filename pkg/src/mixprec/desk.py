"""Small self-contained problems for demos and tests.

``gaussian_clusters`` draws a labelled k-class mixture and ``mlp`` builds a
tanh/relu multilayer perceptron. ``fit`` runs plain full-batch gradient
descent so the demo model has a meaningful baseline accuracy; it exists only
to manufacture fixtures.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .rng import stream
from .tensorcore import DENSE, SOFTMAX_XENT, Batch, Layer, ModelGraph, loss_and_gradients


def gaussian_clusters(
    n: int, n_classes: int = 4, dim: int = 8, seed: int = 42, spread: float = 1.0, separation: float = 2.5
) -> Batch:
    rng = stream(seed, "clusters/centers")
    centers = rng.normal(size=(n_classes, dim)) * separation
    rng = stream(seed, "clusters/samples")
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    inputs = centers[labels] + spread * rng.normal(size=(n, dim))
    return Batch(inputs.astype(np.float32), labels)


def mlp(
    widths: Sequence[int], seed: int = 42, activation: str = "tanh", bias: bool = True, gain: float = 1.0
) -> ModelGraph:
    """Dense layers ``fc0..`` with ``activation`` in between and a softmax head."""
    layers = []
    n_dense = len(widths) - 1
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        rng = stream(seed, "mlp/init", i)
        w = rng.normal(size=(fan_out, fan_in)) * gain / np.sqrt(fan_in)
        b = rng.normal(size=fan_out) * 0.1 if bias else None
        layers.append(Layer(f"fc{i}", DENSE, weights=w, bias=b))
        if i < n_dense - 1:
            layers.append(Layer(f"act{i}", activation))
    layers.append(Layer("head", SOFTMAX_XENT))
    return ModelGraph(layers)


def fit(model: ModelGraph, batch: Batch, steps: int = 200, lr: float = 0.5) -> ModelGraph:
    """Full-batch gradient descent on the weights (biases stay fixed)."""
    weights = {l.id: l.weights.astype(np.float32) for l in model.weighted_layers()}
    for _ in range(steps):
        _, grads = loss_and_gradients(model, batch)
        weights = {k: w - lr * grads[k] for k, w in weights.items()}
        model = model.with_weights(weights)
    return model


def desk_problem(seed: int = 42, n_calib: int = 2048, n_layers: int = 12, width: int = 16):
    """The 12-layer tanh MLP on a 4-class Gaussian cluster task."""
    calib = gaussian_clusters(n_calib, n_classes=4, dim=8, seed=seed, separation=1.0)
    widths = [8] + [width] * (n_layers - 1) + [4]
    model = fit(mlp(widths, seed=seed, gain=1.2), calib)
    return model, calib
