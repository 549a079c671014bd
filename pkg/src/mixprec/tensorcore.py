"""Dense sequential networks with loss, gradients and Hessian-vector products.

Tensors are plain ``numpy`` arrays. Weights of a dense layer have shape
``(out_features, in_features)`` so that rows are output channels. A model is an
ordered list of layers ending in a loss head:

* ``dense``        -- ``y = x @ W.T + b``
* ``relu``/``tanh`` -- elementwise activations
* ``softmax_xent`` -- mean softmax cross-entropy against integer labels
* ``quadratic``    -- ``mean_n 0.5 * sum_k a_k * z_nk**2`` (labels ignored)

Second-order quantities are taken over one layer's weight block at a time;
cross-layer curvature is not represented here.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

DENSE = "dense"
RELU = "relu"
TANH = "tanh"
SOFTMAX_XENT = "softmax_xent"
QUADRATIC = "quadratic"

ACTIVATIONS = (RELU, TANH)
HEADS = (SOFTMAX_XENT, QUADRATIC)
KINDS = (DENSE,) + ACTIVATIONS + HEADS

DTYPE = np.float32

#: Weight count above which :func:`exact_layer_trace` refuses to run.
EXACT_TRACE_CAP = 10_000


class ModelError(ValueError):
    """Raised for malformed models, batches or layer lookups.

    ``layer_id`` names the offending layer when one is known.
    """

    def __init__(self, message: str, layer_id: str | None = None):
        super().__init__(message if layer_id is None else f"layer {layer_id!r}: {message}")
        self.layer_id = layer_id


def _frozen(a, dtype=DTYPE) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Layer:
    """One layer of a :class:`ModelGraph`.

    ``input_transform`` is applied to the operand of a dense layer's matmul
    before multiplication (used for activation quantization). It is treated
    as the identity when differentiating.
    """

    id: str
    kind: str
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    coef: np.ndarray | None = None
    input_transform: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown kind {self.kind!r}", self.id)
        for name in ("weights", "bias", "coef"):
            value = getattr(self, name)
            if value is not None:
                arr = _frozen(value)
                if not np.all(np.isfinite(arr)):
                    raise ModelError(f"non-finite {name}", self.id)
                object.__setattr__(self, name, arr)
        if self.kind == DENSE:
            if self.weights is None or self.weights.ndim != 2 or self.weights.size == 0:
                raise ModelError("dense layer needs a non-empty 2-D weight matrix", self.id)
            if self.bias is not None and self.bias.shape != (self.weights.shape[0],):
                raise ModelError(
                    f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} outputs",
                    self.id,
                )
        elif self.weights is not None or self.bias is not None:
            raise ModelError(f"{self.kind} layer cannot carry weights", self.id)
        if self.kind == QUADRATIC and (self.coef is None or self.coef.ndim != 1):
            raise ModelError("quadratic head needs a 1-D coefficient vector", self.id)

    @property
    def weight_count(self) -> int:
        return 0 if self.weights is None else int(self.weights.size)

    @property
    def bias_count(self) -> int:
        return 0 if self.bias is None else int(self.bias.size)


class ModelGraph:
    """Immutable ordered list of layers with a loss head at the end."""

    def __init__(self, layers: Iterable[Layer]):
        self.layers: tuple[Layer, ...] = tuple(layers)
        if not self.layers:
            raise ModelError("model has no layers")
        ids = [layer.id for layer in self.layers]
        seen = set()
        for layer_id in ids:
            if layer_id in seen:
                raise ModelError("duplicate layer id", layer_id)
            seen.add(layer_id)
        self._index = {layer_id: i for i, layer_id in enumerate(ids)}
        if not any(layer.kind == DENSE for layer in self.layers):
            raise ModelError("model needs at least one weighted layer")
        for layer in self.layers[:-1]:
            if layer.kind in HEADS:
                raise ModelError("loss head must be the last layer", layer.id)
        if self.layers[-1].kind not in HEADS:
            raise ModelError("last layer must be a loss head", self.layers[-1].id)

        width = None
        for layer in self.layers:
            if layer.kind == DENSE:
                out_f, in_f = layer.weights.shape
                if width is not None and in_f != width:
                    raise ModelError(f"expects {in_f} inputs but receives {width}", layer.id)
                width = out_f
            elif layer.kind == QUADRATIC and layer.coef.shape[0] != width:
                raise ModelError(
                    f"{layer.coef.shape[0]} coefficients for width {width}", layer.id
                )
        first = next(layer for layer in self.layers if layer.kind == DENSE)
        self.input_dim = int(first.weights.shape[1])
        self.n_classes = int(width)

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def index(self, layer_id: str) -> int:
        try:
            return self._index[layer_id]
        except KeyError:
            raise ModelError("unknown layer id", layer_id) from None

    def layer(self, layer_id: str) -> Layer:
        return self.layers[self.index(layer_id)]

    def weighted_layers(self) -> list[Layer]:
        return [layer for layer in self.layers if layer.kind == DENSE and layer.weight_count > 0]

    def weighted_ids(self) -> list[str]:
        return [layer.id for layer in self.weighted_layers()]

    def with_layers(self, updates: dict[str, Layer]) -> "ModelGraph":
        """Return a new graph with the named layers swapped out."""
        for layer_id in updates:
            self.index(layer_id)
        return ModelGraph(updates.get(layer.id, layer) for layer in self.layers)

    def with_weights(self, weights: dict[str, np.ndarray]) -> "ModelGraph":
        return self.with_layers(
            {k: replace(self.layer(k), weights=w) for k, w in weights.items()}
        )


@dataclass(frozen=True, eq=False)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        inputs = _frozen(self.inputs)
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        labels.setflags(write=False)
        if inputs.ndim != 2:
            raise ModelError(f"inputs must be 2-D, got shape {inputs.shape}")
        if labels.ndim != 1 or labels.shape[0] != inputs.shape[0]:
            raise ModelError("labels must be 1-D with one entry per input row")
        if inputs.shape[0] < 1:
            raise ModelError("batch is empty")
        if not np.all(np.isfinite(inputs)):
            raise ModelError("non-finite inputs")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return int(self.inputs.shape[0])


@dataclass(frozen=True)
class EvaluationResult:
    loss: float
    accuracy: float
    correct: int
    n: int


def concat_batches(batches: Sequence[Batch]) -> Batch:
    return Batch(
        np.concatenate([b.inputs for b in batches]), np.concatenate([b.labels for b in batches])
    )


# --------------------------------------------------------------------------
# internals


def _check_batch(model: ModelGraph, batch: Batch):
    first = model.layers[0]
    if batch.inputs.shape[1] != model.input_dim:
        raise ModelError(
            f"expects {model.input_dim} input features but batch has {batch.inputs.shape[1]}",
            first.id,
        )
    if model.layers[-1].kind == SOFTMAX_XENT:
        if batch.labels.min() < 0 or batch.labels.max() >= model.n_classes:
            raise ModelError(f"labels outside [0, {model.n_classes})", model.layers[-1].id)


def _forward_cache(model: ModelGraph, inputs: np.ndarray, dtype) -> list[np.ndarray]:
    """Return ``acts`` where ``acts[k]`` is the input seen by layer ``k``.

    For dense layers this is the (possibly transformed) matmul operand. The
    last entry is the head input, i.e. the logits.
    """
    acts = []
    x = inputs.astype(dtype, copy=False)
    for layer in model.layers:
        if layer.kind == DENSE:
            if layer.input_transform is not None:
                x = np.asarray(layer.input_transform(x), dtype=dtype)
            acts.append(x)
            x = x @ layer.weights.astype(dtype, copy=False).T
            if layer.bias is not None:
                x = x + layer.bias.astype(dtype, copy=False)
        elif layer.kind == RELU:
            acts.append(x)
            x = np.maximum(x, 0)
        elif layer.kind == TANH:
            acts.append(x)
            x = np.tanh(x)
        else:
            acts.append(x)
    return acts


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _head_loss_grad(head: Layer, z: np.ndarray, labels: np.ndarray):
    n = z.shape[0]
    if head.kind == SOFTMAX_XENT:
        zmax = z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
        loss = float(np.mean(lse - z[np.arange(n), labels], dtype=np.float64))
        g = _softmax(z)
        g[np.arange(n), labels] -= 1
        return loss, g / n
    a = head.coef.astype(z.dtype, copy=False)
    loss = float(np.mean(0.5 * np.sum(a * z * z, axis=1, dtype=np.float64)))
    return loss, a * z / n


def _act_derivs(layer: Layer, pre: np.ndarray):
    if layer.kind == TANH:
        t = np.tanh(pre)
        d1 = 1 - t * t
        return d1, -2 * t * d1
    d1 = (pre > 0).astype(pre.dtype)
    return d1, None  # relu'' = 0 everywhere


def _weighted_index(model: ModelGraph, layer_id: str) -> int:
    idx = model.index(layer_id)
    if model.layers[idx].kind != DENSE:
        raise ModelError("layer has no weights", layer_id)
    return idx


# --------------------------------------------------------------------------
# public operations


def forward(model: ModelGraph, batch: Batch, dtype=DTYPE) -> EvaluationResult:
    """Evaluate mean loss and top-1 accuracy (ties go to the lowest class)."""
    _check_batch(model, batch)
    z = _forward_cache(model, batch.inputs, dtype)[-1]
    loss, _ = _head_loss_grad(model.layers[-1], z, batch.labels)
    correct = int(np.count_nonzero(np.argmax(z, axis=1) == batch.labels))
    return EvaluationResult(loss=loss, accuracy=correct / len(batch), correct=correct, n=len(batch))


def logits(model: ModelGraph, inputs: np.ndarray, dtype=DTYPE) -> np.ndarray:
    return _forward_cache(model, np.asarray(inputs), dtype)[-1]


def loss_and_gradients(
    model: ModelGraph, batch: Batch, dtype=DTYPE
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss and ``dL/dW`` for every dense layer, in one backward pass."""
    _check_batch(model, batch)
    acts = _forward_cache(model, batch.inputs, dtype)
    loss, g = _head_loss_grad(model.layers[-1], acts[-1], batch.labels)
    grads = {}
    for k in range(len(model.layers) - 2, -1, -1):
        layer = model.layers[k]
        if layer.kind == DENSE:
            grads[layer.id] = g.T @ acts[k]
            if k:
                g = g @ layer.weights.astype(dtype, copy=False)
        else:
            g = _act_derivs(layer, acts[k])[0] * g
    return loss, {lid: grads[lid] for lid in model.weighted_ids()}


def gradient(model: ModelGraph, batch: Batch, layer_id: str, dtype=DTYPE) -> np.ndarray:
    """Gradient of the mean loss with respect to one layer's weights."""
    _weighted_index(model, layer_id)
    return loss_and_gradients(model, batch, dtype)[1][layer_id]


class LayerHessian:
    """Hessian-vector products on one layer's diagonal weight block.

    The forward pass is computed once; each :meth:`matvec` runs a forward
    tangent pass (direction on that layer's weights only) followed by the
    differentiated backward pass.
    """

    def __init__(self, model: ModelGraph, batch: Batch, layer_id: str, dtype=DTYPE):
        self.idx = _weighted_index(model, layer_id)
        _check_batch(model, batch)
        self.model, self.layer_id, self.dtype = model, layer_id, dtype
        self.shape = model.layers[self.idx].weights.shape
        self.size = model.layers[self.idx].weight_count
        self.acts = _forward_cache(model, batch.inputs, dtype)
        z = self.acts[-1]
        _, self.g_head = _head_loss_grad(model.layers[-1], z, batch.labels)
        self.probs = _softmax(z) if model.layers[-1].kind == SOFTMAX_XENT else None
        self.derivs = {
            k: _act_derivs(layer, self.acts[k])
            for k, layer in enumerate(model.layers[:-1])
            if layer.kind in ACTIVATIONS
        }
        self.n = z.shape[0]

    def matvec(self, v: np.ndarray) -> np.ndarray:
        layers, idx, dtype, acts = self.model.layers, self.idx, self.dtype, self.acts
        v = np.asarray(v, dtype=dtype)
        if v.shape != self.shape:
            if v.size != self.size:
                raise ModelError(f"direction shape {v.shape} does not match {self.shape}", self.layer_id)
            v = v.reshape(self.shape)

        r_acts: list[np.ndarray | None] = [None] * len(layers)
        r = None
        for k, layer in enumerate(layers[:-1]):
            r_acts[k] = r
            if layer.kind == DENSE:
                w = layer.weights.astype(dtype, copy=False)
                out = None if r is None else r @ w.T
                if k == idx:
                    out = acts[k] @ v.T if out is None else out + acts[k] @ v.T
                r = out
            elif r is not None:
                r = self.derivs[k][0] * r
        if self.probs is not None:
            p = self.probs
            rg = p * (r - np.sum(p * r, axis=1, keepdims=True)) / self.n
        else:
            rg = layers[-1].coef.astype(dtype, copy=False) * r / self.n

        g = self.g_head
        for k in range(len(layers) - 2, idx - 1, -1):
            layer = layers[k]
            if layer.kind == DENSE:
                if k == idx:
                    out = rg.T @ acts[k]
                    if r_acts[k] is not None:
                        out = out + g.T @ r_acts[k]
                    return out
                w = layer.weights.astype(dtype, copy=False)
                g, rg = g @ w, rg @ w
            else:
                d1, d2 = self.derivs[k]
                new_rg = d1 * rg
                if d2 is not None:
                    new_rg = new_rg + d2 * r_acts[k] * g
                g, rg = d1 * g, new_rg
        raise AssertionError("unreachable")  # pragma: no cover


def hvp(model: ModelGraph, batch: Batch, layer_id: str, v: np.ndarray, dtype=DTYPE) -> np.ndarray:
    """Hessian-vector product ``H v`` on the diagonal weight block of ``layer_id``."""
    return LayerHessian(model, batch, layer_id, dtype).matvec(v)


def exact_layer_trace(model: ModelGraph, batch: Batch, layer_id: str, dtype=np.float64) -> float:
    """Trace of the layer's Hessian block from one HVP per basis vector."""
    idx = _weighted_index(model, layer_id)
    size = model.layers[idx].weight_count
    if size > EXACT_TRACE_CAP:
        raise ModelError(f"{size} weights exceeds exact-trace cap {EXACT_TRACE_CAP}", layer_id)
    op = LayerHessian(model, batch, layer_id, dtype)
    total = 0.0
    e = np.zeros(size, dtype=dtype)
    for k in range(size):
        e[k] = 1
        total += float(op.matvec(e).ravel()[k])
        e[k] = 0
    return total
