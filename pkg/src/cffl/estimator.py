"""Small convolutional channel estimator with hand-written backprop.

A :class:`LayeredModel` is an ordered list of :class:`Layer` objects. Each
layer is a dense or 1-D convolution, optionally followed by batch
normalization (inference form: fixed running statistics, trainable scale and
shift) and an activation. ``shared_split`` marks how many leading layers form
the shared part exchanged in heterogeneous FL; the remaining layers are the
distillation part.

Gradients are plain lists of arrays aligned with :meth:`LayeredModel.params`.
Everything runs in float64 so finite-difference checks stay tight.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

BN_EPS = 1e-5
NMSE_FLOOR_DB = -300.0
ACTIVATIONS = ("relu", "identity")

Gradient = list  # list[np.ndarray], congruent with LayeredModel.params()


class NeighborContributionError(ValueError):
    """A neighbor offers fewer samples than the contribution floor ``a * D_k``."""


@dataclass
class Layer:
    kind: str  # "dense" | "conv1d"
    weight: np.ndarray  # dense: (out, in); conv1d: (c_out, c_in, kernel)
    bias: np.ndarray
    activation: str = "relu"
    bn_gamma: np.ndarray | None = None
    bn_beta: np.ndarray | None = None
    bn_mean: np.ndarray | None = None  # running statistics, not trained
    bn_var: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("dense", "conv1d"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        expected_ndim = 2 if self.kind == "dense" else 3
        if self.weight.ndim != expected_ndim or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"{self.kind} layer has inconsistent weight/bias shapes "
                             f"{self.weight.shape}/{self.bias.shape}")

    @property
    def has_bn(self) -> bool:
        return self.bn_gamma is not None

    def params(self) -> list[np.ndarray]:
        out = [self.weight, self.bias]
        if self.has_bn:
            out += [self.bn_gamma, self.bn_beta]
        return out

    def set_params(self, values) -> None:
        self.weight, self.bias = values[0], values[1]
        if self.has_bn:
            self.bn_gamma, self.bn_beta = values[2], values[3]

    def descriptor(self) -> dict:
        return {"kind": self.kind, "weight_shape": list(self.weight.shape),
                "activation": self.activation, "batchnorm": self.has_bn}

    def structure(self) -> tuple:
        return (self.kind, self.weight.shape, self.activation, self.has_bn)


@dataclass
class LayeredModel:
    layers: list[Layer]
    shared_split: int = 0

    def __post_init__(self):
        if not 0 <= self.shared_split <= len(self.layers):
            raise ValueError("shared_split out of range")

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def set_params(self, values) -> None:
        i = 0
        for layer in self.layers:
            n = len(layer.params())
            layer.set_params(list(values[i:i + n]))
            i += n
        if i != len(values):
            raise ValueError("parameter list does not match model")

    def copy(self) -> "LayeredModel":
        return copy.deepcopy(self)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def param_slice(self, first: int, last: int | None = None) -> slice:
        """Index range into ``params()`` covering layers ``first:last``."""
        last = len(self.layers) if last is None else last
        counts = [len(layer.params()) for layer in self.layers]
        return slice(sum(counts[:first]), sum(counts[:last]))

    @property
    def shared(self) -> list[Layer]:
        return self.layers[:self.shared_split]

    @property
    def distill(self) -> list[Layer]:
        return self.layers[self.shared_split:]

    def shared_params(self) -> list[np.ndarray]:
        return [p for layer in self.shared for p in layer.params()]

    def shared_size(self) -> int:
        return sum(p.size for p in self.shared_params())

    def structure(self) -> list[tuple]:
        return [layer.structure() for layer in self.layers]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()]) if self.layers else np.zeros(0)


@dataclass
class TrainBatch:
    inputs: np.ndarray  # (batch, 2, pilot_length)
    targets: np.ndarray  # (batch, 2 * N * M)

    def __post_init__(self):
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets disagree on batch size")

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, index) -> "TrainBatch":
        return TrainBatch(self.inputs[index], self.targets[index])


# ---------------------------------------------------------------------------
# construction

def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def dense_layer(rng, n_in: int, n_out: int, activation="identity") -> Layer:
    return Layer("dense", glorot(rng, (n_out, n_in), n_in, n_out), np.zeros(n_out), activation)


def conv_layer(rng, c_in: int, c_out: int, kernel: int, activation="relu", batchnorm=True) -> Layer:
    w = glorot(rng, (c_out, c_in, kernel), c_in * kernel, c_out * kernel)
    layer = Layer("conv1d", w, np.zeros(c_out), activation)
    if batchnorm:
        layer.bn_gamma, layer.bn_beta = np.ones(c_out), np.zeros(c_out)
        layer.bn_mean, layer.bn_var = np.zeros(c_out), np.ones(c_out)
    return layer


def reinit_layers(model: LayeredModel, first: int, rng: np.random.Generator) -> LayeredModel:
    """Copy of ``model`` with layers ``first:`` freshly initialized."""
    out = model.copy()
    for layer in out.layers[first:]:
        if layer.kind == "dense":
            n_out, n_in = layer.weight.shape
            layer.weight = glorot(rng, layer.weight.shape, n_in, n_out)
        else:
            c_out, c_in, k = layer.weight.shape
            layer.weight = glorot(rng, layer.weight.shape, c_in * k, c_out * k)
        layer.bias = np.zeros_like(layer.bias)
        if layer.has_bn:
            layer.bn_gamma = np.ones_like(layer.bn_gamma)
            layer.bn_beta = np.zeros_like(layer.bn_beta)
    return out


def build_estimator(pilot_length: int, n_out: int, conv_layers: int = 3, channels: int = 16,
                    kernel: int = 3, batchnorm: bool = True, shared_split: int = 0,
                    rng: np.random.Generator | None = None) -> LayeredModel:
    """``conv_layers`` conv/BN/ReLU blocks followed by one linear dense head.

    Input is ``(batch, 2, pilot_length)``; ``n_out`` is ``2 * N * M``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    layers, c_in = [], 2
    for _ in range(conv_layers):
        layers.append(conv_layer(rng, c_in, channels, kernel, "relu", batchnorm))
        c_in = channels
    layers.append(dense_layer(rng, c_in * pilot_length, n_out, "identity"))
    return LayeredModel(layers, shared_split)


# ---------------------------------------------------------------------------
# data layout

def dataset_to_batch(ds) -> TrainBatch:
    """Real-valued network view of a :class:`~cffl.channel.PilotDataset`.

    Inputs stack real and imaginary pilots as two feature maps. Targets put
    the real part of ``vec(h)`` first, then the imaginary part.
    """
    y = ds.received
    inputs = np.stack([y.real, y.imag], axis=1)
    h = ds.truth.reshape(len(ds), -1)
    return TrainBatch(inputs, np.concatenate([h.real, h.imag], axis=1))


def targets_to_channels(out: np.ndarray, n: int, m: int) -> np.ndarray:
    half = n * m
    return (out[:, :half] + 1j * out[:, half:]).reshape(-1, n, m)


# ---------------------------------------------------------------------------
# forward / backward

def _pad(kernel: int) -> tuple[int, int]:
    left = kernel // 2
    return left, kernel - 1 - left


def _im2col(x: np.ndarray, kernel: int) -> np.ndarray:
    # (B, C, P) -> (B, P, C * kernel) with "same" zero padding
    left, right = _pad(kernel)
    xp = np.pad(x, ((0, 0), (0, 0), (left, right)))
    win = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=2)  # (B, C, P, k)
    b, c, p, k = win.shape
    return win.transpose(0, 2, 1, 3).reshape(b, p, c * k)


def _col2im(dcol: np.ndarray, c: int, kernel: int) -> np.ndarray:
    b, p, _ = dcol.shape
    left, right = _pad(kernel)
    d = dcol.reshape(b, p, c, kernel)
    dxp = np.zeros((b, c, p + left + right))
    for j in range(kernel):
        dxp[:, :, j:j + p] += d[:, :, :, j].transpose(0, 2, 1)
    return dxp[:, :, left:left + p]


def _bn_shape(layer: Layer, z: np.ndarray):
    return (1, -1, 1) if z.ndim == 3 else (1, -1)


def _layer_forward(layer: Layer, x: np.ndarray):
    cache = {"x_shape": x.shape}
    if layer.kind == "dense":
        x2 = x.reshape(x.shape[0], -1)
        if x2.shape[1] != layer.weight.shape[1]:
            raise ValueError(f"dense layer expects {layer.weight.shape[1]} inputs, got {x2.shape[1]}")
        cache["x"] = x2
        z = x2 @ layer.weight.T + layer.bias
    else:
        if x.ndim != 3 or x.shape[1] != layer.weight.shape[1]:
            raise ValueError(f"conv1d layer expects (batch, {layer.weight.shape[1]}, length), got {x.shape}")
        c_out, c_in, k = layer.weight.shape
        col = _im2col(x, k)
        cache["col"] = col
        z = (col @ layer.weight.reshape(c_out, -1).T).transpose(0, 2, 1) + layer.bias[None, :, None]
    if layer.has_bn:
        shape = _bn_shape(layer, z)
        inv = 1.0 / np.sqrt(layer.bn_var + BN_EPS)
        xhat = (z - layer.bn_mean.reshape(shape)) * inv.reshape(shape)
        cache["xhat"], cache["inv"] = xhat, inv
        z = layer.bn_gamma.reshape(shape) * xhat + layer.bn_beta.reshape(shape)
    if layer.activation == "relu":
        cache["mask"] = z > 0
        z = z * cache["mask"]
    return z, cache


def _layer_backward(layer: Layer, cache, dz: np.ndarray):
    if layer.activation == "relu":
        dz = dz * cache["mask"]
    grads = []
    bn_grads = []
    if layer.has_bn:
        axes = (0, 2) if dz.ndim == 3 else (0,)
        shape = _bn_shape(layer, dz)
        bn_grads = [np.sum(dz * cache["xhat"], axis=axes), np.sum(dz, axis=axes)]
        dz = dz * (layer.bn_gamma * cache["inv"]).reshape(shape)
    if layer.kind == "dense":
        dw = dz.T @ cache["x"]
        db = dz.sum(axis=0)
        dx = (dz @ layer.weight).reshape(cache["x_shape"])
    else:
        c_out, c_in, k = layer.weight.shape
        dzt = dz.transpose(0, 2, 1)  # (B, P, c_out)
        col = cache["col"]
        dw = (dzt.reshape(-1, c_out).T @ col.reshape(-1, col.shape[-1])).reshape(layer.weight.shape)
        db = dz.sum(axis=(0, 2))
        dx = _col2im(dzt @ layer.weight.reshape(c_out, -1), c_in, k)
    grads = [dw, db] + bn_grads
    return grads, dx


def forward_cache(model: LayeredModel, inputs: np.ndarray):
    caches, x = [], np.asarray(inputs, dtype=float)
    for layer in model.layers:
        x, cache = _layer_forward(layer, x)
        caches.append(cache)
    return x, caches


def forward(model: LayeredModel, inputs: np.ndarray) -> np.ndarray:
    """Network output for a batch of inputs."""
    return forward_cache(model, inputs)[0]


def backward_from_output(model: LayeredModel, caches, dout: np.ndarray, first_layer: int = 0):
    """Backpropagate ``dout`` (gradient w.r.t. the output).

    Returns ``(grads, dx)`` where ``grads`` covers every parameter of the
    model; layers before ``first_layer`` get zero gradients and the pass
    stops early there (``dx`` is then ``None``).
    """
    grads_per_layer = [None] * len(model.layers)
    d = dout
    for i in range(len(model.layers) - 1, first_layer - 1, -1):
        grads_per_layer[i], d = _layer_backward(model.layers[i], caches[i], d)
    for i in range(first_layer):
        grads_per_layer[i] = [np.zeros_like(p) for p in model.layers[i].params()]
    flat = [g for gl in grads_per_layer for g in gl]
    return flat, (d if first_layer == 0 else None)


def mse_loss(model: LayeredModel, batch: TrainBatch) -> float:
    """Mean over samples of the squared Euclidean estimation error."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    diff = forward(model, batch.inputs) - batch.targets
    return float(np.sum(diff ** 2) / len(batch))


def loss_and_grad(model: LayeredModel, batch: TrainBatch, weight: float = 1.0, first_layer: int = 0):
    if len(batch) == 0:
        raise ValueError("empty batch")
    out, caches = forward_cache(model, batch.inputs)
    if out.shape != batch.targets.shape:
        raise ValueError(f"model output {out.shape} does not match targets {batch.targets.shape}")
    diff = out - batch.targets
    loss = weight * float(np.sum(diff ** 2) / len(batch))
    grads, _ = backward_from_output(model, caches, (2.0 * weight / len(batch)) * diff, first_layer)
    return loss, grads


def backward(model: LayeredModel, batch: TrainBatch) -> Gradient:
    """Exact gradient of :func:`mse_loss` with respect to ``model.params()``."""
    return loss_and_grad(model, batch)[1]


def _check_congruent(model: LayeredModel, grad) -> list[np.ndarray]:
    params = model.params()
    if len(params) != len(grad) or any(p.shape != np.shape(g) for p, g in zip(params, grad)):
        raise ValueError("gradient is not congruent with the model")
    return params


def sgd_step(model: LayeredModel, grad: Gradient, learning_rate: float) -> LayeredModel:
    """New model with parameters ``w - learning_rate * g``."""
    if learning_rate <= 0:
        raise ValueError("learning rate must be positive")
    params = _check_congruent(model, grad)
    out = model.copy()
    out.set_params([p - learning_rate * g for p, g in zip(params, grad)])
    return out


def add_grads(a: Gradient, b: Gradient, scale: float = 1.0) -> Gradient:
    return [x + scale * y for x, y in zip(a, b)]


def min_neighbor_samples(own_size: int, share: float = 0.1) -> int:
    """Smallest neighbor contribution accepted for a user holding ``own_size`` samples."""
    return math.ceil(share * own_size - 1e-9)


def local_train(model: LayeredModel, own_data: TrainBatch, neighbor_data=(), epochs: int = 1,
                learning_rate: float = 1e-3, batch_size: int | None = 64,
                rng: np.random.Generator | None = None, share: float = 0.1,
                own_weight: float = 1.0, first_layer: int = 0) -> LayeredModel:
    """Mini-batch SGD on the own-plus-neighbors objective.

    The objective is the mean loss on the own data plus, for every neighbor,
    the mean loss on that neighbor's contribution. Each epoch takes
    ``ceil(D_own / batch_size)`` steps; every dataset is shuffled and split
    into that many chunks so all terms are visited once per epoch.
    ``batch_size=None`` means full-batch steps. Layers before ``first_layer``
    stay frozen.
    """
    floor = min_neighbor_samples(len(own_data), share)
    for z, nb in enumerate(neighbor_data):
        if len(nb) < floor:
            raise NeighborContributionError(
                f"neighbor {z} contributes {len(nb)} samples, below the floor {floor}")
    rng = np.random.default_rng(0) if rng is None else rng
    datasets = [own_data, *neighbor_data]
    weights = [own_weight] + [1.0] * len(neighbor_data)
    n_steps = 1 if batch_size is None else max(1, math.ceil(len(own_data) / batch_size))
    for _ in range(epochs):
        chunks = []
        for ds in datasets:
            order = np.arange(len(ds)) if batch_size is None else rng.permutation(len(ds))
            chunks.append(np.array_split(order, n_steps))
        for step in range(n_steps):
            total = None
            for ds, ch, w in zip(datasets, chunks, weights):
                if len(ch[step]) == 0:
                    continue
                _, g = loss_and_grad(model, ds.subset(ch[step]), w, first_layer)
                total = g if total is None else add_grads(total, g)
            model = sgd_step(model, total, learning_rate)
    return model


# ---------------------------------------------------------------------------
# metrics and batch-norm calibration

def nmse_linear(estimate: np.ndarray, truth: np.ndarray) -> float:
    """``||estimate - truth||^2 / ||truth||^2`` over all entries."""
    denom = float(np.sum(np.abs(truth) ** 2))
    if denom == 0:
        raise ValueError("NMSE undefined for an all-zero true channel")
    return float(np.sum(np.abs(np.asarray(estimate) - truth) ** 2)) / denom


def nmse(estimate: np.ndarray, truth: np.ndarray) -> float:
    """NMSE in dB; a perfect estimate reports ``NMSE_FLOOR_DB``."""
    ratio = nmse_linear(estimate, truth)
    if ratio == 0:
        return NMSE_FLOOR_DB
    return max(NMSE_FLOOR_DB, 10.0 * math.log10(ratio))


def batch_nmse(model: LayeredModel, batch: TrainBatch) -> float:
    """Linear NMSE of the model on a batch (real target layout)."""
    return nmse_linear(forward(model, batch.inputs), batch.targets)


def calibrate_batchnorm(model: LayeredModel, inputs: np.ndarray) -> LayeredModel:
    """Set running statistics from a forward pass over ``inputs``.

    Statistics are taken layer by layer on pre-normalization activations,
    as a training-mode pass would record them.
    """
    out = model.copy()
    x = np.asarray(inputs, dtype=float)
    for layer in out.layers:
        if layer.has_bn:
            z, _ = _layer_forward(Layer(layer.kind, layer.weight, layer.bias, "identity"), x)
            axes = (0, 2) if z.ndim == 3 else (0,)
            layer.bn_mean, layer.bn_var = z.mean(axis=axes), z.var(axis=axes)
        x, _ = _layer_forward(layer, x)
    return out
