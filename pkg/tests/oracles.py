"""Independent reference implementations used by the tests."""

import numpy as np

from cffl import estimator as est


def fd_gradient(loss_fn, params, step=1e-5):
    """Central finite differences of ``loss_fn(params)`` for every coordinate."""
    grads = []
    for i, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[i][idx] += step
            minus[i][idx] -= step
            g[idx] = (loss_fn(plus) - loss_fn(minus)) / (2 * step)
        grads.append(g)
    return grads


def max_rel_error(a, b, floor=1e-7):
    worst = 0.0
    for x, y in zip(a, b):
        denom = np.maximum(np.abs(x) + np.abs(y), floor)
        worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst


def model_loss_fn(model, batch):
    def f(params):
        m = model.copy()
        m.set_params(params)
        return est.mse_loss(m, batch)
    return f


def loop_forward(model, x):
    """Straight-line forward pass with explicit loops over positions."""
    out = np.asarray(x, dtype=float)
    for layer in model.layers:
        if layer.kind == "dense":
            v = out.reshape(out.shape[0], -1)
            z = np.array([[layer.weight[o] @ v[b] + layer.bias[o] for o in range(layer.weight.shape[0])]
                          for b in range(v.shape[0])])
        else:
            c_out, c_in, k = layer.weight.shape
            bsz, _, length = out.shape
            left = k // 2
            z = np.zeros((bsz, c_out, length))
            for b in range(bsz):
                for o in range(c_out):
                    for t in range(length):
                        acc = layer.bias[o]
                        for c in range(c_in):
                            for j in range(k):
                                src = t + j - left
                                if 0 <= src < length:
                                    acc += layer.weight[o, c, j] * out[b, c, src]
                        z[b, o, t] = acc
        if layer.has_bn:
            shape = (1, -1, 1) if z.ndim == 3 else (1, -1)
            z = (layer.bn_gamma.reshape(shape) * (z - layer.bn_mean.reshape(shape))
                 / np.sqrt(layer.bn_var.reshape(shape) + est.BN_EPS) + layer.bn_beta.reshape(shape))
        if layer.activation == "relu":
            z = np.maximum(z, 0)
        out = z
    return out


def random_model(rng, length=6, kinds=None):
    """Small random model mixing conv and dense layers with random activations."""
    layers, c = [], 2
    n_conv = int(rng.integers(0, 3)) if kinds is None else kinds
    for _ in range(n_conv):
        c_out = int(rng.integers(1, 4))
        layer = est.conv_layer(rng, c, c_out, int(rng.integers(1, 5)), str(rng.choice(["relu", "identity"])),
                               bool(rng.integers(0, 2)))
        if layer.has_bn:
            layer.bn_gamma = rng.uniform(0.5, 1.5, c_out)
            layer.bn_beta = rng.normal(0, 0.3, c_out)
            layer.bn_mean = rng.normal(0, 0.3, c_out)
            layer.bn_var = rng.uniform(0.5, 2.0, c_out)
        layer.bias = rng.normal(0, 0.3, c_out)
        layers.append(layer)
        c = c_out
    width = c * length
    hidden = int(rng.integers(2, 5))
    layers.append(est.dense_layer(rng, width, hidden, str(rng.choice(["relu", "identity"]))))
    layers[-1].bias = rng.normal(0, 0.3, hidden)
    layers.append(est.dense_layer(rng, hidden, 3, "identity"))
    return est.LayeredModel(layers)


def random_batch(rng, n=4, length=6, n_out=3):
    return est.TrainBatch(rng.standard_normal((n, 2, length)), rng.standard_normal((n, n_out)))
