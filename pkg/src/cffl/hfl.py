"""Heterogeneous FL: a deep server model and shallow user models share a prefix.

The server model ``W_g`` and the user model ``W_f`` both start with
``shared_split`` structurally identical layers (the shared part). Only that
prefix travels on the uplink. The server trains its own suffix on data it
holds, then distills itself into a fresh user-shaped model whose shared
prefix is copied from the server and kept frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import estimator as est
from .federation import BYTES_PER_PARAM, RoundReport


@dataclass
class HflPair:
    global_model: est.LayeredModel
    local_template: est.LayeredModel
    server_data: est.TrainBatch

    def __post_init__(self):
        check_compatible(self.global_model, self.local_template)
        if len(self.global_model.layers) <= len(self.local_template.layers):
            raise ValueError("the global model must have strictly more layers than the local one")


def check_compatible(global_model: est.LayeredModel, local_model: est.LayeredModel) -> None:
    if global_model.shared_split != local_model.shared_split:
        raise ValueError("shared prefixes have different depths")
    if global_model.structure()[:global_model.shared_split] != local_model.structure()[:local_model.shared_split]:
        raise ValueError("shared parts of the global and local models differ in structure")


def build_pair(pilot_length: int, n_out: int, server_data: est.TrainBatch, global_conv: int = 5,
               local_conv: int = 3, shared_split: int = 2, channels: int = 16, kernel: int = 3,
               batchnorm: bool = True, rng: np.random.Generator | None = None) -> HflPair:
    rng = np.random.default_rng(0) if rng is None else rng
    w_g = est.build_estimator(pilot_length, n_out, global_conv, channels, kernel, batchnorm, shared_split, rng)
    w_g = est.calibrate_batchnorm(w_g, server_data.inputs)
    w_f = est.build_estimator(pilot_length, n_out, local_conv, channels, kernel, batchnorm, shared_split, rng)
    w_f = _with_shared(w_f, w_g)
    w_f = calibrate_from(w_f, server_data.inputs, shared_split)
    return HflPair(w_g, w_f, server_data)


def _with_shared(model: est.LayeredModel, source: est.LayeredModel) -> est.LayeredModel:
    out = model.copy()
    for i in range(model.shared_split):
        out.layers[i] = source.layers[i].__class__(**{k: (np.copy(v) if isinstance(v, np.ndarray) else v)
                                                      for k, v in vars(source.layers[i]).items()})
    return out


def calibrate_from(model: est.LayeredModel, inputs: np.ndarray, first: int) -> est.LayeredModel:
    """Recalibrate batch-norm statistics of layers ``first:`` only."""
    calibrated = est.calibrate_batchnorm(model, inputs)
    out = model.copy()
    for i in range(first, len(out.layers)):
        out.layers[i].bn_mean = calibrated.layers[i].bn_mean
        out.layers[i].bn_var = calibrated.layers[i].bn_var
    return out


def aggregate_shared(local_shared_parts: list[list[np.ndarray]], beta=None) -> list[np.ndarray]:
    """``(sum_l beta_l W_l) / L`` over the uploaded shared parts.

    The divisor is the number of uploads, not the weight total, so
    non-uniform ``beta`` need not average to a convex combination.
    """
    n = len(local_shared_parts)
    if n == 0:
        raise ValueError("no shared parts to aggregate")
    beta = [1.0] * n if beta is None else list(beta)
    if len(beta) != n:
        raise ValueError("one weight per shared part is required")
    shapes = [p.shape for p in local_shared_parts[0]]
    for part in local_shared_parts[1:]:
        if [p.shape for p in part] != shapes:
            raise ValueError("shared parts are not congruent")
    out = [np.zeros(s) for s in shapes]
    for b, part in zip(beta, local_shared_parts):
        out = [o + b * p for o, p in zip(out, part)]
    return [o / n for o in out]


def set_shared_params(model: est.LayeredModel, shared: list[np.ndarray]) -> est.LayeredModel:
    out = model.copy()
    params = out.params()
    sl = out.param_slice(0, out.shared_split)
    if [p.shape for p in params[sl]] != [s.shape for s in shared]:
        raise ValueError("shared parameters do not fit the model")
    params[sl] = [np.array(s, dtype=float) for s in shared]
    out.set_params(params)
    return out


def train_distill_global(w_g: est.LayeredModel, server_data: est.TrainBatch, epochs: int = 1,
                         learning_rate: float = 1e-3, batch_size: int | None = None,
                         rng: np.random.Generator | None = None) -> est.LayeredModel:
    """Train only the distillation part of the server model on server data."""
    if len(server_data) == 0:
        raise ValueError("server dataset is empty")
    if epochs <= 0:
        return w_g.copy()
    return est.local_train(w_g, server_data, (), epochs, learning_rate, batch_size, rng,
                           first_layer=w_g.shared_split)


def distill_to_local(w_g: est.LayeredModel, local_template: est.LayeredModel, server_data: est.TrainBatch,
                     epochs: int = 200, learning_rate: float = 1e-3, target: str = "teacher",
                     rng: np.random.Generator | None = None, batch_size: int | None = None,
                     tol: float = 1e-5, patience: int = 10, return_history: bool = False):
    """User-shaped model with the server's shared part and a freshly trained suffix.

    The suffix is re-initialized, then trained (shared prefix frozen) against
    the teacher's outputs on server data, or the true labels with
    ``target="labels"``. Training stops once the loss has improved by less
    than ``tol`` (relative) over ``patience`` epochs, or after ``epochs``.
    """
    check_compatible(w_g, local_template)
    if target not in ("teacher", "labels"):
        raise ValueError(f"unknown distillation target {target!r}")
    rng = np.random.default_rng(0) if rng is None else rng
    split = w_g.shared_split
    w_f = est.reinit_layers(local_template, split, rng)
    w_f = _with_shared(w_f, w_g)
    w_f = calibrate_from(w_f, server_data.inputs, split)
    labels = est.forward(w_g, server_data.inputs) if target == "teacher" else server_data.targets
    data = est.TrainBatch(server_data.inputs, labels)
    history = [est.mse_loss(w_f, data)]
    for _ in range(epochs):
        w_f = est.local_train(w_f, data, (), 1, learning_rate, batch_size, rng, first_layer=split)
        history.append(est.mse_loss(w_f, data))
        if len(history) > patience:
            before = history[-1 - patience]
            if before == 0 or (before - history[-1]) / before < tol:
                break
    return (w_f, history) if return_history else w_f


def run_hfl_round(pair: HflPair, members, datasets: dict[int, est.TrainBatch], beta=None,
                  learning_rate: float = 1e-3, local_epochs: int = 1, batch_size: int | None = 64,
                  global_epochs: int = 1, distill_epochs: int = 200, distill_lr: float | None = None,
                  target: str = "teacher", rng: np.random.Generator | None = None,
                  eval_sets: dict[int, est.TrainBatch] | None = None, round_index: int = 0,
                  group_id: int = 0, epoch: int = 0):
    """Steps 1-6 of one heterogeneous round; returns ``(new_pair, RoundReport)``."""
    members = sorted(int(m) for m in members)
    if not members:
        raise ValueError("an HFL round needs at least one member")
    rng = np.random.default_rng(0) if rng is None else rng
    distill_lr = learning_rate if distill_lr is None else distill_lr

    # steps 1-2: broadcast W_f, members update the whole model on their own data
    uploads = []
    for m in members:
        local = est.local_train(pair.local_template, datasets[m], (), local_epochs, learning_rate,
                                batch_size, rng)
        uploads.append([np.copy(p) for p in local.shared_params()])
    # step 3: aggregate shared parts into the server model
    w_g = set_shared_params(pair.global_model, aggregate_shared(uploads, beta))
    # step 4: server trains its distillation part
    w_g = train_distill_global(w_g, pair.server_data, global_epochs, learning_rate, None, rng)
    # step 5: distill into the user shape; step 6 broadcasts it next round
    w_f = distill_to_local(w_g, pair.local_template, pair.server_data, distill_epochs, distill_lr,
                           target, rng)
    new_pair = HflPair(w_g, w_f, pair.server_data)

    k = len(members)
    uplink = k * pair.local_template.shared_size()
    downlink = k * w_f.n_params
    report = RoundReport(round_index, group_id, "hfl", members, members[0], {m: 1.0 / k for m in members},
                         2 * k, uplink + downlink, (uplink + downlink) * BYTES_PER_PARAM, epoch=epoch,
                         uplink_params=uplink, downlink_params=downlink)
    if eval_sets:
        report.nmse = {m: est.batch_nmse(w_f, eval_sets[m]) for m in members if m in eval_sets}
    return new_pair, report
