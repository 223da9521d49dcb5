"""Homogeneous federated rounds with distance and RSRP transfer weights.

A round broadcasts the global model, lets every member compute a gradient
at the broadcast parameters, mixes the gradients with normalized weights and
takes one global step. The weights come from one of three strategies:

``plain``
    every member weighs 1 unless the group carries explicit raw weights;
``dis``
    ``1 - L_m / L`` for members within the reference distance, else 0;
``rsrp_dis``
    the distance weight scaled by RSRP similarity to the center node.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import estimator as est
from ._parallel import pmap

BYTES_PER_PARAM = 8


class DegenerateWeightsError(ValueError):
    """Every aggregation weight is zero, so no global step can be taken."""


@dataclass
class FLGroup:
    member_ids: list[int]
    center_id: int
    raw_weights: dict[int, float] | None = None

    def __post_init__(self):
        self.member_ids = sorted(int(m) for m in self.member_ids)
        if not self.member_ids:
            raise ValueError("an FL group needs at least one member")


@dataclass
class TransferContext:
    distances: dict[int, float]
    reference_distance: float
    powers: dict[int, float] = field(default_factory=dict)
    center_power: float = 0.0
    delta: float = 1.0

    def __post_init__(self):
        if self.reference_distance <= 0:
            raise ValueError("reference distance must be positive")
        if self.delta <= 0:
            raise ValueError("RSRP window must be positive")
        if any(d < 0 for d in self.distances.values()):
            raise ValueError("distances must be nonnegative")


@dataclass
class RoundReport:
    round: int
    group_id: int
    strategy: str
    members: list[int]
    center_id: int
    weights: dict[int, float]
    model_transfers: int
    params_exchanged: int
    bytes_exchanged: int
    nmse: dict[int, float] = field(default_factory=dict)
    epoch: int = 0
    uplink_params: int | None = None
    downlink_params: int | None = None


def dis_weight(distance: float, reference: float) -> float:
    """Distance transfer weight, linear from 1 at the center to 0 at ``reference``."""
    if distance < 0:
        raise ValueError("distance must be nonnegative")
    if reference <= 0:
        raise ValueError("reference distance must be positive")
    return 1.0 - distance / reference if distance <= reference else 0.0


def rsrp_dis_weight(power: float, center_power: float, delta: float, alpha_dis: float) -> float:
    """Distance weight discounted by RSRP mismatch; zero outside the open window."""
    if delta <= 0:
        raise ValueError("RSRP window must be positive")
    if center_power - delta < power < center_power + delta:
        return (1.0 - abs(power - center_power) / (2.0 * delta)) * alpha_dis
    return 0.0


def normalized_weights(alpha: dict[int, float]) -> dict[int, float]:
    if any(a < 0 for a in alpha.values()):
        raise ValueError("aggregation weights must be nonnegative")
    total = sum(alpha[m] for m in sorted(alpha))
    if total <= 0:
        raise DegenerateWeightsError("all aggregation weights are zero")
    return {m: alpha[m] / total for m in sorted(alpha)}


def aggregate_gradients(grads: dict[int, est.Gradient], alpha: dict[int, float]) -> est.Gradient:
    """Weighted mean ``sum_m (alpha_m / sum_i alpha_i) g_m``.

    Members are visited in sorted order, so the result does not depend on
    dictionary ordering.
    """
    if set(grads) != set(alpha):
        raise ValueError("gradients and weights must cover the same members")
    weights = normalized_weights(alpha)
    members = sorted(grads)
    shapes = [g.shape for g in grads[members[0]]]
    for m in members[1:]:
        if [g.shape for g in grads[m]] != shapes:
            raise ValueError(f"gradient of member {m} is not congruent with the others")
    out = None
    for m in members:
        term = [weights[m] * g for g in grads[m]]
        out = term if out is None else [a + b for a, b in zip(out, term)]
    return out


def global_update(model: est.LayeredModel, r: est.Gradient, learning_rate: float) -> est.LayeredModel:
    return est.sgd_step(model, r, learning_rate)


def select_center(members, positions: np.ndarray, reference_distance: float) -> int:
    """Member whose distance weights toward the rest of the group sum highest."""
    best, best_score = None, -1.0
    for c in sorted(members):
        score = sum(dis_weight(float(np.linalg.norm(positions[m] - positions[c])), reference_distance)
                    for m in members)
        if score > best_score:
            best, best_score = c, score
    return best


def make_transfer_context(members, center: int, positions: np.ndarray, powers,
                          reference_distance: float, delta: float | None = None) -> TransferContext:
    """Distances and RSRP values relative to ``center``.

    ``delta=None`` uses half of the center's RSRP as the comparability window.
    """
    center_power = float(powers[center])
    return TransferContext(
        distances={m: float(np.linalg.norm(positions[m] - positions[center])) for m in members},
        reference_distance=reference_distance,
        powers={m: float(powers[m]) for m in members},
        center_power=center_power,
        delta=0.5 * center_power if delta is None else delta,
    )


def strategy_weights(group: FLGroup, strategy: str, ctx: TransferContext | None = None) -> dict[int, float]:
    if strategy == "plain":
        raw = group.raw_weights or {}
        return {m: float(raw.get(m, 1.0)) for m in group.member_ids}
    if ctx is None:
        raise ValueError(f"strategy {strategy!r} needs a transfer context")
    alpha = {m: dis_weight(ctx.distances[m], ctx.reference_distance) for m in group.member_ids}
    if strategy == "dis":
        return alpha
    if strategy == "rsrp_dis":
        return {m: rsrp_dis_weight(ctx.powers[m], ctx.center_power, ctx.delta, alpha[m])
                for m in group.member_ids}
    raise ValueError(f"unknown strategy {strategy!r}")


def local_gradient(model: est.LayeredModel, data: est.TrainBatch, local_steps: int = 1,
                   learning_rate: float = 1e-3) -> est.Gradient:
    """Gradient a member uploads, evaluated at the broadcast parameters.

    With ``local_steps > 1`` the member runs that many full-batch steps and
    uploads the equivalent pseudo-gradient ``(w_0 - w_k) / learning_rate``.
    """
    if local_steps <= 1:
        return est.backward(model, data)
    local = model
    for _ in range(local_steps):
        local = est.sgd_step(local, est.backward(local, data), learning_rate)
    return [(a - b) / learning_rate for a, b in zip(model.params(), local.params())]


def run_fl_round(group: FLGroup, model: est.LayeredModel, datasets: dict[int, est.TrainBatch],
                 strategy: str = "plain", ctx: TransferContext | None = None,
                 learning_rate: float = 1e-3, local_steps: int = 1,
                 eval_sets: dict[int, est.TrainBatch] | None = None,
                 round_index: int = 0, group_id: int = 0, epoch: int = 0):
    """One broadcast / local-gradient / aggregate / update cycle.

    Returns ``(new_model, RoundReport)``. Raises :class:`DegenerateWeightsError`
    before any computation when the strategy zeroes every member.
    """
    alpha = strategy_weights(group, strategy, ctx)
    weights = normalized_weights(alpha)
    for m in group.member_ids:
        if m not in datasets or len(datasets[m]) == 0:
            raise ValueError(f"member {m} has no training data")
    grads = pmap(lambda m: local_gradient(model, datasets[m], local_steps, learning_rate), group.member_ids)
    r = aggregate_gradients(dict(zip(group.member_ids, grads)), alpha)
    new_model = global_update(model, r, learning_rate)
    k = len(group.member_ids)
    params = 2 * k * model.n_params
    report = RoundReport(round_index, group_id, strategy, list(group.member_ids), group.center_id,
                         weights, 2 * k, params, params * BYTES_PER_PARAM, epoch=epoch)
    if eval_sets:
        report.nmse = {m: est.batch_nmse(new_model, eval_sets[m]) for m in group.member_ids if m in eval_sets}
    return new_model, report


ROUND_LOG_FIELDS = ["epoch", "round", "group_id", "strategy", "nmse", "bytes_exchanged"]
HFL_LOG_FIELDS = ROUND_LOG_FIELDS + ["uplink_params", "downlink_params"]


def append_round_log(path: str | Path, reports, hfl: bool = False) -> None:
    """Append round reports to a CSV log, writing the header for a new file.

    Per-member NMSE goes into one cell as ``member:value`` pairs joined by ``;``.
    """
    path = Path(path)
    fields = HFL_LOG_FIELDS if hfl else ROUND_LOG_FIELDS
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(fields)
        for r in reports:
            row = [r.epoch, r.round, r.group_id, r.strategy,
                   ";".join(f"{m}:{v:.10g}" for m, v in sorted(r.nmse.items())), r.bytes_exchanged]
            if hfl:
                row += [r.uplink_params, r.downlink_params]
            writer.writerow(row)
