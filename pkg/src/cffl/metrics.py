"""Channel correlation, communication-overhead and model-size accounting."""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .channel import PilotDataset


def channel_correlation(h_i: np.ndarray, h_j: np.ndarray) -> float:
    """Normalized absolute inner product of two vectorized channels."""
    a = np.ravel(np.asarray(h_i, dtype=complex))
    b = np.ravel(np.asarray(h_j, dtype=complex))
    if a.shape != b.shape:
        raise ValueError(f"channel shapes differ: {np.shape(h_i)} vs {np.shape(h_j)}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("correlation of a zero channel is undefined")
    return float(min(1.0, abs(np.vdot(a, b)) / (na * nb)))


def correlation_matrix(datasets: list[PilotDataset], max_samples: int | None = None) -> np.ndarray:
    """User-by-user correlation, averaged over index-paired channel samples."""
    k = len(datasets)
    n = min(len(d) for d in datasets)
    if max_samples is not None:
        n = min(n, max_samples)
    flat = [d.truth[:n].reshape(n, -1) for d in datasets]
    norms = [np.linalg.norm(f, axis=1) for f in flat]
    if any(np.any(v == 0) for v in norms):
        raise ValueError("correlation of a zero channel is undefined")
    out = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            inner = np.abs(np.sum(flat[i].conj() * flat[j], axis=1)) / (norms[i] * norms[j])
            out[i, j] = out[j, i] = float(np.clip(inner, 0, 1).mean())
    return out


@dataclass(frozen=True)
class OverheadInputs:
    K: int
    W_FL: int = 0
    W_HFL: int = 0
    E: int = 1
    T: int = 1
    O: int = 0
    A: int = 0
    P: int = 0
    C_max: int = 3

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 0:
                raise ValueError(f"{f.name} must be a nonnegative integer, got {v!r}")


@dataclass(frozen=True)
class Overhead:
    algo: str
    per_round: int
    per_epoch: int
    total: int
    action_payload: int
    policy_payload: int


ALGOS = ("dqn_fl", "dqn_hfl", "qmix_fl", "qmix_hfl")


def comm_overhead(algo: str, inp: OverheadInputs) -> Overhead:
    """Exchanged parameter counts of one round, one epoch and ``T`` epochs.

    DQN users send ``A`` action and receive ``P`` policy values; Qmix users
    exchange ``C_max + 1`` values for each. The reported payloads are the
    totals over all ``K`` users.
    """
    if algo not in ALGOS:
        raise ValueError(f"unknown algorithm {algo!r}; expected one of {ALGOS}")
    w = inp.W_FL if algo.endswith("_fl") else inp.W_HFL
    per_round = 2 * inp.K * w
    if algo.startswith("qmix"):
        a = p = inp.C_max + 1
    else:
        a, p = inp.A, inp.P
    per_epoch = inp.E * per_round + inp.K * ((inp.O + a) + p)
    return Overhead(algo, per_round, per_epoch, inp.T * per_epoch, inp.K * a, inp.K * p)


@dataclass(frozen=True)
class ModelAccount:
    params: int
    flops: int


def model_accounting(descriptors) -> ModelAccount:
    """Parameter count and forward flops (2 per multiply-accumulate).

    A descriptor is a dict with ``kind`` ``dense`` (``in``, ``out``) or
    ``conv1d`` (``in``, ``out``, ``kernel``, ``length``), optionally
    ``batchnorm``. Batch-norm adds two trainable values per channel and is
    folded into the flop count as one multiply-add per output value.
    """
    params = flops = 0
    for d in descriptors:
        kind, c_in, c_out = d["kind"], int(d["in"]), int(d["out"])
        if kind == "dense":
            params += c_in * c_out + c_out
            macs, outputs = c_in * c_out, c_out
        elif kind == "conv1d":
            k, length = int(d["kernel"]), int(d["length"])
            params += k * c_in * c_out + c_out
            macs, outputs = k * c_in * c_out * length, c_out * length
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        if d.get("batchnorm"):
            params += 2 * c_out
            macs += outputs
        flops += 2 * macs
    return ModelAccount(params, flops)


def improvement(baseline: float, candidate: float) -> float:
    """Relative reduction ``(baseline - candidate) / baseline``."""
    if baseline == 0:
        raise ValueError("baseline must be nonzero")
    return (baseline - candidate) / baseline


def write_matrix_csv(path: str | Path, matrix: np.ndarray) -> None:
    m = np.asarray(matrix)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user"] + [str(j) for j in range(m.shape[1])])
        for i, row in enumerate(m):
            writer.writerow([i] + [f"{v:.12g}" for v in row])


OVERHEAD_FIELDS = ["algo", "per_round", "per_epoch", "total", "action_payload", "policy_payload"]


def write_overhead_csv(path: str | Path, rows: list[Overhead]) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write("# counts are exchanged parameters\n")
        writer = csv.writer(fh)
        writer.writerow(OVERHEAD_FIELDS)
        for r in rows:
            writer.writerow([getattr(r, f) for f in OVERHEAD_FIELDS])


def model_descriptors(model, length: int) -> list[dict]:
    """Accounting descriptors of an estimator model fed sequences of ``length``."""
    out = []
    for layer in model.layers:
        if layer.kind == "conv1d":
            c_out, c_in, k = layer.weight.shape
            out.append({"kind": "conv1d", "in": c_in, "out": c_out, "kernel": k, "length": length,
                        "batchnorm": layer.has_bn})
        else:
            d_out, d_in = layer.weight.shape
            out.append({"kind": "dense", "in": d_in, "out": d_out, "batchnorm": layer.has_bn})
    return out
