"""Binary dataset export and model checkpoints.

Dataset file: 16-byte header ``b"CFDS"``, then version, ``N`` and
``N_t * B`` as little-endian uint32, then little-endian float64 data. The
data holds the received pilots ``(D, P, 2)`` followed by the cascaded
channels ``(D, N, N_t * B, 2)`` and the per-sample SNR ``(D,)``. A JSON
sidecar carries ``D``, ``P`` and the user metadata.

Checkpoint file: ``b"CFMD"``, version and descriptor length as uint32,
UTF-8 JSON layer descriptors, then every array in descriptor order as
little-endian float64.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .channel import PilotDataset
from .estimator import Layer, LayeredModel

DATASET_MAGIC = b"CFDS"
MODEL_MAGIC = b"CFMD"
VERSION = 1
_F8 = np.dtype("<f8")


class FormatError(ValueError):
    pass


def _interleave(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-1).astype(_F8)


def write_dataset(path: str | Path, ds: PilotDataset) -> Path:
    """Write ``path`` and its ``.json`` sidecar; returns ``path``."""
    path = Path(path)
    d, p = ds.received.shape
    _, n, m = ds.truth.shape
    with path.open("wb") as fh:
        fh.write(DATASET_MAGIC + struct.pack("<III", VERSION, n, m))
        for block in (_interleave(ds.received), _interleave(ds.truth), ds.snr_db.astype(_F8)):
            fh.write(block.tobytes())
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps({"format": "cfds", "version": VERSION, "samples": d, "pilot_length": p,
                                   "n_ris": n, "n_columns": m, "user_id": int(ds.user_id),
                                   "position": [float(x) for x in ds.position]}, indent=2, sort_keys=True) + "\n")
    return path


def read_dataset(path: str | Path) -> PilotDataset:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    raw = path.read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise FormatError(f"{path} is not a dataset file")
    version, n, m = struct.unpack("<III", raw[4:16])
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    d, p = meta["samples"], meta["pilot_length"]
    data = np.frombuffer(raw, dtype=_F8, offset=16)
    sizes = [d * p * 2, d * n * m * 2, d]
    if data.size != sum(sizes):
        raise FormatError(f"{path} holds {data.size} values, expected {sum(sizes)}")
    a, b = sizes[0], sizes[0] + sizes[1]
    rx = data[:a].reshape(d, p, 2)
    truth = data[a:b].reshape(d, n, m, 2)
    return PilotDataset(rx[..., 0] + 1j * rx[..., 1], truth[..., 0] + 1j * truth[..., 1], data[b:].copy(),
                        meta["user_id"], np.array(meta["position"], dtype=float))


_FIELDS = ("weight", "bias", "bn_gamma", "bn_beta", "bn_mean", "bn_var")


def save_model(path: str | Path, model: LayeredModel) -> None:
    layers, blobs = [], []
    for layer in model.layers:
        arrays = {f: getattr(layer, f) for f in _FIELDS if getattr(layer, f) is not None}
        layers.append({"kind": layer.kind, "activation": layer.activation,
                       "arrays": {f: list(a.shape) for f, a in arrays.items()}})
        blobs += [np.ascontiguousarray(a, dtype=_F8).tobytes() for a in arrays.values()]
    header = json.dumps({"shared_split": model.shared_split, "layers": layers}, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(MODEL_MAGIC + struct.pack("<II", VERSION, len(header)) + header)
        for blob in blobs:
            fh.write(blob)


def load_model(path: str | Path) -> LayeredModel:
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise FormatError(f"{path} is not a model checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    meta = json.loads(raw[12:12 + hlen])
    offset = 12 + hlen
    layers = []
    for spec in meta["layers"]:
        arrays = {}
        # the key order of a sorted JSON object differs from _FIELDS; read in _FIELDS order
        for f in _FIELDS:
            if f not in spec["arrays"]:
                continue
            shape = spec["arrays"][f]
            count = int(np.prod(shape))
            arrays[f] = np.frombuffer(raw, dtype=_F8, count=count, offset=offset).reshape(shape).copy()
            offset += 8 * count
        layers.append(Layer(spec["kind"], activation=spec["activation"], **arrays))
    if offset != len(raw):
        raise FormatError(f"{path} has {len(raw) - offset} trailing bytes")
    return LayeredModel(layers, meta["shared_split"])
