import csv
import json
import time

import numpy as np
import pytest
import yaml

from cffl import cli
from cffl.config import config_from_dict

SMALL = {
    "scenario": {"n_bs": 1, "bs_array": [2, 2], "ris_array": [2, 2], "n_users": 6, "layout": "two_cluster",
                 "pilot_length": 16, "samples_per_user": 60, "test_fraction": 0.2, "server_fraction": 0.2,
                 "snr_db": 5.0},
    "estimator": {"channels": 4, "local_conv_layers": 1, "global_conv_layers": 2, "shared_layers": 1},
    "fl": {"rounds": 20, "learning_rate": 0.005},
    "game": {"backend": "dqn", "oracle": "surrogate"},
    "rl": {"epochs": 1, "rounds_per_epoch": 1},
    "snr_list": [0.0, 15.0],
}


def write_cfg(tmp_path, **over):
    data = yaml.safe_load(yaml.safe_dump(SMALL))
    for k, v in over.items():
        if isinstance(v, dict):
            data.setdefault(k, {}).update(v)
        else:
            data[k] = v
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


def read_csv(path):
    return list(csv.reader(line for line in path.open() if not line.startswith("#")))


def test_smoke_run_writes_all_files(tmp_path):
    cfg = write_cfg(tmp_path)
    start = time.perf_counter()
    assert cli.main(["cffl", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    assert time.perf_counter() - start < 10
    for name in cli.RUN_FILES:
        assert (tmp_path / "run" / name).stat().st_size > 0
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert set(cli.RUN_FILES) <= set(manifest["files"]) and manifest["seed"] == 0
    rows = read_csv(tmp_path / "run" / "nmse_vs_snr.csv")
    assert rows[0] == ["snr_db", "nmse_linear", "nmse_db", "partition"] and len(rows) == 3


@pytest.mark.parametrize("backend", ["dqn", "qmix", "switch"])
def test_reruns_are_byte_identical(tmp_path, backend):
    cfg = write_cfg(tmp_path, rl={"epochs": 40, "batch_size": 8, "rounds_per_epoch": 1})
    for run in ("a", "b"):
        assert cli.main(["cffl", "--config", str(cfg), "--backend", backend, "--seed", "5",
                         "--out", str(tmp_path / run)]) == 0
    for name in cli.RUN_FILES + ("manifest.json",):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_flag_changes_outputs(tmp_path):
    cfg = write_cfg(tmp_path)
    for seed in ("1", "2"):
        cli.main(["cffl", "--config", str(cfg), "--seed", seed, "--out", str(tmp_path / seed)])
    a = (tmp_path / "1" / "correlation_matrix.csv").read_bytes()
    assert a != (tmp_path / "2" / "correlation_matrix.csv").read_bytes()


def test_nmse_non_increasing_with_snr(tmp_path):
    cfg = write_cfg(tmp_path, snr_list=[0.0, 5.0, 10.0, 15.0], fl={"rounds": 60, "learning_rate": 0.005})
    curves = []
    for seed in range(3):
        out = tmp_path / f"s{seed}"
        cli.main(["cffl", "--config", str(cfg), "--backend", "switch", "--seed", str(seed), "--out", str(out)])
        curves.append([float(r[1]) for r in read_csv(out / "nmse_vs_snr.csv")[1:]])
    mean = np.mean(curves, axis=0)
    assert len(mean) == 4
    assert all(b <= a for a, b in zip(mean, mean[1:]))


def test_compare_rows(tmp_path):
    cfg = config_from_dict(yaml.safe_load(write_cfg(tmp_path).read_text()))
    path = cli.compare_strategies(cfg, ["plain", "dis", "plain"], [0, 1], tmp_path / "cmp")
    rows = read_csv(path)[1:]
    assert [(r[0], float(r[1])) for r in rows] == [(s, snr) for s in ("plain", "dis", "plain") for snr in (0.0, 15.0)]
    assert rows[0][2:] == rows[4][2:] and rows[1][2:] == rows[5][2:]
    with pytest.raises(ValueError):
        cli.compare_strategies(cfg, ["plain"], [0], tmp_path / "cmp")


def test_other_verbs(tmp_path):
    cfg = write_cfg(tmp_path)
    assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 0
    assert len(list((tmp_path / "g").glob("user_*.bin"))) == 6
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 0
    assert {"rounds.csv", "model.bin", "nmse.csv"} <= {p.name for p in (tmp_path / "t").iterdir()}
    assert cli.main(["game", "--config", str(cfg), "--out", str(tmp_path / "m")]) == 0
    assert len((tmp_path / "m" / "partition.txt").read_text().split()) == 6
    assert cli.main(["overhead", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = read_csv(tmp_path / "o" / "overhead.csv")
    assert [r[0] for r in rows[1:]] == list(cli.metrics.ALGOS)


def test_hfl_train_verb(tmp_path):
    cfg = write_cfg(tmp_path, hfl=True, fl={"rounds": 2, "distill_epochs": 5})
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "h")]) == 0
    header = read_csv(tmp_path / "h" / "rounds.csv")[0]
    assert "uplink_params" in header and "downlink_params" in header
