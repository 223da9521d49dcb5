"""End-to-end experiment plumbing shared by the CLI, demos and tests."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import channel
from . import estimator as est
from . import federation as fed
from . import hfl
from .coalition import CoalitionPartition
from .config import ExperimentConfig


@dataclass
class Prepared:
    """A generated scenario split into network-ready batches."""

    scenario: channel.Scenario
    split: channel.UserSplit
    train: dict[int, est.TrainBatch]
    test: dict[int, est.TrainBatch]
    server: est.TrainBatch
    rsrp: dict[int, float]

    @property
    def n_users(self) -> int:
        return len(self.train)


def prepare(cfg: ExperimentConfig, snr_db: float | None = None, seed: int | None = None) -> Prepared:
    sc_cfg = cfg.scenario if snr_db is None else dataclasses.replace(cfg.scenario, snr_db=float(snr_db))
    scenario = channel.generate_scenario((sc_cfg, cfg.seed if seed is None else seed))
    split = channel.split_users(scenario, sc_cfg.test_fraction, sc_cfg.server_fraction)
    train = {i: est.dataset_to_batch(d) for i, d in enumerate(split.train)}
    test = {i: est.dataset_to_batch(d) for i, d in enumerate(split.test)}
    return Prepared(scenario, split, train, test, est.dataset_to_batch(split.server),
                    {i: d.rsrp() for i, d in enumerate(split.train)})


def initial_model(cfg: ExperimentConfig, prep: Prepared, rng: np.random.Generator | None = None,
                  conv_layers: int | None = None) -> est.LayeredModel:
    """Local-shape estimator with batch-norm statistics from the server slice."""
    e, s = cfg.estimator, cfg.scenario
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(11,))) if rng is None else rng
    model = est.build_estimator(s.pilot_length, 2 * s.n_ris * s.n_columns,
                                e.local_conv_layers if conv_layers is None else conv_layers,
                                e.channels, e.kernel, e.batchnorm, e.shared_layers, rng)
    return est.calibrate_batchnorm(model, prep.server.inputs)


def transfer_context(cfg: ExperimentConfig, prep: Prepared, members):
    """Center node and transfer context for the distance-aware strategies."""
    positions = prep.scenario.positions
    center = fed.select_center(members, positions, cfg.fl.reference_distance)
    ctx = fed.make_transfer_context(members, center, positions, prep.rsrp, cfg.fl.reference_distance,
                                    cfg.fl.rsrp_delta)
    return ctx, center


def train_group(cfg: ExperimentConfig, prep: Prepared, members, init: est.LayeredModel,
                strategy: str | None = None, rounds: int | None = None, group_id: int = 0,
                reports: list | None = None) -> est.LayeredModel:
    """FL (or HFL when enabled) among ``members``; a lone member trains locally."""
    members = sorted(members)
    strategy = cfg.fl.strategy if strategy is None else strategy
    rounds = cfg.fl.rounds if rounds is None else rounds
    lr = cfg.fl.learning_rate
    if cfg.hfl:
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(13, group_id)))
        e, s = cfg.estimator, cfg.scenario
        pair = hfl.build_pair(s.pilot_length, 2 * s.n_ris * s.n_columns, prep.server, e.global_conv_layers,
                              e.local_conv_layers, e.shared_layers, e.channels, e.kernel, e.batchnorm, rng)
        for r in range(rounds):
            pair, rep = hfl.run_hfl_round(pair, members, prep.train, learning_rate=lr, batch_size=None,
                                          distill_epochs=cfg.fl.distill_epochs, rng=rng, round_index=r,
                                          group_id=group_id)
            if reports is not None:
                reports.append(rep)
        return pair.local_template
    ctx, center = (None, members[0]) if strategy == "plain" else transfer_context(cfg, prep, members)
    group = fed.FLGroup(members, center)
    model = init
    for r in range(rounds):
        try:
            model, rep = fed.run_fl_round(group, model, prep.train, strategy, ctx, lr, cfg.fl.local_steps,
                                          round_index=r, group_id=group_id)
        except fed.DegenerateWeightsError:
            model, rep = fed.run_fl_round(group, model, prep.train, "plain", None, lr, cfg.fl.local_steps,
                                          round_index=r, group_id=group_id)
        if reports is not None:
            reports.append(rep)
    return model


def train_partition(cfg: ExperimentConfig, prep: Prepared, partition: CoalitionPartition,
                    strategy: str | None = None, rounds: int | None = None,
                    init: est.LayeredModel | None = None, reports: list | None = None) -> dict[int, est.LayeredModel]:
    """One model per user after training every coalition for the same round budget."""
    init = initial_model(cfg, prep) if init is None else init
    models = {}
    for gid, members in enumerate(sorted(partition.coalitions(), key=lambda s: min(s)), start=1):
        model = train_group(cfg, prep, members, init, strategy, rounds, gid, reports)
        for m in members:
            models[m] = model
    return models


def evaluate(models: dict[int, est.LayeredModel], prep: Prepared) -> dict[int, float]:
    """Linear test NMSE per user."""
    return {u: est.batch_nmse(models[u], prep.test[u]) for u in sorted(models)}


def nmse_db(linear: float) -> float:
    return float(10 * np.log10(max(linear, 1e-30)))
