"""Command-line experiment runner.

    cffl generate --config c.yaml --out runs/a
    cffl cffl --config c.yaml --seed 3 --backend qmix --oracle surrogate
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import coalition, drl, io, metrics, pipeline
from . import federation as fed
from .coalition import CoalitionPartition, GameSettings
from .config import ConfigError, ExperimentConfig, load_config, save_config

log = logging.getLogger("cffl")

RUN_FILES = ("nmse_vs_snr.csv", "reward_vs_epoch.csv", "correlation_matrix.csv", "overhead.csv",
             "partition_trace.csv")


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _settings(cfg: ExperimentConfig) -> GameSettings:
    return GameSettings(cfg.game.utility_constant)


def make_oracle(cfg: ExperimentConfig, prep: pipeline.Prepared, kind: str, corr: np.ndarray):
    if kind == "surrogate":
        return coalition.SurrogateOracle(corr, cfg.game.solo_error)
    init = pipeline.initial_model(cfg, prep)
    strategy = cfg.fl.strategy

    def context(members):
        if strategy == "plain":
            return None, min(members)
        return pipeline.transfer_context(cfg, prep, members)

    return coalition.FLOracle(prep.train, prep.test, init, cfg.rl.rounds_per_epoch, cfg.fl.learning_rate,
                              strategy, context)


def _rng(cfg: ExperimentConfig, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=key))


def form_coalitions(cfg: ExperimentConfig, prep: pipeline.Prepared, backend: str, oracle_kind: str,
                    corr: np.ndarray):
    """Final partition plus ``(trace rows, reward rows)`` for the chosen backend."""
    k, j = prep.n_users, cfg.game.max_coalitions
    settings = _settings(cfg)
    if backend == "switch":
        oracle = make_oracle(cfg, prep, oracle_kind, corr)
        start = CoalitionPartition.grand(k, j)
        part, trace = coalition.switch_dynamics(start, oracle, settings, cfg.game.order, _rng(cfg, 21))
        trace_rows = [[t.step, t.user, t.source, t.target, t.potential, t.utility] for t in trace]
        reward_rows, p = [], start
        steps = [start] + [p := p.moved(t.user, t.target) for t in trace]
        for i, q in enumerate(steps):
            errors = oracle.evaluate(q)
            e_bar = drl.mean_clipped_error(errors)
            reward_rows.append([i, drl.reward(e_bar), e_bar, drl.potential_from_errors(q, errors, settings)])
        return part, trace_rows, reward_rows, 0
    if oracle_kind == "surrogate":
        env = drl.SurrogateEnvironment(coalition.SurrogateOracle(corr, cfg.game.solo_error))
    else:
        env = drl.FLEnvironment(prep.train, prep.test, pipeline.initial_model(cfg, prep), cfg.rl.rounds_per_epoch,
                                cfg.fl.learning_rate)
    history = drl.run_cffl(env, k, j, cfg.rl, backend, settings, seed=cfg.seed)
    reward_rows = [[r.epoch, r.reward, r.mean_error, r.potential] for r in history.records]
    trace_rows, prev = [], CoalitionPartition.solo(k, j)
    for r in history.records:
        for u, (a, b) in enumerate(zip(prev.assignment, r.action)):
            if a != b:
                trace_rows.append([r.epoch, u, a, b, r.potential, r.potential])
        prev = CoalitionPartition(r.action, j)
    if not history.records:
        return prev, trace_rows, reward_rows, 0
    # the best partition the learner visited is the one handed to FL
    best = max(history.records, key=lambda r: (r.reward, -r.epoch))
    return CoalitionPartition(best.action, j), trace_rows, reward_rows, sum(r.bytes_exchanged for r in history.records)


def overhead_rows(cfg: ExperimentConfig, prep: pipeline.Prepared) -> list[metrics.Overhead]:
    model = pipeline.initial_model(cfg, prep)
    w_fl = model.n_params
    # HFL uploads the shared part and downloads the full local model
    w_hfl = (model.shared_size() + model.n_params + 1) // 2
    inp = metrics.OverheadInputs(K=prep.n_users, W_FL=w_fl, W_HFL=w_hfl, E=cfg.rl.rounds_per_epoch,
                                 T=cfg.rl.epochs, O=cfg.rl.observation_payload, A=cfg.rl.action_payload,
                                 P=cfg.rl.policy_payload, C_max=cfg.game.max_coalitions)
    return [metrics.comm_overhead(a, inp) for a in metrics.ALGOS]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return str(v)


def write_rows(path: Path, header: list[str], rows, comment: str | None = None) -> None:
    with path.open("w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_manifest(out: Path, cfg: ExperimentConfig, files) -> None:
    digests = {f: hashlib.sha256((out / f).read_bytes()).hexdigest() for f in sorted(files)}
    manifest = {"config_hash": cfg.digest(), "seed": cfg.seed, "version": code_version(), "files": digests}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_experiment(cfg: ExperimentConfig, backend: str | None = None, oracle: str | None = None,
                   out: str | Path | None = None) -> Path:
    """Full run: coalition formation, per-SNR coalition FL and all CSV outputs."""
    backend = backend or cfg.game.backend
    oracle = oracle or cfg.game.oracle
    out = Path(out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")

    prep = pipeline.prepare(cfg)
    corr = metrics.correlation_matrix(prep.split.train)
    metrics.write_matrix_csv(out / "correlation_matrix.csv", corr)

    part, trace_rows, reward_rows, _ = form_coalitions(cfg, prep, backend, oracle, corr)
    write_rows(out / "partition_trace.csv", coalition.TRACE_FIELDS, trace_rows)
    write_rows(out / "reward_vs_epoch.csv", drl.CURVE_FIELDS, reward_rows)
    log.info("partition %s", part.assignment)

    rows = []
    for snr in cfg.snr_list:
        p = pipeline.prepare(cfg, snr_db=snr)
        errors = pipeline.evaluate(pipeline.train_partition(cfg, p, part), p)
        mean = float(np.mean(list(errors.values())))
        rows.append([snr, mean, pipeline.nmse_db(mean), "|".join(map(str, part.assignment))])
        log.info("snr %g dB: nmse %.4g", snr, mean)
    write_rows(out / "nmse_vs_snr.csv", ["snr_db", "nmse_linear", "nmse_db", "partition"], rows)

    metrics.write_overhead_csv(out / "overhead.csv", overhead_rows(cfg, prep))
    write_manifest(out, cfg, RUN_FILES)
    return out


def compare_strategies(cfg: ExperimentConfig, strategies: list[str], seeds: list[int],
                       out: str | Path) -> Path:
    """Mean and std test NMSE over seeds for every (strategy, SNR).

    ``plain``, ``dis`` and ``rsrp_dis`` train one group of all users with
    that weighting; ``coalition`` trains the correlation-guided partition.
    """
    if len(strategies) < 2:
        raise ValueError("compare needs at least two strategies")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cache: dict[tuple, float] = {}
    rows = []
    for name in strategies:
        for snr in cfg.snr_list:
            values = []
            for seed in seeds:
                key = (name, snr, seed)
                if key not in cache:
                    c = _with_seed(cfg, seed)
                    p = pipeline.prepare(c, snr_db=snr)
                    if name == "coalition":
                        corr = metrics.correlation_matrix(p.split.train)
                        part = coalition.correlation_partition(corr, c.game.max_coalitions, c.game.solo_error,
                                                               _settings(c))
                        models = pipeline.train_partition(c, p, part, "plain")
                    elif name in ("plain", "dis", "rsrp_dis"):
                        models = pipeline.train_partition(c, p, CoalitionPartition.grand(p.n_users), name)
                    else:
                        raise ValueError(f"unknown strategy {name!r}")
                    cache[key] = float(np.mean(list(pipeline.evaluate(models, p).values())))
                values.append(cache[key])
            v = np.array(values)
            db = np.array([pipeline.nmse_db(x) for x in v])
            rows.append([name, snr, v.mean(), v.std(), db.mean(), db.std()])
    write_rows(out / "compare.csv", ["strategy", "snr_db", "nmse_mean", "nmse_std", "nmse_db_mean",
                                     "nmse_db_std"], rows)
    return out / "compare.csv"


def _with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    import dataclasses
    return dataclasses.replace(cfg, seed=int(seed))


# ---------------------------------------------------------------------------
# verbs

def cmd_generate(cfg, args) -> None:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prep = pipeline.prepare(cfg)
    for ds in prep.scenario.datasets:
        io.write_dataset(out / f"user_{ds.user_id}.bin", ds)
    metrics.write_matrix_csv(out / "correlation_matrix.csv", metrics.correlation_matrix(prep.split.train))
    save_config(cfg, out / "config.yaml")


def cmd_train(cfg, args) -> None:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prep = pipeline.prepare(cfg)
    reports: list[fed.RoundReport] = []
    members = list(range(prep.n_users))
    model = pipeline.train_group(cfg, prep, members, pipeline.initial_model(cfg, prep), reports=reports)
    log_path = out / "rounds.csv"
    log_path.unlink(missing_ok=True)
    fed.append_round_log(log_path, reports, hfl=cfg.hfl)
    io.save_model(out / "model.bin", model)
    errors = pipeline.evaluate({m: model for m in members}, prep)
    write_rows(out / "nmse.csv", ["user", "nmse_linear", "nmse_db"],
               [[u, e, pipeline.nmse_db(e)] for u, e in errors.items()])


def cmd_game(cfg, args) -> None:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prep = pipeline.prepare(cfg)
    corr = metrics.correlation_matrix(prep.split.train)
    part, trace_rows, reward_rows, _ = form_coalitions(cfg, prep, "switch", args.oracle or cfg.game.oracle, corr)
    write_rows(out / "partition_trace.csv", coalition.TRACE_FIELDS, trace_rows)
    (out / "partition.txt").write_text(" ".join(map(str, part.assignment)) + "\n")


def cmd_cffl(cfg, args) -> None:
    run_experiment(cfg, args.backend, args.oracle, args.out)


def cmd_overhead(cfg, args) -> None:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prep = pipeline.prepare(cfg)
    metrics.write_overhead_csv(out / "overhead.csv", overhead_rows(cfg, prep))
    model = pipeline.initial_model(cfg, prep)
    acc = metrics.model_accounting(metrics.model_descriptors(model, cfg.scenario.pilot_length))
    write_rows(out / "model_accounting.csv", ["model", "params", "flops"], [["local", acc.params, acc.flops]],
               comment="flops count 2 per multiply-accumulate")


def cmd_compare(cfg, args) -> None:
    strategies = args.strategies.split(",")
    seeds = [cfg.seed + i for i in range(args.seeds)]
    compare_strategies(cfg, strategies, seeds, args.out or cfg.out_dir)


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "game": cmd_game, "cffl": cmd_cffl,
            "overhead": cmd_overhead, "compare": cmd_compare}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cffl", description="Coalition-guided federated channel estimation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--backend", choices=("dqn", "qmix", "switch"))
        p.add_argument("--oracle", choices=("fl", "surrogate"))
        if name == "compare":
            p.add_argument("--strategies", default="plain,dis,coalition")
            p.add_argument("--seeds", type=int, default=3)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2 ** 64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg.seed = args.seed
        if args.backend:
            cfg.game.backend = args.backend
        if args.oracle:
            cfg.game.oracle = args.oracle
        if args.out:
            cfg.out_dir = args.out
        cfg.validate()
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    COMMANDS[args.verb](cfg, args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
