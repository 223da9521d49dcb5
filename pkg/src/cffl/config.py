"""Experiment configuration: nested dataclasses with a YAML round trip."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

LAYOUTS = ("sparse", "dense", "two_cluster")
STRATEGIES = ("plain", "dis", "rsrp_dis")
BACKENDS = ("switch", "dqn", "qmix")
ORACLES = ("surrogate", "fl")


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration files."""


@dataclass
class ScenarioConfig:
    n_bs: int = 2
    bs_array: tuple[int, int] = (2, 2)
    ris_array: tuple[int, int] = (4, 4)
    n_users: int = 6
    layout: str = "two_cluster"
    pilot_length: int = 32
    samples_per_user: int = 400
    test_fraction: float = 0.1
    server_fraction: float = 0.1
    snr_db: float = 5.0
    bs_ris_paths: int = 3
    ris_ue_paths: int = 2
    user_angle_spread: float = 0.05
    sample_angle_jitter: float = 0.01
    wavelength: float = 0.01

    @property
    def n_bs_antennas(self) -> int:
        return self.bs_array[0] * self.bs_array[1]

    @property
    def n_ris(self) -> int:
        return self.ris_array[0] * self.ris_array[1]

    @property
    def n_columns(self) -> int:
        """Columns of the cascaded channel, ``N_t * B``."""
        return self.n_bs_antennas * self.n_bs


@dataclass
class EstimatorConfig:
    channels: int = 16
    kernel: int = 3
    local_conv_layers: int = 3
    global_conv_layers: int = 5
    shared_layers: int = 2
    batchnorm: bool = True
    batch_size: int = 64
    learning_rate: float = 1e-3


@dataclass
class FLConfig:
    strategy: str = "plain"
    rounds: int = 20
    local_steps: int = 1
    learning_rate: float = 1e-3
    reference_distance: float = 300.0
    rsrp_delta: float | None = None  # watts; None means half the center RSRP
    distill_epochs: int = 200


@dataclass
class GameConfig:
    backend: str = "switch"
    oracle: str = "surrogate"
    max_coalitions: int = 3
    utility_constant: float | None = None  # None: A = |S_j|
    solo_error: float = 0.5
    order: str = "round_robin"


@dataclass
class RLConfig:
    epochs: int = 500
    rounds_per_epoch: int = 5
    gamma: float = 0.9
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_fraction: float = 0.6
    target_sync: int = 50
    replay_capacity: int = 10_000
    batch_size: int = 32
    learning_rate: float = 1e-3
    hidden: int = 64
    mixing_hidden: int = 16
    share_params: bool = True
    agent_id: bool = True
    full_size_observation: bool = False
    train_steps_per_epoch: int = 1
    # per-user message sizes for overhead accounting (observation, DQN action, DQN policy)
    observation_payload: int = 1
    action_payload: int = 1
    policy_payload: int = 1


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    fl: FLConfig = field(default_factory=FLConfig)
    hfl: bool = False
    game: GameConfig = field(default_factory=GameConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    snr_list: list[float] = field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0])
    seed: int = 0
    out_dir: str = "out"

    def validate(self) -> "ExperimentConfig":
        s = self.scenario
        counts = {
            "scenario.n_bs": s.n_bs, "scenario.n_users": s.n_users,
            "scenario.pilot_length": s.pilot_length,
            "scenario.samples_per_user": s.samples_per_user,
            "scenario.bs_ris_paths": s.bs_ris_paths, "scenario.ris_ue_paths": s.ris_ue_paths,
            "estimator.channels": self.estimator.channels, "estimator.kernel": self.estimator.kernel,
            "estimator.batch_size": self.estimator.batch_size,
            "game.max_coalitions": self.game.max_coalitions,
        }
        for name, value in counts.items():
            if int(value) < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        if min(*s.bs_array, *s.ris_array) < 1:
            raise ConfigError("array dimensions must be positive")
        if s.layout not in LAYOUTS:
            raise ConfigError(f"scenario.layout: unknown layout {s.layout!r}, expected one of {LAYOUTS}")
        if self.fl.strategy not in STRATEGIES:
            raise ConfigError(f"fl.strategy: unknown strategy {self.fl.strategy!r}")
        if self.game.backend not in BACKENDS:
            raise ConfigError(f"game.backend: unknown backend {self.game.backend!r}")
        if self.game.oracle not in ORACLES:
            raise ConfigError(f"game.oracle: unknown oracle {self.game.oracle!r}")
        if not 0 <= s.test_fraction < 1 or not 0 <= s.server_fraction < 1:
            raise ConfigError("test/server fractions must lie in [0, 1)")
        if self.rl.epochs < 0 or self.rl.rounds_per_epoch < 0 or self.fl.rounds < 0:
            raise ConfigError("epoch and round counts must be nonnegative")
        e = self.estimator
        if not 0 <= e.shared_layers <= e.local_conv_layers + 1:
            raise ConfigError("estimator.shared_layers exceeds the local model depth")
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        """Hash of every setting that can change results (the output directory cannot)."""
        data = self.to_dict()
        data.pop("out_dir")
        blob = json.dumps(data, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in hints:
            raise ConfigError(f"{prefix}{key}: unknown field")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{prefix}{key}.")
        elif isinstance(default, tuple):
            kwargs[key] = tuple(int(v) for v in value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{prefix}{key}: expected true/false, got {value!r}")
            kwargs[key] = value
        elif isinstance(default, int) and not isinstance(default, bool):
            try:
                kwargs[key] = int(value)
            except (TypeError, ValueError):
                raise ConfigError(f"{prefix}{key}: expected an integer, got {value!r}") from None
        elif isinstance(default, float):
            try:
                kwargs[key] = float(value)
            except (TypeError, ValueError):
                raise ConfigError(f"{prefix}{key}: expected a number, got {value!r}") from None
        elif isinstance(default, list):
            kwargs[key] = [float(v) for v in value]
        else:
            kwargs[key] = None if value is None else (float(value) if key in ("utility_constant", "rsrp_delta") else value)
    return cls(**kwargs)


def config_from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "").validate()


def load_config(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1})" if mark is not None else ""
        raise ConfigError(f"{path}: YAML parse error{where}: {exc}") from None
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg))
