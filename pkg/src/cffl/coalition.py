"""Coalition formation among FL users.

Users pick a label in ``0..J``; label 0 trains alone, labels ``1..J`` are FL
groups. A coalition's utility is ``A - sum of member errors`` and is split
among members in proportion to their data volume. A user moves when the
altruistic criterion holds: the summed payoffs of the user, its new
coalition and its old coalition strictly increase.

Because every coalition's utility depends only on its own members, the sum
of all payoffs is an exact potential: each altruistic gain equals the change
of the potential, so improving switches cannot cycle.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import estimator as est
from . import federation as fed

SWITCH_TOL = 1e-12


class InstanceTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class CoalitionPartition:
    assignment: tuple[int, ...]
    max_coalitions: int = 3

    def __post_init__(self):
        a = tuple(int(c) for c in self.assignment)
        object.__setattr__(self, "assignment", a)
        if any(c < 0 or c > self.max_coalitions for c in a):
            raise ValueError(f"coalition labels must lie in 0..{self.max_coalitions}")

    @classmethod
    def solo(cls, k: int, j: int = 3) -> "CoalitionPartition":
        return cls((0,) * k, j)

    @classmethod
    def grand(cls, k: int, j: int = 3) -> "CoalitionPartition":
        return cls((1,) * k, j)

    @property
    def n_users(self) -> int:
        return len(self.assignment)

    def members(self, label: int) -> frozenset[int]:
        return frozenset(i for i, c in enumerate(self.assignment) if c == label)

    @property
    def sizes(self) -> np.ndarray:
        """Member count of coalitions ``1..J``."""
        return np.array([sum(1 for c in self.assignment if c == j) for j in range(1, self.max_coalitions + 1)])

    def coalitions(self) -> list[frozenset[int]]:
        """Nonempty coalitions; every solo user is its own singleton."""
        out = [self.members(j) for j in range(1, self.max_coalitions + 1)]
        out = [s for s in out if s]
        out += [frozenset([i]) for i, c in enumerate(self.assignment) if c == 0]
        return out

    def coalition_of(self, user: int) -> frozenset[int]:
        label = self.assignment[user]
        return frozenset([user]) if label == 0 else self.members(label)

    def candidate(self, label: int) -> frozenset[int]:
        """Members a user would join by switching to ``label`` (empty for solo)."""
        return frozenset() if label == 0 else self.members(label)

    def moved(self, user: int, label: int) -> "CoalitionPartition":
        a = list(self.assignment)
        a[user] = label
        return CoalitionPartition(tuple(a), self.max_coalitions)


# ---------------------------------------------------------------------------
# utility oracles: map a member set to per-member errors in [0, 1]

class UtilityOracle:
    kind = "abstract"

    def __init__(self, n_users: int):
        self.n_users = n_users
        self._cache: dict[frozenset, dict[int, float]] = {}

    def errors(self, members) -> dict[int, float]:
        members = frozenset(members)
        if not members:
            return {}
        if members not in self._cache:
            raw = self._evaluate(members)
            self._cache[members] = {p: float(np.clip(raw[p], 0.0, 1.0)) for p in sorted(members)}
        return self._cache[members]

    def evaluate(self, partition: CoalitionPartition) -> dict[int, float]:
        out = {}
        for s in partition.coalitions():
            out.update(self.errors(s))
        return out

    def _evaluate(self, members: frozenset) -> dict[int, float]:
        raise NotImplementedError


class SurrogateOracle(UtilityOracle):
    """Error ``1 - mean correlation with coalition peers``; singletons get ``solo_error``."""

    kind = "surrogate"

    def __init__(self, correlation: np.ndarray, solo_error: float = 0.5):
        correlation = np.asarray(correlation, dtype=float)
        super().__init__(correlation.shape[0])
        self.correlation = correlation
        self.solo_error = solo_error

    def _evaluate(self, members):
        if len(members) == 1:
            return {p: self.solo_error for p in members}
        out = {}
        for p in members:
            peers = [q for q in members if q != p]
            out[p] = 1.0 - float(np.mean(self.correlation[p, peers]))
        return out


class ConstantOracle(UtilityOracle):
    kind = "constant"

    def __init__(self, n_users: int, error: float):
        super().__init__(n_users)
        self.error = error

    def _evaluate(self, members):
        return {p: self.error for p in members}


class TableOracle(UtilityOracle):
    """Arbitrary but reproducible errors per (coalition, member); for testing."""

    kind = "table"

    def __init__(self, n_users: int, seed: int = 0):
        super().__init__(n_users)
        self.seed = seed

    def _evaluate(self, members):
        key = sum(1 << p for p in members)
        rng = np.random.default_rng([self.seed, key])
        return dict(zip(sorted(members), rng.uniform(0, 1, len(members))))


class FLOracle(UtilityOracle):
    """Runs FL among the coalition members and reports their test NMSE.

    Every coalition starts from the same initial model and trains for
    ``rounds`` rounds, so a coalition's errors depend on its members only.
    """

    kind = "fl_pipeline"

    def __init__(self, train: dict[int, est.TrainBatch], test: dict[int, est.TrainBatch],
                 init_model: est.LayeredModel, rounds: int = 5, learning_rate: float = 1e-3,
                 strategy: str = "plain", context_fn=None):
        super().__init__(len(train))
        self.train, self.test = train, test
        self.init_model = init_model
        self.rounds, self.learning_rate = rounds, learning_rate
        self.strategy, self.context_fn = strategy, context_fn
        self.models: dict[frozenset, est.LayeredModel] = {}

    def _evaluate(self, members):
        model = self.train_coalition(members)
        return {p: est.batch_nmse(model, self.test[p]) for p in members}

    def train_coalition(self, members) -> est.LayeredModel:
        members = frozenset(members)
        if members in self.models:
            return self.models[members]
        ctx, center = None, min(members)
        if self.context_fn is not None:
            ctx, center = self.context_fn(members)
        group = fed.FLGroup(sorted(members), center)
        model = self.init_model
        for r in range(self.rounds):
            model, _ = fed.run_fl_round(group, model, self.train, self.strategy, ctx, self.learning_rate,
                                        round_index=r)
        self.models[members] = model
        return model


# ---------------------------------------------------------------------------
# utilities, payoffs and the potential

@dataclass
class GameSettings:
    """``utility_constant=None`` sets ``A = |S_j|`` per coalition."""

    utility_constant: float | None = None
    volumes: np.ndarray | None = None

    def volume(self, p: int) -> float:
        return 1.0 if self.volumes is None else float(self.volumes[p])


def coalition_utility(members, errors: dict[int, float], constant: float | None = None) -> float:
    members = frozenset(members)
    if not members:
        return 0.0
    missing = [p for p in members if p not in errors]
    if missing:
        raise KeyError(f"no error reported for members {sorted(missing)}")
    a = float(len(members)) if constant is None else float(constant)
    return a - sum(errors[p] for p in sorted(members))


def member_payoff(p: int, members, volumes, utility: float) -> float:
    """Share of ``utility`` proportional to member ``p``'s data volume."""
    members = sorted(members)
    total = sum(abs(float(volumes[q])) for q in members)
    if total <= 0:
        raise ValueError("coalition contributes zero data volume")
    return abs(float(volumes[p])) / total * utility


def _volumes(settings: GameSettings, n: int):
    return np.ones(n) if settings.volumes is None else np.asarray(settings.volumes, dtype=float)


def _utility(members, oracle: UtilityOracle, settings: GameSettings) -> float:
    return coalition_utility(members, oracle.errors(members), settings.utility_constant)


def payoffs(members, oracle: UtilityOracle, settings: GameSettings) -> dict[int, float]:
    members = frozenset(members)
    if not members:
        return {}
    u = _utility(members, oracle, settings)
    vol = _volumes(settings, oracle.n_users)
    return {p: member_payoff(p, members, vol, u) for p in sorted(members)}


def total_utility(partition: CoalitionPartition, oracle: UtilityOracle, settings: GameSettings) -> float:
    return sum(_utility(s, oracle, settings) for s in partition.coalitions())


def potential(partition: CoalitionPartition, oracle: UtilityOracle, settings: GameSettings) -> float:
    """Sum of every member's payoff over all coalitions."""
    return sum(sum(payoffs(s, oracle, settings).values()) for s in partition.coalitions())


def altruistic_gain(user: int, partition: CoalitionPartition, label: int, oracle: UtilityOracle,
                    settings: GameSettings) -> float:
    """Left side minus right side of the altruistic criterion for moving ``user`` to ``label``.

    Sums run over the user's payoff, the payoffs of the target coalition's
    members and of the remaining members of the coalition it leaves, after
    versus before the move.
    """
    old = partition.coalition_of(user)
    target = partition.candidate(label)
    joined, left = target | {user}, old - {user}
    after_join, before_join = payoffs(joined, oracle, settings), payoffs(target, oracle, settings)
    after_leave, before_leave = payoffs(left, oracle, settings), payoffs(old, oracle, settings)
    lhs = after_join[user] + sum(after_join[k] for k in sorted(target)) + sum(after_leave[k] for k in sorted(left))
    rhs = before_leave[user] + sum(before_join[k] for k in sorted(target)) + sum(before_leave[k] for k in sorted(left))
    return lhs - rhs


def altruistic_prefers(user: int, partition: CoalitionPartition, label: int, oracle: UtilityOracle,
                       settings: GameSettings, tol: float = SWITCH_TOL) -> bool:
    """Whether ``user`` strictly prefers coalition ``label`` to its current one."""
    if label == partition.assignment[user]:
        return False
    return altruistic_gain(user, partition, label, oracle, settings) > tol


def best_switch(user: int, partition: CoalitionPartition, oracle, settings, tol: float = SWITCH_TOL):
    """``(label, gain)`` of the user's best improving move, or ``None``."""
    best = None
    for label in range(partition.max_coalitions + 1):
        if label == partition.assignment[user]:
            continue
        gain = altruistic_gain(user, partition, label, oracle, settings)
        if gain > tol and (best is None or gain > best[1]):
            best = (label, gain)
    return best


def is_stable(partition: CoalitionPartition, oracle, settings, tol: float = SWITCH_TOL) -> bool:
    return all(best_switch(u, partition, oracle, settings, tol) is None for u in range(partition.n_users))


@dataclass
class TraceStep:
    step: int
    user: int
    source: int
    target: int
    potential: float
    utility: float


def switch_dynamics(initial: CoalitionPartition, oracle: UtilityOracle, settings: GameSettings,
                    order: str = "round_robin", rng: np.random.Generator | None = None,
                    max_steps: int | None = None, tol: float = SWITCH_TOL):
    """Let users take best altruistic switches until nobody wants to move.

    ``order`` is ``round_robin`` (users 0..K-1 each pass) or ``random`` (a
    fresh permutation each pass). Returns ``(partition, trace)``.
    """
    if order not in ("round_robin", "random"):
        raise ValueError(f"unknown order {order!r}")
    rng = np.random.default_rng(0) if rng is None else rng
    k, j = initial.n_users, initial.max_coalitions
    if max_steps is None:
        max_steps = 10 * (j + 1) ** k
    partition, trace = initial, []
    while True:
        users = range(k) if order == "round_robin" else rng.permutation(k)
        moved = False
        for u in users:
            move = best_switch(int(u), partition, oracle, settings, tol)
            if move is None:
                continue
            source = partition.assignment[u]
            partition = partition.moved(int(u), move[0])
            trace.append(TraceStep(len(trace) + 1, int(u), source, move[0],
                                   potential(partition, oracle, settings),
                                   total_utility(partition, oracle, settings)))
            moved = True
            if len(trace) >= max_steps:
                raise RuntimeError("switch dynamics exceeded the step budget")
        if not moved:
            return partition, trace


@dataclass
class StabilityReport:
    stable: list[tuple[int, ...]]
    argmax: tuple[int, ...]
    potentials: dict[tuple[int, ...], float] = field(repr=False)


def brute_force_stability(oracle: UtilityOracle, settings: GameSettings, k: int, j: int,
                          limit: int = 10 ** 6, tol: float = SWITCH_TOL) -> StabilityReport:
    """Enumerate all ``(J+1)^K`` assignments; report the stable ones and the potential maximizer."""
    if (j + 1) ** k > limit:
        raise InstanceTooLargeError(f"(J+1)^K = {(j + 1) ** k} exceeds {limit}")
    stable, potentials = [], {}
    for a in itertools.product(range(j + 1), repeat=k):
        part = CoalitionPartition(a, j)
        potentials[a] = potential(part, oracle, settings)
        if is_stable(part, oracle, settings, tol):
            stable.append(a)
    argmax = max(potentials, key=lambda a: (potentials[a], tuple(-x for x in a)))
    return StabilityReport(stable, argmax, potentials)


def correlation_partition(correlation: np.ndarray, max_coalitions: int = 3, solo_error: float = 0.5,
                          settings: GameSettings | None = None) -> CoalitionPartition:
    """Stable partition reached from the grand coalition under the surrogate oracle."""
    oracle = SurrogateOracle(correlation, solo_error)
    settings = settings or GameSettings()
    start = CoalitionPartition.grand(oracle.n_users, max_coalitions)
    return switch_dynamics(start, oracle, settings)[0]


TRACE_FIELDS = ["step", "user", "from", "to", "phi", "U"]


def write_trace_csv(path: str | Path, trace: list[TraceStep]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_FIELDS)
        for t in trace:
            writer.writerow([t.step, t.user, t.source, t.target, f"{t.potential:.12g}", f"{t.utility:.12g}"])
