import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cffl import coalition as co


def random_correlation(rng, k):
    x = rng.uniform(0, 1, (k, k))
    c = (x + x.T) / 2
    np.fill_diagonal(c, 1.0)
    return c


def independent_total(partition, corr, solo=0.5, constant=None):
    # straight summation of coalition utilities from the error definition
    total = 0.0
    labels = set(partition.assignment)
    groups = [[i for i, c in enumerate(partition.assignment) if c == j] for j in labels if j != 0]
    groups += [[i] for i, c in enumerate(partition.assignment) if c == 0]
    for g in groups:
        errs = []
        for p in g:
            if len(g) == 1:
                errs.append(solo)
            else:
                errs.append(min(max(1 - np.mean([corr[p, q] for q in g if q != p]), 0), 1))
        total += (len(g) if constant is None else constant) - sum(errs)
    return total


def two_block_correlation(k=6):
    corr = np.full((k, k), 0.05)
    h = k // 2
    corr[:h, :h] = 0.95
    corr[h:, h:] = 0.95
    np.fill_diagonal(corr, 1.0)
    return corr


def test_partition_basics():
    p = co.CoalitionPartition((0, 1, 1, 2, 0), 3)
    assert list(p.sizes) == [2, 1, 0]
    assert set(p.coalitions()) == {frozenset({1, 2}), frozenset({3}), frozenset({0}), frozenset({4})}
    assert p.coalition_of(0) == {0} and p.coalition_of(2) == {1, 2}
    with pytest.raises(ValueError):
        co.CoalitionPartition((0, 4), 3)


def test_coalition_utility_examples():
    assert co.coalition_utility({0, 1}, {0: 0.0, 1: 0.0}, 5.0) == 5.0
    assert co.coalition_utility({0, 1, 2}, {0: 0.2, 1: 0.3, 2: 0.5}, 10.0) == pytest.approx(9.0, abs=1e-15)
    base = co.coalition_utility({0}, {0: 0.4, 1: 0.0}, 3.0)
    assert co.coalition_utility({0, 1}, {0: 0.4, 1: 0.0}, 3.0) == base
    with pytest.raises(KeyError):
        co.coalition_utility({0, 1}, {0: 0.1})


def test_member_payoff_examples():
    assert co.member_payoff(2, {2}, np.ones(3), 7.0) == 7.0
    assert all(co.member_payoff(p, range(4), np.ones(4), 8.0) == 2.0 for p in range(4))
    assert co.member_payoff(0, {0, 1}, [1, 3], 8.0) == 2.0
    assert co.member_payoff(1, {0, 1}, [1, 3], 8.0) == 6.0
    with pytest.raises(ValueError):
        co.member_payoff(0, {0, 1}, [0, 0], 1.0)


def test_total_utility_examples():
    oracle = co.ConstantOracle(5, 0.0)
    assert co.total_utility(co.CoalitionPartition.solo(5), oracle, co.GameSettings(2.0)) == 10.0
    rng = np.random.default_rng(0)
    corr = random_correlation(rng, 6)
    oracle = co.SurrogateOracle(corr)
    for _ in range(20):
        part = co.CoalitionPartition(tuple(rng.integers(0, 4, 6)), 3)
        assert abs(co.total_utility(part, oracle, co.GameSettings()) - independent_total(part, corr)) <= 1e-12
        assert abs(co.total_utility(part, oracle, co.GameSettings(10.0))
                   - independent_total(part, corr, constant=10.0)) <= 1e-12


def test_potential_examples():
    oracle = co.TableOracle(5, seed=3)
    s = co.GameSettings(volumes=np.array([1.0, 2.0, 3.0, 4.0, 5.0]))
    grand = co.CoalitionPartition.grand(5)
    assert co.potential(grand, oracle, s) == pytest.approx(co._utility(frozenset(range(5)), oracle, s), abs=1e-12)
    rng = np.random.default_rng(1)
    for _ in range(100):
        part = co.CoalitionPartition(tuple(rng.integers(0, 4, 5)), 3)
        assert abs(co.potential(part, oracle, s) - co.total_utility(part, oracle, s)) <= 1e-12


@settings(max_examples=100)
@given(st.integers(0, 2 ** 31), st.integers(2, 7))
def test_payoff_shares_sum_to_utility(seed, k):
    rng = np.random.default_rng(seed)
    oracle = co.TableOracle(k, seed)
    s = co.GameSettings(volumes=rng.uniform(0.1, 5, k))
    members = frozenset(int(i) for i in np.flatnonzero(rng.integers(0, 2, k))) or frozenset({0})
    assert abs(sum(co.payoffs(members, oracle, s).values()) - co._utility(members, oracle, s)) <= 1e-12


def test_exact_potential_over_random_switches():
    rng = np.random.default_rng(2)
    worst, n = 0.0, 0
    for trial in range(30):
        k = int(rng.integers(2, 8))
        oracle = co.SurrogateOracle(random_correlation(rng, k), solo_error=rng.uniform(0, 1))
        s = co.GameSettings(None if trial % 2 else rng.uniform(1, 5), rng.uniform(0.1, 3, k))
        for _ in range(50):
            part = co.CoalitionPartition(tuple(rng.integers(0, 4, k)), 3)
            user, label = int(rng.integers(k)), int(rng.integers(4))
            if label == part.assignment[user]:
                continue
            gain = co.altruistic_gain(user, part, label, oracle, s)
            delta = co.potential(part.moved(user, label), oracle, s) - co.potential(part, oracle, s)
            worst = max(worst, abs(gain - delta))
            n += 1
    assert n >= 1000
    assert worst <= 1e-9


def test_altruistic_examples():
    oracle = co.SurrogateOracle(two_block_correlation())
    s = co.GameSettings()
    part = co.CoalitionPartition((1, 1, 2, 2, 2, 0), 3)
    assert not co.altruistic_prefers(0, part, 1, oracle, s)
    # user 2 belongs with 0 and 1: both coalitions it touches gain utility
    before = [co._utility(part.members(j), oracle, s) for j in (1, 2)]
    after = part.moved(2, 1)
    after_u = [co._utility(after.members(j), oracle, s) for j in (1, 2)]
    assert all(a > b for a, b in zip(after_u, before))
    assert co.altruistic_prefers(2, part, 1, oracle, s)


def test_altruistic_permutation_invariant():
    rng = np.random.default_rng(3)
    corr = random_correlation(rng, 5)
    perm = rng.permutation(5)
    inv = np.argsort(perm)
    o1 = co.SurrogateOracle(corr)
    o2 = co.SurrogateOracle(corr[np.ix_(perm, perm)])
    s = co.GameSettings()
    for _ in range(50):
        a = rng.integers(0, 3, 5)
        p1 = co.CoalitionPartition(tuple(a), 2)
        p2 = co.CoalitionPartition(tuple(a[perm]), 2)
        u, label = int(rng.integers(5)), int(rng.integers(3))
        assert co.altruistic_prefers(u, p1, label, o1, s) == co.altruistic_prefers(int(inv[u]), p2, label, o2, s)


def test_switch_dynamics_from_maximum_is_idle():
    rng = np.random.default_rng(4)
    oracle = co.SurrogateOracle(random_correlation(rng, 5))
    s = co.GameSettings()
    rep = co.brute_force_stability(oracle, s, 5, 2)
    final, trace = co.switch_dynamics(co.CoalitionPartition(rep.argmax, 2), oracle, s)
    assert trace == [] and final.assignment == rep.argmax


@pytest.mark.parametrize("order", ["round_robin", "random"])
def test_switch_dynamics_matches_enumeration(order):
    rng = np.random.default_rng(5)
    for _ in range(5):
        oracle = co.SurrogateOracle(random_correlation(rng, 5))
        s = co.GameSettings()
        rep = co.brute_force_stability(oracle, s, 5, 2)
        start = co.CoalitionPartition(tuple(rng.integers(0, 3, 5)), 2)
        final, trace = co.switch_dynamics(start, oracle, s, order=order, rng=rng)
        assert final.assignment in rep.stable
        phis = [co.potential(start, oracle, s)] + [t.potential for t in trace]
        assert all(b > a for a, b in zip(phis, phis[1:]))
        assert len(trace) <= 10 * 3 ** 5


def test_switch_dynamics_bad_order():
    with pytest.raises(ValueError):
        co.switch_dynamics(co.CoalitionPartition.solo(2), co.ConstantOracle(2, 0.1), co.GameSettings(), "lifo")


def test_brute_force_examples():
    rep = co.brute_force_stability(co.TableOracle(1), co.GameSettings(), 1, 3)
    assert sorted(rep.stable) == [(0,), (1,), (2,), (3,)]
    rep = co.brute_force_stability(co.ConstantOracle(4, 0.3), co.GameSettings(), 4, 2)
    assert len(rep.stable) == 3 ** 4
    assert max(rep.potentials.values()) - min(rep.potentials.values()) <= 1e-12
    with pytest.raises(co.InstanceTooLargeError):
        co.brute_force_stability(co.ConstantOracle(20, 0.1), co.GameSettings(), 20, 3)


def test_argmax_is_stable_on_random_instances():
    rng = np.random.default_rng(6)
    for _ in range(20):
        oracle = co.SurrogateOracle(random_correlation(rng, 4), solo_error=rng.uniform(0.2, 0.8))
        rep = co.brute_force_stability(oracle, co.GameSettings(), 4, 2)
        assert rep.argmax in rep.stable


def test_correlation_partition_groups_blocks():
    corr = two_block_correlation()
    part = co.correlation_partition(corr, max_coalitions=2)
    # splitting the grand coalition strands the first block as singletons: a solo user
    # cannot regroup without first moving alone into an empty label, which gains nothing
    assert part.assignment == (0, 0, 0, 1, 1, 1)
    oracle, s = co.SurrogateOracle(corr), co.GameSettings()
    rep = co.brute_force_stability(oracle, s, 6, 2)
    assert part.assignment in rep.stable
    assert {frozenset(g) for g in co.CoalitionPartition(rep.argmax, 2).coalitions()} == {
        frozenset({0, 1, 2}), frozenset({3, 4, 5})}


def test_errors_clipped_and_cached():
    corr = np.full((3, 3), -1.0)
    oracle = co.SurrogateOracle(corr)
    assert oracle.errors({0, 1}) == {0: 1.0, 1: 1.0}
    assert oracle.errors({1, 0}) is oracle.errors({0, 1})


def test_trace_csv(tmp_path):
    oracle = co.SurrogateOracle(two_block_correlation())
    _, trace = co.switch_dynamics(co.CoalitionPartition.grand(6), oracle, co.GameSettings())
    co.write_trace_csv(tmp_path / "t.csv", trace)
    rows = list(csv.reader((tmp_path / "t.csv").open()))
    assert rows[0] == ["step", "user", "from", "to", "phi", "U"]
    assert len(rows) == len(trace) + 1 and len(trace) > 0
    assert float(rows[-1][4]) == pytest.approx(trace[-1].potential)
