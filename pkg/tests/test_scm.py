import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ispn.distributions import Bernoulli, Uniform
from ispn.errors import (
    BadRegimeSpec,
    InconsistentEvidence,
    InvalidScm,
    TooLarge,
    UnknownVariable,
    ZeroSupport,
)
from ispn.scm import (
    BINARY,
    Atomic,
    CausalGraph,
    Intervention,
    PerfectDistribution,
    Scm,
    Structural,
    adjustment_estimate,
    apply_intervention,
    exact_ate,
    exact_query,
    mutilate,
    parse_regime,
    sample,
    uniform_roster,
)
from ispn.specfile import load_builtin

HEALTH_EDGES = {("A", "F"), ("A", "H"), ("F", "H"), ("H", "M")}


def cbn(names, edges, cpts):
    """Binary network from ``{var: [P(var=1 | parent state)]}``."""
    g = CausalGraph.from_edges(names, edges)
    mechs = tuple(Structural("cpt", g.parents(v), tuple(cpts[v])) for v in names)
    return Scm(g, mechs, (BINARY,) * len(names))


def brute_marginal(scm, do=None, query=None, evidence=None):
    """Pure-python truncated factorisation over all joint states."""
    do = do or {}
    evidence = evidence or {}
    names = scm.names
    num = den = 0.0
    for state in itertools.product((0, 1), repeat=len(names)):
        s = dict(zip(names, state))
        p = 1.0
        for v in names:
            if v in do:
                p *= do[v][s[v]]
                continue
            m = scm.mechanism(v)
            idx = 0
            for pa in m.parents:
                idx = 2 * idx + s[pa]
            p1 = m.params[idx]
            p *= p1 if s[v] else 1 - p1
        if all(s[k] == val for k, val in evidence.items()):
            den += p
            if s[query] == 1:
                num += p
    return num / den


# ------------------------------------------------------------------ graph ops


@pytest.fixture(scope="module")
def health():
    return load_builtin("health")


def test_mutilate_health_food(health):
    g = mutilate(health.graph, parse_regime("do:F=uniform", health))
    assert set(g.edges()) == HEALTH_EDGES - {("A", "F")}


def test_mutilate_identity_cases(health):
    assert mutilate(health.graph, Intervention()) == health.graph
    assert mutilate(health.graph, Intervention.of(A=30.0)) == health.graph


def test_mutilate_unknown_variable(health):
    with pytest.raises(UnknownVariable):
        mutilate(health.graph, Intervention.of(Z=1.0))


@given(st.integers(0, 2**16 - 1), st.sets(st.integers(0, 5)))
def test_mutilation_idempotent_and_local(bits, targets):
    names = list("abcdef")
    adj = np.zeros((6, 6), int)
    pairs = [(i, j) for i in range(6) for j in range(i + 1, 6)]
    for k, (i, j) in enumerate(pairs):
        adj[i, j] = (bits >> k) & 1
    g = CausalGraph(names, adj)
    iv = Intervention.of({names[t]: 0.0 for t in targets})
    once = mutilate(g, iv)
    assert mutilate(once, iv) == once
    for j in range(6):
        expect = np.zeros(6) if j in targets else adj[:, j]
        np.testing.assert_array_equal(once.adj[:, j], expect)


def test_graph_invariants():
    with pytest.raises(InvalidScm):
        CausalGraph.from_edges(["a", "b"], [("a", "b"), ("b", "a")])
    with pytest.raises(InvalidScm):
        CausalGraph(["a"], [[1]])
    with pytest.raises(InvalidScm):
        CausalGraph(["a", "b"], [[0, 2], [0, 0]])


# -------------------------------------------------------------- interventions


def test_apply_uniform_keeps_other_mechanisms(health):
    iv = parse_regime("do:H=uniform", health)
    out = apply_intervention(health, iv)
    assert out.mechanism("H") == PerfectDistribution(Uniform(0.0, 100.0))
    for v in "AFM":
        assert out.mechanism(v) is health.mechanism(v)
    assert apply_intervention(health, Intervention()) is health


def test_atomic_health(health):
    out = apply_intervention(health, parse_regime("do:H=50", health))
    assert out.mechanism("H") == Atomic(50.0)
    ds = sample(out, 500, 3)
    assert (ds.column("H") == 50.0).all()


def test_untouched_mechanisms_see_identical_noise(health):
    a = sample(health, 1000, 9)
    b = sample(apply_intervention(health, parse_regime("do:M=uniform", health)), 1000, 9)
    np.testing.assert_array_equal(a.values[:, :3], b.values[:, :3])


def test_binary_atomic_out_of_domain():
    scm = load_builtin("asia")
    with pytest.raises(InvalidScm):
        apply_intervention(scm, Intervention.of(lung=0.5))
    with pytest.raises(BadRegimeSpec):
        parse_regime("do:lung=0.5", scm)


@pytest.mark.parametrize(
    "spec,label",
    [
        ("obs", "obs"),
        ("do:lung=bern0.5", "do:lung=bern0.5"),
        ("do:lung=uniform", "do:lung=bern0.5"),
        ("do:lung=1", "do:lung=1"),
        ("do:lung=1&smoke=0", "do:lung=1&smoke=0"),
    ],
)
def test_regime_labels(spec, label):
    assert parse_regime(spec, load_builtin("asia")).label == label


@pytest.mark.parametrize(
    "spec",
    ["do:H=uniform", "do:H=50", "do:H=gamma:2,3", "do:H=beta:2,2,0,100", "do:H=ind:20,80", "do:H=uniform:10,20", "do:H=gauss:50,5"],
)
def test_regime_roundtrip_dict(spec, health):
    iv = parse_regime(spec, health)
    assert Intervention.from_dict(iv.to_dict()) == iv
    assert parse_regime(iv.label, health) == iv


@pytest.mark.parametrize("spec", ["", "do:", "do:Q=1", "do:H", "do:H=beta:1", "do:H=gamma:-1,1", "xyz", "do:H=1&H=2"])
def test_bad_regimes(spec, health):
    with pytest.raises(BadRegimeSpec):
        parse_regime(spec, health)


def test_uniform_roster_binary_is_bernoulli():
    roster = uniform_roster(load_builtin("cancer"))
    assert roster[0].is_empty and len(roster) == 6
    for iv in roster[1:]:
        ((_, m),) = iv.targets
        assert m == PerfectDistribution(Bernoulli(0.5))


# -------------------------------------------------------------------- sampling


def test_bernoulli_mean():
    scm = cbn(["X"], [], {"X": [0.3]})
    assert sample(scm, 100_000, 4).values.mean() == pytest.approx(0.3, abs=0.01)


@pytest.mark.parametrize("name", ["asia", "health"])
def test_sampling_deterministic(name):
    scm = load_builtin(name)
    a, b = sample(scm, 300, 5), sample(scm, 300, 5)
    assert a.values.tobytes() == b.values.tobytes()
    assert sample(scm, 300, 6).values.tobytes() != a.values.tobytes()


def test_dataset_invariants(health):
    ds = sample(health, 2000, 0)
    assert ds.values.shape == (2000, 4)
    assert ((ds.values >= 0) & (ds.values <= 100)).all()
    asia = sample(load_builtin("asia"), 2000, 0)
    assert set(np.unique(asia.values)) <= {0.0, 1.0}
    with pytest.raises(ValueError):
        sample(health, 0, 0)


@pytest.mark.parametrize("name", ["asia", "earthquake", "cancer"])
def test_sampling_matches_enumeration(name):
    scm = load_builtin(name)
    for iv in uniform_roster(scm)[:3]:
        ds = sample(apply_intervention(scm, iv), 100_000, 11)
        for v in scm.names:
            p = exact_query(scm, iv, v)[1]
            se = math.sqrt(max(p * (1 - p), 1e-12) / 100_000)
            assert abs(ds.column(v).mean() - p) <= 3 * se + 1e-12


# ---------------------------------------------------------------- exact oracle


def test_earthquake_printed_values():
    eq = load_builtin("earthquake")
    hi = exact_query(eq, Intervention.of(Burglary=1.0), "Alarm")[1]
    lo = exact_query(eq, Intervention.of(Burglary=0.0), "Alarm")[1]
    assert hi == pytest.approx(0.99322, abs=1e-12)
    assert lo == pytest.approx(0.0598, abs=1e-12)
    assert exact_ate(eq, "Burglary", "Alarm") == pytest.approx(0.93342, abs=1e-12)


@pytest.mark.parametrize("name", ["asia", "earthquake", "cancer"])
def test_exact_query_matches_brute_force(name):
    scm = load_builtin(name)
    rng = np.random.default_rng(0)
    for _ in range(5):
        t, q, e = rng.choice(scm.names, 3, replace=False)
        val = float(rng.integers(2))
        iv = Intervention.of({t: val})
        do = {t: (1 - val, val)}
        ev = {e: 1}
        try:
            ref = brute_marginal(scm, do, q, ev)
        except ZeroDivisionError:
            continue
        assert exact_query(scm, iv, q, ev)[1] == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("name", ["asia", "earthquake", "cancer"])
def test_oracle_self_consistency(name):
    scm = load_builtin(name)
    for v in scm.names:
        assert abs(exact_query(scm, None, v).sum() - 1) < 1e-12


def test_point_intervention_on_query():
    scm = load_builtin("asia")
    np.testing.assert_allclose(exact_query(scm, Intervention.of(lung=1.0), "lung"), [0.0, 1.0], atol=1e-15)


def test_asia_bernoulli_decomposition():
    scm = load_builtin("asia")
    mix = exact_query(scm, parse_regime("do:lung=bern0.5", scm), "dysp")
    a0 = exact_query(scm, Intervention.of(lung=0.0), "dysp")
    a1 = exact_query(scm, Intervention.of(lung=1.0), "dysp")
    np.testing.assert_allclose(mix, 0.5 * a0 + 0.5 * a1, atol=1e-15)


def test_exact_errors():
    scm = load_builtin("asia")
    with pytest.raises(InconsistentEvidence):
        exact_query(scm, Intervention.of(lung=1.0), "dysp", {"lung": 0})
    with pytest.raises(InvalidScm):
        exact_query(load_builtin("health"), None, "H")
    names = [f"v{i}" for i in range(21)]
    big = cbn(names, [], {v: [0.5] for v in names})
    with pytest.raises(TooLarge):
        exact_query(big, None, "v0")


# ---------------------------------------------------------------- adjustment


def test_adjustment_earthquake():
    eq = load_builtin("earthquake")
    est = adjustment_estimate(eq, ("Burglary", 1.0), "Alarm", ["Earthquake"])
    assert est == pytest.approx(0.99322, abs=1e-12)


def test_adjustment_empty_set_is_conditional():
    eq = load_builtin("earthquake")
    est = adjustment_estimate(eq, ("Burglary", 1.0), "Alarm", [])
    assert est == pytest.approx(exact_query(eq, None, "Alarm", {"Burglary": 1})[1], abs=1e-14)


def test_confounded_triple():
    # C -> A, C -> B, no A -> B
    scm = cbn(["C", "A", "B"], [("C", "A"), ("C", "B")], {"C": [0.4], "A": [0.1, 0.8], "B": [0.2, 0.9]})
    eff = adjustment_estimate(scm, ("A", 1.0), "B", ["C"]) - adjustment_estimate(scm, ("A", 0.0), "B", ["C"])
    raw = exact_query(scm, None, "B", {"A": 1})[1] - exact_query(scm, None, "B", {"A": 0})[1]
    assert abs(eff) < 1e-12
    assert exact_ate(scm, "A", "B") == pytest.approx(0.0, abs=1e-12)
    # hand computation of the naive difference
    pc_a1 = 0.4 * 0.8 / (0.4 * 0.8 + 0.6 * 0.1)
    pc_a0 = 0.4 * 0.2 / (0.4 * 0.2 + 0.6 * 0.9)
    ref = (0.9 * pc_a1 + 0.2 * (1 - pc_a1)) - (0.9 * pc_a0 + 0.2 * (1 - pc_a0))
    assert raw == pytest.approx(ref, abs=1e-12) and abs(raw) > 0.3


def test_adjustment_errors():
    scm = cbn(["C", "A", "B"], [("C", "A"), ("A", "B")], {"C": [0.5], "A": [0.0, 0.5], "B": [0.2, 0.9]})
    with pytest.raises(ZeroSupport):
        adjustment_estimate(scm, ("A", 1.0), "B", ["C"])
    with pytest.raises(ValueError):
        adjustment_estimate(scm, ("A", 1.0), "B", ["A"])


@given(st.lists(st.floats(0.05, 0.95), min_size=7, max_size=7))
@settings(max_examples=25, deadline=None)
def test_backdoor_equals_do(ps):
    # Z -> T, Z -> Y, T -> Y: the adjustment formula over {Z} is the do-query
    scm = cbn(["Z", "T", "Y"], [("Z", "T"), ("Z", "Y"), ("T", "Y")], {"Z": ps[:1], "T": ps[1:3], "Y": ps[3:7]})
    for t in (0.0, 1.0):
        adj = adjustment_estimate(scm, ("T", t), "Y", ["Z"])
        assert adj == pytest.approx(exact_query(scm, Intervention.of(T=t), "Y")[1], abs=1e-12)
