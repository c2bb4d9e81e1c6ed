import itertools
import math

import numpy as np
import pytest
from helpers import (
    corrupt_completeness,
    corrupt_decomposability,
    oracle_density,
    random_circuit,
    random_params,
    recompute_scopes,
    rel_err,
)
from hypothesis import given, settings
from hypothesis import strategies as st

from ispn.circuit import (
    CircuitBuilder,
    CircuitStructure,
    Leaf,
    ParameterVector,
    Product,
    RatConfig,
    Sum,
    binary_masses,
    build_rat,
    circuit_backward,
    interval_masses,
    log_density,
    log_density_and_grad,
    marginal_curve,
    node_log_values,
    rat_config_for,
    rat_slot_counts,
    raw_scale_for,
    validate,
)
from ispn.errors import InvalidConfig, ShapeMismatch


def single_leaf(mu=0.0, sigma=1.0):
    b = CircuitBuilder(1)
    b.leaf(0)
    s = b.build()
    return s, ParameterVector(np.zeros(0), np.array([mu, raw_scale_for(sigma)]))


# ------------------------------------------------------------------ log density


def test_standard_normal_at_mode():
    s, psi = single_leaf()
    assert log_density(s, psi, [0.0]) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=5), st.floats(-3, 3))
def test_sum_over_identical_leaves(logits, x):
    b = CircuitBuilder(1)
    kids = [b.leaf(0) for _ in logits]
    b.sum(kids)
    s = b.build()
    leaf = np.tile([0.3, raw_scale_for(1.7)], len(logits))
    psi = ParameterVector(np.array(logits), leaf)
    ref = -0.5 * ((x - 0.3) / 1.7) ** 2 - math.log(1.7) - 0.5 * math.log(2 * math.pi)
    assert log_density(s, psi, [x]) == pytest.approx(ref, abs=1e-12)


def test_two_variable_mixture_by_hand():
    b = CircuitBuilder(2)
    l = [b.leaf(v) for v in (0, 1, 0, 1)]
    p1, p2 = b.product(l[:2]), b.product(l[2:])
    b.sum([p1, p2])
    s = b.build()
    psi = ParameterVector(np.log([0.25, 0.75]), np.array([0, raw_scale_for(1), 1, raw_scale_for(2), -1, raw_scale_for(0.5), 2, raw_scale_for(1)]))
    x = np.array([0.2, 1.4])
    from scipy.stats import norm

    ref = 0.25 * norm.pdf(0.2, 0, 1) * norm.pdf(1.4, 1, 2) + 0.75 * norm.pdf(0.2, -1, 0.5) * norm.pdf(1.4, 2, 1)
    assert log_density(s, psi, x) == pytest.approx(math.log(ref), abs=1e-12)


@pytest.mark.parametrize("seed", range(25))
def test_polynomial_oracle(seed):
    rng = np.random.default_rng(seed)
    s = random_circuit(rng)
    assert len(s.nodes) <= 20 and validate(s).ok
    psi = random_params(s, rng)
    x = rng.normal(0, 1, s.num_vars)
    marg = rng.random(s.num_vars) < 0.3
    for m in (None, marg):
        got = log_density(s, psi, x, m)
        ref = math.log(oracle_density(s, psi, x, m))
        assert abs(got - ref) <= 1e-12 * max(1.0, abs(ref))


def test_batch_matches_rows():
    rng = np.random.default_rng(3)
    s = random_circuit(rng)
    psi = random_params(s, rng)
    X = rng.normal(size=(7, s.num_vars))
    batch = log_density(s, psi, X)
    assert batch.shape == (7,)
    np.testing.assert_array_equal(batch, [log_density(s, psi, r) for r in X])


def test_shape_errors():
    s, psi = single_leaf()
    with pytest.raises(ShapeMismatch):
        log_density(s, psi, [0.0, 1.0])
    with pytest.raises(ShapeMismatch):
        log_density(s, ParameterVector(np.zeros(1), np.zeros(2)), [0.0])
    with pytest.raises(ShapeMismatch):
        marginal_curve(s, psi, 0, [])


# ------------------------------------------------------------- rat structures


@pytest.mark.parametrize(
    "n,weights,leaves", [(8, 2400, 96), (5, 2400, 96), (4, 600, 12)]
)
def test_rat_slot_targets(n, weights, leaves):
    cfg = rat_config_for(n, weights, leaves)
    s = build_rat(cfg)
    assert (s.num_sum_weights, s.num_leaf_params) == rat_slot_counts(cfg)
    assert abs(s.num_sum_weights - weights) / weights < 0.05
    assert validate(s).ok
    assert s.scopes == recompute_scopes(s.nodes, n)


def test_rat_precise_counts():
    s = build_rat(rat_config_for(8, 2400, 96))
    assert s.num_leaf_params == 96
    assert abs(s.num_sum_weights - 2400) <= 10


def test_rat_deterministic():
    cfg = RatConfig(6, 2, 3, 4, 2, seed=11)
    assert build_rat(cfg) == build_rat(cfg)
    assert build_rat(cfg).hash != build_rat(RatConfig(6, 2, 3, 4, 2, seed=12)).hash


@pytest.mark.parametrize("cfg", [RatConfig(1), RatConfig(4, split_depth=3), RatConfig(4, num_repetitions=0)])
def test_rat_invalid(cfg):
    with pytest.raises(InvalidConfig):
        build_rat(cfg)


@given(
    st.integers(2, 7), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 99)
)
@settings(max_examples=30, deadline=None)
def test_fast_path_matches_generic(n, depth, reps, sums, leaves, seed):
    depth = min(depth, math.ceil(math.log2(n)))
    s = build_rat(RatConfig(n, depth, reps, sums, leaves, seed))
    assert s.rat_plan is not None
    rng = np.random.default_rng(seed)
    psi = ParameterVector.random(s, rng)
    X = rng.normal(size=(5, n))
    marg = rng.random((5, n)) < 0.3
    fast = log_density(s, psi, X, marg)
    slow = log_density(s, psi, X, marg, generic=True)
    np.testing.assert_allclose(fast, slow, rtol=1e-11, atol=1e-11)
    w = rng.random(5)
    _, gf = log_density_and_grad(s, psi, X, marg, row_weights=w)
    _, gs = log_density_and_grad(s, psi, X, marg, row_weights=w, generic=True)
    np.testing.assert_allclose(gf.flat(), gs.flat(), rtol=1e-9, atol=1e-11)


def test_hand_built_copy_of_rat_uses_generic_path():
    s = build_rat(RatConfig(4, 2, 2, 2, 2))
    t = CircuitStructure(s.nodes, s.root, s.scopes, s.num_vars, s.num_sum_weights, s.num_leaf_params)
    assert t.rat_plan is None
    psi = ParameterVector.random(s, np.random.default_rng(0))
    x = np.linspace(-1, 1, 4)
    assert log_density(t, psi, x) == pytest.approx(log_density(s, psi, x), abs=1e-12)


# ------------------------------------------------------------------- validate


def test_rat_and_random_circuits_validate():
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert validate(random_circuit(rng)).ok


def test_decomposability_obvious():
    b = CircuitBuilder(1)
    a, c = b.leaf(0), b.leaf(0)
    p = b.product([a, c])
    rep = validate(b.build(p))
    assert not rep.ok and rep.decomposability == p


def test_completeness_obvious():
    b = CircuitBuilder(2)
    a, c = b.leaf(0), b.leaf(1)
    sm = b.sum([a, c])
    rep = validate(b.build(sm))
    assert not rep.ok and rep.completeness == sm


@pytest.mark.parametrize("kind", ["completeness", "decomposability"])
def test_random_corruptions(kind):
    corrupt = corrupt_completeness if kind == "completeness" else corrupt_decomposability
    rng = np.random.default_rng(hash(kind) % 2**32)
    hits = 0
    while hits < 50:
        got = corrupt(random_circuit(rng, max_nodes=20), rng)
        if got is None:
            continue
        s, node = got
        rep = validate(s)
        assert not rep.ok
        assert getattr(rep, kind) == node
        assert rep.scope is None and rep.acyclic is None and rep.slots is None
        hits += 1


def test_other_categories():
    b = CircuitBuilder(2)
    l0, l1 = b.leaf(0), b.leaf(1)
    p = b.product([l0, l1])
    good = b.build(p)
    assert validate(good).ok

    cyc = CircuitStructure((good.nodes[0], good.nodes[1], Product((0, 2))), 2, good.scopes, 2, 0, 4)
    assert validate(cyc).acyclic == 2

    bad_scope = CircuitStructure(good.nodes, 2, (frozenset({0}), frozenset({0}), frozenset({0, 1})), 2, 0, 4)
    assert validate(bad_scope).scope == 1

    shared = CircuitStructure((Leaf(0, (0, 2)), Leaf(1, (0, 2)), good.nodes[2]), 2, good.scopes, 2, 0, 4)
    assert validate(shared).slots is not None

    partial = CircuitStructure(good.nodes, 0, good.scopes, 2, 0, 4)
    rep = validate(partial)
    assert not rep.root_scope and not rep
    assert rep.violations == {"root_scope": False}

    sum_slots = CircuitStructure((*good.nodes, Sum((2,), (0, 3))), 3, (*good.scopes, good.scopes[2]), 2, 3, 4)
    assert validate(sum_slots).slots == 3


# ------------------------------------------------------------------ invariants


@pytest.mark.parametrize("seed", range(5))
def test_marginalise_everything(seed):
    rng = np.random.default_rng(seed)
    s = build_rat(RatConfig(5, 2, 2, 3, 2, seed))
    psi = ParameterVector.random(s, rng, 2.0)
    for generic in (False, True):
        assert abs(log_density(s, psi, np.zeros(5), np.ones(5, bool), generic=generic)) < 1e-9


def test_marginal_curve_integrates_to_one():
    rng = np.random.default_rng(1)
    s = build_rat(RatConfig(4, 2, 2, 2, 2))
    psi = ParameterVector.random(s, rng)
    grid = np.linspace(-30, 30, 20001)
    for v in range(4):
        assert np.trapezoid(marginal_curve(s, psi, v, grid), grid) == pytest.approx(1.0, abs=1e-2)


def test_marginal_curve_single_gaussian_peak():
    s, psi = single_leaf(2.0, 0.5)
    assert marginal_curve(s, psi, 0, [2.0])[0] == pytest.approx(1 / (0.5 * math.sqrt(2 * math.pi)), rel=1e-12)


def test_binary_readout_sums_to_one_and_matches_quadrature():
    rng = np.random.default_rng(2)
    s = build_rat(RatConfig(3, 1, 2, 2, 2))
    psi = ParameterVector.random(s, rng)
    psi.leaf_params[1::2] = raw_scale_for(0.3)
    grid = np.linspace(-3, 4, 1401)
    for v in range(3):
        m = binary_masses(s, psi, v)
        assert m.sum() == pytest.approx(1.0, abs=1e-6)
        curve = marginal_curve(s, psi, v, grid)
        quad = np.trapezoid(np.where(grid > 0.5, curve, 0), grid)
        assert m[1] == pytest.approx(quad, abs=5e-3)


def test_interval_masses_partition():
    rng = np.random.default_rng(4)
    s = build_rat(RatConfig(4, 2, 1, 2, 2))
    psi = ParameterVector.random(s, rng)
    edges = np.concatenate([[-np.inf], np.linspace(-2, 2, 9), [np.inf]])
    m = interval_masses(s, psi, 1, edges)
    assert (m >= 0).all() and m.sum() == pytest.approx(1.0, abs=1e-12)


def test_exhaustive_binary_sum():
    """Summing box probabilities over all 2^N half-line cells gives 1."""
    from ispn.circuit import log_prob_box

    rng = np.random.default_rng(5)
    s = build_rat(RatConfig(5, 2, 2, 2, 2))
    psi = ParameterVector.random(s, rng)
    cells = np.array(list(itertools.product([0, 1], repeat=5)))
    lo = np.where(cells == 1, 0.5, -np.inf)
    hi = np.where(cells == 1, np.inf, 0.5)
    assert np.exp(log_prob_box(s, psi, lo, hi)).sum() == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_scope_respecting(seed):
    rng = np.random.default_rng(seed)
    s = random_circuit(rng)
    psi = random_params(s, rng)
    x = rng.normal(size=s.num_vars)
    V = node_log_values(s, psi, x)[0]
    for v in range(s.num_vars):
        y = x.copy()
        y[v] += 3.0
        W = node_log_values(s, psi, y)[0]
        outside = [i for i, sc in enumerate(s.scopes) if v not in sc]
        np.testing.assert_array_equal(V[outside], W[outside])


@given(st.floats(-1000, 1000))
@settings(max_examples=50)
def test_finite_far_from_domain(x):
    s = build_rat(RatConfig(3, 1, 2, 2, 2))
    psi = ParameterVector.random(s, np.random.default_rng(0))
    for generic in (False, True):
        v = log_density(s, psi, np.full(3, x), generic=generic)
        assert np.isfinite(v)
        _, g = log_density_and_grad(s, psi, np.full((1, 3), x), generic=generic)
        assert np.isfinite(g.flat()).all()


# -------------------------------------------------------------------- gradients


def test_gaussian_score():
    s, psi = single_leaf(0.7, 1.3)
    g = circuit_backward(s, psi, [2.0])
    sigma = 1.3
    assert g.leaf_params[0] == pytest.approx((2.0 - 0.7) / sigma**2, rel=1e-9)


def test_single_child_sum_has_zero_logit_gradient():
    b = CircuitBuilder(1)
    b.sum([b.leaf(0)])
    s = b.build()
    psi = ParameterVector(np.array([0.4]), np.array([0.0, 0.5]))
    assert circuit_backward(s, psi, [1.1]).sum_logits[0] == 0.0


def _fd(s, psi, x, marg, h=1e-5):
    flat = psi.flat()
    out = np.empty_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        up = log_density(s, ParameterVector.from_flat(flat + e, s), x, marg).sum()
        dn = log_density(s, ParameterVector.from_flat(flat - e, s), x, marg).sum()
        out[i] = (up - dn) / (2 * h)
    return out


@pytest.mark.parametrize("seed", range(10))
def test_circuit_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    s = random_circuit(rng)
    psi = random_params(s, rng)
    x = rng.normal(size=(3, s.num_vars))
    marg = rng.random((3, s.num_vars)) < 0.3
    g = circuit_backward(s, psi, x, marg).flat()
    fd = _fd(s, psi, x, marg)
    big = np.abs(g) > 1e-6
    assert rel_err(g[big], fd[big]).max(initial=0) < 1e-4
    np.testing.assert_allclose(g[~big], fd[~big], atol=1e-6)


def test_marginalised_leaves_get_zero_gradient():
    s = build_rat(RatConfig(3, 1, 2, 2, 2))
    psi = ParameterVector.random(s, np.random.default_rng(0))
    marg = np.array([True, False, False])
    g = circuit_backward(s, psi, np.zeros(3), marg)
    for nd in s.nodes:
        if isinstance(nd, Leaf) and nd.var == 0:
            assert (g.leaf_params[nd.slots[0] : nd.slots[1]] == 0).all()


# --------------------------------------------------------------- serialisation


@pytest.mark.parametrize("make", [lambda: build_rat(RatConfig(5, 2, 2, 3, 2, 4)), lambda: random_circuit(np.random.default_rng(9))])
def test_json_roundtrip(make):
    s = make()
    t = CircuitStructure.from_json(s.to_json())
    assert t == s and t.to_json() == s.to_json() and t.hash == s.hash
    assert t.nodes == s.nodes and t.scopes == s.scopes and t.config == s.config


# ------------------------------------------------------- binary cell likelihood


def _cell_bounds(x, discrete):
    lo = np.where(discrete & (x > 0.5), 0.5, -np.inf)
    hi = np.where(discrete & (x <= 0.5), 0.5, np.inf)
    return lo, hi


@pytest.mark.parametrize("seed", range(6))
def test_cell_likelihood_is_box_probability(seed):
    from ispn.circuit import log_prob_box

    rng = np.random.default_rng(seed)
    s = build_rat(RatConfig(4, 2, 2, 2, 2, seed))
    psi = ParameterVector.random(s, rng)
    x = rng.integers(0, 2, size=(6, 4)).astype(float)
    disc = np.ones(4, bool)
    lo, hi = _cell_bounds(x, disc)
    np.testing.assert_allclose(log_density(s, psi, x, discrete=disc), log_prob_box(s, psi, lo, hi), atol=1e-12)


def test_cell_and_density_mix_matches_oracle():
    """Half the variables scored by cells: compare against the polynomial
    with cell probabilities from scipy substituted at those leaves."""
    from helpers import expand, leaf_scale
    from scipy.stats import norm

    rng = np.random.default_rng(7)
    for _ in range(10):
        s = random_circuit(rng)
        psi = random_params(s, rng)
        disc = rng.random(s.num_vars) < 0.5
        x = np.where(disc, rng.integers(0, 2, s.num_vars), rng.normal(size=s.num_vars)).astype(float)
        vals = {}
        for i, nd in enumerate(s.nodes):
            if isinstance(nd, Leaf):
                mu, sd = psi.leaf_params[nd.slots[0]], leaf_scale(psi.leaf_params[nd.slots[0] + 1])
                v = x[nd.var]
                if disc[nd.var]:
                    vals[i] = norm.sf(0.5, mu, sd) if v > 0.5 else norm.cdf(0.5, mu, sd)
                else:
                    vals[i] = norm.pdf(v, mu, sd)
        ref = math.log(math.fsum(c * math.prod(vals[j] for j in m) for c, m in expand(s, psi)))
        assert log_density(s, psi, x, discrete=disc) == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_cell_gradient_fd(seed):
    rng = np.random.default_rng(100 + seed)
    s = random_circuit(rng)
    psi = random_params(s, rng)
    disc = rng.random(s.num_vars) < 0.6
    x = np.where(disc, rng.integers(0, 2, (4, s.num_vars)), rng.normal(size=(4, s.num_vars))).astype(float)
    _, g = log_density_and_grad(s, psi, x, discrete=disc)
    g = g.flat()
    flat = psi.flat()
    h = 1e-5
    fd = np.empty_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        up = log_density(s, ParameterVector.from_flat(flat + e, s), x, discrete=disc).sum()
        dn = log_density(s, ParameterVector.from_flat(flat - e, s), x, discrete=disc).sum()
        fd[i] = (up - dn) / (2 * h)
    big = np.abs(g) > 1e-6
    assert rel_err(g[big], fd[big]).max(initial=0) < 1e-4
    np.testing.assert_allclose(g[~big], fd[~big], atol=1e-6)


def test_cell_fast_path_matches_generic():
    rng = np.random.default_rng(1)
    s = build_rat(RatConfig(6, 2, 3, 3, 2))
    psi = ParameterVector.random(s, rng, 2.0)
    disc = np.array([1, 1, 0, 1, 0, 1], bool)
    x = np.where(disc, rng.integers(0, 2, (9, 6)), rng.normal(size=(9, 6))).astype(float)
    a, ga = log_density_and_grad(s, psi, x, discrete=disc)
    b, gb = log_density_and_grad(s, psi, x, discrete=disc, generic=True)
    np.testing.assert_allclose(a, b, atol=1e-11)
    np.testing.assert_allclose(ga.flat(), gb.flat(), rtol=1e-9, atol=1e-11)


def test_cell_likelihood_bounded_and_sums_to_one():
    s = build_rat(RatConfig(3, 1, 2, 2, 2))
    psi = ParameterVector.random(s, np.random.default_rng(3))
    psi.leaf_params[1::2] = -50.0  # scales at the floor
    states = np.array(list(itertools.product([0.0, 1.0], repeat=3)))
    lp = log_density(s, psi, states, discrete=np.ones(3, bool))
    assert (lp <= 1e-12).all()
    assert np.exp(lp).sum() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ShapeMismatch):
        log_density(s, psi, states, discrete=[True])
