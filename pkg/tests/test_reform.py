import json

import numpy as np
import pytest
import scipy.linalg as la
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import pipeline
from opfglobal.errors import MissingPair, NotOptimal, NotPsdAfterShift
from opfglobal.qcqp import generic_model
from opfglobal.reform import (build_reformulation, outer_on_pairs, reformulated_objective,
                              reformulation_from_duals)
from opfglobal.sdp import SdpResult, SdpStatus, strict_dual_certificate

SMALL = ["two_bus", "wb2", "lmbm3", "case6ww", "case9", "case14", "case30"]


def test_zero_duals_give_objective_matrix():
    c = np.array([[2.0, 0.5], [0.5, 1.0]])
    m = generic_model(c, [(np.eye(2), 1.0)])
    r = reformulation_from_duals(m, np.zeros(1))
    assert np.array_equal(r.s_star, c)
    assert not r.residual.any()
    assert r.shift == 0


def test_certificate_duals_are_well_conditioned():
    _, model, _, _ = pipeline("case9")
    alpha, _ = strict_dual_certificate(model)
    r = reformulation_from_duals(model, alpha)
    assert r.lambda_min >= 1 - 1e-8
    assert la.eigvalsh(r.s_star)[0] >= 1 - 1e-8


def test_indefinite_duals_rejected():
    _, model, _, _ = pipeline("case9")
    with pytest.raises(NotPsdAfterShift):
        reformulation_from_duals(model, np.zeros(len(model.constraints)))


def test_small_negative_spectrum_is_shifted():
    m = generic_model(np.diag([-5e-7, 1.0]), [(np.eye(2), 1.0)])
    r = reformulation_from_duals(m, np.zeros(1))
    assert r.shift == pytest.approx(5e-7 + 1e-9)
    assert la.eigvalsh(r.s_star)[0] >= 0
    assert np.array_equal(r.residual, m.c_matrix.toarray() - r.s_star)


def test_requires_optimal_sdp():
    _, model, sdp, _ = pipeline("two_bus")
    bad = SdpResult(sdp.x_matrix, sdp.duals, 0, 0, 1, SdpStatus.IterLimit)
    with pytest.raises(NotOptimal):
        build_reformulation(model, bad)


@pytest.mark.parametrize("name", SMALL)
def test_reformulation_invariants(name):
    _, model, _, r = pipeline(name)
    assert la.eigvalsh(r.s_star)[0] >= -1e-7
    assert np.array_equal(r.residual, model.c_matrix.toarray() - r.s_star)
    # union pattern recomputed densely
    acc = np.abs(model.c_matrix.toarray())
    for c in model.constraints:
        acc += np.abs(c.a_matrix.toarray())
    expected = {(i, j) for i, j in zip(*np.nonzero(acc)) if i <= j}
    expected |= {(i, i) for i in range(model.dim)}
    assert r.pair_set == expected
    # residual never leaves the pair set
    rows, cols = np.nonzero(r.residual)
    assert all((min(i, j), max(i, j)) in r.pair_set for i, j in zip(rows, cols))
    # pairs sorted lexicographically with i <= j
    assert np.all(r.pairs[:, 0] <= r.pairs[:, 1])
    keys = [tuple(p) for p in r.pairs]
    assert keys == sorted(keys)
    assert np.array_equal(r.lower, model.lower) and r.lower is not model.lower


def test_case9_pairs_skip_unconnected_buses():
    case, model, _, r = pipeline("case9")
    idx = case.bus_index()
    linked = {frozenset((idx[b.from_bus], idx[b.to_bus])) for b in case.branches}
    n = model.n
    for i, j in r.pair_set:
        bi, bj = i % n, j % n
        assert bi == bj or frozenset((bi, bj)) in linked
    # buses 1 and 2 share no branch in case9
    assert (idx[1], idx[2]) not in r.pair_set
    assert (idx[1], n + idx[2]) not in r.pair_set


@pytest.mark.parametrize("name", ["two_bus", "case9", "case14"])
def test_exact_on_outer_products(name):
    _, model, _, r = pipeline(name)
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = rng.uniform(model.lower, model.upper)
        y = outer_on_pairs(r.pairs, x)
        ref = x @ model.c_matrix @ x
        assert reformulated_objective(r, x, y) == pytest.approx(ref, rel=1e-9, abs=1e-9)


def test_zero_point():
    _, model, _, r = pipeline("case9")
    assert reformulated_objective(r, np.zeros(model.dim), np.zeros(len(r.pairs))) == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_dense_evaluation(seed):
    _, model, _, r = pipeline("case9")
    rng = np.random.default_rng(seed)
    x = rng.normal(size=model.dim)
    y = rng.normal(size=len(r.pairs))
    Y = np.zeros((model.dim, model.dim))
    Y[r.pairs[:, 0], r.pairs[:, 1]] = y
    Y[r.pairs[:, 1], r.pairs[:, 0]] = y
    ref = x @ r.s_star @ x + np.sum((model.c_matrix.toarray() - r.s_star) * Y)
    assert reformulated_objective(r, x, y) == pytest.approx(ref, rel=1e-10, abs=1e-9)


def test_mapping_input_and_missing_pair():
    _, model, _, r = pipeline("two_bus")
    x = np.linspace(-1, 1, model.dim)
    y = outer_on_pairs(r.pairs, x)
    as_map = {(int(j), int(i)): v for (i, j), v in zip(r.pairs, y)}
    assert reformulated_objective(r, x, as_map) == pytest.approx(reformulated_objective(r, x, y))
    as_map.popitem()
    with pytest.raises(MissingPair):
        reformulated_objective(r, x, as_map)
    with pytest.raises(MissingPair):
        reformulated_objective(r, x, y[:-1])


def test_convex_in_x_and_linear_in_y():
    _, model, _, r = pipeline("case14")
    rng = np.random.default_rng(5)
    x1, x2 = rng.normal(size=(2, model.dim))
    y1, y2 = rng.normal(size=(2, len(r.pairs)))
    f = lambda x, y: reformulated_objective(r, x, y)  # noqa: E731
    mid = f((x1 + x2) / 2, (y1 + y2) / 2)
    assert mid <= (f(x1, y1) + f(x2, y2)) / 2 + 1e-9 * (1 + abs(mid))


def test_audit_dump():
    _, _, _, r = pipeline("case9")
    d = json.loads(r.audit_json())
    assert set(d) == {"lambda_min", "lambda_max", "shift", "pairs"}
    assert d["pairs"] == len(r.pairs)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-1, 1)))
def test_exactness_property(x):
    _, model, _, r = pipeline("two_bus")
    y = outer_on_pairs(r.pairs, x)
    assert reformulated_objective(r, x, y) == pytest.approx(x @ model.c_matrix @ x,
                                                            rel=1e-9, abs=1e-9)
