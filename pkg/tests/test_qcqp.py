import json
import warnings

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import pipeline
from oracles import hand_admittance
from opfglobal.case_io import BranchRecord, BusRecord, GenRecord, NetworkCase
from opfglobal.errors import DimensionMismatch, NotHermitian
from opfglobal.qcqp import (ConstraintKind, build_qcqp, evaluate, generic_model,
                            hermitian_part, lift, realify, skew_part, unlift)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def cmat(n):
    return arrays(np.float64, (2, n, n), elements=finite).map(lambda a: a[0] + 1j * a[1])


def cvec(n):
    return arrays(np.float64, (2, n), elements=finite).map(lambda a: a[0] + 1j * a[1])


def test_hermitian_and_skew_parts_small():
    m = np.array([[1j]])
    assert np.allclose(hermitian_part(m), 0)
    assert np.allclose(skew_part(m), 1)
    h = np.array([[2, 1 - 1j], [1 + 1j, 3]])
    assert np.allclose(hermitian_part(h), h)
    assert np.allclose(skew_part(h), 0)


@settings(max_examples=200, deadline=None)
@given(cmat(3), cvec(3))
def test_parts_match_complex_forms(m, v):
    q = v.conj() @ m @ v
    scale = 1 + np.abs(m).sum() * np.abs(v).max() ** 2
    assert abs(v.conj() @ hermitian_part(m) @ v - q.real) <= 1e-12 * scale
    assert abs(v.conj() @ skew_part(m) @ v - q.imag) <= 1e-12 * scale


@settings(max_examples=200, deadline=None)
@given(cmat(4), cvec(4))
def test_realify_matches_hermitian_form(m, v):
    h = hermitian_part(m)
    r = realify(h)
    x = lift(v)
    scale = 1 + np.abs(h).sum() * np.abs(v).max() ** 2
    assert np.array_equal(r, r.T)
    assert abs(x @ r @ x - (v.conj() @ h @ v).real) <= 1e-12 * scale


def test_realify_identity_and_symbolic_example():
    assert np.array_equal(realify(np.eye(3)), np.eye(6))
    r = realify(np.array([[0, 1j], [-1j, 0]]))
    x = np.array([0.3, -1.2, 0.7, 2.1])
    x1, x2, x3, x4 = x
    assert x @ r @ x == pytest.approx(2 * (x2 * x3 - x1 * x4))


def test_realify_rejects_non_hermitian():
    with pytest.raises(NotHermitian):
        realify(np.array([[0, 1], [0, 0]], dtype=complex))


def test_realify_sparse_input():
    h = sp.csr_matrix(np.array([[2, 1j], [-1j, 1]]))
    assert sp.issparse(realify(h))
    assert np.allclose(realify(h).toarray(), realify(h.toarray()))


def test_lift_unlift_round_trip():
    v = np.array([1 + 2j, -0.5j, 3])
    assert np.array_equal(unlift(lift(v)), v)


def test_two_bus_model_shape(two_bus_model):
    m = two_bus_model
    assert len(m.constraints) == 12
    total = sum(c.a_matrix for c in m.constraints[:2])
    assert np.array_equal(total.toarray(), np.eye(4))
    m.check_invariants()
    assert [c.tag.kind for c in m.constraints[:2]] == [ConstraintKind.VmagUpper] * 2
    tags = {(c.tag.kind, c.tag.bus_id) for c in m.constraints}
    assert len(tags) == 12


def test_box_from_magnitude_bound(two_bus_model):
    m = two_bus_model
    assert m.lower[1] == m.lower[3] == -1.05
    assert m.upper[1] == m.upper[3] == 1.05


def test_lossless_flat_profile_has_zero_injections():
    case = NetworkCase((BusRecord(1, 0.9, 1.1), BusRecord(2, 0.9, 1.1)),
                       (GenRecord(1, 0, 1, -1, 1, 1.0),), (BranchRecord(1, 2, -10j),))
    m = build_qcqp(case)
    x = np.array([1.0, 1.0, 0.0, 0.0])
    vals = m.constraint_values(x)
    for k, c in enumerate(m.constraints):
        if c.tag.kind.name.startswith(("Active", "Reactive")):
            assert abs(vals[k]) < 1e-14


@pytest.mark.parametrize("name", ["two_bus", "case9", "case30"])
def test_objective_matches_complex_generation_cost(name):
    case, model, _, _ = pipeline(name)
    Y = hand_admittance(case) if all(b.tap_ratio == 1 for b in case.branches) else None
    if Y is None:
        from opfglobal.case_io import build_bus_admittance
        Y = build_bus_admittance(case)
    rng = np.random.default_rng(3)
    gens = case.generator_at()
    for _ in range(20):
        v = rng.normal(size=case.n_bus) + 1j * rng.normal(size=case.n_bus)
        s = v * np.conj(Y @ v)
        ref = sum(gens[b.id].cost_linear * s[i].real
                  for i, b in enumerate(case.buses) if b.id in gens)
        obj = lift(v) @ model.c_matrix @ lift(v)
        assert obj == pytest.approx(ref, rel=1e-10, abs=1e-10)


def test_feasibility_matches_physical_constraints():
    case, model, _, _ = pipeline("case9")
    from opfglobal.local import local_solve
    pt = local_solve(model, lift(np.ones(case.n_bus)))
    assert pt.converged
    v = unlift(pt.x)
    Y = hand_admittance(case)
    s = v * np.conj(Y @ v)
    gens = case.generator_at()
    for i, b in enumerate(case.buses):
        assert b.v_min - 1e-5 <= abs(v[i]) <= b.v_max + 1e-5
        pg, qg = s[i].real + b.p_load, s[i].imag + b.q_load
        if b.id in gens:
            g = gens[b.id]
            assert g.p_min - 1e-5 <= pg <= g.p_max + 1e-5
            assert g.q_min - 1e-5 <= qg <= g.q_max + 1e-5
        else:
            assert abs(pg) <= 1e-5 and abs(qg) <= 1e-5


def test_evaluate_zero_vector(two_bus_model, two_bus_case):
    obj, viol = evaluate(two_bus_model, np.zeros(4))
    assert obj == 0
    for k, c in enumerate(two_bus_model.constraints):
        if c.tag.kind == ConstraintKind.VmagLower:
            bus = next(b for b in two_bus_case.buses if b.id == c.tag.bus_id)
            assert viol[k] == pytest.approx(bus.v_min ** 2)


def test_evaluate_ignores_box(two_bus_model):
    # the box only bounds branching; violations list the 6n rows and nothing else
    m = two_bus_model
    x = np.array([1.0, m.upper[1] + 0.1, 0.0, 0.0])
    _, viol = evaluate(m, x)
    assert viol.shape == (12,)
    assert np.array_equal(viol, np.maximum(0.0, m.constraint_values(x) - m.rhs))
    with pytest.raises(DimensionMismatch):
        evaluate(m, np.zeros(3))


def test_mixed_bus_nets_load():
    case, model, _, _ = pipeline("case9")
    gens = case.generator_at()
    for c in model.constraints:
        if c.tag.kind == ConstraintKind.ActiveGenUpper:
            b = next(b for b in case.buses if b.id == c.tag.bus_id)
            assert c.rhs == pytest.approx(gens[b.id].p_max - b.p_load)


def test_json_dump(two_bus_model):
    d = json.loads(two_bus_model.to_json())
    assert len(d["constraints"]) == 12
    assert d["lower"] == list(two_bus_model.lower)


def test_equalities_detected_for_load_buses():
    _, model, _, _ = pipeline("case9")
    st_ = model.structure
    assert len(st_.eq_pairs) == 12      # 6 load buses, P and Q each
    for kp, km in st_.eq_pairs:
        assert model.constraints[kp].rhs == -model.constraints[km].rhs


def test_generic_model_requires_even_dimension():
    with pytest.raises(DimensionMismatch):
        generic_model(np.eye(3), [])


def test_every_bundled_model_satisfies_invariants():
    from opfglobal.case_io import load_case
    from opfglobal.cases import bundled_cases, case_path
    for name in bundled_cases():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            build_qcqp(load_case(case_path(name))).check_invariants()
