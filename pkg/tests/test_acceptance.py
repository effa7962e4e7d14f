"""Acceptance criteria 1 to 7, one PASS/FAIL line each."""

import math

import numpy as np
import pytest

from conftest import VERDICTS, pipeline
from oracles import grid_search_two_bus, mccormick_holds
from opfglobal.bnb import BnbNode, BnbOptions, BnbStatus, solve, split_node
from opfglobal.cases import bundled_cases, data_dir
from opfglobal.cli import RunConfig, run_bench
from opfglobal.qcqp import hermitian_part, lift, realify
from opfglobal.relaxation import QpStatus, mccormick_rows, solve_node_relaxation
from opfglobal.sdp import SdpStatus, duality_gap, strict_dual_certificate
from opfglobal.reform import assemble_s

TEST_CASES = ["two_bus", "two_bus_gap"]
ALL_CASES = TEST_CASES + bundled_cases()

# published root gaps (%), linear costs and no line limits
ROOT_GAPS = {"wb2": 2.2, "wb3": 0.0, "lmbm3": 0.0, "wb5": 16.7, "case9": 0.0, "case14": 0.0,
             "case30": 0.0, "case39": 0.0, "case57": 0.0, "case118": 0.0}
EXCLUDED = {
    "wb3": "instance data not obtainable in a verifiable form",
    "wb5": "instance data not obtainable in a verifiable form",
}
CLOSURE = ["wb2", "lmbm3", "case6ww", "case9", "case14"]


def verdict(num: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {num}: {detail}"
    print(line)
    VERDICTS.append(line)
    assert ok, line


def test_criterion_1_root_equals_sdp():
    worst, name_w = 0.0, ""
    for name in ALL_CASES:
        case, model, sdp, r = pipeline(name)
        if case.n_bus > 30:
            continue
        sol = solve_node_relaxation(r)
        assert sol.status == QpStatus.Optimal, name
        rel = abs(sol.value - sdp.primal_value) / max(1.0, abs(sdp.primal_value))
        if rel >= worst:
            worst, name_w = rel, name
    verdict(1, worst <= 1e-5, f"root QP equals SDP bound, worst rel diff {worst:.2e} ({name_w})")


def test_criterion_2_strong_duality():
    worst_gap, worst_cert = 0.0, math.inf
    for name in ALL_CASES:
        _, model, sdp, _ = pipeline(name)
        assert sdp.status == SdpStatus.Optimal, name
        worst_gap = max(worst_gap, duality_gap(sdp))
        alpha, _ = strict_dual_certificate(model)
        lam = float(np.linalg.eigvalsh(assemble_s(model, alpha))[0])
        worst_cert = min(worst_cert, lam)
    ok = worst_gap <= 1e-6 and worst_cert >= 1 - 1e-8
    verdict(2, ok, f"max SDP gap {worst_gap:.2e}, min certificate eigenvalue {worst_cert:.6f}")


def test_criterion_3_mccormick_redundant_at_sdp_optimum():
    worst = -math.inf
    for name in ALL_CASES:
        case, model, sdp, _ = pipeline(name)
        vmax = np.array([b.v_max for b in case.buses])
        vm = np.concatenate([vmax, vmax])
        X = sdp.x_matrix
        d = np.diag(X)
        worst = max(worst, -d.min(), (d - vm ** 2).max(), (np.abs(X) - np.outer(vm, vm)).max())
    verdict(3, worst <= 1e-7, f"largest envelope excess at the SDP optimum {worst:.2e}")


@pytest.fixture(scope="module")
def root_rows():
    rows = run_bench(data_dir(), RunConfig(data_dir(), mode="root-only"))
    return {r.case_name: r for r in rows}


def test_criterion_4_root_gaps(root_rows):
    parts, ok = [], True
    for name, want in ROOT_GAPS.items():
        if name in EXCLUDED:
            parts.append(f"{name} excluded ({EXCLUDED[name]})")
            continue
        row = root_rows[name]
        good = row.root_gap is not None and abs(row.root_gap - want) <= 0.3
        ok &= good
        got = "n/a" if row.root_gap is None else f"{row.root_gap:.4f}%"
        parts.append(f"{name} {got} vs {want}%")
    parts.append("instances above 300 buses out of scope")
    verdict(4, ok, "; ".join(parts))


def test_criterion_5_gap_closure():
    parts, ok = [], True
    for name in CLOSURE:
        _, model, _, r = pipeline(name)
        # pinning the reference angle is the offered option that removes the
        # rotation symmetry; it leaves the optimal value unchanged
        rep = solve(model, r, BnbOptions(fix_reference=True, time_limit=600))
        good = rep.status == BnbStatus.GlobalOptimal and rep.gap <= 1e-5
        ok &= good
        parts.append(f"{name} gap {rep.gap:.1e} in {rep.wall_time:.1f}s/{rep.nodes_processed} nodes")
    parts.append("wb3 excluded (no data)")
    verdict(5, ok, "; ".join(parts))


def test_criterion_6_brute_force_two_bus():
    case, model, _, r = pipeline("two_bus_gap")
    h, tol = 0.01, 1e-3
    grid, xg = grid_search_two_bus(case, h=h, tol=tol)
    rep = solve(model, r, BnbOptions(fix_reference=True, time_limit=120))
    assert rep.status == BnbStatus.GlobalOptimal
    bnb = rep.upper_bound
    # moving a grid point by at most h/2 per coordinate changes x'Cx by at most
    # |2 C x|_1 h/2 + |C|_1 (h/2)^2 d, with d the dimension
    c = model.c_matrix.toarray()
    bound = np.abs(2 * c @ xg).sum() * h / 2 + np.abs(c).sum() * (h / 2) ** 2 * model.dim
    diff = abs(grid - bnb)
    ok = diff <= 1e-2 and bnb <= grid + bound
    verdict(6, ok, f"grid {grid:.6f} vs B&B {bnb:.6f}, |diff| {diff:.4f}, "
                   f"resolution bound {bound:.4f}")


def _event_lb_monotone(events) -> bool:
    lbs = [e["lower_bound"] for e in events]
    return all(b >= a - 1e-9 * max(1.0, abs(a)) for a, b in zip(lbs, lbs[1:]))


def test_criterion_7_property_suite():
    rng = np.random.default_rng(20261015)
    checks = {}

    err = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 7))
        m = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
        v = rng.normal(size=n) + 1j * rng.normal(size=n)
        hm = hermitian_part(m)
        x = lift(v)
        err = max(err, abs(x @ realify(hm) @ x - (v.conj() @ hm @ v).real)
                  / (1 + np.abs(hm).sum() * np.abs(v).max() ** 2))
    checks["lifting"] = err <= 1e-10

    ok = True
    for _ in range(1000):
        lo = rng.uniform(-2, 1, 2)
        up = lo + rng.uniform(1e-3, 2, 2)
        x = rng.uniform(lo, up)
        ok &= mccormick_holds(x[0], x[1], x[0] * x[1], lo[0], up[0], lo[1], up[1], tol=1e-12)
    checks["mccormick validity"] = bool(ok)

    lo, up = np.array([-0.7, 0.2]), np.array([1.3, 0.9])
    rows = mccormick_rows((0, 1), (lo, up))
    tight = True
    for xi in (lo[0], up[0]):
        for xj in (lo[1], up[1]):
            act = rows[:, 0] * xi + rows[:, 1] * xj + rows[:, 2] * xi * xj - rows[:, 3]
            tight &= np.sum(np.abs(act) <= 1e-12) >= 2 and np.all(act <= 1e-12)
    checks["corner tightness"] = bool(tight)

    _, model, _, r = pipeline("two_bus_gap")
    opts = BnbOptions(fix_reference=True, time_limit=120)
    a = solve(model, r, opts)
    b = solve(model, r, opts)
    _, model2, _, r2 = pipeline("wb2")
    w = solve(model2, r2, opts)
    checks["LB monotonicity"] = _event_lb_monotone(a.events) and _event_lb_monotone(w.events)

    exact = True
    for _ in range(200):
        d = 4
        lo = rng.uniform(-1, 0, d)
        up = lo + rng.uniform(0.1, 1, d)
        k = int(rng.integers(d))
        s = float(rng.uniform(lo[k], up[k]))
        c1, c2 = split_node(BnbNode(lo, up, 0.0), k, s, 0.0, 1)
        others = np.arange(d) != k
        exact &= (c1.upper[k] == s == c2.lower[k] and c1.lower[k] == lo[k]
                  and c2.upper[k] == up[k]
                  and np.array_equal(c1.lower[others], lo[others])
                  and np.array_equal(c2.upper[others], up[others])
                  and np.array_equal(c1.upper[others], up[others])
                  and np.array_equal(c2.lower[others], lo[others]))
    checks["partition exactness"] = bool(exact)

    checks["deterministic re-run"] = (a.to_dict(timings=False) == b.to_dict(timings=False)
                                      and a.events == b.events)
    failed = [k for k, v in checks.items() if not v]
    verdict(7, not failed, ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))
