"""Convex node relaxation over (x, y) with McCormick envelopes on the pair set.

    min  x'S x + sum_e c_e y_e
    s.t. <A_k, Y> <= b_k          (linear in y, Y symmetric on the pair set)
         McCormick rows for every pair (i, j) on the node box
         lower <= x <= upper

Rows ``<A_k, Y>`` are assembled once per reformulation; only the McCormick
and box rows depend on the node. The default backend is Clarabel (interior
point, returns infeasibility certificates and a dual bound); OSQP is
available for warm-started first-order solves.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import clarabel
import numpy as np
import scipy.sparse as sp

from .errors import EmptyBox, NotOptimal
from .reform import Reformulation

log = logging.getLogger(__name__)

FEAS_TOL = 1e-7


class QpStatus(str, enum.Enum):
    Optimal = "Optimal"
    Infeasible = "Infeasible"
    IterLimit = "IterLimit"
    NumericalTrouble = "NumericalTrouble"


@dataclass
class QpOptions:
    tolerance: float = 1e-9
    max_iterations: int = 200
    warm_start: bool = True
    backend: str = "clarabel"       # or "osqp"


@dataclass
class QpSolution:
    x_bar: np.ndarray
    y_bar: np.ndarray               # aligned with pairs
    pairs: np.ndarray
    value: float
    status: QpStatus
    dual_bound: float = -np.inf     # lower bound certified by the solver's dual
    iterations: int = 0
    max_residual: float = 0.0

    @property
    def lower_bound(self) -> float:
        return min(self.value, self.dual_bound)

    def y_map(self) -> dict[tuple[int, int], float]:
        return {(int(i), int(j)): float(v) for (i, j), v in zip(self.pairs, self.y_bar)}


def mccormick_rows(pair: tuple[int, int], box) -> np.ndarray:
    """Four rows ``a_i x_i + a_j x_j + a_y y <= rhs`` as an array of (a_i, a_j, a_y, rhs).

    ``box`` is ``(lower, upper)``, each indexable by the pair's indices.
    """
    i, j = pair
    lo, up = box
    li, lj, ui, uj = float(lo[i]), float(lo[j]), float(up[i]), float(up[j])
    if li > ui or lj > uj:
        raise EmptyBox(f"pair {pair}: [{li}, {ui}] x [{lj}, {uj}]")
    return np.array([
        [-uj, -li, 1.0, -li * uj],
        [-lj, -ui, 1.0, -ui * lj],
        [uj, ui, -1.0, ui * uj],
        [lj, li, -1.0, li * lj],
    ])


def _fixed_rows(r: Reformulation):
    """(A_eq, b_eq, A_in, b_in) on y for the constraint rows, scaled per base."""
    cache = r.__dict__.get("_qp_rows")
    if cache is not None:
        return cache
    if r.model is None:
        raise ValueError("reformulation carries no model")
    st = r.model.structure
    index = r.pair_index()
    npair = len(r.pairs)
    base_rows, norms = [], []
    for b in st.bases:
        b = sp.triu(b, format="coo")
        cols = [index[(int(i), int(j))] for i, j in zip(b.row, b.col)]
        vals = np.where(b.row == b.col, 1.0, 2.0) * b.data
        nu = np.abs(vals).max(initial=0.0) or 1.0
        base_rows.append(sp.csr_matrix((vals / nu, (np.zeros(len(cols), int), cols)),
                                       shape=(1, npair)))
        norms.append(nu)
    base_rows = sp.vstack(base_rows, format="csr")
    norms = np.asarray(norms)
    rhs = r.model.rhs
    eq_plus = np.array([p for p, _ in st.eq_pairs], dtype=int)
    t_eq = st.base_of[eq_plus].astype(int) if eq_plus.size else np.zeros(0, int)
    a_eq = base_rows[t_eq]
    b_eq = rhs[eq_plus] / norms[t_eq] if eq_plus.size else np.zeros(0)
    ineq = np.asarray(st.ineq_rows, dtype=int)
    t_in = st.base_of[ineq].astype(int)
    sign = st.sign[ineq]
    a_in = sp.diags(sign) @ base_rows[t_in]
    b_in = rhs[ineq] / norms[t_in]
    cache = (sp.csr_matrix(a_eq), b_eq, sp.csr_matrix(a_in), b_in)
    r.__dict__["_qp_rows"] = cache      # frozen dataclass: cache in the instance dict
    return cache


@dataclass
class _NodeData:
    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    n_eq: int
    scale: float
    meta: dict = field(default_factory=dict)


def _assemble(r: Reformulation, lower: np.ndarray, upper: np.ndarray) -> _NodeData:
    N = r.s_star.shape[0]
    npair = len(r.pairs)
    nv = N + npair
    if np.any(lower > upper):
        raise EmptyBox("node box has lower > upper")
    coef = r.residual_coef
    scale = max(1.0, np.abs(r.s_star).max(), np.abs(coef).max(initial=0.0))
    P = sp.block_diag([sp.csr_matrix(2 * r.s_star / scale), sp.csr_matrix((npair, npair))])
    P = sp.triu(P, format="csc")
    q = np.concatenate([np.zeros(N), coef / scale])

    a_eq, b_eq, a_in, b_in = _fixed_rows(r)
    zx_eq = sp.csr_matrix((a_eq.shape[0], N))
    zx_in = sp.csr_matrix((a_in.shape[0], N))

    I, J = r.pairs[:, 0], r.pairs[:, 1]
    K = np.arange(npair)
    li, lj, ui, uj = lower[I], lower[J], upper[I], upper[J]
    fixed_x = lower == upper
    # a zero-width side makes the envelope collapse to y = c * x_other
    deg_i = fixed_x[I]
    deg_j = fixed_x[J] & ~deg_i
    deg = deg_i | deg_j
    live = ~deg

    eq_blocks, eq_rhs = [sp.hstack([zx_eq, a_eq])], [b_eq]
    if np.any(deg):
        kd = K[deg]
        other = np.where(deg_i[deg], J[deg], I[deg])
        cval = np.where(deg_i[deg], li[deg], lj[deg])
        m = len(kd)
        rows = np.arange(m)
        blk = sp.coo_matrix((np.concatenate([np.ones(m), -cval]),
                             (np.concatenate([rows, rows]), np.concatenate([N + kd, other]))),
                            shape=(m, nv))
        eq_blocks.append(blk)
        eq_rhs.append(np.zeros(m))
    fx = np.flatnonzero(fixed_x)
    if fx.size:
        eq_blocks.append(sp.coo_matrix((np.ones(fx.size), (np.arange(fx.size), fx)),
                                       shape=(fx.size, nv)))
        eq_rhs.append(lower[fx])

    in_blocks, in_rhs = [sp.hstack([zx_in, a_in])], [b_in]
    if np.any(live):
        kl = K[live]
        Il, Jl = I[live], J[live]
        Li, Lj, Ui, Uj = li[live], lj[live], ui[live], uj[live]
        m = len(kl)
        ci = np.stack([-Uj, -Lj, Uj, Lj])
        cj = np.stack([-Li, -Ui, Ui, Li])
        cy = np.array([1.0, 1.0, -1.0, -1.0])[:, None] * np.ones(m)
        rhs = np.stack([-Li * Uj, -Ui * Lj, Ui * Uj, Li * Lj])
        rows = np.arange(4 * m).reshape(4, m)
        data = np.concatenate([ci.ravel(), cj.ravel(), cy.ravel()])
        rr = np.concatenate([rows.ravel()] * 3)
        cc = np.concatenate([np.tile(Il, 4), np.tile(Jl, 4), np.tile(N + kl, 4)])
        # diagonal pairs put both x coefficients in the same column; coo sums them
        in_blocks.append(sp.coo_matrix((data, (rr, cc)), shape=(4 * m, nv)).tocsr())
        in_rhs.append(rhs.ravel())
    free = np.flatnonzero(~fixed_x)
    if free.size:
        f = free.size
        in_blocks.append(sp.coo_matrix((np.concatenate([np.ones(f), -np.ones(f)]),
                                        (np.arange(2 * f), np.concatenate([free, free]))),
                                       shape=(2 * f, nv)))
        in_rhs.append(np.concatenate([upper[free], -lower[free]]))

    A_eq = sp.vstack(eq_blocks)
    A = sp.vstack([A_eq] + in_blocks, format="csc")
    b = np.concatenate(eq_rhs + in_rhs)
    return _NodeData(P=P, q=q, A=A, b=b, n_eq=A_eq.shape[0], scale=scale)


def _residual(data: _NodeData, z: np.ndarray) -> float:
    act = data.A @ z - data.b
    eq = np.abs(act[:data.n_eq]).max(initial=0.0)
    ineq = np.maximum(act[data.n_eq:], 0.0).max(initial=0.0)
    return float(max(eq, ineq))


def _solve_clarabel(data: _NodeData, opts: QpOptions):
    st = clarabel.DefaultSettings()
    st.verbose = False
    st.max_iter = opts.max_iterations
    st.tol_gap_abs = st.tol_gap_rel = opts.tolerance
    st.tol_feas = opts.tolerance
    st.tol_infeas_abs = st.tol_infeas_rel = 1e-8
    st.tol_ktratio = 1e-7
    cones = [clarabel.ZeroConeT(data.n_eq), clarabel.NonnegativeConeT(data.A.shape[0] - data.n_eq)]
    if data.n_eq == 0:
        cones = cones[1:]
    sol = clarabel.DefaultSolver(data.P, data.q, data.A, data.b, cones, st).solve()
    S = clarabel.SolverStatus
    z = np.asarray(sol.x)
    if sol.status == S.Solved or sol.status == S.AlmostSolved:
        status = QpStatus.Optimal
    elif sol.status == S.PrimalInfeasible:
        status = QpStatus.Infeasible
    elif sol.status in (S.MaxIterations, S.MaxTime):
        status = QpStatus.IterLimit
    else:
        status = QpStatus.NumericalTrouble
    dual = float(sol.obj_val_dual) * data.scale if status == QpStatus.Optimal else -np.inf
    return z, status, dual, int(sol.iterations)


def _solve_osqp(data: _NodeData, opts: QpOptions, warm):
    import osqp

    m = data.A.shape[0]
    lo = np.concatenate([data.b[:data.n_eq], np.full(m - data.n_eq, -np.inf)])
    prob = osqp.OSQP()
    prob.setup(data.P, data.q, data.A, lo, data.b, verbose=False, polishing=True,
               eps_abs=opts.tolerance, eps_rel=opts.tolerance,
               eps_prim_inf=1e-8, max_iter=max(opts.max_iterations, 4000) * 25)
    if opts.warm_start and warm is not None:
        prob.warm_start(x=warm)
    res = prob.solve(raise_error=False)
    s = res.info.status
    if s in ("solved", "solved inaccurate"):
        status = QpStatus.Optimal
    elif s in ("primal infeasible",):
        status = QpStatus.Infeasible
    elif s == "maximum iterations reached":
        status = QpStatus.IterLimit
    else:
        status = QpStatus.NumericalTrouble
    x = np.asarray(res.x) if res.x is not None else np.zeros(data.P.shape[0])
    # a first-order solve gives no trustworthy dual bound
    return x, status, -np.inf, int(res.info.iter)


def solve_node_relaxation(r: Reformulation, box=None, opts: QpOptions | None = None,
                          warm: np.ndarray | None = None) -> QpSolution:
    """Solve the node QP on ``box = (lower, upper)`` (root box when omitted).

    ``warm`` is a previous (x, y) vector, used by the OSQP backend after
    projection into the box.
    """
    opts = opts or QpOptions()
    lower, upper = (r.lower, r.upper) if box is None else box
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    data = _assemble(r, lower, upper)
    N = r.s_star.shape[0]
    if opts.backend == "osqp":
        if warm is not None:
            warm = np.array(warm, dtype=float)
            warm[:N] = np.clip(warm[:N], lower, upper)
        z, status, dual, iters = _solve_osqp(data, opts, warm)
    elif opts.backend == "clarabel":
        z, status, dual, iters = _solve_clarabel(data, opts)
    else:
        raise ValueError(f"unknown QP backend {opts.backend!r}")
    x, y = z[:N].copy(), z[N:].copy()
    value = float(x @ r.s_star @ x + r.residual_coef @ y) if status == QpStatus.Optimal else np.nan
    resid = _residual(data, z) if status == QpStatus.Optimal else np.inf
    if status == QpStatus.Optimal and resid > 1e2 * FEAS_TOL:
        log.debug("node QP residual %.2e too large, flagged as numerical trouble", resid)
        status = QpStatus.NumericalTrouble
    return QpSolution(x_bar=x, y_bar=y, pairs=r.pairs, value=value, status=status,
                      dual_bound=dual, iterations=iters, max_residual=resid)


def bilinear_violation(sol: QpSolution) -> tuple[tuple[int, int], float]:
    """Pair with the largest ``|y_ij - x_i x_j|`` (first in pair order on ties)."""
    if sol.status != QpStatus.Optimal:
        raise NotOptimal(f"QP status is {sol.status.value}")
    p = sol.pairs
    gap = np.abs(sol.y_bar - sol.x_bar[p[:, 0]] * sol.x_bar[p[:, 1]])
    k = int(np.argmax(gap))
    return (int(p[k, 0]), int(p[k, 1])), float(gap[k])
