"""Rank relaxation of the lifted QCQP and its dual.

Primal:  min <C, X>  s.t.  <A_k, X> <= b_k,  X psd.
Dual:    max -b'alpha  s.t.  C + sum_k alpha_k A_k psd,  alpha >= 0.

Solved with a dense primal-dual interior-point method (Nesterov-Todd
scaling, Mehrotra predictor-corrector). Rows that come in exactly opposite
pairs (``A, b`` and ``-A, -b``) are handled internally as one equality with
a free multiplier; the multiplier is split back into the two nonnegative
row duals on output.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .errors import NotOptimal
from .qcqp import QcqpModel

log = logging.getLogger(__name__)


class SdpStatus(str, enum.Enum):
    Optimal = "Optimal"
    Infeasible = "Infeasible"
    IterLimit = "IterLimit"
    NumericalTrouble = "NumericalTrouble"


@dataclass
class SdpOptions:
    max_iterations: int = 200
    tolerance: float = 1e-8
    accept_tolerance: float = 1e-6
    verbose: bool = False


@dataclass
class SdpResult:
    x_matrix: np.ndarray
    duals: np.ndarray
    primal_value: float
    dual_value: float
    iterations: int
    status: SdpStatus
    primal_infeasibility: float = np.nan
    dual_infeasibility: float = np.nan

    def to_json(self) -> str:
        return json.dumps({
            "status": self.status.value,
            "primal_value": self.primal_value,
            "dual_value": self.dual_value,
            "iterations": self.iterations,
            "duals": self.duals.tolist(),
            "x_matrix": self.x_matrix.tolist(),
        })


def duality_gap(result: SdpResult) -> float:
    """Relative primal-dual gap ``|p - d| / max(1, |p|)`` of an optimal solve."""
    if result.status != SdpStatus.Optimal:
        raise NotOptimal(f"SDP status is {result.status.value}")
    p, d = result.primal_value, result.dual_value
    return abs(p - d) / max(1.0, abs(p))


def _lambda_min(m) -> float:
    m = m.toarray() if sp.issparse(m) else np.asarray(m)
    return float(la.eigvalsh(m, subset_by_index=[0, 0])[0])


def strict_dual_certificate(model: QcqpModel) -> tuple[np.ndarray, float]:
    """Strictly feasible dual point built from the magnitude upper bounds.

    Every row beyond the first ``n`` gets multiplier 1. The first ``n`` rows
    sum to the identity, so giving each of them
    ``mu = 1 + max(0, -lambda_min(C'))`` with ``C' = C + sum_{k>n} A_k``
    yields ``C + sum alpha_k A_k = C' + mu I``, whose smallest eigenvalue is
    at least 1.
    """
    n = model.n
    c_prime = model.c_matrix.copy().astype(float)
    for con in model.constraints[n:]:
        c_prime = c_prime + con.a_matrix
    mu = 1.0 + max(0.0, -_lambda_min(c_prime))
    alpha = np.ones(len(model.constraints))
    alpha[:n] = mu
    return alpha, mu


def _has_magnitude_prefix(model: QcqpModel) -> bool:
    n, dim = model.n, model.dim
    if len(model.constraints) < n:
        return False
    total = sp.csr_matrix((dim, dim))
    for con in model.constraints[:n]:
        total = total + con.a_matrix
    return total.nnz == dim and abs(total - sp.identity(dim)).max() == 0


class _Problem:
    """Scaled internal data: base matrices, rows, objective."""

    def __init__(self, model: QcqpModel):
        st = model.structure
        self.model = model
        self.dim = N = model.dim
        norms = np.array([sp.linalg.norm(b) for b in st.bases])
        norms[norms == 0] = 1.0
        self.base_norm = norms
        self.bases = [sp.csr_matrix(b / nu) for b, nu in zip(st.bases, norms)]
        self.T = len(self.bases)
        # vec(B_t) stacked as rows, for <B_t, M> = Bvec @ vec(M)
        self.Bvec = sp.vstack([b.reshape(1, N * N) for b in self.bases], format="csr")
        self.BvecT = self.Bvec.T.tocsr()
        self.support = []
        for b in self.bases:
            idx = np.unique(b.tocoo().row)
            self.support.append((idx, b[idx][:, idx].toarray()))
        c = model.c_matrix.toarray()
        self.c_scale = max(1.0, np.abs(c).max())
        self.C = c / self.c_scale

        rhs = model.rhs
        eq_plus = [p for p, _ in st.eq_pairs]
        eq_minus = [q for _, q in st.eq_pairs]
        self.ineq = st.ineq_rows
        self.eq_plus = np.array(eq_plus, dtype=int)
        self.eq_minus = np.array(eq_minus, dtype=int)
        rows_t = np.concatenate([st.base_of[self.ineq], st.base_of[self.eq_plus]]).astype(int)
        rows_g = np.concatenate([st.sign[self.ineq], np.ones(len(eq_plus))])
        raw_b = np.concatenate([rhs[self.ineq], rhs[self.eq_plus]])
        self.rt, self.rg = rows_t, rows_g
        self.rb = raw_b / norms[rows_t]
        self.mI = len(self.ineq)
        self.m = len(rows_t)

    def op(self, M: np.ndarray) -> np.ndarray:
        """Row values ``g_r <B_{t_r}, M>``."""
        return self.rg * (self.Bvec @ M.ravel())[self.rt]

    def adj(self, lam: np.ndarray) -> np.ndarray:
        """``sum_r lam_r g_r B_{t_r}`` as a dense matrix."""
        w = np.bincount(self.rt, weights=self.rg * lam, minlength=self.T)
        return (self.BvecT @ w).reshape(self.dim, self.dim)

    def schur(self, W: np.ndarray) -> np.ndarray:
        """Base Gram matrix ``<B_s, W B_t W>``."""
        T, N = self.T, self.dim
        Mb = np.empty((T, T))
        for t, (idx, blk) in enumerate(self.support):
            Wi = W[:, idx]
            WBW = (Wi @ blk) @ Wi.T
            Mb[:, t] = self.Bvec @ WBW.ravel()
        return (Mb + Mb.T) / 2

    def to_row_duals(self, lam: np.ndarray) -> np.ndarray:
        """Scaled internal multipliers -> original nonnegative duals per constraint."""
        alpha = np.zeros(len(self.model.constraints))
        unscaled = lam * self.c_scale / self.base_norm[self.rt]
        alpha[self.ineq] = np.maximum(unscaled[: self.mI], 0.0)
        y = unscaled[self.mI:]
        alpha[self.eq_plus] = np.maximum(y, 0.0)
        alpha[self.eq_minus] = np.maximum(-y, 0.0)
        return alpha

    def from_row_duals(self, alpha: np.ndarray) -> np.ndarray:
        lam = np.concatenate([alpha[self.ineq], alpha[self.eq_plus] - alpha[self.eq_minus]])
        return lam * self.base_norm[self.rt] / self.c_scale


def _max_step_psd(D: np.ndarray, dS: np.ndarray) -> float:
    """Largest a with diag(D) + a dS psd (D > 0)."""
    r = 1.0 / np.sqrt(D)
    ev = la.eigvalsh(r[:, None] * dS * r[None, :], subset_by_index=[0, 0])[0]
    return np.inf if ev >= 0 else -1.0 / ev


def _max_step_lp(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    return np.inf if not np.any(neg) else float(np.min(-v[neg] / dv[neg]))


def _sym(M):
    return (M + M.T) / 2


def solve_sdp(model: QcqpModel, opts: SdpOptions | None = None) -> SdpResult:
    """Solve the rank relaxation of ``model`` and return primal and dual solutions."""
    opts = opts or SdpOptions()
    P = _Problem(model)
    N, m, mI = P.dim, P.m, P.mI
    ineq = np.zeros(m, dtype=bool)
    ineq[:mI] = True

    # dual start: certificate construction in scaled units, so Z0 >= I
    if _has_magnitude_prefix(model):
        lam = np.zeros(m)
        lam[:mI] = 1.0
        mag_rows = np.isin(P.ineq, np.arange(model.n))
        lam[:mI][mag_rows] = 0.0
        c_prime = P.C + P.adj(lam)
        shift = 1.0 + max(0.0, -la.eigvalsh(c_prime, subset_by_index=[0, 0])[0])
        # the n magnitude bases are (E_i + E_{i+n}) / sqrt(2) after scaling
        lam[:mI][mag_rows] = shift * np.sqrt(2.0)
        Z = _sym(P.C + P.adj(lam))
    else:
        lam = np.where(ineq, 1.0, 0.0)
        Z0 = P.C + P.adj(lam)
        Z = np.eye(N) * (1.0 + max(0.0, -la.eigvalsh(_sym(Z0), subset_by_index=[0, 0])[0])
                         + np.abs(Z0).max())
    tau = max(1.0, float(np.max(np.abs(P.rb), initial=0.0)) / max(1, N))
    X = np.eye(N) * tau
    s = np.maximum(P.rb[:mI] - P.op(X)[:mI], 1.0)

    status = SdpStatus.IterLimit
    bnorm = 1.0 + np.linalg.norm(P.rb)
    cnorm = 1.0 + np.linalg.norm(P.C)
    it = 0
    pinf = dinf = relgap = np.inf
    best = None
    for it in range(1, opts.max_iterations + 1):
        alpha = lam[:mI]
        rp = P.rb - P.op(X)
        rp[:mI] -= s
        Rd = P.C + P.adj(lam) - Z
        pobj = float(np.sum(P.C * X))
        dobj = float(-P.rb @ lam)
        mu = (np.sum(X * Z) + s @ alpha) / (N + mI)
        pinf = np.linalg.norm(rp) / bnorm
        dinf = np.linalg.norm(Rd) / cnorm
        relgap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
        if opts.verbose:
            log.info("it %3d pobj %+.10e dobj %+.10e pinf %.2e dinf %.2e gap %.2e mu %.2e",
                     it, pobj * P.c_scale, dobj * P.c_scale, pinf, dinf, relgap, mu)
        merit = max(pinf, dinf, relgap)
        if best is None or merit < best[0]:
            best = (merit, X.copy(), lam.copy(), it)
        if pinf <= opts.tolerance and dinf <= opts.tolerance and relgap <= opts.tolerance:
            status = SdpStatus.Optimal
            break
        if np.abs(lam).max() > 1e12:
            status = SdpStatus.Infeasible
            break

        try:
            L = la.cholesky(X, lower=True)
            R = la.cholesky(Z, lower=True)
        except la.LinAlgError:
            status = SdpStatus.NumericalTrouble
            break
        U, D, Vt = la.svd(R.T @ L)
        if D.min() <= 0:
            status = SdpStatus.NumericalTrouble
            break
        G = L @ Vt.T / np.sqrt(D)[None, :]
        Ginv = (U.T @ R.T) / np.sqrt(D)[:, None]
        W = G @ G.T

        Mb = P.schur(W)
        H = P.rg[:, None] * P.rg[None, :] * Mb[np.ix_(P.rt, P.rt)]
        diag = np.zeros(m)
        diag[:mI] = s / alpha
        H[np.diag_indices(m)] += diag
        reg = 1e-14 * max(1.0, np.abs(np.diag(H)).max())
        try:
            fac = la.cho_factor(H + reg * np.eye(m), lower=True)
            base_solve = lambda r: la.cho_solve(fac, r)  # noqa: E731
        except la.LinAlgError:
            lu = la.lu_factor(H + 1e3 * reg * np.eye(m))
            base_solve = lambda r: la.lu_solve(lu, r)  # noqa: E731

        def solve(r):
            x = base_solve(r)
            for _ in range(2):
                x = x + base_solve(r - H @ x)
            return x

        WRdW = W @ Rd @ W

        def direction(Rc, rc):
            rhs = P.op(Rc - WRdW) - rp
            rhs[:mI] += rc / alpha
            dlam = solve(rhs)
            dZ = _sym(Rd + P.adj(dlam))
            dX = _sym(Rc - W @ dZ @ W)
            ds = (rc - s * dlam[:mI]) / alpha
            return dX, dZ, dlam, ds

        # predictor
        dXa, dZa, dla, dsa = direction(-X, -s * alpha)
        dxt = _sym(Ginv @ dXa @ Ginv.T)
        dzt = _sym(G.T @ dZa @ G)
        ap = min(1.0, _max_step_psd(D, dxt), _max_step_lp(s, dsa))
        ad = min(1.0, _max_step_psd(D, dzt), _max_step_lp(alpha, dla[:mI]))
        mu_aff = (np.sum((X + ap * dXa) * (Z + ad * dZa))
                  + (s + ap * dsa) @ (alpha + ad * dla[:mI])) / (N + mI)
        sigma = float(np.clip((mu_aff / mu) ** 3, 0.0, 1.0))

        # corrector
        rhs_c = sigma * mu * np.eye(N) - np.diag(D ** 2) - _sym(dxt @ dzt)
        Rt = 2.0 * rhs_c / (D[:, None] + D[None, :])
        Rc = _sym(G @ Rt @ G.T)
        rc = sigma * mu - s * alpha - dsa * dla[:mI]
        dX, dZ, dlam, ds = direction(Rc, rc)
        dxt = _sym(Ginv @ dX @ Ginv.T)
        dzt = _sym(G.T @ dZ @ G)
        gamma = 0.9 + 0.09 * min(1.0, max(ap, ad))
        ap = min(1.0, gamma * _max_step_psd(D, dxt), gamma * _max_step_lp(s, ds))
        ad = min(1.0, gamma * _max_step_psd(D, dzt), gamma * _max_step_lp(alpha, dlam[:mI]))
        if max(ap, ad) < 1e-10:
            status = SdpStatus.NumericalTrouble
            break
        X = _sym(X + ap * dX)
        s = s + ap * ds
        Z = _sym(Z + ad * dZ)
        lam = lam + ad * dlam
    else:
        it = opts.max_iterations

    if status != SdpStatus.Optimal and best is not None:
        merit, Xb, lamb, itb = best
        if merit <= opts.accept_tolerance:
            X, lam = Xb, lamb
            status = SdpStatus.Optimal

    duals = P.to_row_duals(lam)
    primal_value = float(np.sum(model.c_matrix.toarray() * X))
    dual_value = float(-model.rhs @ duals)
    if status == SdpStatus.Optimal and \
            abs(primal_value - dual_value) / max(1.0, abs(primal_value)) > opts.accept_tolerance:
        status = SdpStatus.NumericalTrouble
    pinf = np.linalg.norm(_row_residual(P, X)) / bnorm
    lmin = la.eigvalsh(_sym(P.C + P.adj(lam)), subset_by_index=[0, 0])[0]
    dinf = max(0.0, -lmin) / cnorm
    return SdpResult(x_matrix=X, duals=duals, primal_value=primal_value,
                     dual_value=dual_value, iterations=it, status=status,
                     primal_infeasibility=float(pinf), dual_infeasibility=float(dinf))


def _row_residual(P: _Problem, X: np.ndarray) -> np.ndarray:
    """Constraint violation of ``X`` per internal row (inequalities clipped at 0)."""
    r = P.op(X) - P.rb
    r[: P.mI] = np.maximum(r[: P.mI], 0.0)
    return r
