"""Local KKT-point search on the nonconvex QCQP (upper-bound heuristic).

Primal-dual interior point on ``min x'Cx`` with ``x'B x = b`` for paired
rows and ``sign * x'B x <= b`` otherwise, log-barrier on the inequality
slacks and Newton steps on the perturbed KKT system. The imaginary part of
one reference bus is pinned to zero; every form is invariant under a common
rotation of the voltages, so this removes a singular direction without
changing the optimal value.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.optimize import minimize

from .qcqp import ConstraintKind, QcqpModel, evaluate, lift, unlift

log = logging.getLogger(__name__)

# initial slack / multiplier level; a second value is tried before the fallback
SLACK_STARTS = (1.0, 0.1)


@dataclass
class LocalOptions:
    max_iterations: int = 150
    feasibility_tolerance: float = 1e-5
    stationarity_tolerance: float = 1e-6
    complementarity_tolerance: float = 1e-6
    fallback: bool = True


@dataclass
class LocalPoint:
    x: np.ndarray
    objective: float
    max_violation: float
    converged: bool
    iterations: int = 0
    stationarity: float = np.inf
    complementarity: float = np.inf


def voltage_limits(model: QcqpModel) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus (v_min, v_max) read back from the magnitude rows."""
    n = model.n
    vmax = np.asarray(model.upper[:n], dtype=float).copy()
    vmin = np.zeros(n)
    pos = {b: k for k, b in enumerate(model.bus_ids)}
    for con in model.constraints:
        if con.tag.kind == ConstraintKind.VmagLower and con.tag.bus_id in pos:
            vmin[pos[con.tag.bus_id]] = np.sqrt(max(0.0, -con.rhs))
    return vmin, vmax


def repair_start(model: QcqpModel, start: np.ndarray) -> np.ndarray:
    """Move each bus voltage into its magnitude band, keeping its angle.

    Buses with (near) zero voltage get the flat value 1 + 0j, clamped.
    """
    vmin, vmax = voltage_limits(model)
    v = unlift(start)
    mag = np.abs(v)
    flat = mag < 1e-3
    v = np.where(flat, 1.0 + 0j, v)
    mag = np.where(flat, 1.0, mag)
    target = np.clip(mag, vmin, np.maximum(vmax, 1e-12))
    return lift(v * target / mag)


class _Nlp:
    def __init__(self, model: QcqpModel):
        st = model.structure
        self.model = model
        self.N = model.dim
        norms = np.array([sp.linalg.norm(b) for b in st.bases])
        norms[norms == 0] = 1.0
        self.stack = sp.vstack([b / nu for b, nu in zip(st.bases, norms)], format="csr")
        self.Bvec = sp.vstack([(b / nu).reshape(1, self.N ** 2) for b, nu in zip(st.bases, norms)],
                              format="csr")
        self.T = len(st.bases)
        c = model.c_matrix.toarray()
        self.cs = max(1.0, np.abs(c).max())
        self.C = c / self.cs
        rhs = model.rhs
        eq_plus = np.array([p for p, _ in st.eq_pairs], dtype=int)
        self.eq_t = st.base_of[eq_plus].astype(int)
        self.eq_b = rhs[eq_plus] / norms[self.eq_t]
        ineq = st.ineq_rows
        self.iq_t = st.base_of[ineq].astype(int)
        self.iq_s = st.sign[ineq]
        self.iq_b = rhs[ineq] / norms[self.iq_t]

    def forms(self, x):
        Bx = (self.stack @ x).reshape(self.T, self.N)
        return Bx, Bx @ x

    def evaluate(self, x):
        Bx, val = self.forms(x)
        f = x @ self.C @ x
        df = 2 * self.C @ x
        h = val[self.eq_t] - self.eq_b
        dh = 2 * Bx[self.eq_t]          # rows are gradients
        g = self.iq_s * val[self.iq_t] - self.iq_b
        dg = 2 * self.iq_s[:, None] * Bx[self.iq_t]
        return f, df, h, dh, g, dg

    def hessian(self, lam, mu):
        w = np.bincount(self.eq_t, weights=lam, minlength=self.T) \
            + np.bincount(self.iq_t, weights=self.iq_s * mu, minlength=self.T)
        return 2 * self.C + 2 * (self.Bvec.T @ w).reshape(self.N, self.N)


def _pdip(nlp: _Nlp, x: np.ndarray, free: np.ndarray, opts: LocalOptions, z0: float = 1.0):
    """Primal-dual interior point iterations; returns (x, converged, iters, stat, comp)."""
    xi, sigma = 0.99995, 0.1
    f, df, h, dh, g, dg = nlp.evaluate(x)
    neq, niq = h.size, g.size
    lam = np.zeros(neq)
    z = np.full(niq, z0)
    k = g < -z0
    z[k] = -g[k]
    gamma = 1.0
    mu = np.full(niq, z0)
    k = gamma / z > z0
    mu[k] = gamma / z[k]
    f0 = f
    stat = comp = np.inf
    for it in range(1, opts.max_iterations + 1):
        Lx = df + dh.T @ lam + dg.T @ mu
        feas = max(np.abs(h).max(initial=0.0), g.max(initial=-np.inf), 0.0) \
            / (1 + max(np.abs(x).max(), np.abs(z).max(initial=0.0)))
        stat = np.abs(Lx[free]).max() / (1 + max(np.abs(lam).max(initial=0.0),
                                                 np.abs(mu).max(initial=0.0)))
        comp = (z @ mu) / (1 + np.abs(x).max())
        costc = abs(f - f0) / (1 + abs(f0))
        if it > 1 and feas < opts.feasibility_tolerance * 0.1 \
                and stat < opts.stationarity_tolerance \
                and comp < opts.complementarity_tolerance and costc < 1e-6:
            return x, True, it, stat, comp
        Lxx = nlp.hessian(lam, mu)
        dgf, dhf = dg[:, free], dh[:, free]
        M = Lxx[np.ix_(free, free)] + dgf.T @ ((mu / z)[:, None] * dgf)
        rhs_x = Lx[free] + dgf.T @ ((mu * g + gamma) / z)
        nf = free.size
        K = np.zeros((nf + neq, nf + neq))
        K[:nf, :nf] = M
        K[:nf, nf:] = dhf.T
        K[nf:, :nf] = dhf
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", la.LinAlgWarning)
                sol = la.solve(K, -np.concatenate([rhs_x, h]), assume_a="sym")
        except (la.LinAlgError, ValueError):
            return x, False, it, stat, comp
        if not np.all(np.isfinite(sol)):
            return x, False, it, stat, comp
        dx = np.zeros_like(x)
        dx[free] = sol[:nf]
        dlam = sol[nf:]
        dz = -g - z - dg @ dx
        dmu = -mu + (gamma - mu * dz) / z
        neg = dz < 0
        ap = min(xi * np.min(-z[neg] / dz[neg]), 1.0) if np.any(neg) else 1.0
        neg = dmu < 0
        ad = min(xi * np.min(-mu[neg] / dmu[neg]), 1.0) if np.any(neg) else 1.0
        x = x + ap * dx
        z = z + ap * dz
        lam = lam + ad * dlam
        mu = mu + ad * dmu
        if niq:
            gamma = sigma * (z @ mu) / niq
        f0 = f
        f, df, h, dh, g, dg = nlp.evaluate(x)
        if not np.all(np.isfinite(x)) or np.abs(x).max() > 1e6:
            return x, False, it, stat, comp
    return x, False, opts.max_iterations, stat, comp


def _augmented_lagrangian(nlp: _Nlp, x: np.ndarray, model: QcqpModel, opts: LocalOptions):
    """Fallback when Newton steps fail: bound-constrained AL with L-BFGS-B."""
    neq, niq = nlp.eq_b.size, nlp.iq_b.size
    lam, mu, rho = np.zeros(neq), np.zeros(niq), 10.0
    bounds = list(zip(model.lower, model.upper))
    for _ in range(30):
        def fun(y):
            f, df, h, dh, g, dg = nlp.evaluate(y)
            gp = np.maximum(0.0, mu / rho + g)
            val = f + lam @ h + 0.5 * rho * (h @ h) + 0.5 * rho * (gp @ gp) \
                - 0.5 * (mu @ mu) / rho
            grad = df + dh.T @ (lam + rho * h) + dg.T @ (rho * gp)
            return val, grad
        res = minimize(fun, x, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": 500, "ftol": 1e-15, "gtol": 1e-10})
        x = res.x
        _, _, h, _, g, _ = nlp.evaluate(x)
        lam = lam + rho * h
        mu = np.maximum(0.0, mu + rho * g)
        if max(np.abs(h).max(initial=0.0), g.max(initial=0.0)) < opts.feasibility_tolerance * 0.1:
            break
        rho = min(rho * 5, 1e8)
    return x


def local_solve(model: QcqpModel, start, opts: LocalOptions | None = None) -> LocalPoint:
    """Search a KKT point of the QCQP from ``start``.

    Non-convergence is reported through ``converged=False``; a point is only
    flagged converged when every constraint violation is within
    ``feasibility_tolerance`` in original units.
    """
    opts = opts or LocalOptions()
    x0 = np.asarray(start, dtype=float)
    if x0.shape != (model.dim,):
        raise ValueError(f"start must have length {model.dim}")
    n = model.n
    x = repair_start(model, x0)
    v = unlift(x)
    ref = int(np.argmax(np.abs(v)))
    v = v * np.exp(-1j * np.angle(v[ref]))
    x = lift(v)
    x[n + ref] = 0.0
    free = np.delete(np.arange(model.dim), n + ref)

    nlp = _Nlp(model)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        iters = 0
        for z0 in SLACK_STARTS:
            x1, ok, it, stat, comp = _pdip(nlp, x, free, opts, z0)
            iters += it
            if ok:
                break
        if not ok and opts.fallback:
            x2 = _augmented_lagrangian(nlp, x, model, opts)
            x3, ok, it2, stat, comp = _pdip(nlp, x2, free, opts)
            iters += it2
            x1 = x3 if ok else x2
    if not np.all(np.isfinite(x1)):
        x1 = x
    obj, viol = evaluate(model, x1)
    max_viol = float(viol.max(initial=0.0))
    converged = bool(ok and max_viol <= opts.feasibility_tolerance)
    return LocalPoint(x=x1, objective=obj, max_violation=max_viol, converged=converged,
                      iterations=iters, stationarity=float(stat), complementarity=float(comp))
