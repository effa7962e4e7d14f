"""Dual-derived convex reformulation ``x'S x + <C - S, Y>`` with ``Y = x x'``.

``S = C + sum_k alpha_k A_k`` built from optimal SDP duals is psd, and moves
every nonconvex term of the objective onto the products ``Y_ij`` for pairs
``(i, j)`` in the sparsity pattern of the problem data.
"""

from __future__ import annotations

import json
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .errors import MissingPair, NotOptimal, NotPsdAfterShift
from .qcqp import QcqpModel
from .sdp import SdpResult, SdpStatus

PSD_REPAIR_LIMIT = 1e-6


@dataclass(frozen=True)
class Reformulation:
    s_star: np.ndarray
    residual: np.ndarray
    pairs: np.ndarray          # (|E|, 2), i <= j, lexicographically sorted
    lower: np.ndarray
    upper: np.ndarray
    shift: float = 0.0
    lambda_min: float = 0.0    # before any shift
    lambda_max: float = 0.0
    model: QcqpModel | None = field(default=None, compare=False, repr=False)

    @property
    def pair_set(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in self.pairs}

    @property
    def residual_coef(self) -> np.ndarray:
        """Weights of ``y_ij`` in ``<C - S, Y>`` (off-diagonal entries count twice)."""
        i, j = self.pairs[:, 0], self.pairs[:, 1]
        return np.where(i == j, 1.0, 2.0) * self.residual[i, j]

    def pair_index(self) -> dict[tuple[int, int], int]:
        return {(int(i), int(j)): k for k, (i, j) in enumerate(self.pairs)}

    def audit_json(self) -> str:
        return json.dumps({"lambda_min": self.lambda_min, "lambda_max": self.lambda_max,
                           "shift": self.shift, "pairs": int(len(self.pairs))})


def sparsity_pairs(model: QcqpModel) -> np.ndarray:
    """Upper-triangle union pattern of C and every A_k, plus the full diagonal."""
    dim = model.dim
    acc = abs(sp.csr_matrix(model.c_matrix))
    for con in model.constraints:
        acc = acc + abs(sp.csr_matrix(con.a_matrix))
    acc = sp.triu(acc + sp.identity(dim), format="coo")
    acc.eliminate_zeros()
    pairs = np.column_stack([acc.row, acc.col]).astype(int)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order]


def assemble_s(model: QcqpModel, alpha: np.ndarray) -> np.ndarray:
    s = model.c_matrix.toarray().astype(float)
    for a_k, con in zip(alpha, model.constraints):
        if a_k != 0:
            s = s + a_k * con.a_matrix.toarray()
    return (s + s.T) / 2


def build_reformulation(model: QcqpModel, sdp: SdpResult) -> Reformulation:
    """Reformulation from the SDP duals; a tiny negative spectrum is shifted away."""
    if sdp.status != SdpStatus.Optimal:
        raise NotOptimal(f"SDP status is {sdp.status.value}")
    return reformulation_from_duals(model, sdp.duals)


def reformulation_from_duals(model: QcqpModel, alpha: np.ndarray) -> Reformulation:
    s_star = assemble_s(model, np.asarray(alpha, dtype=float))
    ev = la.eigvalsh(s_star)
    lmin, lmax = float(ev[0]), float(ev[-1])
    shift = 0.0
    if lmin < -PSD_REPAIR_LIMIT:
        raise NotPsdAfterShift(f"lambda_min(S*) = {lmin:.3e} is below -{PSD_REPAIR_LIMIT}")
    if lmin < 0:
        shift = abs(lmin) + 1e-9
        s_star = s_star + shift * np.eye(model.dim)
    residual = model.c_matrix.toarray() - s_star
    return Reformulation(s_star=s_star, residual=residual, pairs=sparsity_pairs(model),
                         lower=np.array(model.lower, dtype=float),
                         upper=np.array(model.upper, dtype=float),
                         shift=shift, lambda_min=lmin, lambda_max=lmax, model=model)


def _y_vector(r: Reformulation, y) -> np.ndarray:
    if isinstance(y, Mapping):
        out = np.empty(len(r.pairs))
        for k, (i, j) in enumerate(r.pairs):
            key = (int(i), int(j))
            if key in y:
                out[k] = y[key]
            elif (key[1], key[0]) in y:
                out[k] = y[(key[1], key[0])]
            else:
                raise MissingPair(key)
        return out
    y = np.asarray(y, dtype=float)
    if y.shape != (len(r.pairs),):
        raise MissingPair(f"expected {len(r.pairs)} pair values, got shape {y.shape}")
    return y


def reformulated_objective(r: Reformulation, x, y) -> float:
    """``x'S x + <C - S, Y>`` with ``Y`` the symmetric matrix induced by ``y`` on E."""
    x = np.asarray(x, dtype=float)
    return float(x @ r.s_star @ x + r.residual_coef @ _y_vector(r, y))


def outer_on_pairs(pairs: np.ndarray, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[pairs[:, 0]] * x[pairs[:, 1]]
