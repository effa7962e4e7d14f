"""Real lifted QCQP  min x'Cx  s.t.  x'A_k x <= b_k  over x = [Re V; Im V].

Quadratic forms are built so that, with ``v`` the complex bus voltages and
``x`` their real lift, ``x' AP_i x`` is the active power injected at bus i and
``x' AQ_i x`` the reactive power injected at bus i (generator convention,
``S_i = V_i * conj((Y V)_i)``).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .case_io import NetworkCase, build_bus_admittance, validate
from .errors import DimensionMismatch, NotHermitian


class ConstraintKind(str, enum.Enum):
    VmagUpper = "VmagUpper"
    VmagLower = "VmagLower"
    ActiveBalanceUpper = "ActiveBalanceUpper"
    ActiveBalanceLower = "ActiveBalanceLower"
    ReactiveBalanceUpper = "ReactiveBalanceUpper"
    ReactiveBalanceLower = "ReactiveBalanceLower"
    ActiveGenUpper = "ActiveGenUpper"
    ActiveGenLower = "ActiveGenLower"
    ReactiveGenUpper = "ReactiveGenUpper"
    ReactiveGenLower = "ReactiveGenLower"


@dataclass(frozen=True)
class ConstraintTag:
    kind: ConstraintKind
    bus_id: int


@dataclass(frozen=True)
class QuadConstraint:
    a_matrix: sp.csr_matrix
    rhs: float
    tag: ConstraintTag


def _is_sparse(m) -> bool:
    return sp.issparse(m)


def hermitian_part(m):
    """``(m + m^H) / 2``; its quadratic form is ``Re(v^H m v)``."""
    return (m + m.conj().T) / 2


def skew_part(m):
    """``(m - m^H) / 2i``; its quadratic form is ``Im(v^H m v)``."""
    return (m - m.conj().T) / 2j


def realify(h, tol: float = 1e-12):
    """Lift a Hermitian ``h`` to the real symmetric ``[[Re h, -Im h], [Im h, Re h]]``.

    For ``x = [Re v; Im v]`` the lifted form satisfies ``x'Rx = v^H h v``.
    Sparse input gives CSR output.
    """
    if _is_sparse(h):
        diff = abs(h - h.conj().T).max() if h.nnz else 0.0
        scale = max(1.0, abs(h).max() if h.nnz else 0.0)
    else:
        h = np.asarray(h, dtype=complex)
        diff = np.abs(h - h.conj().T).max() if h.size else 0.0
        scale = max(1.0, np.abs(h).max() if h.size else 0.0)
    if diff > tol * scale:
        raise NotHermitian(f"matrix is not Hermitian (max asymmetry {diff:.3e})")
    if _is_sparse(h):
        re, im = h.real, h.imag
        return sp.bmat([[re, -im], [im, re]], format="csr")
    re, im = h.real, h.imag
    return np.block([[re, -im], [im, re]])


@dataclass
class ConstraintStructure:
    """Constraint rows regrouped by distinct quadratic form.

    Each row ``k`` reads ``sign[k] * <bases[base_of[k]], X> <= rhs[k]``.
    Pairs of rows that are exact negatives of each other with opposite
    right-hand sides are equalities and are listed in ``eq_pairs`` as
    ``(k_plus, k_minus)``.
    """
    bases: list
    base_of: np.ndarray
    sign: np.ndarray
    eq_pairs: list
    ineq_rows: np.ndarray

    def stacked(self) -> sp.csr_matrix:
        return sp.vstack(self.bases, format="csr")


def _key(m: sp.csr_matrix) -> tuple:
    m = m.tocsr()
    m.sum_duplicates()
    m.eliminate_zeros()
    m.sort_indices()
    return (m.shape, m.indptr.tobytes(), m.indices.tobytes(), m.data.tobytes())


@dataclass
class QcqpModel:
    n: int
    c_matrix: sp.csr_matrix
    constraints: list
    lower: np.ndarray
    upper: np.ndarray
    # constant cost sum(c_i * P^D_i) over generator buses carrying load
    objective_offset: float = 0.0
    bus_ids: tuple = ()
    name: str = field(default="qcqp", compare=False)

    @property
    def dim(self) -> int:
        return 2 * self.n

    @property
    def rhs(self) -> np.ndarray:
        return np.array([c.rhs for c in self.constraints], dtype=float)

    @property
    def tags(self) -> list:
        return [c.tag for c in self.constraints]

    @cached_property
    def structure(self) -> ConstraintStructure:
        bases, index = [], {}
        base_of = np.empty(len(self.constraints), dtype=int)
        sign = np.empty(len(self.constraints), dtype=float)
        for k, con in enumerate(self.constraints):
            a = sp.csr_matrix(con.a_matrix)
            key = _key(a)
            if key in index:
                base_of[k], sign[k] = index[key], 1.0
                continue
            nkey = _key(-a)
            if nkey in index:
                base_of[k], sign[k] = index[nkey], -1.0
                continue
            index[key] = len(bases)
            bases.append(a)
            base_of[k], sign[k] = index[key], 1.0
        rhs = self.rhs
        eq_pairs, used = [], set()
        plus: dict[int, list[int]] = {}
        for k in range(len(self.constraints)):
            if sign[k] > 0:
                plus.setdefault(int(base_of[k]), []).append(k)
        for k in range(len(self.constraints)):
            if sign[k] > 0:
                continue
            for j in plus.get(int(base_of[k]), []):
                if j not in used and rhs[j] == -rhs[k]:
                    eq_pairs.append((j, k))
                    used.update((j, k))
                    break
        ineq = np.array([k for k in range(len(self.constraints)) if k not in used], dtype=int)
        return ConstraintStructure(bases, base_of, sign, eq_pairs, ineq)

    def base_values(self, x: np.ndarray) -> np.ndarray:
        """``x' B_t x`` for every distinct quadratic form ``B_t``."""
        st = self.structure
        stacked = self._stacked
        return (stacked @ x).reshape(len(st.bases), self.dim) @ x

    @cached_property
    def _stacked(self) -> sp.csr_matrix:
        return self.structure.stacked()

    def constraint_values(self, x: np.ndarray) -> np.ndarray:
        st = self.structure
        return st.sign * self.base_values(x)[st.base_of]

    def check_invariants(self, tol: float = 1e-12) -> None:
        """Assert the structural invariants of a model built from a network."""
        dim = self.dim
        mats = [self.c_matrix] + [c.a_matrix for c in self.constraints]
        for m in mats:
            if m.shape != (dim, dim):
                raise DimensionMismatch("matrix of wrong size")
            if m.nnz and abs(m - m.T).max() > tol:
                raise AssertionError("non-symmetric matrix")
        if len(self.constraints) != 6 * self.n:
            raise AssertionError("expected 6n constraints")
        total = sum((c.a_matrix for c in self.constraints[: self.n]), sp.csr_matrix((dim, dim)))
        if abs(total - sp.identity(dim)).max() > 0:
            raise AssertionError("first n constraints do not sum to the identity")
        if not np.all(np.isfinite(self.rhs)):
            raise AssertionError("non-finite right-hand side")

    def to_json(self) -> str:
        """Debug dump with coordinate triplets, right-hand sides and tags."""
        def trip(m):
            m = sp.coo_matrix(m)
            return {"row": m.row.tolist(), "col": m.col.tolist(), "val": m.data.tolist()}

        return json.dumps({
            "n": self.n,
            "bus_ids": list(self.bus_ids),
            "objective_offset": self.objective_offset,
            "c_matrix": trip(self.c_matrix),
            "constraints": [
                {"kind": c.tag.kind.value, "bus_id": c.tag.bus_id, "rhs": c.rhs,
                 "a_matrix": trip(c.a_matrix)} for c in self.constraints],
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
        })


def injection_forms(case: NetworkCase) -> tuple[list, list]:
    """Real lifted active and reactive injection forms for every bus."""
    Y = sp.csr_matrix(build_bus_admittance(case))
    n = case.n_bus
    active, reactive = [], []
    for i in range(n):
        row = Y.getrow(i).tocoo()
        # column i of Y^H: v^H M v = V_i conj((Y V)_i) = S_i
        m = sp.csc_matrix((np.conj(row.data), (row.col, np.full(row.nnz, i))), shape=(n, n))
        active.append(realify(hermitian_part(m)))
        reactive.append(realify(skew_part(m)))
    return active, reactive


def magnitude_form(i: int, n: int) -> sp.csr_matrix:
    return sp.csr_matrix((np.ones(2), ([i, i + n], [i, i + n])), shape=(2 * n, 2 * n))


def build_qcqp(case: NetworkCase) -> QcqpModel:
    """Lift ``case`` into the 6n-row QCQP with the magnitude upper bounds first."""
    validate(case)
    n = case.n_bus
    AP, AQ = injection_forms(case)
    gens = case.generator_at()
    K = ConstraintKind
    C = sp.csr_matrix((2 * n, 2 * n))
    offset = 0.0
    upper_mag, rest = [], []
    for i, bus in enumerate(case.buses):
        M = magnitude_form(i, n)
        upper_mag.append(QuadConstraint(M, bus.v_max ** 2, ConstraintTag(K.VmagUpper, bus.id)))
        rest.append(QuadConstraint(-M, -bus.v_min ** 2, ConstraintTag(K.VmagLower, bus.id)))
        g = gens.get(bus.id)
        if g is not None:
            C = C + g.cost_linear * AP[i]
            offset += g.cost_linear * bus.p_load
            rows = [
                (AP[i], g.p_max - bus.p_load, K.ActiveGenUpper),
                (-AP[i], bus.p_load - g.p_min, K.ActiveGenLower),
                (AQ[i], g.q_max - bus.q_load, K.ReactiveGenUpper),
                (-AQ[i], bus.q_load - g.q_min, K.ReactiveGenLower),
            ]
        else:
            rows = [
                (AP[i], -bus.p_load, K.ActiveBalanceUpper),
                (-AP[i], bus.p_load, K.ActiveBalanceLower),
                (AQ[i], -bus.q_load, K.ReactiveBalanceUpper),
                (-AQ[i], bus.q_load, K.ReactiveBalanceLower),
            ]
        rest.extend(QuadConstraint(sp.csr_matrix(a), float(b), ConstraintTag(kind, bus.id))
                    for a, b, kind in rows)
    vmax = np.array([b.v_max for b in case.buses])
    return QcqpModel(
        n=n,
        c_matrix=sp.csr_matrix(C),
        constraints=upper_mag + rest,
        lower=np.concatenate([-vmax, -vmax]),
        upper=np.concatenate([vmax, vmax]),
        objective_offset=offset,
        bus_ids=tuple(b.id for b in case.buses),
        name=case.name,
    )


def evaluate(model: QcqpModel, x) -> tuple[float, np.ndarray]:
    """Objective ``x'Cx`` and per-row violations ``max(0, x'A_k x - b_k)``.

    The box ``lower <= x <= upper`` is metadata for branching and is not
    checked here.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (model.dim,):
        raise DimensionMismatch(f"expected a vector of length {model.dim}, got {x.shape}")
    obj = float(x @ (model.c_matrix @ x))
    viol = np.maximum(0.0, model.constraint_values(x) - model.rhs)
    return obj, viol


def lift(v) -> np.ndarray:
    v = np.asarray(v, dtype=complex)
    return np.concatenate([v.real, v.imag])


def unlift(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = x.size // 2
    return x[:n] + 1j * x[n:]


def generic_model(c_matrix, constraints, lower=None, upper=None) -> QcqpModel:
    """Build a QcqpModel from raw ``(A_k, b_k)`` pairs (tags are placeholders).

    Used for synthetic problems that do not come from a network.
    """
    c = sp.csr_matrix(np.asarray(c_matrix, dtype=float) if not sp.issparse(c_matrix) else c_matrix)
    dim = c.shape[0]
    if dim % 2:
        raise DimensionMismatch("lifted dimension must be even")
    cons = [QuadConstraint(sp.csr_matrix(a), float(b), ConstraintTag(ConstraintKind.VmagUpper, k))
            for k, (a, b) in enumerate(constraints)]
    lower = -np.ones(dim) if lower is None else np.asarray(lower, dtype=float)
    upper = np.ones(dim) if upper is None else np.asarray(upper, dtype=float)
    return QcqpModel(n=dim // 2, c_matrix=c, constraints=cons, lower=lower, upper=upper)
