"""Spatial branch-and-bound on the box of x.

Nodes are processed best-first by potential (the parent's relaxation value).
Each node solves the convex QP relaxation on its box; nodes whose bound
reaches the incumbent are pruned, nodes whose relaxation is exact on the
pair set yield incumbent candidates, and the rest are split on one variable
of the pair with the largest ``|y_ij - x_i x_j|``. A local solver runs once
before the root and then every ``heuristic_period`` processed nodes.

All reported bounds include the model's constant objective offset.
"""

from __future__ import annotations

import enum
import heapq
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .errors import EmptyQueue, ZeroWidthInterval
from .local import LocalOptions, local_solve
from .qcqp import QcqpModel, evaluate, lift
from .reform import Reformulation
from .relaxation import QpOptions, QpSolution, QpStatus, bilinear_violation, solve_node_relaxation

log = logging.getLogger(__name__)

PRUNE_SLACK = 1e-9
EXACT_TOL = 1e-6
FEAS_TOL = 1e-5
SPLIT_MARGIN = 1e-6
MIN_WIDTH = 1e-9


class NodeOutcome(str, enum.Enum):
    PrunedInfeasible = "PrunedInfeasible"
    PrunedByBound = "PrunedByBound"
    IncumbentCandidate = "IncumbentCandidate"
    Branched = "Branched"
    Requeued = "Requeued"
    NumericalTrouble = "NumericalTrouble"


class BnbStatus(str, enum.Enum):
    GlobalOptimal = "GlobalOptimal"
    TimeLimit = "TimeLimit"
    Infeasible = "Infeasible"


@dataclass
class BnbOptions:
    epsilon: float = 1e-5
    delta: float = 0.5
    heuristic_period: int = 3
    time_limit: float = 300.0
    threads: int = 1
    fix_reference: bool | None = False  # None: pin when the model is rotation invariant
    node_limit: int | None = None
    qp: QpOptions = field(default_factory=QpOptions)
    local: LocalOptions = field(default_factory=LocalOptions)


@dataclass
class BnbNode:
    lower: np.ndarray
    upper: np.ndarray
    potential: float
    depth: int = 0
    id: int = 0
    parent: int = -1
    retries: int = 0
    warm: np.ndarray | None = field(default=None, repr=False)

    @property
    def volume(self) -> float:
        return float(math.prod(self.upper - self.lower))


@dataclass
class SolveReport:
    best_x: np.ndarray | None
    upper_bound: float
    lower_bound: float
    gap: float
    nodes_processed: int
    root_bound: float
    root_gap: float
    wall_time: float
    status: BnbStatus
    events: list = field(default_factory=list, repr=False)

    def to_dict(self, timings: bool = True) -> dict:
        d = {
            "best_x": None if self.best_x is None else [float(v) for v in self.best_x],
            "upper_bound": _num(self.upper_bound),
            "lower_bound": _num(self.lower_bound),
            "gap": _num(self.gap),
            "nodes_processed": self.nodes_processed,
            "root_bound": _num(self.root_bound),
            "root_gap": _num(self.root_gap),
            "status": self.status.value,
        }
        if timings:
            d["wall_time"] = self.wall_time
        return d


def _num(v: float):
    return None if v is None or not math.isfinite(v) else float(v)


def relative_gap(ub: float, lb: float) -> float:
    if not math.isfinite(ub):
        return math.inf
    return max(0.0, (ub - lb) / max(1e-12, abs(ub)))


class NodeQueue:
    """Open nodes keyed by (potential, id)."""

    def __init__(self):
        self._heap: list = []

    def push(self, node: BnbNode) -> None:
        heapq.heappush(self._heap, (node.potential, node.id, node))

    def pop(self) -> BnbNode:
        if not self._heap:
            raise EmptyQueue("no open node")
        return heapq.heappop(self._heap)[2]

    def min_potential(self) -> float:
        return self._heap[0][0] if self._heap else math.inf

    def __len__(self) -> int:
        return len(self._heap)


def select_next(queue: NodeQueue) -> BnbNode:
    return queue.pop()


def should_terminate(ub: float | None, lb: float, epsilon: float, queue_empty: bool = False) -> bool:
    if queue_empty:
        return True
    if ub is None or not math.isfinite(ub):
        return False
    # tiny relative slack so a gap of exactly epsilon survives rounding
    return (ub - lb) / max(1e-12, abs(ub)) <= epsilon * (1 + 1e-9)


def choose_branch(sol: QpSolution, node: BnbNode, delta: float) -> tuple[int, float]:
    """Branching variable from the most violated pair and its split point."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must lie in [0, 1]")
    (i, j), _ = bilinear_violation(sol)
    wi = node.upper[i] - node.lower[i]
    wj = node.upper[j] - node.lower[j]
    var = j if wj > wi else i
    lo, up = float(node.lower[var]), float(node.upper[var])
    w = up - lo
    if w <= 0:
        raise ZeroWidthInterval(f"variable {var} has interval [{lo}, {up}]")
    split = delta * float(sol.x_bar[var]) + (1 - delta) * (lo + up) / 2
    split = min(max(split, lo + SPLIT_MARGIN * w), up - SPLIT_MARGIN * w)
    return var, split


def split_node(node: BnbNode, var: int, split: float, potential: float,
               next_id: int) -> tuple[BnbNode, BnbNode]:
    up1 = node.upper.copy()
    up1[var] = split
    lo2 = node.lower.copy()
    lo2[var] = split
    c1 = BnbNode(node.lower.copy(), up1, potential, node.depth + 1, next_id, node.id)
    c2 = BnbNode(lo2, node.upper.copy(), potential, node.depth + 1, next_id + 1, node.id)
    return c1, c2


@dataclass
class SearchState:
    model: QcqpModel
    reform: Reformulation
    opts: BnbOptions
    upper_bound: float = math.inf       # in model units (x'Cx, no offset)
    best_x: np.ndarray | None = None
    next_id: int = 1
    processed: int = 0

    def offer(self, x: np.ndarray) -> bool:
        """Accept ``x`` as incumbent if it is feasible and improves the bound."""
        obj, viol = evaluate(self.model, x)
        if viol.max(initial=0.0) > FEAS_TOL or obj >= self.upper_bound:
            return False
        self.upper_bound, self.best_x = obj, np.array(x, dtype=float)
        return True

    def heuristic(self, start: np.ndarray) -> bool:
        pt = local_solve(self.model, start, self.opts.local)
        return pt.converged and self.offer(pt.x)


@dataclass
class NodeResult:
    outcome: NodeOutcome
    value: float = math.nan
    children: tuple = ()


def _solve_qp(state: SearchState, node: BnbNode) -> QpSolution:
    opts = state.opts.qp
    if node.retries:
        opts = replace(opts, tolerance=opts.tolerance * 0.1,
                       max_iterations=opts.max_iterations * 2)
    return solve_node_relaxation(state.reform, (node.lower, node.upper), opts, warm=node.warm)


def process_node(node: BnbNode, state: SearchState, sol: QpSolution | None = None) -> NodeResult:
    """Classify one node; ``sol`` may be a relaxation solved elsewhere."""
    if sol is None:
        sol = _solve_qp(state, node)
    if sol.status == QpStatus.Infeasible:
        return NodeResult(NodeOutcome.PrunedInfeasible)
    if sol.status != QpStatus.Optimal:
        if node.retries == 0:
            node.retries = 1
            return NodeResult(NodeOutcome.Requeued, children=(node,))
        return _trouble(node, state)
    value = max(sol.lower_bound, node.potential)
    if value >= state.upper_bound - PRUNE_SLACK:
        return NodeResult(NodeOutcome.PrunedByBound, value)
    _, mag = bilinear_violation(sol)
    if mag <= EXACT_TOL and state.offer(sol.x_bar):
        return NodeResult(NodeOutcome.IncumbentCandidate, value)
    if mag <= EXACT_TOL and evaluate(state.model, sol.x_bar)[1].max(initial=0.0) <= FEAS_TOL:
        # exact and feasible but not better than the incumbent: nothing left here
        return NodeResult(NodeOutcome.IncumbentCandidate, value)
    try:
        var, split = choose_branch(sol, node, state.opts.delta)
    except ZeroWidthInterval:
        return _trouble(node, state)
    if node.upper[var] - node.lower[var] < MIN_WIDTH:
        return _trouble(node, state)
    kids = split_node(node, var, split, value, state.next_id)
    state.next_id += 2
    warm = np.concatenate([sol.x_bar, sol.y_bar])
    for k in kids:
        k.warm = warm
    return NodeResult(NodeOutcome.Branched, value, kids)


def _trouble(node: BnbNode, state: SearchState) -> NodeResult:
    """Unresolved node: bisect its widest coordinate keeping the potential.

    Nothing is pruned, so the bound stays valid; a box too small to split
    stays open and its potential keeps contributing to the lower bound.
    """
    w = node.upper - node.lower
    var = int(np.argmax(w))
    if w[var] < MIN_WIDTH:
        return NodeResult(NodeOutcome.NumericalTrouble, node.potential)
    mid = (node.lower[var] + node.upper[var]) / 2
    kids = split_node(node, var, mid, node.potential, state.next_id)
    state.next_id += 2
    return NodeResult(NodeOutcome.NumericalTrouble, node.potential, kids)


def _rotation_invariant(m) -> bool:
    m = sp.csr_matrix(m)
    n = m.shape[0] // 2
    a, b = m[:n, :n], m[:n, n:]
    c, d = m[n:, :n], m[n:, n:]
    return abs(a - d).max() == 0 and abs(b + c).max() == 0


def is_rotation_invariant(model: QcqpModel) -> bool:
    """True when every form has the real-lifted Hermitian block pattern."""
    return _rotation_invariant(model.c_matrix) and all(
        _rotation_invariant(c.a_matrix) for c in model.constraints)


def root_box(model: QcqpModel, fix_reference: bool | None = None) -> tuple[np.ndarray, np.ndarray]:
    lower = np.array(model.lower, dtype=float)
    upper = np.array(model.upper, dtype=float)
    if fix_reference is None:
        fix_reference = is_rotation_invariant(model)
    if fix_reference:
        # every form is invariant under a common rotation of the voltages,
        # so bus 0 can be taken real and nonnegative
        lower[model.n] = upper[model.n] = 0.0
        lower[0] = 0.0
    return lower, upper


def solve(model: QcqpModel, r: Reformulation, opts: BnbOptions | None = None) -> SolveReport:
    opts = opts or BnbOptions()
    t0 = time.perf_counter()
    off = model.objective_offset
    state = SearchState(model, r, opts)
    lower, upper = root_box(model, opts.fix_reference)
    queue = NodeQueue()
    queue.push(BnbNode(lower, upper, -math.inf, 0, 0))
    stuck: list[BnbNode] = []
    events: list[dict] = []
    root_bound = math.nan
    timed_out = False
    infeasible_root = False

    state.heuristic(lift(np.ones(model.n)))
    pool = ThreadPoolExecutor(opts.threads) if opts.threads > 1 else None

    def global_lb(inflight=()) -> float:
        pots = [queue.min_potential()] + [n.potential for n in stuck] + [n.potential for n in inflight]
        return min(min(pots), state.upper_bound)

    try:
        while len(queue):
            lb = global_lb()
            if should_terminate(state.upper_bound + off, lb + off, opts.epsilon):
                break
            if time.perf_counter() - t0 > opts.time_limit or (
                    opts.node_limit is not None and state.processed >= opts.node_limit):
                timed_out = True
                break
            batch = [select_next(queue) for _ in range(min(max(1, opts.threads), len(queue)))]
            if pool is not None and len(batch) > 1:
                sols = list(pool.map(lambda nd: _solve_qp(state, nd), batch))
            else:
                sols = [None] * len(batch)
            for k, (node, sol) in enumerate(zip(batch, sols)):
                if node.potential >= state.upper_bound - PRUNE_SLACK:
                    res = NodeResult(NodeOutcome.PrunedByBound, node.potential)
                    qp = None
                else:
                    if sol is None:
                        sol = _solve_qp(state, node)
                    qp = sol
                    res = process_node(node, state, sol)
                    if node.id == 0:
                        if res.outcome == NodeOutcome.PrunedInfeasible:
                            infeasible_root = True
                        elif res.outcome != NodeOutcome.Requeued:
                            root_bound = res.value
                if res.outcome != NodeOutcome.Requeued:
                    state.processed += 1
                for child in res.children:
                    queue.push(child)
                if res.outcome == NodeOutcome.NumericalTrouble and not res.children:
                    stuck.append(node)
                if qp is not None and qp.status == QpStatus.Optimal and (
                        state.processed % opts.heuristic_period == 0
                        or (node.id == 0 and state.best_x is None)):
                    state.heuristic(qp.x_bar)
                events.append({
                    "id": node.id, "parent": node.parent, "depth": node.depth,
                    "volume": node.volume, "value": _num(res.value + off),
                    "outcome": res.outcome.value,
                    "lower_bound": _num(global_lb(batch[k + 1:]) + off),
                    "upper_bound": _num(state.upper_bound + off),
                })
    finally:
        if pool is not None:
            pool.shutdown()

    ub = state.upper_bound
    lb = global_lb() if len(queue) or stuck else ub
    if infeasible_root or (not math.isfinite(ub) and not len(queue) and not stuck):
        status = BnbStatus.Infeasible
    elif not timed_out and math.isfinite(ub) and should_terminate(ub + off, lb + off, opts.epsilon):
        status = BnbStatus.GlobalOptimal
    else:
        status = BnbStatus.TimeLimit
    if not math.isfinite(root_bound):
        root_bound = lb
    return SolveReport(
        best_x=state.best_x,
        upper_bound=ub + off,
        lower_bound=lb + off,
        gap=relative_gap(ub + off, lb + off),
        nodes_processed=state.processed,
        root_bound=root_bound + off,
        root_gap=relative_gap(ub + off, root_bound + off),
        wall_time=time.perf_counter() - t0,
        status=status,
        events=events,
    )
