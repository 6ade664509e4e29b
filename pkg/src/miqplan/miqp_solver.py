"""Branch-and-bound over binary variables with convex-QP node relaxations.

Best-first on the node bound with depth-first plunging along the branch that
matches the relaxation's rounding; the incumbent is seeded by an optional
warm start (evaluated first) and improved by a rounding heuristic that reads
a full binary assignment off each relaxation's continuous trajectory.  All
tie-breaking is by lowest index, so single-worker runs are deterministic.
"""

from __future__ import annotations

import heapq
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .qp_kernel import ConvexQP, NumericalFailure


class CapExceeded(Exception):
    """Brute-force enumeration asked for more binaries than the cap allows."""


class ShapeMismatch(Exception):
    """Warm start comes from a structurally different problem."""


class SolverBug(Exception):
    """Internal consistency check failed (bound moved the wrong way)."""


@dataclass
class SolverOptions:
    abs_gap: float = 1e-9
    rel_gap: float = 1e-9
    max_nodes: int = 200_000
    time_limit: float | None = None
    qp_tolerance: float = 1e-8
    branching: str = "most-fractional"
    integrality_tol: float = 1e-6
    heuristic_period: int = 4
    verbose: bool = False

    def __post_init__(self):
        if self.abs_gap < 0 or self.rel_gap < 0:
            raise ValueError("gaps must be nonnegative")
        if self.qp_tolerance <= 0:
            raise ValueError("qp_tolerance must be positive")


@dataclass
class WarmStart:
    binaries: dict
    continuous: np.ndarray | None = None


@dataclass
class SolveResult:
    status: str                       # Optimal | Feasible | Infeasible | TimeLimit
    objective: float | None = None
    gap: float = 0.0
    lower_bound: float = -np.inf
    x: np.ndarray | None = None
    binary_assignment: dict = field(default_factory=dict)
    per_agent_costs: dict = field(default_factory=dict)
    slack_values: dict = field(default_factory=dict)
    node_count: int = 0
    wall_time: float = 0.0
    layout: object = None

    @property
    def feasible(self) -> bool:
        return self.status in ("Optimal", "Feasible")


def _kernel_for(problem) -> ConvexQP:
    return ConvexQP(problem.Q, problem.c, problem.A, problem.senses, problem.b,
                    problem.lb, problem.ub, const=problem.const)


def _result_from_x(problem, x, objective, status, **kw) -> SolveResult:
    assignment = {int(i): float(np.round(x[i])) for i in problem.binary_idx}
    res = SolveResult(status=status, objective=objective, x=x,
                      binary_assignment=assignment,
                      layout=getattr(problem, "layout", None), **kw)
    if getattr(problem, "layout", None) is not None:
        res.per_agent_costs = problem.per_agent_costs(x)
        res.slack_values = problem.slack_values(x)
    return res


def solve_miqp(problem, warm: WarmStart | None = None,
               options: SolverOptions | None = None) -> SolveResult:
    """Solve the MIQP to a certified gap.

    Node bounds come from the shared-kernel relaxations; a node is pruned as
    soon as its bound reaches the incumbent minus the absolute gap (or the
    relative gap times the incumbent scale).
    """
    opts = options or SolverOptions()
    t0 = time.perf_counter()
    kernel = _kernel_for(problem)
    free_bins = [int(i) for i in problem.free_binaries()]
    free_set = set(free_bins)
    log = sys.stderr if opts.verbose else None

    incumbent_obj = np.inf
    incumbent_x = None
    nodes = 0
    heap: list = []
    counter = 0

    def gap_threshold():
        if not np.isfinite(incumbent_obj):
            return 0.0
        return max(opts.abs_gap, opts.rel_gap * max(1.0, abs(incumbent_obj)))

    def try_assignment(fixes, x0=None, w0=None):
        nonlocal incumbent_obj, incumbent_x
        res = kernel.solve(fixes=fixes, x0=x0, w0=w0, polish=False)
        if res.status != "optimal":
            return None
        if res.objective < incumbent_obj - 1e-12:
            incumbent_obj = res.objective
            incumbent_x = res.x.copy()
        return res

    if warm is not None and warm.binaries:
        fixes = {i: v for i, v in warm.binaries.items() if i in free_set}
        try_assignment(fixes, x0=warm.continuous)

    root = (-np.inf, 0, {}, warm.continuous if warm else None, None)
    heapq.heappush(heap, root)
    counter += 1
    status = None

    while heap:
        best_remaining = heap[0][0]
        if np.isfinite(incumbent_obj) and \
                best_remaining >= incumbent_obj - gap_threshold():
            break
        if opts.time_limit is not None and time.perf_counter() - t0 > opts.time_limit:
            status = "TimeLimit"
            break
        if nodes >= opts.max_nodes:
            status = "NodeLimit"
            break
        parent_bound, _, fixes, x0, w0 = heapq.heappop(heap)

        # depth-first plunge along the rounding-matching child
        while True:
            if np.isfinite(incumbent_obj) and \
                    parent_bound >= incumbent_obj - gap_threshold():
                break
            if nodes >= opts.max_nodes:
                status = "NodeLimit"
                break
            try:
                relax = kernel.solve(fixes=fixes, x0=x0, w0=w0, polish=False)
            except NumericalFailure:
                relax = kernel.solve(fixes=fixes, polish=False)
            nodes += 1
            if relax.status != "optimal":
                break  # infeasible node
            bound = relax.objective_reg
            scale = max(1.0, abs(bound), abs(parent_bound))
            if np.isfinite(parent_bound) and bound < parent_bound - 1e-5 * scale:
                raise SolverBug(
                    f"child bound {bound} fell below parent {parent_bound}")
            if log:
                frac_dbg = sum(1 for i in free_bins if i not in fixes
                               and 1e-9 < relax.x[i] % 1.0 < 1 - 1e-9)
                print(f"node {nodes} bound {bound:.6f} incumbent "
                      f"{incumbent_obj:.6f} frac {frac_dbg}", file=log)
            if np.isfinite(incumbent_obj) and \
                    bound >= incumbent_obj - gap_threshold():
                break
            x = relax.x
            fractional = []
            for i in free_bins:
                if i in fixes:
                    continue
                f = abs(x[i] - round(x[i]))
                if f > opts.integrality_tol:
                    fractional.append((f, i))
            if not fractional:
                # integral relaxation; re-solve with clean fixings for safety
                full = dict(fixes)
                for i in free_bins:
                    if i not in full:
                        full[i] = float(round(x[i]))
                try_assignment(full, x0=x, w0=relax.working_set)
                break
            if nodes % opts.heuristic_period == 1 and hasattr(problem, "heuristic_rounding"):
                rounded = problem.heuristic_rounding(x)
                if rounded is not None:
                    merged = dict(fixes)
                    merged.update({i: v for i, v in rounded.items() if i not in fixes})
                    try_assignment(merged, x0=x, w0=relax.working_set)
                    if np.isfinite(incumbent_obj) and \
                            bound >= incumbent_obj - gap_threshold():
                        break
            # most fractional, lowest index on ties
            fractional.sort(key=lambda t: (-t[0], t[1]))
            _, branch_var = fractional[0]
            preferred = float(round(x[branch_var]))
            other = 1.0 - preferred
            fixes_other = dict(fixes)
            fixes_other[branch_var] = other
            heapq.heappush(heap, (bound, counter, fixes_other, x, relax.working_set))
            counter += 1
            fixes = dict(fixes)
            fixes[branch_var] = preferred
            parent_bound, x0, w0 = bound, x, relax.working_set
        if status in ("TimeLimit", "NodeLimit"):
            break

    wall = time.perf_counter() - t0
    lower = heap[0][0] if heap else incumbent_obj
    if incumbent_x is None:
        if status in ("TimeLimit", "NodeLimit"):
            return SolveResult(status="TimeLimit", node_count=nodes, wall_time=wall)
        return SolveResult(status="Infeasible", node_count=nodes, wall_time=wall)
    lower = min(lower, incumbent_obj)
    gap = float(incumbent_obj - lower)
    final_status = "Optimal"
    if status in ("TimeLimit", "NodeLimit") or gap > gap_threshold() + 1e-15:
        final_status = "Feasible"
    res = _result_from_x(problem, incumbent_x, float(incumbent_obj), final_status,
                         gap=gap, lower_bound=float(lower))
    res.node_count = nodes
    res.wall_time = wall
    return res


def brute_force_reference(problem, cap: int = 20,
                          options: SolverOptions | None = None) -> SolveResult:
    """Enumerate every assignment of the free binaries; test oracle only.

    Assignments are visited in Gray-code order so consecutive QPs differ in a
    single fixing and warm-start each other.
    """
    t0 = time.perf_counter()
    free_bins = [int(i) for i in problem.free_binaries()]
    if len(free_bins) > cap:
        raise CapExceeded(f"{len(free_bins)} free binaries exceed cap {cap}")
    kernel = _kernel_for(problem)
    best_obj, best_x = np.inf, None
    count = 0
    prev_x, prev_w = None, None
    for i in range(1 << len(free_bins)):
        gray = i ^ (i >> 1)
        fixes = {free_bins[b]: float((gray >> b) & 1) for b in range(len(free_bins))}
        try:
            res = kernel.solve(fixes=fixes, x0=prev_x, w0=prev_w, polish=False)
        except NumericalFailure:
            res = kernel.solve(fixes=fixes, polish=False)
        count += 1
        if res.status == "optimal":
            prev_x, prev_w = res.x, res.working_set
            if res.objective < best_obj - 1e-12:
                best_obj, best_x = res.objective, res.x.copy()
    wall = time.perf_counter() - t0
    if best_x is None:
        return SolveResult(status="Infeasible", node_count=count, wall_time=wall)
    res = _result_from_x(problem, best_x, float(best_obj), "Optimal",
                         lower_bound=float(best_obj))
    res.node_count = count
    res.wall_time = wall
    return res


def warm_start_from_previous(prev: SolveResult, problem) -> WarmStart:
    """Shift the previous receding-horizon solution one step forward.

    All per-step variables move from step k+1 to step k; the final step is
    seeded by constant-input extrapolation of the last dynamics step, and
    final-step binaries repeat the previous final step.
    """
    layout = getattr(problem, "layout", None)
    prev_layout = prev.layout
    if layout is None or prev_layout is None or prev.x is None:
        raise ShapeMismatch("warm start needs layouts on both sides")
    if layout.n_vars != prev_layout.n_vars or \
            len(layout.spec.agents) != len(prev_layout.spec.agents) or \
            layout.spec.n_steps != prev_layout.spec.n_steps:
        raise ShapeMismatch("previous solution has a different structure")
    spec = layout.spec
    n = spec.n_steps
    xprev = prev.x
    x = np.zeros(layout.n_vars)
    from .vehicle_model import discretize_triple_integrator

    mat = discretize_triple_integrator(spec.dt)
    binaries: dict[int, float] = {}
    for ai in range(len(spec.agents)):
        for k in range(n + 1):
            src = min(k + 1, n)
            if k < n:
                x[layout.state_block(ai, k)] = xprev[layout.state_block(ai, src)]
            else:
                last = xprev[layout.state_block(ai, n)]
                u_last = [xprev[layout.input(ai, n - 1, 0)],
                          xprev[layout.input(ai, n - 1, 1)]]
                out = np.empty(6)
                for axis in range(2):
                    comps = [0 + axis, 2 + axis, 4 + axis]
                    out[comps] = mat.propagate(last[comps], u_last[axis])
                x[layout.state_block(ai, k)] = out
            for which in range(4):
                if k < n:
                    x[layout.fvar(ai, k, which)] = xprev[layout.fvar(ai, src, which)]
                else:
                    shift = x[layout.state(ai, n, 0 if which < 2 else 1)] \
                        - xprev[layout.state(ai, n, 0 if which < 2 else 1)]
                    x[layout.fvar(ai, k, which)] = xprev[layout.fvar(ai, n, which)] + shift
            for r in range(layout.n_regions):
                idx = layout.rho(ai, k, r)
                val = xprev[layout.rho(ai, src, r)]
                x[idx] = val
                binaries[idx] = float(np.round(val))
        for k in range(n):
            src = min(k + 1, n - 1)
            for comp in range(2):
                x[layout.input(ai, k, comp)] = xprev[layout.input(ai, src, comp)]
        for k in range(1, n + 1):
            src = min(k + 1, n)
            for pt in range(5):
                for piece in range(layout.n_pieces):
                    idx = layout.env(ai, k, pt, piece)
                    val = xprev[layout.env(ai, src, pt, piece)]
                    x[idx] = val
                    binaries[idx] = float(np.round(val))
    for pair in layout.pairs:
        for k in range(1, n + 1):
            src = min(k + 1, n)
            for fam in range(4):
                for a in range(4):
                    idx = layout.alpha(pair, k, fam, a)
                    val = xprev[layout.alpha(pair, src, fam, a)]
                    x[idx] = val
                    binaries[idx] = float(np.round(val))
            if pair in layout.slack_pairs:
                dst = layout.slack(pair, k)
                srcs = layout.slack(pair, src)
                x[dst[0]] = xprev[srcs[0]]
                x[dst[1]] = xprev[srcs[1]]
    free = set(int(i) for i in problem.free_binaries())
    binaries = {i: v for i, v in binaries.items() if i in free}
    return WarmStart(binaries=binaries, continuous=x)
