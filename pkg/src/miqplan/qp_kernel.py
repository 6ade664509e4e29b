"""Convex QP kernel: primal active-set method with a feasibility phase.

Solves  min 0.5 x'Qx + c'x  s.t.  A x {<=,=} b,  lb <= x <= ub  for PSD Q.

Design notes
------------
* The Hessian is regularized (H = Q + reg*I) so every equality-constrained
  subproblem is definite; a final polish step re-solves the KKT system of the
  *unregularized* problem on the converged working set when the size permits.
* KKT systems are solved in range space: S = A_W H^-1 A_W' carries an
  incrementally bordered Cholesky factor, and H^-1 applied to constraint rows
  is cached for the lifetime of the problem, which makes re-solves under
  different variable fixings (branch-and-bound nodes) cheap.
* Q is usually (block-)diagonal here (tracking costs plus 2x2 slack blocks);
  H^-1 then costs O(n).  A dense Cholesky fallback covers general PSD Q.
* Feasibility phase: a diagonal-Hessian QP over (x, slacks) that squares the
  violations of the rows violated at the start point; a positive optimum is
  the infeasibility certificate.
* All tie-breaks are by lowest entry id, so results are deterministic.

Working-set entry ids: general row i -> i; lower bound of variable j ->
n_rows + 2j; upper bound -> n_rows + 2j + 1; per-solve fix of variable j ->
n_rows + 2n + j (equality sense).
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp


class NumericalFailure(Exception):
    """The active-set iteration could not make progress."""


class _BlockDiagSolver:
    """H^-1 for a matrix of 1x1 and disjoint adjacent 2x2 blocks."""

    def __init__(self, h: sp.csr_matrix):
        coo = sp.triu(h, k=1).tocoo()
        pairs = {}
        for i, j, v in zip(coo.row, coo.col, coo.data):
            if v == 0.0:
                continue
            if j != i + 1 or i in pairs or (i - 1) in pairs or j in pairs:
                raise ValueError("not block-diagonal(2)")
            pairs[int(i)] = float(v)
        d = h.diagonal()
        if np.any(d <= 0):
            raise ValueError("nonpositive diagonal")
        self.inv_diag = 1.0 / d
        self.idx0 = np.array(sorted(pairs), dtype=int)
        self.idx1 = self.idx0 + 1
        inv = []
        for i in self.idx0:
            v = pairs[int(i)]
            det = d[i] * d[i + 1] - v * v
            if det <= 0:
                raise ValueError("2x2 block not positive definite")
            inv.append((d[i + 1] / det, -v / det, d[i] / det))
        self.inv = np.array(inv) if inv else np.zeros((0, 3))

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        out = rhs * self.inv_diag
        if len(self.idx0):
            r0, r1 = rhs[self.idx0], rhs[self.idx1]
            out[self.idx0] = self.inv[:, 0] * r0 + self.inv[:, 1] * r1
            out[self.idx1] = self.inv[:, 1] * r0 + self.inv[:, 2] * r1
        return out


class _DenseCholSolver:
    def __init__(self, h_dense: np.ndarray):
        self.factor = sla.cho_factor(h_dense, lower=True, check_finite=False)

    def solve(self, rhs):
        return sla.cho_solve(self.factor, rhs, check_finite=False)


class _WorkingSet:
    """Active entries with dense row/H^-1-row caches and a bordered Cholesky."""

    def __init__(self, kernel):
        self.k = kernel
        n = kernel.n
        cap = 32
        self.ids: list[int] = []
        self.pos: dict[int, int] = {}
        self.rows = np.zeros((cap, n))     # entry rows, dense
        self.hrows = np.zeros((cap, n))    # H^-1 applied to entry rows
        self.rhs = np.zeros(cap)
        self.u = np.zeros(cap)             # row . H^-1 c
        self.L = np.zeros((0, 0))

    def __len__(self):
        return len(self.ids)

    def _grow(self):
        cap = self.rows.shape[0] * 2
        for name in ("rows", "hrows"):
            arr = getattr(self, name)
            new = np.zeros((cap, arr.shape[1]))
            new[: arr.shape[0]] = arr
            setattr(self, name, new)
        for name in ("rhs", "u"):
            arr = getattr(self, name)
            new = np.zeros(cap)
            new[: len(arr)] = arr
            setattr(self, name, new)

    def add(self, eid: int) -> bool:
        m = len(self.ids)
        if m == self.rows.shape[0]:
            self._grow()
        idx, val, b_i, _ = self.k._entry_row(eid)
        hinv_new = self.k._hinv_row(eid)
        s_col = self.rows[:m] @ hinv_new
        s_nn = float(val @ hinv_new[idx])
        if m == 0:
            if s_nn <= 1e-14:
                return False
            self.L = np.array([[np.sqrt(s_nn)]])
        else:
            y = sla.solve_triangular(self.L, s_col, lower=True, check_finite=False)
            rem = s_nn - float(y @ y)
            if rem <= 1e-7 * max(1.0, s_nn):
                # the cheap remainder cancels badly when s_nn is inflated by
                # near-zero-Hessian coordinates; recompute it from the
                # projected residual, which cannot go negative, and judge
                # dependence on the residual's own scale, not on s_nn
                w = sla.cho_solve((self.L, True), s_col, check_finite=False)
                resid = np.zeros(self.k.n)
                resid[idx] = val
                resid -= self.rows[:m].T @ w
                rem = float(resid @ self.k.h_solver.solve(resid))
                if rem <= 1e-12 or float(np.max(np.abs(resid))) <= 1e-9:
                    return False  # dependent on the current working set
            newl = np.zeros((m + 1, m + 1))
            newl[:m, :m] = self.L
            newl[m, :m] = y
            newl[m, m] = np.sqrt(rem)
            self.L = newl
        self.rows[m, :] = 0.0
        self.rows[m, idx] = val
        self.hrows[m] = hinv_new
        self.rhs[m] = b_i
        self.u[m] = float(val @ self.k.hinv_c[idx])
        self.ids.append(eid)
        self.pos[eid] = m
        return True

    def remove(self, eid: int):
        self.remove_many([eid])

    def remove_many(self, eids):
        drop = {e for e in eids if e in self.pos}
        if not drop:
            return
        m = len(self.ids)
        keep = [i for i, e in enumerate(self.ids) if e not in drop]
        self.ids = [self.ids[i] for i in keep]
        self.rows[: len(keep)] = self.rows[keep]
        self.hrows[: len(keep)] = self.hrows[keep]
        self.rhs[: len(keep)] = self.rhs[keep]
        self.u[: len(keep)] = self.u[keep]
        self.pos = {e: i for i, e in enumerate(self.ids)}
        self._refactor()

    def _refactor(self):
        m = len(self.ids)
        if m == 0:
            self.L = np.zeros((0, 0))
            return
        s = self.rows[:m] @ self.hrows[:m].T
        s = 0.5 * (s + s.T)
        try:
            self.L = np.linalg.cholesky(s + 1e-13 * np.eye(m))
        except np.linalg.LinAlgError:
            # rebuild entry by entry, shedding whatever went dependent
            ids_now = list(self.ids)
            self.clear()
            for e in ids_now:
                self.add(e)

    def clear(self):
        self.ids = []
        self.pos = {}
        self.L = np.zeros((0, 0))

    def dependence_coeffs(self, eid: int):
        """Coefficients expressing entry eid over the working set (H^-1 metric)."""
        m = len(self.ids)
        if m == 0:
            return np.zeros(0)
        hinv_new = self.k._hinv_row(eid)
        s_col = self.rows[:m] @ hinv_new
        y = sla.cho_solve((self.L, True), s_col, check_finite=False)
        return y


class QPResult:
    def __init__(self, status, x=None, x_free=None, objective=None,
                 objective_reg=None, duals=None, iterations=0,
                 working_set=None, kkt_residual=None, infeasibility=0.0,
                 lam=None):
        self.status = status
        self.x = x
        self.x_free = x_free
        self.objective = objective
        self.objective_reg = objective_reg
        self.duals = duals or {}
        self.iterations = iterations
        self.working_set = working_set or []
        self.kkt_residual = kkt_residual
        self.infeasibility = infeasibility
        self.lam = lam

    def __repr__(self):
        return (f"QPResult({self.status}, obj={self.objective}, "
                f"iters={self.iterations})")


class ConvexQP:
    """One convex QP; supports repeated solves under different variable fixings.

    Inputs use full-variable indexing; variables with lb == ub are eliminated
    internally once.  ``senses`` is one character per row, '<' or '='.
    """

    def __init__(self, Q, c, A, senses, b, lb, ub, *, const: float = 0.0,
                 reg: float = 1e-9, feas_tol: float = 1e-6, name: str = "qp"):
        Q = sp.csr_matrix(Q)
        A = sp.csr_matrix(A)
        c = np.asarray(c, dtype=float)
        b = np.asarray(b, dtype=float)
        lb = np.asarray(lb, dtype=float)
        ub = np.asarray(ub, dtype=float)
        self.n_full = len(c)
        self.const = float(const)
        self.feas_tol = feas_tol
        self.reg = reg
        self.name = name

        fixed = lb == ub
        self.fixed_vals = np.where(fixed, lb, 0.0)
        self.free_idx = np.flatnonzero(~fixed)
        self.n = len(self.free_idx)
        xf = self.fixed_vals
        self.const += 0.5 * float(xf @ (Q @ xf)) + float(c @ xf)
        c_eff = c + Q @ xf
        self.c = c_eff[self.free_idx]
        self.Q = Q[self.free_idx][:, self.free_idx].tocsr()
        self.b = b - A @ xf
        self.A = A[:, self.free_idx].tocsr()
        self.senses = np.asarray(list(senses)) if len(senses) else np.asarray([], dtype="<U1")
        self.lb = lb[self.free_idx]
        self.ub = ub[self.free_idx]
        self.n_rows = A.shape[0]

        # rows without free support are constants; verify and deactivate them
        support = np.diff(self.A.indptr) > 0
        self.row_live = support.copy()
        self.trivially_infeasible = False
        for i in np.flatnonzero(~support):
            resid = self.b[i]
            bad_lt = self.senses[i] == "<" and resid < -feas_tol
            bad_eq = self.senses[i] == "=" and abs(resid) > feas_tol
            if bad_lt or bad_eq:
                self.trivially_infeasible = True

        norms = np.sqrt(np.asarray(self.A.multiply(self.A).sum(axis=1)).ravel())
        norms[norms == 0] = 1.0
        self.row_scale = 1.0 / norms
        self.A = (sp.diags(self.row_scale) @ self.A).tocsr()
        self.b = self.b * self.row_scale
        # deterministic hair-thin slack on inequality rows breaks ties at
        # degenerate vertices; far below the feasibility tolerance
        ineq_rows = np.asarray([s == "<" for s in self.senses], dtype=bool)
        if ineq_rows.any():
            jitter = 1e-10 * (1.0 + (np.arange(self.n_rows) % 97) / 97.0)
            self.b = self.b + np.where(ineq_rows, jitter, 0.0)

        h = (self.Q + self.reg * sp.eye(self.n)).tocsr()
        try:
            self.h_solver = _BlockDiagSolver(h)
        except ValueError:
            self.h_solver = _DenseCholSolver(h.toarray())
        self.hinv_c = self.h_solver.solve(self.c)
        self._hinv_cache: dict[int, np.ndarray] = {}
        self._live_lt = (self.senses == "<") & self.row_live
        self._live_eq = (self.senses == "=") & self.row_live
        self.eq_ids = [int(i) for i in np.flatnonzero(self._live_eq)]
        self.ws = _WorkingSet(self)
        self._fix_vals: dict[int, float] = {}
        self._perturbed: set[int] = set()

    # --- entry helpers ------------------------------------------------------

    def _entry_row(self, eid: int):
        nr = self.n_rows
        if eid < nr:
            sl = slice(self.A.indptr[eid], self.A.indptr[eid + 1])
            return self.A.indices[sl], self.A.data[sl], self.b[eid], self.senses[eid]
        j = eid - nr
        if j < 2 * self.n:
            var, is_ub = divmod(j, 2)
            if is_ub:
                return np.array([var]), np.array([1.0]), self.ub[var], "<"
            return np.array([var]), np.array([-1.0]), -self.lb[var], "<"
        var = j - 2 * self.n
        return np.array([var]), np.array([1.0]), self._fix_vals[var], "="

    def _hinv_row(self, eid: int):
        got = self._hinv_cache.get(eid)
        if got is not None:
            return got
        idx, val, _, _ = self._entry_row(eid)
        rhs = np.zeros(self.n)
        rhs[idx] = val
        out = self.h_solver.solve(rhs)
        self._hinv_cache[eid] = out  # fix rows differ only in rhs, safe to cache
        return out

    # --- public solve -------------------------------------------------------

    def solve(self, fixes: dict[int, float] | None = None, x0=None, w0=None,
              max_iter: int | None = None, polish: bool = False) -> QPResult:
        """Solve under optional per-call fixings (full-variable index -> value).

        x0 warm-starts the primal point (full-variable space) and w0 the
        working set; stale entries in w0 are dropped silently.
        """
        if self.trivially_infeasible:
            return QPResult(status="infeasible", infeasibility=np.inf)
        self._fix_vals = {}
        fix_ids = []
        if fixes:
            pos_of = self._full_to_free()
            for var_full in sorted(fixes):
                j = pos_of.get(int(var_full))
                if j is None:
                    if abs(fixes[var_full] - self.fixed_vals[int(var_full)]) > 1e-9:
                        return QPResult(status="infeasible", infeasibility=np.inf)
                    continue
                self._fix_vals[j] = float(fixes[var_full])
                fix_ids.append(self.n_rows + 2 * self.n + j)
        max_iter = max_iter or (200 + 6 * self.n)

        if x0 is not None:
            x = np.asarray(x0, dtype=float)[self.free_idx].copy()
        else:
            x = np.zeros(self.n)
        x = np.clip(x, self.lb, self.ub)
        for j, v in self._fix_vals.items():
            x[j] = v

        want = list(self.eq_ids) + fix_ids
        if w0:
            # the active-set invariant needs working rows tight at the start
            # point; inherited entries that the clamp un-tightened must drop
            fixed_vars = set(self._fix_vals)
            for eid in w0:
                if eid in self.eq_ids or eid >= self.n_rows + 2 * self.n:
                    continue
                if eid >= self.n_rows and (eid - self.n_rows) // 2 in fixed_vars:
                    continue
                if eid < self.n_rows and not self.row_live[eid]:
                    continue
                idx, val, b_i, _ = self._entry_row(eid)
                if abs(float(val @ x[idx]) - b_i) > 1e-7 * (1.0 + abs(b_i)):
                    continue
                want.append(eid)
        self._update_working(want)

        if self._violations(x) > self.feas_tol:
            x, feasible, certificate = self._phase1(x)
            if not feasible:
                return QPResult(status="infeasible", infeasibility=certificate)
            self._set_working(list(self.eq_ids) + fix_ids
                              + self._tight_entries(x))
        try:
            result = self._phase2(x, max_iter)
        except NumericalFailure:
            # one cold retry with a minimal working set
            self._set_working(list(self.eq_ids) + fix_ids)
            if self._violations(x) > self.feas_tol:
                x, feasible, certificate = self._phase1(x)
                if not feasible:
                    return QPResult(status="infeasible", infeasibility=certificate)
            result = self._phase2(x, 4 * max_iter)
        if result.status == "optimal" and polish:
            self._polish(result)
        return result

    def _full_to_free(self):
        cache = getattr(self, "_f2f", None)
        if cache is None:
            cache = {int(f): i for i, f in enumerate(self.free_idx)}
            self._f2f = cache
        return cache

    # --- internals ------------------------------------------------------------

    def _set_working(self, ids):
        self.ws.clear()
        seen = set()
        for e in ids:
            if e not in seen:
                seen.add(e)
                self.ws.add(e)

    def _update_working(self, want):
        """Diff the current working set toward `want` instead of rebuilding.

        Fix rows keep their entry id when only the pinned value changes, so a
        stale right-hand side also forces a remove+add.
        """
        want_unique = []
        seen = set()
        for e in want:
            if e not in seen:
                seen.add(e)
                want_unique.append(e)
        fix_base = self.n_rows + 2 * self.n
        removals = []
        for pos_i, e in enumerate(self.ws.ids):
            if e not in seen:
                removals.append(e)
            elif e >= fix_base and self.ws.rhs[pos_i] != self._fix_vals[e - fix_base]:
                removals.append(e)
        additions = [e for e in want_unique
                     if e not in self.ws.pos or e in removals]
        if len(removals) + len(additions) > max(4, len(want_unique) // 2):
            self._set_working(want_unique)
            return
        if removals:
            self.ws.remove_many(removals)
        for e in additions:
            self.ws.add(e)

    def _tight_entries(self, x):
        out = []
        r = self.b - self.A @ x
        tight_rows = np.flatnonzero(self._live_lt & (np.abs(r) <= 1e-8))
        out.extend(int(i) for i in tight_rows)
        scale = 1.0 + np.abs(x)
        at_lb = np.flatnonzero(np.isfinite(self.lb) & (x - self.lb <= 1e-9 * scale))
        at_ub = np.flatnonzero(np.isfinite(self.ub) & (self.ub - x <= 1e-9 * scale))
        out.extend(int(self.n_rows + 2 * j) for j in at_lb if j not in self._fix_vals)
        out.extend(int(self.n_rows + 2 * j + 1) for j in at_ub if j not in self._fix_vals)
        return out

    def _violations(self, x) -> float:
        r = self.A @ x - self.b
        worst = 0.0
        if self._live_lt.any():
            worst = max(worst, float(np.max(r[self._live_lt], initial=0.0)))
        if self._live_eq.any():
            worst = max(worst, float(np.max(np.abs(r[self._live_eq]), initial=0.0)))
        worst = max(worst, float(np.max(self.lb - x, initial=0.0)))
        worst = max(worst, float(np.max(x - self.ub, initial=0.0)))
        for j, v in self._fix_vals.items():
            worst = max(worst, abs(x[j] - v))
        return worst

    def _phase1(self, x):
        """Minimize the sum of squared violations of the rows violated at x."""
        x = np.clip(x, self.lb, self.ub)
        for j, v in self._fix_vals.items():
            x[j] = v
        r = self.A @ x - self.b
        bad_lt = [int(i) for i in np.flatnonzero(self._live_lt & (r > self.feas_tol))]
        bad_eq = [int(i) for i in np.flatnonzero(self._live_eq & (np.abs(r) > self.feas_tol))]
        if not bad_lt and not bad_eq:
            return x, True, 0.0
        ns = len(bad_lt) + len(bad_eq)
        n1 = self.n + ns
        acoo = self.A.tocoo()
        keep = self.row_live[acoo.row]
        rows = list(acoo.row[keep])
        cols = list(acoo.col[keep])
        vals = list(acoo.data[keep])
        for k, i in enumerate(bad_lt + bad_eq):
            rows.append(i)
            cols.append(self.n + k)
            vals.append(-1.0)
        a1 = sp.coo_matrix((vals, (rows, cols)), shape=(self.n_rows, n1)).tocsr()
        q1 = sp.diags([0.0] * self.n + [2.0] * ns)
        lb1 = np.concatenate([self.lb, np.full(ns, -np.inf)])
        ub1 = np.concatenate([self.ub, np.full(ns, np.inf)])
        lb1[self.n: self.n + len(bad_lt)] = 0.0
        sub = ConvexQP(q1, np.zeros(n1), a1, "".join(self.senses), self.b.copy(),
                       lb1, ub1, reg=max(self.reg, 1e-9), feas_tol=self.feas_tol,
                       name=self.name + "/p1")
        sub.row_live = self.row_live.copy()
        sub._live_lt = self._live_lt.copy()
        sub._live_eq = self._live_eq.copy()
        sub.eq_ids = [int(i) for i in np.flatnonzero(sub._live_eq)]
        s0 = np.empty(ns)
        for k, i in enumerate(bad_lt):
            s0[k] = max(r[i], 0.0) + 1e-12
        for k, i in enumerate(bad_eq):
            s0[len(bad_lt) + k] = r[i]
        x1_full = np.concatenate([x, s0])
        fixes_sub = {int(j): v for j, v in self._fix_vals.items()}
        try:
            res = sub.solve(fixes=fixes_sub, x0=x1_full)
        except NumericalFailure:
            return x, False, np.inf
        if res.status != "optimal":
            return x, False, np.inf
        worst = float(np.sqrt(max(res.objective, 0.0)))
        if worst > 10 * self.feas_tol:
            return x, False, worst
        return res.x_free[: self.n], True, 0.0

    def _phase2(self, x, max_iter) -> QPResult:
        iters = 0
        stall = 0
        last_obj = np.inf
        lam = np.zeros(0)
        while True:
            iters += 1
            if iters > max_iter:
                raise NumericalFailure(f"{self.name}: iteration limit {max_iter}")
            x_star, lam = self._eqp()
            p = x_star - x
            pnorm = float(np.max(np.abs(p), initial=0.0))
            if pnorm <= 1e-9 * (1.0 + float(np.max(np.abs(x), initial=0.0))):
                worst, worst_eid = -1e-8, None
                for eid, l in zip(self.ws.ids, lam):
                    if eid in self.eq_ids or eid >= self.n_rows + 2 * self.n:
                        continue  # equality senses: multiplier sign free
                    if eid < self.n_rows and self.senses[eid] == "=":
                        continue
                    if l < worst:
                        worst, worst_eid = l, eid
                    if stall > 40 and l < -1e-8:
                        worst, worst_eid = l, eid  # Bland mode: lowest index
                        break
                if worst_eid is None:
                    return self._finish(x, lam, iters)
                self.ws.remove(worst_eid)
                continue
            alpha, blocker = self._ratio_test(x, p)
            x = x + min(alpha, 1.0) * p
            obj = self._objective_at(x)
            if alpha <= 1e-12 and obj >= last_obj - 1e-12:
                stall += 1
            else:
                stall = 0
            last_obj = obj
            if alpha < 1.0 and blocker is not None:
                self._activate(x, p, blocker, lam)

    def _activate(self, x, p, blocker, lam):
        """Enter the blocking entry, exchanging out one inequality if dependent.

        On dependence, the leaving entry is picked by the dual ratio test over
        positive dependence weights so multipliers stay sign-feasible; rows
        that still cannot enter get a one-time hair-thin rhs relaxation, which
        removes the degenerate vertex instead of looping on it.
        """
        skip = set()
        while blocker is not None:
            if self.ws.add(blocker):
                return
            coeffs = self.ws.dependence_coeffs(blocker)
            best_theta, leave = np.inf, None
            for eid, w, l in zip(self.ws.ids, coeffs, lam):
                if w <= 1e-9:
                    continue
                _, _, _, sense = self._entry_row(eid)
                if sense == "=":
                    continue
                theta = l / w
                if theta < best_theta - 1e-15:
                    best_theta, leave = theta, eid
            if leave is not None:
                self.ws.remove(leave)
                if self.ws.add(blocker):
                    return
            if blocker not in self._perturbed:
                # degenerate and dependent: relax this row imperceptibly
                self._perturbed.add(blocker)
                if blocker < self.n_rows:
                    self.b[blocker] += 2e-9 * (1.0 + (blocker % 13) / 13.0)
                elif blocker < self.n_rows + 2 * self.n:
                    var, is_ub = divmod(blocker - self.n_rows, 2)
                    delta = 2e-9 * (1.0 + (blocker % 13) / 13.0)
                    if is_ub:
                        self.ub[var] += delta
                    else:
                        self.lb[var] -= delta
            skip.add(blocker)
            _, blocker = self._ratio_test(x, p, skip=skip)

    def _eqp(self):
        m = len(self.ws)
        if m == 0:
            return -self.hinv_c, np.zeros(0)
        rhs = -(self.ws.rhs[:m] + self.ws.u[:m])
        lam = sla.cho_solve((self.ws.L, True), rhs, check_finite=False)
        x = -self.hinv_c - self.ws.hrows[:m].T @ lam
        # S mixes rows on regularized (tiny-Hessian) and stiff coordinates, so
        # its factor can be ill-conditioned; refine the constraint residual
        for _ in range(2):
            g = self.ws.rows[:m] @ x - self.ws.rhs[:m]
            gn = float(np.max(np.abs(g), initial=0.0))
            if gn <= 1e-12:
                break
            dlam = sla.cho_solve((self.ws.L, True), g, check_finite=False)
            lam += dlam
            x -= self.ws.hrows[:m].T @ dlam
        return x, lam

    def _ratio_test(self, x, p, skip=frozenset()):
        best_t, best_id = 1.0, None
        ap = self.A @ p
        r = self.b - self.A @ x
        cand = self._live_lt & (ap > 1e-11)
        if cand.any():
            idxs = np.flatnonzero(cand)
            ts = np.maximum(r[idxs], 0.0) / ap[idxs]
            for i, t in zip(idxs, ts):
                eid = int(i)
                if eid in self.ws.pos or eid in skip:
                    continue
                if t < best_t - 1e-13:
                    best_t, best_id = float(t), eid
        for j in np.flatnonzero(p > 1e-11):
            j = int(j)
            if not np.isfinite(self.ub[j]) or j in self._fix_vals:
                continue
            eid = self.n_rows + 2 * j + 1
            if eid in self.ws.pos or eid in skip:
                continue
            t = max(self.ub[j] - x[j], 0.0) / p[j]
            if t < best_t - 1e-13:
                best_t, best_id = float(t), eid
        for j in np.flatnonzero(p < -1e-11):
            j = int(j)
            if not np.isfinite(self.lb[j]) or j in self._fix_vals:
                continue
            eid = self.n_rows + 2 * j
            if eid in self.ws.pos or eid in skip:
                continue
            t = max(x[j] - self.lb[j], 0.0) / (-p[j])
            if t < best_t - 1e-13:
                best_t, best_id = float(t), eid
        return best_t, best_id

    def _objective_at(self, x):
        return 0.5 * float(x @ (self.Q @ x)) + float(self.c @ x) + self.const

    def _finish(self, x, lam, iters) -> QPResult:
        # degenerate exchanges can step past a row they could not activate; a
        # converged point must still be feasible or the solve is unreliable
        viol = self._violations(x)
        if viol > 2 * self.feas_tol:
            raise NumericalFailure(f"{self.name}: converged point violates "
                                   f"constraints by {viol:.2e}")
        obj = self._objective_at(x)
        obj_reg = obj + 0.5 * self.reg * float(x @ x)
        x_full = self.fixed_vals.copy()
        x_full[self.free_idx] = x
        duals = {eid: float(l * self.row_scale[eid])
                 for eid, l in zip(self.ws.ids, lam) if eid < self.n_rows}
        # the KKT residual is only computed on demand (polish path); node
        # relaxations inside branch-and-bound skip it for speed
        return QPResult(status="optimal", x=x_full, x_free=x.copy(),
                        objective=obj, objective_reg=obj_reg, duals=duals,
                        iterations=iters, working_set=list(self.ws.ids),
                        kkt_residual=None, lam=lam.copy())

    def _kkt_residual(self, x, lam, ws_ids):
        g = self.Q @ x + self.c
        for eid, l in zip(ws_ids, lam):
            idx, val, _, _ = self._entry_row(eid)
            g[idx] += l * val
        return max(float(np.max(np.abs(g), initial=0.0)), self._violations(x))

    def _polish(self, res: QPResult):
        """Re-solve the unregularized KKT system on the final working set."""
        if res.kkt_residual is None and res.lam is not None:
            res.kkt_residual = self._kkt_residual(res.x_free, res.lam,
                                                  res.working_set)
        m = len(res.working_set)
        if self.n + m > 800:
            return
        kkt = np.zeros((self.n + m, self.n + m))
        kkt[: self.n, : self.n] = self.Q.toarray()
        rhs = np.zeros(self.n + m)
        rhs[: self.n] = -self.c
        for i, eid in enumerate(res.working_set):
            idx, val, b_i, _ = self._entry_row(eid)
            kkt[self.n + i, idx] = val
            kkt[idx, self.n + i] = val
            rhs[self.n + i] = b_i
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        x, lam = sol[: self.n], sol[self.n:]
        if self._violations(x) > self.feas_tol:
            return
        for eid, l in zip(res.working_set, lam):
            _, _, _, sense = self._entry_row(eid)
            if sense == "<" and l < -1e-7:
                return
        kkt_res = self._kkt_residual(x, lam, res.working_set)
        if kkt_res >= res.kkt_residual:
            return
        res.x_free = x
        x_full = self.fixed_vals.copy()
        x_full[self.free_idx] = x
        res.x = x_full
        res.objective = self._objective_at(x)
        res.kkt_residual = kkt_res
        res.duals = {eid: float(l * self.row_scale[eid])
                     for eid, l in zip(res.working_set, lam) if eid < self.n_rows}


def solve_convex_qp(Q, c, A_eq=None, b_eq=None, A_in=None, b_in=None,
                    lb=None, ub=None, fixes=None, const: float = 0.0) -> QPResult:
    """Build a ConvexQP from separate equality/inequality blocks, solve, polish."""
    n = len(c)
    blocks, senses, rhs = [], "", []
    if A_eq is not None and np.size(b_eq):
        blocks.append(sp.csr_matrix(A_eq))
        senses += "=" * blocks[-1].shape[0]
        rhs.append(np.asarray(b_eq, dtype=float))
    if A_in is not None and np.size(b_in):
        blocks.append(sp.csr_matrix(A_in))
        senses += "<" * blocks[-1].shape[0]
        rhs.append(np.asarray(b_in, dtype=float))
    if blocks:
        A = sp.vstack(blocks).tocsr()
        b = np.concatenate(rhs)
    else:
        A = sp.csr_matrix((0, n))
        b = np.zeros(0)
    lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float)
    ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float)
    qp = ConvexQP(Q, c, A, senses, b, lb, ub, const=const)
    return qp.solve(fixes=fixes, polish=True)
