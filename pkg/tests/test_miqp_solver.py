import numpy as np
import pytest
import scipy.sparse as sp

from miqplan.miqp_solver import (
    CapExceeded,
    ShapeMismatch,
    SolverOptions,
    WarmStart,
    brute_force_reference,
    solve_miqp,
    warm_start_from_previous,
)
from miqplan.problem_builder import MIQPProblem


def random_miqp(rng, n_cont_max=40, n_bin_max=12, m_rows_max=14):
    """Random convex MIQP: PD cost on the continuous part, big-M style rows.

    Binary counts are skewed low (min of two draws) so brute-force reference
    enumeration stays affordable while the cap still gets exercised.
    """
    n_cont = int(rng.integers(2, n_cont_max + 1))
    n_bin = int(min(rng.integers(0, n_bin_max + 1), rng.integers(0, n_bin_max + 1)))
    n = n_cont + n_bin
    f = rng.normal(size=(n_cont, n_cont)) / np.sqrt(n_cont)
    q_cont = f.T @ f + 0.2 * np.eye(n_cont)
    Q = np.zeros((n, n))
    Q[:n_cont, :n_cont] = 2.0 * q_cont
    target = rng.uniform(-1.5, 1.5, n_cont)
    c = np.zeros(n)
    c[:n_cont] = -2.0 * q_cont @ target
    const = float(target @ q_cont @ target)
    m_rows = int(rng.integers(1, m_rows_max + 1))
    x0 = rng.uniform(-1.0, 1.0, n_cont)
    b0 = rng.integers(0, 2, n_bin).astype(float)
    z0 = np.concatenate([x0, b0])
    rows = []
    rhs = []
    for _ in range(m_rows):
        row = np.zeros(n)
        support = rng.choice(n_cont, size=min(4, n_cont), replace=False)
        row[support] = rng.normal(size=len(support))
        if n_bin and rng.random() < 0.7:
            bsup = rng.choice(n_bin, size=min(2, n_bin), replace=False)
            row[n_cont + bsup] = rng.choice([-4.0, 4.0], size=len(bsup))
        rows.append(row)
        rhs.append(float(row @ z0 + rng.uniform(0.05, 1.5)))
    A = np.array(rows)
    lb = np.concatenate([np.full(n_cont, -3.0), np.zeros(n_bin)])
    ub = np.concatenate([np.full(n_cont, 3.0), np.ones(n_bin)])
    return MIQPProblem.from_arrays(Q, c, A, "<" * m_rows, rhs, lb, ub,
                                   binary_idx=np.arange(n_cont, n), const=const)


class TestBruteForce:
    def test_zero_binaries_single_qp(self):
        rng = np.random.default_rng(0)
        prob = random_miqp(rng, n_bin_max=0)
        res = brute_force_reference(prob)
        assert res.status == "Optimal"
        assert res.node_count == 1

    def test_infeasible_by_construction(self):
        Q = np.eye(2) * 2
        A = np.array([[1.0, 0.0], [-1.0, 0.0]])
        prob = MIQPProblem.from_arrays(Q, np.zeros(2), A, "<<",
                                       [-1.0, -1.0], [-5, 0], [5, 1],
                                       binary_idx=[1])
        res = brute_force_reference(prob)
        assert res.status == "Infeasible"

    def test_cap_enforced(self):
        rng = np.random.default_rng(1)
        prob = random_miqp(rng, n_bin_max=12)
        while len(prob.free_binaries()) < 5:
            prob = random_miqp(rng, n_bin_max=12)
        with pytest.raises(CapExceeded):
            brute_force_reference(prob, cap=3)


class TestSolveMiqp:
    def test_six_binary_toys_match_brute_force(self):
        rng = np.random.default_rng(42)
        for trial in range(20):
            prob = random_miqp(rng, n_cont_max=10, n_bin_max=6, m_rows_max=8)
            bf = brute_force_reference(prob)
            bb = solve_miqp(prob)
            assert bb.status == bf.status, f"trial {trial}"
            if bf.status == "Optimal":
                scale = max(1.0, abs(bf.objective))
                assert abs(bb.objective - bf.objective) <= 1e-6 * scale, f"trial {trial}"

    def test_randomized_agreement_suite(self):
        rng = np.random.default_rng(777)
        for trial in range(30):
            prob = random_miqp(rng)
            bf = brute_force_reference(prob)
            bb = solve_miqp(prob)
            assert bb.status == bf.status, f"trial {trial}"
            if bf.status == "Optimal":
                scale = max(1.0, abs(bf.objective))
                assert abs(bb.objective - bf.objective) <= 1e-6 * scale, \
                    f"trial {trial}: {bb.objective} vs {bf.objective}"

    def test_warm_start_with_full_assignment_returns_fast(self):
        rng = np.random.default_rng(5)
        prob = random_miqp(rng, n_cont_max=8, n_bin_max=6)
        while len(prob.free_binaries()) == 0:
            prob = random_miqp(rng, n_cont_max=8, n_bin_max=6)
        ref = solve_miqp(prob)
        assert ref.status == "Optimal"
        warm = WarmStart(binaries={i: ref.binary_assignment[i]
                                   for i in map(int, prob.free_binaries())},
                         continuous=ref.x)
        again = solve_miqp(prob, warm=warm)
        assert again.status == "Optimal"
        assert again.objective == pytest.approx(ref.objective, abs=1e-8)
        # the warm incumbent prunes the tree down to the root relaxation
        assert again.node_count <= max(3, ref.node_count)

    def test_gap_certificate_on_node_limit(self):
        rng = np.random.default_rng(9)
        prob = random_miqp(rng, n_cont_max=20, n_bin_max=10)
        while len(prob.free_binaries()) < 8:
            prob = random_miqp(rng, n_cont_max=20, n_bin_max=10)
        res = solve_miqp(prob, options=SolverOptions(max_nodes=2))
        if res.status == "Feasible":
            assert res.objective - res.lower_bound <= res.gap + 1e-12
        else:
            assert res.status in ("Optimal", "TimeLimit")

    def test_determinism(self):
        rng = np.random.default_rng(12)
        prob = random_miqp(rng)
        a = solve_miqp(prob)
        b = solve_miqp(prob)
        assert a.status == b.status
        if a.status == "Optimal":
            assert a.objective == b.objective
            assert a.node_count == b.node_count
            assert np.array_equal(a.x, b.x)

    def test_infeasible_root(self):
        Q = np.eye(1) * 2
        A = np.array([[1.0], [-1.0]])
        prob = MIQPProblem.from_arrays(Q, np.zeros(1), A, "<<", [-2.0, -2.0],
                                       [-5], [5], binary_idx=[])
        res = solve_miqp(prob)
        assert res.status == "Infeasible"


class TestWarmStartShift:
    def test_shape_mismatch_without_layout(self):
        rng = np.random.default_rng(2)
        prob = random_miqp(rng)
        res = solve_miqp(prob)
        with pytest.raises(ShapeMismatch):
            warm_start_from_previous(res, prob)
