import numpy as np
import pytest

from expomap.cntk import KernelBlock
from expomap.errors import Divergence, IndexMismatch, NotPositiveDefinite
from expomap.solver import (
    Preconditioner,
    build_preconditioner,
    eigenpro_solve,
    predict,
    solve_exact,
)


def principal_block(k):
    n = k.shape[0]
    idx = np.arange(n)
    return KernelBlock(rows=idx, cols=idx, entries=k)


def random_psd(n, seed, cond=None):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = rng.uniform(0.5, 5.0, size=n) if cond is None else np.geomspace(cond, 1.0, n)
    return (q * lam) @ q.T


class TestSolveExact:
    def test_scalar_system(self):
        state = solve_exact(principal_block(np.array([[4.0]])), [2.0], jitter=0.0)
        assert state.alpha[0] == pytest.approx(0.5)
        assert state.final_residual <= 1e-12

    def test_identity_kernel(self):
        y = np.array([1.0, -2.0, 3.0])
        state = solve_exact(principal_block(np.eye(3)), y, jitter=0.0)
        assert np.allclose(state.alpha, y)

    def test_random_psd_residual(self):
        k = random_psd(20, 0)
        rng = np.random.default_rng(1)
        y = rng.standard_normal(20)
        state = solve_exact(principal_block(k), y, jitter=0.0)
        assert state.final_residual <= 1e-8

    def test_default_jitter_reported_against_raw_matrix(self):
        k = random_psd(10, 2)
        y = np.ones(10)
        state = solve_exact(principal_block(k), y)  # default jitter
        # residual is measured against K (not K + jitter I), so it is small
        # but nonzero
        assert 0 <= state.final_residual < 1e-4

    def test_not_positive_definite_after_ladder(self):
        k = -10.0 * np.eye(4)
        with pytest.raises(NotPositiveDefinite):
            solve_exact(principal_block(k), np.ones(4), jitter=1e-12)

    def test_requires_principal_block(self):
        block = KernelBlock(rows=[0, 1], cols=[2, 3], entries=np.eye(2))
        with pytest.raises(IndexMismatch):
            solve_exact(block, np.ones(2))


class TestBuildPreconditioner:
    def test_s_zero_identity_action(self):
        k = random_psd(8, 3)
        pre = build_preconditioner(principal_block(k), s=0, safety=1.5)
        lam_top = np.linalg.eigvalsh(k)[-1]
        assert pre.s == 0
        assert pre.step_size == pytest.approx(1.5 / lam_top, rel=1e-10)
        v = np.arange(8.0)
        assert np.array_equal(pre.apply(v), v)

    def test_diagonal_hand_oracle(self):
        k = np.diag([4.0, 2.0, 1.0])
        pre = build_preconditioner(principal_block(k), s=1, safety=1.5)
        assert pre.damping == pytest.approx(2.0)
        assert pre.step_size == pytest.approx(1.5 / 2.0)
        for v, expected in [
            (np.array([1.0, 0.0, 0.0]), np.array([0.5, 0.0, 0.0])),
            (np.array([0.0, 1.0, 0.0]), np.array([0.0, 1.0, 0.0])),
            (np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, 1.0])),
        ]:
            assert np.allclose(pre.apply(v), expected, atol=1e-12)

    def test_top_eigenvector_damped_to_ratio(self):
        k = random_psd(12, 4)
        lam, vec = np.linalg.eigh(k)
        e1 = vec[:, -1]
        pre = build_preconditioner(principal_block(k), s=3)
        expected = (pre.damping / lam[-1]) * e1
        assert np.allclose(pre.apply(e1), expected, atol=1e-10)

    def test_action_symmetric(self):
        k = random_psd(15, 5)
        pre = build_preconditioner(principal_block(k), s=4)
        rng = np.random.default_rng(6)
        for _ in range(5):
            u = rng.standard_normal(15)
            v = rng.standard_normal(15)
            assert np.dot(pre.apply(u), v) == pytest.approx(np.dot(u, pre.apply(v)), abs=1e-10)

    def test_tiny_eigenvalues_excluded(self):
        lam = np.array([1.0, 0.5, 1e-14, 1e-15])
        k = np.diag(lam)
        pre = build_preconditioner(principal_block(k), s=3)
        # 1e-14 and 1e-15 are below 1e-12 * lambda_1 and must be dropped
        assert pre.s == 2

    def test_s_bounds(self):
        k = random_psd(5, 7)
        with pytest.raises(ValueError):
            build_preconditioner(principal_block(k), s=5)


class TestEigenproSolve:
    def test_zero_target_stays_zero(self):
        k = random_psd(10, 8)
        pre = build_preconditioner(principal_block(k), s=2)
        state = eigenpro_solve(principal_block(k), np.zeros(10), pre, epochs=20)
        assert np.all(state.alpha == 0.0)
        assert state.final_residual == 0.0

    def test_identity_kernel_one_step(self):
        k = np.eye(6)
        y = np.arange(1.0, 7.0)
        pre = Preconditioner(
            eigenvalues=np.empty(0), eigenvectors=np.empty((6, 0)), damping=1.0, step_size=1.0
        )
        state = eigenpro_solve(principal_block(k), y, pre, epochs=1)
        assert np.allclose(state.alpha, y)
        assert state.final_residual <= 1e-14

    def test_matches_exact_solve(self):
        k = random_psd(30, 9, cond=50.0)
        rng = np.random.default_rng(10)
        y = rng.standard_normal(30)
        exact = solve_exact(principal_block(k), y, jitter=0.0)
        pre = build_preconditioner(principal_block(k), s=10, safety=1.5)
        it = eigenpro_solve(principal_block(k), y, pre, epochs=350)
        assert np.linalg.norm(it.alpha - exact.alpha) / np.linalg.norm(exact.alpha) <= 1e-3

    def test_residual_trace_non_increasing(self):
        k = random_psd(25, 11, cond=200.0)
        rng = np.random.default_rng(12)
        y = rng.standard_normal(25)
        pre = build_preconditioner(principal_block(k), s=5, safety=1.5)
        state = eigenpro_solve(principal_block(k), y, pre, epochs=100)
        trace = np.array(state.residual_trace)
        assert len(trace) == 100
        assert np.all(trace[1:] <= trace[:-1] + 1e-12)

    def test_fixed_point(self):
        k = random_psd(12, 13)
        rng = np.random.default_rng(14)
        alpha_star = rng.standard_normal(12)
        y = k @ alpha_star
        pre = build_preconditioner(principal_block(k), s=3)
        step = alpha_star - pre.step_size * pre.apply(k @ alpha_star - y)
        assert np.allclose(step, alpha_star, atol=1e-12)

    def test_s_zero_equals_plain_gradient_descent(self):
        k = random_psd(9, 15)
        rng = np.random.default_rng(16)
        y = rng.standard_normal(9)
        pre = build_preconditioner(principal_block(k), s=0, safety=1.5)
        state = eigenpro_solve(principal_block(k), y, pre, epochs=40)
        alpha = np.zeros(9)
        for _ in range(40):
            alpha = alpha - pre.step_size * (k @ alpha - y)
        assert np.array_equal(state.alpha, alpha)

    def test_divergence_aborts_with_trace(self):
        k = random_psd(8, 17)
        lam_top = np.linalg.eigvalsh(k)[-1]
        pre = Preconditioner(
            eigenvalues=np.empty(0),
            eigenvectors=np.empty((8, 0)),
            damping=lam_top,
            step_size=10.0 / lam_top,  # far beyond the stability limit
        )
        with pytest.raises(Divergence) as exc:
            eigenpro_solve(principal_block(k), np.ones(8), pre, epochs=200)
        assert exc.value.residual_trace

    def test_state_serializable(self):
        import json

        k = random_psd(5, 18)
        pre = build_preconditioner(principal_block(k), s=1)
        state = eigenpro_solve(principal_block(k), np.ones(5), pre, epochs=3)
        doc = json.dumps(state.to_dict(config_echo={"epochs": 3}))
        assert "residual_trace" in doc


class TestPredict:
    def test_zero_alpha_zero_map(self):
        k = random_psd(6, 19)
        block = KernelBlock(rows=np.arange(10, 16), cols=np.arange(6), entries=np.ones((6, 6)))
        state = solve_exact(principal_block(k), np.zeros(6), jitter=0.0)
        assert np.all(predict(block, state) == 0.0)

    def test_single_point_composition(self):
        k_tt = np.array([[2.5]])
        y = np.array([1.0])
        state = solve_exact(principal_block(k_tt), y, jitter=0.0)
        k_pt = KernelBlock(rows=np.array([5, 6]), cols=np.array([0]),
                           entries=np.array([[1.25], [0.5]]))
        out = predict(k_pt, state)
        assert out == pytest.approx([1.25 / 2.5, 0.5 / 2.5])

    def test_matches_summation_loop(self):
        rng = np.random.default_rng(20)
        k = random_psd(7, 21)
        y = rng.standard_normal(7)
        state = solve_exact(principal_block(k), y, jitter=0.0)
        entries = rng.standard_normal((4, 7))
        block = KernelBlock(rows=np.arange(100, 104), cols=np.arange(7), entries=entries)
        out = predict(block, state)
        for i in range(4):
            acc = sum(entries[i, j] * state.alpha[j] for j in range(7))
            assert out[i] == pytest.approx(acc, rel=1e-12)

    def test_index_mismatch(self):
        k = random_psd(5, 22)
        state = solve_exact(principal_block(k), np.ones(5), jitter=0.0)
        block = KernelBlock(rows=np.arange(3), cols=np.arange(1, 6), entries=np.zeros((3, 5)))
        with pytest.raises(IndexMismatch):
            predict(block, state)

    def test_reproduces_targets_at_observed_pixels(self):
        k = random_psd(12, 23)
        rng = np.random.default_rng(24)
        y = rng.standard_normal(12)
        state = solve_exact(principal_block(k), y, jitter=0.0)
        block = KernelBlock(rows=np.arange(12), cols=np.arange(12), entries=k)
        out = predict(block, state)
        assert np.linalg.norm(out - y) / np.linalg.norm(y) <= 1e-6
