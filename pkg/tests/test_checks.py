"""Self-verification harness tests.

A gradient checker that cannot catch a wrong gradient is worse than
none, so the harness itself is tested both ways: correct ops pass,
deliberately corrupted gradients and solvers fail.
"""

import numpy as np
import pytest

import tmatch.autodiff as ad
import tmatch.checks as ck
import tmatch.matchers as mt
from tmatch.autodiff import Tensor, make_op


class TestGradcheck:
    def test_passes_on_correct_gradient(self):
        rng = np.random.default_rng(0)
        t = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        report = ck.gradcheck(lambda: ad.tensor_sum(ad.mul(t, t)), [t])
        assert report.passed
        assert report.elements == 9

    def test_catches_scaled_gradient(self):
        rng = np.random.default_rng(1)
        t = Tensor(rng.normal(size=(2, 2)) + 1.0, requires_grad=True)

        def broken_square(x):
            out = x.data * x.data
            # wrong by a factor of two
            return make_op(out, (x,), lambda g: (g * x.data,))

        report = ck.gradcheck(lambda: ad.tensor_sum(broken_square(t)), [t])
        assert not report.passed

    def test_catches_sign_flip(self):
        rng = np.random.default_rng(2)
        t = Tensor(rng.normal(size=(2,)) + 2.0, requires_grad=True)

        def broken_exp(x):
            out = np.exp(x.data)
            return make_op(out, (x,), lambda g: (-g * out,))

        report = ck.gradcheck(lambda: ad.tensor_sum(broken_exp(t)), [t])
        assert not report.passed

    def test_kink_guard_skips_elements(self):
        t = Tensor(np.array([1.0, -1.0, 0.00001]), requires_grad=True)
        report = ck.gradcheck(lambda: ad.tensor_sum(ad.relu(t)), [t],
                              kink_guard=lambda ti, tt, i: abs(tt.data.reshape(-1)[i]) < 1e-3)
        assert report.passed
        assert report.elements == 2


class TestSolverChecks:
    def test_exact_check_passes_with_real_solver(self):
        result = ck.check_exact_vs_brute(seed=0, instances=50, tie_instances=10)
        assert result.passed

    def test_exact_check_fails_with_poisoned_solver(self):
        def poisoned(prob):
            point = mt.solve_exact(prob)
            # break tie handling: activation beats an equal margin
            if prob.a.max() == prob.mu:
                p = np.zeros(prob.k)
                p[int(np.argmax(prob.a))] = 1.0
                return mt.SimplexPoint(p, 0.0)
            return point

        result = ck.check_exact_vs_brute(seed=0, instances=20, tie_instances=20,
                                         solve_fn=poisoned)
        assert not result.passed

    def test_entropy_closed_form_check_passes(self):
        assert ck.check_entropy_closed_form(seed=0, instances=10).passed

    def test_temperature_limit_check_passes(self):
        assert ck.check_temperature_limit(seed=0, instances=50).passed

    def test_order_preservation_check_passes(self):
        assert ck.check_order_preservation(seed=0, instances=100).passed

    def test_run_solver_checks_quick_all_pass(self):
        results = ck.run_solver_checks(seed=0, quick=True)
        assert len(results) >= 6
        assert all(r.passed for r in results)
        names = [r.name for r in results]
        assert "exact-vs-brute" in names
        assert "perturbed-jacobian" in names


class TestOpChecks:
    def test_every_op_listed_and_quick_pass(self):
        results = ck.run_op_grad_checks(seed=0, instances=3)
        names = [r.name for r in results]
        for op in ("grad-add", "grad-matmul", "grad-conv2d", "grad-avg_pool",
                   "grad-batch_norm_train", "grad-softmax", "grad-cross_entropy",
                   "grad-margin_softmax_layer"):
            assert op in names, op
        assert all(r.passed for r in results)

    def test_block_checks_quick_pass(self):
        results = ck.run_block_grad_checks(seed=0, instances=2)
        names = [r.name for r in results]
        assert "grad-template-block-bn_relu" in names
        assert "grad-template-block-margin_softmax" in names
        assert "grad-residual-block" in names
        assert all(r.passed for r in results)
