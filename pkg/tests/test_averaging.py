"""Candidate screening, the quadratic criterion, and the simplex-weight solver."""

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import make_sar_dataset
from tlmma_sar.averaging import (
    AveragingError,
    CriterionProblem,
    assemble_criterion,
    candidate_predictions,
    criterion_known_omega,
    evaluate_criterion,
    evaluate_criterion_direct,
    nu_hat,
    project_simplex,
    solve_simplex_qp,
    solve_weights,
    tlmma_predict,
)
from tlmma_sar.estimators import SarFit, build_instruments, fit_2sls, fit_mle
from tlmma_sar.influence import penalty


def _candidates(method="mle", n=36, K=2):
    datasets = [make_sar_dataset(n, 3, seed=20 + k, rho=0.4 - 0.05 * k)[0]
                for k in range(K + 1)]
    if method == "mle":
        fits = [fit_mle(d) for d in datasets]
        instruments = None
    else:
        instruments = build_instruments(datasets[0])
        fits = [fit_2sls(d, build_instruments(d)) for d in datasets]
    target = datasets[0]
    cands = candidate_predictions(fits, target)
    pen = penalty(fits[0], target, instruments)
    return cands, pen, fits, target


class TestProjectSimplex:
    def test_interior_point_fixed(self):
        w = np.array([0.2, 0.3, 0.5])
        np.testing.assert_allclose(project_simplex(w), w, atol=1e-14)

    def test_known_projection(self):
        # projecting (1, 0.5) onto the simplex: subtract 0.25 from each
        np.testing.assert_allclose(project_simplex(np.array([1.0, 0.5])),
                                   [0.75, 0.25], atol=1e-14)

    def test_large_coordinate_wins(self):
        out = project_simplex(np.array([10.0, 0.0, 0.0]))
        np.testing.assert_allclose(out, [1.0, 0.0, 0.0], atol=1e-14)

    @given(hnp.arrays(np.float64, st.integers(min_value=1, max_value=8),
                      elements=st.floats(min_value=-50, max_value=50)))
    @settings(max_examples=100, deadline=None)
    def test_output_on_simplex_and_optimal(self, v):
        w = project_simplex(v)
        assert np.all(w >= 0)
        assert w.sum() == pytest.approx(1.0, abs=1e-9)
        # projection optimality: no simplex vertex is closer than w
        d_w = float(((w - v) ** 2).sum())
        for i in range(v.size):
            e = np.zeros(v.size)
            e[i] = 1.0
            assert d_w <= float(((e - v) ** 2).sum()) + 1e-9


class TestSolveSimplexQp:
    def test_unconstrained_interior_solution(self):
        # minimizing w'w over the simplex gives the uniform vector
        sol = solve_simplex_qp(CriterionProblem(D=np.zeros((0, 4)),
                                                d=np.zeros(4), Q=np.eye(4)))
        np.testing.assert_allclose(sol.retained_weights, 0.25, atol=1e-8)
        assert sol.kkt_residual < 1e-8

    def test_linear_term_pushes_to_vertex(self):
        sol = solve_simplex_qp(CriterionProblem(D=np.zeros((0, 2)),
                                                d=np.array([-4.0, 0.0]), Q=np.eye(2)))
        np.testing.assert_allclose(sol.retained_weights, [1.0, 0.0], atol=1e-8)
        assert sol.criterion_value == pytest.approx(-3.0, abs=1e-8)

    def test_degenerate_zero_q(self):
        # flat objective: any simplex point is optimal; value must be 0
        sol = solve_simplex_qp(CriterionProblem(D=np.zeros((0, 3)),
                                                d=np.zeros(3), Q=np.zeros((3, 3))))
        assert sol.criterion_value == pytest.approx(0.0, abs=1e-12)

    @given(st.integers(min_value=0, max_value=10 ** 6))
    @settings(max_examples=30, deadline=None)
    def test_kkt_certificate(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(2, 6))
        A = rng.standard_normal((m + 1, m))
        d = rng.standard_normal(m)
        sol = solve_simplex_qp(CriterionProblem(D=A, d=d))
        assert sol.kkt_residual < 1e-8
        assert np.all(sol.retained_weights >= 0)
        assert sol.retained_weights.sum() == pytest.approx(1.0, abs=1e-12)


class TestCandidatePredictions:
    def test_columns_are_reduced_form_means(self):
        cands, _, fits, target = _candidates()
        for j, k in enumerate(cands.retained):
            S = np.eye(target.n) - fits[k].rho * target.W.entries
            expected = np.linalg.solve(S, target.X @ fits[k].beta)
            np.testing.assert_allclose(cands.predictions[:, j], expected, atol=1e-10)

    def test_drops_inadmissible_candidate_with_warning(self):
        cands, _, fits, target = _candidates()
        bad = SarFit(beta=fits[1].beta, rho=1.7, sigma2=1.0, method="mle",
                     inadmissible_rho=True)
        with pytest.warns(UserWarning, match="dropped"):
            out = candidate_predictions([fits[0], bad, fits[2]], target)
        assert out.retained == (0, 2)
        assert out.dropped[0][0] == 1

    def test_dropped_target_is_fatal(self):
        cands, _, fits, target = _candidates()
        bad = dataclasses.replace(fits[0], inadmissible_rho=True)
        with pytest.raises(AveragingError, match="target"):
            candidate_predictions([bad, fits[1]], target)

    def test_p_mismatch_is_fatal(self):
        cands, _, fits, target = _candidates()
        other, _ = make_sar_dataset(36, 2, seed=99)
        with pytest.raises(AveragingError, match="p="):
            candidate_predictions([fits[0], fit_mle(other)], target)


class TestCriterion:
    def test_penalty_enters_target_coordinate_only(self):
        cands, pen, _, _ = _candidates()
        prob = assemble_criterion(cands, pen)
        assert prob.d[0] == pytest.approx(2.0 * pen.trace_JOmega)
        np.testing.assert_array_equal(prob.d[1:], 0.0)

    def test_residual_matrix(self):
        cands, pen, _, target = _candidates()
        prob = assemble_criterion(cands, pen)
        np.testing.assert_allclose(
            prob.D, target.y[:, None] - cands.predictions, atol=1e-14)
        np.testing.assert_allclose(prob.Q, prob.D.T @ prob.D, atol=1e-12)

    def test_method_mismatch_raises(self):
        cands, _, fits, target = _candidates(method="mle")
        _, pen2, _, _ = _candidates(method="2sls")
        with pytest.raises(AveragingError, match="penalty"):
            assemble_criterion(cands, pen2)

    @pytest.mark.parametrize("method", ["mle", "2sls"])
    def test_quadratic_form_equals_direct_evaluation(self, method):
        cands, pen, _, _ = _candidates(method=method)
        prob = assemble_criterion(cands, pen)
        rng = np.random.default_rng(2)
        for _ in range(25):
            w = rng.dirichlet(np.ones(len(cands.retained)))
            quad = evaluate_criterion(prob, w)
            direct = evaluate_criterion_direct(cands, pen, w)
            assert quad == pytest.approx(direct, rel=1e-10)

    def test_rejects_off_simplex_weights(self):
        cands, pen, _, _ = _candidates()
        prob = assemble_criterion(cands, pen)
        with pytest.raises(AveragingError, match="simplex"):
            evaluate_criterion(prob, np.array([0.7, 0.7, -0.4]))

    def test_known_omega_requires_symmetry(self):
        cands, _, _, target = _candidates()
        bad = np.triu(np.ones((target.n, target.n)))
        with pytest.raises(AveragingError, match="symmetric"):
            criterion_known_omega(cands, bad, np.array([1.0, 0.0, 0.0]))


class TestSolveWeights:
    def test_optimal_never_worse_than_any_vertex(self):
        cands, pen, _, _ = _candidates()
        sol = solve_weights(cands, pen)
        prob = assemble_criterion(cands, pen)
        for i in range(len(cands.retained)):
            e = np.zeros(len(cands.retained))
            e[i] = 1.0
            assert sol.criterion_value <= evaluate_criterion(prob, e) + 1e-8

    def test_weights_scattered_to_full_length(self):
        cands, pen, fits, target = _candidates()
        bad = SarFit(beta=fits[1].beta, rho=1.7, sigma2=1.0, method="mle",
                     inadmissible_rho=True)
        with pytest.warns(UserWarning):
            cands2 = candidate_predictions([fits[0], bad, fits[2]], target)
        sol = solve_weights(cands2, pen)
        assert sol.weights.size == 3
        assert sol.weights[1] == 0.0
        assert sol.weights.sum() == pytest.approx(1.0, abs=1e-12)

    def test_source_permutation_equivariance(self):
        cands, pen, fits, target = _candidates(K=3)
        sol = solve_weights(cands, pen)
        perm_fits = [fits[0], fits[2], fits[3], fits[1]]
        perm_cands = candidate_predictions(perm_fits, target)
        perm_sol = solve_weights(perm_cands, pen)
        np.testing.assert_allclose(
            perm_sol.weights, sol.weights[[0, 2, 3, 1]], atol=1e-6)


class TestPredictAndNu:
    def test_prediction_matches_manual_average(self):
        cands, pen, fits, target = _candidates()
        sol = solve_weights(cands, pen)
        rng = np.random.default_rng(5)
        X_new = rng.standard_normal((target.n, target.p))
        mu = tlmma_predict(sol, fits, X_new, target.W)
        manual = np.zeros(target.n)
        for k, w in enumerate(sol.weights):
            S = np.eye(target.n) - fits[k].rho * target.W.entries
            manual += w * np.linalg.solve(S, X_new @ fits[k].beta)
        np.testing.assert_allclose(mu, manual, atol=1e-10)

    def test_same_region_row_count_enforced(self):
        cands, pen, fits, target = _candidates()
        sol = solve_weights(cands, pen)
        with pytest.raises(AveragingError, match="same-region"):
            tlmma_predict(sol, fits, np.ones((10, target.p)), target.W)

    def test_nu_hat_sums_selected_weights(self):
        cands, pen, _, _ = _candidates()
        sol = solve_weights(cands, pen)
        assert nu_hat(sol, [0, 1]) == pytest.approx(sol.weights[0] + sol.weights[1])

    def test_nu_hat_range_check(self):
        cands, pen, _, _ = _candidates()
        sol = solve_weights(cands, pen)
        with pytest.raises(AveragingError, match="out of range"):
            nu_hat(sol, [0, 9])
