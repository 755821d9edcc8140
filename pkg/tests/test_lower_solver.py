import numpy as np
import pytest

from s2mam.errors import DivergenceError, SingularSystemError, ValidationError
from s2mam.lower_solver import (
    AdmmSettings, AdmmState, LowerProblem, group_prox, objective, predictions,
    smooth_gradient, solve_lower,
)

from oracles import fista, make_builder, min_norm_least_squares, reference_objective


class TestGroupProx:
    def test_threshold_equals_norm(self):
        np.testing.assert_array_equal(group_prox([3.0, 4.0], 5.0), [0.0, 0.0])

    def test_shrinkage(self):
        np.testing.assert_allclose(group_prox([3.0, 4.0], 2.5), [1.5, 2.0], rtol=1e-15)

    def test_identity(self):
        np.testing.assert_array_equal(group_prox([3.0, -4.0], 0.0), [3.0, -4.0])

    def test_zero_vector(self):
        np.testing.assert_array_equal(group_prox(np.zeros(3), 1.0), np.zeros(3))

    def test_negative_threshold(self):
        with pytest.raises(ValidationError):
            group_prox([1.0], -1.0)


class TestObjective:
    def test_zero_predictor(self):
        b = make_builder(lambda1=0.3, lambda2=0.2)
        pb = b.problem(np.ones(5))
        assert objective(pb, np.zeros((30, 5))) == pytest.approx(np.mean(b.targets ** 2), rel=1e-14)

    def test_penalty_free_reduction(self):
        b = make_builder()
        pb = b.problem(np.ones(5))
        alpha = np.random.default_rng(1).standard_normal((30, 5))
        f = predictions(pb, alpha)
        assert objective(pb, alpha) == pytest.approx(np.mean((f[:10] - b.targets) ** 2), rel=1e-12)

    @pytest.mark.parametrize("loss", ["squared", "logistic"])
    @pytest.mark.parametrize("rank_tol", [None, 1e-12])
    def test_term_by_term(self, loss, rank_tol):
        b = make_builder(loss=loss, lambda1=0.05, lambda2=0.3, seed=4, rank_tol=rank_tol)
        mask = np.array([1.0, 0.0, 0.6, 1.0, 1.0])
        pb = b.problem(mask)
        B = b.grams.blocks(mask)
        alpha = np.zeros((30, 5))
        for j in range(5):  # keep coefficients in the span of each block
            alpha[:, j] = B[j] @ np.random.default_rng(j).standard_normal(30) * 0.1
        ref = reference_objective(B, pb.laplacian, b.targets, 10, alpha, loss, 0.05, 0.3, np.ones(5))
        assert objective(pb, alpha) == pytest.approx(ref, rel=1e-10)


class TestProblemValidation:
    def setup_method(self):
        self.B = np.stack([np.eye(4)] * 2)

    def test_negative_lambda(self):
        with pytest.raises(ValidationError):
            LowerProblem.from_blocks(self.B, [1.0], [0], lambda1=-1.0)

    def test_bad_tau(self):
        with pytest.raises(ValidationError):
            LowerProblem.from_blocks(self.B, [1.0], [0], tau=[1.0, 0.0])

    def test_laplacian_dimension(self):
        with pytest.raises(ValidationError):
            LowerProblem.from_blocks(self.B, [1.0], [0], lambda2=1.0, laplacian=np.eye(3))

    def test_logistic_targets(self):
        with pytest.raises(ValidationError):
            LowerProblem.from_blocks(self.B, [0.0], [0], loss="logistic")

    def test_duplicate_labeled_rows(self):
        with pytest.raises(ValidationError):
            LowerProblem.from_blocks(self.B, [1.0, 1.0], [0, 0])

    def test_settings(self):
        with pytest.raises(ValidationError):
            AdmmSettings(rho=0.0)
        with pytest.raises(ValidationError):
            AdmmSettings(max_iter=0)


class TestSolveLower:
    @pytest.mark.parametrize("rank_tol", [None, 1e-12])
    def test_min_norm_least_squares(self, rank_tol):
        b = make_builder(n=20, p=3, l=8, rank_tol=rank_tol)
        pb = b.problem(np.ones(3))
        alpha, state = solve_lower(pb, settings=AdmmSettings(tol=1e-11, max_iter=20000))
        ref = min_norm_least_squares(b.grams.blocks(np.ones(3)), b.targets, 8)
        assert np.linalg.norm(alpha - ref) <= 1e-5 * np.linalg.norm(ref)

    @pytest.mark.parametrize("loss", ["squared", "logistic"])
    def test_large_penalty_gives_zero(self, loss):
        b = make_builder(loss=loss, lambda2=0.1)
        pb = b.problem(np.ones(5))
        g0 = smooth_gradient(pb, np.zeros((30, 5)))
        gmax = np.linalg.norm(g0, axis=0).max()
        pb = b.with_params(lambda1=1e3 * gmax).problem(np.ones(5))
        alpha, _ = solve_lower(pb)
        assert np.abs(alpha).max() <= 1e-8
        # zero satisfies the subgradient condition
        assert np.all(np.linalg.norm(g0, axis=0) <= pb.lambda1 * pb.tau)

    @pytest.mark.parametrize("loss", ["squared", "logistic"])
    def test_warm_start_fixed_point(self, loss):
        pb = make_builder(loss=loss, lambda1=1e-2, lambda2=0.1, seed=2).problem(np.r_[1, 1, 0, 1, 0.5])
        alpha, state = solve_lower(pb, settings=AdmmSettings(tol=1e-10, max_iter=20000))
        _, again = solve_lower(pb, warm=alpha)
        assert again.converged and again.iterations <= 2
        _, from_state = solve_lower(pb, warm=state)
        assert from_state.converged and from_state.iterations <= 2

    @pytest.mark.parametrize("loss", ["squared", "logistic"])
    @pytest.mark.parametrize("seed", range(3))
    def test_certificate_and_residuals(self, loss, seed):
        settings = AdmmSettings()
        b = make_builder(loss=loss, lambda1=1e-2, lambda2=0.1, seed=seed)
        pb = b.problem(np.r_[1, 1, 0, 1, 0.5])
        alpha, state = solve_lower(pb, settings=settings)
        tol = settings.tol
        assert state.converged
        assert 0 <= state.primal_residual < tol and 0 <= state.dual_residual < tol
        g = smooth_gradient(pb, alpha)
        gnorm = np.linalg.norm(g)
        for j in range(pb.p):
            nj = np.linalg.norm(alpha[:, j])
            thr = pb.lambda1 * pb.tau[j]
            if nj == 0:
                assert np.linalg.norm(g[:, j]) <= thr * (1 + tol)
            else:
                assert np.linalg.norm(g[:, j] + thr * alpha[:, j] / nj) <= tol * (1 + gnorm)
        assert objective(pb, alpha) <= objective(pb, np.zeros_like(alpha)) + tol

    @pytest.mark.parametrize("loss", ["squared", "logistic"])
    @pytest.mark.parametrize("seed", range(4))
    def test_agrees_with_proximal_gradient(self, loss, seed):
        rng = np.random.default_rng(100 + seed)
        n, p = int(rng.integers(12, 41)), int(rng.integers(2, 9))
        b = make_builder(n=n, p=p, l=max(4, n // 4), loss=loss, lambda1=10 ** rng.uniform(-3, -1.5),
                         lambda2=10 ** rng.uniform(-2, 0), seed=seed)
        mask = (rng.random(p) < 0.7).astype(float)
        pb = b.problem(mask)
        alpha, state = solve_lower(pb, settings=AdmmSettings(max_iter=20000))
        assert state.converged
        B = b.grams.blocks(mask)
        ref = fista(B, pb.laplacian, b.targets, pb.l, loss, pb.lambda1, pb.lambda2, pb.tau)
        ref_obj = reference_objective(B, pb.laplacian, b.targets, pb.l, ref, loss, pb.lambda1, pb.lambda2, pb.tau)
        assert abs(objective(pb, alpha) - ref_obj) <= 1e-4

    def test_latent_matches_explicit_blocks(self):
        mask = np.r_[1, 0.3, 0, 1, 1]
        out = []
        for rank_tol in (None, 1e-12):
            pb = make_builder(lambda1=1e-2, lambda2=0.1, seed=7, rank_tol=rank_tol).problem(mask)
            alpha, _ = solve_lower(pb, settings=AdmmSettings(tol=1e-9, max_iter=20000))
            out.append((objective(pb, alpha), predictions(pb, alpha)))
        assert out[0][0] == pytest.approx(out[1][0], rel=1e-7)
        np.testing.assert_allclose(out[0][1], out[1][1], atol=1e-5)

    def test_trace(self):
        pb = make_builder(lambda1=1e-2).problem(np.ones(5))
        _, state = solve_lower(pb, settings=AdmmSettings(record_trace=True))
        assert len(state.trace) == state.iterations
        assert {"objective", "primal_residual", "dual_residual", "rho"} <= set(state.trace[0])

    def test_deterministic(self):
        pb = make_builder(loss="logistic", lambda1=1e-2, lambda2=0.1).problem(np.ones(5))
        a1, _ = solve_lower(pb)
        a2, _ = solve_lower(pb)
        np.testing.assert_array_equal(a1, a2)

    def test_bad_warm_shape(self):
        pb = make_builder().problem(np.ones(5))
        with pytest.raises(ValidationError):
            solve_lower(pb, warm=np.zeros((3, 3)))

    def test_divergence_reports_context(self):
        pb = LowerProblem.from_blocks(np.stack([np.eye(3)]), [1e308, -1e308], [0, 1])
        with pytest.raises(DivergenceError) as info, np.errstate(over="ignore", invalid="ignore"):
            solve_lower(pb, settings=AdmmSettings(rho=1e-3))
        assert info.value.rho is not None and info.value.iteration is not None

    def test_singular_system(self):
        rho = 1.0
        # Laplacian chosen to cancel rho on the unlabeled rows
        pb = LowerProblem.from_blocks(np.stack([np.eye(3)]), [1.0], [0], lambda2=1.0,
                                      laplacian=-(9 * rho / 2) * np.eye(3))
        with pytest.raises(SingularSystemError, match="rho"):
            solve_lower(pb, settings=AdmmSettings(rho=rho, adapt_rho=False))

    def test_state_type(self):
        pb = make_builder().problem(np.ones(5))
        _, state = solve_lower(pb, settings=AdmmSettings(max_iter=3))
        assert isinstance(state, AdmmState) and state.iterations == 3 and not state.converged
        assert state.alpha.shape == state.beta.shape == state.dual.shape == (30, 5)
