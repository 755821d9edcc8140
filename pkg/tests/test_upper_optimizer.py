import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from s2mam.dataset import SemiDataset, gen_additive_synthetic
from s2mam.errors import ValidationError
from s2mam.lower_solver import LowerProblem, objective, solve_lower
from s2mam.params import HyperParams
from s2mam.upper_optimizer import (
    BilevelTrace, builder_for, enumerate_objective, gradient_mapping_norm, project, run_bilevel,
    sample_mask, score_gradient, sgd_step, step_size, upper_loss,
)

from oracles import enumerated_gradient, kkt_projection, score_samples


def toy_problem():
    B = np.stack([np.eye(4)])
    return LowerProblem.from_blocks(B, [1.0, -2.0, 0.5], [0, 2, 3])


class TestSampling:
    def test_degenerate(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            np.testing.assert_array_equal(sample_mask([1.0, 0.0, 1.0], rng), [1.0, 0.0, 1.0])

    def test_frequency(self):
        rng = np.random.default_rng(1)
        draws = np.array([sample_mask([0.5], rng)[0] for _ in range(100_000)])
        assert abs(draws.mean() - 0.5) <= 0.01


class TestScoreGradient:
    @pytest.mark.parametrize("s,m,expected", [(0.5, 1, 2.0), (0.5, 0, -2.0), (0.9, 0, -10.0)])
    def test_examples(self, s, m, expected):
        assert score_gradient([m], [s])[0] == pytest.approx(expected, rel=1e-12)

    def test_clipping(self):
        g = score_gradient([1.0, 0.0], [0.0, 1.0])
        np.testing.assert_allclose(g, [1e3, -1e3], rtol=1e-12)


class TestUpperLoss:
    def test_exact_fit(self):
        pb = toy_problem()
        alpha = np.array([[1.0], [0.0], [-2.0], [0.5]])
        assert upper_loss(pb, alpha, [0, 1, 2]) == 0.0

    def test_zero_predictor(self):
        pb = toy_problem()
        assert upper_loss(pb, np.zeros((4, 1)), [1, 2]) == pytest.approx((4.0 + 0.25) / 2)

    def test_full_batch_matches_objective(self):
        pb = toy_problem()
        alpha = np.random.default_rng(0).standard_normal((4, 1))
        assert upper_loss(pb, alpha, np.arange(3)) == pytest.approx(objective(pb, alpha), rel=1e-14)

    def test_logistic(self):
        pb = LowerProblem.from_blocks(np.stack([np.eye(2)]), [1.0, -1.0], [0, 1], loss="logistic")
        alpha = np.array([[2.0], [1.0]])
        ref = (np.log1p(np.exp(-2.0)) + np.log1p(np.exp(1.0))) / 2
        assert upper_loss(pb, alpha, [0, 1]) == pytest.approx(ref, rel=1e-12)

    def test_empty_batch(self):
        with pytest.raises(ValidationError):
            upper_loss(toy_problem(), np.zeros((4, 1)), [])


class TestProject:
    def test_feasible(self):
        np.testing.assert_array_equal(project([0.3, 0.4], 2.0), [0.3, 0.4])

    def test_box_only(self):
        np.testing.assert_array_equal(project([1.5, -0.2], 2.0), [1.0, 0.0])

    def test_sum_active(self):
        np.testing.assert_allclose(project([0.9, 0.9, 0.9], 1.5), [0.5, 0.5, 0.5], atol=1e-10)

    def test_bad_budget(self):
        with pytest.raises(ValidationError):
            project([0.5], 0.0)

    def test_matches_active_set_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            p = int(rng.integers(1, 6))
            s = rng.uniform(-1.0, 2.0, p)
            C = float(rng.uniform(0.05, p + 0.5))
            assert np.linalg.norm(project(s, C) - kkt_projection(s, C)) <= 1e-6

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, 6, elements=st.floats(-3, 3)), arrays(np.float64, 6, elements=st.floats(-3, 3)),
           st.floats(0.1, 6.0))
    def test_idempotent_nonexpansive(self, a, b, C):
        pa, pb = project(a, C), project(b, C)
        assert pa.min() >= 0 and pa.max() <= 1 and pa.sum() <= C + 1e-9
        np.testing.assert_allclose(project(pa, C), pa, atol=1e-9)
        assert np.linalg.norm(pa - pb) <= np.linalg.norm(a - b) + 1e-9


class TestSteps:
    def test_step_size(self):
        assert step_size(1, 0.3) == 0.3
        assert step_size(4, 0.3) == pytest.approx(0.15)
        assert step_size(100, 0.5) == pytest.approx(0.05)
        with pytest.raises(ValidationError):
            step_size(0, 1.0)

    def test_zero_loss(self):
        s = np.array([0.2, 0.7, 0.1])
        new, _ = sgd_step(s, [1, 0, 1], 0.0, 3, 0.1, 2.0)
        np.testing.assert_array_equal(new, s)

    def test_hand_composed(self):
        new, eta = sgd_step([0.5], [1.0], 1.0, 1, 0.1, 1.0)
        assert eta == 0.1
        np.testing.assert_allclose(new, [0.3], rtol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 6), st.floats(0.0, 10.0), st.integers(1, 1000), st.integers(0, 10**6))
    def test_result_feasible(self, p, loss, t, seed):
        rng = np.random.default_rng(seed)
        C = float(rng.uniform(0.5, p))
        s = project(rng.random(p), C)
        new, _ = sgd_step(s, sample_mask(s, rng), loss, t, 1.0, C)
        assert new.min() >= 0.0 and new.max() <= 1.0 and new.sum() <= C + 1e-9


class TestGradientMapping:
    def test_zero_gradient(self):
        assert gradient_mapping_norm([0.3, 0.6], [0.0, 0.0], 5, 0.1, 2.0) == 0.0

    def test_interior(self):
        g = np.array([0.4, -0.7, 0.2])
        val = gradient_mapping_norm([0.3, 0.5, 0.4], g, 10_000, 0.1, 3.0)
        assert val == pytest.approx(g @ g, abs=1e-8)

    def test_blocked_components(self):
        s = np.array([1.0, 0.0, 0.5])
        g = np.array([-1.0, 2.0, 0.3])  # pushes s_0 above 1 and s_1 below 0
        eta = step_size(4, 0.1)
        mapped = (s - np.clip(s - eta * g, 0, 1)) / eta  # componentwise oracle, sum slack
        assert mapped[0] == 0.0 and mapped[1] == 0.0
        assert gradient_mapping_norm(s, g, 4, 0.1, 3.0) == pytest.approx(mapped @ mapped, rel=1e-12)


def small_dataset(p=2, n=40, l=8, seed=0):
    ds = gen_additive_synthetic(n, p, seed)
    return SemiDataset(ds.X, ds.y[:l], task="classification", y_hidden=ds.y[l:], feature_tags=ds.feature_tags)


class TestRunBilevel:
    def test_zero_iterations(self):
        ds = small_dataset(p=3)
        hp = HyperParams(T=0, C=2.0)
        res = run_bilevel(ds, hp)
        np.testing.assert_array_equal(res.coefficients, 0.0)
        np.testing.assert_array_equal(res.s, np.full(3, 2.0 / 3))
        np.testing.assert_array_equal(res.mask, 1.0)
        np.testing.assert_array_equal(res.graph.W, builder_for(ds, hp).graph(np.ones(3)).W)
        assert len(res.trace) == 0

    def test_feasible_every_iteration(self):
        ds = small_dataset(p=2)
        res = run_bilevel(ds, HyperParams(T=30, C=2.0, c=1.0), seed=3)
        assert len(res.trace) == 30
        for s in res.trace.s:
            assert s.min() >= 0.0 and s.max() <= 1.0 and s.sum() <= 2.0 + 1e-9
        np.testing.assert_array_equal(res.trace.iteration, np.arange(1, 31))

    def test_deterministic(self):
        ds = small_dataset(p=4)
        hp = HyperParams(T=10, c=0.5)
        a, b = run_bilevel(ds, hp, seed=5), run_bilevel(ds, hp, seed=5)
        assert a.trace.loss == b.trace.loss and a.trace.grad_mapping_sq == b.trace.grad_mapping_sq
        np.testing.assert_array_equal(np.array(a.trace.s), np.array(b.trace.s))
        np.testing.assert_array_equal(a.coefficients, b.coefficients)
        c = run_bilevel(ds, hp, seed=6)
        assert not np.array_equal(np.array(a.trace.s), np.array(c.trace.s))

    def test_refit_uses_expected_mask(self):
        ds = small_dataset(p=3)
        hp = HyperParams(T=5)
        res = run_bilevel(ds, hp)
        pb = builder_for(ds, hp).problem(res.s, graph=res.refit_graph)
        ref, _ = solve_lower(pb, settings=hp.admm)
        # warm start differs, so compare the risk rather than the iterates
        assert objective(pb, res.coefficients) == pytest.approx(objective(pb, ref), abs=1e-6)

    def test_trace_round_trip(self, tmp_path):
        res = run_bilevel(small_dataset(p=2), HyperParams(T=4))
        back = BilevelTrace.from_dict(res.trace.to_dict())
        assert back.loss == res.trace.loss and len(back) == 4
        res.trace.to_csv(tmp_path / "t.csv")
        rows = (tmp_path / "t.csv").read_text().strip().splitlines()
        assert rows[0].split(",") == list(BilevelTrace.COLUMNS) and len(rows) == 5


@pytest.fixture(scope="module")
def enumerated():
    return enumerated_gradient()


class TestEstimator:
    """Policy-gradient estimates against the exact gradient from enumerating all masks."""

    def test_enumerated_phi(self, enumerated):
        table, s, phi, _ = enumerated
        probs = [np.prod(np.where(np.array(m) == 1, s, 1 - s)) for m in table]
        assert phi == pytest.approx(sum(p * v for p, v in zip(probs, table.values())), rel=1e-12)

    def test_monte_carlo_within_three_se(self, enumerated):
        table, s, _, grad = enumerated
        g = score_samples(table, s, 100_000, seed=0)
        se = g.std(axis=0, ddof=1) / np.sqrt(len(g))
        assert np.all(np.abs(g.mean(axis=0) - grad) <= 3 * se)

    def test_root_n_rate(self, enumerated):
        table, s, _, grad = enumerated
        Ns = np.array([250, 1000, 4000, 16000])
        rms = []
        for N in Ns:
            errs = [np.linalg.norm(score_samples(table, s, N, seed).mean(axis=0) - grad) for seed in range(40)]
            rms.append(np.sqrt(np.mean(np.square(errs))))
        slope = np.polyfit(np.log(Ns), np.log(rms), 1)[0]
        assert -0.65 <= slope <= -0.35
