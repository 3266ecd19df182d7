import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from bayestt.data import SynthSpec, add_noise, gen_synthetic, random_mask
from bayestt.model import LambdaPosterior
from bayestt.tensor import tt_contract
from bayestt.ttsvd import InitConfig
from bayestt.vi import (
    ContractionCaches,
    FitError,
    FitOptions,
    FitReport,
    fast_c,
    fit,
    precision_coefficients,
    prune_ranks,
    reconstruct,
    sweep,
    update_core,
    update_lambda,
    update_tau,
)

from oracles import (
    direct_c,
    optimal_core_element,
    optimal_lambda,
    optimal_tau,
    random_state,
)

TINY = [
    ((2, 3), [1, 2, 1]),
    ((2, 2, 2), [1, 2, 1, 1]),
    ((3, 2, 2), [1, 1, 2, 1]),
    ((2, 2, 2, 2), [1, 1, 2, 1, 1]),
]


def _problem(rng, dims, ranks, missing):
    state = random_state(rng, dims, ranks)
    a = rng.standard_normal(dims)
    mask = rng.random(dims) >= missing
    mask.flat[0] = True
    return state, a, mask


def _update_core(state, a, mask, d, opts=None):
    caches = ContractionCaches(state, mask, opts)
    update_core(state, caches, a, mask, d, opts)
    return state


class TestCoreUpdate:
    @pytest.mark.parametrize("dims,ranks", TINY)
    @pytest.mark.parametrize("missing", [0.0, 0.05, 0.5])
    def test_matches_single_factor_oracle(self, rng, dims, ranks, missing):
        state, a, mask = _problem(rng, dims, ranks, missing)
        for d in range(len(dims)):
            _update_core(state, a, mask, d)
            core = state.cores[d]
            for k, l, j in np.ndindex(*core.shape):
                m, v = optimal_core_element(state, a, mask, d, k, l, j)
                assert core.mean[k, l, j] == pytest.approx(m, rel=1e-6, abs=1e-9)
                assert core.var[k, l, j] == pytest.approx(v, rel=1e-6)

    def test_modes_agree(self, rng):
        dims, ranks = (3, 4, 3), [1, 3, 2, 1]
        state, a, _ = _problem(rng, dims, ranks, 0.0)
        mask = np.ones(dims, bool)
        ref = state.copy()
        _update_core(ref, a, mask, 1)
        for mode in ("subtractive", "masked"):
            other = state.copy()
            caches = ContractionCaches(other, mask)
            caches.mode, caches.summed = mode, False
            update_core(other, caches, a, mask, 1)
            np.testing.assert_allclose(other.cores[1].mean, ref.cores[1].mean, rtol=1e-9, atol=1e-12)
            np.testing.assert_allclose(other.cores[1].var, ref.cores[1].var, rtol=1e-9)

    @pytest.mark.parametrize("missing", [0.05, 0.6])
    def test_cg_matches_dense(self, rng, missing):
        dims, ranks = (4, 5, 4), [1, 4, 3, 1]
        state, a, mask = _problem(rng, dims, ranks, missing)
        dense, cg = state.copy(), state.copy()
        opts = FitOptions(fast_path_observed_fraction=0.9)
        _update_core(dense, a, mask, 1, opts)
        opts_cg = FitOptions(dense_limit=0, cg_tol=1e-13, cg_max_iters=1000)
        _update_core(cg, a, mask, 1, opts_cg)
        np.testing.assert_allclose(cg.cores[1].mean, dense.cores[1].mean, rtol=1e-7, atol=1e-10)

    def test_truncated_cg_still_improves(self, rng):
        dims, ranks = (4, 5, 4), [1, 4, 3, 1]
        state, a, mask = _problem(rng, dims, ranks, 0.5)
        exact = state.copy()
        _update_core(exact, a, mask, 1)
        one_step = state.copy()
        _update_core(one_step, a, mask, 1, FitOptions(dense_limit=0, cg_max_iters=1))
        before = np.linalg.norm(state.cores[1].mean - exact.cores[1].mean)
        after = np.linalg.norm(one_step.cores[1].mean - exact.cores[1].mean)
        assert after < before

    def test_exact_least_squares_limit(self, rng):
        # vanishing prior and huge tau: the update is the masked least-squares core
        t, tt = gen_synthetic(SynthSpec((4, 5, 6), (1, 2, 2, 1), seed=1))
        state = random_state(rng, (4, 5, 6), [1, 2, 2, 1])
        for d in (0, 2):
            state.cores[d].mean = tt.cores[d].copy()
            state.cores[d].var = np.full(tt.cores[d].shape, 1e-300)
        for lam in state.lambdas:
            lam.shape[:] = 1e-9
            lam.rate[:] = 1.0
        state.tau.shape, state.tau.rate = 1e12, 1.0
        mask = rng.random(t.shape) > 0.4
        _update_core(state, t, mask, 1)
        np.testing.assert_allclose(state.cores[1].mean, tt.cores[1], rtol=1e-6, atol=1e-8)


class TestGammaUpdates:
    @pytest.mark.parametrize("dims,ranks", TINY)
    def test_lambda_matches_oracle(self, rng, dims, ranks):
        state, a, mask = _problem(rng, dims, ranks, 0.3)
        for b in range(1, len(dims)):
            update_lambda(state, b)
            lam = state.lambdas[b - 1]
            for k in range(len(lam.shape)):
                shape, rate = optimal_lambda(state, a, mask, b, k)
                assert lam.shape[k] == pytest.approx(shape, rel=1e-6)
                assert lam.rate[k] == pytest.approx(rate, rel=1e-6)

    @pytest.mark.parametrize("dims,ranks", TINY)
    @pytest.mark.parametrize("missing", [0.0, 0.05, 0.4])
    def test_tau_matches_oracle(self, rng, dims, ranks, missing):
        state, a, mask = _problem(rng, dims, ranks, missing)
        update_tau(state, ContractionCaches(state, mask), a, mask)
        shape, rate = optimal_tau(state, a, mask)
        assert state.tau.shape == pytest.approx(shape, rel=1e-6)
        assert state.tau.rate == pytest.approx(rate, rel=1e-6)

    def test_lambda_bad_interface(self, rng):
        state, _, _ = _problem(rng, (2, 2, 2), [1, 2, 1, 1], 0.0)
        with pytest.raises(ValueError):
            update_lambda(state, 0)

    def test_tau_perfect_fit_large(self, rng):
        t, tt = gen_synthetic(SynthSpec((3, 3, 3), (1, 2, 2, 1), seed=2))
        state = random_state(rng, (3, 3, 3), [1, 2, 2, 1])
        for c, g in zip(state.cores, tt.cores):
            c.mean, c.var = g.copy(), np.full(g.shape, 1e-12)
        mask = np.ones(t.shape, bool)
        update_tau(state, ContractionCaches(state, mask), t, mask)
        # the residual vanishes, leaving only the prior rate
        assert state.tau.rate == pytest.approx(state.prior.beta_tau, rel=1e-6)
        assert state.tau.shape == pytest.approx(27 / 2 + state.prior.alpha_tau)


class TestInvariants:
    @settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
    @given(st.integers(0, 2**32 - 1), st.sampled_from(TINY), st.floats(0.0, 0.7))
    def test_positivity_and_idempotence(self, seed, shape, missing):
        rng = np.random.default_rng(seed)
        dims, ranks = shape
        state, a, mask = _problem(rng, dims, ranks, missing)
        for _ in range(5):
            kind = rng.integers(3)
            if kind == 0:
                d = int(rng.integers(len(dims)))
                _update_core(state, a, mask, d)
                again = _update_core(state.copy(), a, mask, d)
                np.testing.assert_allclose(again.cores[d].mean, state.cores[d].mean, rtol=1e-8, atol=1e-10)
                np.testing.assert_allclose(again.cores[d].var, state.cores[d].var, rtol=1e-10)
                lam = np.outer(state.lambda_mean(d), state.lambda_mean(d + 1))
                assert np.all(state.cores[d].var <= 1.0 / lam[:, :, None] * (1 + 1e-12))
            elif kind == 1:
                b = int(rng.integers(1, len(dims)))
                update_lambda(state, b)
                again = update_lambda(state.copy(), b)
                np.testing.assert_allclose(again.lambdas[b - 1].rate, state.lambdas[b - 1].rate, rtol=1e-12)
            else:
                update_tau(state, ContractionCaches(state, mask), a, mask)
                again = update_tau(state.copy(), ContractionCaches(state, mask), a, mask)
                assert again.tau.rate == pytest.approx(state.tau.rate, rel=1e-12)
            state.validate()


class TestFastCoefficients:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_fast_equals_direct(self, seed):
        rng = np.random.default_rng(seed)
        D = int(rng.integers(2, 5))
        dims = tuple(int(x) for x in rng.integers(1, 4, D))
        ranks = [1] + [int(x) for x in rng.integers(1, 4, D - 1)] + [1]
        state = random_state(rng, dims, ranks)
        mask = np.ones(dims, bool)
        for d in range(D):
            ref = direct_c(state.cores, mask, d)
            got = precision_coefficients(state.cores, mask, d, "fast")
            np.testing.assert_allclose(got, ref, rtol=1e-9, atol=1e-12)

    def test_subtractive_equals_direct(self, rng):
        dims, ranks = (3, 4, 4), [1, 2, 3, 1]
        state = random_state(rng, dims, ranks)
        mask = rng.random(dims) > 0.05
        for d in range(3):
            ref = direct_c(state.cores, mask, d)
            got = precision_coefficients(state.cores, mask, d, "subtractive")
            np.testing.assert_allclose(got, ref, rtol=1e-9, atol=1e-12)

    def test_fast_requires_full(self, rng):
        state = random_state(rng, (2, 2), [1, 2, 1])
        with pytest.raises(ValueError):
            precision_coefficients(state.cores, np.array([[1, 0], [1, 1]], bool), 0, "fast")

    def test_subtractive_threshold(self, rng):
        state = random_state(rng, (2, 2), [1, 2, 1])
        with pytest.raises(ValueError, match="threshold"):
            precision_coefficients(state.cores, np.array([[1, 0], [1, 1]], bool), 0, "subtractive")

    def test_single_pair(self, rng):
        state = random_state(rng, (3, 3, 3), [1, 2, 2, 1])
        full = precision_coefficients(state.cores, np.ones((3, 3, 3), bool), 1, "fast")
        np.testing.assert_array_equal(fast_c(state.cores, 1, 1, 0), full[:, 1, 0])


class TestPruning:
    def test_removes_runaway_slice(self, rng):
        state = random_state(rng, (3, 3, 3), [1, 3, 2, 1])
        state.lambdas[0] = LambdaPosterior(np.array([1.0, 1.0, 1.0]), np.array([1.0, 1e-4, 1.0]))
        state, pruned = prune_ranks(state, 100.0)
        assert state.ranks == [1, 1, 2, 1] or state.ranks[1] == 2
        assert pruned[0].tolist() == [False, True, False]
        state.validate()

    def test_never_below_one(self, rng):
        state = random_state(rng, (3, 3), [1, 2, 1])
        state.lambdas[0] = LambdaPosterior(np.array([1.0, 1.0]), np.array([1e-9, 1e-9]))
        state, _ = prune_ranks(state, 100.0)
        assert state.ranks == [1, 2, 1]

    def test_reconstruction_keeps_remaining_slices(self, rng):
        state = random_state(rng, (3, 4, 3), [1, 2, 3, 1])
        state.cores[1].mean[:, 2, :] = 0.0
        state.cores[2].mean[2] = 0.0
        state.lambdas[1] = LambdaPosterior(np.ones(3), np.array([1.0, 1.0, 1e-6]))
        before = reconstruct(state)
        state, _ = prune_ranks(state, 100.0)
        assert state.ranks == [1, 2, 2, 1]
        np.testing.assert_allclose(reconstruct(state), before, atol=1e-14)


@pytest.fixture(scope="module")
def synthetic():
    t, _ = gen_synthetic(SynthSpec((12, 12, 12), (1, 3, 3, 1), seed=5))
    y, _ = add_noise(t, 20.0, 6)
    return t, y


class TestFit:
    def test_recovers_ranks(self, synthetic):
        t, y = synthetic
        mask = random_mask(t.shape, 0.2, 1)
        state, report = fit(y, mask, truth=t)
        assert state.ranks == [1, 3, 3, 1]
        assert report.rse_history[-1] < 0.1
        assert report.status in ("converged", "max_iters")
        assert len(report.ranks_history) == report.iterations

    def test_noiseless_full_converges(self):
        t, _ = gen_synthetic(SynthSpec((6, 7, 5), (1, 2, 2, 1), seed=0))
        state, report = fit(t, np.ones(t.shape, bool))
        assert report.converged
        assert np.linalg.norm(reconstruct(state) - t) <= 1e-4 * np.linalg.norm(t)

    def test_deterministic(self, synthetic):
        t, y = synthetic
        mask = random_mask(t.shape, 0.3, 2)
        opts = FitOptions(max_iters=5)
        s1, _ = fit(y, mask, opts)
        s2, _ = fit(y, mask, opts)
        assert all(np.array_equal(a.mean, b.mean) for a, b in zip(s1.cores, s2.cores))

    def test_resume_continues(self, synthetic):
        t, y = synthetic
        mask = np.ones(t.shape, bool)
        s1, r1 = fit(y, mask, FitOptions(max_iters=3))
        s2, r2 = fit(y, mask, FitOptions(max_iters=3), state=s1)
        assert r2.iterations >= 1
        assert s2.ranks[1] <= s1.ranks[1]

    def test_empty_mask(self, synthetic):
        with pytest.raises(ValueError):
            fit(synthetic[1], np.zeros(synthetic[1].shape, bool))

    def test_non_finite_data_rejected(self, synthetic):
        y = synthetic[1].copy()
        y[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            fit(y, np.ones(y.shape, bool))

    def test_non_finite_ignored_when_unobserved(self, synthetic):
        y = synthetic[1].copy()
        y[0, 0, 0] = np.nan
        mask = np.ones(y.shape, bool)
        mask[0, 0, 0] = False
        state, _ = fit(y, mask, FitOptions(max_iters=2))
        assert np.isfinite(reconstruct(state)).all()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises_with_state(self, synthetic):
        from bayestt.ttsvd import init_state

        y = synthetic[1]
        mask = np.ones(y.shape, bool)
        state = init_state(y, mask)
        for core in state.cores:
            core.mean *= 1e150
        with pytest.raises(FitError) as info:
            fit(y, mask, FitOptions(max_iters=3), state=state)
        assert info.value.report.status == "failed"
        assert info.value.state is not None

    def test_time_budget(self, synthetic):
        t, y = synthetic
        _, report = fit(y, random_mask(t.shape, 0.5, 0), FitOptions(max_iters=100, max_seconds=1e-6))
        assert report.status == "max_time" and report.iterations == 1

    def test_callback_and_report(self, synthetic):
        t, y = synthetic
        seen = []
        _, report = fit(y, np.ones(t.shape, bool), FitOptions(max_iters=2),
                        callback=lambda it, s, r: seen.append(it))
        assert seen == list(range(1, report.iterations + 1))
        rows = list(report.csv_rows())
        assert rows[0][0] == 1 and "x" in rows[0][1]
        assert FitReport(**__import__("json").loads(report.to_json())).iterations == report.iterations

    def test_sweep_matches_fit_iteration(self, synthetic):
        from bayestt.ttsvd import init_state

        t, y = synthetic
        mask = random_mask(t.shape, 0.3, 4)
        opts = FitOptions(max_iters=1, prune=False)
        state = init_state(y, mask, InitConfig(fill_seed=opts.seed))
        sweep(state, y, mask, opts)
        fitted, _ = fit(y, mask, opts)
        np.testing.assert_allclose(tt_contract(fitted.means()), tt_contract(state.means()), rtol=1e-12)


class TestSpecExamples:
    def test_kron_slice_zero_variance(self, rng):
        from bayestt.model import CorePosterior
        from bayestt.vi import expected_kron_slice

        m = rng.standard_normal((2, 3, 2))
        core = CorePosterior(m, np.zeros_like(m) + 0.0)
        core.var[:] = 0.0
        np.testing.assert_array_equal(expected_kron_slice(core, 1), np.kron(m[:, :, 1], m[:, :, 1]))

    def test_kron_slice_scalar(self):
        from bayestt.model import CorePosterior
        from bayestt.vi import expected_kron_slice

        core = CorePosterior(np.full((1, 1, 1), 1.5), np.full((1, 1, 1), 0.25))
        assert expected_kron_slice(core, 0)[0, 0] == pytest.approx(2.5)

    def test_kron_slice_monte_carlo(self, rng):
        from bayestt.model import CorePosterior
        from bayestt.vi import expected_kron_slice

        core = CorePosterior(rng.standard_normal((2, 2, 1)), 0.2 + rng.random((2, 2, 1)))
        n = 1_000_000
        g = core.mean[None, :, :, 0] + np.sqrt(core.var[None, :, :, 0]) * rng.standard_normal((n, 2, 2))
        samples = np.einsum("nkl,nmp->nkmlp", g, g).reshape(n, 4, 4)
        mc, se = samples.mean(axis=0), samples.std(axis=0) / np.sqrt(n)
        assert np.all(np.abs(mc - expected_kron_slice(core, 0)) <= 3 * se + 1e-12)

    def test_all_missing_reverts_to_prior(self, rng):
        state, a, _ = _problem(rng, (2, 3, 2), [1, 2, 2, 1], 0.0)
        mask = np.zeros((2, 3, 2), bool)
        update_core(state, ContractionCaches(state, mask), a, mask, 1)
        lam = np.outer(state.lambda_mean(1), state.lambda_mean(2))
        np.testing.assert_array_equal(state.cores[1].mean, 0.0)
        np.testing.assert_allclose(state.cores[1].var, np.broadcast_to(1 / lam[:, :, None], (2, 2, 3)))

    def test_single_mode_conjugate_update(self, rng):
        state, _, _ = _problem(rng, (5,), [1, 1], 0.0)
        a = rng.standard_normal(5)
        mask = np.ones(5, bool)
        update_core(state, ContractionCaches(state, mask), a, mask, 0)
        tau = state.tau.mean
        np.testing.assert_allclose(state.cores[0].mean[0, 0], tau * a / (tau + 1.0), rtol=1e-12)
        np.testing.assert_allclose(state.cores[0].var[0, 0], 1.0 / (tau + 1.0), rtol=1e-12)

    def test_lambda_shape_count(self, rng):
        state = random_state(rng, (20, 20, 20), [1, 5, 5, 1])
        state.prior.alpha[0][:] = 1e-6
        update_lambda(state, 1)
        np.testing.assert_allclose(state.lambdas[0].shape, 50 + 10 + 1e-6)
        update_lambda(state, 2)
        np.testing.assert_allclose(state.lambdas[1].shape, 10 + 50 + state.prior.alpha[1])

    def test_lambda_shape_rank5_interface(self, rng):
        # J = 20 on both sides of a rank-5 interface with rank-5 neighbours
        state = random_state(rng, (20, 20, 20, 20), [1, 5, 5, 5, 1])
        state.prior.alpha[1][:] = 1e-6
        update_lambda(state, 2)
        np.testing.assert_allclose(state.lambdas[1].shape, 50 + 50 + 1e-6)

    def test_lambda_zero_moments(self, rng):
        state = random_state(rng, (3, 3, 3), [1, 2, 2, 1])
        state.cores[0].mean[:, 1] = 0.0
        state.cores[0].var[:, 1] = 0.0
        state.cores[1].mean[1] = 0.0
        state.cores[1].var[1] = 0.0
        update_lambda(state, 1)
        assert state.lambdas[0].rate[1] == pytest.approx(state.prior.beta[0][1])

    def test_tau_shape_count(self, rng):
        state = random_state(rng, (20, 20, 20), [1, 2, 2, 1])
        state.prior.alpha_tau = 1e-6
        mask = np.ones((20, 20, 20), bool)
        update_tau(state, ContractionCaches(state, mask), rng.standard_normal((20, 20, 20)), mask)
        assert state.tau.shape == pytest.approx(4000.000001, rel=1e-15)

    def test_tau_rate_monte_carlo(self, rng):
        state, a, mask = _problem(rng, (3, 2, 3), [1, 2, 2, 1], 0.3)
        update_tau(state, ContractionCaches(state, mask), a, mask)
        n = 200_000
        samples = []
        for core in state.cores:
            samples.append(core.mean[None] + np.sqrt(core.var[None]) * rng.standard_normal((n,) + core.shape))
        y = np.einsum("nakx,nkly,nlbz->nxyz", *samples)
        sq = 0.5 * np.sum(((a - y) * mask) ** 2, axis=(1, 2, 3)) + state.prior.beta_tau
        assert abs(sq.mean() - state.tau.rate) <= 3 * sq.std() / np.sqrt(n)

    def test_prune_example(self, rng):
        state = random_state(rng, (4, 4, 4), [1, 3, 2, 1])
        state.lambdas[0] = LambdaPosterior(np.array([1.0, 1.0, 250.0]), np.ones(3))
        state, pruned = prune_ranks(state, 100.0)
        assert pruned[0].tolist() == [False, False, True] and state.ranks[1] == 2

    def test_prune_all_equal(self, rng):
        state = random_state(rng, (4, 4, 4), [1, 3, 2, 1])
        for lam in state.lambdas:
            lam.shape[:] = 2.0
            lam.rate[:] = 1.0
        state, pruned = prune_ranks(state, 100.0)
        assert state.ranks == [1, 3, 2, 1] and not any(p.any() for p in pruned)

    def test_reconstruct_definition(self, rng):
        state = random_state(rng, (3, 4, 2), [1, 2, 2, 1])
        assert np.array_equal(reconstruct(state), tt_contract(state.means()))
        for c in state.cores:
            c.mean[:] = 0.0
        assert not reconstruct(state).any()

    def test_noiseless_exact_recovery(self):
        t, _ = gen_synthetic(SynthSpec((10, 10, 10), (1, 3, 3, 1), seed=3))
        state, report = fit(t, np.ones(t.shape, bool), truth=t)
        assert state.ranks == [1, 3, 3, 1]
        assert report.rse_history[-1] <= 1e-3

    def test_ranks_monotone(self, synthetic):
        t, y = synthetic
        _, report = fit(y, random_mask(t.shape, 0.4, 3), FitOptions(max_iters=15))
        hist = np.array(report.ranks_history)
        assert np.all(np.diff(hist, axis=0) <= 0)
