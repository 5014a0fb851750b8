import math

import numpy as np
import pytest
import scipy.linalg

from duality_lab.errors import (
    GridMismatchError,
    NegativeRateError,
    NoiseNotSpdError,
    PriorSimplexError,
    RowSumError,
    ValidationError,
)
from duality_lab.finite_hmm import (
    FiniteHmm,
    JumpPath,
    _sample_states_batch,
    _zakai_terminal_batch,
    carre_du_champ,
    conditional_mse_mc,
    forward_kolmogorov,
    generator_apply,
    sample_ctmc,
    simulate_observations,
    states_on_grid,
    validate_hmm,
    zakai_filter,
)
from duality_lab.numkit import (
    ObservationPath,
    SeededRng,
    TimeGrid,
    rk4_linear_step_matrix,
)


def symmetric_chain(lam=1.0):
    return FiniteHmm(
        rate=[[-lam, lam], [lam, -lam]],
        h_mat=[[0.0], [1.0]],
        r_cov=[[1.0]],
        prior=[0.5, 0.5],
    )


def frozen_chain(h=((0.0,), (1.0,)), r=1.0):
    return FiniteHmm(
        rate=np.zeros((2, 2)), h_mat=h, r_cov=[[r]], prior=[0.5, 0.5],
    )


class TestValidation:
    def test_symmetric_chain_ok(self):
        validate_hmm(symmetric_chain())

    def test_row_sum_violation(self):
        bad = FiniteHmm(
            rate=[[-0.9, 1.0], [1.0, -1.0]], h_mat=[[0.0], [1.0]],
            r_cov=[[1.0]], prior=[0.5, 0.5],
        )
        with pytest.raises(RowSumError):
            validate_hmm(bad)

    def test_negative_rate(self):
        bad = FiniteHmm(
            rate=[[1.0, -1.0], [1.0, -1.0]], h_mat=[[0.0], [1.0]],
            r_cov=[[1.0]], prior=[0.5, 0.5],
        )
        with pytest.raises(NegativeRateError):
            validate_hmm(bad)

    def test_prior_off_simplex(self):
        bad = FiniteHmm(
            rate=[[-1.0, 1.0], [1.0, -1.0]], h_mat=[[0.0], [1.0]],
            r_cov=[[1.0]], prior=[0.6, 0.6],
        )
        with pytest.raises(PriorSimplexError):
            validate_hmm(bad)

    def test_noise_not_spd(self):
        bad = FiniteHmm(
            rate=[[-1.0, 1.0], [1.0, -1.0]], h_mat=[[0.0], [1.0]],
            r_cov=[[0.0]], prior=[0.5, 0.5],
        )
        with pytest.raises(NoiseNotSpdError):
            validate_hmm(bad)


class TestJumpPath:
    def test_state_lookup(self):
        path = JumpPath([0.0, 0.4, 0.9], [1, 0, 1], 2.0)
        assert path.state_at(0.0) == 1
        assert path.state_at(0.39) == 1
        assert path.state_at(0.4) == 0
        assert path.state_at(1.5) == 1

    def test_rejects_unsorted(self):
        with pytest.raises(ValidationError):
            JumpPath([0.0, 0.5, 0.5], [0, 1, 0], 1.0)

    def test_rejects_missing_origin(self):
        with pytest.raises(ValidationError):
            JumpPath([0.1, 0.5], [0, 1], 1.0)


class TestSampleCtmc:
    def test_frozen_chain_single_interval(self):
        path = sample_ctmc(frozen_chain(), 5.0, SeededRng(3))
        assert path.times.size == 1
        assert path.times[0] == 0.0

    def test_determinism(self):
        a = sample_ctmc(symmetric_chain(), 10.0, SeededRng(42, 7))
        b = sample_ctmc(symmetric_chain(), 10.0, SeededRng(42, 7))
        np.testing.assert_array_equal(a.times, b.times)
        np.testing.assert_array_equal(a.states, b.states)

    def test_occupancy_matches_stationary_law(self):
        # Symmetric 2-state chain spends half its time in each state.
        hmm = symmetric_chain()
        big_t = 200.0
        rng = SeededRng(11)
        fractions = np.empty(1000)
        for i in range(1000):
            path = sample_ctmc(hmm, big_t, rng.stream(i))
            bounds = np.append(path.times, big_t)
            durations = np.diff(bounds)
            fractions[i] = durations[path.states == 0].sum() / big_t
        se = fractions.std() / math.sqrt(fractions.size)
        assert abs(fractions.mean() - 0.5) < 3.0 * se

    def test_absorbing_state(self):
        hmm = FiniteHmm(
            rate=[[-2.0, 2.0], [0.0, 0.0]], h_mat=[[0.0], [1.0]],
            r_cov=[[1.0]], prior=[1.0, 0.0],
        )
        path = sample_ctmc(hmm, 100.0, SeededRng(5))
        # One jump into the absorbing state, then nothing.
        assert path.states[-1] == 1
        assert path.times.size <= 2


class TestSimulateObservations:
    def test_noiseless_limit(self):
        hmm = frozen_chain(r=0.0)
        grid = TimeGrid(0.0, 1.0, 10)
        path = JumpPath([0.0], [1], 1.0)
        zpath = simulate_observations(hmm, path, grid, SeededRng(1))
        np.testing.assert_array_equal(zpath.dz, np.full((10, 1), grid.dt))

    def test_zero_readout_gives_pure_noise(self):
        hmm = FiniteHmm(
            rate=np.zeros((2, 2)), h_mat=np.zeros((2, 1)),
            r_cov=[[1.0]], prior=[0.5, 0.5],
        )
        grid = TimeGrid(0.0, 1.0, 64)
        path = JumpPath([0.0], [0], 1.0)
        zpath = simulate_observations(hmm, path, grid, SeededRng(2, 1))
        from duality_lab.numkit import sample_gaussian_increments

        expect = sample_gaussian_increments(
            SeededRng(2, 1), 1, grid, [[1.0]]
        )
        np.testing.assert_array_equal(zpath.dz, expect)

    def test_frozen_state_mean_rate(self):
        hmm = FiniteHmm(
            rate=np.zeros((2, 2)), h_mat=[[0.0], [0.7]],
            r_cov=[[1.0]], prior=[0.0, 1.0],
        )
        grid = TimeGrid(0.0, 100.0, 100000)
        path = JumpPath([0.0], [1], 100.0)
        zpath = simulate_observations(hmm, path, grid, SeededRng(6))
        rates = zpath.dz[:, 0] / grid.dt
        se = rates.std() / math.sqrt(rates.size)
        assert abs(rates.mean() - 0.7) < 3.0 * se

    def test_grid_past_horizon_rejected(self):
        hmm = frozen_chain()
        path = JumpPath([0.0], [0], 1.0)
        with pytest.raises(GridMismatchError):
            simulate_observations(
                hmm, path, TimeGrid(0.0, 2.0, 10), SeededRng(1)
            )

    def test_left_endpoint_states(self):
        path = JumpPath([0.0, 0.25], [0, 1], 1.0)
        grid = TimeGrid(0.0, 1.0, 4)
        np.testing.assert_array_equal(
            states_on_grid(path, grid), [0, 1, 1, 1, 1]
        )


class TestForwardKolmogorov:
    def test_frozen_chain(self):
        hmm = frozen_chain()
        mus = forward_kolmogorov(hmm, TimeGrid(0.0, 2.0, 20))
        np.testing.assert_allclose(mus, 0.5, atol=1e-15)

    def test_stationary_prior_fixed(self):
        hmm = FiniteHmm(
            rate=[[-1.0, 1.0], [2.0, -2.0]], h_mat=[[0.0], [1.0]],
            r_cov=[[1.0]], prior=[2.0 / 3.0, 1.0 / 3.0],
        )
        mus = forward_kolmogorov(hmm, TimeGrid(0.0, 5.0, 500))
        assert np.max(np.abs(mus - hmm.prior)) < 1e-8

    def test_three_state_stationary_from_nullspace(self):
        gen = np.random.default_rng(19)
        off = gen.uniform(0.2, 1.5, (3, 3))
        rate = off - np.diag(np.diag(off))
        rate -= np.diag(rate.sum(axis=1))
        ns = scipy.linalg.null_space(rate.T)
        pi = np.abs(ns[:, 0])
        pi /= pi.sum()
        hmm = FiniteHmm(
            rate=rate, h_mat=np.zeros((3, 1)), r_cov=[[1.0]], prior=pi,
        )
        mus = forward_kolmogorov(hmm, TimeGrid(0.0, 3.0, 300))
        assert np.max(np.abs(mus - pi)) < 1e-8

    def test_mass_conservation(self):
        hmm = FiniteHmm(
            rate=[[-0.7, 0.7], [1.3, -1.3]], h_mat=[[0.0], [1.0]],
            r_cov=[[1.0]], prior=[0.9, 0.1],
        )
        mus = forward_kolmogorov(hmm, TimeGrid(0.0, 10.0, 1000))
        np.testing.assert_allclose(mus.sum(axis=1), 1.0, atol=1e-9)

    def test_two_state_closed_form(self):
        # Symmetric chain relaxes as mu_2(t) = 1/2 + (mu_2(0)-1/2)e^{-2t}.
        hmm = FiniteHmm(
            rate=[[-1.0, 1.0], [1.0, -1.0]], h_mat=[[0.0], [1.0]],
            r_cov=[[1.0]], prior=[0.9, 0.1],
        )
        grid = TimeGrid(0.0, 1.0, 200)
        mus = forward_kolmogorov(hmm, grid)
        expect = 0.5 + (0.1 - 0.5) * np.exp(-2.0 * grid.nodes())
        assert np.max(np.abs(mus[:, 1] - expect)) < 1e-9


class TestZakaiFilter:
    def test_no_information_reduces_to_marginals(self):
        hmm = FiniteHmm(
            rate=[[-1.0, 1.0], [2.0, -2.0]], h_mat=np.zeros((2, 1)),
            r_cov=[[1.0]], prior=[0.8, 0.2],
        )
        grid = TimeGrid(0.0, 1.0, 1000)
        gen = np.random.default_rng(33)
        dz = gen.standard_normal((1000, 1)) * math.sqrt(grid.dt)
        beliefs = zakai_filter(hmm, ObservationPath(grid, dz))
        mus = forward_kolmogorov(hmm, grid)
        assert np.max(np.abs(beliefs.normalized - mus)) < 1e-8

    def test_frozen_chain_product_formula(self):
        # rate = 0, h = (0,1), R = 1: the state-2 belief is the running
        # product of (1 + dz_k), state 1 stays at the prior mass.
        hmm = frozen_chain()
        grid = TimeGrid(0.0, 1.0, 50)
        gen = np.random.default_rng(71)
        dz = 0.1 * gen.standard_normal((50, 1))
        beliefs = zakai_filter(hmm, ObservationPath(grid, dz))
        assert beliefs.clip_total == 0.0
        prods = np.concatenate(([1.0], np.cumprod(1.0 + dz[:, 0])))
        np.testing.assert_allclose(
            beliefs.unnormalized[:, 1], 0.5 * prods, rtol=1e-12
        )
        np.testing.assert_allclose(beliefs.unnormalized[:, 0], 0.5)

    def test_linear_in_prior(self):
        grid = TimeGrid(0.0, 1.0, 200)
        gen = np.random.default_rng(8)
        dz = 0.05 * gen.standard_normal((200, 1))
        zpath = ObservationPath(grid, dz)
        rate = [[-1.0, 1.0], [0.5, -0.5]]
        pri_a = [0.9, 0.1]
        pri_b = [0.2, 0.8]
        mix = [(a + b) / 2.0 for a, b in zip(pri_a, pri_b)]
        runs = {}
        for name, pri in (("a", pri_a), ("b", pri_b), ("mix", mix)):
            hmm = FiniteHmm(
                rate=rate, h_mat=[[0.0], [1.0]], r_cov=[[1.0]], prior=pri,
            )
            out = zakai_filter(hmm, zpath)
            assert out.clip_total == 0.0
            runs[name] = out.unnormalized
        avg = 0.5 * (runs["a"] + runs["b"])
        assert np.max(np.abs(runs["mix"] - avg)) < 1e-10

    def test_simplex_invariants(self):
        hmm = symmetric_chain()
        grid = TimeGrid(0.0, 1.0, 500)
        path = sample_ctmc(hmm, 1.0, SeededRng(14))
        zpath = simulate_observations(hmm, path, grid, SeededRng(15))
        out = zakai_filter(hmm, zpath)
        assert np.all(out.unnormalized >= 0.0)
        np.testing.assert_allclose(out.normalized.sum(axis=1), 1.0, atol=1e-9)

    def test_prewhitening_matches_identity_run(self):
        # Scaling h by c, R by c^2, and dz by c whitens to the exact same
        # arithmetic as the base run, so the outputs must coincide.
        grid = TimeGrid(0.0, 1.0, 300)
        gen = np.random.default_rng(29)
        dz = 0.1 * gen.standard_normal((300, 1))
        base = symmetric_chain()
        scaled = FiniteHmm(
            rate=base.rate, h_mat=2.0 * base.h_mat, r_cov=[[4.0]],
            prior=base.prior,
        )
        out_base = zakai_filter(base, ObservationPath(grid, dz))
        out_scaled = zakai_filter(
            scaled, ObservationPath(grid, 2.0 * dz)
        )
        assert np.max(
            np.abs(out_base.normalized - out_scaled.normalized)
        ) < 1e-12

    def test_tower_property(self):
        # E[pi_T] must reproduce the marginal law.
        hmm = FiniteHmm(
            rate=[[-1.0, 1.0], [2.0, -2.0]], h_mat=[[0.0], [1.0]],
            r_cov=[[1.0]], prior=[0.7, 0.3],
        )
        grid = TimeGrid(0.0, 1.0, 200)
        nodes = grid.nodes()
        gen = SeededRng(202).generator()
        n_paths = 10000
        states = _sample_states_batch(gen, hmm, nodes, 1.0, n_paths)
        dw = gen.standard_normal((n_paths, 200, 1)) * math.sqrt(grid.dt)
        h_path = hmm.h_mat[states[:, :-1]]
        dz = h_path * grid.dt + dw
        step_m = rk4_linear_step_matrix(hmm.rate, grid.dt)
        pi_t = _zakai_terminal_batch(hmm, hmm.h_mat, step_m, states, dz)
        mu_t = forward_kolmogorov(hmm, grid)[-1]
        for j in range(2):
            se = pi_t[:, j].std() / math.sqrt(n_paths)
            assert abs(pi_t[:, j].mean() - mu_t[j]) < 3.0 * se

    def test_strong_signal_concentrates(self):
        # Frozen two-hypothesis problem: the belief locks onto the true
        # state with overwhelming probability by T = 50.
        hmm = frozen_chain()
        grid = TimeGrid(0.0, 50.0, 2500)
        nodes = grid.nodes()
        gen = SeededRng(909).generator()
        n_paths = 300
        states = _sample_states_batch(gen, hmm, nodes, 50.0, n_paths)
        dw = gen.standard_normal((n_paths, 2500, 1)) * math.sqrt(grid.dt)
        dz = hmm.h_mat[states[:, :-1]] * grid.dt + dw
        step_m = rk4_linear_step_matrix(hmm.rate, grid.dt)
        pi_t = _zakai_terminal_batch(hmm, hmm.h_mat, step_m, states, dz)
        correct = np.argmax(pi_t, axis=1) == states[:, -1]
        assert correct.mean() > 0.99


class TestCarreDuChamp:
    def test_constant_function_vanishes(self):
        hmm = symmetric_chain()
        np.testing.assert_array_equal(
            carre_du_champ(hmm, [3.0, 3.0]), [0.0, 0.0]
        )

    def test_two_state_hand_values(self):
        hmm = FiniteHmm(
            rate=[[-2.0, 2.0], [3.0, -3.0]], h_mat=[[0.0], [1.0]],
            r_cov=[[1.0]], prior=[0.5, 0.5],
        )
        np.testing.assert_array_equal(
            carre_du_champ(hmm, [0.0, 1.0]), [2.0, 3.0]
        )

    def test_definitional_identity(self):
        gen = np.random.default_rng(123)
        for _ in range(50):
            d = int(gen.integers(2, 7))
            off = gen.uniform(0.0, 2.0, (d, d))
            rate = off - np.diag(np.diag(off))
            rate -= np.diag(rate.sum(axis=1))
            prior = np.full(d, 1.0 / d)
            hmm = FiniteHmm(
                rate=rate, h_mat=np.zeros((d, 1)), r_cov=[[1.0]],
                prior=prior,
            )
            f = gen.standard_normal(d)
            gamma = carre_du_champ(hmm, f)
            ident = generator_apply(hmm, f * f) - 2.0 * f * generator_apply(
                hmm, f
            )
            assert np.max(np.abs(gamma - ident)) <= 1e-12
            assert np.all(gamma >= 0.0)


class TestConditionalMseMc:
    def test_static_variance(self):
        # Frozen chain, blind observations: the filter never moves off
        # the prior, so the error is exactly the prior variance of f.
        hmm = FiniteHmm(
            rate=np.zeros((2, 2)), h_mat=np.zeros((2, 1)),
            r_cov=[[1.0]], prior=[0.5, 0.5],
        )
        est, se = conditional_mse_mc(
            hmm, [0.0, 1.0], 1.0, 2000, SeededRng(10), n_steps=50
        )
        assert est == 0.25
        assert se == 0.0

    def test_sharp_observations(self):
        hmm = frozen_chain(r=1e-6)
        est, se = conditional_mse_mc(
            hmm, [0.0, 1.0], 1.0, 400, SeededRng(77), n_steps=400
        )
        assert est <= 3.0 * se + 1e-9

    def test_determinism_and_thread_invariance(self):
        hmm = symmetric_chain()
        a = conditional_mse_mc(
            hmm, [0.0, 1.0], 1.0, 3000, SeededRng(55, 2), n_steps=100
        )
        b = conditional_mse_mc(
            hmm, [0.0, 1.0], 1.0, 3000, SeededRng(55, 2), n_steps=100
        )
        c = conditional_mse_mc(
            hmm, [0.0, 1.0], 1.0, 3000, SeededRng(55, 2), n_steps=100,
            threads=4,
        )
        assert a == b == c

    def test_batch_chain_matches_occupancy(self):
        # The vectorized jump sampler must reproduce the stationary
        # occupancy of the symmetric chain at a fixed time.
        hmm = symmetric_chain()
        grid = TimeGrid(0.0, 3.0, 30)
        gen = SeededRng(404).generator()
        states = _sample_states_batch(gen, hmm, grid.nodes(), 3.0, 20000)
        frac = (states[:, -1] == 1).mean()
        assert abs(frac - 0.5) < 0.015
