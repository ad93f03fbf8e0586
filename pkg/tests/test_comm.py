import itertools

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from rdpolicy.comm import (GaussianOracle, SampleOracle, distortion_vs_k_curve, gaussian_evaluator,
                           random_sets, select_exhaustive, select_greedy)
from rdpolicy.errors import AlphabetExplosion, CombinatorialBudgetExceeded, ValidationError
from rdpolicy.gaussian_rd import (GaussianEnsemble, conditional_regressor, gaussian_mi, planted_comm_ensemble,
                                  random_ensemble)
from rdpolicy.mi import DiscretizationScheme
from rdpolicy.scenario import TimeSeriesDataset


def brute_force(ens, agent, k):
    """Every size-k set scored directly with the closed form; returns (best score, all maximizers)."""
    cands = [j for j in ens.states if j != agent]
    scores = {S: gaussian_mi(ens.cov, [ens.u(agent)], [ens.x(agent)] + [ens.x(j) for j in S])
              for S in itertools.combinations(sorted(cands), k)}
    best = max(scores.values())
    return best, sorted(S for S, v in scores.items() if v >= best - 1e-12)


class TestExhaustive:
    @pytest.mark.parametrize("seed", range(5))
    def test_planted_k1(self, seed):
        res = select_exhaustive(GaussianOracle(planted_comm_ensemble(seed)), 1, 1)
        assert res.chosen == (9,)

    def test_k0(self):
        ens = planted_comm_ensemble(0)
        res = select_exhaustive(GaussianOracle(ens), 1, 0)
        assert res.chosen == ()
        assert res.score == pytest.approx(gaussian_mi(ens.cov, [ens.u(1)], [ens.x(1)]))

    def test_full_observation(self):
        ens = planted_comm_ensemble(0)
        oracle = GaussianOracle(ens)
        full = select_exhaustive(oracle, 1, 9)
        assert full.chosen == tuple(range(2, 11))
        assert all(full.score >= select_exhaustive(oracle, 1, k).score - 1e-12 for k in range(9))

    def test_k_above_budget_is_capped(self):
        res = select_exhaustive(GaussianOracle(planted_comm_ensemble(0)), 1, 20)
        assert len(res.chosen) == 9

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 3))
    def test_matches_brute_force(self, seed, k):
        ens = random_ensemble(1, seed, n_states=6)
        res = select_exhaustive(GaussianOracle(ens), 1, k)
        best, winners = brute_force(ens, 1, k)
        assert res.score == pytest.approx(best, abs=1e-12)
        assert res.chosen == winners[0]

    def test_budget_guard(self):
        ens = random_ensemble(1, 0, n_states=30)
        with pytest.raises(CombinatorialBudgetExceeded):
            select_exhaustive(GaussianOracle(ens), 1, 15)

    def test_negative_k(self):
        with pytest.raises(ValidationError):
            select_exhaustive(GaussianOracle(planted_comm_ensemble(0)), 1, -1)

    def test_deterministic(self):
        oracle = GaussianOracle(random_ensemble(1, 3, n_states=7))
        assert select_exhaustive(oracle, 1, 3) == select_exhaustive(oracle, 1, 3)


def duplicated_ensemble():
    # x_2 and x_4 are the same variable; x_3 is weaker
    cov = np.array([
        [1.0, 0.3, 0.6, 0.2, 0.6],
        [0.3, 1.0, 0.1, 0.0, 0.1],
        [0.6, 0.1, 1.0, 0.1, 1.0],
        [0.2, 0.0, 0.1, 1.0, 0.1],
        [0.6, 0.1, 1.0, 0.1, 1.0],
    ])
    return GaussianEnsemble(np.zeros(5), cov, ["u_star_1", "x_1", "x_2", "x_3", "x_4"])


class TestGreedy:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_k1_equals_exhaustive(self, seed):
        oracle = GaussianOracle(random_ensemble(1, seed, n_states=6))
        assert select_greedy(oracle, 1, 1).chosen == select_exhaustive(oracle, 1, 1).chosen

    def test_duplicate_tie_goes_low(self):
        oracle = GaussianOracle(duplicated_ensemble())
        assert select_greedy(oracle, 1, 1).chosen == (2,)
        assert select_exhaustive(oracle, 1, 1).chosen == (2,)

    def test_ninety_percent_of_exhaustive(self):
        # greedy is a heuristic: synergistic pairs can fool it, so this is a rate, not a bound
        ratios = []
        for seed in range(20):
            oracle = GaussianOracle(random_ensemble(1, seed, n_states=8))
            for k in (1, 2, 3):
                ex = select_exhaustive(oracle, 1, k).score
                gr = select_greedy(oracle, 1, k).score
                ratios.append(gr / ex if ex > 0 else 1.0)
        ratios = np.array(ratios)
        print(f"greedy/exhaustive: min {ratios.min():.3f}, median {np.median(ratios):.3f}, "
              f"share >= 0.9: {np.mean(ratios >= 0.9):.2f}")
        assert np.all(ratios <= 1 + 1e-12)
        assert np.mean(ratios >= 0.9) >= 0.9

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 4))
    def test_dominance_chain(self, seed, k):
        oracle = GaussianOracle(random_ensemble(1, seed, n_states=7))
        ex = select_exhaustive(oracle, 1, k).score
        gr = select_greedy(oracle, 1, k).score
        zero = select_exhaustive(oracle, 1, 0).score
        assert ex >= gr - 1e-12 >= zero - 2e-12

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_exhaustive_score_monotone(self, seed):
        oracle = GaussianOracle(random_ensemble(1, seed, n_states=6))
        s = [select_exhaustive(oracle, 1, k).score for k in range(6)]
        assert np.all(np.diff(s) >= -1e-12)


class TestCurves:
    def setup_method(self):
        self.ens = planted_comm_ensemble(0)
        self.oracle = GaussianOracle(self.ens)
        self.evaluate = gaussian_evaluator(self.ens)

    def test_optimal_below_random(self):
        ks = range(10)
        opt = distortion_vs_k_curve(self.oracle, self.evaluate, 1, ks, "optimal")
        rnd = distortion_vs_k_curve(self.oracle, self.evaluate, 1, ks, "random", rng=np.random.default_rng(0))
        assert np.all(opt["distortion"].to_numpy() <= rnd["distortion"].to_numpy() + 1e-12)
        assert np.all(np.diff(opt["distortion"].to_numpy()) <= 1e-12)
        # only one set of size N-1 exists
        assert opt["distortion"].iloc[-1] == pytest.approx(rnd["distortion"].iloc[-1], abs=1e-12)
        assert (rnd["n_sets"] == 50).all()

    def test_full_set_is_conditional_variance(self):
        ens = self.ens
        opt = distortion_vs_k_curve(self.oracle, self.evaluate, 1, [9], "optimal")
        x = [ens.x(j) for j in ens.states]
        S = ens.cov[np.ix_(x, x)]
        c = ens.cov[ens.u(1), x]
        assert opt["distortion"].iloc[0] == pytest.approx(ens.cov[0, 0] - c @ np.linalg.solve(S, c), rel=1e-10)

    def test_random_needs_rng(self):
        with pytest.raises(ValidationError):
            distortion_vs_k_curve(self.oracle, self.evaluate, 1, [1], "random")

    def test_unknown_strategy(self):
        with pytest.raises(ValidationError):
            distortion_vs_k_curve(self.oracle, self.evaluate, 1, [1], "best")

    def test_realized_mse_matches_prediction(self):
        Z = self.ens.draw(300_000, np.random.default_rng(3))
        for k in (1, 3):
            res = select_exhaustive(self.oracle, 1, k)
            S = (1,) + res.chosen
            reg = conditional_regressor(self.ens, 1, S)
            mse = np.mean((reg(Z[:, [self.ens.x(j) for j in S]]) - Z[:, 0]) ** 2)
            assert mse == pytest.approx(reg.predicted_mse, rel=0.02)

    def test_random_sets(self):
        sets = random_sets([2, 3, 4, 5], 2, 30, np.random.default_rng(0))
        assert len(sets) == 30
        assert all(len(set(S)) == 2 and S == tuple(sorted(S)) for S in sets)


def sample_dataset(T=6000, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((T, 5))
    u = 0.5 * x[:, 0] + 1.2 * x[:, 3] + 0.1 * rng.standard_normal(T)
    frame = pd.DataFrame({f"x_{i + 1}": x[:, i] for i in range(5)})
    frame["u_star_1"] = u
    return TimeSeriesDataset.from_frame(frame).with_split(seed)


class TestSampleOracle:
    def test_picks_informative_node(self):
        ds = sample_dataset()
        oracle = SampleOracle(ds, DiscretizationScheme("quantile", 8), ds.rows("train"))
        assert select_exhaustive(oracle, 1, 1).chosen == (4,)

    def test_uses_only_given_rows(self):
        ds = sample_dataset()
        tr = ds.rows("train")
        a = SampleOracle(ds, DiscretizationScheme("quantile", 6), tr)(1, (4,))
        sub = TimeSeriesDataset.from_frame(ds.frame.iloc[tr])
        b = SampleOracle(sub, DiscretizationScheme("quantile", 6))(1, (4,))
        assert a == b

    def test_explosion_and_coarsening(self):
        ds = sample_dataset(T=1500)
        oracle = SampleOracle(ds, DiscretizationScheme("quantile", 10), ds.rows("train"))
        with pytest.raises(AlphabetExplosion):
            select_exhaustive(oracle, 1, 2)
        res = select_exhaustive(oracle.coarsened(3), 1, 2)
        assert 4 in res.chosen

    def test_score_monotone_within_slack(self):
        ds = sample_dataset(T=20_000)
        oracle = SampleOracle(ds, DiscretizationScheme("quantile", 4), ds.rows("train"))
        s = [select_exhaustive(oracle, 1, k).score for k in range(4)]
        assert np.all(np.diff(s) >= -0.02)
