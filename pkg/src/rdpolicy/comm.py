"""Choose which extra nodes each agent should observe.

An oracle scores an observation set ``S`` for agent ``i`` with
``I(u*_i; x_i, x_S)``; selection maximizes that score exactly (exhaustive
search) or greedily. Distortion curves compare the chosen sets against
uniformly random ones.
"""

from dataclasses import dataclass
import itertools
from math import comb
import warnings

import numpy as np
import pandas as pd

from .errors import CombinatorialBudgetExceeded, ValidationError
from .gaussian_rd import conditional_regressor, gaussian_mi
from .mi import DegenerateColumnWarning, DiscretizationScheme, discretize, mi_joint_est, product_code

MAX_EXHAUSTIVE_SETS = 10 ** 6
TIE_TOL = 1e-12
N_RANDOM = 50


@dataclass(frozen=True)
class SelectionResult:
    agent: int
    k: int
    chosen: tuple
    score: float
    method: str


class GaussianOracle:
    """Exact joint mutual information under a Gaussian ensemble."""

    def __init__(self, ens):
        self.ens = ens

    def candidates(self, agent):
        return [j for j in self.ens.states if j != agent]

    def __call__(self, agent, extra):
        ens = self.ens
        return gaussian_mi(ens.cov, [ens.u(agent)], [ens.x(agent)] + [ens.x(j) for j in extra])


class SampleOracle:
    """Discretized joint mutual information estimated on a subset of dataset rows.

    Each node's state columns are binned with ``scheme`` and product-coded.
    ``rows`` should be training rows only.
    """

    def __init__(self, dataset, scheme=DiscretizationScheme(), rows=None, estimator="plugin-mm"):
        self.dataset = dataset
        self.scheme = scheme
        self.estimator = estimator
        self.rows = np.arange(dataset.n_rows) if rows is None else np.asarray(rows)
        frame = dataset.frame.iloc[self.rows]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateColumnWarning)
            self.codes = {}
            for n, cols in dataset.state_columns.items():
                labels = discretize(frame[cols].to_numpy(dtype=float), scheme).labels
                self.codes[n] = product_code(labels)
            self.targets = {a: discretize(frame[c].to_numpy(dtype=float), scheme).labels[:, 0]
                            for a, c in dataset.action_columns.items()}
        self._cache = {}

    def candidates(self, agent):
        return [n for n in self.dataset.state_nodes if n != agent]

    def __call__(self, agent, extra):
        key = (agent, tuple(sorted(extra)))
        if key not in self._cache:
            observed = [self.codes[agent]] + [self.codes[j] for j in key[1]]
            self._cache[key] = mi_joint_est(self.targets[agent], observed, estimator=self.estimator)
        return self._cache[key]

    def coarsened(self, bins):
        return SampleOracle(self.dataset, self.scheme.with_bins(bins), self.rows, self.estimator)


def _budget(oracle, agent, k):
    cands = oracle.candidates(agent)
    if k < 0:
        raise ValidationError("k must be non-negative")
    return cands, min(k, len(cands))


def select_exhaustive(oracle, agent, k, max_sets=MAX_EXHAUSTIVE_SETS):
    """Global maximizer of the oracle over all size-k sets; ties go to the lexicographically smallest."""
    cands, k = _budget(oracle, agent, k)
    n_sets = comb(len(cands), k)
    if n_sets > max_sets:
        raise CombinatorialBudgetExceeded(f"{n_sets} candidate sets exceed the budget of {max_sets}")
    best, best_score = None, -np.inf
    for S in itertools.combinations(sorted(cands), k):
        s = oracle(agent, S)
        if s > best_score + TIE_TOL:
            best, best_score = S, s
    return SelectionResult(agent, k, tuple(best), float(best_score), "exhaustive")


def select_greedy(oracle, agent, k):
    """Forward selection on the marginal oracle gain; ties go to the lowest index."""
    cands, k = _budget(oracle, agent, k)
    chosen = []
    score = oracle(agent, ())
    for _ in range(k):
        best, best_score = None, -np.inf
        for j in sorted(cands):
            if j in chosen:
                continue
            s = oracle(agent, tuple(chosen) + (j,))
            if s > best_score + TIE_TOL:
                best, best_score = j, s
        chosen.append(best)
        score = best_score
    return SelectionResult(agent, k, tuple(chosen), float(score), "greedy")


def random_sets(candidates, k, n_draws, rng):
    cands = np.array(sorted(candidates))
    return [tuple(sorted(int(c) for c in rng.choice(cands, size=k, replace=False))) for _ in range(n_draws)]


def distortion_vs_k_curve(oracle, evaluator, agent, k_range, strategy="optimal", n_random=N_RANDOM,
                          rng=None, method="exhaustive"):
    """Rows of (k, strategy, score, distortion, members) for plotting distortion against k.

    ``evaluator(agent, extra)`` returns the distortion of a policy trained on
    the agent's own state plus ``extra``. The random strategy averages over
    ``n_random`` uniformly drawn sets per k.
    """
    select = select_exhaustive if method == "exhaustive" else select_greedy
    rows = []
    for k in k_range:
        if strategy == "optimal":
            res = select(oracle, agent, k)
            rows.append({"agent": agent, "k": k, "strategy": "optimal", "score": res.score,
                         "distortion": float(evaluator(agent, res.chosen)),
                         "members": " ".join(map(str, res.chosen))})
        elif strategy == "random":
            if rng is None:
                raise ValidationError("random strategy needs an rng")
            sets = random_sets(oracle.candidates(agent), k, n_random, rng)
            scores = [oracle(agent, S) for S in sets]
            dist = [float(evaluator(agent, S)) for S in sets]
            rows.append({"agent": agent, "k": k, "strategy": "random", "score": float(np.mean(scores)),
                         "distortion": float(np.mean(dist)), "members": "",
                         "distortion_std": float(np.std(dist)), "n_sets": len(sets)})
        else:
            raise ValidationError(f"unknown strategy {strategy!r}")
    return pd.DataFrame(rows)


def gaussian_evaluator(ens):
    """Closed-form distortion of the conditional-expectation policy."""
    def evaluate(agent, extra):
        return conditional_regressor(ens, agent, (agent,) + tuple(extra)).predicted_mse
    return evaluate
