"""Closed-form rate-distortion quantities for jointly Gaussian actions and states.

An ensemble indexes its entries with labels ``u_star_<node>`` (optimal
actions) and ``x_<node>`` (scalar node states). The agent at node ``i``
reconstructs ``u_star_i`` and always sees ``x_i``. Information is in nats.
"""

from dataclasses import dataclass
import re

import numpy as np
import yaml

from .errors import SingularCovariance, SingularObservedCovariance, ValidationError

FORMAT_VERSION = 1
MAX_CONDITION = 1e12
_LABEL = re.compile(r"^(u_star|x)_(\d+)$")


@dataclass(frozen=True)
class GaussianEnsemble:
    mean: np.ndarray
    cov: np.ndarray
    labels: tuple

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        labels = tuple(self.labels)
        d = len(labels)
        if mean.shape != (d,) or cov.shape != (d, d):
            raise ValidationError(f"ensemble shapes {mean.shape}, {cov.shape} do not match {d} labels")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValidationError("covariance is not symmetric")
        if np.any(np.diag(cov) <= 0):
            raise SingularCovariance("covariance has a non-positive variance")
        for lab in labels:
            if not _LABEL.match(lab):
                raise ValidationError(f"bad ensemble label {lab!r}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "labels", labels)

    def position(self, label):
        return self.labels.index(label)

    @property
    def agents(self):
        return [int(_LABEL.match(l).group(2)) for l in self.labels if l.startswith("u_star_")]

    @property
    def states(self):
        return [int(_LABEL.match(l).group(2)) for l in self.labels if l.startswith("x_")]

    def u(self, agent):
        return self.position(f"u_star_{agent}")

    def x(self, node):
        return self.position(f"x_{node}")

    def std(self, label):
        k = self.position(label)
        return float(np.sqrt(self.cov[k, k]))

    def corr(self, a, b):
        i, j = self.position(a), self.position(b)
        return float(self.cov[i, j] / np.sqrt(self.cov[i, i] * self.cov[j, j]))

    def draw(self, n, rng):
        """``n`` i.i.d. samples as an ``(n, d)`` array."""
        L = np.linalg.cholesky(self.cov)
        return self.mean + rng.standard_normal((n, len(self.labels))) @ L.T


@dataclass
class RateReport:
    gamma: np.ndarray  # gamma[i, j] = I(x_i; u*_j), rows follow ens.states, columns ens.agents
    delta: np.ndarray  # delta[i, j] = I(x_i; x_j); infinite on the diagonal
    d_star: float
    per_agent: np.ndarray
    states: list
    agents: list


@dataclass
class AffinePolicy:
    agent: int
    observed: tuple
    weights: np.ndarray
    intercept: float
    predicted_mse: float

    def __call__(self, x_obs):
        return self.intercept + np.asarray(x_obs, dtype=float) @ self.weights


def _check_pd(sub, what=SingularCovariance):
    w = np.linalg.eigvalsh(sub)
    if w[0] <= 0 or w[-1] / w[0] > MAX_CONDITION:
        raise what(f"covariance block is singular or ill-conditioned (eigenvalues {w[0]:.3e}..{w[-1]:.3e})")


def gaussian_mi(cov, set_a, set_b):
    """I(A; B) = (ln det S_AA + ln det S_BB - ln det S_{A+B}) / 2 for jointly Gaussian blocks."""
    cov = np.asarray(cov, dtype=float)
    a = list(np.atleast_1d(set_a))
    b = list(np.atleast_1d(set_b))
    if not a or not b:
        return 0.0
    ab = a + b
    if len(set(ab)) < len(ab):
        raise SingularCovariance("index sets overlap, mutual information is infinite")
    sub = cov[np.ix_(ab, ab)]
    _check_pd(sub)
    _, ld_a = np.linalg.slogdet(cov[np.ix_(a, a)])
    _, ld_b = np.linalg.slogdet(cov[np.ix_(b, b)])
    _, ld_ab = np.linalg.slogdet(sub)
    return max(0.5 * (ld_a + ld_b - ld_ab), 0.0)


def conditional_regressor(ens, agent, observed):
    """Conditional expectation of ``u_star_<agent>`` given the observed node states."""
    observed = tuple(observed)
    if agent not in observed:
        raise ValidationError(f"agent {agent} must observe its own state x_{agent}")
    u = ens.u(agent)
    S = [ens.x(j) for j in observed]
    Sss = ens.cov[np.ix_(S, S)]
    _check_pd(Sss, SingularObservedCovariance)
    Sus = ens.cov[u, S]
    w = np.linalg.solve(Sss, Sus)
    intercept = float(ens.mean[u] - w @ ens.mean[S])
    mse = float(ens.cov[u, u] - Sus @ w)
    return AffinePolicy(agent=agent, observed=observed, weights=w, intercept=intercept,
                        predicted_mse=max(mse, 0.0))


def optimal_stddev_shrinkage(ens, agent):
    """Output spread of the optimal local policy: |rho(u*_i, x_i)| * sigma(u*_i)."""
    rho = ens.corr(f"u_star_{agent}", f"x_{agent}")
    return abs(rho) * ens.std(f"u_star_{agent}")


def minimal_distortion(ens):
    """Smallest total squared error reachable by unbiased policies that see only their own state."""
    agents, states = ens.agents, ens.states
    for a in agents:
        if a not in states:
            raise ValidationError(f"agent {a} has no local state x_{a}")
    per_agent = np.array([
        ens.cov[ens.u(a), ens.u(a)] * (1.0 - ens.corr(f"u_star_{a}", f"x_{a}") ** 2) for a in agents
    ])
    gamma = np.array([[gaussian_mi(ens.cov, [ens.x(i)], [ens.u(j)]) for j in agents] for i in states])
    n = len(states)
    delta = np.full((n, n), np.inf)
    for p in range(n):
        for q in range(p + 1, n):
            delta[p, q] = delta[q, p] = gaussian_mi(ens.cov, [ens.x(states[p])], [ens.x(states[q])])
    return RateReport(gamma=gamma, delta=delta, d_star=float(per_agent.sum()), per_agent=per_agent,
                      states=list(states), agents=list(agents))


def mi_from_correlation(rho):
    return -0.5 * np.log1p(-np.square(rho))


def correlation_from_mi(gamma):
    """Largest |rho| compatible with I(X; Y) <= gamma."""
    return np.sqrt(-np.expm1(-2.0 * np.asarray(gamma)))


# -- ensemble construction --------------------------------------------------

def random_ensemble(n_agents, seed, n_states=None):
    """Ensemble over ``u_star_1..C, x_1..N`` with covariance ``A A^T + 0.1 I``."""
    n_states = n_agents if n_states is None else n_states
    rng = np.random.default_rng(seed)
    d = n_agents + n_states
    A = rng.standard_normal((d, d))
    labels = [f"u_star_{i}" for i in range(1, n_agents + 1)] + [f"x_{i}" for i in range(1, n_states + 1)]
    return GaussianEnsemble(np.zeros(d), A @ A.T + 0.1 * np.eye(d), labels)


def planted_comm_ensemble(seed=0, n_states=10, planted=9):
    """Single agent at node 1 with one planted state that carries fresh information.

    The planted state is strongly tied to ``u*`` and only weakly to ``x_1``;
    the other states share a nuisance factor with ``x_1`` and carry only
    modest, partly redundant signal.
    """
    rng = np.random.default_rng(seed)
    # latent factors: u*, nuisance s, one idiosyncratic noise per state
    k = 2 + n_states
    load = np.zeros((1 + n_states, k))
    load[0, 0] = 1.0
    for j in range(1, n_states + 1):
        row = load[j]
        if j == 1:
            row[0], row[1] = 0.35, 0.8
            row[1 + j] = 0.4
        elif j == planted:
            row[0] = 0.9
            row[1 + j] = 0.45
        else:
            row[0] = rng.uniform(0.1, 0.5)
            row[1] = rng.uniform(0.2, 0.7)
            row[1 + j] = rng.uniform(0.6, 1.0)
    cov = load @ load.T
    labels = ["u_star_1"] + [f"x_{j}" for j in range(1, n_states + 1)]
    return GaussianEnsemble(np.zeros(1 + n_states), cov, labels)


def ensemble_to_dict(ens):
    return {
        "format": FORMAT_VERSION,
        "labels": list(ens.labels),
        "mean": [float(m) for m in ens.mean],
        "cov": [[float(c) for c in row] for row in ens.cov],
    }


def ensemble_from_dict(d):
    if d.get("format") != FORMAT_VERSION:
        raise ValidationError(f"unsupported ensemble format {d.get('format')!r}")
    return GaussianEnsemble(np.array(d["mean"], dtype=float), np.array(d["cov"], dtype=float), d["labels"])


def load_ensemble(path):
    with open(path) as fh:
        return ensemble_from_dict(yaml.safe_load(fh))


def save_ensemble(ens, path):
    with open(path, "w") as fh:
        yaml.safe_dump(ensemble_to_dict(ens), fh, sort_keys=False)
