import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

import rdpolicy.policy as policy_mod
from rdpolicy.errors import MissingColumn, ValidationError
from rdpolicy.gaussian_rd import GaussianEnsemble, conditional_regressor
from rdpolicy.policy import (AgentPolicy, FeatureKernel, PolicySet, evaluate_policy_set, fit_fixed,
                             fit_least_squares, load_policy_set, predict, save_policy_set, stepwise_select)
from rdpolicy.scenario import TimeSeriesDataset, gen_gaussian_dataset


def make_dataset(x, u, extra=None, seed=0):
    frame = pd.DataFrame({"x_1": x, "u_star_1": u})
    for name, col in (extra or {}).items():
        frame[name] = col
    return TimeSeriesDataset.from_frame(frame).with_split(seed)


def planted(seed, kind, T=2000, noise=0.05):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, T)
    z = rng.uniform(-1, 1, T)  # pure noise input at node 2
    if kind == "linear":
        u = 3.0 + 2.0 * x
    else:
        u = 1.0 - 0.5 * x + 1.5 * x ** 2
    u = u + noise * rng.standard_normal(T)
    return make_dataset(x, u, {"x_2": z}, seed)


class TestKernel:
    @pytest.mark.parametrize("d", [1, 2, 3, 5])
    def test_quadratic_term_count(self, d):
        k = FeatureKernel.build("quadratic", [f"x_{i}" for i in range(d)])
        assert len(k.terms) == 1 + d + d * (d + 1) // 2
        assert len(set(k.terms)) == len(k.terms)
        assert k.terms[0] == ()

    def test_design(self):
        k = FeatureKernel.build("quadratic", ["a", "b"])
        assert k.term_names() == ["1", "a", "b", "a*a", "a*b", "b*b"]
        assert np.allclose(k.design([[2.0, 3.0]]), [[1, 2, 3, 4, 6, 9]])

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            FeatureKernel.build("cubic", ["a"])


class TestLeastSquares:
    def test_realizable(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((200, 5))
        theta = rng.standard_normal(5)
        fit = fit_least_squares(A, A @ theta)
        assert np.max(np.abs(A @ fit.theta - A @ theta)) <= 1e-10
        assert not fit.rank_deficient

    def test_constant_only_is_mean(self):
        y = np.random.default_rng(1).standard_normal(500)
        assert fit_least_squares(np.ones((500, 1)), y).theta[0] == pytest.approx(y.mean())

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 3))
    def test_duplicate_column_minimum_norm(self, seed, dup):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((60, 4))
        y = rng.standard_normal(60)
        A2 = np.column_stack([A, A[:, dup]])
        fit = fit_least_squares(A2, y)
        assert fit.rank_deficient
        assert np.allclose(fit.theta, np.linalg.pinv(A2) @ y, atol=1e-9)
        base = fit_least_squares(A, y)
        assert np.allclose(A2 @ fit.theta, A @ base.theta, atol=1e-9)


class TestStepwise:
    def test_linear_target(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(-1, 1, 3000)
        ds = make_dataset(x, 3 + 2 * x + 0.01 * rng.standard_normal(3000))
        p = stepwise_select(ds, 1, "quadratic")
        assert set(p.kernel.term_names()) == {"1", "x_1"}
        assert p.theta == pytest.approx([3.0, 2.0], abs=1e-2)

    def test_quadratic_target(self):
        p = stepwise_select(planted(0, "quadratic"), 1, "quadratic", observed=(1, 2))
        assert "x_1*x_1" in p.kernel.term_names()

    def test_noise_column_excluded(self):
        clean = 0
        for seed in range(20):
            p = stepwise_select(planted(seed, "linear"), 1, "quadratic", observed=(1, 2))
            clean += not any("x_2" in t for t in p.kernel.term_names())
        assert clean >= 18

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_not_worse_than_constant(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(400)
        ds = make_dataset(x, np.sin(x) + 0.3 * rng.standard_normal(400), seed=seed)
        p = stepwise_select(ds, 1, "quadratic")
        tr, va = ds.rows("train"), ds.rows("val")
        y = ds.frame["u_star_1"].to_numpy()
        assert p.train_mse <= np.mean((y[tr] - y[tr].mean()) ** 2) + 1e-12
        assert p.val_mse <= np.mean((y[va] - y[tr].mean()) ** 2) + 1e-12

    def test_reads_no_test_rows(self):
        ds = planted(4, "quadratic")
        te = ds.rows("test")
        poisoned = ds.frame.copy()
        poisoned.loc[te, "u_star_1"] = 1e6
        a = stepwise_select(ds, 1, "quadratic")
        b = stepwise_select(TimeSeriesDataset(poisoned, ds.state_columns, ds.action_columns, ds.split), 1,
                            "quadratic")
        assert np.array_equal(a.theta, b.theta)

    def test_own_state_first(self):
        p = stepwise_select(planted(1, "linear"), 1, "linear", observed=(2, 1))
        assert p.observed == (1, 2)


def gaussian_scalar(rho=0.6, su=2.0, sx=0.5, mu=(1.0, -2.0)):
    c = rho * su * sx
    return GaussianEnsemble(np.array(mu), np.array([[su ** 2, c], [c, sx ** 2]]), ["u_star_1", "x_1"])


class TestGaussianConsistency:
    def test_slope_converges(self):
        ens = gaussian_scalar()
        ds = gen_gaussian_dataset(ens, 100_000, 0).with_split(1)
        p = fit_fixed(ds, 1, "linear")
        reg = conditional_regressor(ens, 1, (1,))
        assert p.theta[1] == pytest.approx(reg.weights[0], rel=0.02)
        assert p.theta[0] == pytest.approx(reg.intercept, rel=0.02)

    def test_test_mse_not_below_bound(self):
        ens = gaussian_scalar(rho=0.4)
        ds = gen_gaussian_dataset(ens, 20_000, 5).with_split(2)
        p = stepwise_select(ds, 1, "quadratic")
        te = ds.frame.iloc[ds.rows("test")]
        mse = np.mean((predict(p, te) - te["u_star_1"]) ** 2)
        bound = conditional_regressor(ens, 1, (1,)).predicted_mse
        slack = 3 * bound * np.sqrt(2 / len(te))
        assert mse >= bound - slack

    def test_eq7_policy_matches_regressor(self):
        ens = gaussian_scalar()
        reg = conditional_regressor(ens, 1, (1,))
        k = FeatureKernel.build("linear", ["x_1"])
        p = AgentPolicy(1, (1,), k, [reg.intercept, reg.weights[0]])
        x = np.random.default_rng(0).standard_normal(100)
        out = predict(p, pd.DataFrame({"x_1": x}))
        assert np.max(np.abs(out - reg(x[:, None]))) <= 1e-10


class TestPredict:
    def test_constant_policy(self):
        p = AgentPolicy(1, (1,), FeatureKernel("linear", ("x_1",), ((),)), [0.7])
        assert predict(p, {"x_1": 5.0}) == 0.7
        assert predict(p, {"x_1": -3.0}) == 0.7

    def test_clipping(self):
        p = AgentPolicy(1, (1,), FeatureKernel.build("linear", ["x_1"]), [0.0, 1.0], q_limit=0.3)
        assert predict(p, {"x_1": 2.0}, clip=True) == 0.3
        assert predict(p, {"x_1": -2.0}, clip=True) == -0.3
        assert predict(p, {"x_1": 2.0}) == 2.0

    def test_missing_column(self):
        p = AgentPolicy(1, (1,), FeatureKernel.build("linear", ["x_1"]), [0.0, 1.0])
        with pytest.raises(MissingColumn):
            predict(p, {"x_2": 1.0})
        with pytest.raises(MissingColumn):
            predict(p, pd.DataFrame({"x_2": [1.0]}))

    def test_theta_length_checked(self):
        with pytest.raises(ValidationError):
            AgentPolicy(1, (1,), FeatureKernel.build("linear", ["x_1"]), [1.0])

    def test_duplicate_agents_rejected(self):
        p = AgentPolicy(1, (1,), FeatureKernel.build("linear", ["x_1"]), [0.0, 1.0])
        with pytest.raises(ValidationError):
            PolicySet([p, p])


class TestPersistence:
    def test_round_trip(self, tmp_path):
        ds = planted(3, "quadratic")
        ps = PolicySet([stepwise_select(ds, 1, "quadratic", observed=(1, 2), q_limit=2.0)], {"seed": 3})
        save_policy_set(ps, tmp_path / "p.yaml")
        back = load_policy_set(tmp_path / "p.yaml")
        assert back.provenance == {"seed": 3}
        a = ps.predict_all(ds.frame)
        b = back.predict_all(ds.frame)
        assert np.max(np.abs(a - b)) <= 1e-12
        assert back.policies[0].kernel.term_names() == ps.policies[0].kernel.term_names()

    def test_bad_format(self, tmp_path):
        (tmp_path / "p.yaml").write_text("format: 9\npolicies: []\n")
        with pytest.raises(ValidationError):
            load_policy_set(tmp_path / "p.yaml")


class TestEvaluate:
    def test_zero_policies_is_no_control(self, feeder4_dataset):
        net, ds = feeder4_dataset
        rep = evaluate_policy_set(PolicySet([]), ds, net)
        t = rep.tables["rows"]
        assert np.array_equal(t["f_decentral"], t["f_nocontrol"])
        assert np.array_equal(t["viol_decentral"], t["viol_nocontrol"])

    def test_replay_gives_zero_gap(self, feeder4_dataset, monkeypatch):
        net, ds = feeder4_dataset
        ps = PolicySet([AgentPolicy(a, (a,), FeatureKernel.build("linear", [f"p_c_{a}"]), [0.0, 0.0])
                        for a in net.agents])
        # replace the regression with a lookup of the stored optimum
        monkeypatch.setattr(policy_mod, "predict",
                            lambda p, frame, clip=False: frame[f"u_star_{p.agent}"].to_numpy())
        rep = evaluate_policy_set(ps, ds, net)
        assert np.allclose(rep.tables["rows"]["gap"], 0.0, atol=1e-9)
        assert rep.summary["violations"]["decentral"] == rep.summary["violations"]["central"] == 0
        assert all(v == 0 for v in rep.summary["distortion_per_agent"].values())

    def test_report_is_recomputable(self, feeder4_dataset):
        net, ds = feeder4_dataset
        ps = PolicySet([stepwise_select(ds, a, "quadratic", q_limit=float(q))
                        for a, q in zip(net.agents, net.q_limits)])
        rep = evaluate_policy_set(ps, ds, net)
        t, s = rep.tables["rows"], rep.summary
        assert s["gap_mean"] == pytest.approx(t["gap"].mean())
        assert s["gap_max"] == pytest.approx(t["gap"].max())
        assert s["gap_mean"] <= s["gap_max"]
        assert s["violations"]["nocontrol"] == t["viol_nocontrol"].sum()
        assert s["objective_mean"]["central"] == pytest.approx(t["f_central"].mean())
        # stored OPF objective agrees with the replayed centralized voltages
        f_label = ds.frame["f_central"].to_numpy()[t["row"]]
        assert np.allclose(f_label, t["f_central"], atol=1e-8)
        assert (t["gap"] >= -1e-9).all()
        assert np.all(np.isfinite(t["gap"]))

    def test_clipping_reported_both_ways(self, feeder4_dataset):
        net, ds = feeder4_dataset
        p = AgentPolicy(net.agents[0], (net.agents[0],), FeatureKernel.build("linear", [f"p_c_{net.agents[0]}"]),
                        [5.0, 0.0], q_limit=float(net.q_limits[0]))
        rep = evaluate_policy_set(PolicySet([p]), ds, net)
        a = net.agents[0]
        assert rep.summary["distortion_per_agent"][a] < rep.summary["distortion_per_agent_unclipped"][a]
