import numpy as np
import pandas as pd
import pytest

from rdpolicy.errors import InfeasibleRow, ValidationError
from rdpolicy.gaussian_rd import GaussianEnsemble, random_ensemble
from rdpolicy.grid import Bus, Line, RadialNetwork, injection_arrays, solve_flow, Injection, voltage_violations
from rdpolicy.scenario import (LoadProfileSpec, LoadShape, TimeSeriesDataset, gen_feeder_timeseries,
                               gen_gaussian_dataset, label_with_opf, load_template, pv_template,
                               profile_spec_from_dict)

from conftest import fixture_path
import yaml


class TestGaussianDataset:
    def test_covariance_within_standard_errors(self):
        ens = random_ensemble(5, seed=1)
        T = 100_000
        X = gen_gaussian_dataset(ens, T, 0).frame[list(ens.labels)].to_numpy()
        S = np.cov(X, rowvar=False)
        var = np.diag(ens.cov)
        se = np.sqrt((ens.cov ** 2 + np.outer(var, var)) / T)
        assert np.all(np.abs(S - ens.cov) <= 4 * se)

    def test_deterministic(self):
        ens = random_ensemble(2, seed=0)
        a = gen_gaussian_dataset(ens, 500, 9).frame
        b = gen_gaussian_dataset(ens, 500, 9).frame
        assert a.equals(b)

    def test_independent_columns(self):
        ens = GaussianEnsemble(np.zeros(3), np.diag([1.0, 2.0, 3.0]), ["u_star_1", "x_1", "x_2"])
        X = gen_gaussian_dataset(ens, 100_000, 1).frame[list(ens.labels)].to_numpy()
        C = np.corrcoef(X, rowvar=False)
        assert np.all(np.abs(C[~np.eye(3, dtype=bool)]) <= 0.02)

    def test_column_tags(self):
        ds = gen_gaussian_dataset(random_ensemble(2, 0, n_states=3), 10, 0)
        assert ds.agents == [1, 2]
        assert ds.state_nodes == [1, 2, 3]


class TestSplit:
    def test_partition(self):
        ds = gen_gaussian_dataset(random_ensemble(1, 0), 1000, 0).with_split(4)
        parts = [ds.rows(p) for p in ("train", "val", "test")]
        assert [len(p) for p in parts] == [700, 150, 150]
        assert np.array_equal(np.sort(np.concatenate(parts)), np.arange(1000))

    def test_seeded(self):
        ds = gen_gaussian_dataset(random_ensemble(1, 0), 200, 0)
        assert np.array_equal(ds.with_split(1).split, ds.with_split(1).split)
        assert not np.array_equal(ds.with_split(1).split, ds.with_split(2).split)

    def test_training_view_has_no_test_rows(self):
        ds = gen_gaussian_dataset(random_ensemble(1, 0), 300, 0).with_split(0)
        view = ds.training_view()
        assert set(view.split) == {"train", "val"}
        assert view.n_rows == len(ds.rows("train")) + len(ds.rows("val"))
        assert not set(view.meta["source_rows"]) & set(ds.rows("test").tolist())

    def test_no_split(self):
        with pytest.raises(ValidationError):
            gen_gaussian_dataset(random_ensemble(1, 0), 10, 0).rows("train")

    def test_save_load(self, tmp_path):
        ds = gen_gaussian_dataset(random_ensemble(2, 0), 100, 0).with_split(3)
        ds.save(tmp_path / "d.csv")
        back = TimeSeriesDataset.load(tmp_path / "d.csv")
        assert np.array_equal(back.frame.to_numpy(), ds.frame.to_numpy())
        assert np.array_equal(back.split, ds.split)
        assert back.meta["split_seed"] == 3


def feeder4_spec(**kw):
    base = dict(base_load={1: 0.3, 2: 0.5, 3: 0.4}, pv_capacity={2: 0.6, 3: 0.5}, days=3, step_minutes=30, seed=0)
    base.update(kw)
    return LoadProfileSpec(**base)


class TestFeederTimeseries:
    def test_noise_free_matches_templates(self, feeder4):
        spec = feeder4_spec(noise_std=0.0)
        f = gen_feeder_timeseries(feeder4, spec)
        hour = f["hour"].to_numpy()
        assert np.allclose(f["p_c_2"], 0.5 * load_template(hour, spec.load_shape))
        assert np.allclose(f["p_g_3"], 0.5 * pv_template(hour))
        assert (f.loc[f["hour"] == 0, [c for c in f.columns if c.startswith("p_g_")]] == 0).all().all()

    def test_no_pv(self, feeder4):
        f = gen_feeder_timeseries(feeder4, feeder4_spec(pv_capacity={}))
        assert (f[[c for c in f.columns if c.startswith("p_g_")]] == 0).all().all()

    def test_signs_and_power_factor(self, feeder4):
        spec = feeder4_spec(power_factor=0.9)
        f = gen_feeder_timeseries(feeder4, spec)
        assert (f.filter(like="p_c_") >= 0).all().all()
        assert (f.filter(like="p_g_") >= 0).all().all()
        tan = np.tan(np.arccos(0.9))
        for b in (1, 2, 3):
            assert np.allclose(f[f"q_c_{b}"], f[f"p_c_{b}"] * tan)
        assert not f.isna().any().any()

    def test_shape(self, feeder4):
        f = gen_feeder_timeseries(feeder4, feeder4_spec(days=2, step_minutes=15))
        assert len(f) == 2 * 96
        assert f["day"].max() == 1

    def test_template_peaks(self):
        shape = LoadShape()
        hours = np.arange(0, 24, 0.25)
        assert hours[np.argmax(load_template(hours, shape))] == pytest.approx(19.0)
        assert pv_template(np.array([13.0]))[0] == pytest.approx(1.0)
        assert pv_template(np.array([6.0, 20.0])).tolist() == [0.0, 0.0]

    def test_bad_specs(self, feeder4):
        with pytest.raises(ValidationError):
            feeder4_spec(power_factor=0.0)
        with pytest.raises(ValidationError):
            feeder4_spec(base_load={1: -0.1})
        with pytest.raises(ValidationError):
            feeder4_spec(step_minutes=7)
        with pytest.raises(ValidationError):
            gen_feeder_timeseries(feeder4, feeder4_spec(base_load={9: 0.1}))

    def test_default_profile_is_stressful(self, feeder15):
        with open(fixture_path("feeder15_profile.yaml")) as fh:
            spec = profile_spec_from_dict(yaml.safe_load(fh))
        spec.days = 5
        f = gen_feeder_timeseries(feeder15, spec)
        p_c, q_c, p_g = injection_arrays(feeder15, f)
        zero = np.zeros(feeder15.n_agents)
        viol = sum(int(voltage_violations(feeder15, solve_flow(feeder15, Injection(p_c[r], q_c[r], p_g[r], zero)).v))
                   for r in range(len(f)))
        assert viol > 0


class TestLabel:
    def test_labels_are_optimal_and_feasible(self, feeder4_dataset):
        net, ds = feeder4_dataset
        U = ds.actions()
        assert np.all(np.abs(U) <= net.q_limits + 1e-9)
        p_c, q_c, p_g = injection_arrays(net, ds.frame)
        for r in range(0, ds.n_rows, 7):
            v = solve_flow(net, Injection(p_c[r], q_c[r], p_g[r], U[r])).v
            assert voltage_violations(net, v) == 0
        assert ds.agents == net.agents
        assert ds.meta["source"] == "feeder"

    def test_infeasible_row(self):
        net = RadialNetwork(buses=[Bus(0), Bus(1, True, 0.01)], lines=[Line(0, 1, 0.1, 0.1)])
        frame = pd.DataFrame({"p_c_1": [0.1, 3.0], "q_c_1": [0.0, 1.0], "p_g_1": [0.0, 0.0]})
        with pytest.raises(InfeasibleRow) as info:
            label_with_opf(net, frame)
        assert info.value.row == 1
        assert info.value.exit_code == 3
