import numpy as np
import pandas as pd
import pytest

from adaptivegam.errors import InvalidScenario
from adaptivegam.synth import Scenario, counterfactual, gen_synthetic
from adaptivegam.transfer import estimate_rho


def test_rho_recovered_on_pre_break_year():
    scenario = Scenario(rho=3.0)
    src, tgt = gen_synthetic(scenario, seed=0)
    src_break, _ = scenario.break_timestamps()
    start = src_break - pd.Timedelta(days=365)
    step = pd.Timedelta(minutes=scenario.period_minutes)
    ys = src.between(start, src_break - step).column("load_mw")
    yt = tgt.between(start, src_break - step).column("load_mw")
    assert abs(estimate_rho(yt, ys) - 3.0) / 3.0 <= 0.01


def test_break_depth_against_counterfactual():
    scenario = Scenario(break_depth=0.15)
    src, _ = gen_synthetic(scenario, seed=0)
    cf_src, _ = counterfactual(scenario, seed=0)
    src_break, _ = scenario.break_timestamps()
    end = src_break + pd.Timedelta(days=30)
    ratio = (src.between(src_break, end).column("load_mw").mean()
             / cf_src.between(src_break, end).column("load_mw").mean())
    assert abs(ratio - 0.85) <= 0.01


def test_zero_break_equals_counterfactual():
    scenario = Scenario(break_depth=0.0, profile_flatten=0.0)
    a, _ = gen_synthetic(scenario, seed=4)
    b, _ = counterfactual(scenario, seed=4)
    np.testing.assert_array_equal(a.column("load_mw"), b.column("load_mw"))


def test_generation_deterministic():
    scenario = Scenario()
    a1, b1 = gen_synthetic(scenario, seed=11)
    a2, b2 = gen_synthetic(scenario, seed=11)
    np.testing.assert_array_equal(a1.column("load_mw"), a2.column("load_mw"))
    np.testing.assert_array_equal(b1.column("load_mw"), b2.column("load_mw"))


def test_target_break_shifted_by_offset():
    scenario = Scenario(break_offset_days=7)
    src_break, tgt_break = scenario.break_timestamps()
    assert tgt_break - src_break == pd.Timedelta(days=7)


def test_grid_shape_and_columns():
    scenario = Scenario(pre_break_days=30, post_break_days=5, break_offset_days=2)
    src, tgt = gen_synthetic(scenario, seed=0)
    assert len(src) == 37 * 24
    assert src.columns == ["load_mw", "temp_c"]
    np.testing.assert_array_equal(src.column("temp_c"), tgt.column("temp_c"))


def test_invalid_scenarios_rejected():
    with pytest.raises(InvalidScenario):
        gen_synthetic(Scenario(break_depth=1.5))
    with pytest.raises(InvalidScenario):
        gen_synthetic(Scenario(rho=-1.0))
    with pytest.raises(InvalidScenario):
        gen_synthetic(Scenario(period_minutes=45))
    with pytest.raises(InvalidScenario):
        gen_synthetic(Scenario(pre_break_days=0))
