"""
End-to-end experiments on the synthetic task pairs. Apart from the inference
check, these train full models over 5 seeds and are marked ``slow``: run them with
``python -m pytest -m slow``.
"""

import pathlib

import numpy as np
import pytest

import metaxt as mxt
from metaxt import harness

CONFIG_DIR = pathlib.Path(__file__).parent.parent / "configs"


def granularity_config(**kwargs):
    return mxt.RunConfig.from_file(CONFIG_DIR / "granularity.txt").replace(**kwargs)


def tagset_config(**kwargs):
    return mxt.RunConfig.from_file(CONFIG_DIR / "tagset.txt").replace(**kwargs)


@pytest.fixture(scope="module")
def granularity_pair_for_runs():
    return harness.build_pair(granularity_config())


class TestInference:
    def test_ltn_and_source_head_unused(self):
        config = granularity_config(n_target_pool=1200, hidden_dims=(16,), h_dim=8, z_dim=4)
        pair = harness.build_pair(config)
        splits = mxt.sample_splits(pair, 20, seed=0)
        model = harness.build_model(config, pair)
        trainer = harness.build_trainer(config, model)
        params = model.init_params(np.random.default_rng(0))
        fit = trainer.fit(params, splits, np.random.default_rng(1), steps=30, eval_every=10)
        test = splits.test.subset(range(1000))
        before = trainer.predict(fit.final_params, test.rows())
        rng = np.random.default_rng(2)
        randomised = fit.final_params.replace(
            alpha=rng.normal(size=model.layout.size("alpha")), v=rng.normal(size=model.layout.size("v"))
        )
        after = trainer.predict(randomised, test.rows())
        assert len(before) == 1000
        np.testing.assert_array_equal(before, after)


@pytest.fixture(scope="module")
def k20(granularity_pair_for_runs):
    return {
        m: mxt.run(granularity_config(method=m, k=20), granularity_pair_for_runs)
        for m in ("MetaXT", "XT", "TargetOnly")
    }


@pytest.fixture(scope="module")
def tagset_results():
    pair = harness.build_pair(tagset_config())
    return {m: mxt.run(tagset_config(method=m), pair) for m in ("MetaXT", "MultiTask", "TargetOnly")}


@pytest.mark.slow
class TestGranularity:
    def test_target_only_calibration(self, k20):
        assert 0.30 <= k20["TargetOnly"].mean <= 0.55

    def test_method_ordering(self, k20):
        assert k20["MetaXT"].mean >= k20["XT"].mean + 0.05
        assert k20["MetaXT"].mean >= k20["TargetOnly"].mean + 0.05

    def test_gap_shrinks_with_k(self, k20, granularity_pair_for_runs):
        gap_20 = k20["MetaXT"].mean - k20["TargetOnly"].mean
        k500 = {
            m: mxt.run(granularity_config(method=m, k=500), granularity_pair_for_runs)
            for m in ("MetaXT", "TargetOnly")
        }
        gap_500 = k500["MetaXT"].mean - k500["TargetOnly"].mean
        assert gap_20 > gap_500

    def test_ltn_map_recovers_clusters(self, granularity_pair_for_runs):
        result = mxt.run(granularity_config(k=100), granularity_pair_for_runs)
        recovered = 0
        for r in result.seed_results:
            ltn_map = r.ltn_map
            negative = ltn_map.row("negative")
            positive = ltn_map.row("positive")
            if (
                set(ltn_map.top("negative")) == {"1", "2"}
                and set(ltn_map.top("positive")) == {"4", "5"}
                and np.argmin(negative) == 2
                and np.argmin(positive) == 2
            ):
                recovered += 1
        assert recovered >= 4

    def test_separable(self):
        result = mxt.run(granularity_config(noise_sigma=0.0, n_target_pool=500))
        assert result.mean >= 0.95


@pytest.mark.slow
class TestTagset:
    def test_transfer_helps(self, tagset_results):
        baseline = tagset_results["TargetOnly"].mean
        assert tagset_results["MetaXT"].mean >= baseline + 0.03
        assert tagset_results["MultiTask"].mean >= baseline + 0.03

    def test_refinement_agreement(self, tagset_results):
        agreement = [r.extra["refinement_agreement"] for r in tagset_results["MetaXT"].seed_results]
        assert np.mean(agreement) >= 0.70
