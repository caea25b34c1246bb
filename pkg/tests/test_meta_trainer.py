import dataclasses

import numpy as np
import pytest

import metaxt as mxt
from metaxt import harness
from metaxt.constants import Const, Groups
from metaxt.diff_engine import (
    Tape,
    direction_norm,
    finite_difference_grad,
    grad,
    hvp_exact,
    hvp_fd,
    norm_relative_error,
)
from metaxt.losses import l_train, train_objective
from metaxt.meta_trainer import BatchTriple, MetaTrainer, TrainState, clip_by_global_norm, global_norm
from tests.mxtutil import scale_ltn_output, tiny_model


class QuadraticTrainer(MetaTrainer):
    """
    Replaces the training loss by half the squared norm of the main parameters
    """

    def train_loss(self, view, batch, ltn_input=None):
        total = 0.0
        for group in ("theta", "v", "w"):
            for t in view[group].values():
                total = total + (t * t).sum() * 0.5
        return total, {}


@pytest.fixture(scope="module")
def small_splits(granularity_pair):
    return mxt.sample_splits(granularity_pair, 20, seed=0)


def small_model():
    return mxt.TransferNetwork.build(16, 2, 5, hidden_dims=(8,), h_dim=4, z_dim=2)


class TestGlobalNorm:
    def test_norm(self):
        assert global_norm({"w": np.array([3.0]), "theta": np.array([4.0])}) == 5.0

    def test_clip(self):
        grads = {"theta": np.array([6.0, 8.0])}
        clipped, norm = clip_by_global_norm(grads, 5.0)
        assert norm == 10.0
        np.testing.assert_allclose(clipped["theta"], [3.0, 4.0])

    def test_no_clip(self):
        grads = {"theta": np.array([0.3, 0.4])}
        clipped, norm = clip_by_global_norm(grads, 5.0)
        assert clipped is grads
        assert norm == pytest.approx(0.5)
        assert clip_by_global_norm({"w": np.array([1e6])}, None)[0]["w"][0] == 1e6


class TestTrainerValidation:
    def test_bad_gamma(self, tiny):
        with pytest.raises(ValueError, match="non-negative"):
            MetaTrainer(tiny, gamma1=-1)

    def test_bad_batch_size(self, tiny):
        with pytest.raises(ValueError, match="batch_size"):
            MetaTrainer(tiny, batch_size=1)

    def test_rtn_needs_rtn_model(self, tiny):
        with pytest.raises(ValueError, match="RTN"):
            MetaTrainer(tiny, use_rtn=True)

    def test_train_state_rates(self, tiny_params):
        with pytest.raises(ValueError, match="positive"):
            TrainState(tiny_params, 0, np.random.default_rng(0), 0.0, 0.1, "MetaXT")

    def test_main_groups(self, tiny, tiny_rtn):
        assert MetaTrainer(tiny, "TargetOnly").main_groups == ("theta", "w")
        assert MetaTrainer(tiny, "MultiTask").main_groups == ("theta", "v", "w")
        assert MetaTrainer(tiny_rtn, "MetaXT").main_groups == ("theta", "v", "w", "phi")


class TestInnerStep:
    def test_zero_eta_is_identity(self, tiny, tiny_params, tiny_batch):
        trainer = MetaTrainer(tiny)
        assert trainer.inner_step(tiny_params, tiny_batch, eta=0.0).identical(tiny_params)

    def test_quadratic(self, tiny, tiny_batch):
        params = mxt.FlatParams(tiny.layout, {g: np.ones(tiny.layout.size(g)) for g in tiny.layout})
        updated = QuadraticTrainer(tiny, eta=0.1).inner_step(params, tiny_batch)
        for g in ("theta", "v", "w"):
            np.testing.assert_allclose(updated[g], 0.9, rtol=1e-15)
        np.testing.assert_array_equal(updated["alpha"], 1.0)

    def test_descent(self, tiny, tiny_params, tiny_batch):
        trainer = MetaTrainer(tiny, eta=1e-3)
        before = l_train(tiny, tiny_params, tiny_batch.target_train, tiny_batch.source).total
        updated = trainer.inner_step(tiny_params, tiny_batch)
        after = l_train(tiny, updated, tiny_batch.target_train, tiny_batch.source).total
        assert after < before
        np.testing.assert_array_equal(updated["alpha"], tiny_params["alpha"])


class TestMetaGradient:
    def test_zero_without_transfer(self, tiny, tiny_params, tiny_batch):
        g = MetaTrainer(tiny, gamma2=0.0).meta_gradient(tiny_params, tiny_batch)
        assert g.shape == (tiny.layout.size("alpha"),)
        assert not np.any(g)

    def test_zero_eta(self, tiny, tiny_params, tiny_batch):
        assert not np.any(MetaTrainer(tiny).meta_gradient(tiny_params, tiny_batch, eta=0.0))

    def test_not_for_multi_task(self, tiny, tiny_params, tiny_batch):
        with pytest.raises(ValueError, match="no LTN"):
            MetaTrainer(tiny, "MultiTask").meta_gradient(tiny_params, tiny_batch)

    def test_matches_proxy_finite_difference(self, tiny, tiny_params, tiny_batch):
        trainer = MetaTrainer(tiny, eta=0.1)
        exact = trainer.meta_gradient(tiny_params, tiny_batch, mode="exact")
        oracle = finite_difference_grad(
            lambda a: trainer.proxy_objective(tiny_params.replace(alpha=a), tiny_batch), tiny_params["alpha"]
        )
        assert np.any(exact)
        assert norm_relative_error(exact, oracle) < 1e-3

    def test_finite_difference_mode(self, tiny, tiny_params, tiny_batch):
        trainer = MetaTrainer(tiny, eta=0.1)
        exact = trainer.meta_gradient(tiny_params, tiny_batch, mode="exact")
        approx = trainer.meta_gradient(tiny_params, tiny_batch, mode="finite_difference")
        assert norm_relative_error(approx, exact) < 1e-2

    def test_with_rtn(self, tiny_rtn, tiny_batch):
        params = tiny_rtn.init_params(np.random.default_rng(3))
        trainer = MetaTrainer(tiny_rtn, eta=0.1)
        exact = trainer.meta_gradient(params, tiny_batch)
        oracle = finite_difference_grad(
            lambda a: trainer.proxy_objective(params.replace(alpha=a), tiny_batch), params["alpha"]
        )
        assert norm_relative_error(exact, oracle) < 1e-3

    def test_small_step_reduces_proxy(self, tiny, tiny_params, tiny_batch):
        trainer = MetaTrainer(tiny, eta=0.1)
        g, meta_loss = trainer.meta_gradient(tiny_params, tiny_batch, return_meta_loss=True)
        before = trainer.proxy_objective(tiny_params, tiny_batch)
        assert meta_loss == pytest.approx(before, rel=1e-12)
        stepped = tiny_params.replace(alpha=tiny_params["alpha"] - 1e-4 * g / np.linalg.norm(g))
        assert trainer.proxy_objective(stepped, tiny_batch) < before

    @pytest.mark.parametrize("seed", range(100))
    def test_step_against_meta_gradient_descends(self, seed):
        model, params, batch = harness.tiny_problem(np.random.default_rng(1000 + seed), use_rtn=seed % 2 == 1)
        trainer = MetaTrainer(model, eta=0.1, use_rtn=model.encoder.has_rtn)
        g = trainer.meta_gradient(params, batch)
        before = trainer.proxy_objective(params, batch)
        stepped = params.replace(alpha=params["alpha"] - 1e-4 * g / np.linalg.norm(g))
        assert trainer.proxy_objective(stepped, batch) < before



class TestSecondOrderLoss:
    def test_matches_train_loss_at_base(self, tiny, tiny_params, tiny_batch):
        trainer = MetaTrainer(tiny)
        frozen = trainer.second_order_loss(tiny_params, tiny_batch)
        view = tiny_params.on_tape(Tape(recording=False), Groups.NONE)
        assert float(frozen(view).value) == float(trainer.train_loss(view, tiny_batch)[0].value)

    def test_no_ltn_input_without_ltn(self, tiny, tiny_params, tiny_batch):
        assert MetaTrainer(tiny, "MultiTask").ltn_input(tiny_params, tiny_batch) is None
        assert MetaTrainer(tiny).ltn_input(tiny_params, tiny_batch).shape == (4, 3)

    def test_ltn_input_held_fixed(self, tiny, tiny_params, tiny_batch):
        # Moving theta changes the loss only through the predictors, not the pseudo-labels
        trainer = MetaTrainer(tiny, gamma1=0.0)
        frozen = trainer.second_order_loss(tiny_params, tiny_batch)
        moved = tiny_params.replace(theta=tiny_params["theta"] + 0.5)
        view = moved.on_tape(Tape(recording=False), Groups.NONE)
        free = trainer.train_loss(view, tiny_batch)[0].value
        assert float(frozen(view).value) != pytest.approx(float(free), rel=1e-9)

    @pytest.mark.parametrize("seed", range(6))
    @pytest.mark.parametrize("use_rtn", [False, True])
    def test_hvp_with_encoder_direction(self, seed, use_rtn):
        rng = np.random.default_rng(seed)
        model, params, batch = harness.tiny_problem(rng, use_rtn=use_rtn)
        trainer = MetaTrainer(model, use_rtn=use_rtn)
        loss = trainer.second_order_loss(params, batch)
        direction = {g: rng.normal(size=params.layout.size(g)) for g in ("theta", "w")}
        exact = hvp_exact(loss, params, direction)
        approx = hvp_fd(loss, params, direction)
        eps = Const.FD_EPSILON_SCALE / direction_norm(direction)
        assert norm_relative_error(approx, exact) <= 10 * eps

    @pytest.mark.parametrize("seed", range(6))
    @pytest.mark.parametrize("use_rtn", [False, True])
    def test_finite_difference_mode_many_instances(self, seed, use_rtn):
        model, params, batch = harness.tiny_problem(np.random.default_rng(100 + seed), use_rtn=use_rtn)
        trainer = MetaTrainer(model, eta=0.1, use_rtn=use_rtn)
        exact = trainer.meta_gradient(params, batch, mode="exact")
        approx = trainer.meta_gradient(params, batch, mode="finite_difference")
        assert norm_relative_error(approx, exact) < 1e-2

class TestTrainStep:
    def test_xt_joint_step(self, tiny, tiny_params, tiny_batch):
        trainer = MetaTrainer(tiny, "XT", eta=0.1, meta_lr=0.05, clip_norm=None)
        state = trainer.train_step(trainer.initial_state(tiny_params, np.random.default_rng(0)), tiny_batch)
        grads = grad(
            lambda view: train_objective(tiny, view, tiny_batch.target_train, tiny_batch.source)[0],
            tiny_params,
            Groups.ALL,
        )
        alpha = grads.pop("alpha")
        expected = tiny_params.axpy(-0.1, grads).axpy(-0.05, {"alpha": alpha})
        np.testing.assert_allclose(state.params.flatten(), expected.flatten(), rtol=1e-12, atol=1e-15)
        assert state.step == 1

    def test_metaxt_updates_ltn_first(self, tiny, tiny_params, tiny_batch):
        trainer = MetaTrainer(tiny, eta=0.1, meta_lr=0.2, clip_norm=None)
        state = trainer.train_step(trainer.initial_state(tiny_params, np.random.default_rng(0)), tiny_batch)
        meta_grad = trainer.meta_gradient(tiny_params, tiny_batch)
        np.testing.assert_allclose(state.params["alpha"], tiny_params["alpha"] - 0.2 * meta_grad, rtol=1e-12)
        assert np.isfinite(trainer.last_record["meta_loss"])
        assert trainer.last_record["meta_grad_norm"] == pytest.approx(np.linalg.norm(meta_grad))

    def test_record(self, tiny, tiny_params, tiny_batch):
        trainer = MetaTrainer(tiny, "MultiTask")
        trainer.train_step(trainer.initial_state(tiny_params, np.random.default_rng(0)), tiny_batch)
        record = trainer.last_record
        assert record["step"] == 1
        assert np.isnan(record["transfer_term"])
        assert np.isnan(record["meta_loss"])
        assert record["l_train"] == pytest.approx(record["target_term"] + record["source_term"])

    def test_multi_task_never_calls_ltn(self, tiny_params, tiny_batch):
        model = tiny_model()
        trainer = MetaTrainer(model, "MultiTask")
        state = trainer.initial_state(tiny_params, np.random.default_rng(0))
        for _ in range(3):
            state = trainer.train_step(state, tiny_batch)
        assert model.calls["ltn"] == 0
        np.testing.assert_array_equal(state.params["alpha"], tiny_params["alpha"])

    def test_target_only_touches_target_predictor(self, tiny, tiny_params, tiny_batch):
        trainer = MetaTrainer(tiny, "TargetOnly")
        batch = BatchTriple(None, tiny_batch.target_train, tiny_batch.target_meta)
        state = trainer.train_step(trainer.initial_state(tiny_params, np.random.default_rng(0)), batch)
        np.testing.assert_array_equal(state.params["v"], tiny_params["v"])
        np.testing.assert_array_equal(state.params["alpha"], tiny_params["alpha"])
        assert not np.array_equal(state.params["theta"], tiny_params["theta"])


class TestRepresentationTransformation:
    @pytest.fixture
    def rtn_params(self, tiny_rtn):
        return scale_ltn_output(tiny_rtn.init_params(np.random.default_rng(3)))

    @pytest.mark.parametrize(("method", "moves"), [("MetaXT", True), ("XT", True), ("MultiTask", False)])
    def test_phi_updates(self, tiny_rtn, rtn_params, tiny_batch, method, moves):
        trainer = MetaTrainer(tiny_rtn, method, use_rtn=True)
        state = trainer.train_step(trainer.initial_state(rtn_params, np.random.default_rng(0)), tiny_batch)
        assert not np.array_equal(state.params["theta"], rtn_params["theta"])
        assert np.array_equal(state.params["phi"], rtn_params["phi"]) is not moves

    def test_target_only_leaves_phi(self, tiny_rtn, rtn_params, tiny_batch):
        trainer = MetaTrainer(tiny_rtn, "TargetOnly", use_rtn=True)
        batch = BatchTriple(None, tiny_batch.target_train, tiny_batch.target_meta)
        state = trainer.train_step(trainer.initial_state(rtn_params, np.random.default_rng(0)), batch)
        np.testing.assert_array_equal(state.params["phi"], rtn_params["phi"])

    def test_unused_rtn_is_not_trained(self, tiny_rtn, rtn_params, tiny_batch):
        trainer = MetaTrainer(tiny_rtn, "MetaXT")
        state = trainer.train_step(trainer.initial_state(rtn_params, np.random.default_rng(0)), tiny_batch)
        np.testing.assert_array_equal(state.params["phi"], rtn_params["phi"])
        assert not np.array_equal(state.params["alpha"], rtn_params["alpha"])

    def test_rtn_changes_only_transfer_term(self, tiny_rtn, rtn_params, tiny_batch):
        with_rtn = l_train(tiny_rtn, rtn_params, tiny_batch.target_train, tiny_batch.source, use_rtn=True)
        without = l_train(tiny_rtn, rtn_params, tiny_batch.target_train, tiny_batch.source, use_rtn=False)
        assert with_rtn.target_term == without.target_term
        assert with_rtn.source_term == without.source_term
        assert with_rtn.transfer_term != pytest.approx(without.transfer_term, rel=1e-9)

    def test_several_steps_train_phi(self, rtn_params, tiny_rtn, tiny_batch):
        trainer = MetaTrainer(tiny_rtn, "MetaXT", use_rtn=True)
        state = trainer.initial_state(rtn_params, np.random.default_rng(0))
        for _ in range(3):
            state = trainer.train_step(state, tiny_batch)
        assert tiny_rtn.calls["rtn"] > 0
        assert np.linalg.norm(state.params["phi"] - rtn_params["phi"]) > 0


class TestSampleBatch:
    def test_halves(self, small_splits):
        trainer = MetaTrainer(small_model(), batch_size=8)
        batch = trainer.sample_batch(small_splits.train_k, small_splits.source_train, np.random.default_rng(0))
        assert batch.target_train.num_examples == 4
        assert batch.target_meta.num_examples == 4
        assert batch.source.num_examples == 8

    def test_small_training_set(self, small_splits):
        trainer = MetaTrainer(small_model())
        train = small_splits.train_k.subset([0, 1, 2])
        batch = trainer.sample_batch(train, small_splits.source_train, np.random.default_rng(0))
        assert batch.target_train.num_examples == 1
        assert batch.target_meta.num_examples == 2

    def test_target_only_skips_source(self, small_splits):
        trainer = MetaTrainer(small_model(), "TargetOnly")
        batch = trainer.sample_batch(small_splits.train_k, None, np.random.default_rng(0))
        assert batch.source is None
        assert trainer.source_reads == 0

    def test_source_required(self, small_splits):
        with pytest.raises(ValueError, match="needs source data"):
            MetaTrainer(small_model(), "XT").sample_batch(small_splits.train_k, None, np.random.default_rng(0))


class TestPredict:
    def test_ties_go_to_first_class(self, tiny):
        trainer = MetaTrainer(tiny)
        assert trainer.predict(tiny.zero_params(), np.ones(3)) == 0
        np.testing.assert_array_equal(trainer.predict(tiny.zero_params(), np.ones((4, 3))), [0, 0, 0, 0])

    def test_ignores_ltn_and_source_head(self, tiny, tiny_params):
        trainer = MetaTrainer(tiny)
        changed = tiny_params.replace(
            alpha=np.zeros(tiny.layout.size("alpha")), v=np.full(tiny.layout.size("v"), 5.0)
        )
        X = np.random.default_rng(0).normal(size=(30, 3))
        np.testing.assert_array_equal(trainer.predict(changed, X), trainer.predict(tiny_params, X))


class TestFit:
    def test_history_and_evaluations(self, small_splits):
        model = small_model()
        params = model.init_params(np.random.default_rng(0))
        result = MetaTrainer(model).fit(params, small_splits, np.random.default_rng(1), steps=6, eval_every=4)
        assert list(result.history["step"]) == [1, 2, 3, 4, 5, 6]
        assert list(result.evaluations["step"]) == [0, 4, 6]
        metrics = result.evaluations["validation_metric"]
        assert result.best_metric == metrics.max()
        assert result.steps_to_best == result.evaluations["step"][metrics.idxmax()]
        assert np.all(np.isfinite(result.history["meta_loss"]))

    def test_zero_steps(self, small_splits):
        model = small_model()
        params = model.init_params(np.random.default_rng(0))
        result = MetaTrainer(model).fit(params, small_splits, np.random.default_rng(1), steps=0)
        assert result.params is params
        assert result.steps_to_best == 0
        assert len(result.history) == 0
        assert len(result.evaluations) == 1

    def test_deterministic(self, small_splits):
        model = small_model()
        params = model.init_params(np.random.default_rng(0))
        a = MetaTrainer(model).fit(params, small_splits, np.random.default_rng(1), steps=3)
        b = MetaTrainer(model).fit(params, small_splits, np.random.default_rng(1), steps=3)
        assert a.final_params.identical(b.final_params)

    def test_no_transfer_matches_multi_task(self, small_splits):
        model = small_model()
        params = model.init_params(np.random.default_rng(0))
        meta = MetaTrainer(model, "MetaXT", gamma2=0.0).fit(params, small_splits, np.random.default_rng(1), steps=5)
        multi = MetaTrainer(model, "MultiTask", gamma2=0.0).fit(params, small_splits, np.random.default_rng(1), steps=5)
        assert meta.final_params.identical(multi.final_params)
        np.testing.assert_array_equal(meta.final_params["alpha"], params["alpha"])

    def test_target_only_never_reads_source(self, small_splits):
        model = small_model()
        params = model.init_params(np.random.default_rng(0))
        trainer = MetaTrainer(model, "TargetOnly")
        splits = dataclasses.replace(small_splits, source_train=None)
        result = trainer.fit(params, splits, np.random.default_rng(1), steps=5)
        assert trainer.source_reads == 0
        assert model.calls["ltn"] == 0
        assert model.calls["source_head"] == 0
        np.testing.assert_array_equal(result.final_params["v"], params["v"])
        np.testing.assert_array_equal(result.final_params["alpha"], params["alpha"])

    def test_custom_score_ties_keep_earliest(self, small_splits):
        model = small_model()
        params = model.init_params(np.random.default_rng(0))
        result = MetaTrainer(model).fit(
            params, small_splits, np.random.default_rng(1), steps=4, eval_every=2, score=lambda p, d: 0.5
        )
        assert result.steps_to_best == 0
        assert result.params is params

    def test_bad_budget(self, small_splits):
        model = small_model()
        with pytest.raises(ValueError, match="step budget"):
            MetaTrainer(model).fit(model.zero_params(), small_splits, np.random.default_rng(0), steps=-1)
