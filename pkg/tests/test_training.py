"""Losses, Adam, batch builders, and the training loop."""

import numpy as np
import pytest

from conftest import toy_model_config, toy_synth_config
from jsfusion import tensor as T
from jsfusion import training as TR
from jsfusion.config import TrainConfig
from jsfusion.errors import InputError, TrainingDiverged
from jsfusion.layers import Param
from jsfusion.models import FibModel, MatchModel
from jsfusion.synthdata import generate_corpus, make_fib, make_multiple_choice
from jsfusion.tensor import Rng, Tensor


class TestRankingLoss:
    def test_frozen_example(self):
        # scores [5, 0, 2], true index 0, margin 10:
        # max(0, 0-5+10) + max(0, 2-5+10) = 5 + 7 = 12
        loss = TR.ranking_loss(T.constant([5.0, 0.0, 2.0]), 0, margin=10.0)
        assert loss.item() == pytest.approx(12.0, abs=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        scores = rng.normal(size=8)
        a = TR.ranking_loss(T.constant(scores), 3, margin=2.5).item()
        b = TR.ranking_loss(T.constant(scores + 17.3), 3, margin=2.5).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_zero_iff_all_margins_met(self):
        scores = T.constant([10.0, 0.0, -3.0])
        assert TR.ranking_loss(scores, 0, margin=10.0).item() == 0.0
        scores = T.constant([10.0, 0.5, -3.0])
        assert TR.ranking_loss(scores, 0, margin=10.0).item() > 0.0

    def test_weight_decay_excludes_non_decay_params(self):
        w = Param("w", Tensor([2.0, 1.0], requires_grad=True), decay=True)
        b = Param("b", Tensor([100.0], requires_grad=True), decay=False)
        loss = TR.ranking_loss(T.constant([5.0, 0.0, 2.0]), 0, margin=10.0,
                               weight_decay=0.5, params=[w, b])
        assert loss.item() == pytest.approx(12.0 + 0.5 * 5.0, abs=1e-12)

    def test_gradient_flows_to_scores(self):
        scores = Tensor([1.0, 0.5, 3.0], requires_grad=True)
        with T.Tape() as tape:
            loss = TR.ranking_loss(scores, 0, margin=1.0)
        tape.backward(loss)
        # both negatives violate: d/ds_pos = -2, d/ds_neg = +1 each
        np.testing.assert_allclose(scores.grad, [-2.0, 1.0, 1.0])


class TestGroupedRankingLoss:
    def _groups(self, small_dataset, anchors):
        items = make_multiple_choice(small_dataset, seed=3)
        return [TR.build_mc_batch(items, a, Rng(10 + a)) for a in anchors]

    def test_equals_sum_of_slice_losses(self, small_dataset):
        groups = self._groups(small_dataset, [0, 1, 2])
        rng = np.random.default_rng(5)
        scores = rng.normal(scale=3.0, size=30)
        total = TR.grouped_ranking_loss(T.constant(scores), groups, margin=2.0).item()
        parts = [TR.ranking_loss(T.constant(scores[10 * j:10 * (j + 1)]),
                                 groups[j].positive, margin=2.0).item()
                 for j in range(3)]
        assert total == pytest.approx(sum(parts), rel=1e-12)

    def test_weight_decay_added_once(self, small_dataset):
        groups = self._groups(small_dataset, [0, 1])
        w = Param("w", Tensor([2.0, 1.0], requires_grad=True), decay=True)
        scores = T.constant(np.zeros(20))
        with_decay = TR.grouped_ranking_loss(scores, groups, margin=1.0,
                                             weight_decay=0.5, params=[w]).item()
        without = TR.grouped_ranking_loss(scores, groups, margin=1.0).item()
        assert with_decay == pytest.approx(without + 0.5 * 5.0, abs=1e-12)

    def test_gradient_flows_through_slices(self, small_dataset):
        groups = self._groups(small_dataset, [0, 1])
        scores = Tensor(np.zeros(20), requires_grad=True)
        with T.Tape() as tape:
            loss = TR.grouped_ranking_loss(scores, groups, margin=1.0)
        tape.backward(loss)
        # every candidate violates its group's margin at all-zero scores
        assert scores.grad is not None
        for j, g in enumerate(groups):
            seg = scores.grad[10 * j:10 * (j + 1)]
            assert seg[g.positive] == -9.0
            assert np.all(np.delete(seg, g.positive) == 1.0)

    def test_rejects_mismatched_lengths(self, small_dataset):
        groups = self._groups(small_dataset, [0])
        with pytest.raises(InputError):
            TR.grouped_ranking_loss(T.constant(np.zeros(7)), groups, margin=1.0)
        with pytest.raises(InputError):
            TR.grouped_ranking_loss(T.constant(np.zeros(0)), [], margin=1.0)


class TestRankingMatrixLoss:
    def test_equals_sum_of_row_losses(self):
        rng = np.random.default_rng(4)
        scores = rng.normal(scale=3.0, size=(5, 5))
        total = TR.ranking_matrix_loss(T.constant(scores), margin=2.0).item()
        by_row = sum(TR.ranking_loss(T.constant(row), positive=k, margin=2.0).item()
                     for k, row in enumerate(scores))
        assert total == pytest.approx(by_row, rel=1e-12)

    def test_frozen_example(self):
        # row 0: max(0, 0-5+10) = 5; row 1: max(0, 1-8+10) = 3 -> total 8
        scores = T.constant([[5.0, 0.0], [1.0, 8.0]])
        assert TR.ranking_matrix_loss(scores, margin=10.0).item() == \
            pytest.approx(8.0, abs=1e-12)

    def test_zero_iff_all_margins_met(self):
        met = T.constant([[10.0, 0.0], [-5.0, 5.0]])
        assert TR.ranking_matrix_loss(met, margin=5.0).item() == 0.0
        violated = T.constant([[10.0, 5.1], [-5.0, 5.0]])
        assert TR.ranking_matrix_loss(violated, margin=5.0).item() > 0.0

    def test_weight_decay_term(self):
        w = Param("w", Tensor([2.0, 1.0], requires_grad=True), decay=True)
        b = Param("b", Tensor([100.0], requires_grad=True), decay=False)
        scores = T.constant([[5.0, 0.0], [1.0, 8.0]])
        loss = TR.ranking_matrix_loss(scores, margin=10.0, weight_decay=0.5,
                                      params=[w, b])
        assert loss.item() == pytest.approx(8.0 + 0.5 * 5.0, abs=1e-12)

    def test_gradient_flows_to_scores(self):
        scores = Tensor([[1.0, 0.5], [0.0, 2.0]], requires_grad=True)
        with T.Tape() as tape:
            loss = TR.ranking_matrix_loss(scores, margin=1.0)
        tape.backward(loss)
        # row 0: hinge on s01 active (0.5-1+1 > 0); row 1: hinge on s10 inactive
        np.testing.assert_allclose(scores.grad, [[-1.0, 1.0], [0.0, 0.0]])

    def test_rejects_non_square(self):
        with pytest.raises(InputError):
            TR.ranking_matrix_loss(T.constant(np.zeros((2, 3))), margin=1.0)
        with pytest.raises(InputError):
            TR.ranking_matrix_loss(T.constant(np.zeros((1, 1))), margin=1.0)


class TestFibLoss:
    def test_uniform_logits_give_log_vocab(self):
        v = 37
        loss = TR.fib_loss(T.constant(np.zeros(v)), 5)
        assert loss.item() == pytest.approx(np.log(v), abs=1e-12)
        loss = TR.fib_loss(T.constant(np.full(v, 123.4)), 0)
        assert loss.item() == pytest.approx(np.log(v), abs=1e-12)

    def test_extreme_logits_stay_finite(self):
        logits = np.full(10, -1e4)
        logits[3] = 1e4
        assert np.isfinite(TR.fib_loss(T.constant(logits), 3).item())
        assert TR.fib_loss(T.constant(logits), 3).item() == pytest.approx(0.0, abs=1e-12)

    def test_batch_mean(self):
        logits = T.constant(np.zeros((4, 11)))
        loss = TR.fib_batch_loss(logits, [0, 1, 2, 3])
        assert loss.item() == pytest.approx(np.log(11), abs=1e-12)

    def test_target_range_checked(self):
        with pytest.raises(InputError):
            TR.fib_loss(T.constant(np.zeros(5)), 9)


class TestAdam:
    def test_matches_reference_implementation(self):
        rng = np.random.default_rng(1)
        p = Param("p", Tensor(rng.normal(size=(3, 2)), requires_grad=True), decay=True)
        start = p.tensor.data.copy()
        grads = [rng.normal(size=(3, 2)) for _ in range(5)]
        state = TR.AdamState()
        for g in grads:
            p.tensor.grad = g.copy()
            TR.adam_step([p], state, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
        # independent reference loop
        x = start.copy()
        m = np.zeros_like(x)
        v = np.zeros_like(x)
        for t, g in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.tensor.data, x, rtol=1e-12)

    def test_zero_gradient_from_start_leaves_params_unchanged(self):
        p = Param("p", Tensor([1.0, -2.0], requires_grad=True), decay=True)
        state = TR.AdamState()
        p.tensor.grad = np.zeros(2)
        TR.adam_step([p], state, lr=0.1)
        np.testing.assert_array_equal(p.tensor.data, [1.0, -2.0])

    def test_updates_decay_after_gradients_stop(self):
        p = Param("p", Tensor([0.0], requires_grad=True), decay=True)
        state = TR.AdamState()
        p.tensor.grad = np.array([1.0])
        TR.adam_step([p], state, lr=0.1)
        deltas = []
        for _ in range(30):
            before = p.tensor.data.copy()
            p.tensor.grad = np.zeros(1)
            TR.adam_step([p], state, lr=0.1)
            deltas.append(abs(float(p.tensor.data[0] - before[0])))
        assert all(d2 <= d1 + 1e-15 for d1, d2 in zip(deltas, deltas[1:]))
        assert deltas[-1] < deltas[0]


@pytest.fixture(scope="module")
def small_dataset():
    return generate_corpus(toy_synth_config(corpus_size=8, seed=1))


class TestBatchBuilders:
    def test_retrieval_batch_layout(self, small_dataset):
        ex = small_dataset.examples
        batch = TR.build_retrieval_batch(ex, anchor=2, batch_size=4, rng=Rng(0))
        assert batch.positive == 0
        assert batch.videos[0] is ex[2].video
        assert all(s is ex[2].sentence for s in batch.sentences)
        assert len(batch.videos) == 4
        foreign = batch.videos[1:]
        assert all(v is not ex[2].video for v in foreign)
        assert len({id(v) for v in foreign}) == 3  # without replacement

    def test_retrieval_batch_needs_enough_examples(self, small_dataset):
        with pytest.raises(InputError):
            TR.build_retrieval_batch(small_dataset.examples[:3], 0, 10, Rng(0))

    def test_mc_batch_layout(self, small_dataset):
        items = make_multiple_choice(small_dataset, seed=3)
        batch = TR.build_mc_batch(items, anchor=1, rng=Rng(0))
        assert len(batch.sentences) == 10
        assert batch.positive == items[1].answer
        assert all(v is items[1].video for v in batch.videos)
        assert batch.sentences[:5] == items[1].choices
        positive_key = tuple(items[1].choices[items[1].answer].token_ids)
        for filler in batch.sentences[5:]:
            assert tuple(filler.token_ids) != positive_key


def quick_train_config(**over):
    base = dict(task="retrieval", batch_size=3, margin=1.0, weight_decay=0.0,
                learning_rate=3e-3, epochs=2, seed=0)
    base.update(over)
    return TrainConfig(**base)


class TestTrainLoop:
    def test_retrieval_trace_and_param_movement(self, small_dataset):
        model = MatchModel(toy_model_config(), Rng(0))
        before = {p.name: p.tensor.data.copy() for p in model.parameters()}
        trace = TR.train(model, small_dataset.examples, quick_train_config())
        # 8 examples in chunks of 3 -> batches of 3, 3, 2 per epoch
        assert len(trace) == 2 * 3
        assert all(np.isfinite(t.loss) for t in trace)
        moved = [name for name, arr in before.items()
                 if not np.array_equal(arr, dict((p.name, p.tensor.data)
                                                 for p in model.parameters())[name])]
        assert len(moved) > len(before) // 2

    def test_same_seed_reproduces_trace_bitwise(self, small_dataset):
        t1 = TR.train(MatchModel(toy_model_config(), Rng(0)),
                      small_dataset.examples, quick_train_config())
        t2 = TR.train(MatchModel(toy_model_config(), Rng(0)),
                      small_dataset.examples, quick_train_config())
        assert [(e.epoch, e.batch, e.loss) for e in t1] == \
            [(e.epoch, e.batch, e.loss) for e in t2]

    def test_non_finite_loss_aborts_with_location(self, small_dataset):
        model = MatchModel(toy_model_config(), Rng(0))
        model.decoder.out.w.data[0, 0] = np.nan
        with pytest.raises(TrainingDiverged, match="epoch 0, batch 0"):
            TR.train(model, small_dataset.examples, quick_train_config())

    def test_fib_chunking_merges_lone_tail(self, small_dataset):
        items, _ = make_fib(small_dataset, seed=0)
        items = items[:7]
        cfg = quick_train_config(task="fib", batch_size=3, epochs=1, margin=10.0)
        model = FibModel(toy_model_config(variant="fib", output_dim=21), Rng(0))
        trace = TR.train(model, items, cfg)
        assert len(trace) == 2  # 3 + 4 after merging the lone tail

    def test_early_stop_callback(self, small_dataset):
        model = MatchModel(toy_model_config(), Rng(0))
        cfg = quick_train_config(epochs=50)
        trace = TR.train(model, small_dataset.examples, cfg,
                         on_epoch=lambda m, e, tr: e >= 1)
        assert trace[-1].epoch == 1

    def test_loss_trace_csv(self, tmp_path):
        trace = [TR.TraceEntry(0, 0, 1.5), TR.TraceEntry(0, 1, 0.25)]
        path = tmp_path / "loss.csv"
        TR.write_loss_trace(trace, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,batch,loss"
        assert lines[1] == "0,0,1.5"


class TestGradientCheck:
    def test_small_model_ranking_loss_passes(self, small_dataset):
        model = MatchModel(toy_model_config(), Rng(2))
        params = model.parameters()
        ex = small_dataset.examples

        def build():
            scores = model.cross_scores([e.video for e in ex[:3]],
                                        [e.sentence for e in ex[:3]], T.TRAIN)
            return TR.ranking_matrix_loss(scores, margin=1.0,
                                          weight_decay=0.001, params=params)

        # probe a representative subset to keep runtime low
        subset = [p for p in params
                  if p.name in ("word.embedding", "word.lstm_f.wx", "video.conv.k",
                                "proj.word.w", "proj.video.gamma", "fusion.att.read_w",
                                "fusion.rep2.w", "decoder.conv3.gate_k",
                                "decoder.head1.w", "decoder.out.b")]
        report = TR.gradient_check(build, subset)
        worst = max(err for _, err in report)
        assert worst < 1e-4, report
