"""KL/soft-CE losses, their equivalence, and the four trainers."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsadapt import distill, network as net
from tsadapt.network import POSTERIOR_FLOOR


def random_posteriors(rng, frames, classes):
    return net.softmax_floored(rng.normal(size=(frames, classes)) * 2.0)


def tiny_config(**kw):
    defaults = dict(batch_frames=64, max_epochs=5, lr=0.1, lr_decay=1.0,
                    momentum=0.0, clip_norm=None, tol=1e-6, patience=50, seed=0)
    defaults.update(kw)
    return distill.TsConfig(**defaults)


class TestKlDivergence:
    def test_identity_zero(self):
        p = random_posteriors(np.random.default_rng(0), 12, 6)
        assert abs(distill.kl_divergence(p, p)) <= 1e-12

    def test_two_class_value(self):
        # 0.5*ln(0.5/0.9) + 0.5*ln(0.5/0.1), worked out independently
        teacher = np.array([[0.5, 0.5]])
        student = np.array([[0.9, 0.1]])
        expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
        assert abs(expected - 0.510826) < 1e-6
        assert distill.kl_divergence(teacher, student) == pytest.approx(expected, abs=1e-12)

    def test_floored_spike_near_ln2(self):
        eps = POSTERIOR_FLOOR
        teacher = np.array([[1.0 - eps, eps]])
        student = np.array([[0.5, 0.5]])
        expected = (1 - eps) * math.log((1 - eps) / 0.5) + eps * math.log(eps / 0.5)
        got = distill.kl_divergence(teacher, student)
        assert got == pytest.approx(expected, abs=1e-12)
        assert abs(got - math.log(2)) < 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            distill.kl_divergence(np.full((2, 2), 0.5), np.full((3, 2), 0.5))

    def test_non_stochastic_rejected(self):
        with pytest.raises(ValueError, match="sum to 1"):
            distill.kl_divergence(np.full((2, 2), 0.4), np.full((2, 2), 0.5))

    def test_zero_entries_rejected(self):
        bad = np.array([[1.0, 0.0]])
        with pytest.raises(ValueError, match="floor"):
            distill.kl_divergence(bad, np.array([[0.5, 0.5]]))

    @given(st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_gibbs_inequality(self, seed):
        rng = np.random.default_rng(seed)
        t = random_posteriors(rng, 4, 5)
        s = random_posteriors(rng, 4, 5)
        assert distill.kl_divergence(t, s) >= 0.0


class TestSoftCeLoss:
    def test_minimizer_gives_entropy_and_zero_grad(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(9, 5))
        teacher = net.softmax_floored(logits)
        loss, grad = distill.soft_ce_loss(teacher, logits)
        assert loss == pytest.approx(distill.entropy(teacher), abs=1e-9)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_uniform_teacher_bound(self):
        # loss = sum_f [log K + KL(uniform || P_S,f)], evaluated independently
        rng = np.random.default_rng(2)
        frames, classes = 7, 6
        logits = rng.normal(size=(frames, classes))
        teacher = np.full((frames, classes), 1.0 / classes)
        loss, _ = distill.soft_ce_loss(teacher, logits)
        p_s = net.softmax_floored(logits)
        rhs = sum(math.log(classes)
                  + sum((1 / classes) * math.log((1 / classes) / p_s[f, i])
                        for i in range(classes))
                  for f in range(frames))
        assert loss == pytest.approx(rhs, abs=1e-9)
        assert loss >= frames * math.log(classes) - 1e-12

    def test_equivalence_with_kl(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            teacher = random_posteriors(rng, 5, 4)
            logits = rng.normal(size=(5, 4)) * 3.0
            loss, _ = distill.soft_ce_loss(teacher, logits)
            kl = distill.kl_divergence(teacher, net.softmax_floored(logits))
            assert abs(loss - distill.entropy(teacher) - kl) <= 1e-9

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        model = net.init_network([4, 6, 3], seed=5)
        x = rng.normal(size=(5, 4))
        teacher = random_posteriors(rng, 5, 3)
        err = net.grad_check(model, lambda lg: distill.soft_ce_loss(teacher, lg), x)
        assert err <= 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            distill.soft_ce_loss(np.full((2, 3), 1 / 3), np.zeros((2, 4)))


class TestHardCeLoss:
    def test_one_hot_reduction(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(8, 4))
        labels = rng.integers(0, 4, size=8)
        one_hot = np.eye(4)[labels]
        hard, hard_grad = distill.hard_ce_loss(labels, logits)
        soft, soft_grad = distill.soft_ce_loss(
            np.maximum(one_hot, POSTERIOR_FLOOR) /
            np.maximum(one_hot, POSTERIOR_FLOOR).sum(1, keepdims=True), logits)
        assert hard == pytest.approx(soft, abs=1e-9)
        np.testing.assert_allclose(hard_grad, soft_grad, atol=1e-9)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="label out of range"):
            distill.hard_ce_loss(np.array([0, 4]), np.zeros((2, 4)))


def make_linear_teacher(dims, seed=0):
    model = net.init_network(dims, activation="none", seed=seed)
    rng = np.random.default_rng(seed + 100)
    model.weights[0] = rng.normal(scale=0.8, size=model.weights[0].shape)
    model.biases[0] = rng.normal(scale=0.1, size=model.biases[0].shape)
    return model


class TestTsAdapt:
    def test_identical_domain_is_a_fixed_point(self):
        rng = np.random.default_rng(6)
        teacher = make_linear_teacher([4, 3])
        pairs = [(f, f) for f in [rng.normal(size=(30, 4)) for _ in range(6)]]
        student, report = distill.ts_adapt(teacher, pairs,
                                           tiny_config(max_epochs=3, val_fraction=0.0))
        # initial validation objective equals the teacher entropy per frame
        val_feats = np.concatenate([p[0] for p in pairs])
        # gradient is exactly zero, so parameters never move
        for ws, wt in zip(student.weights, teacher.weights):
            assert np.array_equal(ws, wt)
        posts = net.forward(teacher, val_feats)
        per_frame_entropy = distill.entropy(posts) / val_feats.shape[0]
        assert report.rows[0].val_obj == pytest.approx(per_frame_entropy, rel=1e-6)

    def test_constant_shift_absorbed(self):
        # a linear network can absorb a constant input offset into its bias
        rng = np.random.default_rng(7)
        teacher = make_linear_teacher([5, 2])
        shift = np.full(5, 1.5)
        sources = [rng.normal(size=(40, 5)) for _ in range(25)]
        pairs = [(s, s + shift) for s in sources]
        cfg = tiny_config(max_epochs=60, lr=0.5, momentum=0.9, batch_frames=256)
        student, _ = distill.ts_adapt(teacher, pairs, cfg)
        eval_src = rng.normal(size=(300, 5))
        p_teacher = net.forward(teacher, eval_src)
        p_student = net.forward(student, eval_src + shift)
        mean_kl = distill.kl_divergence(p_teacher, p_student) / 300
        assert mean_kl <= 0.01

    def test_teacher_never_modified(self, tmp_path):
        rng = np.random.default_rng(8)
        teacher = make_linear_teacher([3, 2])
        net.save_checkpoint(tmp_path / "before.ckpt", teacher)
        pairs = [(rng.normal(size=(20, 3)), rng.normal(size=(20, 3))) for _ in range(4)]
        distill.ts_adapt(teacher, pairs, tiny_config(max_epochs=2))
        net.save_checkpoint(tmp_path / "after.ckpt", teacher)
        assert (tmp_path / "before.ckpt").read_bytes() == (tmp_path / "after.ckpt").read_bytes()

    def test_empty_corpus(self):
        with pytest.raises(ValueError, match="empty"):
            distill.ts_adapt(make_linear_teacher([3, 2]), [], tiny_config())

    def test_frame_mismatch(self):
        teacher = make_linear_teacher([3, 2])
        pairs = [(np.ones((5, 3)), np.ones((6, 3)))]
        with pytest.raises(ValueError, match="pair 0"):
            distill.ts_adapt(teacher, pairs, tiny_config())


class TestTrainHard:
    def test_separable_task_reaches_zero(self):
        rng = np.random.default_rng(9)
        x0 = rng.normal(loc=-2.0, size=(200, 4))
        x1 = rng.normal(loc=2.0, size=(200, 4))
        items = [(np.vstack([x0[i : i + 20], x1[i : i + 20]]),
                  np.array([0] * 20 + [1] * 20)) for i in range(0, 200, 20)]
        model = net.init_network([4, 8, 2], seed=0)
        trained, report = distill.train_hard(model, items, tiny_config(max_epochs=20,
                                                                       momentum=0.9))
        assert report.rows[-1].val_fer == 0.0

    def test_input_left_untouched(self):
        model = net.init_network([3, 2], seed=1)
        before = [w.copy() for w in model.weights]
        items = [(np.random.default_rng(0).normal(size=(10, 3)), np.zeros(10, dtype=int))]
        distill.train_hard(model, items, tiny_config(max_epochs=2))
        assert np.array_equal(model.weights[0], before[0])

    def test_label_out_of_range(self):
        model = net.init_network([3, 2], seed=1)
        items = [(np.ones((4, 3)), np.array([0, 1, 2, 0]))]
        with pytest.raises(ValueError, match="label out of range"):
            distill.train_hard(model, items, tiny_config())

    def test_mismatched_label_count(self):
        with pytest.raises(ValueError, match="labels"):
            distill.TrainItem(np.ones((4, 3)), None, np.zeros(5, dtype=int))

    def test_objective_descent(self):
        rng = np.random.default_rng(10)
        items = [(rng.normal(size=(40, 5)), rng.integers(0, 3, size=40))
                 for _ in range(10)]
        model = net.init_network([5, 16, 3], seed=2)
        _, report = distill.train_hard(model, items,
                                       tiny_config(max_epochs=15, lr=0.05, momentum=0.9))
        train = [r.train_obj for r in report.rows[1:]]
        for earlier, later in zip(train, train[1:]):
            assert later <= earlier + 1e-3
        assert report.rows[-1].val_obj <= report.rows[0].val_obj


class TestPseudoLabel:
    def test_uniform_teacher_labels_class_zero(self):
        teacher = net.init_network([3, 4], seed=0)
        teacher.weights[0][:] = 0.0
        feats = [np.random.default_rng(0).normal(size=(10, 3))]
        posteriors = net.forward(teacher, feats[0])
        np.testing.assert_allclose(posteriors, 0.25, atol=1e-12)
        assert np.all(posteriors.argmax(axis=1) == 0)
        student, report = distill.pseudo_label_adapt(teacher, feats,
                                                     tiny_config(max_epochs=1))
        assert len(report.rows) >= 2

    def test_single_utterance_runs(self):
        teacher = make_linear_teacher([4, 3])
        feats = [np.random.default_rng(1).normal(size=(25, 4))]
        _, report = distill.pseudo_label_adapt(teacher, feats, tiny_config(max_epochs=2))
        assert len(report.rows) - 1 >= 1

    def test_stays_close_to_teacher_on_own_data(self):
        # self-training on the teacher's own training data keeps the frame
        # error within a point of the teacher's, measured against true labels
        rng = np.random.default_rng(11)
        centers = rng.normal(scale=3.0, size=(3, 4))
        items = []
        for _ in range(10):
            labels = rng.integers(0, 3, size=60)
            feats = centers[labels] + rng.normal(size=(60, 4))
            items.append((feats, labels))
        teacher, _ = distill.train_hard(net.init_network([4, 8, 3], seed=3), items,
                                        tiny_config(max_epochs=10, lr=0.05, momentum=0.9))
        student, _ = distill.pseudo_label_adapt(
            teacher, [f for f, _ in items], tiny_config(max_epochs=8, lr=0.05,
                                                        momentum=0.9))
        all_feats = np.concatenate([f for f, _ in items])
        all_labels = np.concatenate([l for _, l in items])
        fer_teacher = 100.0 * np.mean(net.forward(teacher, all_feats).argmax(1) != all_labels)
        fer_student = 100.0 * np.mean(net.forward(student, all_feats).argmax(1) != all_labels)
        assert abs(fer_student - fer_teacher) <= 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            distill.pseudo_label_adapt(make_linear_teacher([3, 2]), [], tiny_config())


class TestInterpolatedDistill:
    def setup_method(self):
        rng = np.random.default_rng(12)
        self.teacher = make_linear_teacher([4, 3], seed=4)
        self.pairs = [(rng.normal(size=(30, 4)), rng.normal(size=(30, 4)),
                       rng.integers(0, 3, size=30)) for _ in range(8)]

    def test_lambda_one_matches_ts(self):
        cfg = tiny_config(max_epochs=4, momentum=0.9)
        s_interp, r_interp = distill.interpolated_distill(self.teacher, self.pairs, 1.0, cfg)
        s_ts, r_ts = distill.ts_adapt(self.teacher, self.pairs, cfg)
        for a, b in zip(r_interp.rows, r_ts.rows):
            assert a.train_obj == pytest.approx(b.train_obj, abs=1e-12)
            assert a.val_obj == pytest.approx(b.val_obj, abs=1e-12)
        for wa, wb in zip(s_interp.weights, s_ts.weights):
            np.testing.assert_allclose(wa, wb, atol=1e-12)

    def test_lambda_zero_matches_train_hard(self):
        cfg = tiny_config(max_epochs=4, momentum=0.9)
        s_interp, r_interp = distill.interpolated_distill(self.teacher, self.pairs, 0.0, cfg)
        hard_items = [(tgt, labels) for _, tgt, labels in self.pairs]
        s_hard, r_hard = distill.train_hard(self.teacher, hard_items, cfg)
        for a, b in zip(r_interp.rows, r_hard.rows):
            assert a.train_obj == pytest.approx(b.train_obj, abs=1e-12)
            assert a.val_obj == pytest.approx(b.val_obj, abs=1e-12)

    def test_lambda_half_is_the_mean_of_endpoints(self):
        # the evaluation-only epoch of each run exposes the pure objectives
        cfg = tiny_config(max_epochs=1)
        r_soft = distill.interpolated_distill(self.teacher, self.pairs, 1.0, cfg)[1]
        r_hard = distill.interpolated_distill(self.teacher, self.pairs, 0.0, cfg)[1]
        r_mid = distill.interpolated_distill(self.teacher, self.pairs, 0.5, cfg)[1]
        expected = 0.5 * r_soft.rows[0].train_obj + 0.5 * r_hard.rows[0].train_obj
        assert r_mid.rows[0].train_obj == pytest.approx(expected, abs=1e-12)

    def test_lambda_out_of_range(self):
        with pytest.raises(ValueError, match="lambda"):
            distill.interpolated_distill(self.teacher, self.pairs, 1.5, tiny_config())

    def test_missing_labels(self):
        pairs = [(p[0], p[1]) for p in self.pairs]
        with pytest.raises(ValueError, match="labels"):
            distill.interpolated_distill(self.teacher, pairs, 0.5, tiny_config())


class TestLossReport:
    def test_round_trip(self, tmp_path):
        report = distill.LossReport([
            distill.EpochRow(0, 3.0, 3.1, None, 0.5),
            distill.EpochRow(1, 2.5, 2.6, 41.25, 1.75),
        ])
        path = tmp_path / "r.tsv"
        report.save(path)
        back = distill.LossReport.load(path)
        assert back.rows == report.rows
