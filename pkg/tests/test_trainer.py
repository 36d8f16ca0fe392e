import csv
from dataclasses import replace

import numpy as np
import pytest

from pyactqa.dataset import Corpus, Sample, SynthSpec, synth_generate
from pyactqa.exceptions import ConfigurationException, RegistrationException, ValidationException
from pyactqa.layers import Roi
from pyactqa.model import ModelConfig, build
from pyactqa.trainer import PRESETS, BatchStream, TrainConfig, evaluate, freeze_below, preset, sgd_step, train

SPEC = SynthSpec(n_images=16, n_test=4, num_classes=4, max_people=3, image_size=24, context_dependence=0.0, seed=5)
MODEL = ModelConfig(variant="Fusion2", num_classes=4, backbone_widths=[4, 6], head_widths=[16], seed=1)
FAST = TrainConfig(lr=0.01, total_iters=6, batch_images=3, max_boxes_per_image=2, log_every=0)
LEARN = TrainConfig(lr=0.003, total_iters=300, batch_images=4, max_boxes_per_image=3, log_every=0)


@pytest.fixture(scope="module")
def corpus():
    return synth_generate(SPEC)[0]


def params_bytes(net):
    return {name: value.tobytes() for name, value in net.params.items()}


class TestTrainConfig:
    def test_lr_schedule(self):
        cfg = TrainConfig(lr=1.0, lr_decay_factor=0.1, lr_decay_every=10)

        assert cfg.lr_at(0) == 1.0
        assert cfg.lr_at(9) == 1.0
        assert cfg.lr_at(10) == pytest.approx(0.1)
        assert cfg.lr_at(25) == pytest.approx(0.01)

    @pytest.mark.parametrize("overrides", [{"lr": 0.0}, {"momentum": 1.0}, {"batch_images": 0},
                                           {"max_boxes_per_image": 0}, {"loss_mode": "Hinge"},
                                           {"supervision": "Bags"}, {"w_p": -1.0}])
    def test_invalid(self, overrides):
        with pytest.raises(ConfigurationException):
            replace(TrainConfig(), **overrides).validate()

    def test_hico_preset(self):
        cfg = PRESETS["hico"]

        assert (cfg.lr, cfg.lr_decay_factor, cfg.lr_decay_every, cfg.total_iters) == (1e-5, 0.1, 30000, 60000)
        assert (cfg.momentum, cfg.batch_images, cfg.max_boxes_per_image) == (0.9, 10, 6)
        assert (cfg.loss_mode, cfg.w_p, cfg.w_n, cfg.supervision) == ("WeightedBCE", 10.0, 1.0, "MIL")

    def test_mpii_preset(self):
        cfg = PRESETS["mpii"]

        assert (cfg.lr, cfg.lr_decay_every, cfg.total_iters) == (1e-4, 12000, 40000)
        assert (cfg.loss_mode, cfg.supervision) == ("SoftmaxCE", "PerInstance")

    def test_preset_overrides(self):
        cfg = preset("hico_desk", total_iters=10)

        assert cfg.total_iters == 10
        assert PRESETS["hico_desk"].total_iters == 1500

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationException):
            preset("coco")


class TestSgdStep:
    def test_plain_step(self):
        velocity = {"w": np.zeros(2)}

        updated = sgd_step({"w": np.array([1.0, 2.0])}, {"w": np.array([0.5, -1.0])}, velocity, 0.1, 0.0)

        assert np.allclose(updated["w"], [0.95, 2.1], rtol=0, atol=1e-15)

    def test_momentum_accumulates(self):
        velocity = {"w": np.array([1.0])}

        updated = sgd_step({"w": np.array([0.0])}, {"w": np.array([2.0])}, velocity, 0.5, 0.9)

        assert velocity["w"].tolist() == [pytest.approx(-0.1)]
        assert updated["w"].tolist() == [pytest.approx(-0.1)]


class TestBatchStream:
    def test_subsamples_boxes(self, corpus):
        cfg = replace(FAST, max_boxes_per_image=1)
        batches = list(BatchStream(corpus.samples, cfg, np.random.default_rng(0)).batches(4))

        assert len(batches) == 4
        for batch in batches:
            assert len(batch) == cfg.batch_images
            assert all(len(item.box_index) == 1 for item in batch)

    def test_visits_every_image_each_epoch(self, corpus):
        cfg = replace(FAST, batch_images=4)
        batches = BatchStream(corpus.samples, cfg, np.random.default_rng(0)).batches(4)

        seen = [item.sample.id for batch in batches for item in batch]

        assert sorted(seen) == sorted(s.id for s in corpus.samples)

    def test_prefetch_does_not_change_order(self, corpus):
        plain = BatchStream(corpus.samples, FAST, np.random.default_rng(3)).batches(8)
        ahead = BatchStream(corpus.samples, replace(FAST, prefetch=2), np.random.default_rng(3)).batches(8)

        for left, right in zip(plain, ahead):
            assert [i.sample.id for i in left] == [i.sample.id for i in right]
            assert all(np.array_equal(a.box_index, b.box_index) for a, b in zip(left, right))


class TestTrain:
    def test_deterministic(self, corpus):
        first = train(build(MODEL), corpus, FAST)
        second = train(build(MODEL), corpus, replace(FAST, prefetch=3))

        assert params_bytes(first.net) == params_bytes(second.net)
        assert first.losses().tolist() == second.losses().tolist()

    def test_trace(self, corpus, tmp_path):
        result = train(build(MODEL), corpus, FAST)
        result.write_trace(tmp_path / "loss.csv")

        with open(tmp_path / "loss.csv", encoding="utf-8") as file:
            rows = list(csv.reader(file))

        assert rows[0] == ["iteration", "lr", "loss"]
        assert len(rows) == FAST.total_iters + 1
        assert np.all(result.losses() >= 0)

    def test_all_parameters_move(self, corpus):
        net = build(MODEL)
        before = params_bytes(net)

        train(net, corpus, FAST)

        assert all(before[name] != value.tobytes() for name, value in net.params.items())

    def test_freeze_below(self, corpus):
        net = freeze_below(build(MODEL), "backbone_conv2")
        before = params_bytes(net)

        train(net, corpus, FAST)

        for name, value in net.params.items():
            moved = before[name] != value.tobytes()
            assert moved == name.startswith(("fusion", "head")), name

    def test_freeze_unknown_layer(self):
        with pytest.raises(RegistrationException):
            freeze_below(build(MODEL), "conv5")

    @pytest.mark.parametrize("variant", ["BboxOnly", "FullImageOnly", "Fusion1", "Fusion2"])
    def test_loss_decreases(self, corpus, variant):
        losses = train(build(replace(MODEL, variant=variant)), corpus, LEARN).losses()

        assert losses[-100:].mean() < losses[:100].mean(), variant

    def test_frozen_training_still_learns(self, corpus):
        net = freeze_below(build(MODEL), "backbone_conv1")

        losses = train(net, corpus, LEARN).losses()

        assert losses[-100:].mean() < losses[:100].mean()

    def test_checkpoint_callback(self, corpus):
        calls = []

        train(build(MODEL), corpus, replace(FAST, checkpoint_every=2), on_checkpoint=lambda n, i: calls.append(i))

        assert calls == [2, 4, 6]

    def test_single_person_parity(self):
        spec = replace(SPEC, min_people=1, max_people=1, supervision="PerInstance")
        corpus = synth_generate(spec)[0]

        mil = train(build(MODEL), corpus, replace(FAST, supervision="MIL"))
        per_instance = train(build(MODEL), corpus, replace(FAST, supervision="PerInstance"))

        assert params_bytes(mil.net) == params_bytes(per_instance.net)

    def test_softmax_per_instance(self, corpus):
        result = train(build(MODEL), corpus, replace(FAST, loss_mode="SoftmaxCE", supervision="PerInstance"))

        assert np.all(np.isfinite(result.losses()))

    def test_per_instance_needs_box_labels(self, corpus):
        stripped = Corpus([replace(s, per_box_labels=None) for s in corpus.samples], corpus.class_names)

        with pytest.raises(ValidationException):
            train(build(MODEL), stripped, replace(FAST, supervision="PerInstance"))

    def test_images_without_boxes_are_skipped(self, corpus):
        empty = Sample("empty", np.zeros((3, 24, 24)), [], np.zeros(4, dtype=np.int64))
        mixed = Corpus(list(corpus.samples) + [empty], corpus.class_names)

        result = train(build(MODEL), mixed, FAST)

        assert len(result.trace) == FAST.total_iters

    def test_no_usable_images(self):
        empty = Sample("empty", np.zeros((3, 24, 24)), [], np.zeros(4, dtype=np.int64))

        with pytest.raises(ValidationException):
            train(build(MODEL), Corpus([empty], ["a", "b", "c", "d"]), FAST)

    def test_empty_corpus(self):
        with pytest.raises(ValidationException):
            train(build(MODEL), Corpus([], ["a", "b", "c", "d"]), FAST)

    def test_roi_boxes_are_used(self, corpus):
        sample = corpus.samples[0]
        shifted = replace(sample, boxes=[Roi(0.0, 0.0, 24.0, 24.0)] * len(sample.boxes))

        original = build(MODEL).run(sample.image, sample.boxes).logits
        moved = build(MODEL).run(shifted.image, shifted.boxes).logits

        assert not np.array_equal(original, moved)


class TestEvaluate:
    def test_report(self, corpus):
        report = evaluate(build(MODEL), corpus)

        assert report.num_images == len(corpus.samples)
        assert 0.0 <= report.mean_ap <= 100.0
        assert report.extra == {"variant": "Fusion2", "unscored_images": 0}

    def test_images_without_boxes_are_left_out(self, corpus):
        empty = Sample("empty", np.zeros((3, 24, 24)), [], np.zeros(4, dtype=np.int64))

        report = evaluate(build(MODEL), Corpus(list(corpus.samples) + [empty], corpus.class_names))

        assert report.num_images == len(corpus.samples)
        assert report.extra["unscored_images"] == 1

    def test_full_image_scores_every_image(self, corpus):
        empty = Sample("empty", np.zeros((3, 24, 24)), [], np.zeros(4, dtype=np.int64))
        net = build(ModelConfig(variant="FullImageOnly", num_classes=4, backbone_widths=[4, 6], head_widths=[16]))

        assert evaluate(net, Corpus(list(corpus.samples) + [empty], corpus.class_names)).num_images == 17
