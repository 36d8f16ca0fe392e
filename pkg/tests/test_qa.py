import csv
import json
from dataclasses import replace
from unittest import mock

import numpy as np
import pytest

from pyactqa.dataset import OBJECTS, VERBS, Corpus, Sample, SynthSpec, class_names_for, split_phrase, \
    synth_generate
from pyactqa.exceptions import ConfigurationException, FileException, ValidationException
from pyactqa.layers import Roi
from pyactqa.model import ModelConfig, build
from pyactqa.qa import AnswerRecord, QaConfig, Question, ValItem, WordVecTable, accuracy_report, answer, answer_all, \
    easy_distractors, embed_choice, fit_joint_space, hard_distractors, image_feature, load_questions, \
    save_questions, select_regularization, split_validation, synth_questions, tokenize, train_qa, vocabulary, \
    write_answers

CLASSES = class_names_for(12)
TABLE = WordVecTable.synthetic(VERBS + OBJECTS, seed=0, dim=20)
IMAGES = 30


class LinearWorld:
    """
    Questions whose image features are a fixed linear map of the answer class plus a little noise
    """

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)
        self.mixing = self.rng.standard_normal((len(CLASSES), 16))
        self.features = {}
        self.corpus = Corpus([Sample(f"img-{i}", np.zeros((3, 4, 4)), [], np.zeros(len(CLASSES), dtype=np.int64))
                              for i in range(IMAGES)], CLASSES)

    def question(self, cls, choices=None, correct=0):
        index = len(self.features)
        box = Roi(float(index), 0.0, float(index + 1), 1.0)
        self.features[box] = self.mixing[cls] + 0.05 * self.rng.standard_normal(16)

        return Question(f"q{index}", f"img-{index % IMAGES}", "Activity", [box], choices or [CLASSES[cls]], correct)

    def easy_question(self, cls):
        choices = [CLASSES[cls]] + easy_distractors(CLASSES[cls], CLASSES, self.rng)
        order = self.rng.permutation(4)
        return self.question(cls, [choices[i] for i in order], int(np.flatnonzero(order == 0)[0]))

    def image_feature(self, nets, image, boxes, kind="ClsScore"):
        return self.features[boxes[0]]


@pytest.fixture(scope="module")
def world():
    world = LinearWorld()
    training = [world.question(c) for c in range(len(CLASSES)) for _ in range(20)]
    tests = [world.easy_question(int(c)) for c in world.rng.integers(0, len(CLASSES), size=120)]

    with mock.patch("pyactqa.qa.image_feature", side_effect=world.image_feature):
        result = train_qa([None], training, world.corpus, TABLE, QaConfig())

    return world, result, tests


@pytest.fixture(scope="module")
def net():
    return build(ModelConfig(variant="Fusion2", num_classes=5, backbone_widths=[4, 6], head_widths=[12], seed=3))


IMAGE = np.random.default_rng(42).uniform(0.0, 1.0, size=(3, 16, 16))
BOXES = [Roi(0.0, 4.0, 8.0, 16.0), Roi(6.0, 2.0, 15.0, 14.0)]


class TestWords:
    def test_tokenize(self):
        assert tokenize("Riding a Bicycle!") == ["riding", "a", "bicycle"]

    def test_tokenize_keeps_accented_words(self):
        assert tokenize("riding a café-bike naïvely") == ["riding", "a", "café", "bike", "naïvely"]

    def test_embed_accented_word(self):
        table = WordVecTable({"café": np.ones(2)}, 2)

        assert embed_choice("Café", table).tolist() == [1.0, 1.0]

    def test_embed_average(self):
        table = WordVecTable({"riding": np.array([1.0, 0.0]), "bicycle": np.array([0.0, 1.0])}, 2)

        assert embed_choice("riding bicycle", table).tolist() == [0.5, 0.5]

    def test_oov_counts_in_denominator(self):
        table = WordVecTable({"riding": np.array([1.0, 0.0])}, 2)

        assert embed_choice("riding unicycle", table).tolist() == [0.5, 0.0]
        assert embed_choice("riding unicycle", table, skip_oov=True).tolist() == [1.0, 0.0]

    def test_all_oov_is_zero(self):
        assert not embed_choice("unicycle", TABLE).any()

    def test_no_tokens(self):
        with pytest.raises(ValidationException):
            embed_choice("!?", TABLE)

    def test_synthetic_vectors_ignore_vocabulary(self):
        small = WordVecTable.synthetic(["horse"], seed=0, dim=20)

        assert np.array_equal(small.get("horse"), TABLE.get("horse"))
        assert not np.array_equal(TABLE.get("horse"), WordVecTable.synthetic(["horse"], seed=1, dim=20).get("horse"))

    def test_wrong_dimension(self):
        with pytest.raises(ValidationException):
            WordVecTable({"horse": np.zeros(3)}, 2)

    def test_file_round_trip(self, tmp_path):
        TABLE.save(tmp_path / "wordvecs.txt")

        restored = WordVecTable.load(tmp_path / "wordvecs.txt", dim=20)

        assert sorted(restored.vectors) == sorted(TABLE.vectors)
        assert all(np.array_equal(restored.get(t), TABLE.get(t)) for t in TABLE.vectors)

    def test_load_tolerates_padding(self, tmp_path):
        (tmp_path / "wordvecs.txt").write_bytes("horse 0.1 0.2 \r\ncafé  0.3 0.4\r\n\r\n".encode("utf-8"))

        table = WordVecTable.load(tmp_path / "wordvecs.txt", dim=2)

        assert table.get("horse").tolist() == [0.1, 0.2]
        assert table.get("café").tolist() == [0.3, 0.4]

    def test_short_line(self, tmp_path):
        (tmp_path / "wordvecs.txt").write_text("horse 0.1 0.2\n", encoding="utf-8")

        with pytest.raises(ValidationException):
            WordVecTable.load(tmp_path / "wordvecs.txt", dim=3)

    def test_missing_table(self, tmp_path):
        with pytest.raises(FileException):
            WordVecTable.load(tmp_path / "absent.txt")


class TestQuestion:
    def question(self, **overrides):
        values = dict(id="q", image_id="img", qtype="Relationship", target_person_boxes=[Roi(0.0, 0.0, 2.0, 2.0)],
                      choices=["riding horse", "feeding dog", "holding kite", "washing boat"], correct=2,
                      difficulty="Hard", target_object_box=Roi(1.0, 1.0, 3.0, 3.0))
        values.update(overrides)
        return Question(**values)

    def test_answer(self):
        assert self.question().validate().answer == "holding kite"

    @pytest.mark.parametrize("overrides", [{"qtype": "Counting"}, {"difficulty": "Medium"},
                                           {"target_person_boxes": []}, {"correct": 4},
                                           {"choices": ["riding horse", "feeding dog"]}])
    def test_invalid(self, overrides):
        with pytest.raises(ValidationException):
            self.question(**overrides).validate()

    def test_training_questions_may_have_one_choice(self):
        assert self.question(choices=["riding horse"], correct=0).validate(test=False).answer == "riding horse"

    def test_file_round_trip(self, tmp_path):
        save_questions([self.question(), self.question(id="r", target_object_box=None)], tmp_path / "q.json")

        restored = load_questions(tmp_path / "q.json")

        assert restored == [self.question(), self.question(id="r", target_object_box=None)]

    def test_not_a_list(self, tmp_path):
        (tmp_path / "q.json").write_text(json.dumps({"id": "q"}), encoding="utf-8")

        with pytest.raises(ValidationException):
            load_questions(tmp_path / "q.json")

    def test_missing_field(self, tmp_path):
        record = self.question().to_dict()
        del record["choices"]
        (tmp_path / "q.json").write_text(json.dumps([record]), encoding="utf-8")

        with pytest.raises(ValidationException):
            load_questions(tmp_path / "q.json")


class TestImageFeature:
    def test_single_person_is_the_score_row(self, net):
        feature = image_feature([net], IMAGE, BOXES[:1])

        assert np.array_equal(feature, net.run(IMAGE, BOXES[:1]).logits[0])

    def test_max_over_people_ignores_order(self, net):
        forward = image_feature([net], IMAGE, BOXES)

        assert np.array_equal(forward, image_feature([net], IMAGE, BOXES[::-1]))
        assert np.array_equal(forward, net.run(IMAGE, BOXES).logits.max(axis=0))

    def test_concatenates_networks(self, net):
        other = build(replace(net.config, seed=4))

        feature = image_feature([net, other], IMAGE, BOXES)

        assert feature.shape == (10,)
        assert np.array_equal(feature[:5], image_feature([net], IMAGE, BOXES))
        assert np.array_equal(feature[5:], image_feature([other], IMAGE, BOXES))

    def test_hidden_kind(self, net):
        assert image_feature([net], IMAGE, BOXES, "Hidden").shape == (12,)

    def test_no_networks(self):
        with pytest.raises(ConfigurationException):
            image_feature([], IMAGE, BOXES)

    def test_unknown_kind(self, net):
        with pytest.raises(ConfigurationException):
            image_feature([net], IMAGE, BOXES, "Pixels")


class TestJointSpace:
    def test_clamps_embedding_size(self):
        rng = np.random.default_rng(0)

        model = fit_joint_space(rng.standard_normal((10, 3)), rng.standard_normal((10, 5)), 0.01)

        assert model.dim == 3

    def test_ties_keep_first_grid_value(self):
        rng = np.random.default_rng(1)
        x, y = rng.standard_normal((20, 4)), rng.standard_normal((20, 4))
        items = [ValItem(x[i], y[i:i + 1], 0) for i in range(5)]

        best, scores = select_regularization(x, y, items, [0.01, 0.1, 0.001], d_emb=2)

        assert best == 0.01
        assert scores == {0.01: 100.0, 0.1: 100.0, 0.001: 100.0}

    def test_split_validation_holds_whole_images(self):
        questions = [Question(f"q{i}", f"img-{i % 20}", "Activity", [Roi(0, 0, 1, 1)], ["a b"]) for i in range(60)]

        kept, held = split_validation(questions, 0.1, np.random.default_rng(0))

        assert len({q.image_id for q in held}) == 2
        assert len(held) == 6 and len(kept) == 54
        assert not {q.image_id for q in held} & {q.image_id for q in kept}
        assert split_validation(questions, 0.0, np.random.default_rng(0))[1] == []

    def test_easy_distractors(self):
        distractors = easy_distractors("riding bicycle", CLASSES, np.random.default_rng(0))

        assert len(set(distractors)) == 3
        assert "riding bicycle" not in distractors

        with pytest.raises(ValidationException):
            easy_distractors("a b", ["a b", "c d", "e f"], np.random.default_rng(0))

    def test_single_value_grid_skips_validation(self, world):
        world, _, _ = world
        training = [world.question(c) for c in range(len(CLASSES)) for _ in range(3)]

        with mock.patch("pyactqa.qa.image_feature", side_effect=world.image_feature):
            result = train_qa([None], training, world.corpus, TABLE, QaConfig(reg_grid=[0.01]))

        assert (result.reg, result.val_accuracy, result.grid) == (0.01, None, {})

    def test_too_few_pairs(self, world):
        world, _, _ = world

        with pytest.raises(ValidationException):
            train_qa([None], [world.question(0)], world.corpus, TABLE)

    @pytest.mark.parametrize("overrides", [{"kind": "Pixels"}, {"reg_grid": []}, {"reg_grid": [-1.0]},
                                           {"val_fraction": 1.0}, {"workers": 0}, {"d_emb": 0}])
    def test_invalid_config(self, overrides):
        with pytest.raises(ConfigurationException):
            QaConfig(**overrides).validate()


class TestAnswering:
    def test_linear_world_is_learned(self, world):
        world, result, tests = world

        with mock.patch("pyactqa.qa.image_feature", side_effect=world.image_feature):
            records = answer_all(result.model, [None], tests, world.corpus, TABLE)

        assert accuracy_report(records)["overall"] > 90.0
        assert result.reg in (0.1, 0.01, 0.001, 0.0001)
        assert result.val_accuracy is not None
        assert set(result.grid) == {0.1, 0.01, 0.001, 0.0001}

    def test_permuting_choices_permutes_answer(self, world):
        world, result, tests = world

        with mock.patch("pyactqa.qa.image_feature", side_effect=world.image_feature):
            for question in tests[:20]:
                picked = question.choices[answer(result.model, [None], question, None, TABLE)]
                reversed_question = replace(question, choices=question.choices[::-1])
                again = reversed_question.choices[answer(result.model, [None], reversed_question, None, TABLE)]

                assert picked == again

    def test_duplicate_choices_pick_lowest_index(self, world):
        world, result, tests = world

        with mock.patch("pyactqa.qa.image_feature", side_effect=world.image_feature):
            for question in tests[:20]:
                doubled = replace(question, choices=[question.choices[0]] * 2 + question.choices[2:])

                assert answer(result.model, [None], doubled, None, TABLE) != 1

    def test_workers_keep_order(self, world):
        world, result, tests = world

        with mock.patch("pyactqa.qa.image_feature", side_effect=world.image_feature):
            serial = answer_all(result.model, [None], tests, world.corpus, TABLE)
            threaded = answer_all(result.model, [None], tests, world.corpus, TABLE, QaConfig(workers=4))

        assert threaded == serial

    def test_unknown_image(self, world):
        world, result, tests = world

        with pytest.raises(ValidationException):
            answer_all(result.model, [None], [replace(tests[0], image_id="elsewhere")], world.corpus, TABLE)


class TestReport:
    RECORDS = [AnswerRecord("a", 0, 0, "Easy", "Activity"), AnswerRecord("b", 1, 0, "Easy", "Relationship"),
               AnswerRecord("c", 2, 2, "Hard", "Activity"), AnswerRecord("d", 3, 1, "FilteredHard", "Activity")]

    def test_breakdown(self):
        report = accuracy_report(self.RECORDS)

        assert report == {"overall": 50.0, "count": 4, "Easy": 50.0, "Hard": 50.0, "FilteredHard": 0.0,
                          "Activity": pytest.approx(200.0 / 3.0), "Relationship": 0.0}

    def test_missing_groups_are_left_out(self):
        assert "Hard" not in accuracy_report(self.RECORDS[:2])

    def test_write_answers(self, tmp_path):
        write_answers(self.RECORDS, tmp_path / "answers.csv")

        with open(tmp_path / "answers.csv", encoding="utf-8") as file:
            rows = list(csv.reader(file))

        assert rows[0] == ["question_id", "predicted", "correct"]
        assert rows[4] == ["d", "3", "1"]


class TestSynthQuestions:
    @pytest.fixture(scope="class")
    def corpus(self):
        return synth_generate(SynthSpec(n_images=30, n_test=10, num_classes=12, seed=2))[1]

    def test_easy(self, corpus):
        questions = synth_questions(corpus, "Easy", seed=0)
        images = corpus.by_id()

        assert len({q.id for q in questions}) == len(questions)
        assert len(questions) == sum(len(s.boxes) for s in corpus.samples)
        for question in questions:
            sample = images[question.image_id]
            person = int(question.id.rsplit("-q", 1)[1])
            present = {CLASSES[c] for c in np.flatnonzero(sample.image_labels)}

            assert question.target_person_boxes == [sample.boxes[person]]
            assert question.answer == CLASSES[int(np.flatnonzero(sample.per_box_labels[person])[0])]
            assert len(set(question.choices)) == 4
            assert not (set(question.choices) - {question.answer}) & present
            assert question.difficulty == "Easy"

    def test_question_types_alternate(self, corpus):
        questions = synth_questions(corpus, "Easy", seed=0)

        assert [q.qtype for q in questions[:4]] == ["Activity", "Relationship", "Activity", "Relationship"]

    def test_correct_position_varies(self, corpus):
        assert len({q.correct for q in synth_questions(corpus, "Easy", seed=0)}) > 1

    def test_hard_share_a_word(self, corpus):
        questions = synth_questions(corpus, "Hard", seed=0)

        for question in questions:
            verb, obj = split_phrase(question.answer)
            for choice in set(question.choices) - {question.answer}:
                other_verb, other_obj = split_phrase(choice)
                assert (other_verb == verb) != (other_obj == obj)
        assert {q.difficulty for q in questions} == {"Hard", "FilteredHard"}

    def test_filtered_fraction(self, corpus):
        assert all(q.difficulty == "Hard" for q in synth_questions(corpus, "Hard", filtered_fraction=0.0))
        assert all(q.difficulty == "FilteredHard" for q in synth_questions(corpus, "Hard", filtered_fraction=1.0))

    def test_training_pairs(self, corpus):
        questions = synth_questions(corpus, None)

        assert all(len(q.choices) == 1 and q.correct == 0 for q in questions)

    def test_hard_distractors(self):
        distractors = hard_distractors("riding horse", np.random.default_rng(0))

        assert len(set(distractors)) == 3
        assert all(d.startswith("riding ") or d.endswith(" horse") for d in distractors)

    def test_vocabulary(self, corpus):
        tokens = vocabulary(corpus)

        assert "riding" in tokens and "bench" in tokens
        assert tokens == sorted(set(tokens))

    def test_unknown_difficulty(self, corpus):
        with pytest.raises(ConfigurationException):
            synth_questions(corpus, "FilteredHard")

    def test_needs_box_labels(self, corpus):
        stripped = Corpus([replace(s, per_box_labels=None) for s in corpus.samples], corpus.class_names)

        with pytest.raises(ValidationException):
            synth_questions(stripped)
