"""
Module for multiple-choice question answering on top of trained activity networks.

Images are described by the networks' per-person outputs (class scores before the sigmoid, or the last hidden
layer), max-pooled over the people a question targets and concatenated across networks. Answers are described by the
average of their word vectors. A CCA space fitted on (image, correct answer) pairs ranks the choices.
"""
import csv
import json
import logging
import re
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from pyactqa.cca import CcaModel, DEFAULT_DIM, DEFAULT_POWER, fit_cca, project, rank_choices, rank_embedded
from pyactqa.dataset import Corpus, Sample, split_phrase, VERBS, OBJECTS
from pyactqa.exceptions import ConfigurationException, FileException, ValidationException
from pyactqa.layers import Roi
from pyactqa.metrics import choice_accuracy
from pyactqa.model import Network

logger = logging.getLogger("qa")

WORD_DIM = 300
TEST_CHOICES = 4
QUESTION_TYPES = ("Activity", "Relationship")
DIFFICULTIES = ("Easy", "Hard", "FilteredHard")
FEATURE_KINDS = ("ClsScore", "Hidden")
DEFAULT_REG_GRID = (0.1, 0.01, 0.001, 0.0001)

_TOKEN = re.compile(r"[^\W_]+")


def tokenize(text: str) -> List[str]:
    return _TOKEN.findall(text.lower())


@dataclass
class WordVecTable:
    """
    token -> vector map; every vector has `dim` entries
    """
    vectors: Dict[str, np.ndarray]
    dim: int = WORD_DIM

    def __post_init__(self):
        for token, vector in self.vectors.items():
            if np.shape(vector) != (self.dim,):
                raise ValidationException(f"vector for {token!r} has shape {np.shape(vector)}, expected "
                                          f"({self.dim},)", token)

    def get(self, token: str) -> Optional[np.ndarray]:
        return self.vectors.get(token)

    def __contains__(self, token):
        return token in self.vectors

    @classmethod
    def synthetic(cls, tokens, seed: int = 0, dim: int = WORD_DIM, scale: float = 0.1) -> "WordVecTable":
        """
        Seeded Gaussian vectors. Each token's vector depends only on the token and the seed, not on the vocabulary.
        """
        vectors = {}
        for token in sorted(set(tokens)):
            rng = np.random.default_rng([seed, zlib.crc32(token.encode("utf-8"))])
            vectors[token] = scale * rng.standard_normal(dim)

        return cls(vectors, dim)

    @classmethod
    def load(cls, path, dim: int = WORD_DIM) -> "WordVecTable":
        """
        Read a text table: one token per line followed by :param dim: whitespace-separated floats
        """
        if not Path(path).is_file():
            raise FileException("Invalid file path specified!", path)

        vectors = {}
        with open(path, encoding="utf-8") as file:
            for number, line in enumerate(file, start=1):
                parts = line.split()
                if not parts or not parts[0]:
                    continue
                if len(parts) != dim + 1:
                    raise ValidationException(f"line {number} has {len(parts) - 1} values, expected {dim}", number)
                try:
                    vectors[parts[0]] = np.array([float(v) for v in parts[1:]])
                except ValueError as error:
                    raise ValidationException(f"line {number}: {error}", number) from error

        return cls(vectors, dim)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as file:
            for token, vector in self.vectors.items():
                file.write(token + " " + " ".join(repr(float(v)) for v in vector) + "\n")


def embed_choice(choice: str, table: WordVecTable, skip_oov: bool = False) -> np.ndarray:
    """
    Average word vector of a choice. Out-of-vocabulary tokens count as zero vectors (or are left out of the average
    with :param skip_oov:); a choice with no known token embeds to zero.
    """
    tokens = tokenize(choice)
    if not tokens:
        raise ValidationException(f"Choice {choice!r} has no tokens", choice)

    known = [table.get(token) for token in tokens if token in table]
    denominator = len(known) if skip_oov else len(tokens)
    if not known:
        return np.zeros(table.dim)

    return np.sum(known, axis=0) / denominator


@dataclass
class Question:
    id: str
    image_id: str
    qtype: str
    target_person_boxes: List[Roi]
    choices: List[str]
    correct: int = 0
    difficulty: str = "Easy"
    target_object_box: Optional[Roi] = None

    def validate(self, test: bool = True) -> "Question":
        if self.qtype not in QUESTION_TYPES:
            raise ValidationException(f"Unknown question type {self.qtype}", self.id)
        if self.difficulty not in DIFFICULTIES:
            raise ValidationException(f"Unknown difficulty {self.difficulty}", self.id)
        if not self.target_person_boxes:
            raise ValidationException("A question needs at least one target person box", self.id)
        if not self.choices:
            raise ValidationException("A question needs at least one choice", self.id)
        if test and len(self.choices) != TEST_CHOICES:
            raise ValidationException(f"Test questions have {TEST_CHOICES} choices, got {len(self.choices)}",
                                      self.id)
        if not 0 <= self.correct < len(self.choices):
            raise ValidationException(f"correct index {self.correct} out of range", self.id)

        return self

    @property
    def answer(self) -> str:
        return self.choices[self.correct]

    def to_dict(self) -> dict:
        record = asdict(self)
        record["target_person_boxes"] = [box.as_list() for box in self.target_person_boxes]
        record["target_object_box"] = self.target_object_box.as_list() if self.target_object_box else None
        return record

    @classmethod
    def from_dict(cls, record: dict) -> "Question":
        question_id = record.get("id") if isinstance(record, dict) else None
        try:
            obj = record.get("target_object_box")
            return cls(str(record["id"]), str(record["image_id"]), record["qtype"],
                       [Roi(*(float(v) for v in box)) for box in record["target_person_boxes"]],
                       [str(choice) for choice in record["choices"]], int(record.get("correct", 0)),
                       record.get("difficulty", "Easy"), Roi(*(float(v) for v in obj)) if obj else None)
        except (KeyError, TypeError, ValueError) as error:
            raise ValidationException(f"schema violation: {error}", question_id) from error


def load_questions(path, test: bool = True) -> List[Question]:
    if not Path(path).is_file():
        raise FileException("Invalid file path specified!", path)

    try:
        records = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as error:
        raise FileException(f"Questions are not valid JSON: {error}", path) from error
    if not isinstance(records, list):
        raise ValidationException("question file must hold a JSON array", path)

    return [Question.from_dict(record).validate(test) for record in records]


def save_questions(questions: Sequence[Question], path):
    Path(path).write_text(json.dumps([q.to_dict() for q in questions]), encoding="utf-8")


def image_feature(nets: Sequence[Network], image: np.ndarray, target_boxes: Sequence[Roi],
                  kind: str = "ClsScore") -> np.ndarray:
    """
    Per network: each target person's class scores (pre-sigmoid) or hidden activation, max-pooled over people.
    The per-network vectors are concatenated in the order of :param nets:.
    """
    if not nets:
        raise ConfigurationException("image_feature needs at least one network", nets)
    if kind not in FEATURE_KINDS:
        raise ConfigurationException(f"Unknown feature kind {kind}, expected one of {FEATURE_KINDS}", kind)

    parts = []
    for net in nets:
        tape = net.run(image, target_boxes)
        per_person = tape.logits if kind == "ClsScore" else tape.hidden
        parts.append(per_person.max(axis=0))

    return np.concatenate(parts)


@dataclass
class QaConfig:
    kind: str = "ClsScore"
    reg_grid: List[float] = field(default_factory=lambda: list(DEFAULT_REG_GRID))
    d_emb: int = DEFAULT_DIM
    power: float = DEFAULT_POWER
    val_fraction: float = 0.1
    skip_oov: bool = False
    workers: int = 1
    seed: int = 0

    def validate(self) -> "QaConfig":
        if self.kind not in FEATURE_KINDS:
            raise ConfigurationException(f"Unknown feature kind {self.kind}", self.kind)
        if not self.reg_grid or any(reg < 0 for reg in self.reg_grid):
            raise ConfigurationException(f"Invalid regularization grid {self.reg_grid}", self.reg_grid)
        if self.d_emb < 1 or not 0.0 <= self.val_fraction < 1.0 or self.workers < 1:
            raise ConfigurationException("Invalid d_emb, val_fraction or workers",
                                         (self.d_emb, self.val_fraction, self.workers))

        return self

    def to_dict(self) -> dict:
        return asdict(self)


def fit_joint_space(x: np.ndarray, y: np.ndarray, reg: float, d_emb: int = DEFAULT_DIM,
                    power: float = DEFAULT_POWER) -> CcaModel:
    """
    fit_cca with d_emb lowered to what the data supports
    """
    limit = min(x.shape[1], y.shape[1], x.shape[0])
    if d_emb > limit:
        logger.warning("Embedding size %d exceeds min(d_x, d_y, n) = %d, using %d", d_emb, limit, limit)
        d_emb = limit

    return fit_cca(x, y, reg, d_emb, power)


@dataclass
class ValItem:
    feature: np.ndarray
    choices: np.ndarray
    correct: int


def validation_accuracy(model: CcaModel, items: Sequence[ValItem]) -> float:
    answers = [(rank_embedded(project(model, item.feature, "image"), project(model, item.choices, "text")),
                item.correct) for item in items]

    return choice_accuracy(answers)


def select_regularization(x: np.ndarray, y: np.ndarray, val_items: Sequence[ValItem], reg_grid: Sequence[float],
                          d_emb: int = DEFAULT_DIM, power: float = DEFAULT_POWER) -> Tuple[float, Dict[float, float]]:
    """
    Fit once per grid value and keep the one with the best validation accuracy (the first, on ties)

    :return: (best regularization, accuracy per grid value)
    """
    scores = {}
    for reg in reg_grid:
        scores[reg] = validation_accuracy(fit_joint_space(x, y, reg, d_emb, power), val_items)
        logger.info("reg %g: validation accuracy %.2f", reg, scores[reg])

    best = max(reg_grid, key=lambda reg: (scores[reg], -list(reg_grid).index(reg)))

    return best, scores


def easy_distractors(answer: str, pool: Sequence[str], rng: np.random.Generator, count: int = TEST_CHOICES - 1):
    """
    Distractors drawn at random from other answers, as Easy questions do
    """
    candidates = sorted(set(pool) - {answer})
    if len(candidates) < count:
        raise ValidationException(f"Need {count} distinct distractors, only {len(candidates)} available", answer)

    return [candidates[i] for i in rng.choice(len(candidates), size=count, replace=False)]


def split_validation(questions: Sequence[Question], fraction: float, rng: np.random.Generator):
    """
    Hold out the questions of a random :param fraction: of the training images

    :return: (training questions, held-out questions)
    """
    image_ids = sorted({q.image_id for q in questions})
    held = max(1, int(round(fraction * len(image_ids)))) if fraction > 0 else 0
    held_ids = set(image_ids[i] for i in rng.choice(len(image_ids), size=held, replace=False)) if held else set()

    return [q for q in questions if q.image_id not in held_ids], [q for q in questions if q.image_id in held_ids]


@dataclass
class QaTrainResult:
    model: CcaModel
    reg: float
    val_accuracy: Optional[float] = None
    grid: Dict[float, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"reg": self.reg, "val_accuracy": self.val_accuracy, "d_emb": self.model.dim,
                "grid": {str(k): v for k, v in self.grid.items()},
                "correlations": [float(c) for c in self.model.correlations]}


def _sample_for(question: Question, images: Dict[str, Sample]) -> Sample:
    if question.image_id not in images:
        raise ValidationException(f"Unknown image id {question.image_id}", question.id)
    return images[question.image_id]


def question_features(nets, questions: Sequence[Question], corpus: Corpus, kind: str) -> np.ndarray:
    images = corpus.by_id()
    return np.stack([image_feature(nets, _sample_for(q, images).image, q.target_person_boxes, kind)
                     for q in questions])


def train_qa(nets: Sequence[Network], questions: Sequence[Question], corpus: Corpus, table: WordVecTable,
             cfg: QaConfig = None) -> QaTrainResult:
    """
    Fit the joint space on (image feature, correct answer embedding) pairs.

    With more than one regularization value in the grid, the questions of `val_fraction` of the training images are
    held out as Easy validation questions, the grid value with the best validation accuracy is kept and the final
    model is refit on all pairs.
    """
    cfg = (cfg or QaConfig()).validate()
    questions = list(questions)
    if len(questions) < 2:
        raise ValidationException(f"Need at least 2 training pairs, got {len(questions)}", len(questions))

    features = question_features(nets, questions, corpus, cfg.kind)
    answers = np.stack([embed_choice(q.answer, table, cfg.skip_oov) for q in questions])

    if len(cfg.reg_grid) == 1:
        reg, grid, val_accuracy = cfg.reg_grid[0], {}, None
    else:
        rng = np.random.default_rng(cfg.seed)
        fit_questions, held_out = split_validation(questions, cfg.val_fraction, rng)
        fit_ids = {id(q) for q in fit_questions}
        fit_mask = np.array([id(q) in fit_ids for q in questions])

        pool = sorted({q.answer for q in questions})
        val_items = []
        for index in np.flatnonzero(~fit_mask):
            question = questions[index]
            choices = [question.answer] + easy_distractors(question.answer, pool, rng)
            order = rng.permutation(len(choices))
            val_items.append(ValItem(features[index],
                                     np.stack([embed_choice(choices[i], table, cfg.skip_oov) for i in order]),
                                     int(np.flatnonzero(order == 0)[0])))

        reg, grid = select_regularization(features[fit_mask], answers[fit_mask], val_items, cfg.reg_grid,
                                          cfg.d_emb, cfg.power)
        val_accuracy = grid[reg]

    model = fit_joint_space(features, answers, reg, cfg.d_emb, cfg.power)
    logger.info("QA model: reg %g, %d dims", reg, model.dim)

    return QaTrainResult(model, reg, val_accuracy, grid)


def answer(model: CcaModel, nets: Sequence[Network], question: Question, image: np.ndarray, table: WordVecTable,
           kind: str = "ClsScore", skip_oov: bool = False) -> int:
    """
    Index of the choice closest to the image in the joint space. The object box of relationship questions is not
    used.
    """
    feature = image_feature(nets, image, question.target_person_boxes, kind)

    return rank_choices(model, feature, [embed_choice(choice, table, skip_oov) for choice in question.choices])


@dataclass
class AnswerRecord:
    question_id: str
    predicted: int
    correct: int
    difficulty: str
    qtype: str


def answer_all(model: CcaModel, nets: Sequence[Network], questions: Sequence[Question], corpus: Corpus,
               table: WordVecTable, cfg: QaConfig = None) -> List[AnswerRecord]:
    """
    Answer every question, in order, optionally on several threads
    """
    cfg = (cfg or QaConfig()).validate()
    images = corpus.by_id()

    def run(question: Question) -> AnswerRecord:
        predicted = answer(model, nets, question, _sample_for(question, images).image, table, cfg.kind,
                           cfg.skip_oov)
        return AnswerRecord(question.id, predicted, question.correct, question.difficulty, question.qtype)

    if cfg.workers == 1:
        return [run(question) for question in questions]

    with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
        return list(executor.map(run, questions))


def accuracy_report(records: Sequence[AnswerRecord]) -> dict:
    """
    Overall accuracy plus per-difficulty and per-type breakdowns. Hard includes FilteredHard questions.
    """
    report = {"overall": choice_accuracy([(r.predicted, r.correct) for r in records]), "count": len(records)}

    groups = {"Easy": ("Easy",), "Hard": ("Hard", "FilteredHard"), "FilteredHard": ("FilteredHard",)}
    for name, members in groups.items():
        subset = [(r.predicted, r.correct) for r in records if r.difficulty in members]
        if subset:
            report[name] = choice_accuracy(subset)
    for qtype in QUESTION_TYPES:
        subset = [(r.predicted, r.correct) for r in records if r.qtype == qtype]
        if subset:
            report[qtype] = choice_accuracy(subset)

    return report


def write_answers(records: Sequence[AnswerRecord], path):
    with open(path, "w", newline="", encoding="utf-8") as file:
        writer = csv.writer(file)
        writer.writerow(["question_id", "predicted", "correct"])
        for record in records:
            writer.writerow([record.question_id, record.predicted, record.correct])


def hard_distractors(answer_text: str, rng: np.random.Generator, count: int = TEST_CHOICES - 1) -> List[str]:
    """
    Phrases sharing the verb or the object with the answer
    """
    verb, obj = split_phrase(answer_text)
    candidates = sorted({f"{verb} {other}" for other in OBJECTS if other != obj} |
                        {f"{other} {obj}" for other in VERBS if other != verb})

    return [candidates[i] for i in rng.choice(len(candidates), size=count, replace=False)]


def synth_questions(corpus: Corpus, difficulty: Optional[str] = "Easy", seed: int = 0,
                    filtered_fraction: float = 0.5) -> List[Question]:
    """
    One question per acting person of each scene, answered by the phrase of that person's action
    (the corpus class names).

    :param difficulty: None for training pairs (the correct answer only), "Easy" for distractors taken from actions
    absent from the scene, "Hard" for distractors sharing a word with the answer; a `filtered_fraction` of the Hard
    questions is marked FilteredHard
    """
    if difficulty not in (None, "Easy", "Hard"):
        raise ConfigurationException(f"Unknown difficulty {difficulty}", difficulty)

    rng = np.random.default_rng(seed)
    questions = []
    for sample in corpus.samples:
        if sample.per_box_labels is None:
            raise ValidationException("Synthetic questions need per-box labels", sample.id)

        present = {corpus.class_names[c] for c in np.flatnonzero(sample.image_labels)}
        for person, labels in enumerate(sample.per_box_labels):
            actions = np.flatnonzero(labels)
            if actions.size == 0:
                continue

            answer_text = corpus.class_names[actions[0]]
            qtype = QUESTION_TYPES[len(questions) % 2]
            question_id = f"{sample.id}-q{person}"
            boxes = [sample.boxes[person]]

            if difficulty is None:
                questions.append(Question(question_id, sample.id, qtype, boxes, [answer_text]))
                continue

            if difficulty == "Easy":
                distractors = easy_distractors(answer_text, set(corpus.class_names) - present, rng)
                level = "Easy"
            else:
                distractors = hard_distractors(answer_text, rng)
                level = "FilteredHard" if rng.random() < filtered_fraction else "Hard"

            choices = [answer_text] + distractors
            order = rng.permutation(TEST_CHOICES)
            questions.append(Question(question_id, sample.id, qtype, boxes, [choices[i] for i in order],
                                      int(np.flatnonzero(order == 0)[0]), level).validate())

    return questions


def vocabulary(corpus: Corpus) -> List[str]:
    """
    Every token the synthetic questions of :param corpus: can use
    """
    tokens = set(VERBS) | set(OBJECTS)
    for name in corpus.class_names:
        tokens.update(tokenize(name))

    return sorted(tokens)
