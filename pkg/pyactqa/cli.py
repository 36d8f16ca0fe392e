"""
Module for the pyactqa command line.

Every subcommand writes its artifacts and a manifest.json (resolved config, seed, versions) into --out. Failures end
with a single line on stderr: `error code=<n> type=<Name> message=<json string>`. Exit codes: 0 ok, 1 usage,
2 validation, 3 numerical failure.
"""
import argparse
import json
import logging
import platform
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from pyactqa import __version__
from pyactqa.cca import load_cca, save_cca
from pyactqa.config import RunConfig, load_config
from pyactqa.dataset import class_stats, load_corpus, save_corpus, synth_generate
from pyactqa.exceptions import ActQAException, ConfigurationException, NumericalException, ValidationException
from pyactqa.gradcheck import format_table, run_suite
from pyactqa.loaders import load_network, save_network
from pyactqa.model import build
from pyactqa.qa import WordVecTable, accuracy_report, answer_all, load_questions, save_questions, \
    synth_questions, train_qa, vocabulary, write_answers
from pyactqa.trainer import evaluate, freeze_below, train

logger = logging.getLogger("cli")

USAGE_EXIT = 1


class UsageError(Exception):
    __name__ = "UsageError"


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def write_manifest(out: Path, command: str, config: RunConfig, args: argparse.Namespace, artifacts: List[str]):
    manifest = {
        "command": command,
        "config": config.to_dict(),
        "seed": args.seed,
        "inputs": {key: value for key, value in vars(args).items()
                   if key in ("config", "corpus", "questions", "wordvecs", "checkpoint", "qa_model")},
        "artifacts": artifacts,
        "versions": {"pyactqa": __version__, "python": platform.python_version(), "numpy": np.__version__},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str), encoding="utf-8")


def _one_checkpoint(args) -> str:
    if not args.checkpoint or len(args.checkpoint) != 1:
        raise UsageError(f"{args.command} needs exactly one --checkpoint")
    return args.checkpoint[0]


def _require(args, *names):
    missing = [name for name in names if getattr(args, name) is None]
    if missing:
        raise UsageError(f"{args.command} needs " + ", ".join("--" + name.replace("_", "-") for name in missing))


def cmd_synth(args, config: RunConfig, out: Path) -> List[str]:
    train_corpus, test_corpus = synth_generate(config.synth)
    save_corpus(train_corpus, out / "train.json")
    save_corpus(test_corpus, out / "test.json")

    save_questions(synth_questions(train_corpus, None, config.synth.seed), out / "qa_train.json")
    save_questions(synth_questions(test_corpus, "Easy", config.synth.seed), out / "qa_easy.json")
    save_questions(synth_questions(test_corpus, "Hard", config.synth.seed), out / "qa_hard.json")
    WordVecTable.synthetic(vocabulary(train_corpus), config.synth.seed).save(out / "wordvecs.txt")

    return ["train.json", "test.json", "qa_train.json", "qa_easy.json", "qa_hard.json", "wordvecs.txt"]


def cmd_train(args, config: RunConfig, out: Path) -> List[str]:
    _require(args, "corpus")
    corpus = load_corpus(args.corpus)

    if args.checkpoint:
        net = load_network(_one_checkpoint(args))
    else:
        net = build(config.model)
    if net.config.num_classes != corpus.num_classes:
        raise ValidationException(f"Network predicts {net.config.num_classes} classes, corpus has "
                                  f"{corpus.num_classes}", args.corpus)
    if config.freeze_below:
        freeze_below(net, config.freeze_below)

    artifacts = []

    def on_checkpoint(network, iteration):
        name = f"model-{iteration:06d}.ckpt"
        save_network(network, out / name)
        artifacts.append(name)

    result = train(net, corpus, config.train, on_checkpoint=on_checkpoint)
    save_network(result.net, out / "model.ckpt")
    result.write_trace(out / "loss.csv")

    return artifacts + ["model.ckpt", "loss.csv"]


def cmd_eval(args, config: RunConfig, out: Path) -> List[str]:
    _require(args, "corpus")
    report = evaluate(load_network(_one_checkpoint(args)), load_corpus(args.corpus))
    report.write(out / "eval.json")
    print(f"mAP {report.mean_ap:.2f} over {report.num_images} images")

    return ["eval.json"]


def cmd_gradcheck(args, config: RunConfig, out: Path) -> List[str]:
    results = run_suite(seed=args.seed or 0)
    (out / "gradcheck.json").write_text(json.dumps([r.to_dict() for r in results], indent=2), encoding="utf-8")
    print(format_table(results))

    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericalException(f"Gradient check failed for {', '.join(failed)}", failed)

    return ["gradcheck.json"]


def _word_vectors(args, config: RunConfig, corpus) -> WordVecTable:
    if args.wordvecs is not None:
        return WordVecTable.load(args.wordvecs)

    logger.warning("No --wordvecs given, using synthetic word vectors")
    return WordVecTable.synthetic(vocabulary(corpus), config.synth.seed)


def cmd_qa_train(args, config: RunConfig, out: Path) -> List[str]:
    _require(args, "corpus", "questions", "checkpoint")
    nets = [load_network(path) for path in args.checkpoint]
    corpus = load_corpus(args.corpus)
    questions = load_questions(args.questions, test=False)

    result = train_qa(nets, questions, corpus, _word_vectors(args, config, corpus), config.qa)
    save_cca(result.model, out / "qa.ckpt")
    (out / "qa_train.json").write_text(json.dumps(result.to_dict(), indent=2), encoding="utf-8")
    if result.val_accuracy is not None:
        print(f"validation accuracy {result.val_accuracy:.2f} at reg {result.reg:g}")

    return ["qa.ckpt", "qa_train.json"]


def cmd_qa_answer(args, config: RunConfig, out: Path) -> List[str]:
    _require(args, "corpus", "questions", "checkpoint", "qa_model")
    nets = [load_network(path) for path in args.checkpoint]
    corpus = load_corpus(args.corpus)
    questions = load_questions(args.questions)

    records = answer_all(load_cca(args.qa_model), nets, questions, corpus, _word_vectors(args, config, corpus),
                         config.qa)
    write_answers(records, out / "answers.csv")
    report = accuracy_report(records)
    (out / "accuracy.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    print(f"accuracy {report['overall']:.2f} on {report['count']} questions")

    return ["answers.csv", "accuracy.json"]


def cmd_stats(args, config: RunConfig, out: Path) -> List[str]:
    _require(args, "corpus")
    stats = class_stats(load_corpus(args.corpus))
    (out / "stats.json").write_text(json.dumps(stats.to_dict(), indent=2), encoding="utf-8")
    print(f"max negative:positive ratio {stats.max_ratio}, {len(stats.empty_classes)} empty class(es)")

    return ["stats.json"]


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "qa-train": cmd_qa_train,
    "qa-answer": cmd_qa_answer,
    "stats": cmd_stats,
}


def build_parser() -> Parser:
    parser = Parser(prog="pyactqa", description="Weakly supervised activity recognition and activity QA")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="TOML or JSON run configuration")
    parser.add_argument("--out", default=".", help="Output directory (created if missing)")
    parser.add_argument("--seed", type=int, help="Overrides every seed in the configuration")
    parser.add_argument("--checkpoint", action="append", help="Network checkpoint; repeat to combine networks")
    parser.add_argument("--qa-model", dest="qa_model", help="Fitted QA model")
    parser.add_argument("--corpus", help="Corpus JSON")
    parser.add_argument("--questions", help="Question JSON")
    parser.add_argument("--wordvecs", help="Word vector table")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    return parser


def report_error(code: int, name: str, message: str):
    print(f"error code={code} type={name} message={json.dumps(message)}", file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as error:
        report_error(USAGE_EXIT, UsageError.__name__, str(error))
        return USAGE_EXIT

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)

    try:
        config = load_config(args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        artifacts = COMMANDS[args.command](args, config, out)
        write_manifest(out, args.command, config, args, artifacts)
    except UsageError as error:
        report_error(USAGE_EXIT, UsageError.__name__, str(error))
        return USAGE_EXIT
    except ActQAException as error:
        report_error(error.exit_code, error.__name__, error.message)
        return error.exit_code
    except OSError as error:
        report_error(ConfigurationException.exit_code, type(error).__name__, str(error))
        return ConfigurationException.exit_code

    return 0
