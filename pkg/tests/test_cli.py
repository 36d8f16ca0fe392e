import csv
import json
from unittest import mock

import pytest

from pyactqa.cli import main
from pyactqa.gradcheck import CheckResult

CONFIG = {
    "model": {"variant": "Fusion2", "backbone_widths": [4, 6], "head_widths": [16]},
    "train": {"lr": 0.01, "total_iters": 4, "batch_images": 2, "max_boxes_per_image": 2, "log_every": 0,
              "checkpoint_every": 2},
    "synth": {"n_images": 12, "n_test": 4, "num_classes": 6, "max_people": 2, "image_size": 24, "seed": 3},
    "qa": {"reg_grid": [0.1, 0.01], "d_emb": 8},
}


def read_json(path):
    return json.loads(path.read_text(encoding="utf-8"))


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.json").write_text(json.dumps(CONFIG), encoding="utf-8")
    data, model, qa = root / "data", root / "model", root / "qa"
    config = ["--config", str(root / "run.json")]

    codes = {
        "synth": main(["synth", *config, "--out", str(data)]),
        "train": main(["train", *config, "--corpus", str(data / "train.json"), "--out", str(model)]),
        "eval": main(["eval", *config, "--corpus", str(data / "test.json"), "--checkpoint",
                      str(model / "model.ckpt"), "--out", str(model)]),
        "qa-train": main(["qa-train", *config, "--corpus", str(data / "train.json"), "--questions",
                          str(data / "qa_train.json"), "--wordvecs", str(data / "wordvecs.txt"), "--checkpoint",
                          str(model / "model.ckpt"), "--out", str(qa)]),
        "qa-answer": main(["qa-answer", *config, "--corpus", str(data / "test.json"), "--questions",
                           str(data / "qa_easy.json"), "--wordvecs", str(data / "wordvecs.txt"), "--checkpoint",
                           str(model / "model.ckpt"), "--qa-model", str(qa / "qa.ckpt"), "--out", str(qa)]),
    }

    return root, codes


class TestPipeline:
    def test_every_step_succeeds(self, run):
        _, codes = run

        assert codes == {"synth": 0, "train": 0, "eval": 0, "qa-train": 0, "qa-answer": 0}

    def test_synth_artifacts(self, run):
        root, _ = run

        for name in ("train.json", "test.json", "qa_train.json", "qa_easy.json", "qa_hard.json", "wordvecs.txt"):
            assert (root / "data" / name).is_file(), name
        assert len(read_json(root / "data" / "train.json")["samples"]) == 12

    def test_train_artifacts(self, run):
        root, _ = run

        with open(root / "model" / "loss.csv", encoding="utf-8") as file:
            rows = list(csv.reader(file))

        assert len(rows) == 5
        assert (root / "model" / "model-000002.ckpt").is_file()
        assert (root / "model" / "model-000004.ckpt").is_file()

    def test_eval_report(self, run):
        root, _ = run
        report = read_json(root / "model" / "eval.json")

        assert 0.0 <= report["mean_ap"] <= 100.0
        assert report["num_images"] == 4
        assert report["extra"]["variant"] == "Fusion2"

    def test_qa_artifacts(self, run):
        root, _ = run
        accuracy = read_json(root / "qa" / "accuracy.json")

        assert (root / "qa" / "qa.ckpt").is_file()
        assert read_json(root / "qa" / "qa_train.json")["reg"] in (0.1, 0.01)
        assert accuracy["count"] == len(read_json(root / "data" / "qa_easy.json"))
        assert 0.0 <= accuracy["overall"] <= 100.0

    def test_manifest(self, run):
        root, _ = run
        manifest = read_json(root / "qa" / "manifest.json")

        assert manifest["command"] == "qa-answer"
        assert manifest["artifacts"] == ["answers.csv", "accuracy.json"]
        assert manifest["config"]["qa"]["reg_grid"] == [0.1, 0.01]
        assert manifest["inputs"]["checkpoint"] == [str(root / "model" / "model.ckpt")]
        assert set(manifest["versions"]) == {"pyactqa", "python", "numpy"}

    def test_synth_is_deterministic(self, run, tmp_path):
        root, _ = run

        assert main(["synth", "--config", str(root / "run.json"), "--out", str(tmp_path)]) == 0
        for name in ("train.json", "qa_hard.json", "wordvecs.txt"):
            assert (tmp_path / name).read_bytes() == (root / "data" / name).read_bytes(), name

    def test_train_is_deterministic(self, run, tmp_path):
        root, _ = run
        args = ["train", "--config", str(root / "run.json"), "--corpus", str(root / "data" / "train.json"),
                "--seed", "7"]

        assert main([*args, "--out", str(tmp_path / "a")]) == 0
        assert main([*args, "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()

    def test_stats(self, run, tmp_path, capsys):
        root, _ = run

        assert main(["stats", "--corpus", str(root / "data" / "train.json"), "--out", str(tmp_path)]) == 0
        assert len(read_json(tmp_path / "stats.json")["positives"]) == 6
        assert "max negative:positive ratio" in capsys.readouterr().out

    def test_class_count_mismatch(self, run, tmp_path, capsys):
        root, _ = run
        (tmp_path / "run.json").write_text(json.dumps({"model": {"num_classes": 3}}), encoding="utf-8")

        code = main(["train", "--config", str(tmp_path / "run.json"), "--corpus", str(root / "data" / "train.json"),
                     "--out", str(tmp_path)])

        assert code == 2
        assert "type=ValidationException" in capsys.readouterr().err


class TestErrors:
    def test_unknown_command(self, capsys):
        assert main(["fly"]) == 1
        assert capsys.readouterr().err.startswith("error code=1 type=UsageError message=")

    def test_missing_argument(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path)]) == 1
        assert "--corpus" in capsys.readouterr().err

    def test_two_checkpoints_for_eval(self, tmp_path):
        assert main(["eval", "--corpus", "c.json", "--checkpoint", "a", "--checkpoint", "b",
                     "--out", str(tmp_path)]) == 1

    def test_invalid_corpus(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text(json.dumps({"classes": ["a b"], "samples": [{"id": "s0"}]}),
                                           encoding="utf-8")

        assert main(["stats", "--corpus", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 2

        err = [line for line in capsys.readouterr().err.splitlines() if line.startswith("error code=")][-1]
        assert err.startswith("error code=2 type=ValidationException message=")
        assert isinstance(json.loads(err.split("message=", 1)[1]), str)

    def test_missing_config(self, tmp_path, capsys):
        assert main(["stats", "--config", str(tmp_path / "absent.toml")]) == 2
        assert "type=FileException" in capsys.readouterr().err

    def test_gradcheck(self, tmp_path, capsys):
        assert main(["gradcheck", "--out", str(tmp_path)]) == 0

        assert all(check["passed"] for check in read_json(tmp_path / "gradcheck.json"))
        assert "model[Fusion2]" in capsys.readouterr().out

    def test_gradcheck_failure(self, tmp_path, capsys):
        with mock.patch("pyactqa.cli.run_suite", return_value=[CheckResult("conv2d", [0.5])]):
            assert main(["gradcheck", "--out", str(tmp_path)]) == 3

        assert "type=NumericalException" in capsys.readouterr().err
