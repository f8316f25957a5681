import io
import json

import numpy as np
import pytest

from noisy_ner import cli, noise, synthetic, trainer
from noisy_ner.corpus import format_conll, read_conll


def run(argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.main(argv, stdout=out, stderr=err)
    lines = [json.loads(l) for l in out.getvalue().splitlines()]
    return code, lines, err.getvalue()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "clean.conll").write_text(format_conll(synthetic.generate(80, seed=1)))
    (root / "dev.conll").write_text(format_conll(synthetic.generate(40, seed=2)))
    code, lines, err = run(["perturb", "--seed", "0", "--corpus", str(root / "clean.conll"), "--out", str(root / "noisy")])
    assert code == 0, err
    return root


def test_config_echo_comes_first(workspace):
    code, lines, _ = run(["perturb", "--seed", "0", "--corpus", str(workspace / "clean.conll"), "--out", str(workspace / "p")])
    assert code == 0
    assert lines[0]["event"] == "config" and lines[0]["command"] == "perturb"
    echoed = lines[0]["config"]
    assert set(echoed) == set(cli.DEFAULTS)
    assert echoed["perturb.target_recall"] == 0.5 and echoed["perturb.target_precision"] == 0.9
    assert lines[-1]["event"] == "result"
    assert lines[-1]["recall"] <= 0.5 and lines[-1]["precision"] <= 0.9


def test_precedence(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"train.epochs": 3, "train.learning_rate": 0.2, "seed": 4}))
    args = cli.build_parser().parse_args(
        ["train", "--config", str(cfg_file), "--set", "train.learning_rate=0.3", "--set", "train.batch_size=2", "--lr", "0.4"]
    )
    cfg = cli.config_from_args(args, env={})
    assert cfg["train.epochs"] == 3 and cfg["seed"] == 4
    assert cfg["train.batch_size"] == 2
    assert cfg["train.learning_rate"] == 0.4
    env_cfg = cli.config_from_args(cli.build_parser().parse_args(["train"]), env={cli.CONFIG_ENV: str(cfg_file)})
    assert env_cfg["train.epochs"] == 3


def test_usage_errors_exit_1(tmp_path):
    assert run(["nope"])[0] == 1
    assert run(["train", "--train", str(tmp_path / "missing.conll"), "--seed", "0"])[0] == 1
    assert run(["train", "--set", "no.such.key=1"])[0] == 1
    assert run(["train", "--set", "train.epochs=many"])[0] == 1
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text("{not json")
    assert run(["train", "--config", str(bad_cfg)])[0] == 1


def test_seed_is_mandatory(workspace):
    code, _, err = run(["perturb", "--corpus", str(workspace / "clean.conll"), "--out", str(workspace / "x")])
    assert code == 1 and "seed" in err


def test_data_errors_exit_2(workspace, tmp_path):
    bad = tmp_path / "bad.conll"
    bad.write_text("a O\nb\n")
    code, _, err = run(["perturb", "--seed", "0", "--corpus", str(bad), "--out", str(tmp_path)])
    assert code == 2 and "line 2" in err
    empty = tmp_path / "empty.conll"
    empty.write_text("\n")
    assert run(["perturb", "--seed", "0", "--corpus", str(empty), "--out", str(tmp_path)])[0] == 2


def test_numerical_failure_exit_3(workspace, tmp_path):
    with np.errstate(all="ignore"):
        code, _, err = run(
            ["train", "--seed", "0", "--train", str(workspace / "noisy" / "perturbed.conll"),
             "--tau", "0,0", "--lr", "1e300", "--epochs", "1", "--out", str(tmp_path)]
        )
    assert code == 3, err


def test_identity_perturbation_copies_tags(workspace, tmp_path):
    code, lines, _ = run(
        ["perturb", "--seed", "0", "--corpus", str(workspace / "clean.conll"), "--out", str(tmp_path),
         "--target-recall", "1.0", "--target-precision", "1.0"]
    )
    assert code == 0
    original = read_conll(workspace / "clean.conll")
    copied = read_conll(tmp_path / "perturbed.conll", tag_column=1)
    assert copied.observed_tags() == original.observed_tags()
    assert format_conll(copied) == (workspace / "clean.conll").read_text()


def test_sweep_writes_one_corpus_per_level(workspace, tmp_path):
    code, lines, _ = run(["perturb", "--seed", "0", "--corpus", str(workspace / "clean.conll"), "--out", str(tmp_path), "--sweep"])
    assert code == 0
    levels = [l for l in lines if l["event"] == "level"]
    assert [l["target_recall"] for l in levels] == list(cli.SWEEP_RECALLS)
    for level in levels:
        assert level["recall"] <= level["target_recall"]
        noisy = read_conll(level["corpus"], tag_column=1, gold_column=2)
        ledger = noise.NoiseLedger.load(level["ledger"])
        assert noise.token_flags(noisy) == (ledger.noisy_positive, ledger.noisy_negative)


def _train(workspace, out, *extra):
    return run(
        ["train", "--seed", "0", "--train", str(workspace / "noisy" / "perturbed.conll"),
         "--dev", str(workspace / "dev.conll"), "--epochs", "3", "--out", str(out), *extra]
    )


def test_train_eval_predict_detect(workspace, tmp_path):
    ledger = str(workspace / "noisy" / "perturbed.ledger.json")
    code, lines, err = _train(workspace, tmp_path, "--tau", "oracle", "--ledger", ledger)
    assert code == 0, err
    epochs = [l for l in lines if l["event"] == "epoch"]
    assert len(epochs) == 3 and "noise_detection_f1" in epochs[-1]
    mirrored = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert mirrored == epochs
    model = str(tmp_path / "model.json")

    code, lines, _ = run(["eval", "--model", model, "--corpus", str(workspace / "dev.conll")])
    assert code == 0
    report = lines[-1]
    assert 0 <= report["f1"] <= 1 and set(report["per_type"]) == set(synthetic.TYPES)

    code, lines, _ = run(["predict", "--model", model, "--corpus", str(workspace / "dev.conll"), "--out", str(tmp_path / "pred")])
    assert code == 0
    pred = read_conll(tmp_path / "pred" / "predictions.conll")
    dev = read_conll(workspace / "dev.conll")
    assert [s.words for s in pred] == [s.words for s in dev]

    code, lines, _ = run(
        ["detect-noise", "--model", model, "--corpus", str(workspace / "noisy" / "perturbed.conll"),
         "--ledger", ledger, "--out", str(tmp_path / "dn")]
    )
    assert code == 0
    res = lines[-1]
    records = [json.loads(l) for l in (tmp_path / "dn" / "records.jsonl").read_text().splitlines()]
    assert len(records) == read_conll(workspace / "noisy" / "perturbed.conll").num_tokens
    assert sum(r["verdict"] == "untrusted" for r in records) == res["flagged"]
    assert 0 <= res["f1"] <= 1


def test_zero_tau_is_plain_training(workspace, tmp_path):
    code, _, err = _train(workspace, tmp_path, "--tau", "0,0")
    assert code == 0, err
    ckpt = trainer.Checkpoint.load(tmp_path / "model.json")
    corpus = read_conll(workspace / "noisy" / "perturbed.conll", tag_column=1)
    plain = trainer.fit_supervised(corpus, trainer.TrainConfig.from_json(ckpt.config))
    np.testing.assert_array_equal(ckpt.model.emission.weights, plain.model.emission.weights)


def test_calibration_and_strategy_flags(workspace, tmp_path):
    code, lines, _ = _train(workspace, tmp_path, "--tau", "0.01,0.1", "--calibration", "off", "--strategy", "local")
    assert code == 0
    assert lines[0]["config"]["train.calibration"] is False
    ckpt = trainer.Checkpoint.load(tmp_path / "model.json")
    assert ckpt.config["calibration_enabled"] is False and ckpt.config["strategy"] == "local"


def test_identical_echo_identical_artifacts(workspace, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    _, la, _ = _train(workspace, a, "--tau", "0.02,0.1")
    _, lb, _ = _train(workspace, b, "--tau", "0.02,0.1")
    ca, cb = dict(la[0]["config"]), dict(lb[0]["config"])
    ca.pop("output.dir"), cb.pop("output.dir")
    assert ca == cb
    assert (a / "model.json").read_bytes() == (b / "model.json").read_bytes()
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()


def test_search_tau_and_selftrain(workspace, tmp_path):
    grid = "search.grid=[0.0, 0.1]"
    code, lines, err = run(
        ["search-tau", "--seed", "0", "--train", str(workspace / "noisy" / "perturbed.conll"),
         "--dev", str(workspace / "dev.conll"), "--epochs", "2", "--set", grid]
    )
    assert code == 0, err
    assert lines[-1]["fits"] == 4 and len([l for l in lines if l["event"] == "search"]) == 4

    code, lines, err = run(
        ["selftrain", "--seed", "0", "--train", str(workspace / "noisy" / "perturbed.conll"),
         "--dev", str(workspace / "dev.conll"), "--test", str(workspace / "dev.conll"),
         "--epochs", "2", "--rounds", "2", "--tau", "searched", "--set", grid, "--out", str(tmp_path)]
    )
    assert code == 0, err
    rounds = [l for l in lines if l["event"] == "round"]
    assert [r["round"] for r in rounds] == [1, 2]
    assert (rounds[1]["tau_p"], rounds[1]["tau_n"]) == (0.005, 0.15)
    assert "test_f1" in rounds[0]
    assert (tmp_path / "relabeled.conll").exists()


def test_searched_tau_needs_dev(workspace, tmp_path):
    code, _, err = run(["train", "--seed", "0", "--train", str(workspace / "noisy" / "perturbed.conll"), "--out", str(tmp_path)])
    assert code == 1 and "dev" in err


def test_model_rejects_unknown_types(workspace, tmp_path):
    _train(workspace, tmp_path, "--tau", "0,0")
    other = tmp_path / "other.conll"
    other.write_text("Zed B-MISC\n")
    code, _, err = run(["eval", "--model", str(tmp_path / "model.json"), "--corpus", str(other)])
    assert code == 2 and "MISC" in err
