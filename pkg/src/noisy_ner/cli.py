"""Command-line entry point: ``noisy-ner <command> [flags]``.

Configuration is a flat JSON object with dotted keys (``train.epochs``,
``perturb.target_recall``...).  Values come from, in increasing priority:
built-in defaults, the config file (``--config`` or ``$NOISY_NER_CONFIG``),
``--set key=value`` pairs, then dedicated flags.  Every command prints its
fully resolved config as the first JSON line on stdout, followed by
JSON-lines events and a final ``result`` line.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence, TextIO


from noisy_ner import confidence as conf
from noisy_ner import noise, synthetic, trainer
from noisy_ner.corpus import ConllParseError, Corpus, entity_prf, read_conll, write_conll
from noisy_ner.seeding import substream

CONFIG_ENV = "NOISY_NER_CONFIG"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

SWEEP_RECALLS = (0.3, 0.4, 0.5, 0.6, 0.7)

DEFAULTS: dict = {
    "seed": None,
    "data.train": None,
    "data.dev": None,
    "data.test": None,
    "data.corpus": None,
    "data.ledger": None,
    "data.token_column": 0,
    "data.tag_column": 1,
    "data.gold_column": None,
    "model": None,
    "output.dir": ".",
    "perturb.target_recall": 0.5,
    "perturb.target_precision": 0.9,
    "perturb.max_spurious_span_len": 3,
    "perturb.removal_unit": "identity",
    "perturb.sweep": False,
    "perturb.sweep_recalls": list(SWEEP_RECALLS),
    "synth.sentences": 500,
    "synth.lexicon_seed": 1234,
    "train.epochs": 10,
    "train.learning_rate": 0.01,
    "train.l2_penalty": 1e-4,
    "train.batch_size": 8,
    "train.strategy": "global",
    "train.tau": "searched",
    "train.calibration": True,
    "train.shuffle": True,
    "train.pooling": "epoch",
    "train.structural_mask": False,
    "train.warmup_epochs": 5,
    "selftrain.rounds": 3,
    "selftrain.later_tau": "0.005,0.15",
    "selftrain.reset_schedule": True,
    "search.default_tau_p": 0.0,
    "search.grid": list(trainer.TAU_GRID),
}


class CliError(Exception):
    code = EXIT_USAGE


class ConfigError(CliError):
    code = EXIT_USAGE


class DataError(CliError):
    code = EXIT_DATA


# ---------------------------------------------------------------- config


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                low = value.lower()
                if low in ("1", "true", "on", "yes"):
                    return True
                if low in ("0", "false", "off", "no"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            return [float(v) for v in value]
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object with dotted keys")
    return data


def resolve_config(*layers: dict) -> dict:
    """Merge override layers onto the defaults; later layers win, ``None`` means unset."""
    out = dict(DEFAULTS)
    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            if value is not None:
                out[key] = _coerce(key, value)
    return out


def parse_tau(spec: str) -> tuple[float, float]:
    try:
        p, n = (float(x) for x in spec.split(","))
    except ValueError:
        raise ConfigError(f"tau must be 'oracle', 'searched' or 'P,N'; got {spec!r}") from None
    if not (0 <= p <= 1 and 0 <= n <= 1):
        raise ConfigError(f"tau values must lie in [0, 1]; got {spec!r}")
    return p, n


def _require(cfg: dict, *keys: str) -> None:
    for key in keys:
        value = cfg[key]
        if value is None:
            raise ConfigError(f"missing required setting {key}")
        if (key.startswith("data.") or key == "model") and not Path(value).is_file():
            raise ConfigError(f"{key}: no such file {value}")


def train_config(cfg: dict, tau: tuple[float, float] = (0.0, 0.0)) -> trainer.TrainConfig:
    try:
        return trainer.TrainConfig(
            epochs=cfg["train.epochs"],
            learning_rate=cfg["train.learning_rate"],
            l2_penalty=cfg["train.l2_penalty"],
            batch_size=cfg["train.batch_size"],
            seed=cfg["seed"],
            strategy=conf.Strategy(cfg["train.strategy"]),
            schedule=conf.ScheduleConfig(tau[0], tau[1], cfg["train.warmup_epochs"]),
            calibration_enabled=cfg["train.calibration"],
            shuffle=cfg["train.shuffle"],
            pooling=cfg["train.pooling"],
            structural_mask=cfg["train.structural_mask"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def perturbation_config(cfg: dict, target_recall: Optional[float] = None) -> noise.PerturbationConfig:
    try:
        return noise.PerturbationConfig(
            target_recall=cfg["perturb.target_recall"] if target_recall is None else target_recall,
            target_precision=cfg["perturb.target_precision"],
            seed=cfg["seed"],
            max_spurious_span_len=cfg["perturb.max_spurious_span_len"],
            removal_unit=cfg["perturb.removal_unit"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------- I/O


def _read(cfg: dict, key: str, tagset=None, gold_fallback: bool = False, strict: bool = False) -> Corpus:
    try:
        corpus = read_conll(
            cfg[key],
            token_column=cfg["data.token_column"],
            tag_column=cfg["data.tag_column"],
            gold_column=cfg["data.gold_column"],
            tagset=tagset,
        )
    except ConllParseError as exc:
        raise DataError(f"{cfg[key]}: {exc}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"{cfg[key]}: {exc}") from None
    if len(corpus) == 0:
        raise DataError(f"{cfg[key]}: no sentences")
    if strict and corpus.tagset != tagset:
        extra = corpus.tagset.types[len(tagset.types):]
        raise DataError(f"{cfg[key]}: entity types {list(extra)} unknown to the model")
    if gold_fallback and not corpus.has_gold:
        corpus = corpus.with_gold_from_observed()
    return corpus


def _read_ledger(cfg: dict) -> noise.NoiseLedger:
    try:
        return noise.NoiseLedger.load(cfg["data.ledger"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{cfg['data.ledger']}: bad ledger ({exc})") from None


def _load_model(cfg: dict) -> trainer.Checkpoint:
    try:
        return trainer.Checkpoint.load(cfg["model"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{cfg['model']}: bad checkpoint ({exc})") from None


def _outdir(cfg: dict) -> Path:
    out = Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


class Emitter:
    """Writes JSON lines to a stream and optionally mirrors them into a file."""

    def __init__(self, stream: TextIO):
        self.stream = stream
        self.mirror: Optional[TextIO] = None

    def __call__(self, event: str, **payload) -> None:
        line = json.dumps({"event": event, **payload}, sort_keys=True)
        self.stream.write(line + "\n")
        self.stream.flush()
        if self.mirror is not None:
            self.mirror.write(line + "\n")


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: dict, emit: Emitter) -> dict:
    """Write a clean synthetic corpus (handy for trying the pipeline)."""
    _require(cfg, "seed")
    corpus = synthetic.generate(cfg["synth.sentences"], seed=cfg["seed"], lexicon_seed=cfg["synth.lexicon_seed"])
    path = _outdir(cfg) / "synthetic.conll"
    write_conll(corpus, path)
    return {"corpus": str(path), "sentences": len(corpus), "tokens": corpus.num_tokens}


def _perturb_one(clean: Corpus, pcfg: noise.PerturbationConfig, rng, stem: Path) -> dict:
    try:
        noisy, ledger = noise.perturb(clean, pcfg, rng)
    except noise.PerturbationError as exc:
        raise DataError(str(exc)) from None
    conll, ledger_path = Path(f"{stem}.conll"), Path(f"{stem}.ledger.json")
    write_conll(noisy, conll, include_gold=True)
    ledger.save(ledger_path)
    tau_p, tau_n = noise.oracle_tau(noisy, ledger)
    return {
        "corpus": str(conll),
        "ledger": str(ledger_path),
        "target_recall": pcfg.target_recall,
        "target_precision": pcfg.target_precision,
        "recall": noise.entity_recall(noisy),
        "precision": noise.entity_precision(noisy),
        "removed_entities": len(ledger.removed_entities),
        "spurious_spans": len(ledger.spurious_spans),
        "oracle_tau_p": tau_p,
        "oracle_tau_n": tau_n,
    }


def cmd_perturb(cfg: dict, emit: Optional[Emitter] = None) -> dict:
    """Corrupt a clean corpus; writes ``<out>/perturbed*.conll`` plus JSON ledgers.

    The output corpus has three columns: token, noisy tag, original tag.
    """
    _require(cfg, "seed", "data.corpus")
    clean = _read(cfg, "data.corpus", gold_fallback=True)
    out = _outdir(cfg)
    if not cfg["perturb.sweep"]:
        return _perturb_one(clean, perturbation_config(cfg), substream(cfg["seed"], "perturb"), out / "perturbed")
    levels = []
    for r in cfg["perturb.sweep_recalls"]:
        pcfg = perturbation_config(cfg, target_recall=r)
        res = _perturb_one(clean, pcfg, substream(cfg["seed"], f"perturb/recall={r:g}"), out / f"perturbed.recall-{r:g}")
        if emit is not None:
            emit("level", **res)
        levels.append(res)
    return {"levels": levels}


def _resolve_tau(cfg: dict, corpus: Corpus, dev: Optional[Corpus], emit: Optional[Emitter]) -> tuple[float, float]:
    mode = cfg["train.tau"]
    if mode == "oracle":
        return noise.oracle_tau(corpus, _read_ledger(cfg))
    if mode == "searched":
        if dev is None:
            raise ConfigError("--tau searched needs data.dev")
        res = trainer.grid_search_tau(
            corpus, dev, train_config(cfg), grid=cfg["search.grid"], default_tau_p=cfg["search.default_tau_p"]
        )
        if emit is not None:
            for row in res.trace:
                emit("search", **row)
        return res.best
    return parse_tau(mode)


def _check_training_inputs(cfg: dict) -> None:
    _require(cfg, "seed", "data.train")
    for key in ("data.dev", "data.test", "data.ledger"):
        if cfg[key] is not None:
            _require(cfg, key)
    if cfg["train.tau"] == "oracle":
        _require(cfg, "data.ledger")
    elif cfg["train.tau"] != "searched":
        parse_tau(cfg["train.tau"])
    train_config(cfg)


def _load_training_data(cfg: dict):
    # each later file may only append entity types, so label ids stay comparable
    corpus = _read(cfg, "data.train")
    ts = corpus.tagset
    dev = test = None
    if cfg["data.dev"]:
        dev = _read(cfg, "data.dev", tagset=ts, gold_fallback=True)
        ts = dev.tagset
    if cfg["data.test"]:
        test = _read(cfg, "data.test", tagset=ts, gold_fallback=True)
        ts = test.tagset
    corpus = corpus.with_tagset(ts)
    dev = dev.with_tagset(ts) if dev is not None else None
    ledger = _read_ledger(cfg) if cfg["data.ledger"] else None
    return corpus, dev, test, ledger


def cmd_train(cfg: dict, emit: Emitter) -> dict:
    """Fit a confidence-aware CRF; writes ``model.json`` and ``metrics.jsonl``."""
    _check_training_inputs(cfg)
    corpus, dev, test, ledger = _load_training_data(cfg)
    tau = _resolve_tau(cfg, corpus, dev, emit)
    tcfg = train_config(cfg, tau)
    out = _outdir(cfg)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as mirror:
        emit.mirror = mirror
        try:
            res = trainer.fit(corpus.without_gold(), tcfg, dev, ledger, on_epoch=lambda row: emit("epoch", **row))
        finally:
            emit.mirror = None
    res.checkpoint.save(out / "model.json")
    result = {"model": str(out / "model.json"), "tau_p": tau[0], "tau_n": tau[1]}
    if test is not None:
        result["test"] = res.model.evaluate(test)
    return result


def cmd_selftrain(cfg: dict, emit: Emitter) -> dict:
    """Cross-validated self-training; the first round uses ``train.tau``."""
    _check_training_inputs(cfg)
    later = parse_tau(cfg["selftrain.later_tau"])
    corpus, dev, test, ledger = _load_training_data(cfg)
    mode = cfg["train.tau"]
    first = (0.0, 0.0) if mode in ("oracle", "searched") else parse_tau(mode)
    if mode == "searched" and dev is None:
        raise ConfigError("--tau searched needs data.dev")
    try:
        scfg = trainer.SelfTrainConfig(
            rounds=cfg["selftrain.rounds"],
            first_round_tau=mode if mode in ("oracle", "searched") else "explicit",
            first_tau_p=first[0],
            first_tau_n=first[1],
            later_tau_p=later[0],
            later_tau_n=later[1],
            split_seed=cfg["seed"],
            reset_schedule=cfg["selftrain.reset_schedule"],
            search_default_tau_p=cfg["search.default_tau_p"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = _outdir(cfg)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as mirror:
        emit.mirror = mirror
        try:
            res = trainer.self_train(
                corpus, scfg, train_config(cfg), dev, test, ledger, on_round=lambda row: emit("round", **row)
            )
        finally:
            emit.mirror = None
    res.checkpoint.save(out / "model.json")
    write_conll(res.corpus, out / "relabeled.conll")
    return {"model": str(out / "model.json"), "relabeled": str(out / "relabeled.conll"), "rounds": len(res.rounds)}


def cmd_search_tau(cfg: dict, emit: Emitter) -> dict:
    """Coordinate grid search over (tau_p, tau_n) by dev F1."""
    _require(cfg, "seed", "data.train", "data.dev")
    train_config(cfg)
    corpus, dev, _, _ = _load_training_data(cfg)
    res = trainer.grid_search_tau(
        corpus.without_gold(), dev, train_config(cfg), grid=cfg["search.grid"], default_tau_p=cfg["search.default_tau_p"]
    )
    for row in res.trace:
        emit("search", **row)
    return {"tau_p": res.tau_p, "tau_n": res.tau_n, "fits": res.num_fits}


def cmd_predict(cfg: dict, emit: Emitter) -> dict:
    """Viterbi-tag ``data.corpus``; writes ``predictions.conll``."""
    _require(cfg, "model", "data.corpus")
    ckpt = _load_model(cfg)
    corpus = _read(cfg, "data.corpus", tagset=ckpt.model.tagset, strict=True)
    preds = ckpt.model.predict(corpus)
    path = _outdir(cfg) / "predictions.conll"
    write_conll(corpus.without_gold().with_tags(preds), path)
    return {"predictions": str(path), "sentences": len(corpus)}


def cmd_eval(cfg: dict, emit: Emitter) -> dict:
    """Entity P/R/F1 of the model on ``data.corpus`` (gold column, else the tag column)."""
    _require(cfg, "model", "data.corpus")
    ckpt = _load_model(cfg)
    corpus = _read(cfg, "data.corpus", tagset=ckpt.model.tagset, gold_fallback=True, strict=True)
    return entity_prf(ckpt.model.predict(corpus), corpus.gold_tags(), corpus.tagset)


def cmd_detect_noise(cfg: dict, emit: Emitter) -> dict:
    """Flag untrusted tokens of ``data.corpus`` with the model and score them against the ledger.

    Verdicts use the keep ratio of the model's final epoch; records are
    written to ``records.jsonl``.
    """
    _require(cfg, "model", "data.corpus", "data.ledger")
    ckpt = _load_model(cfg)
    model = ckpt.model
    corpus = _read(cfg, "data.corpus", tagset=model.tagset, strict=True)
    ledger = _read_ledger(cfg)
    mode = cfg["train.tau"]
    if mode == "oracle":
        tau = noise.oracle_tau(corpus, ledger)
    elif mode == "searched":
        sched = ckpt.config.get("schedule", {})
        tau = (float(sched.get("tau_p", 0.0)), float(sched.get("tau_n", 0.0)))
    else:
        tau = parse_tau(mode)
    tcfg = train_config({**cfg, "seed": cfg["seed"] or 0}, tau)
    table = trainer._TokenTable(corpus)
    feats = model.features(corpus)
    judgement = trainer.judge_epoch(
        model, feats, table, corpus.tagset, ckpt.epoch or tcfg.epochs, tcfg, [range(len(corpus))]
    )
    path = _outdir(cfg) / "records.jsonl"
    with open(path, "w", encoding="utf-8") as f:
        for recs in judgement.records(table):
            for r in recs:
                f.write(json.dumps(r.to_json(corpus.tagset), sort_keys=True) + "\n")
    flagged = judgement.untrusted(table)
    return {
        "records": str(path),
        "tau_p": tau[0],
        "tau_n": tau[1],
        "flagged": len(flagged),
        **noise.score_noise_detection(flagged, ledger),
    }


COMMANDS: dict[str, tuple[Callable[[dict, Emitter], dict], str]] = {
    "perturb": (cmd_perturb, "inject recall/precision noise into a clean corpus"),
    "train": (cmd_train, "train a confidence-aware CRF"),
    "selftrain": (cmd_selftrain, "cross-validated self-training"),
    "predict": (cmd_predict, "tag a corpus with a trained model"),
    "eval": (cmd_eval, "entity P/R/F1 of a model"),
    "detect-noise": (cmd_detect_noise, "flag likely-noisy tokens and score them"),
    "search-tau": (cmd_search_tau, "grid search over noise rates"),
    "synth": (cmd_synth, "generate a clean synthetic corpus"),
}

# flag name -> config key
FLAGS = {
    "seed": "seed",
    "train": "data.train",
    "dev": "data.dev",
    "test": "data.test",
    "corpus": "data.corpus",
    "ledger": "data.ledger",
    "model": "model",
    "out": "output.dir",
    "strategy": "train.strategy",
    "tau": "train.tau",
    "calibration": "train.calibration",
    "epochs": "train.epochs",
    "lr": "train.learning_rate",
    "rounds": "selftrain.rounds",
    "target_recall": "perturb.target_recall",
    "target_precision": "perturb.target_precision",
    "sweep": "perturb.sweep",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="noisy-ner", description="NER training under annotation noise.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (fn, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_, description=fn.__doc__)
        p.add_argument("--config", help=f"JSON config with dotted keys (default: ${CONFIG_ENV})")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        p.add_argument("--seed", type=int)
        for flag in ("train", "dev", "test", "corpus", "ledger", "model", "out"):
            p.add_argument(f"--{flag}", metavar="PATH")
        p.add_argument("--strategy", choices=[s.value for s in conf.Strategy])
        p.add_argument("--tau", help="'oracle', 'searched' or explicit 'TAU_P,TAU_N'")
        p.add_argument("--calibration", choices=["on", "off"])
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--rounds", type=int)
        p.add_argument("--target-recall", type=float)
        p.add_argument("--target-precision", type=float)
        p.add_argument("--sweep", action="store_true", default=None, help="perturb at several recall levels")
    return parser


def _parse_set(items: Sequence[str]) -> dict:
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    return out


def config_from_args(args: argparse.Namespace, env=os.environ) -> dict:
    path = args.config or env.get(CONFIG_ENV)
    file_layer = load_config_file(path) if path else {}
    flag_layer = {key: getattr(args, name) for name, key in FLAGS.items()}
    return resolve_config(file_layer, _parse_set(args.set), flag_layer)


def main(argv: Optional[Sequence[str]] = None, stdout: TextIO = None, stderr: TextIO = None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        cfg = config_from_args(args)
        fn, _ = COMMANDS[args.command]
        emit = Emitter(stdout)
        emit("config", command=args.command, config=cfg)
        result = fn(cfg, emit)
        emit("result", **result)
        return EXIT_OK
    except CliError as exc:
        stderr.write(f"error: {exc}\n")
        return exc.code
    except trainer.NumericalError as exc:
        stderr.write(f"numerical failure: {exc}\n")
        return EXIT_NUMERICAL
    except (ConllParseError, noise.PerturbationError) as exc:
        stderr.write(f"data error: {exc}\n")
        return EXIT_DATA
    except ValueError as exc:
        stderr.write(f"data error: {exc}\n")
        return EXIT_DATA
