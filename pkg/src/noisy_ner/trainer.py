"""Training: mini-batch SGD on the partially marginalized likelihood, the
confidence-driven epoch loop, cross-validated self-training, and the
coordinate search over noise rates."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from noisy_ner import confidence as conf
from noisy_ner import lattice as lt
from noisy_ner.corpus import Corpus, TagSet, entity_prf
from noisy_ner.emission import CorpusFeatures, EmissionModel, FeatureDictionary, build_dictionary
from noisy_ner.noise import NoiseLedger, oracle_tau, score_noise_detection
from noisy_ner.seeding import substream

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "noisy-ner-crf"
CHECKPOINT_VERSION = 1
TAU_GRID = tuple(round(0.01 * i, 2) for i in range(21))


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 0.01
    l2_penalty: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    strategy: conf.Strategy = conf.Strategy.GLOBAL
    schedule: conf.ScheduleConfig = field(default_factory=conf.ScheduleConfig)
    calibration_enabled: bool = True
    shuffle: bool = True
    pooling: str = "epoch"  # "epoch" | "batch"
    structural_mask: bool = False
    epoch_offset: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.pooling not in ("epoch", "batch"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        object.__setattr__(self, "strategy", conf.Strategy(self.strategy))

    def with_tau(self, tau_p: float, tau_n: float) -> "TrainConfig":
        return replace(self, schedule=replace(self.schedule, tau_p=tau_p, tau_n=tau_n))

    def to_json(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "schedule" in d and isinstance(d["schedule"], dict):
            d["schedule"] = conf.ScheduleConfig(**d["schedule"])
        return cls(**d)


def fingerprint(cfg_json: dict) -> str:
    blob = json.dumps(cfg_json, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


class CRFTagger:
    """Linear emission scorer plus a trainable transition table."""

    def __init__(
        self,
        emission: EmissionModel,
        transitions: Optional[np.ndarray] = None,
        structural_mask: bool = False,
    ):
        self.emission = emission
        L = len(emission.tagset)
        self.transitions = (
            lt.zero_transitions(L) if transitions is None else np.array(transitions, dtype=np.float64)
        )
        if self.transitions.shape != (L + 2, L + 2):
            raise ValueError("transition table does not match the tag set")
        self.structural_mask = structural_mask
        self._hard = lt.bio_transition_mask(emission.tagset) if structural_mask else None

    @property
    def tagset(self) -> TagSet:
        return self.emission.tagset

    @property
    def dictionary(self) -> FeatureDictionary:
        return self.emission.dictionary

    def effective_transitions(self) -> np.ndarray:
        if self._hard is None:
            return self.transitions
        return self.transitions + self._hard

    def features(self, corpus: Corpus) -> CorpusFeatures:
        return CorpusFeatures(corpus, self.dictionary)

    def lattices(self, feats: CorpusFeatures) -> list[lt.Lattice]:
        em = np.asarray(feats.matrix @ self.emission.weights)
        T = self.effective_transitions()
        return [lt.Lattice(em[feats.rows(i)], T) for i in range(len(feats))]

    def lattice(self, sentence) -> lt.Lattice:
        return lt.Lattice(self.emission.emit_scores(sentence), self.effective_transitions())

    def predict(self, corpus: Corpus, feats: Optional[CorpusFeatures] = None) -> list[tuple[int, ...]]:
        feats = feats or self.features(corpus)
        return [tuple(int(t) for t in lt.viterbi(lat)[0]) for lat in self.lattices(feats)]

    def evaluate(self, corpus: Corpus, feats: Optional[CorpusFeatures] = None) -> dict:
        return entity_prf(self.predict(corpus, feats), corpus.gold_tags(), corpus.tagset)

    def copy(self) -> "CRFTagger":
        em = EmissionModel(self.dictionary, self.tagset, self.emission.weights.copy())
        return CRFTagger(em, self.transitions.copy(), self.structural_mask)


@dataclass
class Checkpoint:
    model: CRFTagger
    config: dict = field(default_factory=dict)
    round: int = 0
    epoch: int = 0

    def to_json(self) -> dict:
        m = self.model
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "tagset": list(m.tagset.types),
            "features": m.dictionary.names,
            "weights": m.emission.weights.tolist(),
            "transitions": m.transitions.tolist(),
            "structural_mask": m.structural_mask,
            "config": self.config,
            "fingerprint": fingerprint(self.config),
            "round": self.round,
            "epoch": self.epoch,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Checkpoint":
        if data.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a checkpoint file")
        if data.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data.get('version')}")
        tagset = TagSet(tuple(data["tagset"]))
        dictionary = FeatureDictionary(data["features"]).freeze()
        emission = EmissionModel(dictionary, tagset, np.array(data["weights"], dtype=np.float64).reshape(len(dictionary), len(tagset)))
        model = CRFTagger(emission, np.array(data["transitions"]), data["structural_mask"])
        return cls(model, data["config"], data["round"], data["epoch"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(json.load(f))


def singleton_masks(corpus: Corpus) -> list[np.ndarray]:
    L = len(corpus.tagset)
    return [lt.singleton_mask(s.tags, L) for s in corpus]


def train_epoch(
    model: CRFTagger,
    feats: CorpusFeatures,
    masks: Sequence[np.ndarray],
    cfg: TrainConfig,
    order: Optional[Sequence[int]] = None,
) -> float:
    """One pass of mini-batch SGD on ``-sum log p~ + l2/2 ||theta||^2``.

    Parameters are updated in place.  Returns the mean negative
    log-likelihood per sentence, measured before each batch's update.
    """
    if len(masks) != len(feats):
        raise ValueError("need one mask per sentence")
    order = np.arange(len(feats)) if order is None else np.asarray(order)
    W = model.emission.weights
    T = model.transitions
    lr, lam = cfg.learning_rate, cfg.l2_penalty
    total = 0.0
    for b in range(0, len(order), cfg.batch_size):
        idx = order[b : b + cfg.batch_size]
        X, slices = feats.batch(idx)
        em = np.asarray(X @ W)
        T_eff = model.effective_transitions()
        g_em = np.empty_like(em)
        g_tr = np.zeros_like(T)
        for sid, sl in zip(idx, slices):
            lat = lt.Lattice(em[sl], T_eff)
            try:
                obj, d_em, d_tr = lt.partial_marginal_objective(lat, masks[sid])
            except lt.EmptyColumnError as exc:
                raise NumericalError(f"sentence {int(sid)}: {exc}") from exc
            if not math.isfinite(obj):
                raise NumericalError(f"non-finite loss {obj} at sentence {int(sid)}")
            total -= obj
            g_em[sl] = -d_em
            g_tr -= d_tr
        grad_W = np.asarray(X.T @ g_em)
        W -= lr * (grad_W + lam * W)
        T -= lr * (g_tr + lam * T)
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(T))):
        raise NumericalError("parameters became non-finite")
    return total / max(len(order), 1)


def confidence_records(
    model: CRFTagger, corpus: Corpus, feats: CorpusFeatures, strategy: conf.Strategy
) -> tuple[list[list[conf.ConfidenceRecord]], list[np.ndarray]]:
    """Score every observed tag; returns per-sentence records and label distributions."""
    records, dists = [], []
    for sid, (sent, lat) in enumerate(zip(corpus, model.lattices(feats))):
        dist = conf.label_distribution(lat, strategy)
        tags = np.asarray(sent.tags)
        scores = np.clip(dist[np.arange(len(tags)), tags], 0.0, 1.0)
        records.append(conf.make_records(sid, sent.tags, scores))
        dists.append(dist)
    return records, dists


class _TokenTable:
    """Flat per-token view of a corpus used by the epoch loop."""

    def __init__(self, corpus: Corpus):
        sizes = [len(s) for s in corpus]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.observed = np.fromiter((t for s in corpus for t in s.tags), dtype=np.int64)
        self.sentence = np.repeat(np.arange(len(sizes)), sizes)
        self.token = np.concatenate([np.arange(n) for n in sizes])
        self.positive = self.observed != 0

    def __len__(self):
        return len(self.observed)

    def tokens_of(self, sentence_ids) -> np.ndarray:
        return np.concatenate([np.arange(self.offsets[i], self.offsets[i + 1]) for i in sentence_ids])


@dataclass
class EpochJudgement:
    """Verdicts of one confidence pass, in flat token order."""

    scores: np.ndarray
    trusted: np.ndarray
    mask: np.ndarray
    calibrations: dict

    def records(self, table: _TokenTable) -> list[list[conf.ConfidenceRecord]]:
        out = []
        for sid in range(len(table.offsets) - 1):
            row = []
            for j in range(table.offsets[sid], table.offsets[sid + 1]):
                row.append(
                    conf.ConfidenceRecord(
                        sentence_id=sid,
                        token_index=int(table.token[j]),
                        observed_label=int(table.observed[j]),
                        score=float(self.scores[j]),
                        group=conf.POSITIVE if table.positive[j] else conf.NEGATIVE,
                        verdict="trusted" if self.trusted[j] else "untrusted",
                        calibration=self.calibrations.get(j),
                    )
                )
            out.append(row)
        return out

    def untrusted(self, table: _TokenTable) -> set[tuple[int, int]]:
        j = np.flatnonzero(~self.trusted)
        return set(zip(table.sentence[j].tolist(), table.token[j].tolist()))


def judge_epoch(
    model: CRFTagger,
    feats: CorpusFeatures,
    table: _TokenTable,
    tagset: TagSet,
    epoch: float,
    cfg: TrainConfig,
    pools: Sequence[Sequence[int]],
) -> EpochJudgement:
    """Score, split, calibrate and build masks for every token of the corpus.

    Produces the same verdicts and masks as running
    :func:`confidence.split_trusted`, :func:`confidence.calibrate` and
    :func:`confidence.build_mask` record by record.
    """
    dist = np.concatenate([conf.label_distribution(lat, cfg.strategy) for lat in model.lattices(feats)])
    N, L = dist.shape
    scores = np.clip(dist[np.arange(N), table.observed], 0.0, 1.0)
    trusted = np.zeros(N, dtype=bool)
    for pool in pools:
        j = table.tokens_of(pool)
        trusted[j] = conf.split_trusted_arrays(
            scores[j], table.positive[j], table.sentence[j], table.token[j], epoch, cfg.schedule
        )
    mask = np.zeros((N, L), dtype=bool)
    mask[np.arange(N), table.observed] = True
    mask[~trusted & ~table.positive] = True
    calibrations = {}
    for j in np.flatnonzero(~trusted & table.positive):
        label = int(table.observed[j])
        if not cfg.calibration_enabled:
            mask[j] = True
            continue
        cal = conf.calibrate(label, dist[j], tagset)
        calibrations[int(j)] = cal
        position, etype = tagset.split(label)
        keep = tagset.with_position(position) if cal.kept_part == "position" else tagset.with_entity_type(etype)
        mask[j, [0] + keep] = True
    return EpochJudgement(scores, trusted, mask, calibrations)


def _split(records, pools, epoch, cfg: TrainConfig):
    out = [None] * len(records)
    for pool in pools:
        flat = [r for sid in pool for r in records[sid]]
        judged = conf.split_trusted(flat, epoch, cfg.schedule)
        pos = 0
        for sid in pool:
            k = len(records[sid])
            out[sid] = judged[pos : pos + k]
            pos += k
    return out


def _calibrate(records, dists, tagset: TagSet):
    out = []
    for recs, dist in zip(records, dists):
        row = []
        for r in recs:
            if r.group == conf.POSITIVE and r.verdict == "untrusted":
                r = replace(r, calibration=conf.calibrate(r.observed_label, dist[r.token_index], tagset))
            row.append(r)
        out.append(row)
    return out


def judge_records(model, corpus, feats, epoch, cfg: TrainConfig, pools):
    """Record-by-record reference for :func:`judge_epoch`; returns (records, masks)."""
    records, dists = confidence_records(model, corpus, feats, cfg.strategy)
    records = _split(records, pools, epoch, cfg)
    if cfg.calibration_enabled:
        records = _calibrate(records, dists, corpus.tagset)
    masks = [conf.build_mask(len(s), recs, corpus.tagset) for s, recs in zip(corpus, records)]
    return records, masks


@dataclass
class FitResult:
    checkpoint: Checkpoint
    metrics: list[dict]
    records: Optional[list[list[conf.ConfidenceRecord]]] = None

    @property
    def model(self) -> CRFTagger:
        return self.checkpoint.model


def untrusted_tokens(records) -> set[tuple[int, int]]:
    return {
        (r.sentence_id, r.token_index)
        for recs in records
        for r in recs
        if r.verdict == "untrusted"
    }


@dataclass
class Prepared:
    """Feature dictionary and matrix of a training corpus, reusable across fits."""

    dictionary: FeatureDictionary
    features: CorpusFeatures

    @classmethod
    def of(cls, corpus: Corpus) -> "Prepared":
        d = build_dictionary(corpus)
        return cls(d, CorpusFeatures(corpus, d))


def fit(
    corpus: Corpus,
    cfg: TrainConfig,
    dev: Optional[Corpus] = None,
    ledger: Optional[NoiseLedger] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
    prepared: Optional[Prepared] = None,
    keep_records: bool = True,
) -> FitResult:
    """Train a fresh tagger with confidence-estimated constraint masks.

    Each epoch scores all observed tags with the current model, keeps the
    most confident ``r_l(e)`` fraction per group as trusted, calibrates
    untrusted positives, builds the masks and runs :func:`train_epoch`.
    Only observed tags are read from ``corpus``.
    """
    if len(corpus) == 0:
        raise ValueError("cannot fit on an empty corpus")
    if not corpus.tagset.types:
        raise ValueError("tag set has no positive labels")
    prepared = prepared or Prepared.of(corpus)
    model = CRFTagger(
        EmissionModel(prepared.dictionary, corpus.tagset), structural_mask=cfg.structural_mask
    )
    feats = prepared.features
    dev_feats = model.features(dev) if dev is not None else None
    shuffle_rng = substream(cfg.seed, "shuffle")
    table = _TokenTable(corpus)
    n_pos = int(table.positive.sum())
    n_neg = len(table) - n_pos
    base_masks = singleton_masks(corpus)
    schedule_active = cfg.schedule.tau_p > 0 or cfg.schedule.tau_n > 0
    metrics: list[dict] = []
    judgement = None
    for e in range(cfg.epochs):
        sched_e = e + cfg.epoch_offset
        order = shuffle_rng.permutation(len(corpus)) if cfg.shuffle else np.arange(len(corpus))
        if schedule_active:
            if cfg.pooling == "epoch":
                pools = [range(len(corpus))]
            else:
                pools = [order[b : b + cfg.batch_size] for b in range(0, len(order), cfg.batch_size)]
            judgement = judge_epoch(model, feats, table, corpus.tagset, sched_e, cfg, pools)
            masks = [judgement.mask[table.offsets[i] : table.offsets[i + 1]] for i in range(len(corpus))]
            untrusted = ~judgement.trusted
        else:
            judgement = None
            masks = base_masks
            untrusted = np.zeros(len(table), dtype=bool)
        loss = train_epoch(model, feats, masks, cfg, order)
        n_untrusted_p = int((untrusted & table.positive).sum())
        row = {
            "epoch": e,
            "loss": loss,
            "keep_p": conf.keep_ratio(sched_e, cfg.schedule, conf.POSITIVE),
            "keep_n": conf.keep_ratio(sched_e, cfg.schedule, conf.NEGATIVE),
            "trusted_p": n_pos - n_untrusted_p,
            "trusted_n": n_neg - (int(untrusted.sum()) - n_untrusted_p),
        }
        if dev is not None:
            r = model.evaluate(dev, dev_feats)
            row.update(dev_p=r["precision"], dev_r=r["recall"], dev_f1=r["f1"])
        if ledger is not None:
            flagged = judgement.untrusted(table) if judgement is not None else set()
            row["noise_detection_f1"] = score_noise_detection(flagged, ledger)["f1"]
        log.debug("epoch %s", row)
        metrics.append(row)
        if on_epoch is not None:
            on_epoch(row)
    records = None
    if keep_records:
        if judgement is None:
            judgement = EpochJudgement(
                np.full(len(table), np.nan), np.ones(len(table), dtype=bool), None, {}
            )
        records = judgement.records(table)
    ckpt = Checkpoint(model, cfg.to_json(), epoch=cfg.epochs)
    return FitResult(ckpt, metrics, records)


def fit_supervised(
    corpus: Corpus,
    cfg: TrainConfig,
    dev: Optional[Corpus] = None,
    prepared: Optional[Prepared] = None,
) -> FitResult:
    """Plain CRF maximum likelihood on the observed tags (no confidence estimation)."""
    if not corpus.tagset.types:
        raise ValueError("tag set has no positive labels")
    prepared = prepared or Prepared.of(corpus)
    model = CRFTagger(
        EmissionModel(prepared.dictionary, corpus.tagset), structural_mask=cfg.structural_mask
    )
    feats = prepared.features
    masks = singleton_masks(corpus)
    rng = substream(cfg.seed, "shuffle")
    metrics = []
    for e in range(cfg.epochs):
        order = rng.permutation(len(corpus)) if cfg.shuffle else np.arange(len(corpus))
        row = {"epoch": e, "loss": train_epoch(model, feats, masks, cfg, order)}
        if dev is not None:
            row["dev_f1"] = model.evaluate(dev)["f1"]
        metrics.append(row)
    return FitResult(Checkpoint(model, cfg.to_json(), epoch=cfg.epochs), metrics)


@dataclass(frozen=True)
class SelfTrainConfig:
    rounds: int = 3
    first_round_tau: str = "explicit"  # "oracle" | "searched" | "explicit"
    first_tau_p: float = 0.0
    first_tau_n: float = 0.0
    later_tau_p: float = 0.005
    later_tau_n: float = 0.15
    split_seed: int = 0
    reset_schedule: bool = True
    search_default_tau_p: float = 0.0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.first_round_tau not in ("oracle", "searched", "explicit"):
            raise ValueError(f"unknown tau mode {self.first_round_tau!r}")


def split_halves(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    half = (n + 1) // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


def _reannotate(corpus: Corpus, idx: np.ndarray, model: CRFTagger) -> Corpus:
    part = corpus.subset(idx)
    preds = model.predict(part)
    tags = corpus.observed_tags()
    for j, p in zip(idx, preds):
        tags[int(j)] = p
    return corpus.with_tags(tags)


@dataclass
class SelfTrainResult:
    checkpoint: Checkpoint
    rounds: list[dict]
    corpus: Corpus


def self_train(
    corpus: Corpus,
    strain_cfg: SelfTrainConfig,
    train_cfg: TrainConfig,
    dev: Optional[Corpus] = None,
    test: Optional[Corpus] = None,
    ledger: Optional[NoiseLedger] = None,
    on_round: Optional[Callable[[dict], None]] = None,
) -> SelfTrainResult:
    """Cross-validated self-training.

    Every round splits the current training set into halves A and B, fits on
    A and re-annotates B with Viterbi, then fits on the updated B and
    re-annotates A.  A model fitted on the whole updated set is evaluated
    and carried as the round's checkpoint.
    """
    if len(corpus) < 2:
        raise ValueError("self-training needs at least two sentences")
    current = corpus.without_gold()
    if strain_cfg.first_round_tau == "oracle":
        if ledger is None:
            raise ValueError("oracle tau needs a noise ledger")
        first = oracle_tau(corpus, ledger)
    elif strain_cfg.first_round_tau == "searched":
        if dev is None:
            raise ValueError("searched tau needs a dev corpus")
        first = grid_search_tau(current, dev, train_cfg, default_tau_p=strain_cfg.search_default_tau_p).best
    else:
        first = (strain_cfg.first_tau_p, strain_cfg.first_tau_n)
    rows = []
    ckpt = None
    for r in range(strain_cfg.rounds):
        tau = first if r == 0 else (strain_cfg.later_tau_p, strain_cfg.later_tau_n)
        offset = 0 if strain_cfg.reset_schedule else r * train_cfg.epochs
        cfg = replace(train_cfg.with_tau(*tau), epoch_offset=offset)
        a, b = split_halves(len(current), substream(strain_cfg.split_seed, f"split/{r}"))
        before = current.observed_tags()
        model_a = fit(current.subset(a), cfg, keep_records=False).model
        current = _reannotate(current, b, model_a)
        model_b = fit(current.subset(b), cfg, keep_records=False).model
        current = _reannotate(current, a, model_b)
        full = fit(current, cfg)
        ckpt = full.checkpoint
        ckpt.round = r + 1
        after = current.observed_tags()
        row = {
            "round": r + 1,
            "tau_p": tau[0],
            "tau_n": tau[1],
            "changed_tokens": sum(x != y for s0, s1 in zip(before, after) for x, y in zip(s0, s1)),
        }
        if dev is not None:
            row["dev_f1"] = full.model.evaluate(dev)["f1"]
        if test is not None:
            res = full.model.evaluate(test)
            row.update(test_p=res["precision"], test_r=res["recall"], test_f1=res["f1"])
        rows.append(row)
        if on_round is not None:
            on_round(row)
    return SelfTrainResult(ckpt, rows, current)


@dataclass
class TauSearchResult:
    tau_p: float
    tau_n: float
    trace: list[dict]

    @property
    def best(self) -> tuple[float, float]:
        return self.tau_p, self.tau_n

    @property
    def num_fits(self) -> int:
        return len(self.trace)


def grid_search_tau(
    corpus: Corpus,
    dev: Corpus,
    train_cfg: TrainConfig,
    grid: Sequence[float] = TAU_GRID,
    default_tau_p: float = 0.0,
) -> TauSearchResult:
    """Coordinate search: sweep tau_n with tau_p fixed, then tau_p with the best tau_n.

    Dev entity F1 decides; ties go to the smaller value.
    """
    if not dev.has_gold:
        raise ValueError("tau search needs a dev corpus with gold tags")
    grid = sorted(grid)
    trace = []
    prepared = Prepared.of(corpus)

    def run(tp, tn, phase):
        res = fit(corpus, train_cfg.with_tau(tp, tn), prepared=prepared, keep_records=False)
        f1 = res.model.evaluate(dev)["f1"]
        trace.append({"phase": phase, "tau_p": tp, "tau_n": tn, "dev_f1": f1})
        return f1

    best_n, best_f1 = grid[0], -1.0
    for tn in grid:
        f1 = run(default_tau_p, tn, "tau_n")
        if f1 > best_f1:
            best_n, best_f1 = tn, f1
    best_p, best_f1 = grid[0], -1.0
    for tp in grid:
        f1 = run(tp, best_n, "tau_p")
        if f1 > best_f1:
            best_p, best_f1 = tp, f1
    return TauSearchResult(best_p, best_n, trace)
