"""Controlled annotation perturbation and noise-detection scoring.

Recall is lowered by erasing every occurrence of randomly drawn entity
identities; precision is then lowered by tagging random all-``O`` runs as
entities.  The :class:`NoiseLedger` keeps what was changed so detectors can
be scored against it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from noisy_ner.corpus import Corpus, EntitySpan, corpus_spans, prf


class PerturbationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PerturbationConfig:
    target_recall: float = 0.5
    target_precision: float = 0.9
    seed: int = 0
    max_spurious_span_len: int = 3
    removal_unit: str = "identity"  # "identity" | "occurrence"

    def __post_init__(self):
        if not 0 < self.target_recall <= 1:
            raise ValueError("target_recall must be in (0, 1]")
        if not 0 < self.target_precision <= 1:
            raise ValueError("target_precision must be in (0, 1]")
        if self.max_spurious_span_len < 1:
            raise ValueError("max_spurious_span_len must be >= 1")
        if self.removal_unit not in ("identity", "occurrence"):
            raise ValueError(f"unknown removal unit {self.removal_unit!r}")


@dataclass
class NoiseLedger:
    removed_entities: list[EntitySpan] = field(default_factory=list)
    spurious_spans: list[EntitySpan] = field(default_factory=list)
    noisy_positive: set[tuple[int, int]] = field(default_factory=set)
    noisy_negative: set[tuple[int, int]] = field(default_factory=set)

    @property
    def noisy_tokens(self) -> set[tuple[int, int]]:
        return self.noisy_positive | self.noisy_negative

    def merge(self, other: "NoiseLedger") -> "NoiseLedger":
        return NoiseLedger(
            removed_entities=self.removed_entities + other.removed_entities,
            spurious_spans=self.spurious_spans + other.spurious_spans,
        )

    def to_json(self) -> dict:
        return {
            "format": "noisy-ner-ledger",
            "version": 1,
            "removed_entities": [s.as_list() for s in self.removed_entities],
            "spurious_spans": [s.as_list() for s in self.spurious_spans],
            "noisy_positive": sorted(list(t) for t in self.noisy_positive),
            "noisy_negative": sorted(list(t) for t in self.noisy_negative),
        }

    @classmethod
    def from_json(cls, data: dict) -> "NoiseLedger":
        if data.get("format") != "noisy-ner-ledger":
            raise ValueError("not a noise ledger file")
        return cls(
            removed_entities=[EntitySpan(*s) for s in data["removed_entities"]],
            spurious_spans=[EntitySpan(*s) for s in data["spurious_spans"]],
            noisy_positive={tuple(t) for t in data["noisy_positive"]},
            noisy_negative={tuple(t) for t in data["noisy_negative"]},
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, indent=1)

    @classmethod
    def load(cls, path) -> "NoiseLedger":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(json.load(f))


def token_flags(corpus: Corpus) -> tuple[set, set]:
    """(noisy positives, noisy negatives): tokens whose observed tag differs from gold."""
    pos, neg = set(), set()
    for idx, sent in enumerate(corpus.sentences):
        for i, tok in enumerate(sent.tokens):
            if tok.gold_tag is None:
                raise ValueError(f"sentence {sent.id} has no gold tags")
            if tok.observed_tag != tok.gold_tag:
                (pos if tok.observed_tag != 0 else neg).add((idx, i))
    return pos, neg


def ledger_from_corpus(corpus: Corpus, removed=(), spurious=()) -> NoiseLedger:
    pos, neg = token_flags(corpus)
    return NoiseLedger(list(removed), list(spurious), pos, neg)


def _require_gold(corpus: Corpus) -> None:
    if not corpus.has_gold:
        raise ValueError("perturbation needs a corpus with gold tags")


def entity_recall(corpus: Corpus) -> float:
    gold = corpus_spans(corpus.gold_tags(), corpus.tagset)
    obs = corpus_spans(corpus.observed_tags(), corpus.tagset)
    return len(gold & obs) / len(gold) if gold else 1.0


def entity_precision(corpus: Corpus) -> float:
    gold = corpus_spans(corpus.gold_tags(), corpus.tagset)
    obs = corpus_spans(corpus.observed_tags(), corpus.tagset)
    return len(gold & obs) / len(obs) if obs else 1.0


def lower_recall(
    corpus: Corpus, target: float, rng: np.random.Generator, unit: str = "identity"
) -> tuple[Corpus, NoiseLedger]:
    """Erase entities until corpus-level recall first drops to ``target`` or below.

    With ``unit="identity"`` each draw picks a distinct (surface form, type)
    uniformly and erases every occurrence of it that is still tagged.
    """
    _require_gold(corpus)
    if not 0 < target <= 1:
        raise ValueError("target must be in (0, 1]")
    ts = corpus.tagset
    tags = [list(t) for t in corpus.observed_tags()]
    gold_spans = sorted(
        corpus_spans(corpus.gold_tags(), ts), key=lambda s: (s.sentence_id, s.start)
    )
    total = len(gold_spans)
    observed = corpus_spans(tags, ts)
    alive = {s for s in gold_spans if s in observed}

    def key(sp: EntitySpan):
        if unit == "occurrence":
            return (sp.sentence_id, sp.start)
        words = corpus.sentences[sp.sentence_id].words[sp.start : sp.end]
        return (" ".join(words), sp.type)

    groups: dict = {}
    for sp in gold_spans:
        if sp in alive:
            groups.setdefault(key(sp), []).append(sp)
    pool = sorted(groups)
    removed: list[EntitySpan] = []
    while total and len(alive) / total > target and pool:
        pick = pool.pop(int(rng.integers(len(pool))))
        for sp in groups[pick]:
            for i in range(sp.start, sp.end):
                tags[sp.sentence_id][i] = 0
            alive.discard(sp)
            removed.append(sp)
    out = corpus.with_tags(tags)
    return out, ledger_from_corpus(out, removed=removed)


def _eligible_starts(tags, gold, length: int) -> list[int]:
    """Starts of ``length``-token runs that are O in both tag layers and not
    adjacent to an observed entity."""
    n = len(tags)
    out = []
    for s in range(0, n - length + 1):
        e = s + length
        if any(tags[i] or gold[i] for i in range(s, e)):
            continue
        if s > 0 and tags[s - 1]:
            continue
        if e < n and tags[e]:
            continue
        out.append(s)
    return out


def lower_precision(
    corpus: Corpus, target: float, rng: np.random.Generator, max_span_len: int = 3
) -> tuple[Corpus, NoiseLedger]:
    """Insert random spurious entity chunks until precision first drops to ``target`` or below."""
    _require_gold(corpus)
    if not 0 < target <= 1:
        raise ValueError("target must be in (0, 1]")
    ts = corpus.tagset
    if not ts.types:
        raise PerturbationError("tag set has no entity types to insert")
    tags = [list(t) for t in corpus.observed_tags()]
    gold = corpus.gold_tags()
    gold_spans = corpus_spans(gold, ts)
    obs_spans = corpus_spans(tags, ts)
    true_count = len(gold_spans & obs_spans)
    total = len(obs_spans)
    lengths = range(1, max_span_len + 1)
    starts = {k: [_eligible_starts(t, g, k) for t, g in zip(tags, gold)] for k in lengths}
    counts = {k: np.array([len(s) for s in starts[k]], dtype=np.int64) for k in lengths}
    spurious: list[EntitySpan] = []
    while (true_count / total if total else 1.0) > target:
        length = int(rng.integers(1, max_span_len + 1))
        if not counts[length].sum():
            # shorter runs may still fit when no run of the drawn length does
            length = next((k for k in lengths if counts[k].sum()), None)
            if length is None:
                raise PerturbationError(
                    f"no O tokens left; precision stuck at {true_count / total:.4f} > {target}"
                )
        cum = np.cumsum(counts[length])
        r = int(rng.integers(cum[-1]))
        sid = int(np.searchsorted(cum, r, side="right"))
        start = starts[length][sid][r - (int(cum[sid - 1]) if sid else 0)]
        etype = ts.types[int(rng.integers(len(ts.types)))]
        tags[sid][start] = ts.label_id("B", etype)
        for i in range(start + 1, start + length):
            tags[sid][i] = ts.label_id("I", etype)
        spurious.append(EntitySpan(sid, start, start + length, etype))
        total += 1
        for k in lengths:
            starts[k][sid] = _eligible_starts(tags[sid], gold[sid], k)
            counts[k][sid] = len(starts[k][sid])
    out = corpus.with_tags(tags)
    return out, ledger_from_corpus(out, spurious=spurious)


def perturb(corpus: Corpus, cfg: PerturbationConfig, rng: Optional[np.random.Generator] = None):
    """Recall lowering, then precision lowering; returns the noisy corpus and combined ledger."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    noisy, led_r = lower_recall(corpus, cfg.target_recall, rng, unit=cfg.removal_unit)
    noisy, led_p = lower_precision(noisy, cfg.target_precision, rng, cfg.max_spurious_span_len)
    ledger = led_r.merge(led_p)
    ledger.noisy_positive, ledger.noisy_negative = token_flags(noisy)
    return noisy, ledger


def score_noise_detection(flags: Iterable[tuple[int, int]], ledger: NoiseLedger) -> dict:
    """Token-level precision/recall/F1 of flagged tokens against the ledger."""
    flags = {tuple(f) for f in flags}
    truth = ledger.noisy_tokens
    return prf(len(flags & truth), len(flags), len(truth))


def oracle_tau(corpus: Corpus, ledger: NoiseLedger) -> tuple[float, float]:
    """Gold noise ratios (noisy positives / |D_p|, noisy negatives / |D_n|) of the observed tags."""
    n_pos = sum(t != 0 for tags in corpus.observed_tags() for t in tags)
    n_neg = corpus.num_tokens - n_pos
    tau_p = len(ledger.noisy_positive) / n_pos if n_pos else 0.0
    tau_n = len(ledger.noisy_negative) / n_neg if n_neg else 0.0
    return tau_p, tau_n
