"""Column-formatted corpora, BIO2 tag sets, entity spans and entity-level scoring.

Tags are stored as integer label ids against a :class:`TagSet`.  Id 0 is
always ``O``; each entity type ``t`` (in first-appearance order) owns the
pair ``B-t = 1 + 2j`` and ``I-t = 2 + 2j``, so growing the type list never
renumbers existing labels.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Optional, Sequence

OUTSIDE = "O"
POSITIONS = ("B", "I")
DOCSTART = "-DOCSTART-"


class ConllParseError(ValueError):
    """Raised for malformed column input; carries the 1-based line number."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class TagSet:
    types: tuple[str, ...] = ()

    def __post_init__(self):
        if len(set(self.types)) != len(self.types):
            raise ValueError(f"duplicate entity types in {self.types!r}")
        if any(not t for t in self.types):
            raise ValueError("empty entity type")

    def __len__(self) -> int:
        return 1 + len(POSITIONS) * len(self.types)

    @cached_property
    def _parts(self) -> tuple[tuple[Optional[str], Optional[str]], ...]:
        out: list[tuple[Optional[str], Optional[str]]] = [(None, None)]
        for t in self.types:
            out.extend((p, t) for p in POSITIONS)
        return tuple(out)

    @property
    def labels(self) -> list[tuple[Optional[str], Optional[str]]]:
        """(position, type) pairs by id; ``(None, None)`` is the negative label."""
        return list(self._parts)

    @property
    def names(self) -> list[str]:
        return [self.name(i) for i in range(len(self))]

    def with_type(self, etype: str) -> "TagSet":
        if etype in self.types:
            return self
        return TagSet(self.types + (etype,))

    def label_id(self, position: Optional[str], etype: Optional[str] = None) -> int:
        if position is None or position == OUTSIDE:
            return 0
        try:
            return 1 + len(POSITIONS) * self.types.index(etype) + POSITIONS.index(position)
        except ValueError:
            raise KeyError(f"unknown label {position}-{etype}") from None

    def parse(self, tag: str) -> int:
        if tag == OUTSIDE:
            return 0
        position, _, etype = tag.partition("-")
        return self.label_id(position, etype)

    def name(self, label: int) -> str:
        if label == 0:
            return OUTSIDE
        position, etype = self.split(label)
        return f"{position}-{etype}"

    def split(self, label: int) -> tuple[Optional[str], Optional[str]]:
        if label < 0:
            raise KeyError(f"negative label id {label}")
        try:
            return self._parts[label]
        except IndexError:
            raise KeyError(f"label id {label} out of range for {len(self)} labels") from None

    def is_positive(self, label: int) -> bool:
        return label != 0

    def position_of(self, label: int) -> Optional[str]:
        return self.split(label)[0]

    def type_of(self, label: int) -> Optional[str]:
        return self.split(label)[1]

    def with_position(self, position: str) -> list[int]:
        """Positive label ids whose position part is ``position``."""
        return [self.label_id(position, t) for t in self.types]

    def with_entity_type(self, etype: str) -> list[int]:
        """Positive label ids whose type part is ``etype``."""
        return [self.label_id(p, etype) for p in POSITIONS]

    @property
    def positive_ids(self) -> list[int]:
        return list(range(1, len(self)))


@dataclass(frozen=True)
class Token:
    surface: str
    observed_tag: int
    gold_tag: Optional[int] = None


@dataclass(frozen=True)
class Sentence:
    id: int
    tokens: tuple[Token, ...]

    def __post_init__(self):
        if not self.tokens:
            raise ValueError(f"sentence {self.id} is empty")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def words(self) -> tuple[str, ...]:
        return tuple(t.surface for t in self.tokens)

    @property
    def tags(self) -> tuple[int, ...]:
        return tuple(t.observed_tag for t in self.tokens)

    @property
    def gold(self) -> Optional[tuple[int, ...]]:
        if any(t.gold_tag is None for t in self.tokens):
            return None
        return tuple(t.gold_tag for t in self.tokens)

    def with_tags(self, tags: Sequence[int]) -> "Sentence":
        if len(tags) != len(self.tokens):
            raise ValueError("tag sequence length does not match sentence")
        return replace(
            self,
            tokens=tuple(replace(tok, observed_tag=int(t)) for tok, t in zip(self.tokens, tags)),
        )

    def without_gold(self) -> "Sentence":
        return replace(self, tokens=tuple(replace(tok, gold_tag=None) for tok in self.tokens))


@dataclass(frozen=True)
class EntitySpan:
    sentence_id: int
    start: int
    end: int
    type: str

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"empty span {self.start}:{self.end}")

    def as_list(self) -> list:
        return [self.sentence_id, self.start, self.end, self.type]


@dataclass(frozen=True)
class Corpus:
    sentences: tuple[Sentence, ...] = ()
    tagset: TagSet = field(default_factory=TagSet)

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    @property
    def has_gold(self) -> bool:
        return bool(self.sentences) and all(s.gold is not None for s in self.sentences)

    @property
    def num_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)

    def with_gold_from_observed(self) -> "Corpus":
        """Treat the observed tags as gold (e.g. a clean corpus about to be perturbed)."""
        sents = tuple(
            replace(s, tokens=tuple(replace(t, gold_tag=t.observed_tag) for t in s.tokens))
            for s in self.sentences
        )
        return replace(self, sentences=sents)

    def without_gold(self) -> "Corpus":
        return replace(self, sentences=tuple(s.without_gold() for s in self.sentences))

    def with_tags(self, tag_seqs: Iterable[Sequence[int]]) -> "Corpus":
        tag_seqs = list(tag_seqs)
        if len(tag_seqs) != len(self.sentences):
            raise ValueError("need one tag sequence per sentence")
        return replace(
            self, sentences=tuple(s.with_tags(t) for s, t in zip(self.sentences, tag_seqs))
        )

    def subset(self, indices: Iterable[int]) -> "Corpus":
        return replace(self, sentences=tuple(self.sentences[i] for i in indices))

    def with_tagset(self, tagset: TagSet) -> "Corpus":
        """Re-express tags under a tag set whose types extend this one's."""
        if tagset.types[: len(self.tagset.types)] != self.tagset.types:
            raise ValueError("new tag set must extend the current type order")
        return replace(self, tagset=tagset)

    def observed_tags(self) -> list[tuple[int, ...]]:
        return [s.tags for s in self.sentences]

    def gold_tags(self) -> list[tuple[int, ...]]:
        if not self.has_gold:
            raise ValueError("corpus carries no gold tags")
        return [s.gold for s in self.sentences]


_TAG_RE = re.compile(r"^(?:O|([A-Z])-(.+))$")


def _split_raw_tag(tag: str, lineno: int) -> tuple[Optional[str], Optional[str]]:
    m = _TAG_RE.match(tag)
    if m is None:
        raise ConllParseError(lineno, f"cannot read tag {tag!r}")
    if m.group(1) is None:
        return None, None
    if m.group(1) not in POSITIONS:
        raise ConllParseError(lineno, f"unknown position prefix in tag {tag!r}")
    return m.group(1), m.group(2)


def normalize_bio(tags: Sequence[tuple[Optional[str], Optional[str]]]):
    """IOB1 -> BIO2: an ``I-X`` that does not continue an ``X`` chunk becomes ``B-X``.

    BIO2 input passes through unchanged.
    """
    out = []
    prev_type = None
    for position, etype in tags:
        if position == "I" and prev_type != etype:
            position = "B"
        out.append((position, etype))
        prev_type = etype
    return out


def parse_conll(
    text: str,
    token_column: int = 0,
    tag_column: int = -1,
    gold_column: Optional[int] = None,
    tagset: Optional[TagSet] = None,
) -> Corpus:
    """Parse whitespace-separated columns into a BIO2 :class:`Corpus`.

    Every non-blank line must have the same number of columns as the first
    line of the file.  ``-DOCSTART-`` lines are skipped.  New entity types
    extend ``tagset`` (or an empty one) in order of first appearance.
    """
    types = list(tagset.types) if tagset is not None else []
    raw_sents: list[list[tuple[str, tuple, Optional[tuple]]]] = []
    current: list = []
    ncols = None

    def note_type(etype):
        if etype is not None and etype not in types:
            types.append(etype)

    for lineno, line in enumerate(text.splitlines(), 1):
        cols = line.split()
        if not cols:
            if current:
                raw_sents.append(current)
                current = []
            continue
        if ncols is None:
            ncols = len(cols)
        if len(cols) != ncols:
            raise ConllParseError(lineno, f"expected {ncols} columns, got {len(cols)}")
        try:
            surface = cols[token_column]
            tag = cols[tag_column]
            gold = cols[gold_column] if gold_column is not None else None
        except IndexError:
            raise ConllParseError(lineno, f"column index out of range for {len(cols)} columns")
        if surface == DOCSTART:
            continue
        obs = _split_raw_tag(tag, lineno)
        note_type(obs[1])
        gold_parts = None
        if gold is not None:
            gold_parts = _split_raw_tag(gold, lineno)
            note_type(gold_parts[1])
        current.append((surface, obs, gold_parts))
    if current:
        raw_sents.append(current)

    ts = TagSet(tuple(types))
    sentences = []
    for sid, raw in enumerate(raw_sents):
        obs = normalize_bio([r[1] for r in raw])
        gold = normalize_bio([r[2] for r in raw]) if gold_column is not None else None
        toks = tuple(
            Token(
                surface=r[0],
                observed_tag=ts.label_id(*obs[i]),
                gold_tag=ts.label_id(*gold[i]) if gold is not None else None,
            )
            for i, r in enumerate(raw)
        )
        sentences.append(Sentence(id=sid, tokens=toks))
    return Corpus(sentences=tuple(sentences), tagset=ts)


def read_conll(path, **kwargs) -> Corpus:
    with open(path, encoding="utf-8") as f:
        return parse_conll(f.read(), **kwargs)


def format_conll(corpus: Corpus, include_gold: bool = False, sep: str = " ") -> str:
    lines = []
    ts = corpus.tagset
    for sent in corpus.sentences:
        for tok in sent.tokens:
            cols = [tok.surface, ts.name(tok.observed_tag)]
            if include_gold:
                if tok.gold_tag is None:
                    raise ValueError(f"sentence {sent.id} has no gold tags")
                cols.append(ts.name(tok.gold_tag))
            lines.append(sep.join(cols))
        lines.append("")
    return "\n".join(lines) + ("\n" if lines else "")


def write_conll(corpus: Corpus, path, include_gold: bool = False) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_conll(corpus, include_gold=include_gold))


def extract_spans(tags: Sequence[int], tagset: TagSet, sentence_id: int = 0) -> list[EntitySpan]:
    """Maximal BIO chunks of a label sequence.

    Decoding is permissive: an ``I-X`` that does not follow ``B-X``/``I-X``
    opens a new chunk, exactly as if it were ``B-X``.
    """
    spans = []
    start = None
    cur = None
    for i, label in enumerate(tags):
        position, etype = tagset.split(int(label))
        if position is None:
            if cur is not None:
                spans.append(EntitySpan(sentence_id, start, i, cur))
            start, cur = None, None
        elif position == "B" or etype != cur:
            if cur is not None:
                spans.append(EntitySpan(sentence_id, start, i, cur))
            start, cur = i, etype
    if cur is not None:
        spans.append(EntitySpan(sentence_id, start, len(tags), cur))
    return spans


def tags_of_spans(spans: Iterable[EntitySpan], length: int, tagset: TagSet) -> list[int]:
    tags = [0] * length
    for sp in spans:
        if any(tags[i] for i in range(sp.start, sp.end)):
            raise ValueError(f"overlapping span {sp}")
        tags[sp.start] = tagset.label_id("B", sp.type)
        for i in range(sp.start + 1, sp.end):
            tags[i] = tagset.label_id("I", sp.type)
    return tags


def corpus_spans(tag_seqs: Sequence[Sequence[int]], tagset: TagSet) -> set[EntitySpan]:
    out = set()
    for sid, tags in enumerate(tag_seqs):
        out.update(extract_spans(tags, tagset, sid))
    return out


def _ratio(num: int, den: int) -> float:
    return num / den if den else 1.0


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r else 0.0


def prf(num_matched: int, num_pred: int, num_gold: int) -> dict:
    """Precision/recall/F1 with the 0/0 -> 1.0 convention for P and R."""
    p = _ratio(num_matched, num_pred)
    r = _ratio(num_matched, num_gold)
    return {"precision": p, "recall": r, "f1": _f1(p, r)}


def entity_prf(
    pred: Sequence[Sequence[int]], gold: Sequence[Sequence[int]], tagset: TagSet
) -> dict:
    """Exact-match entity precision, recall and F1, overall and per type."""
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predicted sequences vs {len(gold)} gold")
    for sid, (p, g) in enumerate(zip(pred, gold)):
        if len(p) != len(g):
            raise ValueError(f"sentence {sid}: {len(p)} predicted tags vs {len(g)} gold")
    pred_spans = corpus_spans(pred, tagset)
    gold_spans = corpus_spans(gold, tagset)
    matched = pred_spans & gold_spans
    out = prf(len(matched), len(pred_spans), len(gold_spans))
    per_type = {}
    for t in tagset.types:
        per_type[t] = prf(
            sum(s.type == t for s in matched),
            sum(s.type == t for s in pred_spans),
            sum(s.type == t for s in gold_spans),
        )
    out["per_type"] = per_type
    out["counts"] = {"matched": len(matched), "pred": len(pred_spans), "gold": len(gold_spans)}
    return out
