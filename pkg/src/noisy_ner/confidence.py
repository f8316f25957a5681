"""Token confidence scores, the keep-ratio schedule, trusted/untrusted
splitting, position/type calibration, and constraint-mask construction."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from noisy_ner import lattice as lt
from noisy_ner.corpus import TagSet


class Strategy(str, enum.Enum):
    LOCAL = "local"
    GLOBAL = "global"


POSITIVE = "p"
NEGATIVE = "n"


@dataclass(frozen=True)
class ScheduleConfig:
    tau_p: float = 0.0
    tau_n: float = 0.0
    warmup_epochs: int = 5

    def __post_init__(self):
        for name in ("tau_p", "tau_n"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.warmup_epochs < 1:
            raise ValueError("warmup_epochs must be >= 1")

    def tau(self, group: str) -> float:
        if group == POSITIVE:
            return self.tau_p
        if group == NEGATIVE:
            return self.tau_n
        raise ValueError(f"unknown group {group!r}")


@dataclass(frozen=True)
class Calibration:
    s_p: float
    s_t: float
    kept_part: str  # "position" | "type"


@dataclass(frozen=True)
class ConfidenceRecord:
    sentence_id: int
    token_index: int
    observed_label: int
    score: float
    group: str
    verdict: Optional[str] = None  # "trusted" | "untrusted"
    calibration: Optional[Calibration] = None

    @property
    def trusted(self) -> bool:
        return self.verdict == "trusted"

    def to_json(self, tagset: Optional[TagSet] = None) -> dict:
        d = asdict(self)
        if tagset is not None:
            d["observed_tag"] = tagset.name(self.observed_label)
        return d


def label_distribution(lattice: lt.Lattice, strategy: Strategy) -> np.ndarray:
    """Per-token label distribution: CRF marginals (global) or emission softmax (local)."""
    strategy = Strategy(strategy)
    if strategy is Strategy.GLOBAL:
        return lt.marginals(lt.forward_backward(lattice))
    em = lattice.emissions
    z = em - em.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def score_tokens(lattice: lt.Lattice, observed_tags: Sequence[int], strategy: Strategy) -> np.ndarray:
    tags = np.asarray(observed_tags, dtype=np.int64)
    if tags.shape != (lattice.n,):
        raise ValueError(f"need {lattice.n} tags, got {len(tags)}")
    dist = label_distribution(lattice, strategy)
    return np.clip(dist[np.arange(lattice.n), tags], 0.0, 1.0)


def keep_ratio(epoch: float, cfg: ScheduleConfig, group: str) -> float:
    """``1 - min(epoch / K * tau, tau)``: anneals from 1 to ``1 - tau`` over K epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    tau = cfg.tau(group)
    return 1 - min(epoch / cfg.warmup_epochs * tau, tau)


def make_records(
    sentence_id: int, observed_tags: Sequence[int], scores: Sequence[float]
) -> list[ConfidenceRecord]:
    return [
        ConfidenceRecord(
            sentence_id=sentence_id,
            token_index=i,
            observed_label=int(t),
            score=float(s),
            group=POSITIVE if t != 0 else NEGATIVE,
        )
        for i, (t, s) in enumerate(zip(observed_tags, scores))
    ]


def num_trusted(ratio: float, size: int) -> int:
    return math.floor(ratio * size)


def split_trusted(
    records: Iterable[ConfidenceRecord], epoch: float, cfg: ScheduleConfig
) -> list[ConfidenceRecord]:
    """Mark the most confident ``floor(r_l(e) * |D_l|)`` records of each group trusted.

    Ranking is by score descending, then ``(sentence_id, token_index)``
    ascending.  The output keeps the input order.
    """
    records = list(records)
    verdicts: dict[int, str] = {}
    for group in (POSITIVE, NEGATIVE):
        members = [j for j, r in enumerate(records) if r.group == group]
        keep = num_trusted(keep_ratio(epoch, cfg, group), len(members))
        members.sort(
            key=lambda j: (-records[j].score, records[j].sentence_id, records[j].token_index)
        )
        for rank, j in enumerate(members):
            verdicts[j] = "trusted" if rank < keep else "untrusted"
    return [replace(r, verdict=verdicts[j]) for j, r in enumerate(records)]


def split_trusted_arrays(
    scores: np.ndarray,
    positive: np.ndarray,
    sentence_ids: np.ndarray,
    token_index: np.ndarray,
    epoch: float,
    cfg: ScheduleConfig,
) -> np.ndarray:
    """Array form of :func:`split_trusted`: boolean trusted flag per token."""
    trusted = np.zeros(len(scores), dtype=bool)
    for group, members in ((POSITIVE, np.flatnonzero(positive)), (NEGATIVE, np.flatnonzero(~positive))):
        keep = num_trusted(keep_ratio(epoch, cfg, group), len(members))
        order = np.lexsort((token_index[members], sentence_ids[members], -scores[members]))
        trusted[members[order[:keep]]] = True
    return trusted


def calibrate(observed_label: int, distribution: Sequence[float], tagset: TagSet) -> Calibration:
    """Average the distribution over labels sharing the observed position, and
    over labels sharing the observed type; keep whichever part scores higher
    (ties keep the position)."""
    position, etype = tagset.split(int(observed_label))
    if position is None:
        raise ValueError("calibration applies to positive labels only")
    dist = np.asarray(distribution, dtype=np.float64)
    same_pos = tagset.with_position(position)
    same_type = tagset.with_entity_type(etype)
    s_p = float(dist[same_pos].mean())
    s_t = float(dist[same_type].mean())
    return Calibration(s_p=s_p, s_t=s_t, kept_part="position" if s_p >= s_t else "type")


def allowed_labels(record: ConfidenceRecord, tagset: TagSet) -> list[int]:
    if record.verdict == "trusted":
        return [record.observed_label]
    if record.verdict != "untrusted":
        raise ValueError(f"record {record.sentence_id}:{record.token_index} has no verdict")
    if record.group == NEGATIVE:
        return list(range(len(tagset)))
    position, etype = tagset.split(record.observed_label)
    if record.calibration is None:
        return list(range(len(tagset)))
    if record.calibration.kept_part == "position":
        return [0] + tagset.with_position(position)
    return [0] + tagset.with_entity_type(etype)


def build_mask(length: int, records: Sequence[ConfidenceRecord], tagset: TagSet) -> np.ndarray:
    """Boolean ``(length, L)`` constraint mask from one sentence's verdicts.

    Trusted tokens keep only their observed label.  Untrusted negatives allow
    every label.  Untrusted positives allow ``O`` plus the labels sharing the
    kept part; without a calibration they allow every label.
    """
    mask = np.zeros((length, len(tagset)), dtype=bool)
    seen = np.zeros(length, dtype=bool)
    for r in records:
        mask[r.token_index, allowed_labels(r, tagset)] = True
        seen[r.token_index] = True
    if not seen.all():
        raise ValueError(f"tokens without a verdict: {np.flatnonzero(~seen).tolist()}")
    return mask
