"""Per-token emission scores from sparse hand-crafted features.

The default scorer is linear: ``scores[i] = features(i) @ weights``.  Any
object satisfying :class:`EmissionScorer` can stand in for it; the lattice
and confidence code only ever see the resulting ``(n, L)`` score table.
"""

from __future__ import annotations

from typing import Iterable, Mapping, Optional, Protocol, Sequence, Union

import numpy as np
from scipy import sparse

from noisy_ner.corpus import Corpus, Sentence, TagSet

BOS_WORD = "<BOS>"
EOS_WORD = "<EOS>"


def word_shape(word: str) -> str:
    out = []
    for ch in word:
        if ch.isupper():
            out.append("X")
        elif ch.islower():
            out.append("x")
        elif ch.isdigit():
            out.append("d")
        else:
            out.append(ch)
    return "".join(out)


def _words(sentence: Union[Sentence, Sequence[str]]) -> Sequence[str]:
    return sentence.words if isinstance(sentence, Sentence) else sentence


def featurize(sentence: Union[Sentence, Sequence[str]], i: int) -> dict[str, float]:
    """Named features of token ``i``.  Pure and deterministic."""
    words = _words(sentence)
    if not 0 <= i < len(words):
        raise IndexError(f"token {i} out of range for length {len(words)}")
    w = words[i]
    low = w.lower()
    feats = {
        "bias": 1.0,
        f"word={low}": 1.0,
        f"shape={word_shape(w)}": 1.0,
        f"prev={words[i - 1].lower() if i > 0 else BOS_WORD}": 1.0,
        f"next={words[i + 1].lower() if i + 1 < len(words) else EOS_WORD}": 1.0,
    }
    for k in range(1, 4):
        if len(low) >= k:
            feats[f"prefix{k}={low[:k]}"] = 1.0
            feats[f"suffix{k}={low[-k:]}"] = 1.0
    if w[:1].isupper():
        feats["cap=true"] = 1.0
    if w.isupper():
        feats["allcaps=true"] = 1.0
    if any(ch.isdigit() for ch in w):
        feats["digit=true"] = 1.0
    return feats


class FeatureDictionary:
    """Interns feature names; once frozen, unknown names are dropped."""

    def __init__(self, names: Iterable[str] = ()):
        self._index: dict[str, int] = {}
        self.frozen = False
        for name in names:
            self.add(name)

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def add(self, name: str) -> Optional[int]:
        idx = self._index.get(name)
        if idx is None and not self.frozen:
            idx = self._index[name] = len(self._index)
        return idx

    def get(self, name: str) -> Optional[int]:
        return self._index.get(name)

    def freeze(self) -> "FeatureDictionary":
        self.frozen = True
        return self

    @property
    def names(self) -> list[str]:
        return list(self._index)

    def vectorize(self, feats: Mapping[str, float]) -> tuple[np.ndarray, np.ndarray]:
        """Sparse ``(ids, values)``; ids are unique and unseen names contribute nothing."""
        lookup = self.get if self.frozen else self.add
        ids, vals = [], []
        for name, v in feats.items():
            idx = lookup(name)
            if idx is not None and v != 0.0:
                ids.append(idx)
                vals.append(float(v))
        return np.asarray(ids, dtype=np.int64), np.asarray(vals, dtype=np.float64)


def build_dictionary(corpus: Corpus) -> FeatureDictionary:
    d = FeatureDictionary()
    for sent in corpus:
        for i in range(len(sent)):
            for name in featurize(sent, i):
                d.add(name)
    return d.freeze()


def sentence_matrix(sentence, dictionary: FeatureDictionary) -> sparse.csr_matrix:
    """``(n, F)`` CSR feature matrix of one sentence."""
    words = _words(sentence)
    indptr = [0]
    ids, vals = [], []
    for i in range(len(words)):
        fi, fv = dictionary.vectorize(featurize(words, i))
        ids.append(fi)
        vals.append(fv)
        indptr.append(indptr[-1] + len(fi))
    return sparse.csr_matrix(
        (
            np.concatenate(vals) if vals else np.zeros(0),
            np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64),
            np.asarray(indptr),
        ),
        shape=(len(words), len(dictionary)),
    )


class CorpusFeatures:
    """Stacked feature matrix for a whole corpus, sliceable by sentence."""

    def __init__(self, corpus: Corpus, dictionary: FeatureDictionary):
        mats = [sentence_matrix(s, dictionary) for s in corpus]
        self.offsets = np.concatenate([[0], np.cumsum([m.shape[0] for m in mats])]).astype(np.int64)
        self.matrix = (
            sparse.vstack(mats, format="csr")
            if mats
            else sparse.csr_matrix((0, len(dictionary)))
        )

    def __len__(self) -> int:
        return len(self.offsets) - 1

    def rows(self, idx: int) -> slice:
        return slice(int(self.offsets[idx]), int(self.offsets[idx + 1]))

    def batch(self, indices: Sequence[int]) -> tuple[sparse.csr_matrix, list[slice]]:
        """Feature rows for several sentences plus each sentence's slice into them."""
        starts = self.offsets[np.asarray(indices, dtype=np.int64)]
        ends = self.offsets[np.asarray(indices, dtype=np.int64) + 1]
        rows = np.concatenate([np.arange(s, e) for s, e in zip(starts, ends)])
        out, pos = [], 0
        for s, e in zip(starts, ends):
            out.append(slice(pos, pos + int(e - s)))
            pos += int(e - s)
        return self.matrix[rows], out


class EmissionScorer(Protocol):
    tagset: TagSet

    def emit_scores(self, sentence) -> np.ndarray: ...


class EmissionModel:
    """Linear emission scorer ``features @ weights`` over a frozen dictionary."""

    def __init__(self, dictionary: FeatureDictionary, tagset: TagSet, weights=None):
        self.dictionary = dictionary
        self.tagset = tagset
        shape = (len(dictionary), len(tagset))
        if weights is None:
            weights = np.zeros(shape)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != shape:
            raise ValueError(f"weights shape {weights.shape} != {shape}")
        if not np.all(np.isfinite(weights)):
            raise ValueError("emission weights must be finite")
        self.weights = weights

    def features(self, sentence) -> sparse.csr_matrix:
        return sentence_matrix(sentence, self.dictionary)

    def emit_scores(self, sentence) -> np.ndarray:
        return emit_scores(self, sentence)


def emit_scores(model: EmissionModel, sentence) -> np.ndarray:
    """``(n, L)`` emission log-potentials of ``sentence``."""
    return np.asarray(model.features(sentence) @ model.weights)


def emit_gradient_accumulate(model: EmissionModel, sentence, grad_per_label, accumulator) -> None:
    """``accumulator[f, k] += value(f at i) * grad_per_label[i, k]`` over active features."""
    grad_per_label = np.asarray(grad_per_label, dtype=np.float64)
    X = model.features(sentence)
    if grad_per_label.shape != (X.shape[0], len(model.tagset)):
        raise ValueError(f"gradient shape {grad_per_label.shape} does not match sentence")
    accumulate_from_matrix(X, grad_per_label, accumulator)


def accumulate_from_matrix(X: sparse.csr_matrix, grad_per_label: np.ndarray, accumulator) -> None:
    if not X.nnz:
        return
    coo = X.tocoo()
    np.add.at(accumulator, coo.col, coo.data[:, None] * grad_per_label[coo.row])
