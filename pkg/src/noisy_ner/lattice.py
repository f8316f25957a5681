"""Exact linear-chain CRF inference in log space.

A :class:`Lattice` pairs an ``(n, L)`` emission table with an
``(L + 2, L + 2)`` transition table whose last two rows/columns are the
virtual BOS and EOS states.  The score of a path ``y`` is::

    T[BOS, y0] + sum_i em[i, yi] + sum_i T[y(i-1), yi] + T[y(n-1), EOS]

Constraint masks are boolean ``(n, L)`` arrays; ``mask[i, k]`` says label
``k`` is allowed at token ``i``.  Masked-out cells are treated as ``-inf``
emissions, so the constrained forward pass sums over exactly the compatible
paths.

The inner recursions live in a compiled extension when available and fall
back to numpy otherwise; set ``NOISY_NER_BACKEND=python`` to force the
fallback.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from noisy_ner import _kernels_py


def _load_backend(name: Optional[str] = None):
    name = name or os.environ.get("NOISY_NER_BACKEND", "auto")
    if name == "python":
        return _kernels_py
    try:
        from noisy_ner import _kernels
    except ImportError:
        if name == "cython":
            raise
        return _kernels_py
    return _kernels


kernels = _load_backend()


def use_backend(name: str):
    """Switch kernels at runtime (``"cython"``, ``"python"`` or ``"auto"``); returns the module."""
    global kernels
    kernels = _load_backend(name)
    return kernels


def available_backends() -> list[str]:
    out = ["python"]
    try:
        from noisy_ner import _kernels  # noqa: F401
    except ImportError:
        pass
    else:
        out.insert(0, "cython")
    return out


class EmptyColumnError(ValueError):
    """A token has no allowed label (or no reachable one) after masking."""


BOS_OFFSET = 0
EOS_OFFSET = 1


def zero_transitions(num_labels: int) -> np.ndarray:
    return np.zeros((num_labels + 2, num_labels + 2))


def bio_transition_mask(tagset) -> np.ndarray:
    """``-inf`` at structurally invalid BIO2 transitions, 0 elsewhere.

    Forbidden: BOS -> I-X, and any Y -> I-X unless Y is B-X or I-X.
    """
    L = len(tagset)
    out = np.zeros((L + 2, L + 2))
    for k in range(1, L):
        pos, etype = tagset.split(k)
        if pos != "I":
            continue
        out[L, k] = -np.inf
        for j in range(L):
            if tagset.type_of(j) != etype:
                out[j, k] = -np.inf
    return out


@dataclass
class Lattice:
    emissions: np.ndarray
    transitions: np.ndarray

    def __post_init__(self):
        self.emissions = np.ascontiguousarray(self.emissions, dtype=np.float64)
        self.transitions = np.ascontiguousarray(self.transitions, dtype=np.float64)
        if self.emissions.ndim != 2 or self.emissions.shape[0] < 1:
            raise ValueError(f"emissions must be (n >= 1, L), got {self.emissions.shape}")
        L = self.emissions.shape[1]
        if self.transitions.shape != (L + 2, L + 2):
            raise ValueError(
                f"transitions must be {(L + 2, L + 2)} for {L} labels, got {self.transitions.shape}"
            )

    @property
    def n(self) -> int:
        return self.emissions.shape[0]

    @property
    def num_labels(self) -> int:
        return self.emissions.shape[1]

    def masked_emissions(self, mask: Optional[np.ndarray]) -> np.ndarray:
        if mask is None:
            return self.emissions
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self.emissions.shape:
            raise ValueError(f"mask shape {mask.shape} != lattice shape {self.emissions.shape}")
        empty = np.flatnonzero(~mask.any(axis=1))
        if empty.size:
            raise EmptyColumnError(f"empty lattice column at token {int(empty[0])}")
        return np.where(mask, self.emissions, -np.inf)


@dataclass
class ForwardBackwardTables:
    log_alpha: np.ndarray
    log_beta: np.ndarray
    log_z: float
    emissions: np.ndarray
    transitions: np.ndarray


def forward_backward(lattice: Lattice, mask: Optional[np.ndarray] = None) -> ForwardBackwardTables:
    em = lattice.masked_emissions(mask)
    alpha, log_z = kernels.forward(em, lattice.transitions)
    if log_z == -np.inf:
        dead = np.flatnonzero(~np.isfinite(alpha).any(axis=1))
        where = int(dead[0]) if dead.size else lattice.n - 1
        raise EmptyColumnError(f"empty lattice column at token {where}")
    beta = kernels.backward(em, lattice.transitions)
    return ForwardBackwardTables(alpha, beta, float(log_z), em, lattice.transitions)


def log_partition(lattice: Lattice, mask: Optional[np.ndarray] = None) -> float:
    em = lattice.masked_emissions(mask)
    _, log_z = kernels.forward(em, lattice.transitions)
    if log_z == -np.inf:
        raise EmptyColumnError("empty lattice column: no path survives the mask")
    return float(log_z)


def marginals(tables: ForwardBackwardTables) -> np.ndarray:
    """Per-token label marginals ``exp(alpha + beta - log Z)``."""
    return np.exp(tables.log_alpha + tables.log_beta - tables.log_z)


def path_score(lattice: Lattice, tags: Sequence[int]) -> float:
    tags = np.asarray(tags, dtype=np.int64)
    if tags.shape != (lattice.n,):
        raise ValueError(f"need {lattice.n} tags, got {tags.shape}")
    L = lattice.num_labels
    T = lattice.transitions
    s = T[L, tags[0]] + T[tags[-1], L + 1]
    s += lattice.emissions[np.arange(lattice.n), tags].sum()
    s += T[tags[:-1], tags[1:]].sum()
    return float(s)


def sequence_log_prob(lattice: Lattice, tags: Sequence[int]) -> float:
    """``log p(tags | x)``: path score minus the log partition function."""
    return path_score(lattice, tags) - log_partition(lattice)


def constrained_log_marginal(lattice: Lattice, mask: np.ndarray) -> float:
    """Log of the total probability of all paths compatible with ``mask``."""
    return min(log_partition(lattice, mask) - log_partition(lattice), 0.0)


def viterbi(lattice: Lattice) -> tuple[np.ndarray, float]:
    """Best path and its score; ties go to the lower label id."""
    path, score = kernels.viterbi(lattice.emissions, lattice.transitions)
    return path, float(score)


def expected_counts(tables: ForwardBackwardTables) -> tuple[np.ndarray, np.ndarray]:
    """Expected emission-cell and transition indicator counts under ``tables``."""
    em_exp = marginals(tables)
    tr_exp = kernels.transition_expectations(
        tables.emissions, tables.transitions, tables.log_alpha, tables.log_beta, tables.log_z
    )
    return em_exp, tr_exp


def partial_marginal_gradients(
    lattice: Lattice, mask: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`constrained_log_marginal` w.r.t. emissions and transitions.

    Constrained expectation minus unconstrained expectation of each cell's
    indicator.  Returned as dense tables shaped like the lattice's own.
    """
    _, em_grad, tr_grad = partial_marginal_objective(lattice, mask)
    return em_grad, tr_grad


def partial_marginal_objective(
    lattice: Lattice, mask: Optional[np.ndarray]
) -> tuple[float, np.ndarray, np.ndarray]:
    """``log p~`` with its emission and transition gradients in one pass.

    ``mask=None`` means every label is allowed everywhere, which makes the
    objective identically zero.
    """
    if mask is None:
        return 0.0, np.zeros_like(lattice.emissions), np.zeros_like(lattice.transitions)
    free = forward_backward(lattice)
    clamped = forward_backward(lattice, mask)
    em_c, tr_c = expected_counts(clamped)
    em_u, tr_u = expected_counts(free)
    return min(clamped.log_z - free.log_z, 0.0), em_c - em_u, tr_c - tr_u


def full_mask(n: int, num_labels: int) -> np.ndarray:
    return np.ones((n, num_labels), dtype=bool)


def singleton_mask(tags: Sequence[int], num_labels: int) -> np.ndarray:
    tags = np.asarray(tags, dtype=np.int64)
    m = np.zeros((len(tags), num_labels), dtype=bool)
    m[np.arange(len(tags)), tags] = True
    return m
