"""Pure numpy lattice kernels.

Same signatures and semantics as the compiled ``_kernels`` extension; used
when the extension is not built or ``NOISY_NER_BACKEND=python`` is set.

Conventions shared by both backends:

* ``em`` is an ``(n, L)`` float64 array of emission log-scores; disallowed
  cells are ``-inf``.
* ``trans`` is ``(L + 2, L + 2)``; row/column ``L`` is BOS, ``L + 1`` is EOS.
"""

import numpy as np

NAME = "python"


def _lse(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - safe), axis=axis, keepdims=True)) + safe
    return np.squeeze(out, axis=axis)


def forward(em, trans):
    n, L = em.shape
    tt = trans[:L, :L]
    alpha = np.empty((n, L))
    alpha[0] = trans[L, :L] + em[0]
    for i in range(1, n):
        alpha[i] = em[i] + _lse(alpha[i - 1][:, None] + tt, axis=0)
    log_z = float(_lse(alpha[n - 1] + trans[:L, L + 1], axis=0))
    return alpha, log_z


def backward(em, trans):
    n, L = em.shape
    tt = trans[:L, :L]
    beta = np.empty((n, L))
    beta[n - 1] = trans[:L, L + 1]
    for i in range(n - 2, -1, -1):
        beta[i] = _lse(tt + (em[i + 1] + beta[i + 1])[None, :], axis=1)
    return beta


def transition_expectations(em, trans, alpha, beta, log_z):
    n, L = em.shape
    out = np.zeros_like(trans)
    tt = trans[:L, :L]
    with np.errstate(invalid="ignore"):
        out[L, :L] = np.exp(alpha[0] + beta[0] - log_z)
        out[:L, L + 1] = np.exp(alpha[n - 1] + beta[n - 1] - log_z)
        for i in range(1, n):
            x = alpha[i - 1][:, None] + tt + (em[i] + beta[i])[None, :] - log_z
            out[:L, :L] += np.exp(x)
    return np.nan_to_num(out, nan=0.0)


def viterbi(em, trans):
    n, L = em.shape
    tt = trans[:L, :L]
    back = np.zeros((n, L), dtype=np.int64)
    delta = trans[L, :L] + em[0]
    for i in range(1, n):
        cand = delta[:, None] + tt
        back[i] = np.argmax(cand, axis=0)
        delta = cand[back[i], np.arange(L)] + em[i]
    final = delta + trans[:L, L + 1]
    path = np.empty(n, dtype=np.int64)
    path[n - 1] = int(np.argmax(final))
    score = float(final[path[n - 1]])
    for i in range(n - 1, 0, -1):
        path[i - 1] = back[i, path[i]]
    return path, score
