"""NumPy implementations of the selection kernels.

These are the reference versions; the compiled module in ``_ckernels.pyx``
must agree with them (see ``tests/test_kernels.py``).
"""

from __future__ import annotations

import numpy as np


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity between rows of ``a`` and rows of ``b``.

    A row with zero norm has similarity 0 with everything.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    na = np.sqrt(np.einsum("ij,ij->i", a, a))
    nb = np.sqrt(np.einsum("ij,ij->i", b, b))
    dots = a @ b.T
    denom = np.outer(na, nb)
    out = np.zeros_like(dots)
    np.divide(dots, denom, out=out, where=denom > 0.0)
    return np.clip(out, -1.0, 1.0, out=out)


def score_matrix(
    features: np.ndarray,
    old_protos: np.ndarray,
    new_protos: np.ndarray,
    beta: float,
    gamma: float,
) -> np.ndarray:
    """Placebo scores ``S[x, m]`` for every candidate row and old class.

    Lower is better: close to the class-``m`` prototype, far from the other
    old prototypes (weighted by ``beta``) and the new ones (``gamma``).
    """
    c_old = old_protos.shape[0]
    sim_old = cosine_matrix(features, old_protos)
    scores = -sim_old
    if c_old > 1 and beta != 0.0:
        others = (sim_old.sum(axis=1, keepdims=True) - sim_old) / (c_old - 1)
        scores = scores + beta * others
    if new_protos.shape[0] > 0 and gamma != 0.0:
        sim_new = cosine_matrix(features, new_protos).mean(axis=1, keepdims=True)
        scores = scores + gamma * sim_new
    return scores


def greedy_select(scores: np.ndarray, k: int, ids: np.ndarray) -> np.ndarray:
    """Pick ``k`` rows per column, lowest score first, without replacement.

    Columns are processed in ascending order; ties go to the smaller id.
    Returns an int64 array of shape ``(n_columns, k)`` holding row indices.
    """
    n, c = scores.shape
    if n < c * k:
        raise ValueError(f"need {c * k} candidates, have {n}")
    taken = np.zeros(n, dtype=bool)
    out = np.empty((c, k), dtype=np.int64)
    for m in range(c):
        free = np.flatnonzero(~taken)
        order = np.lexsort((ids[free], scores[free, m]))
        chosen = free[order[:k]]
        out[m] = chosen
        taken[chosen] = True
    return out


def herding_order(features: np.ndarray, k: int) -> np.ndarray:
    """Greedy herding: each step adds the row that keeps the running mean
    of the selection closest to the full mean. Ties go to the lower index.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    k = min(k, n)
    target = features.mean(axis=0)
    running = np.zeros_like(target)
    taken = np.zeros(n, dtype=bool)
    out = np.empty(k, dtype=np.int64)
    for t in range(k):
        cand = (running + features) / (t + 1)
        dist = np.einsum("ij,ij->i", cand - target, cand - target)
        dist[taken] = np.inf
        i = int(np.argmin(dist))
        out[t] = i
        taken[i] = True
        running += features[i]
    return out
