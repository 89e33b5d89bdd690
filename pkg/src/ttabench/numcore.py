"""Numeric primitives shared by every other module.

All arrays are float64, row = sample. Logarithms are natural.
"""
from __future__ import annotations

from typing import Iterable

import numpy as np

Matrix = np.ndarray


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed`` and an optional path of child keys.

    ``make_rng(s, 1, 2)`` is always the same stream and is independent of
    ``make_rng(s, 1, 3)``, so runs can derive sub-streams without sharing state.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def softmax(logits: Matrix) -> Matrix:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax: non-finite logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _xlogx(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def entropy(probs: Matrix) -> np.ndarray:
    """Per-row Shannon entropy with 0 ln 0 = 0."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6) or np.any(probs < 0):
        raise ValueError("entropy: rows must be probability vectors")
    return -_xlogx(probs).sum(axis=1)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.ravel(a).astype(np.float64)
    b = np.ravel(b).astype(np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine: zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_rows(P: Matrix, q: np.ndarray) -> np.ndarray:
    """Cosine similarity of every row of ``P`` with ``q``."""
    nq = np.linalg.norm(q)
    nP = np.linalg.norm(P, axis=1)
    if nq == 0 or np.any(nP == 0):
        raise ValueError("cosine: zero vector")
    return np.clip(P @ q / (nP * nq), -1.0, 1.0)


def l2_normalize(X: Matrix, eps: float = 1e-12) -> Matrix:
    n = np.linalg.norm(X, axis=-1, keepdims=True)
    return X / np.maximum(n, eps)


def argmax(probs: Matrix) -> np.ndarray:
    # np.argmax returns the first maximal index: ties go to the lowest class
    return np.argmax(probs, axis=1)


# --- loss heads -------------------------------------------------------------
#
# Each returns (value, dL/dlogits). The model's tape turns dL/dlogits into
# parameter gradients, so these are the only places loss calculus lives.


def softmax_backward(probs: Matrix, g_probs: Matrix) -> Matrix:
    """Pull a gradient w.r.t. softmax outputs back to the logits."""
    return probs * (g_probs - np.sum(g_probs * probs, axis=1, keepdims=True))


def entropy_loss(probs: Matrix, weights: np.ndarray | None = None) -> tuple[float, Matrix]:
    """Weighted mean entropy. ``weights`` default to 1/B for every row."""
    B = probs.shape[0]
    if weights is None:
        weights = np.full(B, 1.0 / B)
    H = entropy(probs)
    logp = np.log(np.maximum(probs, 1e-300))
    # dH_i/dz_ij = -p_ij (ln p_ij + H_i)
    dz = -probs * (logp + H[:, None])
    return float(weights @ H), weights[:, None] * dz


def masked_mean_weights(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return np.zeros(mask.shape[0])
    return mask.astype(np.float64) / n


def cross_entropy_loss(probs: Matrix, targets: Matrix,
                       weights: np.ndarray | None = None) -> tuple[float, Matrix]:
    """Soft-target cross entropy, -sum_c q_c ln p_c, weighted over rows.

    ``targets`` are rows of a probability matrix (one-hot for hard labels).
    """
    B = probs.shape[0]
    if weights is None:
        weights = np.full(B, 1.0 / B)
    logp = np.log(np.maximum(probs, 1e-300))
    per_row = -np.sum(targets * logp, axis=1)
    mass = targets.sum(axis=1, keepdims=True)
    dz = probs * mass - targets
    return float(weights @ per_row), weights[:, None] * dz


def information_maximization_loss(probs: Matrix) -> tuple[float, Matrix]:
    """mean_i H(p_i) - H(mean_i p_i)."""
    B = probs.shape[0]
    h_mean, dz_cond = entropy_loss(probs)
    pbar = probs.mean(axis=0)
    h_marg = float(-_xlogx(pbar).sum())
    # dH(pbar)/dp_ij = -(ln pbar_j + 1)/B; the loss subtracts it
    g_probs = np.broadcast_to((np.log(np.maximum(pbar, 1e-300)) + 1.0) / B, probs.shape)
    return h_mean - h_marg, dz_cond + softmax_backward(probs, g_probs)


def one_hot(labels: Iterable[int], n_classes: int) -> Matrix:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


# --- reverse-mode tape ------------------------------------------------------


class GradTape:
    """Records backward closures of one forward pass, replayed in reverse.

    Each closure receives the upstream gradient and a dict of parameter
    gradients to accumulate into, and returns the gradient for its input.
    """

    def __init__(self):
        self._ops = []
        self.slots: set[str] = set()

    def record(self, backward, slots=()):
        self._ops.append(backward)
        self.slots.update(slots)

    def backward(self, g_out: Matrix) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        g = g_out
        for op in reversed(self._ops):
            g = op(g, grads)
        return grads


def grad(tape: GradTape, dlogits: Matrix, wrt: Iterable[str]) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss w.r.t. the named parameter slots.

    The loss enters through ``dlogits``, its gradient with respect to the
    logits the tape produced (the second element of every ``*_loss`` helper).
    """
    wrt = list(wrt)
    missing = [w for w in wrt if w not in tape.slots]
    if missing:
        raise KeyError(f"slots not on tape: {missing}")
    grads = tape.backward(dlogits)
    return {w: grads[w] for w in wrt}
