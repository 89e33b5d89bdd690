"""Pure numpy versions of the compiled kernels (same signatures)."""
import numpy as np

_CHUNK = 512


def _sq_dists(A, B):
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def rbf_kernel_sum(X, Y, gamma, exclude_diagonal=False):
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if X.shape[1] != Y.shape[1]:
        raise ValueError("feature widths differ")
    total = 0.0
    for s in range(0, X.shape[0], _CHUNK):
        K = np.exp(-gamma * _sq_dists(X[s:s + _CHUNK], Y))
        if exclude_diagonal:
            rows = np.arange(s, min(s + _CHUNK, X.shape[0]))
            keep = rows < Y.shape[0]
            K[np.flatnonzero(keep), rows[keep]] = 0.0
        for r in K.sum(axis=1):
            total += r
    return float(total)


def pairwise_sq_dists_upper(Z):
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    iu = np.triu_indices(Z.shape[0], k=1)
    diff = Z[iu[0]] - Z[iu[1]]
    return np.einsum("ij,ij->i", diff, diff)
