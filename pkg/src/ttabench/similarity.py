"""RBF-kernel MMD between feature sets and the similarity score S = exp(-MMD)."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels_py as _k_rbf
from .numcore import make_rng

# numpy's BLAS distances and vectorized exp beat the compiled double loop for
# the kernel sum at every width above ~2 (benchmarks/bench_kernels.py), so only
# the pairwise-distance kernel is taken from the compiled module.
if os.environ.get("TTABENCH_PURE_PYTHON"):
    from . import _kernels_py as _k
    BACKEND = "python"
else:
    try:
        from . import _kernels as _k
        BACKEND = "cython"
    except ImportError:  # extension not built
        from . import _kernels_py as _k
        BACKEND = "python"


@dataclass(frozen=True)
class MmdConfig:
    bandwidth: str | float = "median"  # "median" or a fixed sigma
    estimator: str = "biased"  # "biased" | "unbiased"
    max_samples: int = 2000
    seed: int = 0  # subsampling stream

    def __post_init__(self):
        if self.bandwidth != "median":
            if not isinstance(self.bandwidth, (int, float)) or self.bandwidth <= 0:
                raise ValueError("fixed bandwidth sigma must be a positive number")
        if self.estimator not in ("biased", "unbiased"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.max_samples < 2:
            raise ValueError("max_samples must be >= 2")


@dataclass(frozen=True)
class SimilarityResult:
    mmd: float
    mmd2_raw: float
    S: float
    bandwidth: float
    m: int
    n: int
    estimator: str

    def to_dict(self) -> dict:
        return asdict(self)


def _check(X, Y):
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ValueError("feature sets must be 2-D with equal width")
    if X.shape[0] < 2 or Y.shape[0] < 2:
        raise ValueError("need at least two samples per side")
    return X, Y


def _subsample(X, k, rng):
    if X.shape[0] <= k:
        return X
    return np.ascontiguousarray(X[np.sort(rng.choice(X.shape[0], size=k, replace=False))])


def median_bandwidth(X, Y=None, max_samples: int = 2000, seed: int = 0) -> float:
    """sigma^2 = median squared pairwise distance over the pooled sample.

    Returns sigma (not sigma^2); the kernel is exp(-|a-b|^2 / (2 sigma^2)).
    """
    # each side is subsampled on its own so the pooled multiset is symmetric in (X, Y)
    sides = [X] if Y is None else [X, Y]
    k = max(2, max_samples // len(sides))
    Z = np.vstack([_subsample(np.ascontiguousarray(S, dtype=np.float64), k,
                              make_rng(seed, 0xBA, len(S))) for S in sides])
    if Z.shape[0] < 2:
        raise ValueError("need at least two points for the median heuristic")
    med = float(np.median(_k.pairwise_sq_dists_upper(Z)))
    if med <= 0:
        raise ValueError("median pairwise distance is zero: bandwidth undefined")
    return float(np.sqrt(med))


def kernel_mean(X, Y, sigma: float, exclude_diagonal: bool = False) -> float:
    gamma = 1.0 / (2.0 * sigma * sigma)
    total = _k_rbf.rbf_kernel_sum(X, Y, gamma, exclude_diagonal)
    count = X.shape[0] * Y.shape[0] - (min(X.shape[0], Y.shape[0]) if exclude_diagonal else 0)
    return total / count


def mmd_squared(X, Y, cfg: MmdConfig = MmdConfig(), sigma: float | None = None) -> float:
    X, Y = _check(X, Y)
    if sigma is None:
        sigma = _sigma(X, Y, cfg)
    unbiased = cfg.estimator == "unbiased"
    # the within-set terms go through the same cross routine, so X == Y gives exactly 0
    kxx = kernel_mean(X, X, sigma, unbiased)
    kyy = kernel_mean(Y, Y, sigma, unbiased)
    # canonical argument order keeps the cross term bit-symmetric under swapping
    A, B = (X, Y) if X.tobytes() <= Y.tobytes() else (Y, X)
    kxy = kernel_mean(A, B, sigma)
    return kxx + kyy - 2.0 * kxy


def _sigma(X, Y, cfg):
    if cfg.bandwidth == "median":
        return median_bandwidth(X, Y, cfg.max_samples, cfg.seed)
    return float(cfg.bandwidth)


def similarity_score(X, Y, cfg: MmdConfig = MmdConfig()) -> SimilarityResult:
    X, Y = _check(X, Y)
    X = _subsample(X, cfg.max_samples, make_rng(cfg.seed, 0x55, X.shape[0]))
    Y = _subsample(Y, cfg.max_samples, make_rng(cfg.seed, 0x55, Y.shape[0]))
    sigma = _sigma(X, Y, cfg)
    raw = mmd_squared(X, Y, cfg, sigma)
    mmd = float(np.sqrt(max(raw, 0.0)))
    return SimilarityResult(mmd, raw, float(np.exp(-mmd)), sigma, X.shape[0], Y.shape[0],
                            cfg.estimator)
