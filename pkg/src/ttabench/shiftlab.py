"""Synthetic domains with controllable shift, label noise, imbalance and ordering."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .numcore import make_rng


@dataclass(frozen=True)
class DomainSpec:
    name: str
    means: np.ndarray  # (C, d)
    cov_scale: float = 1.0
    label_noise: float = 0.0

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        object.__setattr__(self, "means", means)
        if means.ndim != 2:
            raise ValueError("class means must be a C x d matrix")
        if not 0 <= self.label_noise < 1:
            raise ValueError("label noise must be in [0, 1)")
        if self.cov_scale <= 0:
            raise ValueError("covariance scale must be positive")
        C = means.shape[0]
        for i in range(C):
            for j in range(i + 1, C):
                if np.array_equal(means[i], means[j]):
                    raise ValueError("class means must be pairwise distinct")

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def __eq__(self, other):
        return (isinstance(other, DomainSpec) and self.name == other.name
                and np.array_equal(self.means, other.means)
                and self.cov_scale == other.cov_scale and self.label_noise == other.label_noise)

    def __hash__(self):
        return hash((self.name, self.means.tobytes(), self.cov_scale, self.label_noise))


def random_domain(name: str, n_classes: int = 7, dim: int = 16, separation: float = 2.0,
                  cov_scale: float = 1.0, label_noise: float = 0.0, seed: int = 0) -> DomainSpec:
    """Class means drawn as N(0, separation^2 / 2) per coordinate.

    Expected distance between two means is then about ``separation * sqrt(dim)``.
    """
    rng = make_rng(seed, 0xD0)
    means = rng.normal(0.0, separation / np.sqrt(2.0), size=(n_classes, dim))
    return DomainSpec(name, means, cov_scale, label_noise)


@dataclass(frozen=True)
class ShiftTransform:
    offset: np.ndarray  # (d,)
    angle: float = 0.0  # rotation angle in the plane of the first two axes of ``plane``
    scale: float = 1.0
    plane: tuple = (0, 1)

    def __post_init__(self):
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.float64))
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @classmethod
    def from_magnitude(cls, dim: int, magnitude: float, angle: float = 0.0, scale: float = 1.0,
                       seed: int = 0) -> "ShiftTransform":
        """Offset of the given length along a seed-determined random direction."""
        direction = make_rng(seed, 0x5F).normal(size=dim)
        direction /= np.linalg.norm(direction)
        return cls(magnitude * direction, angle, scale)

    def rotation(self, dim: int) -> np.ndarray:
        R = np.eye(dim)
        if self.angle != 0.0:
            i, j = self.plane
            c, s = np.cos(self.angle), np.sin(self.angle)
            R[i, i], R[i, j], R[j, i], R[j, j] = c, -s, s, c
        return R

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X @ self.rotation(X.shape[1]).T * self.scale + self.offset


def derive_target(source: DomainSpec, t: ShiftTransform, label_noise: float,
                  name: str | None = None) -> DomainSpec:
    if t.offset.shape != (source.dim,):
        raise ValueError("shift offset width must match the domain dimension")
    is_identity = t.angle == 0.0 and t.scale == 1.0 and not np.any(t.offset)
    means = source.means if is_identity else t.apply(source.means)
    # covariance is isotropic, so it only follows the scale factor
    return DomainSpec(name or source.name, means, source.cov_scale * t.scale ** 2, label_noise)


@dataclass
class LabeledBatch:
    X: np.ndarray
    y: np.ndarray  # observed (possibly corrupted) labels
    y_true: np.ndarray
    domain: str = ""

    def __len__(self):
        return len(self.y)

    def take(self, idx) -> "LabeledBatch":
        return LabeledBatch(self.X[idx], self.y[idx], self.y_true[idx], self.domain)

    @staticmethod
    def concat(parts: list["LabeledBatch"], domain: str | None = None) -> "LabeledBatch":
        return LabeledBatch(np.concatenate([p.X for p in parts]),
                            np.concatenate([p.y for p in parts]),
                            np.concatenate([p.y_true for p in parts]),
                            domain if domain is not None else "+".join(p.domain for p in parts))


def corrupt_labels(y: np.ndarray, n_classes: int, rate: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Replace each label w.p. ``rate`` by a uniformly drawn *different* label."""
    y = np.asarray(y)
    flip = rng.random(len(y)) < rate
    shift = rng.integers(1, n_classes, size=len(y))
    return np.where(flip, (y + shift) % n_classes, y)


def sample_domain(spec: DomainSpec, n: int, rng: np.random.Generator,
                  class_weights=None) -> LabeledBatch:
    if n < 1:
        raise ValueError("need at least one sample")
    C = spec.n_classes
    p = np.full(C, 1.0 / C) if class_weights is None else _check_weights(class_weights, C)
    y_true = rng.choice(C, size=n, p=p)
    X = spec.means[y_true] + np.sqrt(spec.cov_scale) * rng.normal(size=(n, spec.dim))
    y = corrupt_labels(y_true, C, spec.label_noise, rng) if spec.label_noise > 0 else y_true.copy()
    return LabeledBatch(X, y, y_true, spec.name)


def _check_weights(w, C):
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (C,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("class weights must be C nonnegative reals summing to 1")
    return w


@dataclass(frozen=True)
class StreamSpec:
    order: str = "iid"  # "iid" | "correlated"
    run_length: int = 100
    class_weights: tuple | None = None  # None = as sampled
    length: int | None = None  # None = whole domain batch
    batch_size: int = 16

    def __post_init__(self):
        if self.order not in ("iid", "correlated"):
            raise ValueError(f"unknown stream order {self.order!r}")
        if self.run_length < 1 or self.batch_size < 1:
            raise ValueError("run length and batch size must be >= 1")
        if self.class_weights is not None and abs(sum(self.class_weights) - 1.0) > 1e-9:
            raise ValueError("class weights must sum to 1")


def stream_order(data: LabeledBatch, spec: StreamSpec, rng: np.random.Generator) -> np.ndarray:
    """Index order of the stream (before batching)."""
    n = len(data)
    if n == 0:
        raise ValueError("cannot stream an empty domain batch")
    length = spec.length or n
    labels = data.y_true
    if spec.class_weights is None:
        pool = rng.permutation(n)
        if length > n:
            pool = np.concatenate([pool, rng.choice(n, size=length - n)])
        idx = pool[:length]
    else:
        C = len(spec.class_weights)
        counts = rng.multinomial(length, _check_weights(spec.class_weights, C))
        picks = []
        for c in range(C):
            members = rng.permutation(np.flatnonzero(labels == c))
            if counts[c] == 0:
                continue
            if len(members) == 0:
                raise ValueError(f"class {c} has weight but no samples")
            if counts[c] > len(members):
                members = np.concatenate([members, rng.choice(members, counts[c] - len(members))])
            picks.append(members[:counts[c]])
        idx = rng.permutation(np.concatenate(picks))
    if spec.order == "iid":
        return idx
    return _correlated(idx, labels, spec.run_length, rng)


def _correlated(idx, labels, run_length, rng):
    queues = {}
    for i in idx:
        queues.setdefault(int(labels[i]), []).append(i)
    out = []
    last = None
    while queues:
        choices = sorted(queues)
        if last in choices and len(choices) > 1:
            choices.remove(last)
        c = choices[rng.integers(len(choices))]
        q = queues[c]
        out.extend(q[:run_length])
        del q[:run_length]
        if not q:
            del queues[c]
        last = c
    return np.asarray(out, dtype=np.int64)


def make_stream(data: LabeledBatch, spec: StreamSpec, rng: np.random.Generator) -> list[LabeledBatch]:
    order = stream_order(data, spec, rng)
    b = spec.batch_size
    return [data.take(order[i:i + b]) for i in range(0, len(order), b)]


# --- dataset files ----------------------------------------------------------


def to_csv(data: LabeledBatch) -> str:
    d = data.X.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"f{j}" for j in range(d)] + ["observed_label", "true_label", "domain"])
    for x, y, yt in zip(data.X, data.y, data.y_true):
        w.writerow([repr(float(v)) for v in x] + [int(y), int(yt), data.domain])
    return buf.getvalue()


def write_csv(data: LabeledBatch, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(to_csv(data))


def read_csv(path) -> LabeledBatch:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty dataset file")
    header = rows[0]
    if header[-3:] != ["observed_label", "true_label", "domain"]:
        raise ValueError(f"{path}: unexpected header")
    d = len(header) - 3
    body = rows[1:]
    X = np.array([[float(v) for v in r[:d]] for r in body], dtype=np.float64).reshape(len(body), d)
    y = np.array([int(r[d]) for r in body], dtype=np.int64)
    yt = np.array([int(r[d + 1]) for r in body], dtype=np.int64)
    domain = body[0][d + 2] if body else ""
    return LabeledBatch(X, y, yt, domain)


__all__ = [
    "DomainSpec", "ShiftTransform", "StreamSpec", "LabeledBatch", "random_domain",
    "derive_target", "sample_domain", "corrupt_labels", "make_stream", "stream_order",
    "to_csv", "write_csv", "read_csv",
]
