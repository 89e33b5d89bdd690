"""Streaming test-time adaptation policies.

Every adapter owns its model and exposes ``step(x) -> probs``: predict the
batch and (for adaptive methods) update internal state afterwards.
Gradient methods take one optimizer step per incoming batch (Adam by
default, plain SGD on request).
"""
from __future__ import annotations

import math

import numpy as np

from .model import Model
from .numcore import (
    cosine_rows,
    cross_entropy_loss,
    entropy,
    entropy_loss,
    grad,
    information_maximization_loss,
    l2_normalize,
    make_rng,
    masked_mean_weights,
    one_hot,
    softmax,
)


class AdapterFailure(RuntimeError):
    pass


class Adapter:
    name = "baseline"
    selector: str | None = None
    family = "none"

    def __init__(self, model: Model, lr: float = 1e-3, optimizer: str = "adam",
                 betas: tuple = (0.9, 0.999), predict_before_update: bool = True, seed: int = 0):
        if optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {optimizer!r}")
        self.model = model
        self.lr = lr
        self.optimizer = optimizer
        self.betas = tuple(betas)
        self._moments: dict = {}
        self.predict_before_update = predict_before_update
        self.rng = make_rng(seed, 0xADA)
        self.failed = False
        self.slots = model.param_group(self.selector) if self.selector else []
        self.n_updates = 0

    def prepare(self, source_val=None):
        """Hook run once before streaming (e.g. Fisher estimation)."""

    def step(self, x) -> np.ndarray:
        return self.model.predict_proba(x)

    # -- helpers ---------------------------------------------------------

    def _check(self, loss):
        if not np.isfinite(loss):
            self.failed = True
            raise AdapterFailure(f"{self.name}: non-finite loss")

    def _step(self, grads: dict):
        self.n_updates += 1
        params = self.model.params
        if self.optimizer == "sgd":
            for k, g in grads.items():
                params[k] = params[k] - self.lr * g
            return
        b1, b2 = self.betas
        t = self.n_updates
        for k, g in grads.items():
            m, v = self._moments.get(k, (0.0, 0.0))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self._moments[k] = (m, v)
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            params[k] = params[k] - self.lr * mhat / (np.sqrt(vhat) + 1e-8)

    def _train_mode_probs(self, x):
        _, logits, _ = self.model.forward(x, "train", update_stats=False, record=False)
        return softmax(logits)

    def _output(self, x, probs_before):
        if self.predict_before_update:
            return probs_before
        return self._train_mode_probs(x)


class Baseline(Adapter):
    """Source model, evaluation statistics, no state."""


# --- entropy minimization ---------------------------------------------------


def default_margin(n_classes: int) -> float:
    return 0.4 * math.log(n_classes)


class Tent(Adapter):
    name = "tent"
    selector = "norm_affine"
    family = "entropy"

    def __init__(self, model, e_margin: float | None = None, **kw):
        super().__init__(model, **kw)
        self.e_margin = e_margin

    def step(self, x):
        _, logits, tape = self.model.forward(x, "train")
        probs = softmax(logits)
        weights = None
        if self.e_margin is not None:
            mask = entropy(probs) < self.e_margin
            if not mask.any():
                return probs
            weights = masked_mean_weights(mask)
        loss, dz = entropy_loss(probs, weights)
        self._check(loss)
        self._step(grad(tape, dz, self.slots))
        return self._output(x, probs)


def compute_fisher(model: Model, X, y, slots, batch_size: int = 16) -> dict:
    """Diagonal empirical Fisher: mean over mini-batches of squared CE gradients."""
    fisher = {k: np.zeros_like(model.params[k]) for k in slots}
    n = 0
    for s in range(0, len(X), batch_size):
        xb, yb = X[s:s + batch_size], y[s:s + batch_size]
        _, logits, tape = model.forward(xb, "train", update_stats=False)
        _, dz = cross_entropy_loss(softmax(logits), one_hot(yb, model.n_classes))
        for k, g in grad(tape, dz, slots).items():
            fisher[k] += g * g
        n += 1
    return {k: v / max(n, 1) for k, v in fisher.items()}


class Eata(Adapter):
    """Entropy minimization on reliable, non-redundant samples with a Fisher anchor.

    ``redundancy="literal"`` admits samples with cos(p, p_bar) < d_margin;
    ``"similar"`` instead skips samples with cos(p, p_bar) >= 1 - d_margin;
    ``"off"`` disables the second filter.
    """

    name = "eata"
    selector = "norm_affine"
    family = "entropy"

    def __init__(self, model, e_margin: float | None = None, d_margin: float = 0.05,
                 redundancy: str = "literal", fisher_lambda: float = 1.0,
                 pbar_momentum: float = 0.9, **kw):
        super().__init__(model, **kw)
        if redundancy not in ("literal", "similar", "off"):
            raise ValueError(f"unknown redundancy mode {redundancy!r}")
        self.e_margin = default_margin(model.n_classes) if e_margin is None else e_margin
        self.d_margin = d_margin
        self.redundancy = redundancy
        self.fisher_lambda = fisher_lambda
        self.pbar_momentum = pbar_momentum
        self.pbar = None
        self.fisher = None
        self.anchor = {k: model.params[k].copy() for k in self.slots}

    def prepare(self, source_val=None):
        if source_val is not None and self.fisher_lambda > 0:
            X, y = source_val
            self.fisher = compute_fisher(self.model, X, y, self.slots)

    def admit(self, probs):
        mask = entropy(probs) < self.e_margin
        if self.pbar is not None and self.redundancy != "off":
            cos = cosine_rows(probs, self.pbar)
            if self.redundancy == "literal":
                mask &= cos < self.d_margin
            else:
                mask &= cos < 1.0 - self.d_margin
        return mask

    def step(self, x):
        _, logits, tape = self.model.forward(x, "train")
        probs = softmax(logits)
        mask = self.admit(probs)
        if not mask.any():
            return probs
        batch_mean = probs[mask].mean(axis=0)
        m = self.pbar_momentum
        self.pbar = batch_mean if self.pbar is None else m * self.pbar + (1 - m) * batch_mean
        loss, dz = entropy_loss(probs, masked_mean_weights(mask))
        self._check(loss)
        grads = grad(tape, dz, self.slots)
        if self.fisher_lambda > 0 and self.fisher is not None:
            for k in self.slots:
                grads[k] = grads[k] + 2.0 * self.fisher_lambda * self.fisher[k] * (
                    self.model.params[k] - self.anchor[k])
        self._step(grads)
        return self._output(x, probs)


class Sar(Adapter):
    """Entropy-filtered, sharpness-aware entropy minimization (first-order, two passes)."""

    name = "sar"
    selector = "norm_affine"
    family = "entropy"

    def __init__(self, model, rho: float = 0.05, e_margin: float | None = None, **kw):
        super().__init__(model, **kw)
        self.rho = rho
        self.e_margin = default_margin(model.n_classes) if e_margin is None else e_margin

    def step(self, x):
        _, logits, tape = self.model.forward(x, "train")
        probs = softmax(logits)
        mask = entropy(probs) < self.e_margin
        if not mask.any():
            return probs
        weights = masked_mean_weights(mask)
        loss, dz = entropy_loss(probs, weights)
        self._check(loss)
        g = grad(tape, dz, self.slots)
        norm = math.sqrt(sum(float(np.sum(v * v)) for v in g.values()))
        if self.rho > 0 and norm > 0:
            saved = {k: self.model.params[k] for k in self.slots}
            for k in self.slots:
                self.model.params[k] = saved[k] + self.rho * g[k] / norm
            _, logits2, tape2 = self.model.forward(x, "train", update_stats=False)
            loss2, dz2 = entropy_loss(softmax(logits2), weights)
            self._check(loss2)
            g = grad(tape2, dz2, self.slots)
            for k in self.slots:
                self.model.params[k] = saved[k]
        self._step(g)
        return self._output(x, probs)


# --- feature alignment ------------------------------------------------------


def shot_pseudo_labels(features, probs) -> np.ndarray:
    """Two-round centroid labelling on cosine distance.

    Round one weights every feature by its class probabilities; round two
    recomputes centroids from the hard labels of round one. Only classes the
    model itself predicts somewhere in the batch are candidate labels.
    """
    f = l2_normalize(np.hstack([features, np.ones((features.shape[0], 1))]))
    C = probs.shape[1]
    labelset = np.flatnonzero(np.bincount(np.argmax(probs, axis=1), minlength=C) > 0)
    w = probs.sum(axis=0)[:, None]
    centroids = probs.T @ f / np.maximum(w, 1e-12)
    labels = labelset[np.argmax(f @ l2_normalize(centroids[labelset]).T, axis=1)]
    hard = one_hot(labels, C)
    counts = hard.sum(axis=0)
    refined = hard.T @ f / np.maximum(counts, 1.0)[:, None]
    refined[counts == 0] = centroids[counts == 0]
    return labelset[np.argmax(f @ l2_normalize(refined[labelset]).T, axis=1)]


class Shot(Adapter):
    name = "shot"
    selector = "encoder"
    family = "feature_alignment"

    def __init__(self, model, beta: float = 0.3, **kw):
        super().__init__(model, **kw)
        self.beta = beta

    def step(self, x):
        feats, logits, tape = self.model.forward(x, "train")
        probs = softmax(logits)
        loss, dz = information_maximization_loss(probs)
        if self.beta > 0:
            yhat = shot_pseudo_labels(feats, probs)
            ce, dz_ce = cross_entropy_loss(probs, one_hot(yhat, self.model.n_classes))
            loss, dz = loss + self.beta * ce, dz + self.beta * dz_ce
        self._check(loss)
        self._step(grad(tape, dz, self.slots))
        return self._output(x, probs)


# --- prototype adjustment ---------------------------------------------------


class T3a(Adapter):
    """Replace the head by per-class prototypes built from confident test features."""

    name = "t3a"
    family = "prototype"

    def __init__(self, model, filter_k: int = 20, **kw):
        super().__init__(model, **kw)
        self.filter_k = filter_k
        self.init = l2_normalize(model.params["head.weight"])
        C, w = self.init.shape
        self.sup_z = np.zeros((0, w))
        self.sup_y = np.zeros(0, dtype=np.int64)
        self.sup_h = np.zeros(0)
        self.prototypes = self.init.copy()

    def step(self, x):
        feats, logits, _ = self.model.forward(x, "eval", update_stats=False, record=False)
        z = l2_normalize(feats)
        h = entropy(softmax(logits))
        provisional = np.argmax(z @ self.prototypes.T, axis=1)
        self.sup_z = np.vstack([self.sup_z, z])
        self.sup_y = np.concatenate([self.sup_y, provisional])
        self.sup_h = np.concatenate([self.sup_h, h])
        self._evict()
        self.prototypes = self._prototypes()
        return softmax(z @ self.prototypes.T)

    def _evict(self):
        n = len(self.sup_y)
        order = np.lexsort((np.arange(n), self.sup_h, self.sup_y))
        y_sorted = self.sup_y[order]
        first = np.searchsorted(y_sorted, y_sorted, side="left")
        keep = order[(np.arange(n) - first) < self.filter_k]
        keep.sort()
        self.sup_z, self.sup_y, self.sup_h = self.sup_z[keep], self.sup_y[keep], self.sup_h[keep]

    def _prototypes(self):
        C = self.init.shape[0]
        onehot = (self.sup_y[None, :] == np.arange(C)[:, None]).astype(np.float64)
        sums = self.init + onehot @ self.sup_z
        counts = 1.0 + onehot.sum(axis=1)
        return l2_normalize(sums / counts[:, None])


# --- continual adaptation ---------------------------------------------------


class PredictionBalancedReservoir:
    """Class-balanced reservoir keyed by predicted class.

    While full, a sample of a non-majority class evicts a random member of a
    majority class; a sample of a majority class replaces a random member of
    its own class with reservoir probability occupancy/seen.
    """

    def __init__(self, capacity: int, n_classes: int, rng: np.random.Generator):
        self.capacity = capacity
        self.items: list[list] = [[] for _ in range(n_classes)]
        self.seen = np.zeros(n_classes, dtype=np.int64)
        self.rng = rng

    def __len__(self):
        return sum(len(v) for v in self.items)

    def occupancy(self) -> np.ndarray:
        return np.array([len(v) for v in self.items])

    def add(self, x, c: int):
        self.seen[c] += 1
        if self.capacity <= 0:
            return
        if len(self) < self.capacity:
            self.items[c].append(x)
            return
        occ = self.occupancy()
        majority = np.flatnonzero(occ == occ.max())
        if c not in majority:
            victim = majority[self.rng.integers(len(majority))]
            self.items[victim].pop(self.rng.integers(occ[victim]))
            self.items[c].append(x)
        elif self.rng.random() <= occ[c] / self.seen[c]:
            self.items[c][self.rng.integers(occ[c])] = x

    def data(self) -> np.ndarray:
        return np.array([x for v in self.items for x in v])


class Note(Adapter):
    """IABN inference plus periodic entropy minimization on a balanced memory."""

    name = "note"
    selector = "norm_affine"
    family = "continual"

    def __init__(self, model, capacity: int = 64, update_every: int = 64, **kw):
        super().__init__(model, **kw)
        if model.norm.kind != "iabn":
            raise ValueError("NOTE expects an IABN model")
        self.memory = PredictionBalancedReservoir(capacity, model.n_classes, self.rng)
        self.update_every = update_every
        self.seen = 0

    def step(self, x):
        _, logits, _ = self.model.forward(x, "eval", update_stats=False, record=False)
        probs = softmax(logits)
        for xi, c in zip(x, np.argmax(probs, axis=1)):
            self.memory.add(xi, int(c))
        before = self.seen
        self.seen += len(x)
        if len(self.memory) > 1 and self.seen // self.update_every > before // self.update_every:
            xm = self.memory.data()
            _, lg, tape = self.model.forward(xm, "train")
            loss, dz = entropy_loss(softmax(lg))
            self._check(loss)
            self._step(grad(tape, dz, self.slots))
        if self.predict_before_update:
            return probs
        return self.model.predict_proba(x)


def ema_update(teacher: Model, student: Model, momentum: float, slots=None):
    for k in (slots if slots is not None else student.params):
        teacher.params[k] = momentum * teacher.params[k] + (1 - momentum) * student.params[k]


class Cotta(Adapter):
    """Mean-teacher consistency on noise-augmented inputs with stochastic restore."""

    name = "cotta"
    selector = "all"
    family = "continual"

    def __init__(self, model, n_aug: int = 4, aug_std: float = 0.1, restore_prob: float = 0.01,
                 ema: float = 0.999, **kw):
        super().__init__(model, **kw)
        if model.theta0 is None:
            raise ValueError("CoTTA needs the source snapshot theta0")
        if not 0 <= restore_prob <= 1:
            raise ValueError("restore_prob must be in [0, 1]")
        self.n_aug, self.aug_std = n_aug, aug_std
        self.restore_prob, self.ema = restore_prob, ema
        self.teacher = model.clone()

    def teacher_targets(self, x):
        acc = np.zeros((x.shape[0], self.model.n_classes))
        for _ in range(self.n_aug):
            xa = x + self.aug_std * self.rng.normal(size=x.shape) if self.aug_std > 0 else x
            _, lg, _ = self.teacher.forward(xa, "eval", update_stats=False, record=False)
            acc += softmax(lg)
        return acc / self.n_aug

    def step(self, x):
        q = self.teacher_targets(x)
        _, lg, tape = self.model.forward(x, "train")
        loss, dz = cross_entropy_loss(softmax(lg), q)
        self._check(loss)
        self._step(grad(tape, dz, self.slots))
        ema_update(self.teacher, self.model, self.ema)
        self.model.restore(self.model.theta0, prob=self.restore_prob, rng=self.rng,
                           slots=self.slots)
        if self.predict_before_update:
            return q
        return self.teacher_targets(x)


class CategoryBalancedMemory:
    """Per-class capacity capacity/C; evicts the worst (old, uncertain) entry.

    Entries are [x, uncertainty, age]; ages grow by one per inserted sample.
    """

    def __init__(self, capacity: int, n_classes: int, lambda_t: float = 1.0,
                 lambda_u: float = 1.0):
        self.capacity = capacity
        self.n_classes = n_classes
        self.per_class = capacity / n_classes
        self.lambda_t, self.lambda_u = lambda_t, lambda_u
        self.items: list[list] = [[] for _ in range(n_classes)]

    def __len__(self):
        return sum(len(v) for v in self.items)

    def occupancy(self) -> np.ndarray:
        return np.array([len(v) for v in self.items])

    def score(self, age, uncertainty):
        return (self.lambda_t / (1.0 + math.exp(-age / max(self.capacity, 1)))
                + self.lambda_u * uncertainty / math.log(self.n_classes))

    def add(self, x, c: int, uncertainty: float):
        if self.capacity <= 0:
            return
        if self._make_room(c, self.score(0, uncertainty)):
            self.items[c].append([x, uncertainty, 0])
        for v in self.items:
            for item in v:
                item[2] += 1

    def _make_room(self, c, new_score):
        occ = self.occupancy()
        if occ[c] < self.per_class:
            if occ.sum() < self.capacity:
                return True
            return self._evict(np.flatnonzero(occ == occ.max()), new_score)
        return self._evict([c], new_score)

    def _evict(self, classes, new_score):
        worst, where = -np.inf, None
        for k in classes:
            for i, (_, u, age) in enumerate(self.items[k]):
                s = self.score(age, u)
                if s > worst:
                    worst, where = s, (k, i)
        if where is None or worst <= new_score:
            return False
        self.items[where[0]].pop(where[1])
        return True

    def data(self):
        xs = np.array([it[0] for v in self.items for it in v])
        ages = np.array([it[2] for v in self.items for it in v], dtype=np.float64)
        return xs, ages


def timeliness_weights(ages, tau: float) -> np.ndarray:
    """exp(-age/tau), normalized to sum to one."""
    ages = np.asarray(ages, dtype=np.float64)
    logw = -ages / tau
    w = np.exp(logw - logw.max())
    return w / w.sum()


class Rotta(Adapter):
    """RBN model, category-balanced memory and time-weighted teacher consistency."""

    name = "rotta"
    selector = "norm_affine"
    family = "continual"

    def __init__(self, model, capacity: int = 64, update_every: int = 64, tau_age: float = 64.0,
                 aug_std: float = 0.1, ema: float = 0.999, **kw):
        super().__init__(model, **kw)
        if model.norm.kind != "rbn":
            raise ValueError("RoTTA expects an RBN model")
        self.memory = CategoryBalancedMemory(capacity, model.n_classes)
        self.update_every = update_every
        self.tau_age, self.aug_std, self.ema = tau_age, aug_std, ema
        self.teacher = model.clone()
        self.seen = 0

    def step(self, x):
        _, logits, _ = self.teacher.forward(x, "eval", update_stats=False, record=False)
        probs = softmax(logits)
        unc = entropy(probs)
        for xi, c, u in zip(x, np.argmax(probs, axis=1), unc):
            self.memory.add(xi, int(c), float(u))
        before = self.seen
        self.seen += len(x)
        if len(self.memory) > 1 and self.seen // self.update_every > before // self.update_every:
            self._update()
        if self.predict_before_update:
            return probs
        return self.teacher.predict_proba(x)

    def _update(self):
        xm, ages = self.memory.data()
        xa = xm + self.aug_std * self.rng.normal(size=xm.shape) if self.aug_std > 0 else xm
        _, lt, _ = self.teacher.forward(xa, "eval", update_stats=False, record=False)
        q = softmax(lt)
        _, ls, tape = self.model.forward(xm, "train")
        w = timeliness_weights(ages, self.tau_age)
        loss, dz = cross_entropy_loss(softmax(ls), q, weights=w)
        self._check(loss)
        self._step(grad(tape, dz, self.slots))
        ema_update(self.teacher, self.model, self.ema)
        self.teacher.buffers = {k: v.copy() for k, v in self.model.buffers.items()}


METHODS = {
    "baseline": Baseline,
    "tent": Tent,
    "eata": Eata,
    "sar": Sar,
    "shot": Shot,
    "t3a": T3a,
    "note": Note,
    "cotta": Cotta,
    "rotta": Rotta,
}

# normalization each method's model is built with (LN encoders for the rest)
METHOD_NORM = {"note": "iabn", "rotta": "rbn"}

FAMILIES = {
    "entropy": ["tent", "eata", "sar"],
    "feature_alignment": ["shot"],
    "prototype": ["t3a"],
    "continual": ["note", "cotta", "rotta"],
}


def make_adapter(method: str, model: Model, **hp) -> Adapter:
    try:
        cls = METHODS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}") from None
    return cls(model, **hp)
