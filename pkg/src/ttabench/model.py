"""The adaptable MLP: (linear -> norm -> relu) blocks and a linear head.

Parameters and running statistics live in flat ordered dicts keyed by slot
name (``block0.norm.weight`` ...), which keeps snapshots, parameter groups,
stochastic restores and checkpoints trivial.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import GradTape, Matrix, cross_entropy_loss, grad, make_rng, one_hot, softmax

log = logging.getLogger(__name__)

NORM_KINDS = ("batch", "layer", "iabn", "rbn")
SELECTORS = ("norm_affine", "encoder", "all")
CHECKPOINT_FORMAT = "ttabench-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class NormConfig:
    kind: str = "layer"
    eps: float = 1e-10
    momentum: float = 0.1  # running-stat EMA weight on the new batch
    kappa: float = 4.0  # IABN shrinkage threshold multiplier
    alpha: float = 0.05  # RBN instance weight

    def __post_init__(self):
        if self.kind not in NORM_KINDS:
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if not 0 < self.momentum <= 1:
            raise ValueError("momentum must be in (0, 1]")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")


# --- statistics rules -------------------------------------------------------


def _soft_shrink(d, thresh):
    return np.sign(d) * np.maximum(np.abs(d) - thresh, 0.0)


def _iabn_parts(mu_ins, var_ins, mu_run, var_run, kappa, n):
    """Shrunken statistics written as ``const + active * batch_stat``.

    Returns (mu, var, mu_const, mu_active, var_const, var_active); the
    split is what the backward pass needs.
    """
    s_mu = np.sqrt(var_run / n)
    s_var = var_run * np.sqrt(2.0 / (n - 1)) if n > 1 else np.full_like(var_run, np.inf)
    d_mu = mu_ins - mu_run
    d_var = var_ins - var_run
    mu_active = np.abs(d_mu) > kappa * s_mu
    var_active = np.abs(d_var) > kappa * s_var
    mu_const = np.where(mu_active, -np.sign(d_mu) * kappa * s_mu, mu_run)
    var_const = np.where(var_active, -np.sign(d_var) * kappa * s_var, var_run)
    mu = mu_run + _soft_shrink(d_mu, kappa * s_mu)
    var = var_run + _soft_shrink(d_var, kappa * s_var)
    return mu, var, mu_const, mu_active.astype(float), var_const, var_active.astype(float)


def iabn_statistics(mu_ins, var_ins, mu_run, var_run, kappa=4.0, n=16):
    """Soft-shrink the instance statistics toward the running ones.

    A deviation only counts for the part exceeding ``kappa`` times its
    sampling-noise scale (sqrt(var_run/n) for the mean, var_run*sqrt(2/(n-1))
    for the variance).
    """
    mu_ins, var_ins, mu_run, var_run = (np.asarray(a, dtype=np.float64)
                                        for a in (mu_ins, var_ins, mu_run, var_run))
    if np.any(var_ins <= 0) or np.any(var_run <= 0):
        raise ValueError("iabn_statistics: variances must be positive")
    mu, var, *_ = _iabn_parts(mu_ins, var_ins, mu_run, var_run, kappa, n)
    return mu, var


def rbn_statistics(mu_ins, var_ins, mu_glob, var_glob, alpha=0.05):
    mu_ins, var_ins, mu_glob, var_glob = (np.asarray(a, dtype=np.float64)
                                          for a in (mu_ins, var_ins, mu_glob, var_glob))
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must be in [0, 1]")
    if np.any(var_ins <= 0) or np.any(var_glob <= 0):
        raise ValueError("rbn_statistics: variances must be positive")
    return alpha * mu_ins + (1 - alpha) * mu_glob, alpha * var_ins + (1 - alpha) * var_glob


# --- layers -----------------------------------------------------------------


def _linear(x, W, b, name, tape):
    def backward(g, grads):
        _acc(grads, f"{name}.weight", g.T @ x)
        _acc(grads, f"{name}.bias", g.sum(axis=0))
        return g @ W

    if tape is not None:
        tape.record(backward, (f"{name}.weight", f"{name}.bias"))
    return x @ W.T + b


def _relu(x, tape):
    mask = x > 0

    def backward(g, grads):
        return g * mask

    if tape is not None:
        tape.record(backward)
    return x * mask


def _acc(grads, key, value):
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


def _layer_norm(x, gamma, beta, eps, name, tape):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g, grads):
        _acc(grads, f"{name}.weight", (g * xhat).sum(axis=0))
        _acc(grads, f"{name}.bias", g.sum(axis=0))
        gx = g * gamma
        D = x.shape[1]
        return inv * (gx - gx.mean(axis=1, keepdims=True)
                      - xhat * (gx * xhat).sum(axis=1, keepdims=True) / D)

    if tape is not None:
        tape.record(backward, (f"{name}.weight", f"{name}.bias"))
    return gamma * xhat + beta


def _stat_norm(x, gamma, beta, eps, mu_const, mu_active, var_const, var_active, name, tape):
    """Normalize with mu = mu_const + mu_active*mean_B, var = var_const + var_active*var_B.

    Covers batch norm (active=1), eval statistics (active=0), IABN (0/1 per
    feature) and RBN (active=alpha), with one exact backward.
    """
    N = x.shape[0]
    mu_b = x.mean(axis=0)
    dev = x - mu_b
    var_b = (dev * dev).mean(axis=0)
    mu = mu_const + mu_active * mu_b
    var = var_const + var_active * var_b
    s = var + eps
    inv = 1.0 / np.sqrt(s)
    xc = x - mu
    xhat = xc * inv

    def backward(g, grads):
        _acc(grads, f"{name}.weight", (g * xhat).sum(axis=0))
        _acc(grads, f"{name}.bias", g.sum(axis=0))
        gx = g * gamma
        d_mu = -(gx * inv).sum(axis=0)
        d_var = -0.5 * (gx * xc).sum(axis=0) * inv / s
        return gx * inv + d_mu * mu_active / N + d_var * var_active * 2.0 * dev / N

    if tape is not None:
        tape.record(backward, (f"{name}.weight", f"{name}.bias"))
    return gamma * xhat + beta, mu_b, var_b


# --- model ------------------------------------------------------------------


@dataclass
class Model:
    in_dim: int
    n_classes: int
    width: int = 64
    depth: int = 2
    norm: NormConfig = field(default_factory=NormConfig)
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    theta0: dict | None = None
    source_val_accuracy: float | None = None

    @classmethod
    def init(cls, in_dim, n_classes, width=64, depth=2, norm="layer", seed=0, **norm_kwargs):
        m = cls(in_dim, n_classes, width, depth, NormConfig(kind=norm, **norm_kwargs))
        rng = make_rng(seed, 0xC0DE)
        fan_in = in_dim
        for i in range(depth):
            bound = 1.0 / np.sqrt(fan_in)
            m.params[f"block{i}.linear.weight"] = rng.uniform(-bound, bound, (width, fan_in))
            m.params[f"block{i}.linear.bias"] = rng.uniform(-bound, bound, width)
            m.params[f"block{i}.norm.weight"] = np.ones(width)
            m.params[f"block{i}.norm.bias"] = np.zeros(width)
            if m.norm.kind != "layer":
                m.buffers[f"block{i}.norm.running_mean"] = np.zeros(width)
                m.buffers[f"block{i}.norm.running_var"] = np.ones(width)
            fan_in = width
        bound = 1.0 / np.sqrt(fan_in)
        m.params["head.weight"] = rng.uniform(-bound, bound, (n_classes, fan_in))
        m.params["head.bias"] = rng.uniform(-bound, bound, n_classes)
        return m

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    def param_group(self, selector: str) -> list[str]:
        if selector == "norm_affine":
            return [k for k in self.params if ".norm." in k]
        if selector == "encoder":
            return [k for k in self.params if not k.startswith("head.")]
        if selector == "all":
            return list(self.params)
        raise ValueError(f"unknown parameter selector {selector!r}")

    def forward(self, x: Matrix, mode: str = "eval", update_stats: bool | None = None,
                record: bool = True):
        """Return (features, logits, tape).

        ``mode="train"`` normalizes batch-norm layers with batch statistics;
        running statistics are updated when ``update_stats`` (default: train
        mode) is set. IABN and RBN always blend the batch in.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got shape {x.shape}")
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        if update_stats is None:
            update_stats = mode == "train"
        tape = GradTape() if record else None
        h = x
        for i in range(self.depth):
            p = f"block{i}"
            h = _linear(h, self.params[f"{p}.linear.weight"], self.params[f"{p}.linear.bias"],
                        f"{p}.linear", tape)
            h = self._norm(h, p, mode, update_stats, tape)
            h = _relu(h, tape)
        logits = _linear(h, self.params["head.weight"], self.params["head.bias"], "head", tape)
        return h, logits, tape

    def _norm(self, h, p, mode, update_stats, tape):
        cfg = self.norm
        gamma, beta = self.params[f"{p}.norm.weight"], self.params[f"{p}.norm.bias"]
        name = f"{p}.norm"
        if cfg.kind == "layer":
            return _layer_norm(h, gamma, beta, cfg.eps, name, tape)
        rm = self.buffers[f"{p}.norm.running_mean"]
        rv = self.buffers[f"{p}.norm.running_var"]
        n = h.shape[0]
        mu_b = h.mean(axis=0)
        var_b = h.var(axis=0)
        zeros, ones = np.zeros_like(rm), np.ones_like(rm)
        if cfg.kind == "batch":
            if mode == "train":
                parts = (zeros, ones, zeros, ones)
            else:
                parts = (rm, zeros, rv, zeros)
        elif cfg.kind == "iabn":
            _, _, mc, ma, vc, va = _iabn_parts(mu_b, var_b, rm, rv, cfg.kappa, n)
            parts = (mc, ma, vc, va)
        else:  # rbn
            a = cfg.alpha
            parts = ((1 - a) * rm, np.full_like(rm, a), (1 - a) * rv, np.full_like(rv, a))
        out, mu_b, var_b = _stat_norm(h, gamma, beta, cfg.eps, *parts, name, tape)
        if update_stats:
            m = cfg.momentum
            unbiased = var_b * n / (n - 1) if n > 1 else var_b
            self.buffers[f"{p}.norm.running_mean"] = (1 - m) * rm + m * mu_b
            self.buffers[f"{p}.norm.running_var"] = np.maximum((1 - m) * rv + m * unbiased, 1e-12)
        return out

    def predict_proba(self, x: Matrix) -> Matrix:
        _, logits, _ = self.forward(x, "eval", update_stats=False, record=False)
        return softmax(logits)

    # -- snapshots -------------------------------------------------------

    def snapshot(self) -> dict:
        """Parameter image: copies of every parameter and running statistic."""
        return {"params": {k: v.copy() for k, v in self.params.items()},
                "buffers": {k: v.copy() for k, v in self.buffers.items()}}

    def restore(self, image: dict, prob: float = 1.0, rng: np.random.Generator | None = None,
                slots=None):
        """Restore from ``image``.

        With ``prob < 1`` every scalar of every parameter in ``slots`` is reset
        independently with probability ``prob`` (running statistics untouched);
        ``prob == 1`` restores parameters and running statistics exactly.
        """
        params = image["params"]
        for k, v in params.items():
            if k not in self.params or self.params[k].shape != v.shape:
                raise ValueError(f"restore: shape mismatch at {k}")
        if prob >= 1.0:
            for k in (slots if slots is not None else params):
                self.params[k] = params[k].copy()
            if slots is None:
                for k, v in image.get("buffers", {}).items():
                    if k not in self.buffers or self.buffers[k].shape != v.shape:
                        raise ValueError(f"restore: shape mismatch at {k}")
                    self.buffers[k] = v.copy()
            return
        if prob <= 0.0:
            return
        if rng is None:
            raise ValueError("stochastic restore needs an rng")
        for k in (slots if slots is not None else params):
            mask = rng.random(self.params[k].shape) < prob
            self.params[k] = np.where(mask, params[k], self.params[k])

    def freeze_source(self):
        if self.theta0 is not None:
            raise RuntimeError("source snapshot already taken")
        self.theta0 = self.snapshot()

    # -- checkpoint ------------------------------------------------------

    def to_json(self) -> dict:
        def pack(d):
            return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in d.items()}

        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "arch": {"in_dim": self.in_dim, "n_classes": self.n_classes, "width": self.width,
                     "depth": self.depth, "norm": vars(self.norm)},
            "params": pack(self.params),
            "buffers": pack(self.buffers),
            "theta0": None if self.theta0 is None else {
                "params": pack(self.theta0["params"]), "buffers": pack(self.theta0["buffers"])},
            "source_val_accuracy": self.source_val_accuracy,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Model":
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a ttabench checkpoint")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')}")

        def unpack(d):
            out = {}
            for k, v in d.items():
                arr = np.asarray(v["data"], dtype=np.float64)
                if arr.size != int(np.prod(v["shape"])):
                    raise ValueError(f"checkpoint: shape manifest mismatch at {k}")
                out[k] = arr.reshape(v["shape"])
            return out

        a = doc["arch"]
        m = cls(a["in_dim"], a["n_classes"], a["width"], a["depth"], NormConfig(**a["norm"]),
                unpack(doc["params"]), unpack(doc["buffers"]))
        if doc.get("theta0") is not None:
            m.theta0 = {"params": unpack(doc["theta0"]["params"]),
                        "buffers": unpack(doc["theta0"]["buffers"])}
        m.source_val_accuracy = doc.get("source_val_accuracy")
        return m

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "Model":
        return cls.from_json(json.loads(Path(path).read_text()))


def forward(model: Model, x: Matrix, mode: str = "eval", **kw):
    return model.forward(x, mode, **kw)


def to_rbn(model: Model, alpha: float = 0.05, momentum: float = 0.05) -> Model:
    """Batch-norm model -> robust batch norm; running stats become the global stats."""
    if model.norm.kind != "batch":
        raise ValueError("to_rbn expects a batch-norm model")
    out = model.clone()
    out.norm = NormConfig(kind="rbn", eps=model.norm.eps, momentum=momentum, alpha=alpha)
    return out


def accuracy(model: Model, X: Matrix, y) -> float:
    return float(np.mean(np.argmax(model.predict_proba(X), axis=1) == np.asarray(y)))


def pretrain(model: Model, X: Matrix, y, epochs: int = 30, lr: float = 0.05,
             batch_size: int = 32, momentum: float = 0.9, seed: int = 0,
             val: tuple | None = None) -> Model:
    """Supervised cross-entropy training with mini-batch SGD (heavy-ball momentum).

    Mutates and returns ``model``; the source snapshot is taken at the end.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("pretrain: empty source set")
    rng = make_rng(seed, 0x7EA)
    names = model.param_group("all")
    velocity = {k: np.zeros_like(model.params[k]) for k in names}
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2 and model.norm.kind != "layer":
                continue
            with np.errstate(over="ignore", invalid="ignore"):
                _, logits, tape = model.forward(X[idx], "train")
            if not np.all(np.isfinite(logits)):
                raise FloatingPointError(f"pretrain diverged at epoch {epoch}, step {step}")
            probs = softmax(logits)
            loss, dz = cross_entropy_loss(probs, one_hot(y[idx], model.n_classes))
            if not np.isfinite(loss):
                raise FloatingPointError(f"pretrain diverged at epoch {epoch}, step {step}")
            grads = grad(tape, dz, names)
            for k in names:
                velocity[k] = momentum * velocity[k] + grads[k]
                model.params[k] = model.params[k] - lr * velocity[k]
            step += 1
        log.debug("epoch %d done (last batch loss %.4f)", epoch, loss)
    if val is not None:
        model.source_val_accuracy = accuracy(model, *val)
    model.freeze_source()
    return model
