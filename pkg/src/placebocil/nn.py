"""Dense network with hand-written backprop, CE and KD losses, and SGD.

Parameters are float64 throughout so finite-difference checks are meaningful.
A model is a list of :class:`Layer`; the last layer is the classifier head and
everything before it is the feature extractor.
"""

from __future__ import annotations

import copy
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "identity")
KD_KINDS = ("logit_kl", "cosine_embedding")
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match weight {self.weight.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class Model:
    layers: list[Layer]

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ShapeError("a model needs at least a head layer")
        for k in range(1, len(self.layers)):
            prev, cur = self.layers[k - 1], self.layers[k]
            if prev.out_dim != cur.in_dim:
                raise ShapeError(
                    f"layer {k} expects {cur.in_dim} inputs but layer {k - 1} "
                    f"produces {prev.out_dim}"
                )
        if self.head.activation != "identity":
            raise ShapeError("the head layer must use the identity activation")

    @property
    def head(self) -> Layer:
        return self.layers[-1]

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def feature_dim(self) -> int:
        return self.head.in_dim

    @property
    def class_count(self) -> int:
        return self.head.out_dim

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def expand_head(self, class_count: int) -> "Model":
        """Grow the head to ``class_count`` outputs; new rows start at zero."""
        head = self.head
        if class_count < head.out_dim:
            raise ShapeError(f"cannot shrink head from {head.out_dim} to {class_count}")
        extra = class_count - head.out_dim
        if extra == 0:
            return self.copy()
        w = np.vstack([head.weight, np.zeros((extra, head.in_dim))])
        b = np.concatenate([head.bias, np.zeros(extra)])
        layers = [copy.deepcopy(l) for l in self.layers[:-1]]
        layers.append(Layer(w, b, "identity"))
        return Model(layers)

    def same_parameters(self, other: "Model") -> bool:
        mine, theirs = self.parameters(), other.parameters()
        return len(mine) == len(theirs) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(mine, theirs)
        )


def init_model(
    input_dim: int, hidden: list[int] | tuple[int, ...], class_count: int, rng: np.random.Generator
) -> Model:
    """He-initialised ReLU extractor with a linear head."""
    dims = [input_dim, *hidden]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), "relu"))
    w = rng.normal(0.0, np.sqrt(1.0 / dims[-1]), size=(class_count, dims[-1]))
    layers.append(Layer(w, np.zeros(class_count), "identity"))
    return Model(layers)


# ---------------------------------------------------------------- forward/backward


def _forward_cache(model: Model, batch: np.ndarray):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"batch must be 2-D, got shape {x.shape}")
    inputs, pre = [], []
    for k, layer in enumerate(model.layers):
        if x.shape[1] != layer.in_dim:
            raise ShapeError(
                f"layer {k} expects {layer.in_dim} input columns, got {x.shape[1]}"
            )
        inputs.append(x)
        z = x @ layer.weight.T + layer.bias
        pre.append(z)
        x = np.maximum(z, 0.0) if layer.activation == "relu" else z
    # inputs[-1] is the head input, i.e. the extracted features
    return inputs, pre, x


def forward(model: Model, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(features, logits)`` for a batch of row vectors."""
    inputs, _, logits = _forward_cache(model, batch)
    return inputs[-1], logits


def features(model: Model, batch: np.ndarray) -> np.ndarray:
    return forward(model, batch)[0]


def logits(model: Model, batch: np.ndarray) -> np.ndarray:
    return forward(model, batch)[1]


def _backward(model: Model, cache, dlogits: np.ndarray, dfeatures: np.ndarray | None = None):
    inputs, pre, _ = cache
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.layers)  # type: ignore[list-item]
    delta = dlogits
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        if layer.activation == "relu":
            delta = delta * (pre[k] > 0.0)
        grads[k] = (delta.T @ inputs[k], delta.sum(axis=0))
        if k == 0:
            break
        delta = delta @ layer.weight
        if k == len(model.layers) - 1 and dfeatures is not None:
            delta = delta + dfeatures
    return grads


def zero_grads(model: Model):
    return [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in model.layers]


def add_grads(a, b, scale: float = 1.0):
    return [(wa + scale * wb, ba + scale * bb) for (wa, ba), (wb, bb) in zip(a, b)]


# ---------------------------------------------------------------- losses


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def ce_loss_grad(model: Model, batch: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its exact gradient."""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if n == 0:
        return 0.0, zero_grads(model)
    if labels.min() < 0 or labels.max() >= model.class_count:
        raise ValueError(
            f"labels must lie in [0, {model.class_count}); got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    cache = _forward_cache(model, batch)
    logp = log_softmax(cache[2])
    loss = -float(logp[np.arange(n), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, _backward(model, cache, dlogits)


@dataclass
class LossConfig:
    lam: float = 1.0
    kd_kind: str = "logit_kl"
    temperature: float = 2.0

    def __post_init__(self):
        if self.kd_kind not in KD_KINDS:
            raise ValueError(f"kd_kind must be one of {KD_KINDS}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")


def _cosine_rows(a: np.ndarray, b: np.ndarray):
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    denom = np.where(ok, na * nb, 1.0)
    cos = np.where(ok, np.einsum("ij,ij->i", a, b) / denom, 0.0)
    return cos, na, nb, ok


def kd_loss_grad(
    teacher: Model,
    student: Model,
    batch: np.ndarray,
    cfg: LossConfig,
    old_classes: int | None = None,
):
    """Distillation loss of ``student`` towards a frozen ``teacher``.

    ``logit_kl`` compares temperature-softened distributions over the first
    ``old_classes`` logits (default: the teacher's head size).
    ``cosine_embedding`` compares extractor features. Gradients are for the
    student only; an empty batch gives zero loss and zero gradients.
    """
    batch = np.asarray(batch, dtype=np.float64)
    n = batch.shape[0]
    if n == 0:
        return 0.0, zero_grads(student)
    t_feat, t_logits = forward(teacher, batch)
    cache = _forward_cache(student, batch)
    s_feat, s_logits = cache[0][-1], cache[2]

    if cfg.kd_kind == "logit_kl":
        c = teacher.class_count if old_classes is None else old_classes
        if c > student.class_count or c > teacher.class_count:
            raise ShapeError(f"cannot distill {c} classes between these heads")
        T = cfg.temperature
        log_pt = log_softmax(t_logits[:, :c] / T)
        log_ps = log_softmax(s_logits[:, :c] / T)
        pt = np.exp(log_pt)
        keep = pt >= 1e-12
        terms = np.where(keep, pt * (log_pt - log_ps), 0.0)
        loss = float(terms.sum() / n)
        dlogits = np.zeros_like(s_logits)
        # rows of pt sum to 1 so d/dz of sum_k pt_k * (-log ps_k) is ps - pt
        masked_pt = np.where(keep, pt, 0.0)
        ps = np.exp(log_ps)
        # the row mass is 1 unless terms were dropped; using 1.0 exactly keeps
        # the gradient at zero when student and teacher agree
        mass = np.where(keep.all(axis=1, keepdims=True), 1.0, masked_pt.sum(axis=1, keepdims=True))
        dlogits[:, :c] = (ps * mass - masked_pt) / (T * n)
        return loss, _backward(student, cache, dlogits)

    cos, nt, ns, ok = _cosine_rows(t_feat, s_feat)
    loss = float(np.mean(1.0 - cos))
    dfeat = np.zeros_like(s_feat)
    safe_nt = np.where(ok, nt, 1.0)[:, None]
    safe_ns = np.where(ok, ns, 1.0)[:, None]
    g = t_feat / (safe_nt * safe_ns) - cos[:, None] * s_feat / safe_ns**2
    dfeat[ok] = -g[ok] / n
    dlogits = np.zeros_like(s_logits)
    return loss, _backward(student, cache, dlogits, dfeatures=dfeat)


# ---------------------------------------------------------------- optimisation


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 20
    schedule: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        self.schedule = [(int(e), float(f)) for e, f in self.schedule]
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        marks = [e for e, _ in self.schedule]
        if any(b <= a for a, b in zip(marks, marks[1:])):
            raise ValueError("schedule epochs must be strictly increasing")
        if marks and marks[-1] >= self.epochs:
            raise ValueError("schedule epochs must be below the epoch count")
        if any(f <= 0 for _, f in self.schedule):
            raise ValueError("schedule factors must be positive")


def effective_lr(cfg: OptimizerConfig, epoch: int) -> float:
    lr = cfg.learning_rate
    for mark, factor in cfg.schedule:
        if epoch >= mark:
            lr /= factor
    return lr


class SGD:
    """Momentum SGD (``v <- mu*v + g; p <- p - lr*v``) bound to one model."""

    def __init__(self, model: Model, cfg: OptimizerConfig):
        self.model = model
        self.cfg = cfg
        self.velocity = zero_grads(model)

    def step(self, grads, epoch: int) -> Model:
        lr = effective_lr(self.cfg, epoch)
        mu = self.cfg.momentum
        for layer, (gw, gb), vel in zip(self.model.layers, grads, self.velocity):
            vw, vb = vel
            if gw.shape != layer.weight.shape or gb.shape != layer.bias.shape:
                raise ShapeError("gradient shapes do not match the model")
            vw *= mu
            vw += gw
            vb *= mu
            vb += gb
            layer.weight -= lr * vw
            layer.bias -= lr * vb
        return self.model


def sgd_step(model: Model, grads, cfg: OptimizerConfig, epoch: int) -> Model:
    """Single momentum-free step on a copy of ``model``."""
    out = model.copy()
    lr = effective_lr(cfg, epoch)
    for layer, (gw, gb) in zip(out.layers, grads):
        layer.weight -= lr * gw
        layer.bias -= lr * gb
    return out


# ---------------------------------------------------------------- checkpoints


def save_model(model: Model, path: str | Path) -> None:
    arrays = {
        "version": np.array(CHECKPOINT_VERSION),
        "activations": np.array([l.activation for l in model.layers]),
    }
    for k, layer in enumerate(model.layers):
        arrays[f"w{k}"] = layer.weight
        arrays[f"b{k}"] = layer.bias
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_model(path: str | Path) -> Model:
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        acts = [str(a) for a in data["activations"]]
        layers = [
            Layer(data[f"w{k}"].copy(), data[f"b{k}"].copy(), act)
            for k, act in enumerate(acts)
        ]
    return Model(layers)
