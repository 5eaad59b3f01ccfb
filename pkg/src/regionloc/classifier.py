"""Hierarchical region classifier over per-pixel descriptors.

Level 1 is a base head ``D -> h -> m``. Every deeper level first modulates the
descriptor with ``gamma * F + beta``, where gamma and beta come from two hyper
networks fed with the previous levels' class distributions (ground-truth
one-hot during training, predicted probabilities at inference).

Hidden layers are affine -> layer norm -> ReLU; output layers are affine.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

LN_EPS = 1e-5
CKPT_MAGIC = b"SRCC"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIIII")


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


# ---- parameters ---------------------------------------------------------

def _mlp_shapes(prefix: str, d_in: int, hidden: int, d_out: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [
        (f"{prefix}.W1", (d_in, hidden)),
        (f"{prefix}.b1", (hidden,)),
        (f"{prefix}.ln_g", (hidden,)),
        (f"{prefix}.ln_b", (hidden,)),
        (f"{prefix}.W2", (hidden, d_out)),
        (f"{prefix}.b2", (d_out,)),
    ]


def param_shapes(dim: int, hidden: int, m: int, n: int, hyper_hidden: Optional[int] = None):
    """Declared tensor order: per level, base head then (level >= 2) gamma and beta nets."""
    hh = dim if hyper_hidden is None else hyper_hidden
    shapes = []
    for li in range(n):
        shapes += _mlp_shapes(f"l{li}.base", dim, hidden, m)
        if li:
            shapes += _mlp_shapes(f"l{li}.gamma", li * m, hh, dim)
            shapes += _mlp_shapes(f"l{li}.beta", li * m, hh, dim)
    return shapes


class ClassifierParams:
    """Named float64 tensors in a fixed order, with vector-space helpers."""

    def __init__(self, dim: int, hidden: int, m: int, n: int, hyper_hidden: Optional[int] = None, tensors=None):
        self.dim, self.hidden, self.m, self.n = int(dim), int(hidden), int(m), int(n)
        self.hyper_hidden = self.dim if hyper_hidden is None else int(hyper_hidden)
        self.shapes = param_shapes(self.dim, self.hidden, self.m, self.n, self.hyper_hidden)
        if tensors is None:
            tensors = {k: np.zeros(s) for k, s in self.shapes}
        self.tensors: Dict[str, np.ndarray] = {}
        for k, s in self.shapes:
            arr = np.asarray(tensors[k], dtype=np.float64)
            if arr.shape != s:
                raise ValueError(f"{k}: expected shape {s}, got {arr.shape}")
            self.tensors[k] = arr

    @property
    def config(self) -> dict:
        return {"dim": self.dim, "hidden": self.hidden, "m": self.m, "n": self.n, "hyper_hidden": self.hyper_hidden}

    def __getitem__(self, key):
        return self.tensors[key]

    def __setitem__(self, key, value):
        self.tensors[key] = value

    def keys(self):
        return [k for k, _ in self.shapes]

    def zeros_like(self) -> "ClassifierParams":
        return ClassifierParams(**self.config)

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(**self.config, tensors={k: v.copy() for k, v in self.tensors.items()})

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in self.keys()])

    def unflatten(self, vec: np.ndarray) -> "ClassifierParams":
        out, pos = {}, 0
        for k, s in self.shapes:
            size = int(np.prod(s))
            out[k] = np.asarray(vec[pos : pos + size], dtype=np.float64).reshape(s).copy()
            pos += size
        return ClassifierParams(**self.config, tensors=out)

    def axpy(self, alpha: float, other: "ClassifierParams") -> "ClassifierParams":
        """Return ``self + alpha * other``."""
        return ClassifierParams(**self.config, tensors={k: self[k] + alpha * other[k] for k in self.keys()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def to_bytes(self) -> bytes:
        return b"".join(self.tensors[k].astype("<f8").tobytes() for k in self.keys())


def init_params(dim: int, m: int, n: int, hidden: int = 64, hyper_hidden: Optional[int] = None, seed: int = 0) -> ClassifierParams:
    """Glorot-uniform weights; base output layers are zero so initial predictions are uniform.

    Hyper-net gamma output biases start at 1 so initial modulation is the identity.
    """
    p = ClassifierParams(dim, hidden, m, n, hyper_hidden)
    rng = np.random.default_rng(seed)
    for key, shape in p.shapes:
        kind = key.rsplit(".", 1)[1]
        if kind in ("W1", "W2"):
            if key.endswith("base.W2"):
                continue
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            p[key] = rng.uniform(-lim, lim, shape)
        elif kind == "ln_g":
            p[key] = np.ones(shape)
        elif key.endswith("gamma.b2"):
            p[key] = np.ones(shape)
    return p


# ---- layers -------------------------------------------------------------

def modulate(features: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    return gamma * features + beta


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _mlp_forward(p: ClassifierParams, prefix: str, x: np.ndarray):
    z = x @ p[f"{prefix}.W1"] + p[f"{prefix}.b1"]
    mu = z.mean(axis=1, keepdims=True)
    var = z.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (z - mu) * inv
    y = xhat * p[f"{prefix}.ln_g"] + p[f"{prefix}.ln_b"]
    a = np.maximum(y, 0.0)
    out = a @ p[f"{prefix}.W2"] + p[f"{prefix}.b2"]
    return out, (x, xhat, inv, y, a)


def _mlp_backward(p: ClassifierParams, prefix: str, cache, dout: np.ndarray, grads: ClassifierParams):
    x, xhat, inv, y, a = cache
    grads[f"{prefix}.W2"] += a.T @ dout
    grads[f"{prefix}.b2"] += dout.sum(axis=0)
    da = dout @ p[f"{prefix}.W2"].T
    dy = da * (y > 0)
    grads[f"{prefix}.ln_g"] += np.sum(dy * xhat, axis=0)
    grads[f"{prefix}.ln_b"] += dy.sum(axis=0)
    dxhat = dy * p[f"{prefix}.ln_g"]
    dz = inv * (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True))
    grads[f"{prefix}.W1"] += x.T @ dz
    grads[f"{prefix}.b1"] += dz.sum(axis=0)
    return dz @ p[f"{prefix}.W1"].T


def _one_hot(labels: np.ndarray, m: int) -> np.ndarray:
    out = np.zeros((len(labels), m))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _as_desc(desc) -> np.ndarray:
    return np.asarray(getattr(desc, "descriptors", desc), dtype=np.float64)


def _as_levels(labels) -> np.ndarray:
    if labels is None:
        return None
    levels = getattr(labels, "levels", labels)
    if len(levels) and hasattr(levels[0], "levels"):
        levels = [lab.levels for lab in levels]
    return np.asarray(levels, dtype=np.int64).reshape(len(levels), -1)


def forward(params: ClassifierParams, desc, teacher_labels=None, return_logits: bool = False):
    """Per-level class probabilities, list of n arrays (N, m).

    With ``teacher_labels`` (N, n) the hyper networks see ground-truth one-hot
    vectors, otherwise the predicted distributions of earlier levels.
    """
    F = _as_desc(desc)
    if F.ndim != 2 or F.shape[1] != params.dim:
        raise ValueError(f"descriptor dim {F.shape[-1]} does not match classifier dim {params.dim}")
    teacher = _as_levels(teacher_labels)
    probs, logits, prev = [], [], []
    for li in range(params.n):
        if li == 0:
            x = F
        else:
            hin = np.concatenate(prev, axis=1)
            gamma, _ = _mlp_forward(params, f"l{li}.gamma", hin)
            beta, _ = _mlp_forward(params, f"l{li}.beta", hin)
            x = modulate(F, gamma, beta)
        z, _ = _mlp_forward(params, f"l{li}.base", x)
        P = _softmax(z)
        logits.append(z)
        probs.append(P)
        prev.append(_one_hot(teacher[:, li], params.m) if teacher is not None else P)
    return (probs, logits) if return_logits else probs


def compose_label(probs: Sequence[np.ndarray], m: int, n: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Per-level argmax (ties to the lowest index) and composite leaf id.

    Returns (levels (N, n), composite (N,)).
    """
    n = len(probs) if n is None else n
    levels = np.column_stack([np.argmax(np.atleast_2d(P), axis=1) for P in probs[:n]]).astype(np.int64)
    weights = m ** np.arange(n - 1, -1, -1, dtype=np.int64)
    return levels, levels @ weights


def predict(params: ClassifierParams, desc) -> Tuple[np.ndarray, np.ndarray]:
    return compose_label(forward(params, desc), params.m, params.n)


def loss_and_grad(params: ClassifierParams, desc, labels) -> Tuple[float, ClassifierParams]:
    """Teacher-forced cross-entropy summed over levels, averaged over samples."""
    F = _as_desc(desc)
    Y = _as_levels(labels)
    if Y.shape != (len(F), params.n):
        raise ValueError(f"labels must have shape ({len(F)}, {params.n})")
    N = len(F)
    grads = params.zeros_like()
    loss = 0.0
    onehots = [_one_hot(Y[:, li], params.m) for li in range(params.n)]
    for li in range(params.n):
        if li == 0:
            x, hyper = F, None
        else:
            hin = np.concatenate(onehots[:li], axis=1)
            gamma, gcache = _mlp_forward(params, f"l{li}.gamma", hin)
            beta, bcache = _mlp_forward(params, f"l{li}.beta", hin)
            x = modulate(F, gamma, beta)
            hyper = (gcache, bcache)
        z, cache = _mlp_forward(params, f"l{li}.base", x)
        logp = _log_softmax(z)
        loss -= logp[np.arange(N), Y[:, li]].sum() / N
        dz = (np.exp(logp) - onehots[li]) / N
        dx = _mlp_backward(params, f"l{li}.base", cache, dz, grads)
        if hyper is not None:
            _mlp_backward(params, f"l{li}.gamma", hyper[0], dx * F, grads)
            _mlp_backward(params, f"l{li}.beta", hyper[1], dx, grads)
    return float(loss), grads


def loss_only(params: ClassifierParams, desc, labels) -> float:
    F = _as_desc(desc)
    Y = _as_levels(labels)
    _, logits = forward(params, F, Y, return_logits=True)
    return float(-sum(_log_softmax(z)[np.arange(len(F)), Y[:, li]].mean() for li, z in enumerate(logits)))


# ---- training -----------------------------------------------------------

@dataclass
class TrainConfig:
    iterations: int = 1000
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0


@dataclass
class TrainResult:
    params: ClassifierParams
    losses: List[float] = field(default_factory=list)
    level_accuracy: List[List[float]] = field(default_factory=list)
    reached_at: Optional[int] = None


def _view_order(rng: np.random.Generator, n_views: int):
    while True:
        for v in rng.permutation(n_views):
            yield int(v)


def accuracy(params: ClassifierParams, dataset) -> float:
    """Fraction of samples whose predicted composite label is correct (inference mode)."""
    hits = total = 0
    for desc, levels in dataset:
        lv = _as_levels(levels)
        pred, _ = predict(params, desc)
        hits += int(np.all(pred == lv, axis=1).sum())
        total += len(lv)
    return hits / max(total, 1)


def train_fast(
    params: ClassifierParams,
    dataset,
    config: TrainConfig = TrainConfig(),
    target_accuracy: Optional[float] = None,
    eval_every: int = 10,
    callback: Optional[Callable[[int, float, ClassifierParams, int], None]] = None,
) -> TrainResult:
    """Adam on one view per step.

    ``dataset`` is a sequence of (descriptors (N, D), levels (N, n)). When
    ``target_accuracy`` is set, inference accuracy on the whole dataset is
    checked every ``eval_every`` steps and training stops once it is reached.
    ``callback(iteration, loss, params, view_index)`` runs after each step.
    """
    dataset = [(_as_desc(d), _as_levels(y)) for d, y in dataset]
    if not dataset:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    order = _view_order(rng, len(dataset))
    p = params.copy()
    m1 = params.zeros_like()
    m2 = params.zeros_like()
    result = TrainResult(p)
    if target_accuracy is not None and accuracy(p, dataset) >= target_accuracy:
        result.reached_at = 0
        return result
    b1, b2 = config.beta1, config.beta2
    for it in range(1, config.iterations + 1):
        view = next(order)
        desc, levels = dataset[view]
        loss, g = loss_and_grad(p, desc, levels)
        if not np.isfinite(loss) or not g.is_finite():
            raise NumericalError(f"non-finite loss {loss} at iteration {it}")
        for k in p.keys():
            m1[k] = b1 * m1[k] + (1 - b1) * g[k]
            m2[k] = b2 * m2[k] + (1 - b2) * g[k] ** 2
            mhat = m1[k] / (1 - b1**it)
            vhat = m2[k] / (1 - b2**it)
            p[k] = p[k] - config.learning_rate * mhat / (np.sqrt(vhat) + config.adam_eps)
        result.losses.append(loss)
        if callback is not None:
            callback(it, loss, p, view)
        if target_accuracy is not None and it % eval_every == 0 and accuracy(p, dataset) >= target_accuracy:
            result.reached_at = it
            break
    return result


@dataclass
class MetaConfig:
    inner_steps: int = 2
    inner_lr: float = 5e-4
    outer_step: float = 5e-4
    iterations: int = 1000

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.outer_step < 0:
            raise ValueError("outer_step must be >= 0")


def reptile_step(params: ClassifierParams, batches, inner_lr: float, outer_step: float) -> ClassifierParams:
    """One Reptile update: plain SGD over ``batches`` then move toward the adapted weights."""
    adapted = params.copy()
    for desc, levels in batches:
        _, g = loss_and_grad(adapted, desc, levels)
        adapted = adapted.axpy(-inner_lr, g)
    direction = adapted.axpy(-1.0, params)
    return params.axpy(outer_step, direction)


def reptile_pretrain(init: ClassifierParams, tasks, meta: MetaConfig = MetaConfig(), seed: int = 0) -> ClassifierParams:
    """Reptile meta-initialization over a list of tasks (each a list of labeled views)."""
    tasks = [[(_as_desc(d), _as_levels(y)) for d, y in task] for task in tasks]
    if not tasks or any(not t for t in tasks):
        raise ValueError("tasks must be non-empty")
    rng = np.random.default_rng(seed)
    p = init.copy()
    for _ in range(meta.iterations):
        task = tasks[int(rng.integers(len(tasks)))]
        batches = [task[int(rng.integers(len(task)))] for _ in range(meta.inner_steps)]
        p = reptile_step(p, batches, meta.inner_lr, meta.outer_step)
        if not p.is_finite():
            raise NumericalError("non-finite parameters during meta-training")
    return p


# ---- checkpoints --------------------------------------------------------

def dump_checkpoint(params: ClassifierParams) -> bytes:
    buf = io.BytesIO()
    buf.write(
        _CKPT_HEADER.pack(
            CKPT_MAGIC, CKPT_VERSION, params.dim, params.hidden, params.m, params.n, params.hyper_hidden
        )
    )
    buf.write(params.to_bytes())
    return buf.getvalue()


def load_checkpoint_bytes(data: bytes) -> ClassifierParams:
    magic, version, dim, hidden, m, n, hh = _CKPT_HEADER.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise ValueError(f"not a checkpoint (magic {magic!r})")
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    p = ClassifierParams(dim, hidden, m, n, hh)
    flat = np.frombuffer(data, dtype="<f8", offset=_CKPT_HEADER.size)
    if flat.size != p.flatten().size:
        raise ValueError("checkpoint tensor payload has the wrong size")
    return p.unflatten(flat.astype(np.float64))


def save_checkpoint(path, params: ClassifierParams, metadata: Optional[dict] = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_checkpoint(params))
    meta = {"format": "SRCC", "version": CKPT_VERSION, **params.config}
    if metadata:
        meta.update(metadata)
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=str)


def load_checkpoint(path) -> ClassifierParams:
    with open(path, "rb") as fh:
        return load_checkpoint_bytes(fh.read())
