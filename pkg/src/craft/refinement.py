"""Residual refinement of black-box logits, trained with AdamW.

Three architectures share one interface:

* ``mlp``  with residual: ``Y_O = Y_I + W3 relu(W2 relu(W1 y + b1) + b2) + b3``
* ``mlp``  without residual: ``Y_O = R(Y_I)``
* ``linear`` with residual: ``Y_O = Y_I + W y + b``

Weights use the ``(out, in)`` layout and act on row vectors, so a batch
``Y`` of shape ``(N, K)`` maps through ``Y @ W.T + b``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import SeededRng, log_softmax, softmax

DEFAULT_HIDDEN = 512
INIT_STD = 0.02
ARCHS = ("mlp", "linear")

CHECKPOINT_MAGIC = b"CRFR"
CHECKPOINT_VERSION = 1


class RefinementError(ValueError):
    pass


@dataclass
class RefinerParams:
    arch: str
    residual: bool
    num_classes: int
    hidden: int
    tensors: dict[str, np.ndarray]

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "RefinerParams":
        return RefinerParams(self.arch, self.residual, self.num_classes, self.hidden,
                             {k: v.copy() for k, v in self.tensors.items()})


def param_shapes(arch: str, num_classes: int, hidden: int) -> dict[str, tuple[int, ...]]:
    k, h = num_classes, hidden
    if arch == "mlp":
        return {"W1": (h, k), "b1": (h,), "W2": (h, h), "b2": (h,), "W3": (k, h), "b3": (k,)}
    if arch == "linear":
        return {"W": (k, k), "b": (k,)}
    raise RefinementError(f"unknown refiner architecture {arch!r}")


def init_refiner(rng: SeededRng | int, num_classes: int, hidden: int = DEFAULT_HIDDEN,
                 arch: str = "mlp", residual: bool = True) -> RefinerParams:
    """Small random hidden layers; the output layer starts at exactly zero."""
    if num_classes < 1 or hidden < 1:
        raise RefinementError("num_classes and hidden must be >= 1")
    if not isinstance(rng, SeededRng):
        rng = SeededRng(rng)
    shapes = param_shapes(arch, num_classes, hidden)
    tensors = {}
    for name, shape in shapes.items():
        if name in ("W1", "W2"):
            tensors[name] = rng.normal(shape, std=INIT_STD)
        else:
            tensors[name] = np.zeros(shape)
    return RefinerParams(arch, residual, num_classes, hidden if arch == "mlp" else 0, tensors)


@dataclass
class ForwardCache:
    params_id: int
    inputs: np.ndarray
    pre1: np.ndarray | None = None
    act1: np.ndarray | None = None
    pre2: np.ndarray | None = None
    act2: np.ndarray | None = None


def forward(params: RefinerParams, y_in) -> tuple[np.ndarray, ForwardCache]:
    y = np.asarray(y_in, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != params.num_classes:
        raise RefinementError(f"expected input of shape (N, {params.num_classes}), got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise RefinementError("non-finite refiner input")
    t = params.tensors
    cache = ForwardCache(id(params), y)
    if params.arch == "mlp":
        cache.pre1 = y @ t["W1"].T + t["b1"]
        cache.act1 = np.maximum(cache.pre1, 0.0)
        cache.pre2 = cache.act1 @ t["W2"].T + t["b2"]
        cache.act2 = np.maximum(cache.pre2, 0.0)
        r = cache.act2 @ t["W3"].T + t["b3"]
    else:
        r = y @ t["W"].T + t["b"]
    out = y + r if params.residual else r
    return out, cache


def predict(params: RefinerParams, y_in) -> np.ndarray:
    return forward(params, y_in)[0]


def _kl_grad(logits_p: np.ndarray, logits_q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # per-row KL(softmax(p) || softmax(q)) and its gradient w.r.t. p
    logp = log_softmax(logits_p)
    logq = log_softmax(logits_q)
    p = np.exp(logp)
    diff = logp - logq
    kl_rows = (p * diff).sum(axis=1)
    return kl_rows, p * (diff - kl_rows[:, None])


def refine_loss(y_out, y_in, labels, lambda_out: float) -> tuple[float, np.ndarray]:
    """``CE(Y_O, y) + lambda_out * KL(Y_O || Y_I)`` and its gradient w.r.t. ``Y_O``."""
    yo = np.asarray(y_out, dtype=np.float64)
    yi = np.asarray(y_in, dtype=np.float64)
    labels = np.asarray(labels)
    if yo.shape != yi.shape or yo.ndim != 2 or labels.shape != (yo.shape[0],):
        raise RefinementError("shape mismatch between outputs, inputs and labels")
    n = yo.shape[0]
    rows = np.arange(n)
    logp = log_softmax(yo)
    loss = -logp[rows, labels].mean()
    grad = softmax(yo)
    grad[rows, labels] -= 1.0
    if lambda_out != 0.0:
        kl_rows, kl_grad = _kl_grad(yo, yi)
        loss += lambda_out * kl_rows.mean()
        grad += lambda_out * kl_grad
    return float(loss), grad / n


def backward(params: RefinerParams, cache: ForwardCache, grad_out) -> dict[str, np.ndarray]:
    """Parameter gradients given ``dLoss/dY_O`` from the matching :func:`forward`."""
    if cache.params_id != id(params):
        raise RefinementError("cache was produced by a different parameter set")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != cache.inputs.shape:
        raise RefinementError(f"gradient shape {g.shape} does not match cache {cache.inputs.shape}")
    t = params.tensors
    # residual path carries the same upstream gradient into R
    if params.arch == "linear":
        return {"W": g.T @ cache.inputs, "b": g.sum(axis=0)}
    grads = {"W3": g.T @ cache.act2, "b3": g.sum(axis=0)}
    d_pre2 = (g @ t["W3"]) * (cache.pre2 > 0)
    grads["W2"] = d_pre2.T @ cache.act1
    grads["b2"] = d_pre2.sum(axis=0)
    d_pre1 = (d_pre2 @ t["W2"]) * (cache.pre1 > 0)
    grads["W1"] = d_pre1.T @ cache.inputs
    grads["b1"] = d_pre1.sum(axis=0)
    return {name: grads[name] for name in t}


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: RefinerParams, grads: dict[str, np.ndarray], state: AdamWState) -> None:
    """In-place decoupled weight decay followed by a bias-corrected Adam update."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, w in params.tensors.items():
        g = grads[name]
        if g.shape != w.shape:
            raise RefinementError(f"gradient for {name} has shape {g.shape}, expected {w.shape}")
        m = state.m.setdefault(name, np.zeros_like(w))
        v = state.v.setdefault(name, np.zeros_like(w))
        w *= 1.0 - state.lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        w -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def train_epoch(params: RefinerParams, opt: AdamWState, y_in: np.ndarray, labels: np.ndarray,
                lambda_out: float, batch_size: int, rng: SeededRng) -> float:
    """One shuffled pass of minibatch AdamW steps; returns the mean batch loss."""
    n = y_in.shape[0]
    order = rng.permutation(n)
    losses = []
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        out, cache = forward(params, y_in[idx])
        loss, grad = refine_loss(out, y_in[idx], labels[idx], lambda_out)
        adamw_step(params, backward(params, cache, grad), opt)
        losses.append(loss)
    return float(np.mean(losses))


# Checkpoint layout (little-endian):
#   magic b"CRFR" | u32 version | u32 K | u32 hidden | u32 n_floats | u8 arch (0 mlp, 1 linear)
#   | u8 residual | float64 tensors in param_shapes() order, row-major
def save_checkpoint(params: RefinerParams, path) -> None:
    flat = np.concatenate([t.ravel() for t in params.tensors.values()]).astype("<f8")
    header = struct.pack("<4sIIII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.num_classes,
                         params.hidden, flat.size)
    header += struct.pack("<BB", ARCHS.index(params.arch), int(params.residual))
    Path(path).write_bytes(header + flat.tobytes())


def load_checkpoint(path) -> RefinerParams:
    data = Path(path).read_bytes()
    head = struct.calcsize("<4sIIII") + 2
    if len(data) < head:
        raise RefinementError("truncated refiner checkpoint")
    magic, version, k, hidden, count = struct.unpack_from("<4sIIII", data)
    arch_id, residual = struct.unpack_from("<BB", data, head - 2)
    if magic != CHECKPOINT_MAGIC:
        raise RefinementError("not a refiner checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise RefinementError(f"unsupported checkpoint version {version}")
    if arch_id >= len(ARCHS):
        raise RefinementError(f"unknown architecture id {arch_id}")
    arch = ARCHS[arch_id]
    if len(data) != head + 8 * count:
        raise RefinementError("truncated refiner checkpoint")
    flat = np.frombuffer(data, dtype="<f8", offset=head).astype(np.float64)
    tensors, pos = {}, 0
    for name, shape in param_shapes(arch, k, max(hidden, 1)).items():
        size = int(np.prod(shape))
        tensors[name] = flat[pos:pos + size].reshape(shape).copy()
        pos += size
    if pos != count:
        raise RefinementError("checkpoint size does not match its header")
    return RefinerParams(arch, bool(residual), k, hidden, tensors)
