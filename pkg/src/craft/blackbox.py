"""Black-box prediction oracle: the contract, its query ledger and a surrogate.

The oracle accepts class prompt sequences and answers with an ``N x K``
logit matrix for a registered image set. Nothing else leaves it: no
features, no activations, no gradients.

:class:`SurrogateModel` stands in for a frozen vision-language model. Its
"text encoder" is an input adapter, a chain of residual ``tanh`` blocks and
an output adapter; logits are the scaled cosine similarity between image
features and encoded prompts, optionally passed through a fixed class-mixing
corruption.
"""
from __future__ import annotations

import abc
import itertools
import threading

import numpy as np

from .numerics import SeededRng, as_matrix

DEFAULT_LOGIT_SCALE = 100.0


class OracleError(RuntimeError):
    pass


class BudgetExhausted(OracleError):
    def __init__(self, message: str = "query budget exhausted"):
        super().__init__(message)


class RegistrationError(OracleError):
    pass


class PromptShapeError(OracleError, ValueError):
    pass


class QueryLedger:
    """Counts prediction calls against an optional budget.

    ``charge`` is an atomic check-and-increment: a call either succeeds and
    bumps ``used`` by one or raises :class:`BudgetExhausted` and leaves the
    count alone. ``budget=None`` means unlimited.
    """

    def __init__(self, budget: int | None = None):
        if budget is not None and budget < 0:
            raise ValueError("budget must be non-negative")
        self.budget = budget
        self._used = 0
        self._lock = threading.Lock()

    @property
    def used(self) -> int:
        return self._used

    @property
    def remaining(self) -> int | None:
        return None if self.budget is None else self.budget - self._used

    def charge(self, count: int = 1) -> int:
        with self._lock:
            if self.budget is not None and self._used + count > self.budget:
                raise BudgetExhausted()
            self._used += count
            return self._used

    def sync(self, used: int, budget: int | None) -> None:
        """Mirror a remote ledger."""
        with self._lock:
            self._used = int(used)
            self.budget = budget

    def __repr__(self) -> str:
        return f"QueryLedger(used={self._used}, budget={self.budget})"


def corruption_matrix(num_classes: int, strength: float, seed: int) -> np.ndarray:
    """Row-stochastic ``K x K`` mixing applied to logit columns.

    Half of the classes (rounded up) are arranged in a random cycle; each of
    them keeps ``1 - strength`` of its own score and takes ``strength`` of the
    next class's score. ``strength = 0`` gives the identity.
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError("corruption strength must lie in [0, 1]")
    k = num_classes
    m = np.eye(k)
    if strength == 0.0 or k < 2:
        return m
    rng = SeededRng(seed)
    members = rng.permutation(k)[: max(2, (k + 1) // 2)]
    for i, cls in enumerate(members):
        nxt = members[(i + 1) % len(members)]
        m[cls, cls] = 1.0 - strength
        m[cls, nxt] = strength
    return m


class SurrogateModel:
    """Frozen, seeded stand-in for a CLIP-like model.

    Encoded class prompt ``w_k = out(chain(in(flatten(t_k))))`` where the
    chain applies ``x <- x + tanh(W_i x + b_i)`` for every block.
    """

    def __init__(self, seed: int, n: int, d: int, feature_dim: int, num_classes: int,
                 hidden: int = 64, depth: int = 3, logit_scale: float = DEFAULT_LOGIT_SCALE,
                 corruption: float = 0.0, corruption_seed: int | None = None,
                 block_gain: float = 1.5):
        if min(n, d, feature_dim, num_classes, hidden) < 1 or depth < 0:
            raise ValueError("surrogate dimensions must be positive")
        if logit_scale <= 0:
            raise ValueError("logit_scale must be positive")
        self.seed = int(seed)
        self.n, self.d = n, d
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.hidden = hidden
        self.depth = depth
        self.logit_scale = float(logit_scale)
        self.block_gain = float(block_gain)
        self.corruption_strength = float(corruption)
        self.corruption_seed = self.seed + 1 if corruption_seed is None else int(corruption_seed)

        rng = SeededRng(self.seed)
        fan_in = (n + 1) * d
        self.w_in = rng.normal((hidden, fan_in), std=1.0 / np.sqrt(fan_in))
        self.b_in = rng.normal(hidden, std=0.1)
        self.blocks = []
        for _ in range(depth):
            w = rng.normal((hidden, hidden), std=self.block_gain / np.sqrt(hidden))
            b = rng.normal(hidden, std=0.1)
            self.blocks.append((w, b))
        self.w_out = rng.normal((feature_dim, hidden), std=1.0 / np.sqrt(hidden))
        self.b_out = rng.normal(feature_dim, std=0.1)
        self.corruption = corruption_matrix(num_classes, self.corruption_strength,
                                            self.corruption_seed)
        for arr in self._arrays():
            arr.setflags(write=False)

    def _arrays(self):
        yield from (self.w_in, self.b_in, self.w_out, self.b_out, self.corruption)
        for w, b in self.blocks:
            yield w
            yield b

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.n, self.d, self.feature_dim, self.num_classes

    def block(self, i: int, x: np.ndarray) -> np.ndarray:
        w, b = self.blocks[i]
        return np.tanh(x @ w.T + b)

    def decompose_chain(self, x):
        """Run the residual chain on ``x`` and expose each block's output.

        Returns ``(final, parts)`` with ``final = x + sum(parts)``. This is a
        test door on the model itself; it is not part of the oracle contract.
        """
        x = np.asarray(x, dtype=np.float64)
        parts = []
        for i in range(self.depth):
            out = self.block(i, x)
            parts.append(out)
            x = x + out
        return x, parts

    def _check_prompts(self, prompts) -> np.ndarray:
        p = np.asarray(prompts, dtype=np.float64)
        expected = (self.num_classes, self.n + 1, self.d)
        if p.shape != expected:
            raise PromptShapeError(f"prompts must have shape {expected}, got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise PromptShapeError("non-finite prompt entries")
        return p

    def encode_prompts(self, prompts) -> np.ndarray:
        p = self._check_prompts(prompts)
        x = p.reshape(p.shape[0], -1) @ self.w_in.T + self.b_in
        x, _ = self.decompose_chain(x)
        return x @ self.w_out.T + self.b_out

    def clean_logits(self, unit_features: np.ndarray, prompts) -> np.ndarray:
        w = self.encode_prompts(prompts)
        w = w / np.linalg.norm(w, axis=1, keepdims=True)
        return self.logit_scale * (unit_features @ w.T)

    def logits(self, unit_features: np.ndarray, prompts) -> np.ndarray:
        """Scaled cosine logits with the corruption mixing applied."""
        return self.clean_logits(unit_features, prompts) @ self.corruption.T


def normalize_rows(features) -> np.ndarray:
    f = as_matrix(features, "features")
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise RegistrationError("image features must be non-zero")
    return f / norms


class BlackBoxOracle(abc.ABC):
    """Prompts in, an ``N x K`` score matrix out, one ledger charge per call."""

    ledger: QueryLedger

    @abc.abstractmethod
    def register_images(self, features, handle: str | None = None) -> str:
        ...

    @abc.abstractmethod
    def predict(self, handle: str, prompts) -> np.ndarray:
        ...


class LocalOracle(BlackBoxOracle):
    """In-process oracle over a :class:`SurrogateModel`."""

    _ids = itertools.count()

    def __init__(self, model: SurrogateModel, budget: int | None = None):
        self._model = model
        self.ledger = QueryLedger(budget)
        self._images: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    @property
    def num_classes(self) -> int:
        return self._model.num_classes

    def register_images(self, features, handle: str | None = None) -> str:
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] == 0:
            raise RegistrationError("feature matrix must be non-empty and 2-D")
        if f.shape[1] != self._model.feature_dim:
            raise RegistrationError(
                f"feature dim {f.shape[1]} does not match model ({self._model.feature_dim})")
        unit = normalize_rows(f)
        unit.setflags(write=False)
        with self._lock:
            if handle is None:
                handle = f"images-{next(self._ids)}"
            if handle in self._images:
                raise RegistrationError(f"handle {handle!r} already registered")
            self._images[handle] = unit
        return handle

    def predict(self, handle: str, prompts) -> np.ndarray:
        try:
            unit = self._images[handle]
        except KeyError:
            raise RegistrationError(f"unknown handle {handle!r}") from None
        # validate before charging so malformed requests cost nothing
        prompts = self._model._check_prompts(prompts)
        self.ledger.charge()
        return self._model.logits(unit, prompts)
