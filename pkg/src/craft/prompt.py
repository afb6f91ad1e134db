"""Prompt assembly from a low-dimensional latent.

A latent ``z`` of length ``d0`` is mapped into prompt space through a frozen
Gaussian projection ``A`` of shape ``(n*d, d0)`` and added to the initial
prompt embeddings ``p0``; every class sequence is that shared prompt followed
by the class-name embedding.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import SeededRng, gaussian_matrix

DEFAULT_PROMPT_LENGTH = 4
DEFAULT_SUBSPACE_DIM = 512
DEFAULT_PROJECTION_STD = 0.02


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptSpec:
    p0: np.ndarray
    projection: np.ndarray
    class_embeddings: np.ndarray
    projection_seed: int | None = field(default=None, compare=False)

    def __post_init__(self):
        p0 = np.array(self.p0, dtype=np.float64)
        a = np.array(self.projection, dtype=np.float64)
        c = np.array(self.class_embeddings, dtype=np.float64)
        if p0.ndim != 2 or c.ndim != 2 or a.ndim != 2:
            raise PromptError("p0, projection and class_embeddings must be 2-D")
        n, d = p0.shape
        if n < 1 or d < 1 or a.shape[1] < 1:
            raise PromptError("prompt dimensions must be >= 1")
        if a.shape[0] != n * d:
            raise PromptError(f"projection has {a.shape[0]} rows, expected n*d = {n * d}")
        if c.shape[1] != d:
            raise PromptError(f"class embeddings have dim {c.shape[1]}, expected {d}")
        for name, arr in (("p0", p0), ("projection", a), ("class_embeddings", c)):
            if not np.all(np.isfinite(arr)):
                raise PromptError(f"non-finite entries in {name}")
            arr.setflags(write=False)
        object.__setattr__(self, "p0", p0)
        object.__setattr__(self, "projection", a)
        object.__setattr__(self, "class_embeddings", c)

    @property
    def n(self) -> int:
        return self.p0.shape[0]

    @property
    def d(self) -> int:
        return self.p0.shape[1]

    @property
    def d0(self) -> int:
        return self.projection.shape[1]

    @property
    def num_classes(self) -> int:
        return self.class_embeddings.shape[0]


def new_projection(rng: SeededRng | int, n: int, d: int, d0: int,
                   std: float = DEFAULT_PROJECTION_STD) -> np.ndarray:
    """Frozen ``(n*d, d0)`` matrix with i.i.d. ``N(0, std**2)`` entries."""
    if min(n, d, d0) < 1:
        raise PromptError(f"dimensions must be >= 1, got n={n}, d={d}, d0={d0}")
    if not isinstance(rng, SeededRng):
        rng = SeededRng(rng)
    return gaussian_matrix(rng, n * d, d0, std)


def make_spec(p0, class_embeddings, d0: int = DEFAULT_SUBSPACE_DIM, seed: int = 0,
              std: float = DEFAULT_PROJECTION_STD) -> PromptSpec:
    p0 = np.asarray(p0, dtype=np.float64)
    if p0.ndim != 2:
        raise PromptError("p0 must be 2-D")
    n, d = p0.shape
    a = new_projection(SeededRng(seed), n, d, d0, std)
    return PromptSpec(p0, a, class_embeddings, projection_seed=seed)


def materialize(spec: PromptSpec, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (spec.d0,):
        raise PromptError(f"latent must have shape ({spec.d0},), got {z.shape}")
    return spec.p0 + (spec.projection @ z).reshape(spec.n, spec.d)


def build_prompts(spec: PromptSpec, z) -> np.ndarray:
    """``(K, n+1, d)`` stack of class sequences ``[p0 + Az; c_k]``."""
    prompt = materialize(spec, z)
    k = spec.num_classes
    out = np.empty((k, spec.n + 1, spec.d))
    out[:, : spec.n, :] = prompt
    out[:, spec.n, :] = spec.class_embeddings
    return out
