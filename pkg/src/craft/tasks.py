"""Synthetic few-shot classification tasks with planted structure.

A task fixes a surrogate model (by seed), an initial prompt ``p0``, class
embeddings ``c_k`` and a hidden prompt offset ``delta``. Class prototypes are
the surrogate's encodings of ``[p0 + delta; c_k]``; image features are noisy,
unit-normalised copies of those prototypes. Two signals are planted and
checked at generation time:

* the offset ``delta`` beats the zero-shot prompt (room for prompt search);
* undoing the logit corruption beats the zero-shot prompt (room for
  output refinement).

Tasks whose zero-shot accuracy falls outside ``[1/K + 0.05, 0.95]`` are
rejected and resampled.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .blackbox import SurrogateModel, normalize_rows
from .numerics import SeededRng
from .prompt import DEFAULT_PROJECTION_STD, PromptSpec, build_prompts, make_spec

log = logging.getLogger(__name__)

MAGIC = b"CRFT"
VERSION = 1

# magic, version, K, shots, n, d, D_f, N_tr, N_te, hidden, depth, offset_dim, reachable,
# seed, model_seed, corruption_seed, noise_std, corruption, logit_scale, block_gain, offset_scale
_HEADER = struct.Struct("<4sI" + "I" * 10 + "I" + "QQQ" + "d" * 5)


class TaskFormatError(ValueError):
    pass


class TaskGenerationError(RuntimeError):
    pass


@dataclass
class FewShotTask:
    num_classes: int
    shots: int
    n: int
    d: int
    feature_dim: int
    hidden: int
    depth: int
    offset_dim: int
    reachable: bool
    seed: int
    model_seed: int
    corruption_seed: int
    noise_std: float
    corruption: float
    logit_scale: float
    block_gain: float
    offset_scale: float
    p0: np.ndarray
    class_embeddings: np.ndarray
    offset: np.ndarray
    features_train: np.ndarray
    labels_train: np.ndarray
    features_test: np.ndarray
    labels_test: np.ndarray

    def build_model(self) -> SurrogateModel:
        return SurrogateModel(self.model_seed, self.n, self.d, self.feature_dim,
                              self.num_classes, hidden=self.hidden, depth=self.depth,
                              logit_scale=self.logit_scale, corruption=self.corruption,
                              corruption_seed=self.corruption_seed, block_gain=self.block_gain)

    def prompt_spec(self, d0: int, projection_seed: int,
                    std: float = DEFAULT_PROJECTION_STD) -> PromptSpec:
        return make_spec(self.p0, self.class_embeddings, d0=d0, seed=projection_seed, std=std)

    def oracle_prompt(self) -> tuple[PromptSpec, np.ndarray]:
        """Identity-projection spec and latent that reproduce ``p0 + delta``."""
        size = self.n * self.d
        spec = PromptSpec(self.p0, np.eye(size), self.class_embeddings)
        return spec, self.offset.ravel().copy()

    def __eq__(self, other):
        if not isinstance(other, FewShotTask):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray):
                if a.shape != b.shape or a.dtype != b.dtype or not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Row-argmax accuracy; ties resolve to the lowest class index."""
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _split(rng: SeededRng, prototypes: np.ndarray, per_class: int, noise_std: float):
    k, dim = prototypes.shape
    labels = np.repeat(np.arange(k), per_class)
    feats = prototypes[labels] + rng.normal((labels.size, dim), std=noise_std)
    order = rng.permutation(labels.size)
    return normalize_rows(feats[order]), labels[order].astype(np.int64)


def generate(seed: int = 0, num_classes: int = 10, shots: int = 16, n: int = 4, d: int = 32,
             feature_dim: int = 64, noise_std: float = 0.1, corruption: float = 0.5,
             reachable: bool = True, test_per_class: int = 50, hidden: int = 64,
             depth: int = 3, offset_dim: int = 16, offset_scale: float = 1.0,
             logit_scale: float = 100.0, block_gain: float = 1.5,
             max_attempts: int = 100) -> FewShotTask:
    """Sample a calibrated task; see the module docstring for the guarantees.

    With ``reachable`` the hidden offset lies in a random ``offset_dim``-dimensional
    subspace of prompt space; otherwise it is a full-rank Gaussian perturbation.
    Prototypes are unit-normalised before the feature noise is added, so
    ``noise_std`` is relative to a unit prototype.
    """
    if num_classes < 2:
        raise TaskGenerationError("need at least two classes")
    if shots < 1 or test_per_class < 1:
        raise TaskGenerationError("shots and test_per_class must be >= 1")
    if min(n, d, feature_dim, hidden, offset_dim) < 1 or depth < 0:
        raise TaskGenerationError("degenerate task dimensions")
    if noise_std < 0 or not 0.0 <= corruption <= 1.0:
        raise TaskGenerationError("noise_std must be >= 0 and corruption in [0, 1]")
    root = SeededRng(seed)
    low, high = 1.0 / num_classes + 0.05, 0.95
    for attempt in range(max_attempts):
        rng = root.child(0x9E3779B97F4A7C15 * (attempt + 1) & 0xFFFFFFFFFFFFFFFF)
        model_seed = int(rng.integers(0, 2**63))
        corruption_seed = int(rng.integers(0, 2**63))
        p0 = rng.normal((n, d))
        classes = rng.normal((num_classes, d))
        if reachable:
            basis = rng.normal((n * d, offset_dim), std=1.0 / np.sqrt(offset_dim))
            offset = (basis @ rng.normal(offset_dim, std=offset_scale)).reshape(n, d)
        else:
            offset = rng.normal((n, d), std=offset_scale)
        model = SurrogateModel(model_seed, n, d, feature_dim, num_classes, hidden=hidden,
                               depth=depth, logit_scale=logit_scale, corruption=corruption,
                               corruption_seed=corruption_seed, block_gain=block_gain)
        planted = p0 + offset
        seqs = np.concatenate([np.broadcast_to(planted, (num_classes, n, d)),
                               classes[:, None, :]], axis=1)
        protos = normalize_rows(model.encode_prompts(seqs))
        f_tr, y_tr = _split(rng, protos, shots, noise_std)
        f_te, y_te = _split(rng, protos, test_per_class, noise_std)

        zero_spec = PromptSpec(p0, np.zeros((n * d, 1)), classes)
        zs_prompts = build_prompts(zero_spec, np.zeros(1))
        zs_clean = model.clean_logits(f_te, zs_prompts)
        acc_zs = accuracy(zs_clean @ model.corruption.T, y_te)
        acc_planted = accuracy(model.logits(f_te, seqs), y_te)
        acc_unmixed = accuracy(zs_clean, y_te)
        ok = low <= acc_zs <= high and acc_planted > acc_zs
        if corruption > 0:
            ok = ok and acc_unmixed > acc_zs
        log.debug("task attempt %d: zero-shot %.3f planted %.3f unmixed %.3f", attempt,
                  acc_zs, acc_planted, acc_unmixed)
        if not ok:
            continue
        return FewShotTask(
            num_classes=num_classes, shots=shots, n=n, d=d, feature_dim=feature_dim,
            hidden=hidden, depth=depth, offset_dim=offset_dim, reachable=reachable,
            seed=int(seed), model_seed=model_seed, corruption_seed=corruption_seed,
            noise_std=float(noise_std), corruption=float(corruption),
            logit_scale=float(logit_scale), block_gain=float(block_gain),
            offset_scale=float(offset_scale), p0=p0, class_embeddings=classes, offset=offset,
            features_train=f_tr, labels_train=y_tr, features_test=f_te, labels_test=y_te)
    raise TaskGenerationError(f"no calibrated task found in {max_attempts} attempts")


def write_task(task: FewShotTask, path) -> None:
    header = _HEADER.pack(
        MAGIC, VERSION, task.num_classes, task.shots, task.n, task.d, task.feature_dim,
        task.labels_train.size, task.labels_test.size, task.hidden, task.depth,
        task.offset_dim, int(task.reachable), task.seed, task.model_seed,
        task.corruption_seed, task.noise_std, task.corruption, task.logit_scale,
        task.block_gain, task.offset_scale)
    blocks = [task.p0, task.class_embeddings, task.offset, task.features_train]
    body = b"".join(np.ascontiguousarray(b, dtype="<f8").tobytes() for b in blocks)
    body += np.ascontiguousarray(task.labels_train, dtype="<u4").tobytes()
    body += np.ascontiguousarray(task.features_test, dtype="<f8").tobytes()
    body += np.ascontiguousarray(task.labels_test, dtype="<u4").tobytes()
    Path(path).write_bytes(header + body)


def read_task(path) -> FewShotTask:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise TaskFormatError("truncated task file")
    magic, version = struct.unpack_from("<4sI", data)
    if magic != MAGIC:
        raise TaskFormatError("not a task file (bad magic)")
    if version != VERSION:
        raise TaskFormatError(f"unsupported version {version}")
    if len(data) < _HEADER.size:
        raise TaskFormatError("truncated task file")
    (_, _, k, shots, n, d, dim, n_tr, n_te, hidden, depth, offset_dim, reachable, seed,
     model_seed, corruption_seed, noise_std, corruption, logit_scale, block_gain,
     offset_scale) = _HEADER.unpack_from(data)
    pos = _HEADER.size

    def take(shape, dtype):
        nonlocal pos
        count = int(np.prod(shape))
        size = count * np.dtype(dtype).itemsize
        if pos + size > len(data):
            raise TaskFormatError("truncated task file")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(shape)
        pos += size
        return arr

    p0 = take((n, d), "<f8").astype(np.float64)
    classes = take((k, d), "<f8").astype(np.float64)
    offset = take((n, d), "<f8").astype(np.float64)
    f_tr = take((n_tr, dim), "<f8").astype(np.float64)
    y_tr = take((n_tr,), "<u4").astype(np.int64)
    f_te = take((n_te, dim), "<f8").astype(np.float64)
    y_te = take((n_te,), "<u4").astype(np.int64)
    if pos != len(data):
        raise TaskFormatError("trailing bytes after task payload")
    return FewShotTask(
        num_classes=k, shots=shots, n=n, d=d, feature_dim=dim, hidden=hidden, depth=depth,
        offset_dim=offset_dim, reachable=bool(reachable), seed=seed, model_seed=model_seed,
        corruption_seed=corruption_seed, noise_std=noise_std, corruption=corruption,
        logit_scale=logit_scale, block_gain=block_gain, offset_scale=offset_scale, p0=p0,
        class_embeddings=classes, offset=offset, features_train=f_tr, labels_train=y_tr,
        features_test=f_te, labels_test=y_te)
