"""SGD training of the entity and word matrices, plus binary model persistence.

The production objective is per-pair logistic negative sampling; an exact
full-softmax mode is kept for small-scale cross-checks. With ``threads=1``
training is bit-reproducible for a fixed seed: the full pair schedule and all
negative draws come from one seeded generator in a fixed order, and the update
kernel is sequential.
"""

from __future__ import annotations

import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numba import njit

from .corpus import (
    DocumentRecord,
    Entity,
    EntityCatalog,
    Vocabulary,
    parse_entity_name,
    record_entity_indices,
    surviving_word_indices,
)
from .errors import ConfigError, CorpusError, ModelIOError, NumericError

MODEL_MAGIC = b"ENT2VEC1"
MODEL_FORMAT_VERSION = 1

_U64_MASK = (1 << 64) - 1


class TrainMode(Enum):
    NEGATIVE_SAMPLING = "ns"
    EXACT_SOFTMAX = "softmax"


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 100
    epochs: int = 5
    negatives: int = 5
    lr0: float = 0.025
    lr_min: float = 1e-4
    seed: int = 42
    mode: TrainMode = TrainMode.NEGATIVE_SAMPLING
    threads: int = 1

    def validate(self) -> None:
        if self.dim < 2:
            raise ConfigError("dim must be >= 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.mode is TrainMode.NEGATIVE_SAMPLING and self.negatives < 1:
            raise ConfigError("negatives must be >= 1 in negative-sampling mode")
        if not (self.lr0 > self.lr_min > 0.0):
            raise ConfigError("learning rates must satisfy lr0 > lr_min > 0")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


@dataclass(eq=False)
class EmbeddingModel:
    """Learned entity matrix (E x N) and output word matrix (N x V)."""

    entity_matrix: np.ndarray
    word_matrix: np.ndarray
    catalog: EntityCatalog
    vocab_words: tuple[str, ...]
    config: TrainConfig | None = None

    def __post_init__(self):
        e, n = self.entity_matrix.shape
        n2, v = self.word_matrix.shape
        if e != len(self.catalog) or n != n2 or v != len(self.vocab_words):
            raise ValueError("matrix dimensions inconsistent with catalog/vocabulary")
        self._word_index: dict[str, int] | None = None
        self.final_mean_loss: float | None = None

    @property
    def dim(self) -> int:
        return self.entity_matrix.shape[1]

    @property
    def word_index(self) -> dict[str, int]:
        if self._word_index is None:
            self._word_index = {w: i for i, w in enumerate(self.vocab_words)}
        return self._word_index

    def entity_vector(self, entity: Entity) -> np.ndarray:
        return self.entity_matrix[self.catalog.index[entity]]


def init_model(catalog: EntityCatalog, vocab: Vocabulary, config: TrainConfig) -> EmbeddingModel:
    """Fresh model: entity rows uniform in [-0.5/N, +0.5/N], word matrix all zeros."""
    config.validate()
    if len(catalog) == 0 or len(vocab) == 0:
        raise ValueError("catalog and vocabulary must be non-empty")
    rng = np.random.default_rng(config.seed & _U64_MASK)
    bound = 0.5 / config.dim
    entity_matrix = rng.uniform(-bound, bound, size=(len(catalog), config.dim)).astype(np.float32)
    word_matrix = np.zeros((config.dim, len(vocab)), dtype=np.float32)
    return EmbeddingModel(
        entity_matrix=entity_matrix,
        word_matrix=word_matrix,
        catalog=catalog,
        vocab_words=vocab.words,
        config=config,
    )


# ---------------------------------------------------------------------------
# Losses


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def pair_loss_ns(v_e, w_pos: int, negs, word_matrix):
    """Negative-sampling logistic loss and exact gradients for one training pair.

    loss = -log sigmoid(v.u_pos) - sum_n log sigmoid(-v.u_n), with log inputs
    clamped below at 1e-12. Returns ``(loss, grad_v, grad_u_pos, grad_u_negs)``
    where ``grad_u_negs`` has one row per negative, aligned with ``negs``.
    """
    v = np.asarray(v_e, dtype=np.float64)
    wm = np.asarray(word_matrix, dtype=np.float64)
    negs = np.asarray(negs, dtype=np.int64)
    u_pos = wm[:, w_pos]
    u_negs = wm[:, negs]  # (N, k)
    s_pos = float(v @ u_pos)
    s_negs = v @ u_negs  # (k,)
    sig_pos = float(_sigmoid(s_pos))
    sig_negs = _sigmoid(s_negs)
    loss = -math.log(max(sig_pos, 1e-12)) - float(
        np.log(np.maximum(_sigmoid(-s_negs), 1e-12)).sum()
    )
    g_pos = sig_pos - 1.0
    grad_v = g_pos * u_pos + u_negs @ sig_negs
    grad_u_pos = g_pos * v
    grad_u_negs = np.outer(sig_negs, v)
    return loss, grad_v, grad_u_pos, grad_u_negs


def doc_loss_softmax(entity: Entity | int, tokens: Sequence[str], model: EmbeddingModel) -> float:
    """Mean full-softmax cross-entropy of a record's in-vocabulary tokens.

    Dense over the whole vocabulary, so only suitable at small scale; kept as
    the oracle the sampled objective is checked against.
    """
    idx = entity if isinstance(entity, int) else model.catalog.index[entity]
    word_ids = [model.word_index[t] for t in tokens if t in model.word_index]
    if not word_ids:
        raise ValueError("no trainable tokens")
    v = model.entity_matrix[idx].astype(np.float64)
    logits = v @ model.word_matrix.astype(np.float64)
    logits -= logits.max()
    log_norm = math.log(np.exp(logits).sum())
    return float(np.mean([log_norm - logits[w] for w in word_ids]))


# ---------------------------------------------------------------------------
# Negative-sampling kernel


@njit(cache=True, inline="always")
def _nb_sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


@njit(cache=True, nogil=True)
def _sgd_ns_kernel(
    entity_matrix,
    word_matrix,
    ent_idx,
    word_idx,
    negs,
    valid,
    lr0,
    lr_min,
    total_pairs,
    offset,
    lr_trace,
):
    """One sequential sweep over a block of pairs; returns (loss_sum, n_done, bad_index).

    Gradients for a pair are all evaluated at the pair's starting parameters and
    applied together, matching the analytic per-pair loss. ``bad_index`` >= 0
    flags the first pair whose loss went non-finite (no update applied for it).
    """
    n_pairs = ent_idx.shape[0]
    k = negs.shape[1]
    dim = entity_matrix.shape[1]
    trace = lr_trace.shape[0] > 0
    grad_v = np.empty(dim, dtype=np.float64)
    sig_negs = np.empty(k, dtype=np.float64)
    loss_sum = 0.0
    n_done = 0
    for j in range(n_pairs):
        lr = lr0 * (1.0 - (offset + j) / total_pairs)
        if lr < lr_min:
            lr = lr_min
        if trace:
            lr_trace[offset + j] = lr
        if not valid[j]:
            continue
        e = ent_idx[j]
        wp = word_idx[j]
        s_pos = 0.0
        for d in range(dim):
            s_pos += entity_matrix[e, d] * word_matrix[d, wp]
        sig_pos = _nb_sigmoid(s_pos)
        loss = -math.log(max(sig_pos, 1e-12))
        g_pos = sig_pos - 1.0
        for d in range(dim):
            grad_v[d] = g_pos * word_matrix[d, wp]
        for t in range(k):
            wn = negs[j, t]
            s = 0.0
            for d in range(dim):
                s += entity_matrix[e, d] * word_matrix[d, wn]
            sig = _nb_sigmoid(s)
            sig_negs[t] = sig
            loss += -math.log(max(1.0 - sig, 1e-12))
            for d in range(dim):
                grad_v[d] += sig * word_matrix[d, wn]
        if not math.isfinite(loss):
            return loss_sum, n_done, j
        for t in range(k):
            wn = negs[j, t]
            coef = lr * sig_negs[t]
            for d in range(dim):
                word_matrix[d, wn] -= coef * entity_matrix[e, d]
        coef = lr * g_pos
        for d in range(dim):
            word_matrix[d, wp] -= coef * entity_matrix[e, d]
        for d in range(dim):
            entity_matrix[e, d] -= lr * grad_v[d]
        loss_sum += loss
        n_done += 1
    return loss_sum, n_done, -1


_EMPTY_TRACE = np.empty(0, dtype=np.float64)


def _draw_negatives(vocab: Vocabulary, rng: np.random.Generator, positives: np.ndarray, k: int):
    """k negatives per pair from the unigram^0.75 table, resampled on collision
    with the positive; after 100 rounds a still-colliding pair is marked invalid."""
    n = positives.size
    negs = vocab.neg_table.draw(rng, (n, k)).astype(np.int64)
    collide = negs == positives[:, None]
    attempts = 0
    while collide.any() and attempts < 100:
        redraw = int(collide.sum())
        negs[collide] = vocab.neg_table.draw(rng, redraw)
        collide = negs == positives[:, None]
        attempts += 1
    valid = ~collide.any(axis=1)
    return negs, valid


def _build_schedule(
    corpus: Sequence[DocumentRecord],
    vocab: Vocabulary,
    catalog: EntityCatalog,
    epochs: int,
    rng: np.random.Generator,
):
    """Materialize every epoch's (entity, word, record) pair arrays up front.

    Doing this first fixes the decay horizon (total scheduled pairs) before any
    update runs, and keeps the generator call order independent of kernel
    execution.
    """
    rec_entities = [
        np.array(record_entity_indices(r, catalog), dtype=np.int64) for r in corpus
    ]
    schedule = []
    for _ in range(epochs):
        order = rng.permutation(len(corpus))
        ents, words, recs = [], [], []
        for ri in order:
            widx = surviving_word_indices(corpus[ri], vocab, rng)
            if widx.size == 0:
                continue
            eidx = rec_entities[ri]
            ents.append(np.repeat(eidx, widx.size))
            words.append(np.tile(widx, eidx.size))
            recs.append(np.full(eidx.size * widx.size, ri, dtype=np.int64))
        if ents:
            schedule.append(
                (np.concatenate(ents), np.concatenate(words), np.concatenate(recs))
            )
        else:
            empty = np.empty(0, dtype=np.int64)
            schedule.append((empty, empty, empty))
    return schedule


def _run_ns_epoch(model, ent, wrd, negs, valid, config, total_pairs, offset, lr_trace):
    trace = lr_trace if lr_trace is not None else _EMPTY_TRACE
    if config.threads == 1:
        return _sgd_ns_kernel(
            model.entity_matrix, model.word_matrix, ent, wrd, negs, valid,
            config.lr0, config.lr_min, total_pairs, offset, trace,
        )
    # Lock-free: workers share the matrices and may overwrite each other's
    # updates; acceptable by contract, determinism not guaranteed.
    bounds = np.linspace(0, ent.size, config.threads + 1, dtype=np.int64)
    results = []
    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        futures = []
        for b in range(config.threads):
            lo, hi = int(bounds[b]), int(bounds[b + 1])
            if lo == hi:
                continue
            futures.append(
                pool.submit(
                    _sgd_ns_kernel,
                    model.entity_matrix, model.word_matrix,
                    ent[lo:hi], wrd[lo:hi], negs[lo:hi], valid[lo:hi],
                    config.lr0, config.lr_min, total_pairs, offset + lo, trace,
                )
            )
        results = [f.result() for f in futures]
    loss_sum = sum(r[0] for r in results)
    n_done = sum(r[1] for r in results)
    bad = next((r[2] for r in results if r[2] >= 0), -1)
    return loss_sum, n_done, bad


def _train_ns(corpus, vocab, catalog, config, model, rng, progress, lr_trace):
    schedule = _build_schedule(corpus, vocab, catalog, config.epochs, rng)
    total_pairs = sum(len(ent) for ent, _, _ in schedule)
    if total_pairs == 0:
        return 0.0
    offset = 0
    mean_loss = 0.0
    for epoch, (ent, wrd, rec) in enumerate(schedule, start=1):
        if ent.size == 0:
            continue
        negs, valid = _draw_negatives(vocab, rng, wrd, config.negatives)
        loss_sum, n_done, bad = _run_ns_epoch(
            model, ent, wrd, negs, valid, config, total_pairs, offset, lr_trace
        )
        if bad >= 0:
            rid = corpus[int(rec[bad])].id
            raise NumericError(f"non-finite loss at epoch {epoch}, record {rid}")
        offset += ent.size
        mean_loss = loss_sum / max(n_done, 1)
        if progress is not None:
            progress({"epoch": epoch, "pairs": int(n_done), "mean_loss": mean_loss})
    return mean_loss


def _train_softmax(corpus, vocab, catalog, config, model, rng, progress, lr_trace):
    """Doc-level full-softmax SGD: one update per (record, entity) on the mean
    cross-entropy of the record's surviving tokens."""
    rec_entities = [
        np.array(record_entity_indices(r, catalog), dtype=np.int64) for r in corpus
    ]
    schedule = []
    for _ in range(config.epochs):
        order = rng.permutation(len(corpus))
        steps = []
        for ri in order:
            widx = surviving_word_indices(corpus[ri], vocab, rng)
            if widx.size == 0:
                continue
            steps.extend((ri, int(e), widx) for e in rec_entities[ri])
        schedule.append(steps)
    total_steps = sum(len(s) for s in schedule)
    if total_steps == 0:
        return 0.0
    v_size = len(vocab)
    w_en, w_nv = model.entity_matrix, model.word_matrix
    step_i = 0
    mean_loss = 0.0
    for epoch, steps in enumerate(schedule, start=1):
        loss_sum = 0.0
        for ri, e, widx in steps:
            lr = max(config.lr_min, config.lr0 * (1.0 - step_i / total_steps))
            if lr_trace is not None:
                lr_trace[step_i] = lr
            step_i += 1
            v = w_en[e].astype(np.float64)
            logits = v @ w_nv.astype(np.float64)
            logits -= logits.max()
            exp = np.exp(logits)
            probs = exp / exp.sum()
            target = np.bincount(widx, minlength=v_size) / widx.size
            loss = float(-(target * np.log(np.maximum(probs, 1e-300))).sum())
            if not math.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, record {corpus[ri].id}"
                )
            dlogits = probs - target
            grad_v = w_nv.astype(np.float64) @ dlogits
            w_nv -= (lr * np.outer(v, dlogits)).astype(np.float32)
            w_en[e] -= (lr * grad_v).astype(np.float32)
            loss_sum += loss
        mean_loss = loss_sum / max(len(steps), 1)
        if progress is not None:
            progress({"epoch": epoch, "pairs": len(steps), "mean_loss": mean_loss})
    return mean_loss


def scheduled_pair_count(
    corpus: Sequence[DocumentRecord],
    vocab: Vocabulary,
    catalog: EntityCatalog,
    config: TrainConfig,
) -> int:
    """Total pairs the decay schedule will cover, replaying the seeded schedule."""
    rng = np.random.default_rng([config.seed & _U64_MASK, 1])
    if config.mode is TrainMode.EXACT_SOFTMAX:
        total = 0
        rec_entities = [len(record_entity_indices(r, catalog)) for r in corpus]
        for _ in range(config.epochs):
            order = rng.permutation(len(corpus))
            for ri in order:
                if surviving_word_indices(corpus[ri], vocab, rng).size:
                    total += rec_entities[ri]
        return total
    schedule = _build_schedule(corpus, vocab, catalog, config.epochs, rng)
    return sum(len(ent) for ent, _, _ in schedule)


def train(
    corpus: Sequence[DocumentRecord],
    vocab: Vocabulary,
    catalog: EntityCatalog,
    config: TrainConfig,
    progress: Callable[[dict], None] | None = None,
    lr_trace: np.ndarray | None = None,
) -> EmbeddingModel:
    """Train a model over seed-shuffled records with linear learning-rate decay.

    ``progress`` receives one dict per epoch. ``lr_trace``, when given, must be
    a float64 array of length :func:`scheduled_pair_count`; the kernel writes
    the learning rate actually used at every scheduled pair into it.
    """
    config.validate()
    if not corpus:
        raise CorpusError("empty corpus")
    model = init_model(catalog, vocab, config)
    # stream 1 of the seed: schedule + negatives; stream 0 belongs to init
    rng = np.random.default_rng([config.seed & _U64_MASK, 1])
    if config.mode is TrainMode.EXACT_SOFTMAX:
        final_loss = _train_softmax(
            corpus, vocab, catalog, config, model, rng, progress, lr_trace
        )
    else:
        final_loss = _train_ns(
            corpus, vocab, catalog, config, model, rng, progress, lr_trace
        )
    if not np.isfinite(model.entity_matrix).all() or not np.isfinite(model.word_matrix).all():
        raise NumericError("non-finite values in trained matrices")
    model.final_mean_loss = final_loss
    return model


# ---------------------------------------------------------------------------
# Persistence


def _pack_names(names) -> bytes:
    out = bytearray()
    for name in names:
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw))
        out += raw
    return bytes(out)


def save_model(model: EmbeddingModel, path) -> None:
    """Write the little-endian binary format: header, name tables, float32
    matrices, trailing CRC32 of all preceding bytes."""
    e, n = model.entity_matrix.shape
    v = model.word_matrix.shape[1]
    buf = bytearray()
    buf += MODEL_MAGIC
    buf += struct.pack("<IIII", MODEL_FORMAT_VERSION, e, n, v)
    buf += _pack_names(model.catalog.names())
    buf += _pack_names(model.vocab_words)
    buf += np.ascontiguousarray(model.entity_matrix, dtype="<f4").tobytes()
    buf += np.ascontiguousarray(model.word_matrix, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelIOError("truncated_payload", "truncated payload")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def name(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_model(path) -> EmbeddingModel:
    """Read a model file, verifying structure and the trailing checksum."""
    data = Path(path).read_bytes()
    if data[:8] != MODEL_MAGIC:
        raise ModelIOError("bad_magic", "bad magic")
    reader = _Reader(data)
    reader.pos = 8
    version = reader.u32()
    if version != MODEL_FORMAT_VERSION:
        raise ModelIOError("version_mismatch", f"unsupported format version {version}")
    e, n, v = reader.u32(), reader.u32(), reader.u32()
    if e == 0 or n == 0 or v == 0:
        raise ModelIOError("dimension_mismatch", "zero dimension in header")
    entity_names = [reader.name() for _ in range(e)]
    vocab_words = tuple(reader.name() for _ in range(v))
    entity_matrix = np.frombuffer(reader.take(4 * e * n), dtype="<f4").reshape(e, n).copy()
    word_matrix = np.frombuffer(reader.take(4 * n * v), dtype="<f4").reshape(n, v).copy()
    crc_expected = reader.u32()
    if reader.pos != len(data):
        raise ModelIOError(
            "dimension_mismatch", "payload size does not match header dimensions"
        )
    if zlib.crc32(data[:-4]) != crc_expected:
        raise ModelIOError("crc_mismatch", "checksum mismatch")
    entities = tuple(parse_entity_name(name) for name in entity_names)
    catalog = EntityCatalog(entities=entities, index={x: i for i, x in enumerate(entities)})
    return EmbeddingModel(
        entity_matrix=entity_matrix,
        word_matrix=word_matrix,
        catalog=catalog,
        vocab_words=vocab_words,
        config=None,
    )
