"""Corpus ingestion, vocabulary and entity catalog construction, training-pair streams.

A corpus is a list of :class:`DocumentRecord` snapshots. Each record carries the
tokens of one article snapshot plus the entities that describe it: the
``<category>_<year>`` task entity and one language entity per translation.
Records for the same article id may appear once per snapshot year.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import CorpusError

# Top-level task category slugs accepted by the default configuration.
DEFAULT_CATEGORIES = (
    "arts", "cars", "computers", "education", "family", "finance", "food",
    "health", "hobbies", "holidays", "home", "personal", "pets", "philosophy",
    "relations", "sports", "travel", "work", "youth",
)

# Language code slugs accepted by the default configuration.
DEFAULT_LANGUAGES = (
    "por", "spa", "fre", "dut", "ger", "ita", "cze", "rus", "tur", "ara",
    "hin", "man", "tha", "vie", "ind", "kor", "jpn",
)

NUM_TOKEN = "<num>"

_WORD_RE = re.compile(r"[^\W_]+")  # maximal runs of Unicode alphanumerics
_DIGITS_RE = re.compile(r"\d+")

_REQUIRED_FIELDS = ("id", "task_category", "year", "languages", "text")


def tokenize(raw_text: str) -> list[str]:
    """Lowercase and split on maximal runs of non-alphanumeric characters.

    Purely numeric tokens are collapsed to the ``<num>`` sentinel so that step
    counts, years and similar digits do not inflate the vocabulary.
    """
    tokens = _WORD_RE.findall(raw_text.lower())
    return [NUM_TOKEN if _DIGITS_RE.fullmatch(t) else t for t in tokens]


@dataclass(frozen=True)
class CorpusConfig:
    """Validation and preprocessing settings for ingestion and vocabulary building."""

    languages: frozenset[str] = frozenset(DEFAULT_LANGUAGES)
    categories: frozenset[str] = frozenset(DEFAULT_CATEGORIES)
    year_min: int = 2005
    year_max: int = 2030
    min_count: int = 5
    subsample_t: float | None = 1e-3  # None disables frequent-word subsampling


@dataclass(frozen=True)
class DocumentRecord:
    """One article snapshot: token content plus the entities that describe it."""

    id: str
    task_category: str
    year: int
    languages: frozenset[str]
    tokens: tuple[str, ...]

    @property
    def snapshot_key(self) -> tuple[str, int]:
        return (self.id, self.year)


@dataclass
class IngestReport:
    """Per-file ingestion outcome: acceptance counts and per-line reject reasons."""

    accepted: int = 0
    rejected: int = 0
    unknown_field_warnings: int = 0
    rejects: list[tuple[int, str]] = field(default_factory=list)

    def add_reject(self, line_no: int, reason: str) -> None:
        self.rejected += 1
        self.rejects.append((line_no, reason))

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "rejected": self.rejected,
            "unknown_field_warnings": self.unknown_field_warnings,
            "rejects": [{"line": n, "reason": r} for n, r in self.rejects],
        }


def _validate_line(obj: object, config: CorpusConfig, seen: set[tuple[str, int]]) -> DocumentRecord | str:
    """Return a record, or a reject reason string."""
    if not isinstance(obj, dict):
        return "bad json"
    for name in _REQUIRED_FIELDS:
        if name not in obj:
            return f"missing field: {name}"
    rid = obj["id"]
    category = obj["task_category"]
    year = obj["year"]
    languages = obj["languages"]
    text = obj["text"]
    if not isinstance(rid, str):
        return "bad type: id"
    if not rid:
        return "empty id"
    if not isinstance(category, str):
        return "bad type: task_category"
    if isinstance(year, bool) or not isinstance(year, int):
        return "bad type: year"
    if not isinstance(languages, list) or not all(isinstance(x, str) for x in languages):
        return "bad type: languages"
    if not isinstance(text, str):
        return "bad type: text"
    if not (config.year_min <= year <= config.year_max):
        return "year out of range"
    if category not in config.categories:
        return f"unknown category: {category}"
    for code in languages:
        if code not in config.languages:
            return f"unknown language: {code}"
    if (rid, year) in seen:
        return "duplicate id"
    tokens = tokenize(text)
    if not tokens:
        return "no tokens"
    return DocumentRecord(
        id=rid,
        task_category=category,
        year=year,
        languages=frozenset(languages),
        tokens=tuple(tokens),
    )


def ingest(path, config: CorpusConfig) -> tuple[list[DocumentRecord], IngestReport]:
    """Read a JSONL corpus file, validating every line against ``config``.

    Malformed lines are rejected individually and recorded in the report; an
    unreadable file raises :class:`CorpusError`. Record order is preserved.
    """
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"unreadable corpus file: {path}: {exc}") from exc

    records: list[DocumentRecord] = []
    report = IngestReport()
    seen: set[tuple[str, int]] = set()
    with fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                report.add_reject(line_no, "empty line")
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                report.add_reject(line_no, "bad json")
                continue
            result = _validate_line(obj, config, seen)
            if isinstance(result, str):
                report.add_reject(line_no, result)
                continue
            extra = set(obj) - set(_REQUIRED_FIELDS)
            if extra:
                report.unknown_field_warnings += len(extra)
            seen.add(result.snapshot_key)
            records.append(result)
            report.accepted += 1
    return records, report


# ---------------------------------------------------------------------------
# Vocabulary


class AliasTable:
    """Walker alias sampler over ``len(weights)`` indices.

    Draw probabilities reproduce the requested weights exactly up to float
    rounding, so the unigram^0.75 negative-sampling distribution carries no
    table quantization error.
    """

    def __init__(self, weights):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty 1-D array")
        total = w.sum()
        if not np.all(np.isfinite(w)) or np.any(w < 0) or total <= 0:
            raise ValueError("weights must be finite, non-negative, with positive sum")
        n = w.size
        scaled = w * (n / total)
        prob = np.ones(n, dtype=np.float64)
        alias = np.arange(n, dtype=np.int64)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s = small.pop()
            l = large.pop()
            prob[s] = scaled[s]
            alias[s] = l
            scaled[l] -= 1.0 - scaled[s]
            if scaled[l] < 1.0:
                small.append(l)
            else:
                large.append(l)
        # leftovers of either list sit at probability 1 (rounding residue)
        self.prob = prob
        self.alias = alias

    def __len__(self) -> int:
        return self.prob.size

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        """Sample indices from the table; deterministic given the generator state."""
        idx = rng.integers(0, self.prob.size, size=size)
        accept = rng.random(size=idx.shape) < self.prob[idx]
        return np.where(accept, idx, self.alias[idx])

    def probabilities(self) -> np.ndarray:
        """Exact per-index draw probability implied by the table."""
        out = self.prob / self.prob.size
        np.add.at(out, self.alias, (1.0 - self.prob) / self.prob.size)
        return out


@dataclass
class Vocabulary:
    """Retained words with counts, subsampling threshold and negative-sampling table.

    ``words`` is ordered by descending count with lexicographic tie-break, so a
    given corpus and configuration always yields the same vocabulary.
    """

    words: tuple[str, ...]
    index: dict[str, int]
    counts: np.ndarray
    total_tokens: int
    subsample_t: float | None
    neg_table: AliasTable

    def __len__(self) -> int:
        return len(self.words)

    def keep_probabilities(self) -> np.ndarray:
        """Per-word subsampling keep probability; all ones when disabled."""
        if self.subsample_t is None:
            return np.ones(len(self.words), dtype=np.float64)
        freq = self.counts / float(self.total_tokens)
        t = self.subsample_t
        return np.minimum(1.0, (np.sqrt(freq / t) + 1.0) * (t / freq))


def subsample_keep_prob(f: float, t: float) -> float:
    """Keep probability ``min(1, (sqrt(f/t) + 1) * (t/f))`` for corpus frequency ``f``."""
    if not (0.0 < f <= 1.0):
        raise ValueError("word frequency must lie in (0, 1]")
    if t <= 0.0:
        raise ValueError("subsample threshold must be positive")
    return min(1.0, (math.sqrt(f / t) + 1.0) * (t / f))


def build_vocabulary(
    corpus: Sequence[DocumentRecord],
    min_count: int = 5,
    t: float | None = 1e-3,
) -> Vocabulary:
    """Count tokens across the corpus and retain words with count >= ``min_count``.

    ``t`` is the frequent-word subsampling threshold; pass ``None`` to disable
    subsampling entirely (training then consumes every in-vocabulary token).
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    if t is not None and t <= 0.0:
        raise ValueError("subsample threshold must be positive (or None to disable)")
    if not corpus:
        raise CorpusError("empty corpus")
    counter: Counter[str] = Counter()
    for record in corpus:
        counter.update(record.tokens)
    items = sorted(
        ((w, c) for w, c in counter.items() if c >= min_count),
        key=lambda wc: (-wc[1], wc[0]),
    )
    if not items:
        raise CorpusError("empty vocabulary: no word reaches min_count")
    words = tuple(w for w, _ in items)
    counts = np.array([c for _, c in items], dtype=np.int64)
    return Vocabulary(
        words=words,
        index={w: i for i, w in enumerate(words)},
        counts=counts,
        total_tokens=int(counts.sum()),
        subsample_t=t,
        neg_table=AliasTable(counts.astype(np.float64) ** 0.75),
    )


# ---------------------------------------------------------------------------
# Entities


class EntityKind(Enum):
    LANGUAGE = "language"
    TASK_YEAR = "task_year"


@dataclass(frozen=True)
class Entity:
    """A training input symbol: a language code or a task-category/year pair."""

    kind: EntityKind
    language_code: str | None = None
    category: str | None = None
    year: int | None = None

    def __post_init__(self):
        if self.kind is EntityKind.LANGUAGE:
            if not self.language_code or self.category is not None or self.year is not None:
                raise ValueError("language entity carries exactly a language code")
        else:
            if self.language_code is not None or not self.category or self.year is None:
                raise ValueError("task-year entity carries exactly a category and a year")

    @classmethod
    def language(cls, code: str) -> "Entity":
        return cls(EntityKind.LANGUAGE, language_code=code)

    @classmethod
    def task_year(cls, category: str, year: int) -> "Entity":
        return cls(EntityKind.TASK_YEAR, category=category, year=year)

    @property
    def name(self) -> str:
        """Canonical name: the bare code for languages, ``<category>_<year>`` otherwise."""
        if self.kind is EntityKind.LANGUAGE:
            return self.language_code
        return f"{self.category}_{self.year}"


def parse_entity_name(name: str) -> Entity:
    """Inverse of :attr:`Entity.name`; a trailing ``_<digits>`` suffix marks a task-year."""
    stem, sep, suffix = name.rpartition("_")
    if sep and stem and suffix.isdigit():
        return Entity.task_year(stem, int(suffix))
    return Entity.language(name)


@dataclass(frozen=True)
class EntityCatalog:
    """Stable entity ordering: languages first (by code), then task-years
    (by category, then ascending year)."""

    entities: tuple[Entity, ...]
    index: dict[Entity, int]

    def __len__(self) -> int:
        return len(self.entities)

    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.entities)

    def language_indices(self) -> dict[str, int]:
        return {
            e.language_code: i
            for i, e in enumerate(self.entities)
            if e.kind is EntityKind.LANGUAGE
        }

    def task_year_indices(self) -> dict[tuple[str, int], int]:
        return {
            (e.category, e.year): i
            for i, e in enumerate(self.entities)
            if e.kind is EntityKind.TASK_YEAR
        }

    def categories(self) -> tuple[str, ...]:
        return tuple(sorted({e.category for e in self.entities if e.kind is EntityKind.TASK_YEAR}))

    def years(self) -> tuple[int, ...]:
        return tuple(sorted({e.year for e in self.entities if e.kind is EntityKind.TASK_YEAR}))

    @classmethod
    def from_entities(cls, entities: Iterable[Entity]) -> "EntityCatalog":
        langs = sorted(
            {e.language_code for e in entities if e.kind is EntityKind.LANGUAGE}
        )
        task_years = sorted(
            {(e.category, e.year) for e in entities if e.kind is EntityKind.TASK_YEAR}
        )
        ordered = tuple(
            [Entity.language(c) for c in langs]
            + [Entity.task_year(c, y) for c, y in task_years]
        )
        return cls(entities=ordered, index={e: i for i, e in enumerate(ordered)})


def build_entity_catalog(corpus: Sequence[DocumentRecord]) -> EntityCatalog:
    """Catalog of every language and (category, year) pair appearing in the corpus."""
    if not corpus:
        raise CorpusError("empty corpus")
    entities: list[Entity] = []
    for record in corpus:
        entities.append(Entity.task_year(record.task_category, record.year))
        entities.extend(Entity.language(code) for code in record.languages)
    return EntityCatalog.from_entities(entities)


# ---------------------------------------------------------------------------
# Training pairs


def record_entity_indices(record: DocumentRecord, catalog: EntityCatalog) -> list[int]:
    """Entity indices of a record: its task-year first, then languages sorted by code."""
    indices = [catalog.index[Entity.task_year(record.task_category, record.year)]]
    indices.extend(catalog.index[Entity.language(c)] for c in sorted(record.languages))
    return indices


def surviving_word_indices(
    record: DocumentRecord, vocab: Vocabulary, rng: np.random.Generator
) -> np.ndarray:
    """Vocabulary indices of the record's tokens after lookup and subsampling.

    Consumes exactly one batch of uniform draws per record (none when the
    record has no in-vocabulary tokens or subsampling is disabled), so pair
    generation is deterministic given the generator state.
    """
    idx = np.array(
        [vocab.index[t] for t in record.tokens if t in vocab.index], dtype=np.int64
    )
    if idx.size == 0 or vocab.subsample_t is None:
        return idx
    keep = vocab.keep_probabilities()[idx]
    return idx[rng.random(idx.size) < keep]


def pair_stream(
    record: DocumentRecord,
    vocab: Vocabulary,
    catalog: EntityCatalog,
    rng: np.random.Generator,
) -> list[tuple[int, int]]:
    """(entity_index, word_index) training pairs for one record.

    Token survival is decided once per record, then crossed with every entity
    of the record, so with subsampling disabled the pair count is exactly
    ``len(in-vocab tokens) * len(entities)``. Out-of-vocabulary tokens are
    skipped silently.
    """
    entity_indices = record_entity_indices(record, catalog)
    words = surviving_word_indices(record, vocab, rng)
    return [(e, int(w)) for e in entity_indices for w in words]
