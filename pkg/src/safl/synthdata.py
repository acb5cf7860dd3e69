"""Synthetic clinical-like corpus with BIO entity labels, plus Dirichlet
label-skew partitioning across clients.

Vocabulary layout: ``0`` padding, ``1`` ``[CLS]``, then one section-marker
token per entity type, background words, entity head words and entity tail
words.  Head and tail words are shared by all entity types: a span's type is
given by the section marker somewhere in the same sequence, so resolving it
needs attention rather than a per-token lookup.

Label ``0`` is background (``O``); entity type ``e`` (0-based) uses
``B = 1 + 2e`` and ``I = 2 + 2e``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import CLS_ID
from .tensor import RngStream

FIRST_MARKER_ID = 2


@dataclass(frozen=True)
class CorpusSpec:
    """Synthetic tagging corpus settings.

    ``entity_density`` is the chance that a span starts at any body position
    following a background token, so the tagged-token share runs a little
    higher once multi-token spans are counted.
    """

    vocab_size: int = 256
    num_sequences: int = 600
    min_len: int = 12
    max_len: int = 20
    num_entity_types: int = 3
    entity_density: float = 0.3
    max_span: int = 3
    background_fraction: float = 0.5
    seed: int = 0

    @property
    def num_labels(self) -> int:
        return 1 + 2 * self.num_entity_types

    def _layout(self) -> tuple[int, int, int]:
        first_word = FIRST_MARKER_ID + self.num_entity_types
        words = self.vocab_size - first_word
        n_bg = int(words * self.background_fraction)
        n_head = (words - n_bg) // 2
        return first_word, n_bg, n_head

    def validate(self) -> None:
        if self.num_sequences < 1:
            raise ValueError("CorpusSpec.num_sequences must be >= 1")
        if not 3 <= self.min_len <= self.max_len:
            raise ValueError(f"CorpusSpec: need 3 <= min_len <= max_len, got {self.min_len}, {self.max_len}")
        if not 0.0 <= self.entity_density < 1.0:
            raise ValueError(f"CorpusSpec.entity_density must be in [0, 1), got {self.entity_density}")
        if self.max_span < 1 or self.num_entity_types < 1:
            raise ValueError("CorpusSpec: max_span and num_entity_types must be >= 1")
        _, n_bg, n_head = self._layout()
        if n_bg < 1 or n_head < 1:
            raise ValueError(f"CorpusSpec: vocab_size {self.vocab_size} too small for the sub-vocabularies")
        # body excludes [CLS] and the section marker
        body = self.min_len - 2
        if self.entity_density > 0 and body * self.entity_density < 1:
            raise ValueError(
                f"CorpusSpec: entity_density {self.entity_density} cannot place a span in "
                f"sequences of minimum length {self.min_len}"
            )

    def marker_id(self, etype: int) -> int:
        return FIRST_MARKER_ID + etype

    def background_ids(self) -> np.ndarray:
        first, n_bg, _ = self._layout()
        return np.arange(first, first + n_bg)

    def head_ids(self) -> np.ndarray:
        first, n_bg, n_head = self._layout()
        return np.arange(first + n_bg, first + n_bg + n_head)

    def tail_ids(self) -> np.ndarray:
        first, n_bg, n_head = self._layout()
        return np.arange(first + n_bg + n_head, first + n_bg + 2 * n_head)


@dataclass
class LabeledCorpus:
    tokens: list[list[int]]
    labels: list[list[int]]
    num_entity_types: int

    def __len__(self) -> int:
        return len(self.tokens)

    def subset(self, indices: Sequence[int]) -> "LabeledCorpus":
        return LabeledCorpus(
            [self.tokens[i] for i in indices], [self.labels[i] for i in indices], self.num_entity_types
        )

    def dominant_types(self) -> np.ndarray:
        """Most frequent entity type per sequence (by B tags); ``-1`` if none."""
        out = np.full(len(self), -1, dtype=np.int64)
        for r, labs in enumerate(self.labels):
            counts = entity_type_counts(labs, self.num_entity_types)
            if counts.sum():
                out[r] = int(np.argmax(counts))
        return out

    def sequence_labels(self) -> np.ndarray:
        """Sequence-classification target: dominant type + 1, or 0 for none."""
        return self.dominant_types() + 1

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for t, l in zip(self.tokens, self.labels):
                fh.write(json.dumps({"tokens": t, "labels": l}) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path, num_entity_types: int) -> "LabeledCorpus":
        tokens, labels = [], []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    tokens.append(rec["tokens"])
                    labels.append(rec["labels"])
        return cls(tokens, labels, num_entity_types)


def entity_type_counts(labels: Sequence[int], num_entity_types: int) -> np.ndarray:
    counts = np.zeros(num_entity_types, dtype=np.int64)
    for lab in labels:
        if lab > 0 and lab % 2 == 1:
            counts[(lab - 1) // 2] += 1
    return counts


def generate(spec: CorpusSpec) -> LabeledCorpus:
    """Generate the corpus deterministically from ``spec.seed``.

    Every sequence carries one section marker (at a random body position)
    naming its entity type; all spans in the sequence take that type.
    """
    spec.validate()
    rng = RngStream(spec.seed, "corpus").generator
    bg, heads, tails = spec.background_ids(), spec.head_ids(), spec.tail_ids()
    tokens: list[list[int]] = []
    labels: list[list[int]] = []
    for _ in range(spec.num_sequences):
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        etype = int(rng.integers(spec.num_entity_types))
        body_toks: list[int] = []
        body_labs: list[int] = []
        room = n - 2
        prev_entity = False
        while len(body_toks) < room:
            left = room - len(body_toks)
            if not prev_entity and spec.entity_density > 0 and rng.random() < spec.entity_density:
                span = int(rng.integers(1, min(spec.max_span, left) + 1))
                body_toks.append(int(rng.choice(heads)))
                body_toks.extend(int(w) for w in rng.choice(tails, size=span - 1))
                body_labs.extend([1 + 2 * etype] + [2 + 2 * etype] * (span - 1))
                prev_entity = True
            else:
                body_toks.append(int(rng.choice(bg)))
                body_labs.append(0)
                prev_entity = False
        # marker goes between tokens, never splitting a span
        slots = [i for i in range(room + 1) if i == room or body_labs[i] % 2 == 1 or body_labs[i] == 0]
        at = int(rng.choice(slots))
        body_toks.insert(at, spec.marker_id(etype))
        body_labs.insert(at, 0)
        tokens.append([CLS_ID, *body_toks])
        labels.append([0, *body_labs])
    return LabeledCorpus(tokens, labels, spec.num_entity_types)


def train_eval_split(corpus: LabeledCorpus, eval_fraction: float, seed: int) -> tuple[LabeledCorpus, LabeledCorpus]:
    rng = RngStream(seed, "split").generator
    order = rng.permutation(len(corpus))
    n_eval = max(1, int(round(len(corpus) * eval_fraction)))
    return corpus.subset(sorted(order[n_eval:])), corpus.subset(sorted(order[:n_eval]))


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int = 10
    dirichlet_alpha: float = 1.0
    seed: int = 0
    max_resamples: int = 100


class PartitionError(RuntimeError):
    pass


def partition(corpus: LabeledCorpus, spec: PartitionSpec) -> list[list[int]]:
    """Dirichlet label-skew split of sequence indices across clients.

    Sequences are grouped by dominant entity type (no-entity sequences form
    their own group); each group is divided among clients in proportions
    drawn from ``Dirichlet(alpha)``.  Draws leaving any client empty are
    repeated up to ``max_resamples`` times.
    """
    n = len(corpus)
    if spec.num_clients < 1:
        raise ValueError("PartitionSpec.num_clients must be >= 1")
    if spec.num_clients > n:
        raise ValueError(f"cannot split {n} sequences across {spec.num_clients} clients")
    if spec.dirichlet_alpha <= 0:
        raise ValueError("PartitionSpec.dirichlet_alpha must be > 0")
    if spec.num_clients == 1:
        return [list(range(n))]
    groups = corpus.dominant_types()
    rng = RngStream(spec.seed, "partition").generator
    for _ in range(spec.max_resamples):
        shards: list[list[int]] = [[] for _ in range(spec.num_clients)]
        for g in np.unique(groups):
            idx = np.flatnonzero(groups == g)
            idx = idx[rng.permutation(len(idx))]
            props = rng.dirichlet(np.full(spec.num_clients, spec.dirichlet_alpha))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
            for c, part in enumerate(np.split(idx, cuts)):
                shards[c].extend(int(i) for i in part)
        if all(shards):
            return [sorted(s) for s in shards]
    raise PartitionError(
        f"partition left a client empty after {spec.max_resamples} resamples "
        f"(alpha={spec.dirichlet_alpha}, clients={spec.num_clients})"
    )


def type_histogram(corpus: LabeledCorpus, indices: Sequence[int]) -> np.ndarray:
    """Normalised entity-type histogram (B-tag counts) over ``indices``."""
    counts = np.zeros(corpus.num_entity_types)
    for i in indices:
        counts += entity_type_counts(corpus.labels[i], corpus.num_entity_types)
    total = counts.sum()
    return counts / total if total else counts


def skew_statistic(corpus: LabeledCorpus, shards: Sequence[Sequence[int]]) -> float:
    """Largest ratio of a client's entity-type share to the global share."""
    global_h = type_histogram(corpus, range(len(corpus)))
    worst = 0.0
    for shard in shards:
        h = type_histogram(corpus, shard)
        ratio = np.divide(h, global_h, out=np.zeros_like(h), where=global_h > 0)
        worst = max(worst, float(ratio.max()))
    return worst


def save_partition(shards: Sequence[Sequence[int]], path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump({str(c): list(map(int, s)) for c, s in enumerate(shards)}, fh)


def load_partition(path: str | Path) -> list[list[int]]:
    with open(path) as fh:
        raw = json.load(fh)
    return [list(raw[k]) for k in sorted(raw, key=int)]
