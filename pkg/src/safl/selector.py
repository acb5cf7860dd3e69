"""Attention-driven layer ranking, top-K selection and update pruning."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoder import CLS_ID, AttentionRecord


class NoTaskTokensWarning(UserWarning):
    """No profiled token matched the task-token set; all scores are zero."""


@dataclass(frozen=True)
class TaskTokenSpec:
    """Which tokens count as task-relevant.

    ``mode`` is ``"ids"`` (match on token identity) or ``"positions"`` (match
    on sequence index).  The default picks out ``[CLS]``, where both modes
    coincide.
    """

    mode: str = "ids"
    values: frozenset[int] = frozenset({CLS_ID})

    def __post_init__(self):
        if self.mode not in ("ids", "positions"):
            raise ValueError(f"TaskTokenSpec.mode must be 'ids' or 'positions', got {self.mode!r}")
        object.__setattr__(self, "values", frozenset(int(v) for v in self.values))
        if not self.values:
            raise ValueError("TaskTokenSpec: empty token set")

    def indicator(self, tokens: np.ndarray) -> np.ndarray:
        """0/1 vector over the positions of ``tokens``."""
        if self.mode == "ids":
            hit = np.isin(tokens, list(self.values))
        else:
            hit = np.isin(np.arange(len(tokens)), list(self.values))
        return hit.astype(np.float64)


@dataclass
class LayerScore:
    """Cumulative attention mass per layer (index ``l - 1`` is layer ``l``)."""

    raw: np.ndarray
    normalized: np.ndarray
    num_examples_profiled: int
    status: str = "ok"

    @property
    def num_layers(self) -> int:
        return len(self.raw)


@dataclass(frozen=True)
class SelectionMask:
    selected: tuple[int, ...]
    round: int = 0
    scope: str = "client"
    ties: tuple[int, ...] = ()

    def __post_init__(self):
        if list(self.selected) != sorted(set(self.selected)):
            raise ValueError(f"SelectionMask.selected must be strictly increasing, got {self.selected}")


def layer_scores(
    records: Sequence[AttentionRecord], spec: TaskTokenSpec, side: str = "key"
) -> LayerScore:
    """Sum attention weights landing on task tokens, per layer.

    With ``side="key"`` a weight ``alpha[h, i, j]`` counts when token ``j`` is
    task-relevant; ``side="query"`` instead tests token ``i`` (an experimental
    variant, off by default).  ``normalized`` divides the raw sum by the
    number of contributing ``(h, i, j)`` triples.
    """
    if not records:
        raise ValueError("layer_scores: no attention records")
    if side not in ("key", "query"):
        raise ValueError(f"layer_scores: side must be 'key' or 'query', got {side!r}")
    num_layers = len(records[0].layers)
    raw = np.zeros(num_layers)
    contributing = 0.0
    for rec in records:
        if len(rec.layers) != num_layers:
            raise ValueError("layer_scores: records come from models with different depth")
        ind = spec.indicator(rec.tokens)
        heads, n = rec.layers[0].shape[0], rec.seq_len
        contributing += heads * n * ind.sum()
        for li, attn in enumerate(rec.layers):
            if side == "key":
                raw[li] += float(attn.sum(axis=(0, 1)) @ ind)
            else:
                raw[li] += float(attn.sum(axis=(0, 2)) @ ind)
    status = "ok"
    if contributing == 0:
        status = "no_task_tokens"
        warnings.warn("layer_scores: task-token set matched nothing; scores are zero", NoTaskTokensWarning)
        normalized = np.zeros(num_layers)
    else:
        normalized = raw / contributing
    return LayerScore(raw, normalized, len(records), status)


def layer_scores_reference(records: Sequence[AttentionRecord], spec: TaskTokenSpec) -> np.ndarray:
    """Literal triple loop over heads, queries and keys (test oracle)."""
    num_layers = len(records[0].layers)
    out = [0.0] * num_layers
    for rec in records:
        ind = spec.indicator(rec.tokens)
        for li in range(num_layers):
            a = rec.layers[li]
            total = 0.0
            for h in range(a.shape[0]):
                for i in range(a.shape[1]):
                    for j in range(a.shape[2]):
                        total += a[h, i, j] * ind[j]
            out[li] += total
    return np.array(out)


def select_top_k(scores: LayerScore | Sequence[float], k: int, round: int = 0, scope: str = "client") -> SelectionMask:
    """Pick the ``k`` layers with the largest raw score (ties -> lower id)."""
    if k < 1:
        raise ValueError(f"select_top_k: k must be >= 1, got {k}")
    raw = np.asarray(scores.raw if isinstance(scores, LayerScore) else scores, dtype=np.float64)
    n = len(raw)
    if k >= n:
        return SelectionMask(tuple(range(1, n + 1)), round, scope)
    order = sorted(range(n), key=lambda i: (-raw[i], i))
    chosen = order[:k]
    cutoff = raw[chosen[-1]]
    # layers tied with the last admitted score; recorded for the trace
    tied = tuple(i + 1 for i in range(n) if raw[i] == cutoff)
    ties = tied if len(tied) > 1 else ()
    return SelectionMask(tuple(sorted(i + 1 for i in chosen)), round, scope, ties)


def consensus_selection(masks: Sequence[SelectionMask], k: int, num_layers: int, mode: str = "vote", round: int = 0) -> SelectionMask:
    """Server-side global mask from per-client masks.

    ``"vote"`` keeps the ``k`` most frequently chosen layers (ties -> lower
    id); ``"union"`` keeps every layer any client chose.
    """
    counts = np.zeros(num_layers)
    for m in masks:
        for lid in m.selected:
            counts[lid - 1] += 1
    if mode == "union":
        return SelectionMask(tuple(int(i) + 1 for i in np.flatnonzero(counts)), round, "global")
    if mode != "vote":
        raise ValueError(f"consensus_selection: unknown mode {mode!r}")
    picked = select_top_k(counts, k, round, "global")
    return SelectionMask(picked.selected, round, "global", picked.ties)


@dataclass
class LayerDelta:
    """Parameter update of one block, as sent over the wire."""

    block: str
    values: np.ndarray
    sparse: bool = False
    value_bytes: int = 8

    @property
    def nonzero(self) -> int:
        return int(np.count_nonzero(self.values))

    @property
    def index_overhead(self) -> int:
        """Bitmap of kept positions when sparse, one bit per entry."""
        return (self.values.size + 7) // 8 if self.sparse else 0

    @property
    def byte_size(self) -> int:
        if self.sparse:
            return self.nonzero * self.value_bytes + self.index_overhead
        return self.values.size * self.value_bytes


def _kept_count(n: int, fraction: float) -> int:
    # exact decimal arithmetic so e.g. 0.85 * n never floors one short
    keep = Fraction(1) - Fraction(str(fraction))
    return (keep.numerator * n) // keep.denominator


def prune_update(delta: LayerDelta, fraction: float) -> LayerDelta:
    """Zero the smallest-magnitude entries, keeping ``floor((1 - fraction) * n)``.

    The result is flagged sparse so its byte size reflects only the surviving
    values plus a position bitmap.  Ties in magnitude are broken by position.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"prune_update: fraction must be in [0, 1), got {fraction}")
    if fraction == 0.0:
        return delta
    v = delta.values
    n = v.size
    drop = n - _kept_count(n, fraction)
    out = v.copy()
    if drop > 0:
        order = np.argsort(np.abs(v), kind="stable")
        out[order[:drop]] = 0.0
    return LayerDelta(delta.block, out, sparse=True, value_bytes=delta.value_bytes)


# --------------------------------------------------------------------------
# selection trace (JSONL)
# --------------------------------------------------------------------------


def trace_record(round: int, client: int | str, scores: LayerScore | None, mask: SelectionMask, strategy: str) -> dict:
    rec = {
        "round": round,
        "client": client,
        "strategy": strategy,
        "selected": list(mask.selected),
        "ties": list(mask.ties),
        "num_layers": None,
        "raw_scores": None,
        "normalized_scores": None,
        "status": None,
    }
    if scores is not None:
        rec.update(
            num_layers=scores.num_layers,
            raw_scores=[float(x) for x in scores.raw],
            normalized_scores=[float(x) for x in scores.normalized],
            status=scores.status,
            examples=scores.num_examples_profiled,
        )
    return rec


def write_trace(records: Iterable[dict], path: str | Path, append: bool = True) -> None:
    with open(path, "a" if append else "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_trace(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"selection trace not found: {path}")
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
