"""Federated rounds: profile, select, train the selected layers, transmit, average.

A round for each client is

1. draw a profiling batch and capture attention on the current global model
   (SAFL only), rank layers and keep the top K;
2. freeze every other layer and train locally for ``local_epochs``;
3. optionally clip and noise per-example gradients (DP-SGD);
4. send the deltas of the trainable blocks, optionally magnitude-pruned;

after which the server averages each block over the clients that sent it,
weighting by sample counts.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import selector as sel
from .encoder import (
    Batch,
    EncoderConfig,
    FreezeMask,
    ModelState,
    forward,
    layer_id,
    loss_and_grads,
    sgd_step,
    warmup_lr,
)
from .privacy import (
    PrivacyLedger,
    PrivacyParams,
    account,
    clip_blocks,
    clip_per_example,
    privatize_update,
)
from .selector import LayerDelta, SelectionMask, TaskTokenSpec
from .synthdata import LabeledCorpus
from .tensor import RngStream, sample_gaussian

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Raised when a client's loss stops being finite."""


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


STRATEGY_KINDS = ("safl", "fedavg", "static_skip", "random_k")


@dataclass(frozen=True)
class Strategy:
    kind: str
    k: int | None = None
    bottom_frozen: int = 0

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {STRATEGY_KINDS}")
        if self.kind in ("safl", "random_k") and (self.k is None or self.k < 1):
            raise ValueError(f"strategy {self.kind} needs k >= 1")
        if self.bottom_frozen < 0:
            raise ValueError("bottom_frozen must be >= 0")

    @classmethod
    def safl(cls, k: int) -> "Strategy":
        return cls("safl", k=k)

    @classmethod
    def fedavg(cls) -> "Strategy":
        return cls("fedavg")

    @classmethod
    def static_skip(cls, bottom_frozen: int) -> "Strategy":
        return cls("static_skip", bottom_frozen=bottom_frozen)

    @classmethod
    def random_k(cls, k: int) -> "Strategy":
        return cls("random_k", k=k)

    @property
    def label(self) -> str:
        if self.kind in ("safl", "random_k"):
            return f"{self.kind}(k={self.k})"
        if self.kind == "static_skip":
            return f"static_skip(bottom={self.bottom_frozen})"
        return self.kind


@dataclass(frozen=True)
class FedConfig:
    """Knobs of the federated loop (model/data settings live elsewhere)."""

    rounds: int = 100
    batch_size: int = 32
    lr: float = 2e-5
    warmup_steps: int = 0
    local_epochs: int = 1
    profile_size: int = 32
    task_tokens: TaskTokenSpec = field(default_factory=TaskTokenSpec)
    score_side: str = "key"
    selection_scope: str = "client"
    consensus_mode: str = "vote"
    aggregation: str = "union"
    train_embedding: bool = True
    train_classifier: bool = True
    prune_fraction: float = 0.0
    privacy: PrivacyParams = field(default_factory=PrivacyParams)
    wire_bits: int = 64
    task: str = "token"
    seed: int = 0
    max_workers: int = 1
    eval_every: int = 1

    def __post_init__(self):
        if self.rounds < 0 or self.batch_size < 1 or self.local_epochs < 1 or self.profile_size < 1:
            raise ValueError("FedConfig: rounds >= 0, batch_size/local_epochs/profile_size >= 1 required")
        if self.lr < 0:
            raise ValueError(f"FedConfig.lr must be >= 0, got {self.lr}")
        if self.selection_scope not in ("client", "global"):
            raise ValueError(f"FedConfig.selection_scope must be client|global, got {self.selection_scope!r}")
        if self.aggregation not in ("union", "intersection"):
            raise ValueError(f"FedConfig.aggregation must be union|intersection, got {self.aggregation!r}")
        if self.wire_bits not in (32, 64):
            raise ValueError(f"FedConfig.wire_bits must be 32 or 64, got {self.wire_bits}")
        if self.task not in ("token", "sequence"):
            raise ValueError(f"FedConfig.task must be token|sequence, got {self.task!r}")
        if not 0.0 <= self.prune_fraction < 1.0:
            raise ValueError(f"FedConfig.prune_fraction must be in [0, 1), got {self.prune_fraction}")

    @property
    def value_bytes(self) -> int:
        return self.wire_bits // 8


# --------------------------------------------------------------------------
# clients and bookkeeping
# --------------------------------------------------------------------------


@dataclass
class ClientState:
    cid: int
    indices: list[int]
    data: LabeledCorpus
    steps_taken: int = 0

    @property
    def num_samples(self) -> int:
        return len(self.data)


def make_clients(corpus: LabeledCorpus, shards: Sequence[Sequence[int]]) -> list[ClientState]:
    seen: set[int] = set()
    for s in shards:
        if seen.intersection(s):
            raise ValueError("client shards overlap")
        seen.update(s)
    return [ClientState(c, list(s), corpus.subset(s)) for c, s in enumerate(shards)]


@dataclass
class RoundComm:
    round: int
    bytes_up: dict[int, int]
    layer_bytes_up: dict[int, int]
    nonzero_up: dict[int, int]
    bytes_down: int
    baseline_bytes_per_client: int
    layer_baseline_bytes_per_client: int

    @property
    def total_up(self) -> int:
        return sum(self.bytes_up.values())

    @property
    def total_layer_up(self) -> int:
        return sum(self.layer_bytes_up.values())

    @property
    def baseline_up(self) -> int:
        return self.baseline_bytes_per_client * len(self.bytes_up)

    @property
    def layer_baseline_up(self) -> int:
        return self.layer_baseline_bytes_per_client * len(self.bytes_up)

    @property
    def reduction(self) -> float:
        return 1.0 - self.total_up / self.baseline_up if self.baseline_up else 0.0

    @property
    def layer_reduction(self) -> float:
        return 1.0 - self.total_layer_up / self.layer_baseline_up if self.layer_baseline_up else 0.0

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "bytes_up": {str(k): v for k, v in self.bytes_up.items()},
            "layer_bytes_up": {str(k): v for k, v in self.layer_bytes_up.items()},
            "nonzero_up": {str(k): v for k, v in self.nonzero_up.items()},
            "bytes_down": self.bytes_down,
            "total_up": self.total_up,
            "baseline_up": self.baseline_up,
            "layer_baseline_up": self.layer_baseline_up,
            "reduction": self.reduction,
            "layer_reduction": self.layer_reduction,
        }


@dataclass
class CommLedger:
    """Per-round traffic with two denominators.

    ``reduction`` compares against everything a full FedAvg client would
    send (embedding and classifier included when trainable);
    ``layer_reduction`` compares transformer-layer bytes only.
    """

    rounds: list[RoundComm] = field(default_factory=list)

    def append(self, entry: RoundComm) -> None:
        self.rounds.append(entry)

    @property
    def total_up(self) -> int:
        return sum(r.total_up for r in self.rounds)

    @property
    def total_down(self) -> int:
        return sum(r.bytes_down for r in self.rounds)

    @property
    def baseline_up(self) -> int:
        return sum(r.baseline_up for r in self.rounds)

    @property
    def reduction(self) -> float:
        return 1.0 - self.total_up / self.baseline_up if self.baseline_up else 0.0

    @property
    def layer_reduction(self) -> float:
        base = sum(r.layer_baseline_up for r in self.rounds)
        return 1.0 - sum(r.total_layer_up for r in self.rounds) / base if base else 0.0


@dataclass
class RoundReport:
    round: int
    strategy: str
    client_losses: dict[int, float]
    selections: dict[int, list[int]]
    metrics: dict[str, float] | None
    comm: RoundComm
    epsilon_total: float
    untouched_layers: list[int]
    trace: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        eps = self.epsilon_total
        return {
            "round": self.round,
            "strategy": self.strategy,
            "client_losses": {str(k): v for k, v in self.client_losses.items()},
            "selections": {str(k): v for k, v in self.selections.items()},
            "metrics": self.metrics,
            "comm": self.comm.to_dict(),
            "epsilon_total": "inf" if math.isinf(eps) else eps,
            "untouched_layers": self.untouched_layers,
        }


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def micro_f1(pred: np.ndarray, gold: np.ndarray, background: int = 0) -> float:
    """Micro-F1 over non-background labels.

    A prediction counts as a true positive only when it equals a
    non-background gold label.  Zero-division rule: precision (recall) is 0
    when nothing is predicted (expected); if both the prediction and the gold
    standard contain no positives at all, the score is 1.
    """
    pred = np.asarray(pred).ravel()
    gold = np.asarray(gold).ravel()
    tp = int(np.sum((pred == gold) & (gold != background)))
    fp = int(np.sum((pred != gold) & (pred != background)))
    fn = int(np.sum((pred != gold) & (gold != background)))
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def evaluate(model: ModelState, eval_set: LabeledCorpus, task: str = "token", chunk: int = 64) -> dict[str, float]:
    """Token micro-F1, sequence accuracy and mean loss on ``eval_set``."""
    if len(eval_set) == 0:
        raise ValueError("evaluate: empty eval set")
    preds, golds = [], []
    seq_correct = 0
    loss_sum = 0.0
    count = 0
    seq_labels = eval_set.sequence_labels() if task == "sequence" else None
    for start in range(0, len(eval_set), chunk):
        idx = range(start, min(start + chunk, len(eval_set)))
        batch = Batch.from_sequences([eval_set.tokens[i] for i in idx], [eval_set.labels[i] for i in idx])
        logits, _ = forward(model, batch)
        if task == "sequence":
            lg = logits[:, 0, :]
            y = seq_labels[list(idx)]
            p = lg.argmax(-1)
            preds.append(p)
            golds.append(y)
            seq_correct += int(np.sum(p == y))
            loss_sum += float(np.sum(_nll(lg, y)))
            count += len(y)
            continue
        valid = batch.valid.copy()
        valid[:, 0] = False
        p = logits.argmax(-1)
        preds.append(p[valid])
        golds.append(batch.labels[valid])
        seq_correct += int(np.sum(np.all((p == batch.labels) | ~valid, axis=1)))
        loss_sum += float(np.sum(_nll(logits[valid], batch.labels[valid])))
        count += int(valid.sum())
    f1 = micro_f1(np.concatenate(preds), np.concatenate(golds))
    return {"f1": f1, "seq_accuracy": seq_correct / len(eval_set), "loss": loss_sum / max(count, 1)}


def _nll(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    return lse - shifted[np.arange(len(y)), y]


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------


@dataclass
class AggregateResult:
    deltas: dict[str, np.ndarray]
    senders: dict[str, list[int]]
    untouched: list[str]


def aggregate(
    client_deltas: Sequence[Sequence[LayerDelta]],
    weights: Sequence[float],
    blocks: Sequence[str] | None = None,
    mode: str = "union",
    client_ids: Sequence[int] | None = None,
) -> AggregateResult:
    """Weighted average of each block over the clients that sent it.

    Weights are renormalised per block over its senders.  Summation runs in
    ascending client id so the result does not depend on argument order.
    ``mode="intersection"`` only averages blocks every client sent.
    """
    if len(client_deltas) != len(weights):
        raise ValueError("aggregate: one weight per client required")
    if any(w <= 0 for w in weights):
        raise ValueError("aggregate: weights must be positive")
    ids = list(range(len(client_deltas))) if client_ids is None else list(client_ids)
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    by_block: dict[str, list[tuple[int, float, np.ndarray]]] = {}
    for i in order:
        for d in client_deltas[i]:
            by_block.setdefault(d.block, []).append((ids[i], float(weights[i]), d.values))
    all_blocks = list(blocks) if blocks is not None else sorted(by_block)
    out: dict[str, np.ndarray] = {}
    senders: dict[str, list[int]] = {}
    untouched: list[str] = []
    for b in all_blocks:
        entries = by_block.get(b, [])
        if not entries or (mode == "intersection" and len(entries) != len(ids)):
            untouched.append(b)
            continue
        acc = np.zeros_like(entries[0][2])
        total = 0.0
        for _, w, v in entries:
            acc += w * v
            total += w
        out[b] = acc / total
        senders[b] = [cid for cid, _, _ in entries]
    return AggregateResult(out, senders, untouched)


def apply_deltas(model: ModelState, deltas: dict[str, np.ndarray]) -> ModelState:
    out = model.copy()
    for b, d in deltas.items():
        out.set_block(b, model.flatten_block(b) + d)
    return out


# --------------------------------------------------------------------------
# one client
# --------------------------------------------------------------------------


@dataclass
class ClientResult:
    cid: int
    deltas: list[LayerDelta]
    mean_loss: float
    steps: int
    trace: dict | None = None


def _client_rng(seed: int, cid: int, rnd: int) -> RngStream:
    return RngStream(seed, f"client:{cid}:round:{rnd}")


def choose_layers(
    model: ModelState, client: ClientState, strategy: Strategy, config: FedConfig, rnd: int
) -> tuple[SelectionMask, sel.LayerScore | None]:
    """Layer ids this client will train this round."""
    L = model.config.num_layers
    rng = _client_rng(config.seed, client.cid, rnd)
    if strategy.kind == "fedavg":
        return SelectionMask(tuple(range(1, L + 1)), rnd), None
    if strategy.kind == "static_skip":
        start = min(strategy.bottom_frozen, L - 1) + 1
        return SelectionMask(tuple(range(start, L + 1)), rnd), None
    if strategy.kind == "random_k":
        k = min(strategy.k, L)
        picked = rng.child("random_k").generator.choice(L, size=k, replace=False) + 1
        return SelectionMask(tuple(sorted(int(i) for i in picked)), rnd), None
    n = min(config.profile_size, client.num_samples)
    idx = sorted(rng.child("profile").generator.choice(client.num_samples, size=n, replace=False))
    batch = Batch.from_sequences([client.data.tokens[i] for i in idx])
    _, records = forward(model, batch, capture=True)
    scores = sel.layer_scores(records, config.task_tokens, side=config.score_side)
    return sel.select_top_k(scores, strategy.k, round=rnd), scores


def _flat_grads(grads: dict, blocks: list[str], model: ModelState) -> list[np.ndarray]:
    return [np.concatenate([grads[b][k].ravel() for k in model.config.param_shapes(b)]) for b in blocks]


def _dp_grads(
    model: ModelState, batch: Batch, mask: FreezeMask, config: FedConfig, rng: RngStream, add_noise: bool
) -> tuple[float, dict]:
    blocks = mask.trainable_blocks()
    total = None
    loss_sum = 0.0
    for r in range(len(batch)):
        one = Batch(batch.tokens[r : r + 1], batch.labels[r : r + 1], batch.lengths[r : r + 1],
                    None if batch.seq_labels is None else batch.seq_labels[r : r + 1])
        loss, g = loss_and_grads(model, one, mask, config.task)
        loss_sum += loss
        clipped = np.concatenate(
            clip_blocks(_flat_grads(g, blocks, model), config.privacy.clip_norm, config.privacy.per_layer_clip)
        )
        total = clipped if total is None else total + clipped
    if add_noise:
        flat = privatize_update(total, len(batch), config.privacy, rng)
    else:
        flat = total / len(batch)
    out: dict = {b: {} for b in model.config.block_names()}
    offset = 0
    for b in blocks:
        n = model.config.block_size(b)
        out[b] = model.unflatten_block(b, flat[offset : offset + n])
        offset += n
    return loss_sum / len(batch), out


def local_train(
    model: ModelState, client: ClientState, selection: SelectionMask, config: FedConfig, rnd: int
) -> ClientResult:
    """Train a copy of ``model`` on the client's shard; return block deltas."""
    L = model.config.num_layers
    mask = FreezeMask.from_selection(L, selection.selected, config.train_embedding, config.train_classifier)
    if not mask.trainable_blocks():
        raise ValueError(f"client {client.cid}: nothing trainable in round {rnd}")
    rng = _client_rng(config.seed, client.cid, rnd)
    local = model
    losses: list[float] = []
    seq_labels = client.data.sequence_labels() if config.task == "sequence" else None
    dp = config.privacy.enabled
    for epoch in range(config.local_epochs):
        order = rng.child(f"epoch:{epoch}").generator.permutation(client.num_samples)
        for start in range(0, client.num_samples, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = Batch.from_sequences(
                [client.data.tokens[i] for i in idx],
                [client.data.labels[i] for i in idx],
                None if seq_labels is None else seq_labels[idx],
            )
            client.steps_taken += 1
            step = client.steps_taken
            if dp:
                noise_rng = rng.child(f"noise:{step}")
                loss, grads = _dp_grads(local, batch, mask, config, noise_rng, config.privacy.mode == "local")
            else:
                loss, grads = loss_and_grads(local, batch, mask, config.task)
            if not math.isfinite(loss):
                raise DivergenceError(f"client {client.cid} diverged at local step {step} (round {rnd}): loss={loss}")
            local = sgd_step(local, grads, warmup_lr(config.lr, step, config.warmup_steps))
            losses.append(loss)
    deltas = []
    for b in mask.trainable_blocks():
        d = LayerDelta(b, local.flatten_block(b) - model.flatten_block(b), value_bytes=config.value_bytes)
        if config.prune_fraction > 0 and b.startswith("layer."):
            d = sel.prune_update(d, config.prune_fraction)
        deltas.append(d)
    return ClientResult(client.cid, deltas, float(np.mean(losses)) if losses else float("nan"), len(losses))


# --------------------------------------------------------------------------
# the round
# --------------------------------------------------------------------------


def baseline_bytes(config: EncoderConfig, fed: FedConfig) -> tuple[int, int]:
    """Bytes one client would send under full FedAvg: (all trainable, layers only)."""
    layers = config.num_layers * config.layer_param_count() * fed.value_bytes
    total = layers
    if fed.train_embedding:
        total += config.block_size("embedding") * fed.value_bytes
    if fed.train_classifier:
        total += config.block_size("classifier") * fed.value_bytes
    return total, layers


def _central_noise(agg: AggregateResult, weights: dict[int, float], config: FedConfig, rnd: int) -> None:
    rng = RngStream(config.seed, f"server:round:{rnd}:noise")
    for b in sorted(agg.deltas):
        w = [weights[c] for c in agg.senders[b]]
        std = config.privacy.noise_std * max(w) / sum(w)
        agg.deltas[b] = agg.deltas[b] + sample_gaussian(rng.child(b), agg.deltas[b].shape, std)


def _clip_update(deltas: list[LayerDelta], clip_norm: float) -> list[LayerDelta]:
    flat = clip_per_example(np.concatenate([d.values for d in deltas]), clip_norm)
    parts = np.split(flat, np.cumsum([d.values.size for d in deltas])[:-1])
    return [LayerDelta(d.block, p, d.sparse, d.value_bytes) for d, p in zip(deltas, parts)]


def run_round(
    server_model: ModelState,
    clients: Sequence[ClientState],
    strategy: Strategy,
    config: FedConfig,
    rnd: int = 0,
    ledger: PrivacyLedger | None = None,
    eval_set: LabeledCorpus | None = None,
) -> tuple[ModelState, RoundReport, PrivacyLedger]:
    """Execute one federated round and return the new global model."""
    if not clients:
        raise ValueError("run_round: need at least one client")
    ledger = ledger if ledger is not None else PrivacyLedger()
    L = server_model.config.num_layers

    picks = [choose_layers(server_model, c, strategy, config, rnd) for c in clients]
    masks = [m for m, _ in picks]
    if strategy.kind == "safl" and config.selection_scope == "global":
        g = sel.consensus_selection(masks, strategy.k, L, config.consensus_mode, rnd)
        masks = [g] * len(clients)
    trace = [
        sel.trace_record(rnd, c.cid, scores, m, strategy.label)
        for c, m, (_, scores) in zip(clients, masks, picks)
    ]

    def work(i: int) -> ClientResult:
        return local_train(server_model, clients[i], masks[i], config, rnd)

    if config.max_workers > 1:
        with ThreadPoolExecutor(max_workers=config.max_workers) as pool:
            results = list(pool.map(work, range(len(clients))))
    else:
        results = [work(i) for i in range(len(clients))]

    central_dp = config.privacy.enabled and config.privacy.mode == "central"
    if central_dp:
        for r in results:
            r.deltas = _clip_update(r.deltas, config.privacy.clip_norm)
    weights = [float(c.num_samples) for c in clients]
    agg = aggregate(
        [r.deltas for r in results],
        weights,
        blocks=server_model.config.block_names(),
        mode=config.aggregation,
        client_ids=[c.cid for c in clients],
    )
    if central_dp and config.privacy.noise_multiplier > 0:
        _central_noise(agg, {c.cid: w for c, w in zip(clients, weights)}, config, rnd)
    new_model = apply_deltas(server_model, agg.deltas)
    ledger = account(ledger, config.privacy)

    base, layer_base = baseline_bytes(server_model.config, config)
    comm = RoundComm(
        round=rnd,
        bytes_up={r.cid: sum(d.byte_size for d in r.deltas) for r in results},
        layer_bytes_up={r.cid: sum(d.byte_size for d in r.deltas if d.block.startswith("layer.")) for r in results},
        nonzero_up={r.cid: sum(d.nonzero for d in r.deltas) for r in results},
        bytes_down=sum(server_model.config.block_size(b) for b in agg.deltas) * config.value_bytes * len(clients),
        baseline_bytes_per_client=base,
        layer_baseline_bytes_per_client=layer_base,
    )
    metrics = None
    if eval_set is not None and config.eval_every > 0 and (rnd + 1) % config.eval_every == 0:
        metrics = evaluate(new_model, eval_set, config.task)
    report = RoundReport(
        round=rnd,
        strategy=strategy.label,
        client_losses={r.cid: r.mean_loss for r in results},
        selections={c.cid: list(m.selected) for c, m in zip(clients, masks)},
        metrics=metrics,
        comm=comm,
        epsilon_total=ledger.epsilon_total,
        untouched_layers=[layer_id(b) for b in agg.untouched if b.startswith("layer.")],
        trace=trace,
    )
    return new_model, report, ledger


# --------------------------------------------------------------------------
# whole runs
# --------------------------------------------------------------------------


@dataclass
class RunResult:
    model: ModelState
    initial_metrics: dict[str, float]
    reports: list[RoundReport]
    comm: CommLedger
    privacy: PrivacyLedger

    @property
    def final_metrics(self) -> dict[str, float]:
        for r in reversed(self.reports):
            if r.metrics is not None:
                return r.metrics
        return self.initial_metrics

    @property
    def best_f1(self) -> float:
        return max([self.initial_metrics["f1"], *(r.metrics["f1"] for r in self.reports if r.metrics)])


def run_federated(
    model: ModelState,
    clients: Sequence[ClientState],
    strategy: Strategy,
    config: FedConfig,
    eval_set: LabeledCorpus,
    on_round: Callable[[RoundReport], None] | None = None,
) -> RunResult:
    comm = CommLedger()
    ledger = PrivacyLedger()
    initial = evaluate(model, eval_set, config.task)
    reports = []
    for rnd in range(config.rounds):
        model, report, ledger = run_round(model, clients, strategy, config, rnd, ledger, eval_set)
        comm.append(report.comm)
        reports.append(report)
        log.info("round %d %s f1=%s", rnd, strategy.label, report.metrics and round(report.metrics["f1"], 4))
        if on_round is not None:
            on_round(report)
    return RunResult(model, initial, reports, comm, ledger)


def run_centralized(
    model: ModelState, train_set: LabeledCorpus, config: FedConfig, eval_set: LabeledCorpus
) -> RunResult:
    """Full-data training: FedAvg with a single client holding everything."""
    client = ClientState(0, list(range(len(train_set))), train_set)
    return run_federated(model, [client], Strategy.fedavg(), config, eval_set)
