"""Small bidirectional transformer encoder for token classification.

Parameters live in a :class:`ModelState` as named numpy blocks:
``embedding``, ``layer.1`` .. ``layer.L`` and ``classifier``.  Each layer is
a post-layer-norm residual block (self-attention, then feed-forward).
Position 0 always holds the reserved ``[CLS]`` token.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import RngStream, Tensor

PAD_ID = 0
CLS_ID = 1
_MASK_NEG = -1e30
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 12
    num_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    vocab_size: int = 256
    max_seq_len: int = 64
    num_labels: int = 7

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) < 1:
                raise ValueError(f"EncoderConfig.{name} must be >= 1, got {value}")
        if self.d_model % self.num_heads:
            raise ValueError(
                f"EncoderConfig: d_model={self.d_model} not divisible by num_heads={self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    def param_shapes(self, block: str) -> dict[str, tuple[int, ...]]:
        """Ordered parameter shapes of one named block."""
        d, f = self.d_model, self.d_ff
        if block == "embedding":
            return {"tokens": (self.vocab_size, d), "positions": (self.max_seq_len, d)}
        if block == "classifier":
            return {"ln_g": (d,), "ln_b": (d,), "weight": (d, self.num_labels), "bias": (self.num_labels,)}
        layer_id(block, self.num_layers)
        return {
            "wq": (d, d), "bq": (d,),
            "wk": (d, d), "bk": (d,),
            "wv": (d, d), "bv": (d,),
            "wo": (d, d), "bo": (d,),
            "ln1_g": (d,), "ln1_b": (d,),
            "w1": (d, f), "b1": (f,),
            "w2": (f, d), "b2": (d,),
            "ln2_g": (d,), "ln2_b": (d,),
        }  # fmt: skip

    def block_names(self) -> list[str]:
        return ["embedding", *layer_names(self.num_layers), "classifier"]

    def block_size(self, block: str) -> int:
        return sum(math.prod(s) for s in self.param_shapes(block).values())

    def layer_param_count(self) -> int:
        return self.block_size("layer.1")


def layer_names(num_layers: int) -> list[str]:
    return [f"layer.{i}" for i in range(1, num_layers + 1)]


def layer_id(block: str, num_layers: int | None = None) -> int:
    if not block.startswith("layer."):
        raise KeyError(f"not a layer block: {block!r}")
    lid = int(block.split(".", 1)[1])
    if lid < 1 or (num_layers is not None and lid > num_layers):
        raise KeyError(f"layer id {lid} out of range 1..{num_layers}")
    return lid


Block = dict[str, np.ndarray]


@dataclass
class ModelState:
    config: EncoderConfig
    blocks: dict[str, Block]

    @classmethod
    def init(cls, config: EncoderConfig, rng: RngStream) -> "ModelState":
        """Random initialisation (scaled normal weights, zero biases, unit norms)."""
        blocks: dict[str, Block] = {}
        for name in config.block_names():
            brng = rng.child(name)
            params: Block = {}
            for pname, shape in config.param_shapes(name).items():
                if pname.endswith("_g"):
                    params[pname] = np.ones(shape)
                elif len(shape) == 1:
                    params[pname] = np.zeros(shape)
                else:
                    std = 1.0 if name == "embedding" else 1.0 / math.sqrt(shape[0])
                    if pname in ("wo", "w2"):
                        # residual branches start small so depth does not wash out the token signal
                        std /= math.sqrt(2 * config.num_layers)
                    params[pname] = T.sample_gaussian(brng, shape, std)
            blocks[name] = params
        return cls(config, blocks)

    def copy(self) -> "ModelState":
        return ModelState(self.config, {b: {k: v.copy() for k, v in p.items()} for b, p in self.blocks.items()})

    def flatten_block(self, block: str) -> np.ndarray:
        params = self.blocks[block]
        return np.concatenate([params[k].ravel() for k in self.config.param_shapes(block)])

    def unflatten_block(self, block: str, flat: np.ndarray) -> Block:
        shapes = self.config.param_shapes(block)
        flat = np.asarray(flat, dtype=np.float64)
        expected = sum(math.prod(s) for s in shapes.values())
        if flat.shape != (expected,):
            raise ValueError(f"unflatten_block({block}): expected {expected} values, got {flat.shape}")
        out: Block = {}
        offset = 0
        for name, shape in shapes.items():
            n = math.prod(shape)
            out[name] = flat[offset : offset + n].reshape(shape).copy()
            offset += n
        return out

    def set_block(self, block: str, flat: np.ndarray) -> None:
        self.blocks[block] = self.unflatten_block(block, flat)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.flatten_block(b) for b in self.config.block_names()])

    def num_parameters(self) -> int:
        return sum(self.config.block_size(b) for b in self.config.block_names())

    def equals(self, other: "ModelState") -> bool:
        """Bitwise equality of every parameter."""
        return self.config == other.config and all(
            np.array_equal(self.blocks[b][k], other.blocks[b][k])
            for b in self.config.block_names()
            for k in self.config.param_shapes(b)
        )


def save_checkpoint(model: ModelState, path: str | Path) -> None:
    """Write config + flat blocks as ``.npz``; float64 values round-trip bitwise."""
    arrays = {f"block:{b}": model.flatten_block(b) for b in model.config.block_names()}
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(model.config)}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path: str | Path) -> ModelState:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        config = EncoderConfig(**meta["config"])
        model = ModelState(config, {})
        for b in config.block_names():
            model.set_block(b, data[f"block:{b}"])
    return model


@dataclass
class FreezeMask:
    """Per-layer trainability; ``layers[i]`` refers to layer id ``i + 1``."""

    layers: tuple[bool, ...]
    embedding: bool = True
    classifier: bool = True

    @classmethod
    def all_trainable(cls, num_layers: int, embedding: bool = True, classifier: bool = True) -> "FreezeMask":
        return cls((True,) * num_layers, embedding, classifier)

    @classmethod
    def from_selection(
        cls, num_layers: int, selected: Sequence[int], embedding: bool = True, classifier: bool = True
    ) -> "FreezeMask":
        chosen = set(selected)
        return cls(tuple(i in chosen for i in range(1, num_layers + 1)), embedding, classifier)

    def trainable_blocks(self) -> list[str]:
        out = ["embedding"] if self.embedding else []
        out += [f"layer.{i + 1}" for i, t in enumerate(self.layers) if t]
        if self.classifier:
            out.append("classifier")
        return out

    def selected_layers(self) -> list[int]:
        return [i + 1 for i, t in enumerate(self.layers) if t]


@dataclass
class AttentionRecord:
    """Attention weights captured for a single sequence.

    ``layers[l - 1]`` has shape ``(H, N, N)``; row ``i`` is the distribution of
    query ``i`` over keys.
    """

    layers: list[np.ndarray]
    tokens: np.ndarray

    @property
    def seq_len(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def num_heads(self) -> int:
        return int(self.layers[0].shape[0])


@dataclass
class Batch:
    """Padded batch of sequences.

    ``tokens`` and ``labels`` are ``(B, N)``; ``lengths`` gives the true length
    of each row.  ``seq_labels`` is set for sequence-classification tasks.
    """

    tokens: np.ndarray
    labels: np.ndarray
    lengths: np.ndarray
    seq_labels: np.ndarray | None = None

    @classmethod
    def from_sequences(
        cls,
        tokens: Sequence[Sequence[int]],
        labels: Sequence[Sequence[int]] | None = None,
        seq_labels: Sequence[int] | None = None,
    ) -> "Batch":
        if len(tokens) == 0:
            raise ValueError("Batch.from_sequences: empty batch")
        lengths = np.array([len(t) for t in tokens], dtype=np.int64)
        if lengths.min() < 1:
            raise ValueError("Batch.from_sequences: empty sequence")
        n = int(lengths.max())
        tok = np.full((len(tokens), n), PAD_ID, dtype=np.int64)
        lab = np.zeros((len(tokens), n), dtype=np.int64)
        for r, seq in enumerate(tokens):
            tok[r, : len(seq)] = seq
            if labels is not None:
                if len(labels[r]) != len(seq):
                    raise ValueError(f"Batch.from_sequences: row {r} has {len(seq)} tokens, {len(labels[r])} labels")
                lab[r, : len(seq)] = labels[r]
        sl = None if seq_labels is None else np.asarray(seq_labels, dtype=np.int64)
        return cls(tok, lab, lengths, sl)

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def valid(self) -> np.ndarray:
        return np.arange(self.tokens.shape[1])[None, :] < self.lengths[:, None]


def _check_tokens(config: EncoderConfig, batch: Batch) -> None:
    if batch.tokens.shape[1] > config.max_seq_len:
        raise ValueError(
            f"sequence length {batch.tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}"
        )
    if batch.tokens.size and (batch.tokens.min() < 0 or batch.tokens.max() >= config.vocab_size):
        raise ValueError(f"token id out of vocabulary range 0..{config.vocab_size - 1}")


def _params_as_tensors(model: ModelState, mask: FreezeMask | None) -> dict[str, dict[str, Tensor]]:
    trainable = set(model.config.block_names() if mask is None else mask.trainable_blocks())
    return {
        b: {k: Tensor(v, requires_grad=b in trainable) for k, v in params.items()}
        for b, params in model.blocks.items()
    }


def _encode(
    config: EncoderConfig,
    params: dict[str, dict[str, Tensor]],
    batch: Batch,
    capture: bool,
) -> tuple[Tensor, list[np.ndarray] | None]:
    b, n = batch.tokens.shape
    h, dh, d = config.num_heads, config.head_dim, config.d_model
    emb = params["embedding"]
    x = T.embedding_lookup(emb["tokens"], batch.tokens)
    x = x + T.embedding_lookup(emb["positions"], np.arange(n))
    key_mask = np.where(batch.valid, 0.0, _MASK_NEG)[:, None, None, :]
    inv_sqrt = 1.0 / math.sqrt(dh)
    captured: list[np.ndarray] | None = [] if capture else None

    def heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

    for lid in range(1, config.num_layers + 1):
        p = params[f"layer.{lid}"]
        hid = T.layer_norm(x, p["ln1_g"], p["ln1_b"])
        q = heads(hid @ p["wq"] + p["bq"])
        k = heads(hid @ p["wk"] + p["bk"])
        v = heads(hid @ p["wv"] + p["bv"])
        scores = T.scale(q @ T.transpose(k, (0, 1, 3, 2)), inv_sqrt)
        attn = T.softmax_rows(scores, key_mask)
        if captured is not None:
            captured.append(attn.data.copy())
        ctx = T.reshape(T.transpose(attn @ v, (0, 2, 1, 3)), (b, n, d))
        x = x + (ctx @ p["wo"] + p["bo"])
        hid = T.layer_norm(x, p["ln2_g"], p["ln2_b"])
        x = x + (T.gelu(hid @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"])
    clf = params["classifier"]
    x = T.layer_norm(x, clf["ln_g"], clf["ln_b"])
    logits = x @ clf["weight"] + clf["bias"]
    return logits, captured


def forward(
    model: ModelState, tokens: Sequence[int] | Batch, capture: bool = False
) -> tuple[np.ndarray, AttentionRecord | list[AttentionRecord] | None]:
    """Run the encoder without building a gradient tape.

    A single token sequence gives logits of shape ``(N, num_labels)`` and one
    :class:`AttentionRecord`; a :class:`Batch` gives ``(B, N, num_labels)``
    and a list of per-sequence records (padding stripped).
    """
    single = not isinstance(tokens, Batch)
    batch = Batch.from_sequences([list(tokens)]) if single else tokens
    _check_tokens(model.config, batch)
    params = _params_as_tensors(model, FreezeMask((False,) * model.config.num_layers, False, False))
    logits, captured = _encode(model.config, params, batch, capture)
    records = None
    if captured is not None:
        records = []
        for r in range(len(batch)):
            m = int(batch.lengths[r])
            records.append(
                AttentionRecord([a[r, :, :m, :m].copy() for a in captured], batch.tokens[r, :m].copy())
            )
    if single:
        return logits.data[0], (records[0] if records else None)
    return logits.data, records


def batch_loss(
    config: EncoderConfig, params: dict[str, dict[str, Tensor]], batch: Batch, task: str = "token"
) -> Tensor:
    logits, _ = _encode(config, params, batch, capture=False)
    if task == "sequence":
        if batch.seq_labels is None:
            raise ValueError("sequence task needs seq_labels")
        return T.cross_entropy_with_logits(T.take_rows(logits, 0, axis=1), batch.seq_labels)
    flat = T.reshape(logits, (-1, config.num_labels))
    weights = batch.valid.astype(np.float64)
    # [CLS] is always background and carries no information about entities
    weights[:, 0] = 0.0
    if weights.sum() == 0:
        weights = batch.valid.astype(np.float64)
    return T.cross_entropy_with_logits(flat, batch.labels.reshape(-1), weights.reshape(-1))


def loss_and_grads(
    model: ModelState, batch: Batch, mask: FreezeMask | None = None, task: str = "token"
) -> tuple[float, dict[str, Block]]:
    """Loss of ``batch`` and gradients of every trainable block.

    Frozen blocks map to an empty dict.
    """
    if len(batch) == 0:
        raise ValueError("loss_and_grads: empty batch")
    _check_tokens(model.config, batch)
    if mask is not None and len(mask.layers) != model.config.num_layers:
        raise ValueError(f"FreezeMask has {len(mask.layers)} layers, model has {model.config.num_layers}")
    params = _params_as_tensors(model, mask)
    loss = batch_loss(model.config, params, batch, task)
    T.backward(loss)
    grads: dict[str, Block] = {}
    for b, ps in params.items():
        grads[b] = {}
        for k, t in ps.items():
            if t.requires_grad:
                grads[b][k] = t.grad if t.grad is not None else np.zeros(t.shape)
    return loss.item(), grads


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear warmup: step ``t`` (1-based) of ``W`` uses ``base_lr * t / W``."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * max(step, 0) / warmup_steps


def sgd_step(model: ModelState, grads: Mapping[str, Mapping[str, np.ndarray]], lr: float) -> ModelState:
    """Return a new state with ``p - lr * g`` applied to blocks that have gradients."""
    out = model.copy()
    for b, g in grads.items():
        if not g:
            continue
        shapes = model.config.param_shapes(b)
        for k, gv in g.items():
            if k not in shapes or np.shape(gv) != shapes[k]:
                raise ValueError(f"sgd_step: gradient {b}.{k} has shape {np.shape(gv)}, expected {shapes.get(k)}")
            out.blocks[b][k] = model.blocks[b][k] - lr * gv
    return out
