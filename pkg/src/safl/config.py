"""Run configuration: an INI file with sections, overridable field by field."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

from .encoder import EncoderConfig
from .fedsim import FedConfig, Strategy
from .privacy import PrivacyConfigError, PrivacyParams
from .selector import TaskTokenSpec
from .synthdata import CorpusSpec, PartitionSpec

OUTPUT_DIR_ENV = "SAFL_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


_SCHEMA: dict[str, dict[str, type]] = {
    "run": {
        "strategy": str, "k": int, "bottom_frozen": int, "rounds": int, "seed": int,
        "output_dir": str, "eval_fraction": float,
    },
    "model": {"num_layers": int, "num_heads": int, "d_model": int, "d_ff": int, "max_seq_len": int},
    "data": {
        "vocab_size": int, "num_sequences": int, "min_len": int, "max_len": int,
        "num_entity_types": int, "entity_density": float, "max_span": int,
    },
    "partition": {"num_clients": int, "dirichlet_alpha": float},
    "train": {
        "batch_size": int, "lr": float, "warmup_steps": int, "local_epochs": int,
        "profile_size": int, "task": str, "train_embedding": bool, "train_classifier": bool,
        "prune_fraction": float, "wire_bits": int, "max_workers": int, "aggregation": str,
        "selection_scope": str, "consensus_mode": str, "score_side": str,
        "task_token_mode": str, "task_token_values": str, "eval_every": int,
    },
    "privacy": {
        "enabled": bool, "clip_norm": float, "noise_multiplier": float, "delta": float,
        "target_epsilon": float, "mode": str, "per_layer_clip": bool,
    },
}  # fmt: skip


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce a run from one master seed."""

    strategy: str = "safl"
    k: int = 8
    bottom_frozen: int = 4
    rounds: int = 100
    seed: int = 0
    output_dir: str = "runs/default"
    eval_fraction: float = 0.2
    # model
    num_layers: int = 12
    num_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    max_seq_len: int = 64
    # data
    vocab_size: int = 256
    num_sequences: int = 600
    min_len: int = 12
    max_len: int = 20
    num_entity_types: int = 3
    entity_density: float = 0.3
    max_span: int = 3
    # partition
    num_clients: int = 10
    dirichlet_alpha: float = 1.0
    # train
    batch_size: int = 32
    lr: float = 2e-5
    warmup_steps: int = 0
    local_epochs: int = 1
    profile_size: int = 32
    task: str = "token"
    train_embedding: bool = True
    train_classifier: bool = True
    prune_fraction: float = 0.0
    wire_bits: int = 64
    max_workers: int = 1
    aggregation: str = "union"
    selection_scope: str = "client"
    consensus_mode: str = "vote"
    score_side: str = "key"
    task_token_mode: str = "ids"
    task_token_values: str = "1"
    eval_every: int = 1
    # privacy
    enabled: bool = False
    clip_norm: float = 1.0
    noise_multiplier: float = 1.0
    delta: float = 1e-5
    target_epsilon: float = 4.0
    mode: str = "local"
    per_layer_clip: bool = False

    # ---- derived objects -------------------------------------------------

    @property
    def num_labels(self) -> int:
        return 1 + (2 * self.num_entity_types if self.task == "token" else self.num_entity_types)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            num_layers=self.num_layers, num_heads=self.num_heads, d_model=self.d_model, d_ff=self.d_ff,
            vocab_size=self.vocab_size, max_seq_len=self.max_seq_len, num_labels=self.num_labels,
        )  # fmt: skip

    def corpus_spec(self) -> CorpusSpec:
        return CorpusSpec(
            vocab_size=self.vocab_size, num_sequences=self.num_sequences, min_len=self.min_len,
            max_len=self.max_len, num_entity_types=self.num_entity_types,
            entity_density=self.entity_density, max_span=self.max_span, seed=self.seed,
        )  # fmt: skip

    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(num_clients=self.num_clients, dirichlet_alpha=self.dirichlet_alpha, seed=self.seed)

    def privacy_params(self) -> PrivacyParams:
        return PrivacyParams(
            clip_norm=self.clip_norm, noise_multiplier=self.noise_multiplier, delta=self.delta,
            enabled=self.enabled, per_layer_clip=self.per_layer_clip, mode=self.mode,
            target_epsilon=self.target_epsilon,
        )  # fmt: skip

    def task_tokens(self) -> TaskTokenSpec:
        values = frozenset(int(v) for v in self.task_token_values.replace(",", " ").split())
        return TaskTokenSpec(self.task_token_mode, values)

    def fed_config(self) -> FedConfig:
        return FedConfig(
            rounds=self.rounds, batch_size=self.batch_size, lr=self.lr, warmup_steps=self.warmup_steps,
            local_epochs=self.local_epochs, profile_size=self.profile_size, task_tokens=self.task_tokens(),
            score_side=self.score_side, selection_scope=self.selection_scope,
            consensus_mode=self.consensus_mode, aggregation=self.aggregation,
            train_embedding=self.train_embedding, train_classifier=self.train_classifier,
            prune_fraction=self.prune_fraction, privacy=self.privacy_params(), wire_bits=self.wire_bits,
            task=self.task, seed=self.seed, max_workers=self.max_workers, eval_every=self.eval_every,
        )  # fmt: skip

    def strategy_obj(self) -> Strategy:
        if self.strategy == "safl":
            return Strategy.safl(self.k)
        if self.strategy == "random_k":
            return Strategy.random_k(self.k)
        if self.strategy == "static_skip":
            return Strategy.static_skip(self.bottom_frozen)
        if self.strategy == "fedavg":
            return Strategy.fedavg()
        raise ConfigError(f"[run] strategy: unknown strategy {self.strategy!r}")

    def validate(self) -> "RunConfig":
        """Build every derived object once, turning failures into ConfigError."""
        checks = [
            ("model", self.encoder_config),
            ("data", self.corpus_spec),
            ("partition", self.partition_spec),
            ("privacy", self.privacy_params),
            ("train", self.fed_config),
            ("run", self.strategy_obj),
        ]
        for section, build in checks:
            try:
                obj = build()
            except ConfigError:
                raise
            except (ValueError, PrivacyConfigError) as exc:
                raise ConfigError(f"[{section}] {exc}") from None
            if section == "data":
                try:
                    obj.validate()
                except ValueError as exc:
                    raise ConfigError(f"[data] {exc}") from None
        if self.max_len > self.max_seq_len:
            raise ConfigError(f"[data] max_len={self.max_len} exceeds model max_seq_len={self.max_seq_len}")
        if self.bottom_frozen >= self.num_layers and self.strategy == "static_skip":
            raise ConfigError(f"[run] bottom_frozen={self.bottom_frozen} leaves no trainable layer")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ConfigError(f"[run] eval_fraction must be in (0, 1), got {self.eval_fraction}")
        if self.num_clients > round(self.num_sequences * (1 - self.eval_fraction)):
            raise ConfigError("[partition] more clients than training sequences")
        return self

    # ---- (de)serialisation ----------------------------------------------

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        names = {f.name for f in fields(self)}
        unknown = set(overrides) - names
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        return replace(self, **overrides)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section, keys in _SCHEMA.items():
            parser[section] = {k: _fmt(getattr(self, k)) for k in keys}
        from io import StringIO

        buf = StringIO()
        parser.write(buf)
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_ini())


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(section: str, key: str, raw: str) -> Any:
    kind = _SCHEMA[section][key]
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_assignment(text: str) -> tuple[str, Any]:
    """``section.key=value`` (or bare ``key=value``) into a field override."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    lhs, raw = text.split("=", 1)
    if "." in lhs:
        section, key = lhs.split(".", 1)
    else:
        key = lhs
        matches = [s for s, keys in _SCHEMA.items() if key in keys]
        if not matches:
            raise ConfigError(f"unknown config field {key!r}")
        section = matches[0]
    if section not in _SCHEMA or key not in _SCHEMA[section]:
        raise ConfigError(f"unknown config field {section}.{key}")
    return key, _parse(section, key, raw)


def load_config(path: str | Path | None = None, **overrides: Any) -> RunConfig:
    """Read an INI file (optional), apply overrides, honour the output-dir env var."""
    values: dict[str, Any] = {}
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser[section].items():
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"unknown config field {section}.{key}")
                values[key] = _parse(section, key, raw)
    env_dir = os.environ.get(OUTPUT_DIR_ENV)
    if env_dir:
        values["output_dir"] = env_dir
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig().with_overrides(**values)
