"""DP-SGD pieces: per-example clipping, Gaussian noise and a basic-composition ledger."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import RngStream, sample_gaussian


class PrivacyConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PrivacyParams:
    """Gaussian-mechanism settings.

    Attributes:
        clip_norm: L2 bound C on each example's gradient (the sensitivity).
        noise_multiplier: sigma; noise std is ``sigma * C``.
        delta: target delta in (0, 1).
        enabled: when False, updates are neither clipped nor noised.
        per_layer_clip: clip each block separately to ``C / sqrt(#blocks)``.
        mode: ``"local"`` (clients add noise) or ``"central"`` (server adds noise).
        target_epsilon: informational label carried into reports.
    """

    clip_norm: float = 1.0
    noise_multiplier: float = 1.0
    delta: float = 1e-5
    enabled: bool = False
    per_layer_clip: bool = False
    mode: str = "local"
    target_epsilon: float = 4.0

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise PrivacyConfigError(f"clip_norm must be > 0, got {self.clip_norm}")
        if not 0.0 < self.delta < 1.0:
            raise PrivacyConfigError(f"delta must be in (0, 1), got {self.delta}")
        if self.noise_multiplier < 0:
            raise PrivacyConfigError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        if self.mode not in ("local", "central"):
            raise PrivacyConfigError(f"mode must be 'local' or 'central', got {self.mode!r}")

    @property
    def noise_std(self) -> float:
        return self.noise_multiplier * self.clip_norm


def clip_per_example(grad: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale ``grad`` by ``min(1, C / ||grad||)``."""
    norm = float(np.sqrt(np.dot(grad, grad)))
    if norm <= clip_norm:
        return grad
    return grad * (clip_norm / norm)


def clip_blocks(blocks: list[np.ndarray], clip_norm: float, per_layer: bool = False) -> list[np.ndarray]:
    """Clip a list of flat block gradients, jointly or block by block."""
    if per_layer:
        c = clip_norm / math.sqrt(len(blocks))
        return [clip_per_example(b, c) for b in blocks]
    sizes = [b.size for b in blocks]
    flat = clip_per_example(np.concatenate(blocks), clip_norm)
    return np.split(flat, np.cumsum(sizes)[:-1])


def privatize_update(
    sum_of_clipped: np.ndarray, batch_size: int, params: PrivacyParams, rng: RngStream
) -> np.ndarray:
    """Add ``N(0, (sigma C)^2)`` per coordinate, then divide by the batch size.

    Only coordinates present in ``sum_of_clipped`` (the selected blocks)
    receive noise.
    """
    if params.noise_multiplier < 0:
        raise PrivacyConfigError(f"noise_multiplier must be >= 0, got {params.noise_multiplier}")
    if batch_size < 1:
        raise ValueError(f"privatize_update: batch_size must be >= 1, got {batch_size}")
    if not params.enabled or params.noise_multiplier == 0:
        return sum_of_clipped / batch_size
    noise = sample_gaussian(rng, sum_of_clipped.shape, params.noise_std)
    return (sum_of_clipped + noise) / batch_size


def gaussian_epsilon(noise_multiplier: float, delta: float) -> float:
    """Classical Gaussian-mechanism epsilon, ``sqrt(2 ln(1.25/delta)) / sigma``."""
    if noise_multiplier == 0:
        return math.inf
    return math.sqrt(2.0 * math.log(1.25 / delta)) / noise_multiplier


@dataclass
class LedgerEntry:
    round: int
    epsilon: float
    delta: float
    noise_multiplier: float
    clip_norm: float


@dataclass
class PrivacyLedger:
    """Append-only per-round privacy spend under basic composition."""

    entries: list[LedgerEntry] = field(default_factory=list)

    @property
    def rounds_elapsed(self) -> int:
        return len(self.entries)

    @property
    def epsilon_total(self) -> float:
        return math.fsum(e.epsilon for e in self.entries) if self.entries else 0.0

    @property
    def delta_total(self) -> float:
        return math.fsum(e.delta for e in self.entries) if self.entries else 0.0

    def to_dict(self) -> dict:
        def num(x: float):
            return "inf" if math.isinf(x) else x

        return {
            "accountant": "basic_composition",
            "rounds_elapsed": self.rounds_elapsed,
            "epsilon_total": num(self.epsilon_total),
            "delta_total": self.delta_total,
            "entries": [{**asdict(e), "epsilon": num(e.epsilon)} for e in self.entries],
        }

    def dump(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path: str | Path) -> "PrivacyLedger":
        with open(path) as fh:
            raw = json.load(fh)
        entries = [LedgerEntry(**{**e, "epsilon": float(e["epsilon"])}) for e in raw["entries"]]
        return cls(entries)


def account(ledger: PrivacyLedger, params: PrivacyParams) -> PrivacyLedger:
    """Return a new ledger with this round's spend appended.

    Disabled privacy records nothing.  ``sigma == 0`` while enabled records an
    explicit infinite epsilon.
    """
    if not params.enabled:
        return ledger
    entry = LedgerEntry(
        round=ledger.rounds_elapsed,
        epsilon=gaussian_epsilon(params.noise_multiplier, params.delta),
        delta=params.delta,
        noise_multiplier=params.noise_multiplier,
        clip_norm=params.clip_norm,
    )
    return PrivacyLedger([*ledger.entries, entry])
