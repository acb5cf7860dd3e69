"""Partial-update convergence bound and a quadratic harness to check it.

The bound is ``gap_t <= (1 - eta * mu * K / L) ** t * gap_0`` where ``K`` of
``L`` layer blocks are updated per round.  The harness runs exact gradient
steps on a separable strongly convex quadratic, updating ``K`` uniformly
random blocks per round, and averages the optimality gap over many seeds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import RngStream


@dataclass(frozen=True)
class ConvergenceParams:
    eta: float
    mu: float
    num_layers: int
    k: int
    rounds: int
    initial_gap: float = 1.0
    smooth_L: float | None = None

    def __post_init__(self):
        if self.eta <= 0 or self.mu <= 0:
            raise ValueError(f"eta and mu must be > 0, got eta={self.eta}, mu={self.mu}")
        if not 1 <= self.k <= self.num_layers:
            raise ValueError(f"need 1 <= k <= num_layers, got k={self.k}, num_layers={self.num_layers}")
        if self.rounds < 0 or self.initial_gap < 0:
            raise ValueError("rounds and initial_gap must be >= 0")

    @property
    def fraction(self) -> float:
        return self.k / self.num_layers

    @property
    def factor(self) -> float:
        return 1.0 - self.eta * self.mu * self.fraction


@dataclass
class BoundResult:
    gaps: np.ndarray
    factor: float
    status: str

    @property
    def contractive(self) -> bool:
        return self.status == "contractive"


def bound(p: ConvergenceParams) -> BoundResult:
    """Per-round upper bounds ``[g_0, ..., g_T]``."""
    f = p.factor
    status = "contractive" if 0.0 <= f < 1.0 else "non_contractive"
    gaps = p.initial_gap * f ** np.arange(p.rounds + 1, dtype=np.float64)
    return BoundResult(gaps, f, status)


@dataclass(frozen=True)
class QuadraticProblem:
    """``F(w) = 0.5 * sum_i c_i (w_i - w*_i)^2`` with coordinates grouped into blocks."""

    curvatures: np.ndarray
    optimum: np.ndarray
    block_of: np.ndarray  # layer id (1-based) of every coordinate

    @classmethod
    def isotropic(cls, num_layers: int, dim_per_block: int, mu: float) -> "QuadraticProblem":
        n = num_layers * dim_per_block
        return cls(np.full(n, float(mu)), np.zeros(n), np.repeat(np.arange(1, num_layers + 1), dim_per_block))

    @classmethod
    def random(cls, num_layers: int, dim_per_block: int, mu: float, smooth_L: float, seed: int) -> "QuadraticProblem":
        rng = RngStream(seed, "quadratic:problem").generator
        n = num_layers * dim_per_block
        curv = rng.uniform(mu, smooth_L, size=n)
        return cls(curv, rng.normal(size=n), np.repeat(np.arange(1, num_layers + 1), dim_per_block))

    @property
    def num_layers(self) -> int:
        return int(self.block_of.max())

    def gap(self, w: np.ndarray) -> float:
        d = w - self.optimum
        return 0.5 * float(np.dot(self.curvatures * d, d))

    def check(self, mu: float, smooth_L: float | None) -> None:
        hi = np.inf if smooth_L is None else smooth_L
        if self.curvatures.min() < mu - 1e-12 or self.curvatures.max() > hi + 1e-12:
            raise ValueError("QuadraticProblem: curvatures outside [mu, smooth_L]")


@dataclass
class SimulationResult:
    mean_gap: np.ndarray
    std_error: np.ndarray
    seeds: int
    diverged: bool

    def to_csv(self, path: str | Path, bound_gaps: np.ndarray) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "bound", "empirical_mean", "std_error"])
            for t, (b, m, s) in enumerate(zip(bound_gaps, self.mean_gap, self.std_error)):
                w.writerow([t, repr(float(b)), repr(float(m)), repr(float(s))])


def expected_isotropic_factor(eta: float, mu: float, k: int, num_layers: int) -> float:
    """Exact one-round expected gap factor on an isotropic quadratic."""
    return 1.0 - (k / num_layers) * (1.0 - (1.0 - eta * mu) ** 2)


def simulate_quadratic(p: ConvergenceParams, q: QuadraticProblem, seeds: int, base_seed: int = 0) -> SimulationResult:
    """Mean optimality gap per round over ``seeds`` independent runs.

    Each run starts at a random point with gap ``p.initial_gap`` and, every
    round, takes an exact gradient step on ``p.k`` blocks chosen uniformly
    without replacement.
    """
    if seeds < 1:
        raise ValueError("simulate_quadratic: seeds must be >= 1")
    if q.num_layers != p.num_layers:
        raise ValueError(f"problem has {q.num_layers} blocks, params say {p.num_layers}")
    q.check(p.mu, p.smooth_L)
    gaps = np.zeros((seeds, p.rounds + 1))
    step = 1.0 - p.eta * q.curvatures
    for s in range(seeds):
        rng = RngStream(base_seed, f"quadratic:seed:{s}").generator
        direction = rng.normal(size=q.optimum.shape)
        unit_gap = 0.5 * float(np.dot(q.curvatures * direction, direction))
        w = q.optimum + direction * np.sqrt(p.initial_gap / unit_gap)
        gaps[s, 0] = q.gap(w)
        for t in range(1, p.rounds + 1):
            chosen = rng.choice(p.num_layers, size=p.k, replace=False) + 1
            sel = np.isin(q.block_of, chosen)
            w = np.where(sel, q.optimum + step * (w - q.optimum), w)
            gaps[s, t] = q.gap(w)
    diverged = not np.all(np.isfinite(gaps)) or bool(np.any(gaps[:, -1] > gaps[:, 0] * 1e6))
    mean = gaps.mean(axis=0)
    se = gaps.std(axis=0, ddof=1) / np.sqrt(seeds) if seeds > 1 else np.zeros_like(mean)
    return SimulationResult(mean, se, seeds, diverged)
