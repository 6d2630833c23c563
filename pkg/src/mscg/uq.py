"""Uniform random parameter spaces and two-level MVR Monte Carlo estimators.

The MVR estimate of E[s_h] corrects a cheap surrogate mean with a small
sample of the expensive model:

    E = mean_M0(s_h - s_N) + mean_M1(s_N),
    Delta = a * sqrt(V_M0(s_h - s_N) / M0 + V_M1(s_N) / M1).

The M0 and M1 batches use independent streams (batch ids 0 and 1).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .mapping import GeometryParams, KlModel
from .rng import uniform_rows

BATCH_M0 = 0
BATCH_M1 = 1


@dataclass
class StochasticSpace:
    """Independent uniform boxes [-gamma_d, gamma_d] per slot.

    `slots` maps slot id -> half-widths gamma (length D + 1 for a KL model).
    Slot order in draws follows sorted slot ids.
    """

    slots: dict
    kl: Optional[KlModel] = None

    def __post_init__(self):
        self.slots = {int(k): np.asarray(v, dtype=float) for k, v in self.slots.items()}
        for k, g in self.slots.items():
            if np.any(g < 0):
                raise ValueError(f"negative half-width in slot {k}")

    @classmethod
    def kl_box(cls, slots: Sequence[int], kl: KlModel, half_width: float = np.sqrt(3.0)):
        return cls({s: np.full(kl.n_coeffs, half_width) for s in slots}, kl)

    @property
    def order(self) -> list:
        return sorted(self.slots)

    @property
    def dim(self) -> int:
        return int(sum(len(self.slots[s]) for s in self.order))

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        g = np.concatenate([self.slots[s] for s in self.order]) if self.slots else np.zeros(0)
        return -g, g

    def split(self, row: np.ndarray) -> dict:
        out, k = {}, 0
        for s in self.order:
            n = len(self.slots[s])
            out[s] = np.asarray(row[k:k + n])
            k += n
        return out

    def to_params(self, row: np.ndarray, theta: Optional[dict] = None) -> dict:
        """Slot -> GeometryParams combining a draw with design scalings theta."""
        theta = theta or {}
        return {s: GeometryParams(float(theta.get(s, 0.0)), z, self.kl)
                for s, z in self.split(row).items()}


def sample_params(space: StochasticSpace, seed: int, count: int, batch: int = 0,
                  start: int = 0) -> np.ndarray:
    """i.i.d. uniform draws (count, dim); row i depends only on (seed, batch, start + i)."""
    lo, hi = space.bounds()
    return uniform_rows(seed, batch, start, count, lo, hi)


@dataclass
class McEstimate:
    mean: float
    var: float
    half_width: float
    M: int
    a: float = 1.96


@dataclass
class MvrEstimate:
    mean: float
    var_corr: float  # V_M0[s_h - s_N]
    var_surr: float  # V_M1[s_N]
    half_width: float
    M0: int
    M1: int
    a: float = 1.96
    seed: Optional[int] = None
    values: dict = field(default_factory=dict, repr=False)


@dataclass
class MvrVariance:
    var: float
    half_width: float
    M0: int
    M1: int


def _evaluate(model: Callable, draws: np.ndarray, workers: int = 1) -> np.ndarray:
    if workers > 1 and len(draws) > 1:
        with ThreadPoolExecutor(workers) as ex:
            return np.array(list(ex.map(model, draws)), dtype=float)
    return np.array([model(z) for z in draws], dtype=float)


def _mean_var(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    m = float(np.sum(x) / len(x))
    v = float(np.sum((x - m) ** 2) / (len(x) - 1))
    return m, v


def crude_mc_values(values: np.ndarray, a: float = 1.96) -> McEstimate:
    values = np.asarray(values, dtype=float)
    M = len(values)
    if M < 2:
        raise ValueError("need at least two samples")
    m, v = _mean_var(values)
    return McEstimate(m, v, a * np.sqrt(v / M), M, a)


def crude_mc(model: Callable, draws: np.ndarray, a: float = 1.96, workers: int = 1) -> McEstimate:
    """Sample mean, unbiased variance and CLT half-width a sqrt(V / M)."""
    if len(draws) < 2:
        raise ValueError("need at least two samples")
    return crude_mc_values(_evaluate(model, draws, workers), a)


def mvr_from_values(sh0: np.ndarray, sN0: np.ndarray, sN1: np.ndarray,
                    a: float = 1.96) -> MvrEstimate:
    """Two-level estimate from model values on the M0 batch and surrogate values on M1."""
    sh0, sN0, sN1 = (np.asarray(x, dtype=float) for x in (sh0, sN0, sN1))
    M0, M1 = len(sh0), len(sN1)
    if M0 < 2 or M1 < 2:
        raise ValueError("M0 and M1 must be at least 2")
    m0, v0 = _mean_var(sh0 - sN0)
    m1, v1 = _mean_var(sN1)
    hw = a * np.sqrt(v0 / M0 + v1 / M1)
    return MvrEstimate(m0 + m1, v0, v1, float(hw), M0, M1, a,
                       values=dict(sh0=sh0, sN0=sN0, sN1=sN1))


def mvr_expectation(s_h: Callable, s_N: Callable, space: StochasticSpace, M0: int, M1: int,
                    seed: int, a: float = 1.96, workers: int = 1) -> MvrEstimate:
    """MVR estimate of E[s_h] with independent M0 / M1 draw batches."""
    if M0 < 2 or M1 < 2:
        raise ValueError("M0 and M1 must be at least 2")
    z0 = sample_params(space, seed, M0, BATCH_M0)
    z1 = sample_params(space, seed, M1, BATCH_M1)
    sh0 = _evaluate(s_h, z0, workers)
    sN0 = _evaluate(s_N, z0, workers)
    sN1 = _evaluate(s_N, z1, workers)
    est = mvr_from_values(sh0, sN0, sN1, a)
    est.seed = seed
    return est


def mvr_variance(est: MvrEstimate, a: Optional[float] = None) -> MvrVariance:
    """V = mean_M0(zeta_h - zeta_N) + mean_M1(zeta_N), zeta centred at the MVR mean."""
    a = est.a if a is None else a
    v = est.values
    E = est.mean
    zh = (v["sh0"] - E) ** 2
    zN0 = (v["sN0"] - E) ** 2
    zN1 = (v["sN1"] - E) ** 2
    m0, v0 = _mean_var(zh - zN0)
    m1, v1 = _mean_var(zN1)
    return MvrVariance(m0 + m1, float(a * np.sqrt(v0 / est.M0 + v1 / est.M1)),
                       est.M0, est.M1)


def allocate_samples(V0: float, V1: float, w: float, budget: Optional[float] = None,
                     tol: Optional[float] = None, a: float = 1.96) -> tuple[int, int]:
    """(M0, M1) minimizing the half-width at cost M0 (1 + 1/w) + M1 / w.

    Exactly one of `budget` (in full-model solves) or `tol` (target half-width)
    must be given.
    """
    if (budget is None) == (tol is None):
        raise ValueError("give exactly one of budget or tol")
    if w <= 0:
        raise ValueError("cost ratio must be positive")
    eps = np.finfo(float).eps
    V0 = max(float(V0), eps)
    V1 = max(float(V1), eps)
    r = np.sqrt(V0 / (V1 * w))
    if budget is not None:
        M1 = budget / (r * (1 + 1 / w) + 1 / w)
    else:
        M1 = a ** 2 * (V0 / r + V1) / tol ** 2
    M0 = r * M1
    if M0 < 2:
        M0 = 2
        if budget is not None:
            M1 = max(budget - M0 * (1 + 1 / w), 0.0) * w
    M0 = max(2, int(np.ceil(M0 - 1e-9)))
    M1 = max(2, int(np.ceil(M1 - 1e-9)))
    return M0, M1
