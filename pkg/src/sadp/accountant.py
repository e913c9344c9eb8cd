"""Renyi-DP ledger for the Gaussian mechanism and conversion to (epsilon, delta).

Every step is charged ``alpha / (2 sigma^2)`` at each tracked order, which
bounds the Gaussian mechanism with sensitivity equal to the clip norm. When a
step mixes several noise multipliers the smallest nonzero one is charged.
The final epsilon is ``min_alpha total(alpha) + log(1/delta) / (alpha - 1)``.

With ``amplify_subsampling=True`` the Poisson-subsampled Gaussian bound is
used instead (experimental). It is exact for integer orders, and all tracked
orders are integers.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import special

logger = logging.getLogger(__name__)

PARITY_ORDER = 32
DEFAULT_DELTA = 1e-5
DEFAULT_ORDERS = tuple(range(2, 65))


def step_rdp(sigma: float, alpha: float) -> float:
    """RDP of one Gaussian-mechanism step at order ``alpha``; ``inf`` if unnoised."""
    if alpha <= 1:
        raise ValueError(f"Renyi order must exceed 1, got {alpha}")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return math.inf
    return alpha / (2.0 * sigma * sigma)


def _log_add(a: float, b: float) -> float:
    hi, lo = max(a, b), min(a, b)
    if lo == -math.inf:
        return hi
    return hi + math.log1p(math.exp(lo - hi))


def subsampled_step_rdp(sigma: float, alpha: int, q: float) -> float:
    """RDP at integer order ``alpha`` of the Gaussian mechanism on a Poisson sample of rate ``q``.

    Evaluates ``log(sum_k C(alpha,k) (1-q)^(alpha-k) q^k exp((k^2-k)/(2 sigma^2))) / (alpha-1)``
    in log space.
    """
    if int(alpha) != alpha or alpha < 2:
        raise ValueError("the subsampled bound is implemented for integer orders >= 2")
    if not 0 < q <= 1:
        raise ValueError(f"sample rate must lie in (0, 1], got {q}")
    if sigma == 0:
        return math.inf
    alpha = int(alpha)
    if q == 1.0:
        return step_rdp(sigma, alpha)
    log_a = -math.inf
    log_q, log_1mq = math.log(q), math.log1p(-q)
    for k in range(alpha + 1):
        log_coef = special.gammaln(alpha + 1) - special.gammaln(k + 1) - special.gammaln(alpha - k + 1)
        term = log_coef + k * log_q + (alpha - k) * log_1mq + (k * k - k) / (2.0 * sigma * sigma)
        log_a = _log_add(log_a, term)
    return min(log_a / (alpha - 1), step_rdp(sigma, alpha))


@dataclass(frozen=True)
class StepRecord:
    idx: int
    sigma: float | None  # None marks a step that added no noise
    q: float


@dataclass(frozen=True)
class Conversion:
    epsilon: float
    delta: float
    argmin_order: float | None
    epsilon_at_32: float
    explanation: str = ""

    @property
    def private(self) -> bool:
        return math.isfinite(self.epsilon)


@dataclass
class PrivacyLedger:
    """Cumulative RDP per order, plus the step log. Single writer."""

    orders: tuple[float, ...] = DEFAULT_ORDERS
    delta: float = DEFAULT_DELTA
    q: float = 1.0
    amplify_subsampling: bool = False
    totals: np.ndarray = field(init=False)
    steps: list[StepRecord] = field(init=False, default_factory=list)

    def __post_init__(self) -> None:
        orders = sorted({float(a) for a in self.orders} | {float(PARITY_ORDER)})
        if any(a <= 1 for a in orders):
            raise ValueError("every Renyi order must exceed 1")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0 < self.q <= 1:
            raise ValueError(f"sample rate must lie in (0, 1], got {self.q}")
        self.orders = tuple(orders)
        self.totals = np.zeros(len(orders))

    @property
    def non_private_steps(self) -> int:
        return sum(1 for s in self.steps if s.sigma is None)

    def _increment(self, sigma: float, q: float) -> np.ndarray:
        if self.amplify_subsampling:
            return np.array([subsampled_step_rdp(sigma, int(a), q) for a in self.orders])
        return np.array([step_rdp(sigma, a) for a in self.orders])

    def record_step(self, sigma_tiers: Iterable[float], q: float | None = None) -> StepRecord:
        """Charge one step at the smallest nonzero sigma it used."""
        q = self.q if q is None else q
        used = [float(s) for s in sigma_tiers if s > 0]
        idx = len(self.steps)
        if not used:
            if not self.non_private_steps:
                logger.warning("step %d added no noise; the run is recorded as non-private", idx)
            rec = StepRecord(idx, None, q)
            self.totals = self.totals + math.inf
        else:
            rec = StepRecord(idx, min(used), q)
            self.totals = self.totals + self._increment(rec.sigma, q)
        self.steps.append(rec)
        return rec

    def total_at(self, alpha: float) -> float:
        return float(self.totals[self.orders.index(float(alpha))])

    def convert(self, delta: float | None = None, orders: Sequence[float] | None = None) -> Conversion:
        """Best epsilon over the tracked orders (or a subset of them)."""
        delta = self.delta if delta is None else delta
        if not 0 < delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {delta}")
        at32 = self.total_at(PARITY_ORDER) + math.log(1 / delta) / (PARITY_ORDER - 1)
        if not self.steps:
            return Conversion(0.0, delta, None, 0.0, "no steps recorded")
        if self.non_private_steps:
            return Conversion(
                math.inf, delta, None, math.inf,
                f"{self.non_private_steps} of {len(self.steps)} steps added no noise; "
                "no finite epsilon holds",
            )
        use = self.orders if orders is None else tuple(float(a) for a in orders)
        best, best_order = math.inf, None
        for a in use:
            eps = self.total_at(a) + math.log(1 / delta) / (a - 1)
            if eps < best:
                best, best_order = eps, a
        return Conversion(best, delta, best_order, at32)

    def to_json(self) -> dict:
        conv = self.convert()

        def num(x: float) -> float | None:
            return x if math.isfinite(x) else None

        return {
            "orders": list(self.orders),
            "totals": [num(t) for t in self.totals],
            "steps": [{"idx": s.idx, "sigma": s.sigma, "q": s.q} for s in self.steps],
            "delta": self.delta,
            "epsilon": num(conv.epsilon),
            "argmin_order": conv.argmin_order,
            "epsilon_at_32": num(conv.epsilon_at_32),
            "amplify_subsampling": self.amplify_subsampling,
            "note": conv.explanation,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PrivacyLedger":
        """Rebuild a ledger by replaying its step log."""
        ledger = cls(
            tuple(obj["orders"]),
            float(obj["delta"]),
            amplify_subsampling=bool(obj.get("amplify_subsampling", False)),
        )
        for s in obj["steps"]:
            ledger.record_step([] if s["sigma"] is None else [s["sigma"]], s["q"])
        return ledger

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PrivacyLedger":
        return cls.from_json(json.loads(Path(path).read_text("utf-8")))
