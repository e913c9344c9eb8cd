"""Map sensitivity scores to per-token Gaussian noise multipliers."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import TokenSequence
from .scoring import SensitivityReport

_POLICY_KEYS = ("sigma_low", "sigma_high", "low_min", "low_max", "clip_norm")


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class NoisePolicy:
    """Two-tier noise policy.

    Scores in ``[low_min, low_max]`` get ``sigma_low``, scores in
    ``(low_max, 1]`` get ``sigma_high`` and anything below ``low_min`` is left
    unnoised. The high band starts right after ``low_max`` so no score in
    ``(0.50, 0.51)`` falls through unprotected.
    """

    sigma_low: float = 2.0
    sigma_high: float = 3.0
    low_min: float = 0.01
    low_max: float = 0.50
    clip_norm: float = 1.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.sigma_low <= self.sigma_high) or not math.isfinite(self.sigma_high):
            raise PolicyError(
                f"need 0 <= sigma_low <= sigma_high < inf, got {self.sigma_low}, {self.sigma_high}"
            )
        if (self.sigma_low == 0.0) != (self.sigma_high == 0.0):
            raise PolicyError("a zero tier is only allowed when both tiers are zero")
        if not (0.0 < self.low_min <= self.low_max < 1.0):
            raise PolicyError(f"need 0 < low_min <= low_max < 1, got {self.low_min}, {self.low_max}")
        if not self.clip_norm > 0:
            raise PolicyError(f"clip_norm must be positive, got {self.clip_norm}")

    @classmethod
    def zero(cls) -> "NoisePolicy":
        """Noise disabled and clipping disabled: the mechanism becomes a no-op."""
        return cls(sigma_low=0.0, sigma_high=0.0, clip_norm=math.inf)

    @property
    def is_zero(self) -> bool:
        return self.sigma_high == 0.0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping) -> "NoisePolicy":
        missing = [k for k in _POLICY_KEYS if k not in obj]
        extra = sorted(set(obj) - set(_POLICY_KEYS))
        if missing:
            raise PolicyError(f"policy is missing fields {missing}")
        if extra:
            raise PolicyError(f"unknown policy fields {extra}")
        return cls(**{k: float(obj[k]) for k in _POLICY_KEYS})

    @classmethod
    def load(cls, path: str | Path) -> "NoisePolicy":
        try:
            obj = json.loads(Path(path).read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise PolicyError(f"cannot read policy {path}: {exc}") from exc
        return cls.from_json(obj)


def map_score(s: float, policy: NoisePolicy) -> float:
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"sensitivity score must lie in [0, 1], got {s!r}")
    if s > policy.low_max:
        return policy.sigma_high
    if s >= policy.low_min:
        return policy.sigma_low
    return 0.0


def implied_epsilon(clip_norm: float, sigma: float) -> float:
    """Heuristic per-mechanism epsilon ``C / sigma``; ``inf`` when unnoised.

    For reporting next to the accountant's figure only.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return math.inf
    return clip_norm / sigma


@dataclass(frozen=True)
class AnnotatedSequence:
    seq: TokenSequence
    scores: np.ndarray
    sigmas: np.ndarray
    pii_types: tuple[str | None, ...]

    def __len__(self) -> int:
        return len(self.seq.tokens)

    def to_json(self) -> dict:
        return {
            "doc_id": self.seq.doc_id,
            "tokens": list(self.seq.tokens),
            "offsets": [list(o) for o in self.seq.offsets],
            "pii_types": list(self.pii_types),
            "scores": self.scores.tolist(),
            "sigmas": self.sigmas.tolist(),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "AnnotatedSequence":
        seq = TokenSequence(
            obj["doc_id"], tuple(obj["tokens"]), tuple(tuple(o) for o in obj["offsets"])
        )
        return cls(
            seq,
            np.asarray(obj["scores"], dtype=np.float64),
            np.asarray(obj["sigmas"], dtype=np.float64),
            tuple(obj["pii_types"]),
        )


def annotate(
    seq: TokenSequence,
    assignments: Sequence[str | None],
    report: SensitivityReport | None,
    policy: NoisePolicy,
) -> AnnotatedSequence:
    if len(assignments) != len(seq.tokens):
        raise ValueError(
            f"{seq.doc_id}: {len(assignments)} assignments for {len(seq.tokens)} tokens"
        )
    scores = np.zeros(len(seq.tokens))
    for i, t in enumerate(assignments):
        if t is None:
            continue
        if report is None or t not in report:
            raise KeyError(f"{seq.doc_id}: PII type {t!r} has no score in the report")
        scores[i] = report.s_final(t)
    sigmas = np.array([map_score(s, policy) for s in scores], dtype=np.float64)
    return AnnotatedSequence(seq, scores, sigmas, tuple(assignments))
