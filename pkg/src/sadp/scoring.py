"""Per-type PII sensitivity scores.

Each PII type gets three indicators, combined linearly::

    s_freq  = 1 - f / N          (rarer types score higher)
    s_link  = 1 if the type is linkable else 0
    s_dt    = 1 if the type is a regulated data category else 0
    s_final = w1 * s_freq + w2 * s_link + w3 * s_dt

``N`` is the total number of PII occurrences by default. Setting
``freq_denominator="word_total"`` divides by the corpus word count instead.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .pii_detect import PiiRegistry, PiiSpan

DEFAULT_WEIGHTS = (0.4, 0.3, 0.3)
PII_TOTAL = "pii_total"
WORD_TOTAL = "word_total"
_CLAMP_SLACK = 1e-12


class ScoringError(ValueError):
    """Scores are undefined for the given inputs."""


class EmptyCorpusError(ScoringError):
    def __init__(self) -> None:
        super().__init__(
            "no PII occurrences found (N = 0): sensitivity scores are undefined and "
            "SA-ADP degenerates to the No-DP baseline"
        )


class WeightsError(ScoringError):
    pass


def check_weights(weights: Sequence[float]) -> tuple[float, float, float]:
    if len(weights) != 3:
        raise WeightsError(f"need exactly three weights, got {len(weights)}")
    w = tuple(float(x) for x in weights)
    if any(not math.isfinite(x) or x < 0 for x in w):
        raise WeightsError(f"weights must be finite and non-negative, got {w}")
    if abs(math.fsum(w) - 1.0) > 1e-9:
        raise WeightsError(f"weights must sum to 1, got {w} (sum {math.fsum(w)!r})")
    return w  # type: ignore[return-value]


def count_pii(spans: Iterable[PiiSpan]) -> tuple[dict[str, int], int]:
    counts = Counter(sp.pii_type for sp in spans)
    return dict(counts), sum(counts.values())


def freq_score(f: int, n: int) -> float:
    if n <= 0:
        raise EmptyCorpusError()
    if not 0 <= f <= n:
        raise ScoringError(f"count {f} outside [0, {n}]")
    return 1.0 - f / n


def final_score(
    s_freq: float,
    s_link: float,
    s_datatype: float,
    weights: Sequence[float] = DEFAULT_WEIGHTS,
) -> float:
    w1, w2, w3 = check_weights(weights)
    s = w1 * s_freq + w2 * s_link + w3 * s_datatype
    if s < -_CLAMP_SLACK or s > 1.0 + _CLAMP_SLACK:
        raise ScoringError(f"score {s!r} outside [0, 1]; check the inputs")
    return min(1.0, max(0.0, s))


@dataclass(frozen=True)
class TypeScore:
    type: str
    count: int
    s_freq: float
    s_link: int
    s_datatype: int
    s_final: float


@dataclass(frozen=True)
class SensitivityReport:
    entries: tuple[TypeScore, ...]
    n_total: int
    weights: tuple[float, float, float]
    freq_denominator: str = PII_TOTAL

    def __getitem__(self, pii_type: str) -> TypeScore:
        for e in self.entries:
            if e.type == pii_type:
                return e
        raise KeyError(pii_type)

    def __contains__(self, pii_type: object) -> bool:
        return any(e.type == pii_type for e in self.entries)

    def s_final(self, pii_type: str) -> float:
        return self[pii_type].s_final

    def scores(self) -> dict[str, float]:
        return {e.type: e.s_final for e in self.entries}

    def to_json(self) -> dict:
        return {
            "n_total": self.n_total,
            "weights": list(self.weights),
            "freq_denominator": self.freq_denominator,
            "types": [
                {
                    "type": e.type,
                    "count": e.count,
                    "s_freq": e.s_freq,
                    "s_link": e.s_link,
                    "s_datatype": e.s_datatype,
                    "s_final": e.s_final,
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "SensitivityReport":
        entries = tuple(
            TypeScore(
                str(t["type"]),
                int(t["count"]),
                float(t["s_freq"]),
                int(t["s_link"]),
                int(t["s_datatype"]),
                float(t["s_final"]),
            )
            for t in obj["types"]
        )
        return cls(
            entries,
            int(obj["n_total"]),
            check_weights(obj["weights"]),
            obj.get("freq_denominator", PII_TOTAL),
        )

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SensitivityReport":
        return cls.from_json(json.loads(Path(path).read_text("utf-8")))


def score_all(
    spans: Sequence[PiiSpan],
    registry: PiiRegistry,
    weights: Sequence[float] = DEFAULT_WEIGHTS,
    freq_denominator: str = PII_TOTAL,
    word_total: int | None = None,
) -> SensitivityReport:
    """Score every PII type that occurs in ``spans``.

    Types are listed in registry order. Types without occurrences are left
    out since their frequency score is undefined.
    """
    w = check_weights(weights)
    counts, n_pii = count_pii(spans)
    if n_pii == 0:
        raise EmptyCorpusError()
    unknown = sorted(set(counts) - set(registry.names))
    if unknown:
        raise ScoringError(f"spans reference types missing from the registry: {unknown}")
    if freq_denominator == PII_TOTAL:
        n = n_pii
    elif freq_denominator == WORD_TOTAL:
        if word_total is None or word_total < n_pii:
            raise ScoringError("word_total denominator needs the corpus word count (>= PII count)")
        n = word_total
    else:
        raise ScoringError(f"unknown freq_denominator {freq_denominator!r}")

    entries = []
    for t in registry:
        if t.name not in counts:
            continue
        f = counts[t.name]
        s_freq = freq_score(f, n)
        s_link = int(t.linkable)
        s_dt = int(t.datatype_protected)
        entries.append(TypeScore(t.name, f, s_freq, s_link, s_dt, final_score(s_freq, s_link, s_dt, w)))
    return SensitivityReport(tuple(entries), n, w, freq_denominator)
