"""Multi-seed comparison of the training arms across datasets."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .corpus import TokenSequence
from .noise_policy import AnnotatedSequence
from .trainer import DP_SGD, NO_DP, SA_ADP, TrainConfig, evaluate, make_windows, train

logger = logging.getLogger(__name__)

COLUMNS = ("dataset", "arm", "accuracy", "perplexity", "epsilon_min", "epsilon_at_32")
EXTRA_COLUMNS = ("accuracy_std", "perplexity_std", "n_seeds", "failures")

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["config_fingerprint", "seeds", "columns", "rows", "runs"],
    "properties": {
        "config_fingerprint": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "seeds": {"type": "array", "items": {"type": "integer"}},
        "columns": {"type": "array", "items": {"type": "string"}},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": list(COLUMNS + EXTRA_COLUMNS),
                "properties": {
                    "dataset": {"type": "string"},
                    "arm": {"type": "string"},
                    "accuracy": {"type": ["number", "null"]},
                    "perplexity": {"type": ["number", "null", "string"]},
                    "epsilon_min": {"anyOf": [{"type": "number"}, {"type": "null"}, {"const": "inf"}]},
                    "epsilon_at_32": {"anyOf": [{"type": "number"}, {"type": "null"}, {"const": "inf"}]},
                    "accuracy_std": {"type": ["number", "null"]},
                    "perplexity_std": {"type": ["number", "null", "string"]},
                    "n_seeds": {"type": "integer", "minimum": 0},
                    "failures": {"type": "integer", "minimum": 0},
                },
            },
        },
        "runs": {"type": "array"},
    },
}


@dataclass(frozen=True)
class ArmSpec:
    label: str
    arm: str
    sigma: float = 0.0


DEFAULT_ARMS = (
    ArmSpec("baseline", NO_DP),
    ArmSpec("sa_adp", SA_ADP),
    ArmSpec("dpsgd_sigma2", DP_SGD, 2.0),
    ArmSpec("dpsgd_sigma3", DP_SGD, 3.0),
)


@dataclass
class Dataset:
    name: str
    train: Sequence[TokenSequence]
    heldout: Sequence[TokenSequence]
    vocab_size: int
    annotations: Sequence[AnnotatedSequence] | None = None


@dataclass
class RunResult:
    dataset: str
    arm: str
    seed: int
    accuracy: float | None = None
    perplexity: float | None = None
    epsilon_min: float | None = None
    epsilon_at_32: float | None = None
    error: str | None = None


@dataclass
class ReportRow:
    dataset: str
    arm: str
    accuracy: float | None
    perplexity: float | None
    epsilon_min: float | None
    epsilon_at_32: float | None
    accuracy_std: float | None
    perplexity_std: float | None
    n_seeds: int
    failures: int


@dataclass
class ComparisonReport:
    rows: list[ReportRow]
    runs: list[RunResult]
    config_fingerprint: str
    seeds: tuple[int, ...]
    arms: tuple[ArmSpec, ...] = field(default=DEFAULT_ARMS)

    @property
    def failed(self) -> list[RunResult]:
        return [r for r in self.runs if r.error is not None]

    def row(self, dataset: str, arm: str) -> ReportRow:
        for r in self.rows:
            if r.dataset == dataset and r.arm == arm:
                return r
        raise KeyError((dataset, arm))


def config_fingerprint(config: TrainConfig, arms: Sequence[ArmSpec]) -> str:
    cfg = asdict(replace(config, seed=0, arm=NO_DP))
    blob = json.dumps({"config": cfg, "arms": [asdict(a) for a in arms]}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _run_one(ds: Dataset, spec: ArmSpec, config: TrainConfig, seed: int) -> RunResult:
    cfg = replace(config, arm=spec.arm, sigma=spec.sigma, seed=seed)
    try:
        res = train(ds.train, ds.vocab_size, cfg, ds.annotations, ds.heldout)
        m = evaluate(res.params, make_windows(ds.heldout, cfg.seq_len))
    except Exception as exc:  # recorded in the report; the caller decides the exit code
        logger.error("%s/%s seed %d failed: %s", ds.name, spec.label, seed, exc)
        return RunResult(ds.name, spec.label, seed, error=f"{type(exc).__name__}: {exc}")
    out = RunResult(ds.name, spec.label, seed, m.accuracy, m.perplexity)
    if res.ledger is not None:
        conv = res.ledger.convert()
        out.epsilon_min = conv.epsilon
        out.epsilon_at_32 = conv.epsilon_at_32
    return out


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    if not np.isfinite(arr).all():
        return math.inf, math.inf
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std


def aggregate(runs: Sequence[RunResult], datasets: Sequence[str], arms: Sequence[ArmSpec]) -> list[ReportRow]:
    """One row per (dataset, arm). Epsilon is the worst (largest) over seeds."""
    rows = []
    for ds in datasets:
        for spec in arms:
            mine = [r for r in runs if r.dataset == ds and r.arm == spec.label]
            ok = [r for r in mine if r.error is None]
            acc, acc_sd = _mean_std([r.accuracy for r in ok])
            ppl, ppl_sd = _mean_std([r.perplexity for r in ok])
            eps_min = eps_32 = None
            if spec.arm != NO_DP and ok:
                eps_min = max(r.epsilon_min for r in ok)
                eps_32 = max(r.epsilon_at_32 for r in ok)
            rows.append(ReportRow(ds, spec.label, acc, ppl, eps_min, eps_32, acc_sd, ppl_sd, len(ok), len(mine) - len(ok)))
    return rows


def run_matrix(
    datasets: Sequence[Dataset],
    arms: Sequence[ArmSpec],
    config: TrainConfig,
    seeds: Sequence[int],
    jobs: int = 1,
) -> ComparisonReport:
    """Train and evaluate every (dataset, arm, seed) cell.

    Cells are independent, so ``jobs > 1`` runs them on a thread pool; the
    report does not depend on ``jobs``.
    """
    cells = [(ds, spec, seed) for ds in datasets for spec in arms for seed in seeds]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            runs = list(pool.map(lambda c: _run_one(c[0], c[1], config, c[2]), cells))
    else:
        runs = [_run_one(ds, spec, config, seed) for ds, spec, seed in cells]
    rows = aggregate(runs, [d.name for d in datasets], arms)
    return ComparisonReport(rows, runs, config_fingerprint(config, arms), tuple(seeds), tuple(arms))


# ----------------------------------------------------------------- output


def _json_num(x: float | None):
    if x is None:
        return None
    if math.isinf(x):
        return "inf"
    return x


def _csv_num(x: float | None) -> str:
    if x is None:
        return ""
    if math.isinf(x):
        return "inf"
    return repr(float(x))


def _row_dict(row: ReportRow) -> dict:
    d = asdict(row)
    return {k: (_json_num(v) if isinstance(v, float) else v) for k, v in d.items()}


def to_json(report: ComparisonReport) -> str:
    obj = {
        "config_fingerprint": report.config_fingerprint,
        "seeds": list(report.seeds),
        "columns": list(COLUMNS + EXTRA_COLUMNS),
        "rows": [_row_dict(r) for r in report.rows],
        "runs": [
            {k: (_json_num(v) if isinstance(v, float) else v) for k, v in asdict(r).items()}
            for r in report.runs
        ],
    }
    return json.dumps(obj, indent=2) + "\n"


def to_csv(report: ComparisonReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS + EXTRA_COLUMNS)
    for r in report.rows:
        w.writerow([
            r.dataset, r.arm, _csv_num(r.accuracy), _csv_num(r.perplexity),
            _csv_num(r.epsilon_min), _csv_num(r.epsilon_at_32),
            _csv_num(r.accuracy_std), _csv_num(r.perplexity_std), r.n_seeds, r.failures,
        ])
    return buf.getvalue()


def _pm(mean: float | None, sd: float | None, scale: float = 1.0, digits: int = 2) -> str:
    if mean is None:
        return "failed"
    if math.isinf(mean):
        return "inf"
    return f"{mean * scale:.{digits}f} ± {sd * scale:.{digits}f}"


def _eps(x: float | None) -> str:
    if x is None:
        return "–"
    return "inf" if math.isinf(x) else f"{x:.4f}"


def to_markdown(report: ComparisonReport) -> str:
    lines = [
        "| Dataset | Arm | Accuracy (%) | Perplexity | ε (best order) | ε (α=32) |",
        "|---|---|---|---|---|---|",
    ]
    for r in report.rows:
        lines.append(
            f"| {r.dataset} | {r.arm} | {_pm(r.accuracy, r.accuracy_std, 100.0)} | "
            f"{_pm(r.perplexity, r.perplexity_std)} | {_eps(r.epsilon_min)} | {_eps(r.epsilon_at_32)} |"
        )
    return "\n".join(lines) + "\n"


def emit(report: ComparisonReport, fmt: str) -> str:
    if fmt == "csv":
        return to_csv(report)
    if fmt == "json":
        return to_json(report)
    if fmt in ("markdown", "markdown_table", "md"):
        return to_markdown(report)
    raise ValueError(f"unknown report format {fmt!r}")
