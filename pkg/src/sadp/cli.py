"""``sadp`` command line: detect, score, annotate, train, account, compare.

Each command prints exactly one JSON object on stdout; logs go to stderr
(level from ``SADP_LOG``: error, info or debug). Exit codes: 0 success,
2 input or configuration error, 3 agent/protocol error, 4 training
divergence, 5 comparison matrix failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

from . import evalx
from .accountant import DEFAULT_ORDERS, PrivacyLedger
from .corpus import (
    PLAIN_TEXT,
    CorpusError,
    Document,
    Vocabulary,
    build_vocab,
    load_corpus,
    tokenize_all,
    words,
)
from .noise_policy import NoisePolicy, PolicyError, annotate, implied_epsilon
from .pii_detect import (
    AgentClient,
    AgentProtocolError,
    AgentUnavailableError,
    PiiRegistry,
    PiiSpan,
    RegistryError,
    detect_corpus,
    group_by_doc,
    project_spans,
    read_spans,
    write_spans,
)
from .scoring import DEFAULT_WEIGHTS, ScoringError, SensitivityReport, score_all
from .trainer import (
    ARMS,
    DP_SGD,
    NO_DP,
    SA_ADP,
    DivergenceError,
    TrainConfig,
    evaluate,
    make_windows,
    save_checkpoint,
    train,
)

logger = logging.getLogger("sadp")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_AGENT = 3
EXIT_DIVERGED = 4
EXIT_MATRIX = 5

_PATH_KEYS = ("corpus", "heldout", "registry", "spans", "report", "policy")


class ConfigError(ValueError):
    pass


class MatrixError(RuntimeError):
    pass


@dataclass
class RunConfig:
    """Every tunable of the pipeline. A config file sets these by name."""

    corpus: str | None = None
    format: str = PLAIN_TEXT
    heldout: str | None = None
    registry: str | None = None
    agent: str | None = None
    agent_timeout: float = 30.0
    spans: str | None = None
    report: str | None = None
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS
    freq_denominator: str = "pii_total"
    policy: Any = None  # path to a policy file or an inline policy object
    arm: str = NO_DP
    sigma: float = 2.0
    seed: int = 0
    seeds: tuple[int, ...] = (0,)
    epochs: int = 3
    batch_size: int = 16
    seq_len: int = 64
    q: float | None = 0.1
    delta: float = 1e-5
    alpha_grid: tuple[float, ...] | None = None
    amplify_subsampling: bool = False
    learning_rate: float = 0.001
    d: int = 32
    init_scale: float = 0.1
    vocab_size: int = 1024
    optimizer: str = "sgd"
    max_steps: int | None = None
    steps: int | None = None
    ledger: str | None = None
    datasets: list | None = None
    arms: list | None = None
    jobs: int = 1
    out: str | None = None

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    try:
        obj = json.loads(path.read_text("utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = sorted(set(obj) - RunConfig.field_names())
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    base = path.parent
    for key in _PATH_KEYS:
        if isinstance(obj.get(key), str):
            obj[key] = str(base / obj[key])
    for ds in obj.get("datasets") or []:
        for key in ("corpus", "heldout"):
            if isinstance(ds.get(key), str):
                ds[key] = str(base / ds[key])
    return obj


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with RunConfig keys; flags override it")
    common.add_argument("--out", help="output file or directory")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--corpus")
    data.add_argument("--format", choices=["plain_text_lines", "delimited"])
    data.add_argument("--heldout")
    data.add_argument("--vocab-size", dest="vocab_size", type=int)

    det = argparse.ArgumentParser(add_help=False)
    det.add_argument("--registry")
    det.add_argument("--spans")

    sc = argparse.ArgumentParser(add_help=False)
    sc.add_argument("--weights", type=_floats)
    sc.add_argument("--freq-denominator", dest="freq_denominator", choices=["pii_total", "word_total"])
    sc.add_argument("--report")
    sc.add_argument("--policy")

    acc = argparse.ArgumentParser(add_help=False)
    acc.add_argument("--sigma", type=float)
    acc.add_argument("--q", type=float)
    acc.add_argument("--delta", type=float)
    acc.add_argument("--alpha-grid", dest="alpha_grid", type=_floats)
    acc.add_argument("--amplify-subsampling", dest="amplify_subsampling", action="store_true", default=None)

    tr = argparse.ArgumentParser(add_help=False)
    tr.add_argument("--arm", choices=list(ARMS))
    tr.add_argument("--seed", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", dest="batch_size", type=int)
    tr.add_argument("--seq-len", dest="seq_len", type=int)
    tr.add_argument("--lr", dest="learning_rate", type=float)
    tr.add_argument("--d", type=int)
    tr.add_argument("--optimizer", choices=["sgd", "adam"])
    tr.add_argument("--max-steps", dest="max_steps", type=int)

    parser = argparse.ArgumentParser(prog="sadp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("detect", parents=[common, data, det], help="find PII spans")
    p.add_argument("--agent", help="agent endpoint URL; replaces the rule detector")
    sub.add_parser("score", parents=[common, data, det, sc], help="score PII types")
    sub.add_parser("annotate", parents=[common, data, det, sc], help="per-token scores and sigmas")
    sub.add_parser("train", parents=[common, data, det, sc, acc, tr], help="train one arm")
    p = sub.add_parser("account", parents=[common, acc], help="convert a ledger to (epsilon, delta)")
    p.add_argument("--ledger")
    p.add_argument("--steps", type=int)
    p = sub.add_parser("compare", parents=[common, data, det, sc, acc, tr], help="run the arm x dataset matrix")
    p.add_argument("--seeds", type=_ints)
    p.add_argument("--jobs", type=int)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    merged: dict[str, Any] = {}
    if getattr(args, "config", None):
        merged.update(load_config_file(args.config))
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        merged[key] = value
    try:
        cfg = RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    for key in ("weights", "seeds", "alpha_grid"):
        val = getattr(cfg, key)
        if val is not None:
            setattr(cfg, key, tuple(val))
    return cfg


# ------------------------------------------------------------ helpers


def _require(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) in (None, "")]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _registry(cfg: RunConfig) -> PiiRegistry:
    return PiiRegistry.load(cfg.registry) if cfg.registry else PiiRegistry.default()


def _policy(cfg: RunConfig) -> NoisePolicy:
    if cfg.policy is None:
        return NoisePolicy()
    if isinstance(cfg.policy, dict):
        return NoisePolicy.from_json(cfg.policy)
    return NoisePolicy.load(cfg.policy)


def _corpus(path: str, fmt: str) -> list[Document]:
    if not Path(path).exists():
        raise CorpusError(f"corpus not found: {path}")
    return load_corpus(path, fmt)


def _spans_for(cfg: RunConfig, docs: Sequence[Document]) -> list[PiiSpan]:
    if cfg.spans:
        return read_spans(cfg.spans)
    return detect_corpus(docs, _registry(cfg))


def _report_for(cfg: RunConfig, spans: Sequence[PiiSpan], docs: Sequence[Document]) -> SensitivityReport:
    if cfg.report:
        return SensitivityReport.load(cfg.report)
    return score_all(
        spans, _registry(cfg), cfg.weights, cfg.freq_denominator,
        sum(len(words(d.text)) for d in docs),
    )


def _annotations(docs, seqs, spans, report, policy):
    by_doc = group_by_doc(spans)
    scores = report.scores() if report is not None else None
    return [
        annotate(seq, project_spans(by_doc.get(seq.doc_id, []), seq, scores), report, policy)
        for seq in seqs
    ]


def _train_config(cfg: RunConfig, policy: NoisePolicy) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        seq_len=cfg.seq_len,
        epochs=cfg.epochs,
        sample_rate=cfg.q,
        arm=cfg.arm,
        policy=policy,
        sigma=cfg.sigma,
        seed=cfg.seed,
        d=cfg.d,
        init_scale=cfg.init_scale,
        optimizer=cfg.optimizer,
        delta=cfg.delta,
        orders=tuple(cfg.alpha_grid) if cfg.alpha_grid else DEFAULT_ORDERS,
        amplify_subsampling=bool(cfg.amplify_subsampling),
        max_steps=cfg.max_steps,
    )


def _num(x: float | None):
    if x is None:
        return None
    return x if math.isfinite(x) else "inf"


# ------------------------------------------------------------ commands


def cmd_detect(cfg: RunConfig) -> dict:
    _require(cfg, "corpus")
    registry = _registry(cfg)
    docs = _corpus(cfg.corpus, cfg.format)
    out = cfg.out or "spans.jsonl"
    stats = {}
    if cfg.agent:
        spans = []
        unknown = unaligned = 0
        with AgentClient(cfg.agent, cfg.agent_timeout) as client:
            for doc in docs:
                res = client.detect(doc, registry)
                spans.extend(res.spans)
                unknown += res.unknown_types
                unaligned += res.unaligned
        stats = {"dropped_unknown_type": unknown, "dropped_unaligned": unaligned}
    else:
        spans = detect_corpus(docs, registry)
    write_spans(out, spans)
    by_type: dict[str, int] = {}
    for sp in spans:
        by_type[sp.pii_type] = by_type.get(sp.pii_type, 0) + 1
    return {"command": "detect", "documents": len(docs), "spans": len(spans), "by_type": by_type,
            "detector": "agent" if cfg.agent else "rules", "out": out, **stats}


def cmd_score(cfg: RunConfig) -> dict:
    _require(cfg, "spans")
    registry = _registry(cfg)
    spans = read_spans(cfg.spans)
    word_total = None
    if cfg.freq_denominator == "word_total":
        _require(cfg, "corpus")
        word_total = sum(len(words(d.text)) for d in _corpus(cfg.corpus, cfg.format))
    report = score_all(spans, registry, cfg.weights, cfg.freq_denominator, word_total)
    out = cfg.out or "report.json"
    report.dump(out)
    return {"command": "score", "n_total": report.n_total, "weights": list(report.weights),
            "s_final": report.scores(), "out": out}


def cmd_annotate(cfg: RunConfig) -> dict:
    _require(cfg, "corpus")
    docs = _corpus(cfg.corpus, cfg.format)
    vocab = build_vocab(docs, cfg.vocab_size)
    seqs = tokenize_all(docs, vocab)
    spans = _spans_for(cfg, docs)
    report = _report_for(cfg, spans, docs)
    policy = _policy(cfg)
    ann = _annotations(docs, seqs, spans, report, policy)
    out = cfg.out or "annotated.jsonl"
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for a in ann:
            fh.write(json.dumps(a.to_json()) + "\n")
    n_tok = sum(len(a) for a in ann)
    n_pii = sum(sum(1 for t in a.pii_types if t) for a in ann)
    return {"command": "annotate", "documents": len(ann), "tokens": n_tok, "pii_tokens": n_pii,
            "pii_density": n_pii / n_tok if n_tok else 0.0, "out": out}


def cmd_train(cfg: RunConfig) -> dict:
    _require(cfg, "corpus")
    docs = _corpus(cfg.corpus, cfg.format)
    held_docs = _corpus(cfg.heldout, cfg.format) if cfg.heldout else None
    vocab = build_vocab(docs, cfg.vocab_size)
    seqs = tokenize_all(docs, vocab)
    held = tokenize_all(held_docs, vocab) if held_docs is not None else None
    policy = _policy(cfg)
    ann = None
    if cfg.arm == SA_ADP:
        spans = _spans_for(cfg, docs)
        report = _report_for(cfg, spans, docs)
        ann = _annotations(docs, seqs, spans, report, policy)
    tcfg = _train_config(cfg, policy)
    result = train(seqs, vocab.vocab_size, tcfg, ann, held)
    metrics = evaluate(result.params, make_windows(held if held is not None else seqs, tcfg.seq_len))

    out = Path(cfg.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    result.metrics.write(out / "metrics.csv")
    save_checkpoint(out / "checkpoint.bin", result.params)
    (out / "vocab.json").write_text(json.dumps(vocab.to_json()) + "\n", encoding="utf-8")
    summary = {
        "command": "train", "arm": cfg.arm, "seed": cfg.seed, "steps": result.steps,
        "accuracy": metrics.accuracy, "perplexity": _num(metrics.perplexity),
        "epsilon_min": None, "epsilon_at_32": None, "out": str(out),
        "tiers": {"zero": result.tiers.zero, "low": result.tiers.low, "high": result.tiers.high},
    }
    if result.ledger is not None:
        result.ledger.dump(out / "ledger.json")
        conv = result.ledger.convert()
        summary["epsilon_min"] = _num(conv.epsilon)
        summary["epsilon_at_32"] = _num(conv.epsilon_at_32)
        summary["argmin_order"] = conv.argmin_order
        sigmas = [cfg.sigma] if cfg.arm == DP_SGD else [policy.sigma_low, policy.sigma_high]
        summary["heuristic_c_over_sigma"] = {
            str(s): _num(implied_epsilon(policy.clip_norm, s)) for s in sigmas
        }
        if conv.explanation:
            summary["note"] = conv.explanation
    return summary


def cmd_account(cfg: RunConfig) -> dict:
    if cfg.ledger:
        ledger = PrivacyLedger.load(cfg.ledger)
        if cfg.delta is not None:
            ledger.delta = cfg.delta
        if cfg.alpha_grid:
            replay = PrivacyLedger(tuple(cfg.alpha_grid), ledger.delta, amplify_subsampling=ledger.amplify_subsampling)
            for s in ledger.steps:
                replay.record_step([] if s.sigma is None else [s.sigma], s.q)
            ledger = replay
    else:
        _require(cfg, "steps")
        q = cfg.q if cfg.q is not None else 1.0
        ledger = PrivacyLedger(
            tuple(cfg.alpha_grid) if cfg.alpha_grid else DEFAULT_ORDERS,
            cfg.delta, q, bool(cfg.amplify_subsampling),
        )
        for _ in range(cfg.steps):
            ledger.record_step([cfg.sigma], q)
    if cfg.out:
        ledger.dump(cfg.out)
    return {"command": "account", **ledger.to_json()}


def _arm_specs(raw) -> list[evalx.ArmSpec]:
    if not raw:
        return list(evalx.DEFAULT_ARMS)
    named = {a.label: a for a in evalx.DEFAULT_ARMS}
    specs = []
    for item in raw:
        if isinstance(item, str):
            if item not in named:
                raise ConfigError(f"unknown arm label {item!r}; known: {sorted(named)}")
            specs.append(named[item])
        else:
            specs.append(evalx.ArmSpec(item["label"], item["arm"], float(item.get("sigma", 0.0))))
    return specs


def cmd_compare(cfg: RunConfig) -> dict:
    if not cfg.datasets:
        if not cfg.corpus:
            raise ConfigError("compare needs 'datasets' in the config or --corpus")
        cfg.datasets = [{"name": Path(cfg.corpus).stem, "corpus": cfg.corpus, "heldout": cfg.heldout}]
    policy = _policy(cfg)
    registry = _registry(cfg)
    datasets = []
    for entry in cfg.datasets:
        fmt = entry.get("format", cfg.format)
        docs = _corpus(entry["corpus"], fmt)
        held_docs = _corpus(entry["heldout"], fmt) if entry.get("heldout") else docs
        vocab = build_vocab(docs, int(entry.get("vocab_size", cfg.vocab_size)))
        seqs = tokenize_all(docs, vocab)
        spans = detect_corpus(docs, registry)
        report = score_all(spans, registry, cfg.weights, cfg.freq_denominator,
                           sum(len(words(d.text)) for d in docs))
        datasets.append(evalx.Dataset(
            entry["name"], seqs, tokenize_all(held_docs, vocab), vocab.vocab_size,
            _annotations(docs, seqs, spans, report, policy),
        ))
    arms = _arm_specs(cfg.arms)
    report = evalx.run_matrix(datasets, arms, _train_config(cfg, policy), cfg.seeds, cfg.jobs)
    out = Path(cfg.out or "compare")
    out.mkdir(parents=True, exist_ok=True)
    for fmt, name in (("csv", "report.csv"), ("json", "report.json"), ("markdown", "report.md")):
        (out / name).write_text(evalx.emit(report, fmt), encoding="utf-8")
    summary = {
        "command": "compare", "rows": len(report.rows), "runs": len(report.runs),
        "failures": len(report.failed), "config_fingerprint": report.config_fingerprint,
        "out": str(out),
    }
    if report.failed:
        summary["failed_runs"] = [f"{r.dataset}/{r.arm}/seed{r.seed}: {r.error}" for r in report.failed]
        raise MatrixError(json.dumps(summary))
    return summary


COMMANDS = {
    "detect": cmd_detect,
    "score": cmd_score,
    "annotate": cmd_annotate,
    "train": cmd_train,
    "account": cmd_account,
    "compare": cmd_compare,
}


def _setup_logging() -> None:
    level = os.environ.get("SADP_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(
        level=levels.get(level, logging.ERROR),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _fail(code: int, command: str, exc: BaseException, **extra) -> int:
    print(json.dumps({"command": command, "error": str(exc), "exit_code": code, **extra}))
    logger.error("%s", exc)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    try:
        cfg = resolve_config(args)
        result = COMMANDS[command](cfg)
    except AgentProtocolError as exc:
        return _fail(EXIT_AGENT, command, exc, payload=exc.payload[:2000])
    except AgentUnavailableError as exc:
        return _fail(EXIT_AGENT, command, exc, retryable=True)
    except DivergenceError as exc:
        return _fail(EXIT_DIVERGED, command, exc, step=exc.step)
    except MatrixError as exc:
        print(str(exc))
        return EXIT_MATRIX
    except (ConfigError, CorpusError, RegistryError, PolicyError, ScoringError,
            OSError, ValueError, KeyError) as exc:
        return _fail(EXIT_INPUT, command, exc)
    print(json.dumps(result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
