"""Embedding-softmax next-token model trained under No-DP, DP-SGD or SA-ADP.

The model predicts token ``t[i+1]`` from ``t[i]`` with logits
``W.T @ E[t[i]] + b``. Parameters live in one flat vector ordered as
``E`` (vocab x d, row-major), then ``W`` (d x vocab, row-major), then ``b``.

The gradient of one position's loss is ``r = softmax - onehot(target)`` for
``b``, ``outer(E[t[i]], r)`` for ``W`` and ``W @ r`` in row ``t[i]`` of ``E``.
Batch gradients are assembled from these factors with per-position weights,
which is how clipping enters without materializing per-position vectors.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .accountant import DEFAULT_DELTA, DEFAULT_ORDERS, PrivacyLedger
from .corpus import TokenSequence
from .dp_core import TierCounts, classify_tiers
from .noise_policy import AnnotatedSequence, NoisePolicy
from .rng import INIT, NOISE, SAMPLING, RngStream

logger = logging.getLogger(__name__)

NO_DP = "no_dp"
DP_SGD = "dp_sgd_uniform"
SA_ADP = "sa_adp"
ARMS = (NO_DP, DP_SGD, SA_ADP)

CHECKPOINT_MAGIC = b"SADP"
CHECKPOINT_VERSION = 1
METRICS_HEADER = (
    "epoch", "step", "arm", "loss", "accuracy", "perplexity",
    "epsilon_at_32", "epsilon_min", "tier0", "tier_low", "tier_high",
)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"training diverged at step {step}: non-finite {what}")
        self.step = step


class ModelParams:
    """Flat parameter vector with ``E``, ``W`` and ``b`` as views into it."""

    def __init__(self, vocab_size: int, d: int, theta: np.ndarray | None = None):
        self.vocab_size = int(vocab_size)
        self.d = int(d)
        size = 2 * self.vocab_size * self.d + self.vocab_size
        if theta is None:
            theta = np.zeros(size)
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        if theta.shape != (size,):
            raise ValueError(f"expected {size} parameters, got {theta.shape}")
        if not np.isfinite(theta).all():
            raise ValueError("parameters must be finite")
        self.theta = theta

    @property
    def size(self) -> int:
        return self.theta.size

    @property
    def E(self) -> np.ndarray:
        v, d = self.vocab_size, self.d
        return self.theta[: v * d].reshape(v, d)

    @property
    def W(self) -> np.ndarray:
        v, d = self.vocab_size, self.d
        return self.theta[v * d : 2 * v * d].reshape(d, v)

    @property
    def b(self) -> np.ndarray:
        return self.theta[2 * self.vocab_size * self.d :]

    def copy(self) -> "ModelParams":
        return ModelParams(self.vocab_size, self.d, self.theta.copy())

    @classmethod
    def init(cls, vocab_size: int, d: int, rng: RngStream, scale: float = 0.1) -> "ModelParams":
        p = cls(vocab_size, d)
        gen = rng.generator()
        p.E[...] = scale * gen.standard_normal((vocab_size, d))
        p.W[...] = scale * gen.standard_normal((d, vocab_size))
        return p


def save_checkpoint(path: str | Path, params: ModelParams) -> None:
    header = CHECKPOINT_MAGIC + struct.pack("<III", CHECKPOINT_VERSION, params.vocab_size, params.d)
    Path(path).write_bytes(header + params.theta.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    version, vocab_size, d = struct.unpack("<III", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    return ModelParams(vocab_size, d, np.frombuffer(raw[16:], dtype="<f8").astype(np.float64))


# ---------------------------------------------------------------- windows


@dataclass(frozen=True)
class Window:
    tokens: np.ndarray  # int64
    sigmas: np.ndarray | None = None  # per token, from annotation

    def position_sigmas(self) -> np.ndarray:
        """Noise multiplier per prediction position.

        Position ``i`` reads token ``i`` and predicts token ``i+1``; it takes
        the larger multiplier of the two.
        """
        if self.sigmas is None:
            return np.zeros(len(self.tokens) - 1)
        return np.maximum(self.sigmas[:-1], self.sigmas[1:])


def make_windows(
    seqs: Sequence[TokenSequence],
    seq_len: int,
    annotations: Sequence[AnnotatedSequence] | None = None,
) -> list[Window]:
    """Cut each sequence into non-overlapping windows; keep a short tail of >= 2 tokens."""
    if seq_len < 2:
        raise ValueError("seq_len must be at least 2")
    if annotations is not None:
        if len(annotations) != len(seqs):
            raise ValueError("annotations must align with sequences")
        for s, a in zip(seqs, annotations):
            if a.seq.doc_id != s.doc_id or len(a) != len(s):
                raise ValueError(f"annotation for {a.seq.doc_id} does not match {s.doc_id}")
    out = []
    for k, seq in enumerate(seqs):
        toks = np.asarray(seq.tokens, dtype=np.int64)
        sig = annotations[k].sigmas if annotations is not None else None
        for start in range(0, len(toks), seq_len):
            chunk = toks[start : start + seq_len]
            if len(chunk) >= 2:
                out.append(Window(chunk, None if sig is None else sig[start : start + seq_len]))
    return out


# ------------------------------------------------------ loss and gradients


def _check_tokens(tokens: np.ndarray, vocab_size: int) -> None:
    if len(tokens) and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise ValueError(f"token id out of range for vocabulary of {vocab_size}")


def forward_loss(params: ModelParams, window) -> tuple[float, np.ndarray]:
    """Mean next-token NLL of a window and the per-position losses."""
    tokens = np.asarray(window, dtype=np.int64)
    if len(tokens) < 2:
        raise ValueError("a window needs at least 2 tokens")
    _check_tokens(tokens, params.vocab_size)
    logits = params.E[tokens[:-1]] @ params.W + params.b
    losses = kernels.softmax_xent(np.ascontiguousarray(logits), tokens[1:].copy())
    return float(losses.mean()), losses


@dataclass
class BatchTerms:
    """Gradient factors for every position of a batch of windows."""

    inputs: np.ndarray  # (n,) input token per position
    x: np.ndarray  # (n, d) input embeddings
    r: np.ndarray  # (n, V) softmax - onehot
    wr: np.ndarray  # (n, d) W @ r
    losses: np.ndarray  # (n,)
    seg: np.ndarray  # (m+1,) window boundaries

    @property
    def n(self) -> int:
        return len(self.inputs)


def batch_terms(params: ModelParams, windows: Sequence) -> BatchTerms:
    toks = [np.asarray(w.tokens if isinstance(w, Window) else w, dtype=np.int64) for w in windows]
    inputs = np.concatenate([t[:-1] for t in toks]) if toks else np.zeros(0, np.int64)
    targets = np.concatenate([t[1:] for t in toks]) if toks else np.zeros(0, np.int64)
    _check_tokens(inputs, params.vocab_size)
    _check_tokens(targets, params.vocab_size)
    seg = np.zeros(len(toks) + 1, dtype=np.int64)
    seg[1:] = np.cumsum([len(t) - 1 for t in toks])
    x = np.ascontiguousarray(params.E[inputs])
    r = np.ascontiguousarray(x @ params.W + params.b)
    losses = kernels.softmax_xent(r, targets)
    wr = np.ascontiguousarray(r @ params.W.T)
    return BatchTerms(inputs, x, r, wr, losses, seg)


def assemble_gradient(params: ModelParams, terms: BatchTerms, weights: np.ndarray) -> np.ndarray:
    """Flat ``sum_i weights[i] * g_i`` over the batch positions."""
    grad = np.zeros(params.size)
    g = ModelParams(params.vocab_size, params.d, grad)  # views into grad
    wr_ = weights[:, None] * terms.r
    g.W[...] = terms.x.T @ wr_
    g.b[...] = wr_.sum(axis=0)
    kernels.scatter_add_rows(g.E, terms.inputs, terms.wr, np.ascontiguousarray(weights))
    return grad


def per_token_grads(params: ModelParams, window) -> list[np.ndarray]:
    """Materialized flat gradient of each position's loss term."""
    tokens = np.asarray(window, dtype=np.int64)
    if len(tokens) < 2:
        return []
    terms = batch_terms(params, [tokens])
    out = []
    for i in range(terms.n):
        grad = np.zeros(params.size)
        g = ModelParams(params.vocab_size, params.d, grad)
        g.W[...] = np.outer(terms.x[i], terms.r[i])
        g.b[...] = terms.r[i]
        g.E[terms.inputs[i]] = terms.wr[i]
        out.append(grad)
    return out


def token_clip_factors(terms: BatchTerms, clip_norm: float) -> np.ndarray:
    singles = np.arange(terms.n + 1, dtype=np.int64)
    norms = np.sqrt(kernels.segment_sq_norms(terms.x, terms.r, terms.wr, terms.inputs, singles))
    return _factors(norms, clip_norm)


def record_clip_factors(terms: BatchTerms, clip_norm: float) -> np.ndarray:
    """Per-position weights that clip each window's mean-loss gradient."""
    sq = kernels.segment_sq_norms(terms.x, terms.r, terms.wr, terms.inputs, terms.seg)
    lengths = np.diff(terms.seg).astype(np.float64)
    factors = _factors(np.sqrt(sq) / lengths, clip_norm)
    return np.repeat(factors / lengths, np.diff(terms.seg))


def _factors(norms: np.ndarray, clip_norm: float) -> np.ndarray:
    out = np.ones_like(norms)
    over = norms > clip_norm
    out[over] = clip_norm / norms[over]
    return out


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 16
    seq_len: int = 64
    epochs: int = 3
    sample_rate: float | None = 0.1
    arm: str = NO_DP
    policy: NoisePolicy = field(default_factory=NoisePolicy)
    sigma: float = 2.0  # DP-SGD noise multiplier
    seed: int = 0
    d: int = 32
    init_scale: float = 0.1
    optimizer: str = "sgd"
    delta: float = DEFAULT_DELTA
    orders: tuple[float, ...] = DEFAULT_ORDERS
    amplify_subsampling: bool = False
    max_steps: int | None = None

    def __post_init__(self) -> None:
        if self.arm not in ARMS:
            raise ValueError(f"arm must be one of {ARMS}, got {self.arm!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        for name in ("learning_rate", "batch_size", "seq_len", "epochs", "d"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.sample_rate is not None and not 0 < self.sample_rate <= 1:
            raise ValueError("sample_rate must lie in (0, 1]")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")

    def rate(self, n_records: int) -> float:
        if self.sample_rate is not None:
            return self.sample_rate
        return min(1.0, self.batch_size / max(n_records, 1))


@dataclass
class Metrics:
    accuracy: float
    perplexity: float
    loss: float


@dataclass
class MetricsLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append(row)

    def to_csv(self, timestamp: str | None = None) -> str:
        buf = io.StringIO()
        stamp = timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds")
        buf.write(f"# generated {stamp}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in self.rows:
            w.writerow([_fmt(row[k]) for k in METRICS_HEADER])
        return buf.getvalue()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("inf" if v > 0 else "nan")
    return str(v)


@dataclass
class TrainResult:
    params: ModelParams
    metrics: MetricsLog
    ledger: PrivacyLedger | None
    steps: int
    tiers: TierCounts


class _Adam:
    def __init__(self, size: int, lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        theta -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def sa_adp_gradient(
    params: ModelParams,
    terms: BatchTerms,
    sigmas: np.ndarray,
    policy: NoisePolicy,
    rng: RngStream,
) -> np.ndarray:
    """Sum of clipped per-position gradients plus per-position noise.

    Position ``k`` of the batch draws its noise from ``rng.split(k)``, the same
    stream ``dp_core.perturb_sequence`` uses for token ``k``.
    """
    weights = token_clip_factors(terms, policy.clip_norm)
    grad = assemble_gradient(params, terms, weights)
    for k in np.flatnonzero(sigmas > 0):
        grad += (sigmas[k] * policy.clip_norm) * rng.split(int(k)).normal(params.size)
    return grad


def train(
    train_seqs: Sequence[TokenSequence],
    vocab_size: int,
    config: TrainConfig,
    annotations: Sequence[AnnotatedSequence] | None = None,
    eval_seqs: Sequence[TokenSequence] | None = None,
) -> TrainResult:
    """Train with Poisson-sampled batches and return params, metrics and ledger.

    Each record (window) joins a step's batch independently with probability
    ``q``; an epoch is ``ceil(1/q)`` steps.
    """
    if config.arm == SA_ADP and annotations is None:
        raise ValueError("the sa_adp arm needs token annotations")
    windows = make_windows(train_seqs, config.seq_len, annotations if config.arm == SA_ADP else None)
    if not windows:
        raise ValueError("training corpus has no window with at least 2 tokens")
    eval_windows = make_windows(eval_seqs, config.seq_len) if eval_seqs is not None else windows
    n_records = len(windows)
    q = config.rate(n_records)
    steps_per_epoch = math.ceil(1.0 / q)
    root = RngStream(config.seed)
    params = ModelParams.init(vocab_size, config.d, root.split(INIT), config.init_scale)
    adam = _Adam(params.size, config.learning_rate) if config.optimizer == "adam" else None
    policy = config.policy
    dp = config.arm != NO_DP
    ledger = (
        PrivacyLedger(config.orders, config.delta, q, config.amplify_subsampling) if dp else None
    )
    position_sigmas = [w.position_sigmas() for w in windows] if config.arm == SA_ADP else None
    log = MetricsLog()
    total_tiers = TierCounts()
    step = 0
    done = False
    for epoch in range(1, config.epochs + 1):
        epoch_losses: list[float] = []
        tiers = TierCounts()
        for _ in range(steps_per_epoch):
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break
            picked = np.flatnonzero(root.split(SAMPLING, step).generator().random(n_records) < q)
            batch = [windows[i] for i in picked]
            noise_rng = root.split(NOISE, step)
            grad = None
            if batch:
                terms = batch_terms(params, batch)
                if not np.isfinite(terms.losses).all():
                    raise DivergenceError(step)
                epoch_losses.append(float(terms.losses.mean()))
            if config.arm == NO_DP:
                if batch:
                    grad = assemble_gradient(params, terms, np.ones(terms.n)) / terms.n
                    tiers += TierCounts(terms.n, 0, 0)
            elif config.arm == DP_SGD:
                clip_norm = policy.clip_norm
                if batch:
                    grad = assemble_gradient(params, terms, record_clip_factors(terms, clip_norm))
                else:
                    grad = np.zeros(params.size)
                if config.sigma > 0:
                    grad += (config.sigma * clip_norm) * noise_rng.normal(params.size)
                grad /= q * n_records
                ledger.record_step([config.sigma], q)
                tiers += classify_tiers(np.full(terms.n if batch else 0, config.sigma), policy)
            else:
                sig = np.concatenate([position_sigmas[i] for i in picked]) if batch else np.zeros(0)
                if batch:
                    grad = sa_adp_gradient(params, terms, sig, policy, noise_rng) / terms.n
                ledger.record_step(np.unique(sig), q)
                tiers += classify_tiers(sig, policy)
            if grad is not None:
                if adam is not None:
                    adam.step(params.theta, grad)
                else:
                    params.theta -= config.learning_rate * grad
                if not np.isfinite(params.theta).all():
                    raise DivergenceError(step, "parameters")
            step += 1
        m = evaluate(params, eval_windows)
        conv = ledger.convert() if ledger is not None else None
        log.append(
            epoch=epoch,
            step=step,
            arm=config.arm,
            loss=float(np.mean(epoch_losses)) if epoch_losses else None,
            accuracy=m.accuracy,
            perplexity=m.perplexity,
            epsilon_at_32=conv.epsilon_at_32 if conv else None,
            epsilon_min=conv.epsilon if conv else None,
            tier0=tiers.zero,
            tier_low=tiers.low,
            tier_high=tiers.high,
        )
        logger.info("epoch %d step %d %s loss=%s ppl=%.4f", epoch, step, config.arm, log.rows[-1]["loss"], m.perplexity)
        total_tiers += tiers
        if done:
            break
    return TrainResult(params, log, ledger, step, total_tiers)


def evaluate(params: ModelParams, windows: Sequence, chunk: int = 4096) -> Metrics:
    """Top-1 next-token accuracy (ties to the lowest id) and perplexity."""
    toks = [np.asarray(w.tokens if isinstance(w, Window) else w, dtype=np.int64) for w in windows]
    toks = [t for t in toks if len(t) >= 2]
    if not toks:
        raise ValueError("evaluation set has no window with at least 2 tokens")
    inputs = np.concatenate([t[:-1] for t in toks])
    targets = np.concatenate([t[1:] for t in toks])
    _check_tokens(inputs, params.vocab_size)
    _check_tokens(targets, params.vocab_size)
    correct = 0
    nll = 0.0
    for a in range(0, len(inputs), chunk):
        logits = params.E[inputs[a : a + chunk]] @ params.W + params.b
        tgt = targets[a : a + chunk]
        correct += int((logits.argmax(axis=1) == tgt).sum())
        m = logits.max(axis=1)
        lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
        nll += float((lse - logits[np.arange(len(tgt)), tgt]).sum())
    n = len(inputs)
    mean_nll = nll / n
    ppl = math.exp(mean_nll) if mean_nll < 709.0 else math.inf
    return Metrics(correct / n, ppl, mean_nll)


def with_arm(config: TrainConfig, arm: str, **changes) -> TrainConfig:
    return replace(config, arm=arm, **changes)
