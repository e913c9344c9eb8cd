"""Corpus ingestion, vocabulary building and whitespace tokenization."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

PLAIN_TEXT = "plain_text_lines"
DELIMITED = "delimited"
FORMATS = (PLAIN_TEXT, DELIMITED)

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIALS = (PAD, UNK, BOS, EOS)

_WORD = re.compile(r"\S+")


class CorpusError(Exception):
    """Raised when a corpus file cannot be read."""


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    source: str = "plain_text"


@dataclass(frozen=True)
class RowError:
    row: int
    reason: str


@dataclass(frozen=True)
class TokenSequence:
    doc_id: str
    tokens: tuple[int, ...]
    offsets: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Vocabulary:
    """Bidirectional id/surface map. Ids 0..3 are the special tokens."""

    id_to_surface: list[str]
    surface_to_id: dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        self.surface_to_id = {s: i for i, s in enumerate(self.id_to_surface)}
        if len(self.surface_to_id) != len(self.id_to_surface):
            raise ValueError("vocabulary surfaces must be unique")

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_surface)

    @property
    def pad_id(self) -> int:
        return self.surface_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.surface_to_id[UNK]

    @property
    def bos_id(self) -> int:
        return self.surface_to_id[BOS]

    @property
    def eos_id(self) -> int:
        return self.surface_to_id[EOS]

    def lookup(self, surface: str) -> int:
        return self.surface_to_id.get(surface, self.unk_id)

    def surface(self, token_id: int) -> str:
        return self.id_to_surface[token_id]

    def to_json(self) -> dict:
        return {"surfaces": list(self.id_to_surface)}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        surfaces = list(obj["surfaces"])
        if tuple(surfaces[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        return cls(surfaces)


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc


def _load_lines(path: Path) -> list[Document]:
    docs = []
    for lineno, line in enumerate(_read_text(path).split("\n"), start=1):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        docs.append(Document(f"L{lineno}", line, "plain_text"))
    return docs


def _load_delimited(path: Path) -> tuple[list[Document], list[RowError]]:
    lines = [l.rstrip("\r") for l in _read_text(path).split("\n")]
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        return [], []
    header = lines[0].split(",")
    if '"' in lines[0]:
        raise CorpusError(f"{path}: quoted fields are not supported (row 1)")
    docs: list[Document] = []
    errors: list[RowError] = []
    for row, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if '"' in line:
            errors.append(RowError(row, "quoted field"))
            continue
        values = line.split(",")
        if len(values) != len(header):
            errors.append(
                RowError(row, f"expected {len(header)} fields, got {len(values)}")
            )
            continue
        text = " ".join(f"{k}={v}" for k, v in zip(header, values))
        docs.append(Document(f"R{row}", text, "delimited_record"))
    return docs, errors


def load_corpus_with_errors(
    path: str | Path, fmt: str = PLAIN_TEXT
) -> tuple[list[Document], list[RowError]]:
    """Load documents and return them with the list of skipped rows."""
    path = Path(path)
    if fmt == PLAIN_TEXT:
        return _load_lines(path), []
    if fmt == DELIMITED:
        return _load_delimited(path)
    raise ValueError(f"unknown corpus format {fmt!r}; expected one of {FORMATS}")


def load_corpus(path: str | Path, fmt: str = PLAIN_TEXT) -> list[Document]:
    """Load a corpus file, one document per nonempty line or record.

    Malformed delimited rows are skipped and logged with their row number.
    """
    docs, errors = load_corpus_with_errors(path, fmt)
    for err in errors:
        logger.warning("%s: row %d skipped: %s", path, err.row, err.reason)
    if errors:
        logger.warning("%s: %d malformed rows skipped", path, len(errors))
    return docs


def words(text: str) -> list[str]:
    return _WORD.findall(text)


def build_vocab(docs: Iterable[Document], max_size: int) -> Vocabulary:
    """Keep the most frequent words; ties go to the lexicographically smaller one."""
    if max_size < len(SPECIALS) + 1:
        raise ValueError(f"max_size must be >= {len(SPECIALS) + 1}, got {max_size}")
    counts: Counter[str] = Counter()
    for doc in docs:
        counts.update(words(doc.text))
    for s in SPECIALS:
        counts.pop(s, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [s for s, _ in ranked[: max_size - len(SPECIALS)]]
    return Vocabulary(list(SPECIALS) + keep)


def tokenize(doc: Document, vocab: Vocabulary) -> TokenSequence:
    tokens = []
    offsets = []
    for m in _WORD.finditer(doc.text):
        tokens.append(vocab.lookup(m.group()))
        offsets.append((m.start(), m.end()))
    return TokenSequence(doc.doc_id, tuple(tokens), tuple(offsets))


def tokenize_all(docs: Sequence[Document], vocab: Vocabulary) -> list[TokenSequence]:
    return [tokenize(d, vocab) for d in docs]
