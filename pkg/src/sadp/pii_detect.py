"""PII detection: a deterministic rule engine plus an optional HTTP agent client.

The rule engine runs one regular expression per registry type. Types without
a pattern (``PERSON_NAME`` in the default registry) are matched against a
name gazetteer: a given name, optionally followed by a known surname.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import httpx

from .corpus import Document, TokenSequence

logger = logging.getLogger(__name__)

DEFAULT_AGENT_TIMEOUT = 30.0


class RegistryError(ValueError):
    """The registry file is missing, malformed or inconsistent."""


class AgentUnavailableError(RuntimeError):
    """The agent could not be reached. Retrying may succeed."""


class AgentProtocolError(RuntimeError):
    """The agent answered with something that is not the documented format."""

    def __init__(self, message: str, payload: str):
        super().__init__(message)
        self.payload = payload


@dataclass(frozen=True)
class PiiType:
    name: str
    linkable: bool
    datatype_protected: bool
    pattern: str | None = None


@dataclass(frozen=True)
class PiiSpan:
    doc_id: str
    start: int
    end: int
    surface: str
    pii_type: str

    def to_json(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "start": self.start,
            "end": self.end,
            "surface": self.surface,
            "pii_type": self.pii_type,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "PiiSpan":
        return cls(
            str(obj["doc_id"]),
            int(obj["start"]),
            int(obj["end"]),
            str(obj["surface"]),
            str(obj["pii_type"]),
        )


def load_gazetteer(path: str | Path | None = None) -> tuple[list[str], list[str]]:
    if path is None:
        text = resources.files("sadp").joinpath("data/names.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    first, last = [], []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        kind, _, name = line.partition(" ")
        if kind == "first":
            first.append(name.strip())
        elif kind == "last":
            last.append(name.strip())
        else:
            raise RegistryError(f"bad gazetteer line: {line!r}")
    return first, last


def gazetteer_pattern(first: Sequence[str], last: Sequence[str]) -> str:
    # Longer alternatives first so "Jana" never shadows "Janae".
    def alt(names: Sequence[str]) -> str:
        return "|".join(re.escape(n) for n in sorted(set(names), key=lambda s: (-len(s), s)))

    surname = rf"(?:\s+(?:{alt(last)}))?" if last else ""
    return rf"(?<![\w'@.-])(?:{alt(first)}){surname}(?![\w'@-])"


class PiiRegistry:
    """Ordered catalog of PII types with compiled matchers."""

    def __init__(
        self,
        types: Sequence[PiiType],
        version: str = "unversioned",
        gazetteer: tuple[Sequence[str], Sequence[str]] | None = None,
    ):
        if not types:
            raise RegistryError("registry must contain at least one PII type")
        names = [t.name for t in types]
        if len(set(names)) != len(names):
            raise RegistryError(f"duplicate PII type names in {names}")
        self.types = tuple(types)
        self.version = version
        self._by_name = {t.name: t for t in self.types}
        self._matchers: list[tuple[str, re.Pattern]] = []
        for t in self.types:
            if t.pattern is not None:
                try:
                    rx = re.compile(t.pattern)
                except re.error as exc:
                    raise RegistryError(f"bad pattern for {t.name}: {exc}") from exc
            else:
                first, last = gazetteer if gazetteer is not None else load_gazetteer()
                rx = re.compile(gazetteer_pattern(first, last))
            self._matchers.append((t.name, rx))

    def __contains__(self, name: object) -> bool:
        return name in self._by_name

    def __getitem__(self, name: str) -> PiiType:
        return self._by_name[name]

    def __iter__(self):
        return iter(self.types)

    def __len__(self) -> int:
        return len(self.types)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.types]

    def order(self, name: str) -> int:
        return self.names.index(name)

    def matchers(self) -> list[tuple[str, re.Pattern]]:
        return list(self._matchers)

    @classmethod
    def from_json(cls, obj: Mapping, gazetteer=None) -> "PiiRegistry":
        try:
            version = str(obj["version"])
            raw = obj["types"]
        except (KeyError, TypeError) as exc:
            raise RegistryError(f"registry needs 'version' and 'types': {exc}") from exc
        types = []
        for entry in raw:
            for key in ("name", "linkable", "datatype_protected"):
                if key not in entry:
                    raise RegistryError(f"registry entry {entry!r} lacks {key!r}")
            if not isinstance(entry["linkable"], bool) or not isinstance(
                entry["datatype_protected"], bool
            ):
                raise RegistryError(f"flags of {entry['name']} must be booleans")
            types.append(
                PiiType(
                    entry["name"],
                    entry["linkable"],
                    entry["datatype_protected"],
                    entry.get("pattern"),
                )
            )
        return cls(types, version, gazetteer)

    @classmethod
    def load(cls, path: str | Path) -> "PiiRegistry":
        path = Path(path)
        try:
            obj = json.loads(path.read_text("utf-8"))
        except FileNotFoundError as exc:
            raise RegistryError(f"registry file not found: {path}") from exc
        except (OSError, json.JSONDecodeError) as exc:
            raise RegistryError(f"cannot read registry {path}: {exc}") from exc
        return cls.from_json(obj)

    @classmethod
    def default(cls) -> "PiiRegistry":
        text = resources.files("sadp").joinpath("data/default_registry.json").read_text("utf-8")
        return cls.from_json(json.loads(text))

    def to_json(self) -> dict:
        types = []
        for t in self.types:
            entry = {"name": t.name, "linkable": t.linkable, "datatype_protected": t.datatype_protected}
            if t.pattern is not None:
                entry["pattern"] = t.pattern
            types.append(entry)
        return {"version": self.version, "types": types}


def _resolve_overlaps(
    candidates: list[tuple[int, int, int, str]],
) -> list[tuple[int, int, int, str]]:
    # candidates: (start, end, registry_rank, type). Longest first, then earlier
    # start, then registry order; accept greedily if disjoint from accepted ones.
    ordered = sorted(candidates, key=lambda c: (-(c[1] - c[0]), c[0], c[2]))
    accepted: list[tuple[int, int, int, str]] = []
    for cand in ordered:
        if all(cand[1] <= a[0] or cand[0] >= a[1] for a in accepted):
            accepted.append(cand)
    return sorted(accepted)


def detect_rules(doc: Document, registry: PiiRegistry) -> list[PiiSpan]:
    """Find PII spans in ``doc.text``, sorted by start offset."""
    candidates = []
    for rank, (name, rx) in enumerate(registry.matchers()):
        for m in rx.finditer(doc.text):
            if m.end() > m.start():
                candidates.append((m.start(), m.end(), rank, name))
    return [
        PiiSpan(doc.doc_id, s, e, doc.text[s:e], name)
        for s, e, _, name in _resolve_overlaps(candidates)
    ]


def detect_corpus(docs: Sequence[Document], registry: PiiRegistry) -> list[PiiSpan]:
    spans: list[PiiSpan] = []
    for doc in docs:
        spans.extend(detect_rules(doc, registry))
    return spans


@dataclass
class AgentResult:
    spans: list[PiiSpan]
    unknown_types: int = 0
    unaligned: int = 0


class AgentClient:
    """Blocking client for an external PII-extraction agent.

    The agent receives ``{doc_id, text, allowed_types}`` via HTTP POST and
    answers ``{"spans": [{"type": ..., "value": ...}, ...]}``. Reported values
    are aligned back to the text by first exact occurrence.
    """

    def __init__(self, endpoint: str, timeout: float = DEFAULT_AGENT_TIMEOUT, client: httpx.Client | None = None):
        self.endpoint = endpoint
        self._client = client or httpx.Client(timeout=timeout)

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "AgentClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _request(self, doc: Document, registry: PiiRegistry) -> str:
        body = {"doc_id": doc.doc_id, "text": doc.text, "allowed_types": registry.names}
        try:
            resp = self._client.post(self.endpoint, json=body)
        except httpx.HTTPError as exc:
            raise AgentUnavailableError(f"agent at {self.endpoint} unreachable: {exc}") from exc
        if resp.status_code >= 500:
            raise AgentUnavailableError(f"agent returned HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise AgentProtocolError(f"agent returned HTTP {resp.status_code}", resp.text)
        return resp.text

    def detect(self, doc: Document, registry: PiiRegistry) -> AgentResult:
        raw = self._request(doc, registry)
        try:
            payload = json.loads(raw)
            entries = payload["spans"]
            if not isinstance(entries, list):
                raise TypeError("'spans' is not a list")
            pairs = [(str(e["type"]), str(e["value"])) for e in entries]
        except (ValueError, KeyError, TypeError) as exc:
            raise AgentProtocolError(f"unparseable agent response: {exc}", raw) from exc
        return align_agent_fields(doc, pairs, registry)


def align_agent_fields(
    doc: Document, pairs: Sequence[tuple[str, str]], registry: PiiRegistry
) -> AgentResult:
    result = AgentResult([])
    candidates = []
    for type_name, value in pairs:
        if type_name not in registry:
            result.unknown_types += 1
            continue
        start = doc.text.find(value) if value else -1
        if start < 0:
            result.unaligned += 1
            continue
        candidates.append((start, start + len(value), registry.order(type_name), type_name))
    if result.unknown_types:
        logger.warning("%s: dropped %d agent spans with unknown types", doc.doc_id, result.unknown_types)
    if result.unaligned:
        logger.warning("%s: dropped %d agent spans not found in text", doc.doc_id, result.unaligned)
    result.spans = [
        PiiSpan(doc.doc_id, s, e, doc.text[s:e], name)
        for s, e, _, name in _resolve_overlaps(list(dict.fromkeys(candidates)))
    ]
    return result


def detect_agent(
    doc: Document,
    endpoint: str,
    registry: PiiRegistry,
    timeout: float = DEFAULT_AGENT_TIMEOUT,
) -> list[PiiSpan]:
    with AgentClient(endpoint, timeout) as client:
        return client.detect(doc, registry).spans


def project_spans(
    spans: Sequence[PiiSpan],
    seq: TokenSequence,
    scores: Mapping[str, float] | None = None,
) -> list[str | None]:
    """Assign each token the PII type of the spans it overlaps.

    A token overlapping several spans takes the type with the highest score in
    ``scores``; ties (or no scores) go to the span listed first.
    """
    for sp in spans:
        if sp.doc_id != seq.doc_id:
            raise ValueError(f"span from {sp.doc_id!r} projected onto {seq.doc_id!r}")
    out: list[str | None] = []
    for start, end in seq.offsets:
        best: PiiSpan | None = None
        for sp in spans:
            if sp.start < end and start < sp.end:
                if best is None:
                    best = sp
                elif scores is not None and scores.get(sp.pii_type, 0.0) > scores.get(best.pii_type, 0.0):
                    best = sp
        out.append(best.pii_type if best else None)
    return out


def group_by_doc(spans: Sequence[PiiSpan]) -> dict[str, list[PiiSpan]]:
    out: dict[str, list[PiiSpan]] = {}
    for sp in spans:
        out.setdefault(sp.doc_id, []).append(sp)
    return out


def write_spans(path: str | Path, spans: Sequence[PiiSpan]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sp in spans:
            fh.write(json.dumps(sp.to_json(), ensure_ascii=False) + "\n")


def read_spans(path: str | Path) -> list[PiiSpan]:
    spans = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                spans.append(PiiSpan.from_json(json.loads(line)))
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad span record: {exc}") from exc
    return spans
