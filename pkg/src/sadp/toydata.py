"""Synthetic customer-support corpus with known PII positions.

Documents are filled from templates. Every PII value is inserted by the
generator, which records its character span as it goes; those records are
the ground-truth labels and never pass through the detector.

``python -m sadp.toydata OUTDIR`` regenerates the bundled data files.
"""

from __future__ import annotations

import json
import random
import re
import sys
from pathlib import Path

from .pii_detect import load_gazetteer

_SLOT = re.compile(r"\{([A-Z_]+)\}")

CUSTOMER = [
    "hi my name is {PERSON_NAME} and i need help with my order",
    "please send the receipt to {EMAIL} thanks",
    "you can reach me at {PHONE} after five",
    "my date of birth is {DATE_OF_BIRTH} for the verification",
    "the card on file is {CREDIT_CARD} please update it",
    "my social security number is {SSN} for the tax form",
    "i logged in from {IP_ADDRESS} and the page did not load",
    "i would like to return the shoes i bought last week",
    "where is my package it was supposed to arrive yesterday",
    "can you tell me the status of my refund",
    "the app keeps crashing when i open the cart",
    "i want to change the shipping address on my account",
    "my order number is {ORDER} and it has not shipped",
    "i was charged twice for the same order",
    "the item arrived damaged and i want a replacement",
    "how long does the refund take to show on my card",
    "i forgot my password and cannot log in",
    "can i cancel my subscription before the next billing date",
    "the discount code did not work at checkout",
    "i need to update the email on my account",
    "i would like to speak with a manager about my order",
    "the size is wrong can i exchange it for a larger one",
]

AGENT = [
    "sure i can help with that",
    "let me check the status of your order",
    "could you please confirm the email on the account",
    "thank you {PERSON_NAME} your request has been processed",
    "i have issued a refund and it should arrive in five days",
    "your package is on the way and should arrive tomorrow",
    "i have updated your account with the new details",
    "i am sorry for the trouble let me fix that for you",
    "a replacement has been sent to your shipping address",
    "your subscription has been cancelled",
    "i have reset your password please check your inbox",
    "is there anything else i can help you with today",
]

CLOSING = [
    "thank you for your help",
    "thanks have a nice day",
    "great that solves it",
    "ok thanks",
]

DOMAINS = ["example.com", "mail.example.org", "shop.example.net", "corp.example.io"]

# Detection fixture: mixed casing, punctuation and distractor numbers that
# must not be flagged.
FIXTURE_TEMPLATES = [
    "Contact {PERSON_NAME} at {EMAIL} about ticket {ORDER}.",
    "SSN {SSN} on file; call {PHONE} to confirm.",
    "Login from {IP_ADDRESS} failed 3 times at 10:45.",
    "Card {CREDIT_CARD} expired, version 2.0 of the form is attached.",
    "Customer born {DATE_OF_BIRTH} asked about order {ORDER}.",
    "Please route this to {PERSON_NAME}, phone {PHONE}.",
    "No personal data in this note, only order {ORDER} and room 12.",
    "Send the invoice to {EMAIL} and cc {EMAIL}.",
    "Reached {PERSON_NAME} by phone at {PHONE} on 2024 budget review.",
    "Server {IP_ADDRESS} logged user {EMAIL} with SSN {SSN}.",
    "DOB {DATE_OF_BIRTH}, card {CREDIT_CARD}, total 149.99 dollars.",
    "The meeting moved to floor 4, nothing else to report.",
    "{PERSON_NAME} updated the address, ticket {ORDER} closed.",
    "Fraud check on {CREDIT_CARD} from {IP_ADDRESS}.",
    "Verify identity: name {PERSON_NAME}, birth date {DATE_OF_BIRTH}, SSN {SSN}.",
]


class _Filler:
    def __init__(self, rng: random.Random):
        self.rng = rng
        self.first, self.last = load_gazetteer()

    def value(self, slot: str) -> str:
        r = self.rng
        if slot == "PERSON_NAME":
            name = r.choice(self.first)
            return f"{name} {r.choice(self.last)}" if r.random() < 0.6 else name
        if slot == "EMAIL":
            user = f"{r.choice(self.first).lower()}.{r.choice(self.last).lower()}"
            if r.random() < 0.3:
                user += str(r.randint(1, 99))
            return f"{user}@{r.choice(DOMAINS)}"
        if slot == "PHONE":
            a, b, c = r.randint(200, 989), r.randint(200, 999), r.randint(0, 9999)
            style = r.randrange(3)
            if style == 0:
                return f"{a}-{b}-{c:04d}"
            if style == 1:
                return f"({a}) {b}-{c:04d}"
            return f"{a}.{b}.{c:04d}"
        if slot == "SSN":
            return f"{r.randint(100, 899):03d}-{r.randint(1, 99):02d}-{r.randint(1, 9999):04d}"
        if slot == "CREDIT_CARD":
            groups = [f"{r.randint(4000, 5999)}"] + [f"{r.randint(0, 9999):04d}" for _ in range(3)]
            return (" " if r.random() < 0.5 else "-").join(groups)
        if slot == "DATE_OF_BIRTH":
            y, m, d = r.randint(1940, 2005), r.randint(1, 12), r.randint(1, 28)
            return f"{y}-{m:02d}-{d:02d}" if r.random() < 0.5 else f"{m:02d}/{d:02d}/{y}"
        if slot == "IP_ADDRESS":
            return ".".join(str(r.randint(1, 254)) for _ in range(4))
        if slot == "ORDER":
            return str(r.randint(10000, 99999))
        raise KeyError(slot)


def fill(template: str, filler: _Filler, doc_id: str, text_prefix: str = "") -> tuple[str, list[dict]]:
    """Fill ``template`` and return the text plus the spans of PII slots."""
    text = text_prefix
    spans = []
    pos = 0
    for m in _SLOT.finditer(template):
        text += template[pos : m.start()]
        value = filler.value(m.group(1))
        if m.group(1) != "ORDER":
            spans.append(
                {"doc_id": doc_id, "start": len(text), "end": len(text) + len(value),
                 "surface": value, "pii_type": m.group(1)}
            )
        text += value
        pos = m.end()
    return text + template[pos:], spans


def support_corpus(n_docs: int, seed: int, pii_rate: float = 0.35) -> tuple[list[str], list[dict]]:
    """Conversation lines (customer turn, agent turn, optional closing)."""
    rng = random.Random(seed)
    filler = _Filler(rng)
    pii_customer = [t for t in CUSTOMER if "{" in t and "{ORDER}" not in t]
    plain_customer = [t for t in CUSTOMER if t not in pii_customer]
    lines, labels = [], []
    for k in range(n_docs):
        doc_id = f"L{k + 1}"
        pool = pii_customer if rng.random() < pii_rate else plain_customer
        parts = [rng.choice(pool), rng.choice(AGENT)]
        if rng.random() < 0.5:
            parts.append(rng.choice(CLOSING))
        text, spans = "", []
        for i, tpl in enumerate(parts):
            text, s = fill(tpl, filler, doc_id, text + (" " if i else ""))
            spans.extend(s)
        lines.append(text)
        labels.extend(spans)
    return lines, labels


def detection_fixture(seed: int = 20240501, n_docs: int = 40) -> tuple[list[str], list[dict]]:
    rng = random.Random(seed)
    filler = _Filler(rng)
    lines, labels = [], []
    for k in range(n_docs):
        tpl = FIXTURE_TEMPLATES[k % len(FIXTURE_TEMPLATES)]
        text, spans = fill(tpl, filler, f"L{k + 1}")
        lines.append(text)
        labels.extend(spans)
    return lines, labels


def _write_lines(path: Path, lines: list[str]) -> None:
    path.write_text("".join(l + "\n" for l in lines), encoding="utf-8")


def _write_spans(path: Path, spans: list[dict]) -> None:
    path.write_text("".join(json.dumps(s) + "\n" for s in spans), encoding="utf-8")


def write_bundle(outdir: str | Path) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    train, train_labels = support_corpus(1000, seed=11)
    held, _ = support_corpus(250, seed=12)
    _write_lines(out / "toy_train.txt", train)
    _write_spans(out / "toy_train_labels.jsonl", train_labels)
    _write_lines(out / "toy_heldout.txt", held)
    fixture, fixture_labels = detection_fixture()
    _write_lines(out / "detect_fixture.txt", fixture)
    _write_spans(out / "detect_fixture_labels.jsonl", fixture_labels)


if __name__ == "__main__":
    write_bundle(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent / "data")
