"""Meaning representations, tokenization, linearization and vocabularies."""

from __future__ import annotations

import csv
import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .errors import MalformedMR, UnknownId

# The restaurant-domain attribute inventory.
ATTRIBUTES = (
    "area",
    "customerRating",
    "eatType",
    "familyFriendly",
    "food",
    "name",
    "near",
    "priceRange",
)

# Spellings found in the public E2E csv files.
KEY_ALIASES = {"customer rating": "customerRating"}

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)

VOCAB_FORMAT = "d2tgen-vocab"
VOCAB_VERSION = 1

_TOKEN_RE = re.compile(r"[.,!?;:]|[^\s.,!?;:]+")
_KEY_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_BOUNDARY_RE = re.compile(r"^__(start|end)_[A-Za-z0-9_]+__$")


def tokenize(text):
    """Lowercase, split off ``. , ! ? ; :`` and collapse whitespace."""
    return _TOKEN_RE.findall(text.lower())


def start_token(key):
    return f"__start_{key}__"


def end_token(key):
    return f"__end_{key}__"


def is_boundary(token):
    return bool(_BOUNDARY_RE.match(token))


@dataclass(frozen=True)
class AttributeValue:
    key: str
    value: tuple

    def __post_init__(self):
        object.__setattr__(self, "value", tuple(self.value))
        if not _KEY_RE.match(self.key):
            raise MalformedMR(f"invalid attribute key {self.key!r}")
        if not self.value:
            raise MalformedMR(f"empty value for attribute {self.key!r}")
        for tok in self.value:
            if not tok or is_boundary(tok):
                raise MalformedMR(f"invalid value token {tok!r} for attribute {self.key!r}")


@dataclass(frozen=True)
class MeaningRepresentation:
    pairs: tuple

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if not self.pairs:
            raise MalformedMR("a meaning representation needs at least one attribute")
        keys = [p.key for p in self.pairs]
        if len(set(keys)) != len(keys):
            raise MalformedMR(f"duplicate attribute key in {keys}")

    @classmethod
    def from_items(cls, items):
        """Build from ``(key, value)`` items; string values are tokenized."""
        return cls(
            tuple(AttributeValue(k, tokenize(v) if isinstance(v, str) else v) for k, v in items)
        )

    def keys(self):
        return [p.key for p in self.pairs]

    def get(self, key):
        for p in self.pairs:
            if p.key == key:
                return p.value
        raise KeyError(key)

    def check_schema(self):
        unknown = [k for k in self.keys() if k not in ATTRIBUTES]
        if unknown:
            raise MalformedMR(f"attributes outside the schema: {unknown}")

    def __str__(self):
        return ", ".join(f"{p.key}[{' '.join(p.value)}]" for p in self.pairs)


@dataclass(frozen=True)
class Example:
    mr: MeaningRepresentation
    references: tuple

    def __post_init__(self):
        refs = tuple(tuple(r) for r in self.references)
        object.__setattr__(self, "references", refs)
        if not refs:
            raise ValueError("an example needs at least one reference")
        if any(not r for r in refs):
            raise ValueError("empty reference")


def parse_mr(text, strict=False):
    """Parse ``key[value], key[value], ...`` keeping the source order."""
    pairs = []
    i, n = 0, len(text)
    while i < n:
        open_at = text.find("[", i)
        if open_at < 0:
            if text[i:].strip(" ,\t\r\n"):
                raise MalformedMR(f"trailing text without brackets: {text[i:]!r}")
            break
        close_at = text.find("]", open_at)
        if close_at < 0:
            raise MalformedMR(f"unbalanced brackets in {text!r}")
        key = text[i:open_at].strip(" ,\t\r\n")
        raw = text[open_at + 1 : close_at]
        if "[" in raw or "]" in text[i:open_at]:
            raise MalformedMR(f"unbalanced brackets in {text!r}")
        key = KEY_ALIASES.get(key, key)
        if not key:
            raise MalformedMR(f"missing attribute key before {raw!r}")
        value = tokenize(raw)
        if not value:
            raise MalformedMR(f"empty value for attribute {key!r}")
        pairs.append(AttributeValue(key, value))
        i = close_at + 1
    mr = MeaningRepresentation(tuple(pairs))
    if strict:
        mr.check_schema()
    return mr


def linearize(mr):
    """Wrap each value in its attribute's start/end tokens and concatenate."""
    out = []
    for p in mr.pairs:
        out.append(start_token(p.key))
        out.extend(p.value)
        out.append(end_token(p.key))
    return out


class Vocabulary:
    """Token/id bijection with reserved and attribute-boundary tokens."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._itos = tokens
        self._stoi = {t: i for i, t in enumerate(tokens)}
        for key in ATTRIBUTES:
            if start_token(key) not in self._stoi or end_token(key) not in self._stoi:
                raise ValueError(f"vocabulary lacks boundary tokens for {key!r}")

    pad_id, bos_id, eos_id, unk_id = 0, 1, 2, 3

    def __len__(self):
        return len(self._itos)

    def __contains__(self, token):
        return token in self._stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self._itos == other._itos

    @property
    def tokens(self):
        return list(self._itos)

    def token_to_id(self, token):
        return self._stoi.get(token, self.unk_id)

    def id_to_token(self, i):
        if not 0 <= int(i) < len(self._itos):
            raise UnknownId(i)
        return self._itos[int(i)]

    def encode(self, tokens):
        return [self._stoi.get(t, self.unk_id) for t in tokens]

    def decode(self, ids):
        return [self.id_to_token(i) for i in ids]

    def to_json(self):
        return json.dumps(
            {"format": VOCAB_FORMAT, "version": VOCAB_VERSION, "tokens": self._itos},
            ensure_ascii=False,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text):
        payload = json.loads(text)
        if payload.get("format") != VOCAB_FORMAT or payload.get("version") != VOCAB_VERSION:
            raise ValueError("unrecognized vocabulary format or version")
        return cls(payload["tokens"])

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_vocab(corpus, min_freq=1):
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    keys = list(ATTRIBUTES)
    counts = Counter()
    for ex in corpus:
        for p in ex.mr.pairs:
            if p.key not in keys:
                keys.append(p.key)
            counts.update(p.value)
        for ref in ex.references:
            counts.update(ref)
    extra = sorted(keys[len(ATTRIBUTES) :])
    fixed = list(RESERVED)
    for key in list(ATTRIBUTES) + extra:
        fixed += [start_token(key), end_token(key)]
    taken = set(fixed)
    ranked = sorted(
        (t for t, c in counts.items() if c >= min_freq and t not in taken),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary(fixed + ranked)


def encode(tokens, vocab):
    return vocab.encode(tokens)


def decode(ids, vocab):
    return vocab.decode(ids)


def extend_source(source_tokens, vocab):
    """Source ids in the extended vocabulary plus the list of source OOVs.

    Tokens missing from ``vocab`` get ids ``len(vocab) + j`` in order of
    first appearance, so a copy from the source can emit them.
    """
    oov = []
    ids = []
    for tok in source_tokens:
        if tok in vocab:
            ids.append(vocab.token_to_id(tok))
        else:
            if tok not in oov:
                oov.append(tok)
            ids.append(len(vocab) + oov.index(tok))
    return ids, oov


def decode_extended(ids, vocab, oov):
    out = []
    for i in ids:
        i = int(i)
        if i < len(vocab):
            out.append(vocab.id_to_token(i))
        elif i - len(vocab) < len(oov):
            out.append(oov[i - len(vocab)])
        else:
            raise UnknownId(i)
    return out


def load_dataset(path, format="csv", strict=False):
    """Read ``mr,ref`` rows and group references by identical MR text."""
    if format != "csv":
        raise ValueError(f"unsupported dataset format {format!r}")
    grouped = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        if "mr" not in reader.fieldnames or "ref" not in reader.fieldnames:
            raise MalformedMR(f"{path}: expected header 'mr,ref', got {reader.fieldnames}")
        for rowno, row in enumerate(reader, start=2):
            text = row["mr"]
            if text not in grouped:
                try:
                    grouped[text] = (parse_mr(text, strict=strict), [])
                except MalformedMR as exc:
                    raise MalformedMR(f"{path}, row {rowno}: {exc}") from exc
            ref = tokenize(row["ref"] or "")
            if not ref:
                raise MalformedMR(f"{path}, row {rowno}: empty reference")
            grouped[text][1].append(ref)
    return [Example(mr, tuple(refs)) for mr, refs in grouped.values()]


def save_dataset(examples, path):
    """Write examples as ``mr,ref`` rows, one row per reference."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mr", "ref"])
        for ex in examples:
            for ref in ex.references:
                writer.writerow([str(ex.mr), " ".join(ref)])


def training_pairs(examples):
    """Flatten examples into one ``(mr, reference)`` pair per reference."""
    return [(ex.mr, ref) for ex in examples for ref in ex.references]
