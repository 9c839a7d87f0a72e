"""Role-annotated conversations over an explicit whitespace symbol table."""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path


class TranscriptError(ValueError):
    pass


class UnknownSymbolError(TranscriptError):
    def __init__(self, symbol: str, offset: int):
        super().__init__(f"unknown symbol {symbol!r} at offset {offset}")
        self.symbol = symbol
        self.offset = offset


class TurnRole(enum.IntEnum):
    SYSTEM = 0
    USER = 1
    ASSISTANT = 2

    @classmethod
    def parse(cls, name: str) -> "TurnRole":
        try:
            return cls[name.upper()]
        except KeyError:
            raise TranscriptError(f"unknown role {name!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


class Vocabulary:
    """Ordered symbol table; a symbol's index is its token id."""

    def __init__(self, symbols):
        symbols = list(symbols)
        if not symbols:
            raise TranscriptError("empty vocabulary")
        self.symbols = tuple(symbols)
        self._index = {}
        for i, s in enumerate(self.symbols):
            if not s or any(ch.isspace() for ch in s):
                raise TranscriptError(f"invalid symbol {s!r}")
            if s in self._index:
                raise TranscriptError(f"duplicate symbol {s!r}")
            self._index[s] = i
        digest = hashlib.sha256("\n".join(self.symbols).encode()).hexdigest()
        self.vocab_id = f"v-{digest[:12]}"

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.symbols == other.symbols

    def __hash__(self) -> int:
        return hash(self.symbols)

    def id_of(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise UnknownSymbolError(symbol, -1) from None

    def tokenize(self, text: str) -> list[int]:
        out = []
        pos = 0
        for item in text.split():
            offset = text.index(item, pos)
            pos = offset + len(item)
            idx = self._index.get(item)
            if idx is None:
                raise UnknownSymbolError(item, offset)
            out.append(idx)
        return out

    def detokenize(self, tokens) -> str:
        n = len(self.symbols)
        for t in tokens:
            if not 0 <= t < n:
                raise TranscriptError(f"token id {t} out of range [0, {n})")
        return " ".join(self.symbols[t] for t in tokens)

    def to_json(self) -> str:
        return json.dumps(list(self.symbols), indent=1)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise TranscriptError(f"{path}: malformed vocabulary JSON: {exc}") from None
        if not isinstance(data, list) or not all(isinstance(s, str) for s in data):
            raise TranscriptError(f"{path}: vocabulary must be a JSON list of strings")
        return cls(data)


def tokenize(vocab: Vocabulary, text: str) -> list[int]:
    return vocab.tokenize(text)


def detokenize(vocab: Vocabulary, tokens) -> str:
    return vocab.detokenize(tokens)


@dataclass(frozen=True)
class Turn:
    role: TurnRole
    text: str
    tokens: tuple[int, ...]


@dataclass(frozen=True)
class Transcript:
    turns: tuple[Turn, ...]
    vocab_id: str

    def __post_init__(self):
        check_role_order([t.role for t in self.turns])

    @classmethod
    def build(cls, vocab: Vocabulary, turns) -> "Transcript":
        """Make a transcript from ``(role, text)`` pairs."""
        built = []
        for role, text in turns:
            role = role if isinstance(role, TurnRole) else TurnRole.parse(role)
            built.append(Turn(role, text, tuple(vocab.tokenize(text))))
        return cls(tuple(built), vocab.vocab_id)

    @property
    def tokens(self) -> list[int]:
        return [t for turn in self.turns for t in turn.tokens]

    @property
    def roles(self) -> list[TurnRole]:
        """Per-position role tags."""
        return [turn.role for turn in self.turns for _ in turn.tokens]

    @property
    def turn_index(self) -> list[int]:
        """Per-position turn index."""
        return [i for i, turn in enumerate(self.turns) for _ in turn.tokens]

    def __len__(self) -> int:
        return sum(len(t.tokens) for t in self.turns)

    def with_turn(self, vocab: Vocabulary, role, text: str) -> "Transcript":
        role = role if isinstance(role, TurnRole) else TurnRole.parse(role)
        turn = Turn(role, text, tuple(vocab.tokenize(text)))
        return Transcript(self.turns + (turn,), self.vocab_id)

    def extended(self, vocab: Vocabulary, role: TurnRole, tokens) -> "Transcript":
        """Append tokens as ``role``; extends the last turn when it already has that role."""
        tokens = tuple(tokens)
        if self.turns and self.turns[-1].role == role:
            last = self.turns[-1]
            merged = last.tokens + tokens
            turn = Turn(role, vocab.detokenize(merged), merged)
            return Transcript(self.turns[:-1] + (turn,), self.vocab_id)
        turn = Turn(role, vocab.detokenize(tokens), tokens)
        return Transcript(self.turns + (turn,), self.vocab_id)

    def truncated(self, n_tokens: int) -> "Transcript":
        """First ``n_tokens`` positions, keeping turn structure."""
        out = []
        left = n_tokens
        for turn in self.turns:
            if left <= 0:
                break
            if len(turn.tokens) <= left:
                out.append(turn)
                left -= len(turn.tokens)
            else:
                toks = turn.tokens[:left]
                words = turn.text.split()[:left]
                out.append(Turn(turn.role, " ".join(words), toks))
                left = 0
        return Transcript(tuple(out), self.vocab_id)

    def content_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "vocab_id": self.vocab_id,
            "turns": [{"role": t.role.label, "text": t.text} for t in self.turns],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def check_role_order(roles) -> None:
    """Optional leading system turn, then strictly alternating user/assistant."""
    roles = list(roles)
    start = 1 if roles and roles[0] == TurnRole.SYSTEM else 0
    prev = None
    for i in range(start, len(roles)):
        r = roles[i]
        if r == TurnRole.SYSTEM:
            raise TranscriptError(f"turn {i}: system turn only allowed first")
        if r == prev:
            raise TranscriptError(f"turn {i}: {r.label} after {prev.label}")
        prev = r


def transcript_from_dict(data: dict, vocab: Vocabulary) -> Transcript:
    if not isinstance(data, dict) or not isinstance(data.get("turns"), list):
        raise TranscriptError("transcript JSON needs a 'turns' list")
    vid = data.get("vocab_id")
    if vid is not None and vid != vocab.vocab_id:
        raise TranscriptError(f"transcript vocab_id {vid!r} != vocabulary {vocab.vocab_id!r}")
    pairs = []
    for i, turn in enumerate(data["turns"]):
        if not isinstance(turn, dict) or "role" not in turn or "text" not in turn:
            raise TranscriptError(f"turn {i}: needs 'role' and 'text'")
        pairs.append((TurnRole.parse(turn["role"]), str(turn["text"])))
    return Transcript.build(vocab, pairs)


def load_script(path, vocab: Vocabulary) -> Transcript:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise TranscriptError(f"{path}: malformed JSON: {exc}") from None
    return transcript_from_dict(data, vocab)
