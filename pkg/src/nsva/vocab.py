"""Token <-> id map: caption words plus atomic action and player tokens."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

from .text import tokenize

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(4)

_PREFIX = {"word": "", "action": "act:", "player": "plr:"}
TASK_KINDS = {"caption": "word", "action": "action", "identity": "player"}


class Vocabulary:
    """Dense, stable ids.  Specials occupy ids 0-3.

    Action labels and player names are *augmented* tokens: each is one id no
    matter how many words it contains.  Internally they carry a kind prefix so
    that e.g. the caption word ``block`` and the action label ``block`` stay
    distinct.
    """

    def __init__(self):
        self._tokens: list[str] = list(SPECIALS)
        self._ids: dict[str, int] = {t: i for i, t in enumerate(SPECIALS)}
        self.unk_count = 0

    def __len__(self) -> int:
        return len(self._tokens)

    def _add(self, key: str) -> int:
        if key not in self._ids:
            self._ids[key] = len(self._tokens)
            self._tokens.append(key)
        return self._ids[key]

    def add_words(self, words: Iterable[str]) -> None:
        for w in words:
            self._add(w)

    def add_augmented(self, kind: str, labels: Iterable[str]) -> None:
        if kind not in ("action", "player"):
            raise ValueError(f"unknown augmented kind {kind!r}")
        for lab in labels:
            self._add(_PREFIX[kind] + lab)

    def id(self, token: str, kind: str = "word") -> int:
        key = _PREFIX[kind] + token
        if key in self._ids:
            return self._ids[key]
        self.unk_count += 1
        return UNK_ID

    def token(self, idx: int) -> str:
        key = self._tokens[idx]
        for prefix in ("act:", "plr:"):
            if key.startswith(prefix):
                return key[len(prefix):]
        return key

    def kind_of(self, idx: int) -> str:
        key = self._tokens[idx]
        if idx < len(SPECIALS):
            return "special"
        if key.startswith("act:"):
            return "action"
        if key.startswith("plr:"):
            return "player"
        return "word"

    def ids_of_kind(self, kind: str) -> list[int]:
        return [i for i in range(len(self._tokens)) if self.kind_of(i) == kind]

    def augmented(self, kind: str) -> list[str]:
        return [self.token(i) for i in self.ids_of_kind(kind)]

    def augmented_count(self) -> int:
        return len(self.ids_of_kind("action")) + len(self.ids_of_kind("player"))

    def task_slice(self, task: str) -> list[int]:
        """Output label space for a task head: EOS, UNK (captions only) and the task tokens."""
        kind = TASK_KINDS[task]
        extra = [UNK_ID] if kind == "word" else []
        return [EOS_ID] + extra + self.ids_of_kind(kind)

    def encode_sequence(self, tokens: Iterable[str], kind: str = "word", max_len: int | None = None) -> list[int]:
        """[BOS] + ids + [EOS]; truncated so the total length stays within ``max_len``."""
        ids = [self.id(t, kind) for t in tokens]
        if max_len is not None:
            ids = ids[: max_len - 2]
        return [BOS_ID] + ids + [EOS_ID]

    def encode_caption(self, text: str, max_len: int | None = None) -> list[int]:
        return self.encode_sequence(tokenize(text), "word", max_len)

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            if i == EOS_ID:
                break
            if i in (BOS_ID, PAD_ID):
                continue
            out.append(self.token(i))
        return out

    def to_json(self) -> dict:
        return {"tokens": self._tokens}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        v = cls()
        if tuple(obj["tokens"][:4]) != SPECIALS:
            raise ValueError("vocabulary file does not start with the reserved specials")
        for key in obj["tokens"][4:]:
            v._add(key)
        return v

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
