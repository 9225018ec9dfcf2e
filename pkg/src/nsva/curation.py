"""Play-by-play corpus curation: cleaning, per-clip merging, game-level splits,
the three-level action tree, vocabulary construction and corpus statistics.

Record fixtures are JSON-lines, one object per record::

    game_id      str      game identifier
    clip_id      str      video clip identifier (non-empty)
    timestamp    float    event time in seconds from tip-off
    caption      str      play-by-play description
    actions      list     [{"coarse": str, "fine": str|null, "event": str|null}, ...]
    players      list     player names, ordered by involvement
    teams        list     [home, away]
    distance_ft  int|null shot distance in feet, when the caption has one
    duration_s   float    clip length in seconds
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .text import tokenize
from .vocab import Vocabulary

log = logging.getLogger(__name__)

CAPTION_SEPARATOR = ". "
LEVELS = ("coarse", "fine", "event")
SPLITS = ("train", "val", "test")
SPLIT_GAMES = (100, 16, 16)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class ActionLabel:
    coarse: str
    fine: str | None = None
    event: str | None = None

    def at(self, level: str) -> str | None:
        return getattr(self, level)

    def deepest(self) -> str:
        return self.event or self.fine or self.coarse


@dataclass
class PlayByPlayRecord:
    game_id: str
    clip_id: str
    timestamp: float
    caption: str
    actions: list[ActionLabel] = field(default_factory=list)
    players: list[str] = field(default_factory=list)
    teams: tuple[str, str] = ("", "")
    distance_ft: int | None = None
    duration_s: float = 0.0

    def __post_init__(self):
        if not self.clip_id:
            raise CorpusError("clip id must be non-empty")
        self.actions = [a if isinstance(a, ActionLabel) else ActionLabel(**a) for a in self.actions]
        self.teams = tuple(self.teams)

    def action_sequence(self, level: str = "event") -> list[str]:
        return [a.at(level) or a.deepest() for a in self.actions]

    def to_json(self) -> dict:
        d = asdict(self)
        d["teams"] = list(self.teams)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "PlayByPlayRecord":
        return cls(
            game_id=str(obj["game_id"]),
            clip_id=str(obj["clip_id"]),
            timestamp=float(obj.get("timestamp", 0.0)),
            caption=obj.get("caption", ""),
            actions=[ActionLabel(**a) for a in obj.get("actions", [])],
            players=list(obj.get("players", [])),
            teams=tuple(obj.get("teams", ("", ""))),
            distance_ft=obj.get("distance_ft"),
            duration_s=float(obj.get("duration_s", 0.0)),
        )


def write_records(path: str | Path, records: Iterable[PlayByPlayRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_records(path: str | Path) -> list[PlayByPlayRecord]:
    with open(path, encoding="utf-8") as fh:
        return [PlayByPlayRecord.from_json(json.loads(line)) for line in fh if line.strip()]


# -- taxonomy ------------------------------------------------------------------------------
class ActionTaxonomy:
    """Label tree parsed from indented text (two spaces per level, ``#`` comments)."""

    def __init__(self):
        self.parent: dict[str, str | None] = {}
        self.depth: dict[str, int] = {}
        self.children: dict[str, list[str]] = defaultdict(list)

    @classmethod
    def parse(cls, text: str, indent: int = 2) -> "ActionTaxonomy":
        tax = cls()
        stack: list[str] = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            if not raw.strip() or raw.lstrip().startswith("#"):
                continue
            spaces = len(raw) - len(raw.lstrip(" "))
            if spaces % indent:
                raise CorpusError(f"line {lineno}: indentation is not a multiple of {indent}")
            depth = spaces // indent
            if depth > len(stack) or depth >= len(LEVELS):
                raise CorpusError(f"line {lineno}: bad nesting depth {depth}")
            label = raw.strip()
            if label in tax.parent:
                raise CorpusError(f"line {lineno}: duplicate label {label!r}")
            stack = stack[:depth]
            tax.parent[label] = stack[-1] if stack else None
            tax.depth[label] = depth
            if stack:
                tax.children[stack[-1]].append(label)
            stack.append(label)
        return tax

    @classmethod
    def default(cls) -> "ActionTaxonomy":
        return cls.parse(resources.files("nsva.data").joinpath("taxonomy.txt").read_text(encoding="utf-8"))

    @classmethod
    def load(cls, path: str | Path) -> "ActionTaxonomy":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def __contains__(self, label: str) -> bool:
        return label in self.parent

    def labels(self, level: str | None = None) -> list[str]:
        if level is None:
            return list(self.parent)
        d = LEVELS.index(level)
        return [lab for lab, dep in self.depth.items() if dep == d]

    def level_sizes(self) -> dict[str, int]:
        return {lvl: len(self.labels(lvl)) for lvl in LEVELS}

    def path(self, label: str) -> list[str]:
        out = []
        node: str | None = label
        while node is not None:
            out.append(node)
            node = self.parent[node]
        return out[::-1]

    def solitary(self) -> list[str]:
        return [lab for lab in self.labels("coarse") if not self.children.get(lab)]

    def label_for(self, deepest: str) -> ActionLabel:
        p = self.path(deepest)
        return ActionLabel(*(p + [None] * (3 - len(p))))

    def check(self, label: ActionLabel) -> None:
        """Raise unless the coarse/fine/event labels lie on one root-to-leaf path."""
        given = [label.coarse, label.fine, label.event]
        deepest = label.deepest()
        if deepest not in self:
            raise CorpusError(f"label {deepest!r} not in taxonomy")
        expect = self.path(deepest)
        if [g for g in given if g is not None] != expect:
            raise CorpusError(f"labels {given} disagree with taxonomy path {expect}")


# -- cleaning & merging ----------------------------------------------------------------------
def load_patterns(path: str | Path | None = None) -> list[re.Pattern]:
    if path is None:
        text = resources.files("nsva.data").joinpath("cumulative_patterns.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return [re.compile(line.strip()) for line in text.splitlines()
            if line.strip() and not line.lstrip().startswith("#")]


def strip_cumulative(text: str, patterns: Sequence[re.Pattern]) -> tuple[str, int]:
    removed = 0
    for pat in patterns:
        text, n = pat.subn("", text)
        removed += n
    return re.sub(r"\s+", " ", text).strip(), removed


def filter_out_of_scope(record: PlayByPlayRecord, patterns: Sequence[re.Pattern] | None = None) -> PlayByPlayRecord | None:
    """Drop caption fragments about statistics accumulated outside the clip.

    Returns None when nothing of the caption is left.
    """
    patterns = load_patterns() if patterns is None else patterns
    caption, _ = strip_cumulative(record.caption, patterns)
    if not caption:
        return None
    return replace(record, caption=caption)


def merge_same_clip(records: Sequence[PlayByPlayRecord]) -> list[PlayByPlayRecord]:
    """One record per clip id; events combined in timestamp order.

    Output keeps the order in which clip ids first appear.
    """
    groups: dict[str, list[PlayByPlayRecord]] = {}
    for r in records:
        groups.setdefault(r.clip_id, []).append(r)
    out = []
    for clip_id, group in groups.items():
        games = {r.game_id for r in group}
        if len(games) > 1:
            raise CorpusError(f"clip {clip_id!r} spans games {sorted(games)}")
        if len(group) == 1:
            out.append(group[0])
            continue
        group = sorted(group, key=lambda r: r.timestamp)
        caption = CAPTION_SEPARATOR.join(r.caption.rstrip(". ") for r in group)
        distance = next((r.distance_ft for r in group if r.distance_ft is not None), None)
        out.append(PlayByPlayRecord(
            game_id=group[0].game_id, clip_id=clip_id, timestamp=group[0].timestamp, caption=caption,
            actions=[a for r in group for a in r.actions], players=[p for r in group for p in r.players],
            teams=group[0].teams, distance_ft=distance, duration_s=max(r.duration_s for r in group)))
    return out


def validate(records: Sequence[PlayByPlayRecord], taxonomy: ActionTaxonomy | None = None,
             roster: Iterable[str] | None = None) -> None:
    roster_set = set(roster) if roster is not None else None
    for r in records:
        if taxonomy is not None:
            for a in r.actions:
                taxonomy.check(a)
        if roster_set is not None:
            unknown = [p for p in r.players if p not in roster_set]
            if unknown:
                raise CorpusError(f"clip {r.clip_id}: players not on roster: {unknown}")


def curate(records: Sequence[PlayByPlayRecord], patterns=None, taxonomy: ActionTaxonomy | None = None,
           roster: Iterable[str] | None = None) -> list[PlayByPlayRecord]:
    cleaned = [c for c in (filter_out_of_scope(r, patterns) for r in records) if c is not None]
    merged = merge_same_clip(cleaned)
    validate(merged, taxonomy, roster)
    return merged


# -- splits --------------------------------------------------------------------------------------
def matchup(team_a: str, team_b: str) -> tuple[str, str]:
    return tuple(sorted((team_a, team_b)))


@dataclass
class SplitAssignment:
    splits: dict[str, str]

    def games(self, split: str) -> list[str]:
        return [g for g, s in self.splits.items() if s == split]

    def sizes(self) -> dict[str, int]:
        c = Counter(self.splits.values())
        return {s: c.get(s, 0) for s in SPLITS}

    def violations(self, games: Sequence[tuple[str, str, str]]) -> list[tuple[str, str]]:
        """Matchups with no game in train (exhaustive check)."""
        seen = {matchup(a, b) for g, a, b in games if self.splits[g] == "train"}
        return sorted({matchup(a, b) for _, a, b in games} - seen)

    def to_json(self) -> dict:
        return dict(sorted(self.splits.items()))


def split_targets(n_games: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    total = float(sum(ratios))
    n_val = int(round(n_games * ratios[1] / total))
    n_test = int(round(n_games * ratios[2] / total))
    return n_games - n_val - n_test, n_val, n_test


def assign_splits(games: Sequence[tuple[str, str, str]], ratios: Sequence[float] = SPLIT_GAMES,
                  seed: int = 0) -> SplitAssignment:
    """Game-level split: cover every matchup in train first, then fill val/test.

    ``games`` holds ``(game_id, team_a, team_b)``.  Remaining games are dealt
    to val/test round-robin over matchups (largest remaining first) so that
    held-out games spread across matchups.
    """
    rng = np.random.default_rng(seed)
    order = [games[i] for i in rng.permutation(len(games))]
    by_matchup: dict[tuple[str, str], list[str]] = defaultdict(list)
    for g, a, b in order:
        by_matchup[matchup(a, b)].append(g)
    splits: dict[str, str] = {}
    for games_of in by_matchup.values():
        splits[games_of[0]] = "train"
    _, n_val, n_test = split_targets(len(games), ratios)
    pools = {m: gs[1:] for m, gs in sorted(by_matchup.items())}
    counts = {"val": 0, "test": 0}
    targets = {"val": n_val, "test": n_test}
    # alternate val/test so both draw from the deepest matchups
    while any(counts[s] < targets[s] for s in counts):
        candidates = [m for m, pool in pools.items() if pool]
        if not candidates:
            log.warning("only %d val / %d test games available after covering matchups", counts["val"], counts["test"])
            break
        for split in ("val", "test"):
            if counts[split] >= targets[split]:
                continue
            live = [m for m in candidates if pools[m]]
            if not live:
                break
            m = max(live, key=lambda k: len(pools[k]))
            splits[pools[m].pop(0)] = split
            counts[split] += 1
    for pool in pools.values():
        for g in pool:
            splits[g] = "train"
    for m, gs in by_matchup.items():
        if len(gs) == 1 and (n_val or n_test):
            log.info("matchup %s has a single game; kept in train", m)
    return SplitAssignment({g: splits[g] for g, _, _ in games})


# -- vocabulary & stats ------------------------------------------------------------------------
def build_vocabulary(records: Sequence[PlayByPlayRecord], base_tokens: Iterable[str] = (),
                     action_levels: Sequence[str] = LEVELS) -> Vocabulary:
    """Caption words (sorted) followed by one atomic token per action label and per player."""
    vocab = Vocabulary()
    words = set(base_tokens)
    actions: set[str] = set()
    players: set[str] = set()
    for r in records:
        words.update(tokenize(r.caption))
        for a in r.actions:
            actions.update(lab for lab in (a.at(lvl) for lvl in action_levels) if lab)
        players.update(r.players)
    vocab.add_words(sorted(words))
    vocab.add_augmented("action", sorted(actions))
    vocab.add_augmented("player", sorted(players))
    return vocab


def sentences_of(caption: str) -> list[str]:
    return [s for s in (p.strip() for p in caption.split(CAPTION_SEPARATOR.strip())) if s]


def corpus_stats(records: Sequence[PlayByPlayRecord], splits: SplitAssignment | None = None) -> dict:
    """Table-1/2 style counts."""
    def block(recs):
        sents = [s for r in recs for s in sentences_of(r.caption)]
        words = sum(len(tokenize(s)) for s in sents)
        return {
            "videos": len(recs),
            "sentences": len(sents),
            "games": len({r.game_id for r in recs}),
            "hours": round(sum(r.duration_s for r in recs) / 3600.0, 4),
            "avg_words": round(words / len(sents), 1) if sents else 0.0,
        }

    stats = block(records)
    stats["teams"] = len({t for r in records for t in r.teams if t})
    stats["actions"] = len({lab for r in records for a in r.actions for lab in (a.coarse, a.fine, a.event) if lab})
    stats["identities"] = len({p for r in records for p in r.players})
    if splits is not None:
        stats["splits"] = {s: block([r for r in records if splits.splits.get(r.game_id) == s]) for s in SPLITS}
    return stats


def format_stats_table(stats: dict) -> str:
    head = f"{'videos':>8} {'sentences':>10} {'hours':>8} {'avg.words':>10} {'games':>6} {'teams':>6} {'actions':>8} {'identities':>10}"
    row = (f"{stats['videos']:>8} {stats['sentences']:>10} {stats['hours']:>8.2f} {stats['avg_words']:>10.1f} "
           f"{stats['games']:>6} {stats['teams']:>6} {stats['actions']:>8} {stats['identities']:>10}")
    lines = [head, row]
    if "splits" in stats:
        lines.append("")
        lines.append(f"{'split':>6} {'videos':>8} {'sentences':>10} {'games':>6}")
        for s in SPLITS:
            b = stats["splits"][s]
            lines.append(f"{s:>6} {b['videos']:>8} {b['sentences']:>10} {b['games']:>6}")
    return "\n".join(lines)
