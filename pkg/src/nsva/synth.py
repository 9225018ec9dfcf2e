"""Deterministic synthetic basketball clips.

Each clip is a half-court rendered at ``frame_size`` pixels: courtlines, a
basket on the right, a handful of players drawn as two-tone rectangles
(jersey = team colour, shorts = personal colour) and a ball.  One shooter
attempts a shot from a distance that fixes their position relative to the
basket; a miss may be followed by a defensive rebound.  The caption is a
function of what is drawn:

* shooter / rebounder surname  <- personal colour of the player holding the ball
* distance token and shot type <- shooter position relative to the basket
* "miss" prefix                <- ball path after it reaches the rim

Distractor players stand at random spots so the ball-holder is not the
only figure on the court.
"""

from __future__ import annotations

import colorsys
import gzip
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .curation import ActionLabel, PlayByPlayRecord, write_records
from .features import BoundingBox, DetectionFrame, write_track

TEAMS = ("Suns", "Spurs", "Lakers", "Celtics", "Bulls", "Heat", "Knicks", "Nets", "Jazz", "Kings",
         "Bucks", "Hawks", "Magic", "Pistons", "Rockets", "Raptors")
FIRST = ("Alex", "Ben", "Chris", "Dan", "Eli", "Finn", "Gus", "Hal", "Ike", "Jon", "Kai", "Leo")
LAST = ("Archer", "Barlow", "Carver", "Dorsey", "Ellison", "Fenton", "Garber", "Hollis", "Irwin", "Jessup",
        "Keller", "Lowry", "Marlow", "Nolan", "Orton", "Pryor", "Quimby", "Rowan", "Sutter", "Tolliver",
        "Upton", "Vance", "Whitby", "Yardley", "Zeller", "Ashby", "Bristow", "Calder", "Dunmore", "Eastman",
        "Fairley", "Gentry", "Hadley", "Ingram", "Jarvis", "Kimble", "Langley", "Mercer", "Norris", "Oakes")

# distance (feet) -> (caption phrase, taxonomy stem)
SHOTS = {
    2: ("driving layup", "driving-layup"),
    8: ("floating jump shot", "floating-jump-shot"),
    15: ("pullup jump shot", "pullup-jump-shot"),
    22: ("step back jump shot", "step-back-jump-shot"),
    26: ("3pt jump shot", "3-pt-jump-shot"),
}

COURT = np.array([0.72, 0.52, 0.32])
LINE = np.array([1.0, 1.0, 1.0])
BALL = np.array([1.0, 0.45, 0.0])
RIM = np.array([0.85, 0.05, 0.05])
NET = np.array([0.88, 0.88, 0.92])


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    teams: int = 4
    players_per_team: int = 3
    games: int = 8
    events_per_game: int = 8
    frame_size: int = 64
    fps: int = 12
    seconds: int = 2
    distances: tuple[int, ...] = (2, 8, 15, 22, 26)
    distractors: int = 3
    rebound_prob: float = 0.5
    make_prob: float = 0.5
    jitter: float = 0.003
    dropout: float = 0.0
    window: int = 6
    plant_cumulative: bool = True

    def __post_init__(self):
        if not 2 <= self.teams <= len(TEAMS):
            raise ValueError(f"teams must be in [2, {len(TEAMS)}]")
        if self.players_per_team < 2 or self.teams * self.players_per_team > len(LAST):
            raise ValueError("roster too small or too large")
        if self.frame_size % 16 or self.frame_size < 32:
            raise ValueError("frame_size must be a multiple of 16 and at least 32")
        if any(d < 0 or d > 40 for d in self.distances):
            raise ValueError("distances must lie in [0, 40] feet")
        if self.seconds < 1 or self.fps < 4:
            raise ValueError("degenerate clip timing")

    @property
    def num_frames(self) -> int:
        return self.fps * self.seconds

    def to_json(self) -> dict:
        d = asdict(self)
        d["distances"] = list(self.distances)
        return d


@dataclass(frozen=True)
class Player:
    name: str
    team: str
    jersey: tuple[float, float, float]
    shorts: tuple[float, float, float]

    @property
    def surname(self) -> str:
        return self.name.split()[-1]


@dataclass
class Roster:
    teams: list[str]
    players: list[Player]

    def of_team(self, team: str) -> list[Player]:
        return [p for p in self.players if p.team == team]

    def names(self) -> list[str]:
        return [p.name for p in self.players]


def make_roster(cfg: SynthConfig) -> Roster:
    teams = list(TEAMS[: cfg.teams])
    n = cfg.teams * cfg.players_per_team
    players = []
    for i in range(n):
        t = i // cfg.players_per_team
        jersey = colorsys.hsv_to_rgb(t / cfg.teams, 0.9, 0.35)
        shorts = colorsys.hsv_to_rgb((i * 0.61803) % 1.0, 0.85, 1.0)
        players.append(Player(f"{FIRST[i % len(FIRST)]} {LAST[i]}", teams[t], jersey, shorts))
    return Roster(teams, players)


def make_schedule(teams: list[str], games: int, rng: np.random.Generator) -> list[tuple[str, str, str]]:
    """(game_id, home, away); every pairing is played once before any repeats."""
    pairs = [(a, b) for i, a in enumerate(teams) for b in teams[i + 1:]]
    out = []
    while len(out) < games:
        for k in rng.permutation(len(pairs)):
            if len(out) == games:
                break
            a, b = pairs[k]
            if rng.random() < 0.5:
                a, b = b, a
            out.append((f"G{len(out):04d}", a, b))
    return out


@dataclass
class Scene:
    """Everything needed to render one clip."""

    clip_id: str
    game_id: str
    teams: tuple[str, str]
    shooter: int
    distance: int
    angle: float
    made: bool
    rebounder: int | None
    distractors: list[tuple[int, float, float]]
    rebound_spot: tuple[float, float]
    seed: int

    def to_json(self) -> dict:
        d = asdict(self)
        d["distractors"] = [list(x) for x in self.distractors]
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "Scene":
        obj = dict(obj)
        obj["teams"] = tuple(obj["teams"])
        obj["distractors"] = [tuple(x) for x in obj["distractors"]]
        obj["rebound_spot"] = tuple(obj["rebound_spot"])
        return cls(**obj)


@dataclass
class RenderedClip:
    frames: np.ndarray          # (n, H, W, 3) in [0, 1]
    masks: np.ndarray           # (n, H, W) courtline raster
    detections: list[DetectionFrame]
    ball_truth: list[BoundingBox]


class Geometry:
    """Pixel layout of the half court for a given frame size."""

    def __init__(self, size: int):
        self.size = size
        s = size / 64.0
        self.scale = s
        self.basket = (57.0 * s, 32.0 * s)          # (x, y) centre
        self.px_per_ft = 1.4 * s
        self.player_w = max(3, int(round(5 * s)))
        self.player_h = max(5, int(round(9 * s)))
        self.ball_r = 2.5 * s
        self.basket_half = 3.0 * s

    def shooter_xy(self, distance: float, angle: float) -> tuple[float, float]:
        bx, by = self.basket
        r = distance * self.px_per_ft
        return bx - r * math.cos(angle), by + r * math.sin(angle)

    def courtline_mask(self) -> np.ndarray:
        n = self.size
        s = self.scale
        m = np.zeros((n, n))
        yy, xx = np.mgrid[0:n, 0:n] + 0.5
        bx, by = self.basket
        m[:, int(62 * s)] = 1.0                                    # baseline
        m[:, int(1 * s)] = 1.0                                     # half-court line
        x0, x1 = int(44 * s), int(62 * s)
        y0, y1 = int(24 * s), int(40 * s)
        m[y0, x0:x1] = m[y1, x0:x1] = 1.0                          # paint
        m[y0:y1 + 1, x0] = 1.0
        r3 = 23.75 * self.px_per_ft
        d = np.hypot(xx - bx, yy - by)
        m[(np.abs(d - r3) < 0.5) & (xx < bx)] = 1.0                # three-point arc
        return m

    def player_box(self, cx: float, cy: float) -> tuple[int, int, int, int]:
        w, h = self.player_w, self.player_h
        x0 = int(round(cx - w / 2))
        y0 = int(round(cy - h / 2))
        x0 = min(max(x0, 0), self.size - w)
        y0 = min(max(y0, 0), self.size - h)
        return x0, y0, w, h


def _disc(img: np.ndarray, cx: float, cy: float, r: float, color) -> None:
    n = img.shape[0]
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    img[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = color


def _norm_box(x0: float, y0: float, w: float, h: float, n: int, conf: float = 1.0) -> BoundingBox:
    x0 = min(max(x0, 0.0), n)
    y0 = min(max(y0, 0.0), n)
    w = min(w, n - x0)
    h = min(h, n - y0)
    return BoundingBox(x0 / n, y0 / n, w / n, h / n, conf)


def _ball_path(scene: Scene, geo: Geometry, n_frames: int, hand: tuple[float, float],
               rebound_hand: tuple[float, float] | None) -> list[tuple[float, float]]:
    """Ball centre per frame: held for the first third, in flight for the second, outcome last."""
    bx, by = geo.basket
    third = n_frames // 3
    path = []
    for f in range(n_frames):
        if f < third:
            path.append(hand)
            continue
        if f < 2 * third:
            t = (f - third + 1) / third
            x = hand[0] + (bx - hand[0]) * t
            y = hand[1] + (by - hand[1]) * t - 10 * geo.scale * math.sin(math.pi * t)
            path.append((x, y))
            continue
        k = f - 2 * third
        if scene.made:
            path.append((bx, by + min(k, 3) * 2.5 * geo.scale))
        elif rebound_hand is not None:
            t = min((k + 1) / 3.0, 1.0)
            rx, ry = rebound_hand
            path.append((bx + (rx - bx) * t, by - 4 * geo.scale + (ry - by + 4 * geo.scale) * t))
        else:
            t = min((k + 1) / 3.0, 1.0)
            path.append((bx - 12 * geo.scale * t, by - 22 * geo.scale * t))
    return path


def render(scene: Scene, roster: Roster, cfg: SynthConfig) -> RenderedClip:
    geo = Geometry(cfg.frame_size)
    n = cfg.frame_size
    rng = np.random.default_rng(scene.seed)
    mask = geo.courtline_mask()
    base = np.broadcast_to(COURT, (n, n, 3)).copy()
    base[mask > 0] = LINE

    people: list[tuple[int, float, float]] = []
    sx, sy = geo.shooter_xy(scene.distance, scene.angle)
    people.append((scene.shooter, sx, sy))
    rebound_hand = None
    if scene.rebounder is not None:
        rx, ry = scene.rebound_spot
        people.append((scene.rebounder, rx, ry))
    people.extend(scene.distractors)
    boxes = [geo.player_box(x, y) for _, x, y in people]

    def hand_of(box):
        x0, y0, w, h = box
        return x0 + w - 0.5, y0 + 0.35 * h

    hand = hand_of(boxes[0])
    if scene.rebounder is not None:
        rebound_hand = hand_of(boxes[1])
    path = _ball_path(scene, geo, cfg.num_frames, hand, rebound_hand)

    bx, by = geo.basket
    hb = geo.basket_half
    basket_box = _norm_box(bx - hb, by - hb, 2 * hb, 2 * hb, n, 0.95)
    frames = np.empty((cfg.num_frames, n, n, 3))
    dets = []
    truth = []
    for f, (cx, cy) in enumerate(path):
        img = base.copy()
        # basket: rim outline with a net inside
        x0, y0, x1, y1 = int(bx - hb), int(by - hb), int(bx + hb), int(by + hb)
        img[y0:y1, x0:x1] = NET
        img[y0, x0:x1] = img[y1 - 1, x0:x1] = RIM
        img[y0:y1, x0] = img[y0:y1, x1 - 1] = RIM
        for (pid, _, _), (px, py, w, h) in zip(people, boxes):
            p = roster.players[pid]
            split = py + int(round(h * 0.45))
            img[py:split, px:px + w] = p.jersey
            img[split:py + h, px:px + w] = p.shorts
        _disc(img, cx, cy, geo.ball_r, BALL)
        frames[f] = img

        r = geo.ball_r
        ball_true = _norm_box(cx - r, cy - r, 2 * r, 2 * r, n, 0.9)
        truth.append(ball_true)
        j = cfg.jitter
        players = []
        for (px, py, w, h) in boxes:
            dx, dy = rng.normal(0, j, size=2)
            players.append(_norm_box(px + dx * n, py + dy * n, w, h, n, 0.8))
        balls = []
        if rng.random() >= cfg.dropout:
            dx, dy = rng.normal(0, j, size=2)
            balls.append(_norm_box(cx - r + dx * n, cy - r + dy * n, 2 * r, 2 * r, n, 0.9))
        dets.append(DetectionFrame(index=f, players=players, balls=balls, baskets=[basket_box], mask=mask))
    masks = np.broadcast_to(mask, (cfg.num_frames, n, n))
    return RenderedClip(frames, masks, dets, truth)


def caption_parts(scene: Scene, roster: Roster) -> list[tuple[str, ActionLabel, list[str]]]:
    """(caption, action label, players) per event in time order, without cumulative stats."""
    phrase, stem = SHOTS[scene.distance]
    shooter = roster.players[scene.shooter]
    outcome = "made" if scene.made else "missed"
    text = f"{shooter.surname} {scene.distance}' {phrase}"
    if not scene.made:
        text = "MISS " + text
    events = [(text, ActionLabel("shot", f"shot-{stem}", f"{stem}-{outcome}"), [shooter.name])]
    if scene.rebounder is not None:
        reb = roster.players[scene.rebounder]
        events.append((f"{reb.surname} rebound", ActionLabel("rebound", "rebound-defensive", "defensive-rebound"),
                       [reb.name]))
    return events


def _random_scene(cfg: SynthConfig, roster: Roster, game: tuple[str, str, str], event: int,
                  rng: np.random.Generator) -> Scene:
    gid, home, away = game
    geo = Geometry(cfg.frame_size)
    on_court = roster.of_team(home) + roster.of_team(away)
    ids = {p.name: i for i, p in enumerate(roster.players)}
    shooter = on_court[rng.integers(len(on_court))]
    defenders = [p for p in on_court if p.team != shooter.team]
    made = bool(rng.random() < cfg.make_prob)
    rebounder = None
    if not made and rng.random() < cfg.rebound_prob:
        rebounder = ids[defenders[rng.integers(len(defenders))].name]
    distance = int(cfg.distances[rng.integers(len(cfg.distances))])
    angle = float(rng.uniform(-0.75, 0.75))
    bx, by = geo.basket
    reb_angle = rng.uniform(-1.0, 1.0)
    reb_r = rng.uniform(4, 7) * geo.px_per_ft
    rebound_spot = (float(bx - reb_r * math.cos(reb_angle)), float(by + reb_r * math.sin(reb_angle)))
    taken = {ids[shooter.name]} | ({rebounder} if rebounder is not None else set())
    pool = [ids[p.name] for p in on_court if ids[p.name] not in taken]
    chosen = rng.permutation(pool)[: cfg.distractors]
    distractors = []
    for pid in chosen:
        # keep distractors away from the ball's flight and the basket
        for _ in range(50):
            x = float(rng.uniform(4, 44) * geo.scale)
            y = float(rng.uniform(6, 58) * geo.scale)
            if math.hypot(x - bx, y - by) > 14 * geo.scale:
                break
        distractors.append((int(pid), x, y))
    return Scene(
        clip_id=f"{gid}-E{event:03d}", game_id=gid, teams=(home, away), shooter=ids[shooter.name],
        distance=distance, angle=angle, made=made, rebounder=rebounder, distractors=distractors,
        rebound_spot=rebound_spot, seed=int(rng.integers(2**31)))


def showcase_scene(roster: Roster, cfg: SynthConfig, game_id: str = "SHOW") -> Scene:
    """Missed three-point jump shot followed by a defensive rebound."""
    a, b = roster.teams[0], roster.teams[1]
    ids = {p.name: i for i, p in enumerate(roster.players)}
    shooter = ids[roster.of_team(a)[0].name]
    rebounder = ids[roster.of_team(b)[0].name]
    geo = Geometry(cfg.frame_size)
    bx, by = geo.basket
    return Scene(clip_id=f"{game_id}-E000", game_id=game_id, teams=(a, b), shooter=shooter, distance=26,
                 angle=0.3, made=False, rebounder=rebounder,
                 distractors=[(ids[roster.of_team(b)[1].name], 20 * geo.scale, 50 * geo.scale)],
                 rebound_spot=(bx - 6 * geo.px_per_ft, by + 2 * geo.scale), seed=1234)


@dataclass
class SynthCorpus:
    config: SynthConfig
    roster: Roster
    schedule: list[tuple[str, str, str]]
    scenes: list[Scene]
    raw_records: list[PlayByPlayRecord] = field(default_factory=list)
    planted: int = 0

    def scene(self, clip_id: str) -> Scene:
        for s in self.scenes:
            if s.clip_id == clip_id:
                return s
        raise KeyError(clip_id)


_PLANTS = ("({n} PTS)", "({n} AST)", "(Off:{o} Def:{n})", "({n} REB)")


def records_for(scene: Scene, roster: Roster, cfg: SynthConfig, t0: float,
                rng: np.random.Generator | None = None) -> tuple[list[PlayByPlayRecord], int]:
    planted = 0
    out = []
    for k, (text, label, players) in enumerate(caption_parts(scene, roster)):
        if rng is not None and cfg.plant_cumulative:
            pattern = _PLANTS[int(rng.integers(len(_PLANTS)))] if label.coarse == "rebound" or scene.made else None
            if pattern is not None:
                text = f"{text} {pattern.format(n=int(rng.integers(1, 40)), o=int(rng.integers(0, 5)))}"
                planted += 1
        out.append(PlayByPlayRecord(
            game_id=scene.game_id, clip_id=scene.clip_id, timestamp=t0 + 0.5 * k, caption=text,
            actions=[label], players=players, teams=scene.teams,
            distance_ft=scene.distance if k == 0 else None, duration_s=float(cfg.seconds)))
    return out, planted


def generate_corpus(cfg: SynthConfig) -> SynthCorpus:
    rng = np.random.default_rng(cfg.seed)
    roster = make_roster(cfg)
    schedule = make_schedule(roster.teams, cfg.games, rng)
    scenes, records, planted = [], [], 0
    for game in schedule:
        for e in range(cfg.events_per_game):
            scene = _random_scene(cfg, roster, game, e, rng)
            scenes.append(scene)
            recs, p = records_for(scene, roster, cfg, t0=30.0 * e, rng=rng)
            records.extend(recs)
            planted += p
    return SynthCorpus(cfg, roster, schedule, scenes, records, planted)


# -- files -----------------------------------------------------------------------------------------
def _gz_npy(path: Path, arr: np.ndarray) -> None:
    buf = io.BytesIO()
    np.save(buf, arr)
    with open(path, "wb") as fh, gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
        gz.write(buf.getvalue())


def load_gz_npy(path: str | Path) -> np.ndarray:
    with gzip.open(path, "rb") as gz:
        return np.load(io.BytesIO(gz.read()))


def write_corpus(corpus: SynthCorpus, out: str | Path, frames: bool = True) -> dict[str, str]:
    """Write records, scenes, detection tracks, courtline masks and (optionally) frames.

    Returns a map of relative path -> sha256 for the manifest.
    """
    out = Path(out)
    (out / "tracks").mkdir(parents=True, exist_ok=True)
    if frames:
        (out / "frames").mkdir(exist_ok=True)
    cfg = corpus.config
    write_records(out / "records.jsonl", corpus.raw_records)
    meta = {
        "config": cfg.to_json(),
        "roster": [asdict(p) for p in corpus.roster.players],
        "teams": corpus.roster.teams,
        "schedule": [list(g) for g in corpus.schedule],
        "planted_cumulative": corpus.planted,
    }
    (out / "corpus.json").write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")
    with open(out / "scenes.jsonl", "w", encoding="utf-8") as fh:
        for s in corpus.scenes:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")
    _gz_npy(out / "courtline_mask.npy.gz", Geometry(cfg.frame_size).courtline_mask())
    for s in corpus.scenes:
        clip = render(s, corpus.roster, cfg)
        for d in clip.detections:
            d.mask_path = "courtline_mask.npy.gz"
        write_track(out / "tracks" / f"{s.clip_id}.jsonl", clip.detections)
        if frames:
            _gz_npy(out / "frames" / f"{s.clip_id}.npy.gz", (clip.frames * 255).round().astype(np.uint8))
    return hash_tree(out)


def hash_tree(root: str | Path) -> dict[str, str]:
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"}


def read_corpus(path: str | Path) -> SynthCorpus:
    from .curation import read_records
    path = Path(path)
    meta = json.loads((path / "corpus.json").read_text(encoding="utf-8"))
    c = dict(meta["config"])
    c["distances"] = tuple(c["distances"])
    cfg = SynthConfig(**c)
    roster = Roster(meta["teams"], [Player(p["name"], p["team"], tuple(p["jersey"]), tuple(p["shorts"]))
                                    for p in meta["roster"]])
    with open(path / "scenes.jsonl", encoding="utf-8") as fh:
        scenes = [Scene.from_json(json.loads(line)) for line in fh if line.strip()]
    return SynthCorpus(cfg, roster, [tuple(g) for g in meta["schedule"]], scenes,
                       read_records(path / "records.jsonl"), meta.get("planted_cumulative", 0))


def corpus_scenes_only(corpus: SynthCorpus, scenes: list[Scene]) -> SynthCorpus:
    return replace(corpus, scenes=scenes)


def with_scene(corpus: SynthCorpus, scene: Scene) -> SynthCorpus:
    """Copy of ``corpus`` with a hand-built scene (and its game) appended; no cumulative stats planted."""
    recs, _ = records_for(scene, corpus.roster, corpus.config, t0=0.0)
    schedule = list(corpus.schedule)
    if all(g[0] != scene.game_id for g in schedule):
        schedule.append((scene.game_id, *scene.teams))
    return replace(corpus, schedule=schedule, scenes=corpus.scenes + [scene],
                   raw_records=corpus.raw_records + recs)
