"""Detection tracks -> fine feature streams, plus the adaptive frame sampler.

Boxes are normalised ``(x, y, w, h)`` with ``(x, y)`` the top-left corner.
A pixel ``(r, c)`` of an ``H x W`` image belongs to a box when its centre
``((c + .5) / W, (r + .5) / H)`` lies in ``[x, x + w) x [y, y + h)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .attention import TimeSformerEncoder, ViTEncoder

log = logging.getLogger(__name__)

STREAMS = ("coarse", "ball", "basket", "player_with_ball", "position_aware", "fused")
_TOL = 1e-9


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float
    confidence: float = 1.0

    def __post_init__(self):
        if self.w < 0 or self.h < 0 or self.x < -_TOL or self.y < -_TOL \
                or self.x + self.w > 1 + _TOL or self.y + self.h > 1 + _TOL:
            raise ValueError(f"invalid box {self}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def scaled(self, factor: float) -> "BoundingBox":
        return BoundingBox(self.x * factor, self.y * factor, self.w * factor, self.h * factor, self.confidence)

    def pixel_mask(self, height: int, width: int) -> np.ndarray:
        cy = (np.arange(height) + 0.5) / height
        cx = (np.arange(width) + 0.5) / width
        rows = (cy >= self.y) & (cy < self.y + self.h)
        cols = (cx >= self.x) & (cx < self.x + self.w)
        return rows[:, None] & cols[None, :]

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h, self.confidence]

    @classmethod
    def from_list(cls, vals: Sequence[float]) -> "BoundingBox":
        conf = vals[4] if len(vals) > 4 else 1.0
        return cls(float(vals[0]), float(vals[1]), float(vals[2]), float(vals[3]), float(conf))


@dataclass
class DetectionFrame:
    index: int
    players: list[BoundingBox] = field(default_factory=list)
    balls: list[BoundingBox] = field(default_factory=list)
    baskets: list[BoundingBox] = field(default_factory=list)
    mask_path: str | None = None
    mask: np.ndarray | None = None

    @property
    def ball(self) -> BoundingBox | None:
        """Highest-confidence ball; ties keep the first listed."""
        if not self.balls:
            return None
        return max(self.balls, key=lambda b: b.confidence)

    @property
    def basket(self) -> BoundingBox | None:
        if not self.baskets:
            return None
        return max(self.baskets, key=lambda b: b.confidence)

    def to_json(self) -> dict:
        return {
            "frame": self.index,
            "player": [b.to_list() for b in self.players],
            "ball": [b.to_list() for b in self.balls],
            "basket": [b.to_list() for b in self.baskets],
            "mask": self.mask_path,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DetectionFrame":
        return cls(
            index=int(obj["frame"]),
            players=[BoundingBox.from_list(b) for b in obj.get("player", [])],
            balls=[BoundingBox.from_list(b) for b in obj.get("ball", [])],
            baskets=[BoundingBox.from_list(b) for b in obj.get("basket", [])],
            mask_path=obj.get("mask"),
        )


def write_track(path: str | Path, frames: Iterable[DetectionFrame]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for fr in frames:
            fh.write(json.dumps(fr.to_json(), sort_keys=True) + "\n")


def read_track(path: str | Path) -> list[DetectionFrame]:
    frames = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                frames.append(DetectionFrame.from_json(json.loads(line)))
    for a, b in zip(frames, frames[1:]):
        if b.index <= a.index:
            raise ValueError(f"frame indices must strictly increase ({a.index} then {b.index})")
    return frames


@dataclass
class FeatureTrack:
    rows: np.ndarray
    granularity: str = "per-second"
    stream: str = "fused"

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ValueError("feature track rows must form a matrix")
        if self.stream not in STREAMS:
            raise ValueError(f"unknown stream {self.stream!r}")

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


# -- geometry -------------------------------------------------------------------------
def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def filter_players_with_ball(frame: DetectionFrame) -> list[BoundingBox]:
    """Players whose box overlaps the ball (IoU > 0), in input order."""
    ball = frame.ball
    if ball is None:
        return []
    return [p for p in frame.players if iou(p, ball) > 0.0]


def ball_in_basket_area(frame: DetectionFrame) -> bool:
    ball, basket = frame.ball, frame.basket
    return ball is not None and basket is not None and iou(ball, basket) > 0.0


# -- images -----------------------------------------------------------------------------
def compose_position_aware(frame: DetectionFrame, image: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Courtline raster with the player-with-ball and basket regions pasted from ``image``."""
    mask = frame.mask if mask is None else mask
    if mask is None:
        raise ValueError("position-aware image needs a courtline mask")
    image = np.asarray(image)
    H, W = image.shape[:2]
    mask = np.asarray(mask, dtype=image.dtype)
    if mask.shape[:2] != (H, W):
        raise ValueError(f"mask {mask.shape} does not match image {image.shape}")
    out = np.repeat(mask[..., None], 3, axis=2) if mask.ndim == 2 else mask.copy()
    boxes = filter_players_with_ball(frame)
    if frame.basket is not None:
        boxes = boxes + [frame.basket]
    for box in boxes:
        region = box.pixel_mask(H, W)
        out[region] = image[region]
    return out


def resize_nearest(image: np.ndarray, size: int) -> np.ndarray:
    H, W = image.shape[:2]
    rows = np.minimum((np.arange(size) + 0.5) * H / size, H - 1).astype(int)
    cols = np.minimum((np.arange(size) + 0.5) * W / size, W - 1).astype(int)
    return image[rows][:, cols]


def crop_box(image: np.ndarray, box: BoundingBox, size: int) -> np.ndarray:
    """Pixels under ``box`` (at least one pixel), resized to ``size x size``."""
    H, W = image.shape[:2]
    r0 = min(int(math.floor(box.y * H)), H - 1)
    c0 = min(int(math.floor(box.x * W)), W - 1)
    r1 = max(int(math.ceil((box.y + box.h) * H)), r0 + 1)
    c1 = max(int(math.ceil((box.x + box.w) * W)), c0 + 1)
    return resize_nearest(image[r0:r1, c0:c1], size)


def downsample(frames: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool the two spatial axes of (..., H, W, C) frames."""
    if factor == 1:
        return frames
    *lead, H, W, C = frames.shape
    x = frames.reshape(*lead, H // factor, factor, W // factor, factor, C)
    return x.mean(axis=(-4, -2))


# -- temporal ---------------------------------------------------------------------------
def regroup_per_second(vectors: np.ndarray, fps: int, frame_indices: Sequence[int] | None = None,
                       num_frames: int | None = None, valid: Sequence[bool] | None = None) -> np.ndarray:
    """Mean-pool per-frame vectors into one row per whole second.

    Seconds with no (valid) frame produce a zero row.  The row count is
    ``ceil(num_frames / fps)``; ``num_frames`` defaults to the last index + 1.
    """
    if fps < 1:
        raise ValueError("fps must be >= 1")
    vectors = np.asarray(vectors, dtype=np.float64)
    idx = np.arange(len(vectors)) if frame_indices is None else np.asarray(frame_indices, dtype=np.int64)
    if num_frames is None:
        num_frames = int(idx.max()) + 1 if len(idx) else 0
    m = -(-num_frames // fps)
    d = vectors.shape[1] if vectors.ndim == 2 else 0
    out = np.zeros((m, d))
    counts = np.zeros(m)
    keep = np.ones(len(idx), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    for row, i, ok in zip(vectors, idx, keep):
        if ok:
            out[i // fps] += row
            counts[i // fps] += 1
    nz = counts > 0
    out[nz] /= counts[nz, None]
    return out


def _rows(track) -> np.ndarray:
    return track.rows if isinstance(track, FeatureTrack) else np.asarray(track, dtype=np.float64)


def fuse(ball, basket, player_with_ball, position_aware) -> np.ndarray:
    """Row t = [ball[t] + basket[t] + player_with_ball[t], position_aware[t]]  (m x 2d)."""
    parts = [_rows(t) for t in (ball, basket, player_with_ball, position_aware)]
    shapes = {p.shape for p in parts}
    if len(shapes) != 1 or parts[0].ndim != 2:
        raise ValueError(f"fuse needs four equal-shape m x d tracks, got {[p.shape for p in parts]}")
    return np.concatenate([parts[0] + parts[1] + parts[2], parts[3]], axis=1)


def uniform_indices(num_frames: int, source_fps: float, rate: float) -> np.ndarray:
    """Frames hit by a sampling clock at ``rate`` Hz: ``floor(k * source_fps / rate)``."""
    if rate >= source_fps:
        return np.arange(num_frames)
    k = np.arange(int(math.ceil(num_frames * rate / source_fps)) + 1)
    idx = np.floor(k * source_fps / rate + 1e-9).astype(np.int64)
    return np.unique(idx[idx < num_frames])


@dataclass(frozen=True)
class SampledFrames:
    coarse: np.ndarray
    fine: np.ndarray
    first_event: int | None


def adaptive_sample(flags: Sequence[bool], source_fps: float, base_fps: float = 8, high_fps: float = 12,
                    low_fps: float = 4, window: int = 100) -> SampledFrames:
    """Coarse frames at ``base_fps``; fine frames at ``high_fps`` within ``window`` frames of the
    first ball-in-basket-area flag and at ``low_fps`` elsewhere.
    """
    flags = np.asarray(flags, dtype=bool)
    n = len(flags)
    coarse = uniform_indices(n, source_fps, base_fps)
    low = uniform_indices(n, source_fps, low_fps)
    hits = np.flatnonzero(flags)
    if len(hits) == 0:
        return SampledFrames(coarse, low, None)
    first = int(hits[0])
    lo, hi = first - window, first + window
    high = uniform_indices(n, source_fps, high_fps)
    inside = high[(high >= lo) & (high <= hi)]
    outside = low[(low < lo) | (low > hi)]
    return SampledFrames(coarse, np.union1d(inside, outside), first)


# -- feature extraction -------------------------------------------------------------------
@dataclass
class ClipStreams:
    coarse: np.ndarray            # n x d
    ball: np.ndarray              # m x d
    basket: np.ndarray
    player_with_ball: np.ndarray
    position_aware: np.ndarray

    def fused(self, use_ball=True, use_basket=True, use_pb=True, use_pa=True) -> np.ndarray:
        z = np.zeros_like(self.ball)
        return fuse(self.ball if use_ball else z, self.basket if use_basket else z,
                    self.player_with_ball if use_pb else z, self.position_aware if use_pa else z)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in ("coarse", "ball", "basket", "player_with_ball", "position_aware")}


class FeatureExtractor:
    """Frozen visual backbones applied to one clip at a time."""

    def __init__(self, vit: ViTEncoder, timesformer: TimeSformerEncoder, coarse_factor: int = 2,
                 crop_size: int = 32, max_frames: int = 30):
        self.vit = vit
        self.timesformer = timesformer
        self.coarse_factor = coarse_factor
        self.crop_size = crop_size
        self.max_frames = max_frames

    def coarse(self, frames: np.ndarray, indices: np.ndarray) -> np.ndarray:
        if len(indices) > self.max_frames:
            log.warning("coarse track of %d frames truncated to %d", len(indices), self.max_frames)
            indices = indices[: self.max_frames]
        clip = downsample(frames[indices], self.coarse_factor)
        with T.no_grad():
            return self.timesformer(clip[None]).data[0].astype(np.float64)

    def fine(self, frames: np.ndarray, detections: Sequence[DetectionFrame], masks: np.ndarray,
             indices: np.ndarray, fps: int) -> dict[str, np.ndarray]:
        crops: list[np.ndarray] = []
        owners: list[tuple[str, int]] = []
        for j, i in enumerate(indices):
            det, img = detections[i], frames[i]
            if det.ball is not None:
                crops.append(crop_box(img, det.ball, self.crop_size))
                owners.append(("ball", j))
            if det.basket is not None:
                crops.append(crop_box(img, det.basket, self.crop_size))
                owners.append(("basket", j))
            for box in filter_players_with_ball(det):
                crops.append(crop_box(img, box, self.crop_size))
                owners.append(("player_with_ball", j))
            pa = compose_position_aware(det, img, masks[i])
            crops.append(resize_nearest(pa, self.crop_size))
            owners.append(("position_aware", j))
        d = self.vit.dim
        with T.no_grad():
            feats = self.vit(np.stack(crops)).data.astype(np.float64) if crops else np.zeros((0, d))
        out = {}
        for stream in ("ball", "basket", "player_with_ball", "position_aware"):
            per_frame = np.zeros((len(indices), d))
            counts = np.zeros(len(indices))
            for (s, j), f in zip(owners, feats):
                if s == stream:
                    per_frame[j] += f
                    counts[j] += 1
            ok = counts > 0
            per_frame[ok] /= counts[ok, None]
            out[stream] = regroup_per_second(per_frame, fps, indices, num_frames=len(frames), valid=ok)
        return out

    def extract(self, frames: np.ndarray, detections: Sequence[DetectionFrame], masks: np.ndarray,
                source_fps: int, window: int = 100, base_fps=8, high_fps=12, low_fps=4) -> ClipStreams:
        flags = [ball_in_basket_area(d) for d in detections]
        sel = adaptive_sample(flags, source_fps, base_fps, high_fps, low_fps, window)
        fine = self.fine(frames, detections, masks, sel.fine, source_fps)
        return ClipStreams(coarse=self.coarse(frames, sel.coarse), **fine)
