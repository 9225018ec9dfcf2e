"""Training, evaluation and ablation drivers on synthetic corpora."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, TimeSformerEncoder, ViTEncoder
from .checkpoint import load_arrays, save_arrays
from .config import config_hash
from .curation import PlayByPlayRecord, SplitAssignment, SPLIT_GAMES, assign_splits, build_vocabulary, curate
from .features import ClipStreams, FeatureExtractor
from .metrics import caption_report, sequence_corpus
from .model import Batch, CrossModel, DecodeResult, ModelConfig
from .optim import Adam, LrSchedule
from .synth import SynthCorpus, render
from .text import distance_token, tokenize
from .vocab import TASK_KINDS, Vocabulary

log = logging.getLogger(__name__)

STREAMS = ("T", "BAL", "BAS", "PB", "PA")
FULL = "+".join(STREAMS)
ABLATION_ROWS = ("T", "T+BAL", "T+BAS", "T+PB", "T+PA", "T+BAL+BAS", "T+BAL+BAS+PB", FULL)


class TrainingAborted(RuntimeError):
    pass


def parse_streams(label: str) -> tuple[str, ...]:
    parts = [p.strip().upper() for p in label.split("+") if p.strip()]
    unknown = [p for p in parts if p not in STREAMS]
    if unknown:
        raise ValueError(f"unknown feature streams {unknown}; choose from {STREAMS}")
    if not parts:
        raise ValueError("at least one feature stream must be enabled")
    if len(set(parts)) != len(parts):
        raise ValueError(f"duplicate streams in {label!r}")
    return tuple(s for s in STREAMS if s in parts)


@dataclass(frozen=True)
class RunConfig:
    task: str = "caption"
    streams: str = FULL
    model_dim: int = 64
    heads: int = 4
    ff_dim: int = 128
    feature_layers: int = 2
    cross_layers: int = 1
    decoder_layers: int = 1
    max_frames: int = 30
    max_len: int = 30
    dropout: float = 0.0
    lr: float = 2e-3
    warmup_fraction: float = 0.1
    epochs: int = 60
    batch_size: int = 16
    clip_norm: float = 1.0
    beam: int = 5
    seed: int = 0
    backbone_seed: int = 1234
    train_limit: int | None = None
    eval_split: str = "val"
    stop_loss: float | None = None

    def __post_init__(self):
        if self.task not in TASK_KINDS:
            raise ValueError(f"unknown task {self.task!r}")
        object.__setattr__(self, "streams", "+".join(parse_streams(self.streams)))
        if self.epochs < 1 or self.batch_size < 1 or self.beam < 1:
            raise ValueError("epochs, batch_size and beam must be positive")

    @property
    def toggles(self) -> tuple[str, ...]:
        return parse_streams(self.streams)

    @property
    def fine_toggles(self) -> dict[str, bool]:
        on = set(self.toggles)
        return {"use_ball": "BAL" in on, "use_basket": "BAS" in on, "use_pb": "PB" in on, "use_pa": "PA" in on}

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.model_dim, self.heads, self.ff_dim, self.feature_layers, self.cross_layers,
                           self.decoder_layers, self.max_frames, self.max_len, self.dropout)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        return cls(**obj)


# -- corpus preparation ----------------------------------------------------------------------
def backbones(model_dim: int, heads: int, ff_dim: int, seed: int) -> FeatureExtractor:
    """Frozen, seeded crop and clip encoders shared by every run on a corpus."""
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(model_dim, heads, ff_dim, 2)
    vit = ViTEncoder(cfg, rng)
    tsf = TimeSformerEncoder(cfg, rng)
    vit.set_trainable(False)
    tsf.set_trainable(False)
    return FeatureExtractor(vit, tsf)


def extract_features(corpus: SynthCorpus, extractor: FeatureExtractor) -> dict[str, ClipStreams]:
    cfg = corpus.config
    coarse_factor = max(1, cfg.frame_size // extractor.timesformer.grid.height)
    extractor.coarse_factor = coarse_factor
    out = {}
    for scene in corpus.scenes:
        clip = render(scene, corpus.roster, cfg)
        out[scene.clip_id] = extractor.extract(clip.frames, clip.detections, clip.masks, cfg.fps, window=cfg.window)
    return out


def save_features(path: str | Path, feats: dict[str, ClipStreams]) -> None:
    arrays = {f"{cid}/{k}": v for cid, st in feats.items() for k, v in st.arrays().items()}
    save_arrays(path, arrays)


def load_features(path: str | Path) -> dict[str, ClipStreams]:
    arrays = load_arrays(path)
    grouped: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in arrays.items():
        cid, stream = key.rsplit("/", 1)
        grouped.setdefault(cid, {})[stream] = arr
    return {cid: ClipStreams(**g) for cid, g in grouped.items()}


@dataclass
class PreparedCorpus:
    synth: SynthCorpus
    records: list[PlayByPlayRecord]
    splits: SplitAssignment
    vocab: Vocabulary
    features: dict[str, ClipStreams]

    def records_in(self, split: str) -> list[PlayByPlayRecord]:
        return [r for r in self.records if self.splits.splits[r.game_id] == split]


_FEATURE_CACHE: dict[tuple, dict[str, ClipStreams]] = {}


def prepare(corpus: SynthCorpus, model_dim: int = 64, heads: int = 4, ff_dim: int = 128,
            backbone_seed: int = 1234, split_seed: int | None = None,
            features: dict[str, ClipStreams] | None = None) -> PreparedCorpus:
    records = curate(corpus.raw_records, roster=corpus.roster.names())
    split_seed = corpus.config.seed if split_seed is None else split_seed
    splits = assign_splits(corpus.schedule, SPLIT_GAMES, seed=split_seed)
    vocab = build_vocabulary(records)
    if features is None:
        key = (config_hash(corpus.config), tuple(s.clip_id for s in corpus.scenes), model_dim, heads, ff_dim,
               backbone_seed)
        if key not in _FEATURE_CACHE:
            _FEATURE_CACHE[key] = extract_features(corpus, backbones(model_dim, heads, ff_dim, backbone_seed))
        features = _FEATURE_CACHE[key]
    return PreparedCorpus(corpus, records, splits, vocab, features)


def task_targets(record: PlayByPlayRecord, task: str) -> list[str]:
    if task == "caption":
        return tokenize(record.caption)
    if task == "action":
        return record.action_sequence("event")
    return list(record.players)


@dataclass
class SplitData:
    clip_ids: list[str]
    batch: Batch
    references: list[list[str]]
    targets: list[list[int]]

    def __len__(self) -> int:
        return len(self.clip_ids)

    def subset(self, idx: Sequence[int]) -> "SplitData":
        idx = list(idx)
        return SplitData([self.clip_ids[i] for i in idx], self.batch.select(idx),
                         [self.references[i] for i in idx], [self.targets[i] for i in idx])


def make_split(prep: PreparedCorpus, run: RunConfig, split: str | None = None,
               records: Sequence[PlayByPlayRecord] | None = None, limit: int | None = None) -> SplitData:
    recs = list(records) if records is not None else prep.records_in(split or "train")
    if limit is not None:
        recs = recs[:limit]
    use_t = "T" in run.toggles
    fine_on = run.fine_toggles
    any_fine = any(fine_on.values())
    coarse, fine = [], []
    for r in recs:
        st = prep.features[r.clip_id]
        coarse.append(st.coarse if use_t else None)
        fine.append(st.fused(**fine_on) if any_fine else None)
    batch = Batch.from_tracks(coarse, fine, run.model_dim)
    refs = [task_targets(r, run.task) for r in recs]
    kind = TASK_KINDS[run.task]
    targets = [prep.vocab.encode_sequence(t, kind, run.max_len + 1) for t in refs]
    return SplitData([r.clip_id for r in recs], batch, refs, targets)


# -- training ----------------------------------------------------------------------------------
@dataclass
class TrainResult:
    model: CrossModel
    run: RunConfig
    history: list[dict] = field(default_factory=list)
    steps: int = 0

    @property
    def final_loss(self) -> float:
        return self.history[-1]["loss"] if self.history else math.nan


def new_model(run: RunConfig, vocab: Vocabulary) -> CrossModel:
    return CrossModel(run.model_config(), vocab, tasks=(run.task,), seed=run.seed)


def batch_loss(model: CrossModel, data: SplitData, idx: Sequence[int], task: str, rng=None) -> T.Tensor:
    sub = data.batch.select(list(idx))
    memory = model.encode(sub, rng)
    return model.decode_train(memory, [data.targets[i] for i in idx], task, rng)


def mean_loss(model: CrossModel, data: SplitData, task: str, batch_size: int = 64) -> float:
    """Per-clip teacher-forced NLL averaged over the split."""
    total = 0.0
    with T.no_grad():
        for s in range(0, len(data), batch_size):
            idx = list(range(s, min(s + batch_size, len(data))))
            total += batch_loss(model, data, idx, task).item() * len(idx)
    return total / len(data)


def _dump_batch(out_dir: Path | None, data: SplitData, idx, epoch: int, step: int) -> str:
    if out_dir is None:
        return "no output directory for the diagnostic dump"
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "nan_batch.npz"
    sub = data.batch.select(list(idx))
    np.savez(path, coarse=sub.coarse, fine=sub.fine, coarse_valid=sub.coarse_valid, fine_valid=sub.fine_valid,
             clip_ids=np.array([data.clip_ids[i] for i in idx]), epoch=epoch, step=step)
    return str(path)


def train(run: RunConfig, prep: PreparedCorpus, train_data: SplitData | None = None,
          val_data: SplitData | None = None, out_dir: str | Path | None = None,
          model: CrossModel | None = None) -> TrainResult:
    """Mini-batch Adam on teacher-forced NLL; one history row per epoch."""
    out_dir = Path(out_dir) if out_dir is not None else None
    data = train_data if train_data is not None else make_split(prep, run, "train", limit=run.train_limit)
    if len(data) == 0:
        raise ValueError("empty training split")
    model = model or new_model(run, prep.vocab)
    rng = np.random.default_rng(run.seed)
    drop_rng = rng if run.dropout > 0 else None
    steps_per_epoch = math.ceil(len(data) / run.batch_size)
    schedule = LrSchedule.with_warmup_fraction(run.epochs * steps_per_epoch, run.lr, run.warmup_fraction)
    opt = Adam(model.parameters(), schedule, clip_norm=run.clip_norm)
    result = TrainResult(model, run)
    for epoch in range(1, run.epochs + 1):
        order = rng.permutation(len(data))
        losses = []
        lr = 0.0
        for s in range(0, len(data), run.batch_size):
            idx = order[s:s + run.batch_size]
            opt.zero_grad()
            try:
                loss = batch_loss(model, data, idx, run.task, drop_rng)
                ok = math.isfinite(loss.item())
            except FloatingPointError:
                ok = False
            if not ok:
                where = _dump_batch(out_dir, data, idx, epoch, result.steps)
                raise TrainingAborted(f"non-finite loss at epoch {epoch}, step {result.steps}; batch dumped to {where}")
            T.backward(loss)
            lr = opt.step()
            result.steps += 1
            losses.append(loss.item() * len(idx))
        row = {"epoch": epoch, "step": result.steps, "lr": lr, "loss": sum(losses) / len(data)}
        if val_data is not None and len(val_data) and (epoch == run.epochs):
            row["val_loss"] = mean_loss(model, val_data, run.task)
        result.history.append(row)
        if run.stop_loss is not None and row["loss"] < run.stop_loss:
            if val_data is not None and len(val_data) and "val_loss" not in row:
                row["val_loss"] = mean_loss(model, val_data, run.task)
            break
    return result


# -- checkpoints -----------------------------------------------------------------------------
def save_checkpoint(out_dir: str | Path, model: CrossModel, run: RunConfig) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_arrays(out_dir / "checkpoint.bin", model.state_dict())
    model.vocab.save(out_dir / "vocab.json")
    (out_dir / "run.json").write_text(json.dumps(run.to_json(), indent=1, sort_keys=True), encoding="utf-8")


def load_checkpoint(out_dir: str | Path) -> tuple[CrossModel, RunConfig]:
    out_dir = Path(out_dir)
    run = RunConfig.from_json(json.loads((out_dir / "run.json").read_text(encoding="utf-8")))
    vocab = Vocabulary.load(out_dir / "vocab.json")
    model = new_model(run, vocab)
    model.load_state_dict(load_arrays(out_dir / "checkpoint.bin"))
    return model, run


# -- evaluation ----------------------------------------------------------------------------
def distance_accuracy(preds: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> float | None:
    pairs = [(distance_token(list(p)), distance_token(list(r))) for p, r in zip(preds, refs)]
    pairs = [(p, r) for p, r in pairs if r is not None]
    if not pairs:
        return None
    return sum(p == r for p, r in pairs) / len(pairs)


def decode_split(model: CrossModel, data: SplitData, task: str, width: int) -> list[DecodeResult]:
    return model.run_task(data.batch, task, width, data.clip_ids)


def evaluate(model: CrossModel, data: SplitData, task: str, width: int = 5, split: str = "val",
             decodes: list[DecodeResult] | None = None) -> dict:
    """Metric report for one split.  Caption tasks get BLEU/METEOR/ROUGE-L/CIDEr-D and
    distance-token accuracy; action and identity tasks get SR/Acc/mIoU.  Raw log-prob sums
    are reported for the requested width and for greedy decoding."""
    if task not in model.heads:
        raise KeyError(f"checkpoint has no {task!r} head (has {sorted(model.heads)})")
    decodes = decodes if decodes is not None else decode_split(model, data, task, width)
    preds = [d.tokens for d in decodes]
    sums = {str(width): float(sum(d.logp for d in decodes))}
    if width != 1:
        sums["1"] = float(sum(d.logp for d in decode_split(model, data, task, 1)))
    report = {"task": task, "split": split, "clips": len(data), "beam": width,
              "loss": mean_loss(model, data, task),
              "logprob_sum": sums[str(width)],
              "logprob_sums": sums,
              "exact_match": sum(list(p) == list(r) for p, r in zip(preds, data.references)) / len(data)}
    if task == "caption":
        report["metrics"] = caption_report(preds, [[r] for r in data.references])
        report["distance_accuracy"] = distance_accuracy(preds, data.references)
    else:
        report["metrics"] = sequence_corpus(preds, data.references)
    return report


# -- ablation ------------------------------------------------------------------------------
@dataclass
class AblationRow:
    label: str
    seeds: list[int]
    val_loss: list[float]
    distance_accuracy: list[float]
    metrics: list[dict]

    @staticmethod
    def _mean(xs):
        return float(np.mean(xs)) if xs else math.nan

    @staticmethod
    def _std(xs):
        return float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0

    def summary(self) -> dict:
        out = {"row": self.label, "seeds": len(self.seeds),
               "val_loss": self._mean(self.val_loss), "val_loss_std": self._std(self.val_loss),
               "distance_acc": self._mean(self.distance_accuracy),
               "distance_acc_std": self._std(self.distance_accuracy)}
        for key in (self.metrics[0] if self.metrics else {}):
            out[key] = self._mean([m[key] for m in self.metrics])
        return out


def ablate(rows: Sequence[str], base: RunConfig, prep: PreparedCorpus, seeds: Sequence[int] = (0,),
           width: int | None = None, decode: bool = True) -> list[AblationRow]:
    """Train and evaluate every stream configuration for every seed; rows keep the requested order."""
    width = base.beam if width is None else width
    out = []
    for label in rows:
        run0 = replace(base, streams=label)
        train_data = make_split(prep, run0, "train", limit=base.train_limit)
        val_data = make_split(prep, run0, base.eval_split)
        row = AblationRow(run0.streams, list(seeds), [], [], [])
        for seed in seeds:
            run = replace(run0, seed=int(seed))
            res = train(run, prep, train_data, val_data)
            row.val_loss.append(res.history[-1].get("val_loss", mean_loss(res.model, val_data, run.task)))
            if decode:
                rep = evaluate(res.model, val_data, run.task, width, base.eval_split)
                row.metrics.append(rep["metrics"])
                if rep.get("distance_accuracy") is not None:
                    row.distance_accuracy.append(rep["distance_accuracy"])
            log.info("ablate %s seed %d: val loss %.4f", row.label, seed, row.val_loss[-1])
        out.append(row)
    return out


def noise_tolerance(rows: Sequence[AblationRow], k: float = 2.0) -> float:
    """``k`` standard errors of a seed mean, pooled over rows."""
    var = [np.var(r.val_loss, ddof=1) for r in rows if len(r.val_loss) > 1]
    n = max((len(r.val_loss) for r in rows), default=1)
    return float(k * math.sqrt(np.mean(var) / n)) if var else 0.0


def ablation_checks(rows: Sequence[AblationRow], full: str = FULL, coarse_only: str = "T",
                    pa_row: str = "T+PA", min_gain: float = 0.05) -> dict:
    by = {r.label: r.summary() for r in rows}
    checks: dict = {}
    if full in by:
        tol = noise_tolerance(rows)
        worse = [lab for lab, s in by.items()
                 if lab != full and set(parse_streams(lab)) < set(parse_streams(full))
                 and by[full]["val_loss"] > s["val_loss"] + tol]
        checks["noise_tolerance"] = tol
        checks["full_not_worse_than_subsets"] = not worse
        checks["subsets_beating_full"] = worse
        if coarse_only in by:
            checks["full_dominates_coarse_only"] = by[full]["val_loss"] <= by[coarse_only]["val_loss"]
    if pa_row in by and coarse_only in by:
        gain = by[pa_row]["distance_acc"] - by[coarse_only]["distance_acc"]
        checks["pa_distance_gain"] = gain
        checks["pa_improves_distance"] = bool(gain >= min_gain)
    return checks
