"""Coarse / fine / cross encoders and the task-headed autoregressive decoder."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, Linear, Module, TransformerDecoder, TransformerEncoder
from .beam import Hypothesis, beam_search, greedy
from .tensor import Tensor
from .vocab import BOS_ID, EOS_ID, PAD_ID, TASK_KINDS, Vocabulary

log = logging.getLogger(__name__)

IGNORE = -1


@dataclass(frozen=True)
class ModelConfig:
    model_dim: int = 64
    heads: int = 4
    ff_dim: int = 128
    feature_layers: int = 2
    cross_layers: int = 1
    decoder_layers: int = 1
    max_frames: int = 30
    max_len: int = 30
    dropout: float = 0.0

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def full_scale(cls, **kw) -> "ModelConfig":
        base = dict(model_dim=768, heads=12, ff_dim=3072, feature_layers=6, cross_layers=3, decoder_layers=3)
        base.update(kw)
        return cls(**base)

    def attention(self, layers: int) -> AttentionConfig:
        return AttentionConfig(self.model_dim, self.heads, self.ff_dim, layers, self.dropout)


@dataclass
class Batch:
    """Padded feature tracks for B clips.  ``coarse`` is (B, n, d); ``fine`` is (B, m, 2d)."""

    coarse: np.ndarray
    coarse_valid: np.ndarray
    fine: np.ndarray
    fine_valid: np.ndarray

    def __len__(self) -> int:
        return self.coarse.shape[0]

    @classmethod
    def from_tracks(cls, coarse: Sequence[np.ndarray | None], fine: Sequence[np.ndarray | None],
                    d: int) -> "Batch":
        def pad(tracks, width):
            B = len(tracks)
            L = max((0 if t is None else len(t)) for t in tracks) if B else 0
            out = np.zeros((B, L, width))
            valid = np.zeros((B, L), dtype=bool)
            for i, t in enumerate(tracks):
                if t is not None and len(t):
                    out[i, : len(t)] = t
                    valid[i, : len(t)] = True
            return out, valid

        c, cv = pad(coarse, d)
        f, fv = pad(fine, 2 * d)
        return cls(c, cv, f, fv)

    def select(self, idx) -> "Batch":
        return Batch(self.coarse[idx], self.coarse_valid[idx], self.fine[idx], self.fine_valid[idx])


@dataclass
class EncodedMemory:
    rows: Tensor                # (B, n + m, d)
    valid: np.ndarray           # (B, n + m)
    coarse_len: int
    fine_len: int

    @property
    def segments(self) -> np.ndarray:
        """0 for coarse rows, 1 for fine rows."""
        return np.r_[np.zeros(self.coarse_len, dtype=np.int8), np.ones(self.fine_len, dtype=np.int8)]

    def select(self, i: int) -> "EncodedMemory":
        return EncodedMemory(Tensor(self.rows.data[i:i + 1]), self.valid[i:i + 1], self.coarse_len, self.fine_len)


@dataclass
class DecodeResult:
    clip_id: str
    task: str
    tokens: list[str]
    token_logprobs: list[float]
    score: float
    logp: float

    def to_json(self) -> dict:
        return {"clip_id": self.clip_id, "task": self.task, "tokens": self.tokens,
                "token_logprobs": [round(x, 10) for x in self.token_logprobs],
                "score": round(self.score, 10)}


class TaskHead(Module):
    """Projection d -> |label space| for one task.  Local index 0 is always EOS."""

    def __init__(self, task: str, label_ids: Sequence[int], d: int, rng, dtype=np.float64):
        if task not in TASK_KINDS:
            raise ValueError(f"unknown task {task!r}")
        self.task = task
        self.label_ids = np.asarray(label_ids, dtype=np.int64)
        if self.label_ids[0] != EOS_ID:
            raise ValueError("label space must start with EOS")
        self._local = {int(g): i for i, g in enumerate(self.label_ids)}
        self.proj = Linear(d, len(self.label_ids), rng, dtype)

    @property
    def size(self) -> int:
        return len(self.label_ids)

    def to_local(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        out = np.full(ids.shape, IGNORE, dtype=np.int64)
        for idx, g in np.ndenumerate(ids):
            if g == PAD_ID:
                continue
            if int(g) not in self._local:
                raise ValueError(f"token id {int(g)} is outside the {self.task} label space")
            out[idx] = self._local[int(g)]
        return out

    def to_global(self, local: Sequence[int]) -> list[int]:
        return [int(self.label_ids[i]) for i in local]

    def __call__(self, h: Tensor) -> Tensor:
        return self.proj(h)


class CrossModel(Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, tasks: Sequence[str] = ("caption",), seed: int = 0,
                 dtype=np.float64):
        self.cfg = cfg
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        d = cfg.model_dim
        self.coarse_pos = T.parameter(rng.normal(0, 0.02, (cfg.max_frames, d)), dtype)
        self.coarse_enc = TransformerEncoder(cfg.attention(cfg.feature_layers), rng, dtype)
        self.fine_proj = Linear(2 * d, d, rng, dtype)
        self.fine_pos = T.parameter(rng.normal(0, 0.02, (cfg.max_frames, d)), dtype)
        self.fine_enc = TransformerEncoder(cfg.attention(cfg.feature_layers), rng, dtype)
        self.cross_enc = TransformerEncoder(cfg.attention(cfg.cross_layers), rng, dtype)
        self.tok_emb = T.parameter(rng.normal(0, 1.0 / np.sqrt(d), (len(vocab), d)), dtype)
        self.dec_pos = T.parameter(rng.normal(0, 0.02, (cfg.max_len, d)), dtype)
        self.decoder = TransformerDecoder(cfg.attention(cfg.decoder_layers), rng, dtype)
        self.heads = {t: TaskHead(t, vocab.task_slice(t), d, rng, dtype) for t in tasks}

    def head(self, task: str) -> TaskHead:
        if task not in self.heads:
            raise KeyError(f"no head for task {task!r}; model has {sorted(self.heads)}")
        return self.heads[task]

    # -- encoders ----------------------------------------------------------------
    def _truncate(self, x: np.ndarray, valid: np.ndarray, what: str):
        if x.shape[1] > self.cfg.max_frames:
            log.warning("%s track of length %d truncated to %d", what, x.shape[1], self.cfg.max_frames)
            x, valid = x[:, : self.cfg.max_frames], valid[:, : self.cfg.max_frames]
        return x, valid

    def encode_coarse(self, F_c: np.ndarray, valid: np.ndarray | None = None, rng=None) -> tuple[Tensor, np.ndarray]:
        F_c = np.asarray(F_c, dtype=np.float64)
        valid = np.ones(F_c.shape[:2], dtype=bool) if valid is None else valid
        F_c, valid = self._truncate(F_c, valid, "coarse")
        n = F_c.shape[1]
        if n == 0:
            return Tensor(np.zeros((F_c.shape[0], 0, self.cfg.model_dim))), valid
        x = Tensor(F_c) + self.coarse_pos[:n]
        return self.coarse_enc(x, valid, rng), valid

    def encode_fine(self, F_f: np.ndarray, valid: np.ndarray | None = None, rng=None) -> tuple[Tensor, np.ndarray]:
        F_f = np.asarray(F_f, dtype=np.float64)
        valid = np.ones(F_f.shape[:2], dtype=bool) if valid is None else valid
        F_f, valid = self._truncate(F_f, valid, "fine")
        m = F_f.shape[1]
        if m == 0:
            return Tensor(np.zeros((F_f.shape[0], 0, self.cfg.model_dim))), valid
        x = self.fine_proj(Tensor(F_f)) + self.fine_pos[:m]
        return self.fine_enc(x, valid, rng), valid

    def cross_encode(self, V_c: Tensor, V_f: Tensor, valid_c: np.ndarray, valid_f: np.ndarray,
                     rng=None) -> EncodedMemory:
        if V_c.shape[-1] != V_f.shape[-1] or V_c.shape[0] != V_f.shape[0]:
            raise ValueError(f"cannot concatenate tracks of shapes {V_c.shape} and {V_f.shape}")
        n, m = V_c.shape[1], V_f.shape[1]
        if n == 0:
            x = V_f
        elif m == 0:
            x = V_c
        else:
            x = T.concat([V_c, V_f], axis=1)
        valid = np.concatenate([valid_c, valid_f], axis=1)
        return EncodedMemory(self.cross_enc(x, valid, rng), valid, n, m)

    def encode(self, batch: Batch, rng=None) -> EncodedMemory:
        V_c, vc = self.encode_coarse(batch.coarse, batch.coarse_valid, rng)
        V_f, vf = self.encode_fine(batch.fine, batch.fine_valid, rng)
        return self.cross_encode(V_c, V_f, vc, vf, rng)

    # -- decoder ---------------------------------------------------------------
    def logits(self, memory: EncodedMemory, inputs: np.ndarray, task: str, rng=None) -> Tensor:
        """Next-token logits (B, L, |labels|) for teacher-forced ``inputs`` (vocab ids, BOS first)."""
        inputs = np.asarray(inputs, dtype=np.int64)
        L = inputs.shape[1]
        if L > self.cfg.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.cfg.max_len}")
        x = T.embedding(self.tok_emb, inputs) + self.dec_pos[:L]
        h = self.decoder(x, memory.rows, memory.valid, rng)
        return self.head(task)(h)

    def decode_train(self, memory: EncodedMemory, targets: Sequence[Sequence[int]], task: str, rng=None) -> Tensor:
        """Teacher-forced NLL summed over positions, averaged over the batch."""
        head = self.head(task)
        seqs = [list(t) for t in targets]
        for s in seqs:
            if not s or s[0] != BOS_ID or s[-1] != EOS_ID:
                raise ValueError("targets must start with BOS and end with EOS")
            if len(s) > self.cfg.max_len + 1:
                raise ValueError(f"target of length {len(s)} exceeds max_len")
        L = max(len(s) for s in seqs)
        padded = np.full((len(seqs), L), PAD_ID, dtype=np.int64)
        for i, s in enumerate(seqs):
            padded[i, : len(s)] = s
        inputs, outputs = padded[:, :-1], head.to_local(padded[:, 1:])
        logits = self.logits(memory, inputs, task, rng)
        return T.cross_entropy(logits, outputs, ignore_index=IGNORE) * (1.0 / len(seqs))

    def encode_targets(self, sequences: Sequence[Sequence[str]], task: str) -> list[list[int]]:
        kind = TASK_KINDS[task]
        return [self.vocab.encode_sequence(s, kind, self.cfg.max_len + 1) for s in sequences]

    def step_fn(self, memory: EncodedMemory, task: str):
        head = self.head(task)

        def step(prefixes):
            inputs = np.array([[BOS_ID] + head.to_global(p) for p in prefixes], dtype=np.int64)
            mem = EncodedMemory(Tensor(np.repeat(memory.rows.data, len(prefixes), axis=0)),
                                np.repeat(memory.valid, len(prefixes), axis=0), memory.coarse_len, memory.fine_len)
            with T.no_grad():
                out = T.log_softmax(self.logits(mem, inputs, task)).data
            return out[:, -1]

        return step

    def decode(self, memory: EncodedMemory, task: str, width: int = 5, max_len: int | None = None) -> list[Hypothesis]:
        """Search each clip of ``memory`` independently; hypotheses carry local label indices."""
        max_len = self.cfg.max_len - 1 if max_len is None else max_len
        out = []
        for i in range(memory.rows.shape[0]):
            step = self.step_fn(memory.select(i), task)
            if width == 1:
                out.append(greedy(step, eos=0, max_len=max_len))
            else:
                out.append(beam_search(step, eos=0, width=width, max_len=max_len))
        return out

    def run_task(self, batch: Batch, task: str, width: int = 5, clip_ids: Sequence[str] | None = None) -> list[DecodeResult]:
        head = self.head(task)
        with T.no_grad():
            memory = self.encode(batch)
        results = []
        for i, hyp in enumerate(self.decode(memory, task, width)):
            toks = self.vocab.decode(head.to_global(hyp.tokens))
            results.append(DecodeResult(clip_ids[i] if clip_ids else str(i), task, toks, list(hyp.logprobs),
                                        hyp.score, hyp.logp))
        return results

    def config_json(self) -> dict:
        return {"model": asdict(self.cfg), "tasks": sorted(self.heads)}


def write_decodes(path: str | Path, results: Sequence[DecodeResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
