"""Transformer blocks and the two visual encoders (crop ViT, divided space-time clip encoder).

All sequence tensors are laid out (batch, length, model_dim).  Boolean masks use
True for "may attend".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int = 64
    heads: int = 4
    ff_dim: int = 128
    layers: int = 2
    dropout: float = 0.0
    causal: bool = False

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.layers < 1:
            raise ValueError("need at least one layer")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, sub in enumerate(val):
                    yield from sub.named_parameters(f"{prefix}{key}.{i}.")
            elif isinstance(val, dict) and val and isinstance(next(iter(val.values())), Module):
                for k in sorted(val):
                    yield from val[k].named_parameters(f"{prefix}{key}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name].astype(p.dtype)

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None


def _normal(rng, shape, std, dtype):
    return T.parameter(rng.normal(0.0, std, size=shape), dtype=dtype)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64, bias: bool = True):
        self.weight = _normal(rng, (n_in, n_out), 1.0 / np.sqrt(n_in), dtype)
        self.bias = T.parameter(np.zeros(n_out), dtype=dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-5):
        self.gain = T.parameter(np.ones(dim), dtype=dtype)
        self.bias = T.parameter(np.zeros(dim), dtype=dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, cfg: AttentionConfig, rng, dtype=np.float64):
        d = cfg.model_dim
        self.heads = cfg.heads
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype)
        self.v = Linear(d, d, rng, dtype)
        self.o = Linear(d, d, rng, dtype)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        B, L, d = x.shape
        return x.reshape(B, L, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, kv: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
        kv = x if kv is None else kv
        B, Lq, d = x.shape
        q = self._split(self.q(x))
        k = self._split(self.k(kv))
        v = self._split(self.v(kv))
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d // self.heads))
        weights = T.softmax(scores, axis=-1, mask=mask)
        self.last_weights = weights.data
        ctx = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(B, Lq, d)
        return self.o(ctx)


class FeedForward(Module):
    def __init__(self, cfg: AttentionConfig, rng, dtype=np.float64):
        self.up = Linear(cfg.model_dim, cfg.ff_dim, rng, dtype)
        self.down = Linear(cfg.ff_dim, cfg.model_dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.gelu(self.up(x)))


def padding_mask(valid: np.ndarray | None) -> np.ndarray | None:
    """(B, Lk) validity -> (B, 1, 1, Lk) attention mask."""
    if valid is None:
        return None
    return np.asarray(valid, dtype=bool)[:, None, None, :]


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))[None, None]


class EncoderLayer(Module):
    """Pre-norm block: x + attn(ln(x)), then x + ffn(ln(x))."""

    def __init__(self, cfg: AttentionConfig, rng, dtype=np.float64):
        self.ln1 = LayerNorm(cfg.model_dim, dtype)
        self.attn = MultiHeadAttention(cfg, rng, dtype)
        self.ln2 = LayerNorm(cfg.model_dim, dtype)
        self.ffn = FeedForward(cfg, rng, dtype)
        self.dropout = cfg.dropout

    def __call__(self, x: Tensor, mask: np.ndarray | None = None, rng=None) -> Tensor:
        x = x + T.dropout(self.attn(self.ln1(x), mask=mask), self.dropout, rng)
        return x + T.dropout(self.ffn(self.ln2(x)), self.dropout, rng)


class DecoderLayer(Module):
    """Pre-norm causal self-attention, cross-attention over memory, feed-forward."""

    def __init__(self, cfg: AttentionConfig, rng, dtype=np.float64):
        self.ln1 = LayerNorm(cfg.model_dim, dtype)
        self.self_attn = MultiHeadAttention(cfg, rng, dtype)
        self.ln2 = LayerNorm(cfg.model_dim, dtype)
        self.cross_attn = MultiHeadAttention(cfg, rng, dtype)
        self.ln3 = LayerNorm(cfg.model_dim, dtype)
        self.ffn = FeedForward(cfg, rng, dtype)
        self.dropout = cfg.dropout

    def __call__(self, x: Tensor, memory: Tensor, memory_mask: np.ndarray | None = None, rng=None) -> Tensor:
        if memory is None:
            raise ValueError("decoder layer requires memory")
        L = x.shape[1]
        x = x + T.dropout(self.self_attn(self.ln1(x), mask=causal_mask(L)), self.dropout, rng)
        x = x + T.dropout(self.cross_attn(self.ln2(x), memory, mask=memory_mask), self.dropout, rng)
        return x + T.dropout(self.ffn(self.ln3(x)), self.dropout, rng)


class TransformerEncoder(Module):
    def __init__(self, cfg: AttentionConfig, rng, dtype=np.float64):
        self.layers = [EncoderLayer(cfg, rng, dtype) for _ in range(cfg.layers)]
        self.norm = LayerNorm(cfg.model_dim, dtype)

    def __call__(self, x: Tensor, valid: np.ndarray | None = None, rng=None) -> Tensor:
        mask = padding_mask(valid)
        for layer in self.layers:
            x = layer(x, mask, rng)
        return self.norm(x)


class TransformerDecoder(Module):
    def __init__(self, cfg: AttentionConfig, rng, dtype=np.float64):
        self.layers = [DecoderLayer(cfg, rng, dtype) for _ in range(cfg.layers)]
        self.norm = LayerNorm(cfg.model_dim, dtype)

    def __call__(self, x: Tensor, memory: Tensor, memory_valid: np.ndarray | None = None, rng=None) -> Tensor:
        mask = padding_mask(memory_valid)
        for layer in self.layers:
            x = layer(x, memory, mask, rng)
        return self.norm(x)


# -- patches ------------------------------------------------------------------------
@dataclass(frozen=True)
class PatchGrid:
    height: int
    width: int
    patch: int
    channels: int = 3

    def __post_init__(self):
        if self.patch < 1 or self.height % self.patch or self.width % self.patch:
            raise ValueError(f"{self.height}x{self.width} frame not divisible into {self.patch}x{self.patch} patches")

    @property
    def count(self) -> int:
        return self.height * self.width // (self.patch * self.patch)

    @property
    def patch_len(self) -> int:
        return self.channels * self.patch * self.patch


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """Split (..., H, W, C) frames into (..., F, P*P*C) row-major patches.

    Patch order runs along rows of the patch grid; each patch flattens as
    (row-in-patch, column-in-patch, channel).
    """
    frames = np.asarray(frames)
    *lead, H, W, C = frames.shape
    PatchGrid(H, W, patch, C)
    gh, gw = H // patch, W // patch
    x = frames.reshape(*lead, gh, patch, gw, patch, C)
    nl = len(lead)
    x = np.moveaxis(x, nl + 2, nl + 1)  # (..., gh, gw, P, P, C)
    return x.reshape(*lead, gh * gw, patch * patch * C)


def unpatchify(patches: np.ndarray, height: int, width: int, patch: int, channels: int = 3) -> np.ndarray:
    patches = np.asarray(patches)
    *lead, F, _ = patches.shape
    gh, gw = height // patch, width // patch
    if F != gh * gw:
        raise ValueError(f"{F} patches do not tile a {height}x{width} frame at P={patch}")
    x = patches.reshape(*lead, gh, gw, patch, patch, channels)
    nl = len(lead)
    x = np.moveaxis(x, nl + 1, nl + 2)
    return x.reshape(*lead, height, width, channels)


class ViTEncoder(Module):
    """Crop encoder: patch embedding + class token + learned positions -> class-token output."""

    def __init__(self, cfg: AttentionConfig, rng, image_size: int = 32, patch: int = 8,
                 dtype=np.float64, embed_std: float = 0.5):
        self.grid = PatchGrid(image_size, image_size, patch)
        d = cfg.model_dim
        self.embed = Linear(self.grid.patch_len, d, rng, dtype)
        self.cls = _normal(rng, (1, 1, d), embed_std, dtype)
        self.pos = _normal(rng, (1, self.grid.count + 1, d), embed_std, dtype)
        self.encoder = TransformerEncoder(cfg, rng, dtype)
        self.dim = d

    def __call__(self, crops: np.ndarray | Tensor) -> Tensor:
        """(B, S, S, 3) crops -> (B, d)."""
        x = crops.data if isinstance(crops, Tensor) else np.asarray(crops)
        if x.size == 0:
            raise ValueError("empty crop")
        if x.shape[-3:] != (self.grid.height, self.grid.width, 3):
            raise ValueError(f"crop shape {x.shape[-3:]} != encoder input {(self.grid.height, self.grid.width, 3)}")
        B = x.shape[0]
        tokens = self.embed(Tensor(patchify(x, self.grid.patch).astype(self.cls.dtype)))
        cls = T.add(Tensor(np.zeros((B, 1, self.dim), dtype=self.cls.dtype)), self.cls)
        seq = T.concat([cls, tokens], axis=1) + self.pos
        return self.encoder(seq)[:, 0, :]


def vit_encode(crop: np.ndarray, encoder: ViTEncoder) -> np.ndarray:
    """Encode a single crop to a d-vector."""
    crop = np.asarray(crop)
    if crop.size == 0:
        raise ValueError("empty crop")
    with T.no_grad():
        return encoder(crop[None]).data[0]


class DividedSpaceTimeBlock(Module):
    """Temporal attention across frames at each patch index, then spatial attention within frames."""

    def __init__(self, cfg: AttentionConfig, rng, dtype=np.float64):
        d = cfg.model_dim
        self.ln_t = LayerNorm(d, dtype)
        self.attn_t = MultiHeadAttention(cfg, rng, dtype)
        self.ln_s = LayerNorm(d, dtype)
        self.attn_s = MultiHeadAttention(cfg, rng, dtype)
        self.ln_f = LayerNorm(d, dtype)
        self.ffn = FeedForward(cfg, rng, dtype)

    def __call__(self, x: Tensor, temporal_mask: np.ndarray | None = None) -> Tensor:
        B, N, F, d = x.shape
        xt = x.transpose(0, 2, 1, 3).reshape(B * F, N, d)
        xt = xt + self.attn_t(self.ln_t(xt), mask=temporal_mask)
        x = xt.reshape(B, F, N, d).transpose(0, 2, 1, 3).reshape(B * N, F, d)
        x = x + self.attn_s(self.ln_s(x))
        x = x + self.ffn(self.ln_f(x))
        return x.reshape(B, N, F, d)


class TimeSformerEncoder(Module):
    """Divided space-time clip encoder producing one d-vector per frame (mean over patch tokens)."""

    def __init__(self, cfg: AttentionConfig, rng, frame_size: int = 32, patch: int = 8,
                 max_frames: int = 30, dtype=np.float64, embed_std: float = 0.5):
        self.grid = PatchGrid(frame_size, frame_size, patch)
        d = cfg.model_dim
        self.max_frames = max_frames
        self.embed = Linear(self.grid.patch_len, d, rng, dtype)
        self.space_pos = _normal(rng, (1, 1, self.grid.count, d), embed_std, dtype)
        self.time_pos = _normal(rng, (max_frames, d), embed_std, dtype)
        self.blocks = [DividedSpaceTimeBlock(cfg, rng, dtype) for _ in range(cfg.layers)]
        self.norm = LayerNorm(d, dtype)

    def __call__(self, clips: np.ndarray, temporal_identity: bool = False,
                 time_index: np.ndarray | None = None) -> Tensor:
        """(B, N, H, W, 3) clips -> (B, N, d)."""
        clips = np.asarray(clips)
        B, N = clips.shape[:2]
        if N < 1:
            raise ValueError("clip has no frames")
        if N > self.max_frames:
            raise ValueError(f"{N} frames exceeds maximum {self.max_frames}")
        if time_index is None:
            time_index = np.arange(N)
        dtype = self.space_pos.dtype
        x = self.embed(Tensor(patchify(clips, self.grid.patch).astype(dtype)))
        tpos = T.embedding(self.time_pos, np.asarray(time_index)).reshape(1, N, 1, -1)
        x = x + self.space_pos + tpos
        tmask = np.eye(N, dtype=bool)[None, None] if temporal_identity else None
        for block in self.blocks:
            x = block(x, tmask)
        return self.norm(x).mean(axis=2)


def timesformer_encode(clip: np.ndarray, encoder: TimeSformerEncoder, temporal_identity: bool = False) -> np.ndarray:
    """(N, H, W, 3) clip with values in [0, 1] -> (N, d) per-frame features."""
    clip = np.asarray(clip)
    if clip.ndim != 4:
        raise ValueError(f"expected (N, H, W, 3) clip, got {clip.shape}")
    if clip.size and (clip.min() < 0.0 or clip.max() > 1.0):
        raise ValueError("clip intensities must lie in [0, 1]")
    with T.no_grad():
        return encoder(clip[None], temporal_identity=temporal_identity).data[0]
