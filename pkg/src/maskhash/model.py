"""Asymmetric transformer encoder-decoder with a binary hash head.

The encoder runs pre-norm transformer blocks over a (possibly masked) frame
subset and maps each latent through a linear layer plus tanh; training
binarizes those values with a straight-through sign whose backward pass is
the identity. A video's code is the sign of the mean of its hash tokens
(sign(0) = +1). The small decoder rebuilds all frame features from hash
tokens at kept positions and a learned mask token elsewhere; it exists only
to supply the reconstruction signal during training.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from maskhash.errors import ArgumentError, FormatError

CHECKPOINT_MAGIC = b"CMHM"
CHECKPOINT_VERSION = 1

MODES = ("train", "smooth_test")

# Encoder presets; the decoder stays small (2/3/192) in all of them.
# Head count must divide the width, so every preset uses 64-dim heads
# except mini (32-dim).
PRESETS = {
    "small": dict(enc_depth=12, enc_heads=4, enc_width=256),
    "mini": dict(enc_depth=6, enc_heads=4, enc_width=128),
    "base": dict(enc_depth=12, enc_heads=12, enc_width=768),
    "large": dict(enc_depth=24, enc_heads=16, enc_width=1024),
}


@dataclass
class ModelConfig:
    feature_dim: int
    max_frames: int
    code_length: int
    enc_depth: int = 12
    enc_heads: int = 4
    enc_width: int = 256
    dec_depth: int = 2
    dec_heads: int = 3
    dec_width: int = 192

    def __post_init__(self):
        for name in ("feature_dim", "max_frames", "code_length", "enc_heads",
                     "enc_width", "dec_heads", "dec_width"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"{name} must be positive, got {getattr(self, name)}")
        if self.enc_depth < 1:
            raise ArgumentError(f"enc_depth must be >= 1, got {self.enc_depth}")
        if self.dec_depth < 0:
            raise ArgumentError(f"dec_depth must be >= 0, got {self.dec_depth}")
        if self.enc_width % self.enc_heads:
            raise ArgumentError(
                f"enc_width {self.enc_width} not divisible by enc_heads {self.enc_heads}"
            )
        if self.dec_width % self.dec_heads:
            raise ArgumentError(
                f"dec_width {self.dec_width} not divisible by dec_heads {self.dec_heads}"
            )

    @classmethod
    def from_preset(cls, preset: str, feature_dim: int, max_frames: int,
                    code_length: int, **overrides) -> "ModelConfig":
        if preset not in PRESETS:
            raise ArgumentError(f"unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
        kwargs = dict(PRESETS[preset])
        kwargs.update(overrides)
        return cls(feature_dim=feature_dim, max_frames=max_frames,
                   code_length=code_length, **kwargs)


@dataclass
class EncoderOutput:
    """Per-frame latents, hash tokens, and the pooled per-video code."""

    latents: torch.Tensor
    hash_tokens: torch.Tensor
    video_code: torch.Tensor


def _to_tensor(x, dtype: torch.dtype) -> torch.Tensor:
    """Convert to a tensor of the given dtype, preserving autograd history."""
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def sign_pm(x: torch.Tensor) -> torch.Tensor:
    """Sign with the single tie rule sign(0) = +1."""
    return torch.where(x >= 0, torch.ones_like(x), -torch.ones_like(x))


def ste_sign(x: torch.Tensor) -> torch.Tensor:
    """Forward: sign_pm(x). Backward: identity (straight-through)."""
    return x + (sign_pm(x) - x).detach()


def pool_code(hash_tokens: torch.Tensor, mode: str = "train") -> torch.Tensor:
    """Column-wise mean over tokens, then straight-through sign in train mode.

    Accepts (T, k) or (B, T, k); pooling is over the token axis.
    """
    _check_mode(mode)
    if hash_tokens.shape[-2] < 1:
        raise ArgumentError("pool_code needs at least one token")
    mean = hash_tokens.mean(dim=-2)
    if mode == "train":
        return ste_sign(mean)
    return mean


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ArgumentError(f"unknown mode {mode!r}, expected one of {MODES}")


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, W = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) / self.head_dim**0.5
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, T, W)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block: attention and a 4x GELU MLP, both residual."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width),
            nn.GELU(),
            nn.Linear(4 * width, width),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class VideoHashModel(nn.Module):
    """Encoder + hash layer + decoder over frame-feature sequences."""

    def __init__(self, cfg: ModelConfig, seed: int | None = None):
        super().__init__()
        self.cfg = cfg

        self.in_proj = nn.Linear(cfg.feature_dim, cfg.enc_width)
        self.enc_pos = nn.Parameter(torch.zeros(cfg.max_frames, cfg.enc_width))
        self.enc_blocks = nn.ModuleList(
            Block(cfg.enc_width, cfg.enc_heads) for _ in range(cfg.enc_depth)
        )
        self.enc_norm = nn.LayerNorm(cfg.enc_width)
        self.hash_head = nn.Linear(cfg.enc_width, cfg.code_length)

        self.dec_in = nn.Linear(cfg.code_length, cfg.dec_width)
        self.mask_token = nn.Parameter(torch.zeros(cfg.dec_width))
        self.dec_pos = nn.Parameter(torch.zeros(cfg.max_frames, cfg.dec_width))
        self.dec_blocks = nn.ModuleList(
            Block(cfg.dec_width, cfg.dec_heads) for _ in range(cfg.dec_depth)
        )
        self.dec_norm = nn.LayerNorm(cfg.dec_width)
        self.out_proj = nn.Linear(cfg.dec_width, cfg.feature_dim)

        if seed is not None:
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                self._init_weights()
        else:
            self._init_weights()

    def _init_weights(self):
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=0.02)
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
        nn.init.trunc_normal_(self.enc_pos, std=0.02)
        nn.init.trunc_normal_(self.dec_pos, std=0.02)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    @property
    def dtype(self) -> torch.dtype:
        return self.in_proj.weight.dtype

    def _as_batch(self, frames, positions):
        """Normalize inputs to (B, T, d) frames and (B, T) long positions."""
        frames = _to_tensor(frames, self.dtype)
        positions = _to_tensor(positions, torch.long)
        single = frames.dim() == 2
        if single:
            frames = frames.unsqueeze(0)
            positions = positions.unsqueeze(0)
        if frames.dim() != 3:
            raise ArgumentError(f"frames must be (T, d) or (B, T, d), got {tuple(frames.shape)}")
        if frames.shape[-1] != self.cfg.feature_dim:
            raise ArgumentError(
                f"frames have dim {frames.shape[-1]}, model expects {self.cfg.feature_dim}"
            )
        if positions.shape != frames.shape[:2]:
            raise ArgumentError(
                f"positions shape {tuple(positions.shape)} does not match frames "
                f"{tuple(frames.shape[:2])}"
            )
        if positions.numel() and (positions.min() < 0 or positions.max() >= self.cfg.max_frames):
            raise ArgumentError(
                f"positions must lie in [0, {self.cfg.max_frames}), got "
                f"[{int(positions.min())}, {int(positions.max())}]"
            )
        return frames, positions, single

    def embed_frames(self, frames, positions) -> torch.Tensor:
        """Linear projection plus positional embedding at original indices."""
        frames, positions, single = self._as_batch(frames, positions)
        tokens = self.in_proj(frames) + self.enc_pos[positions]
        return tokens.squeeze(0) if single else tokens

    def encode(self, frames, positions, mode: str = "train") -> EncoderOutput:
        """Run the encoder and hash layer over a frame subset.

        In train mode hash tokens and the pooled code pass through the
        straight-through sign; smooth_test skips binarization entirely.
        """
        _check_mode(mode)
        frames, positions, single = self._as_batch(frames, positions)
        if frames.shape[1] < 1:
            raise ArgumentError("encode needs a non-empty frame subset")
        x = self.in_proj(frames) + self.enc_pos[positions]
        for block in self.enc_blocks:
            x = block(x)
        latents = self.enc_norm(x)
        tokens = torch.tanh(self.hash_head(latents))
        if mode == "train":
            tokens = ste_sign(tokens)
        code = pool_code(tokens, mode)
        if single:
            return EncoderOutput(latents[0], tokens[0], code[0])
        return EncoderOutput(latents, tokens, code)

    def decode(self, hash_tokens, kept_positions) -> torch.Tensor:
        """Reconstruct features for all max_frames positions of each video.

        Kept positions carry the projected hash tokens; every other slot gets
        the shared learned mask token. Decoder positional embeddings are added
        at original frame indices.
        """
        tokens = _to_tensor(hash_tokens, self.dtype)
        positions = _to_tensor(kept_positions, torch.long)
        single = tokens.dim() == 2
        if single:
            tokens = tokens.unsqueeze(0)
            positions = positions.unsqueeze(0)
        if tokens.shape[-1] != self.cfg.code_length:
            raise ArgumentError(
                f"hash tokens have length {tokens.shape[-1]}, expected {self.cfg.code_length}"
            )
        if positions.shape != tokens.shape[:2]:
            raise ArgumentError(
                f"kept positions shape {tuple(positions.shape)} does not match "
                f"hash tokens {tuple(tokens.shape[:2])}"
            )
        M = self.cfg.max_frames
        if positions.numel() and (positions.min() < 0 or positions.max() >= M):
            raise ArgumentError(f"kept positions must lie in [0, {M})")

        B = tokens.shape[0]
        x = self.mask_token.expand(B, M, self.cfg.dec_width).clone()
        src = self.dec_in(tokens)
        x = x.scatter(1, positions.unsqueeze(-1).expand(-1, -1, self.cfg.dec_width), src)
        x = x + self.dec_pos.unsqueeze(0)
        for block in self.dec_blocks:
            x = block(x)
        out = self.out_proj(self.dec_norm(x))
        return out.squeeze(0) if single else out

    def inference_code(self, full_frames) -> np.ndarray:
        """Binary code(s) for full unmasked videos; (k,) int8 or (B, k) int8."""
        frames = np.asarray(full_frames, dtype=np.float32)
        single = frames.ndim == 2
        if single:
            frames = frames[None]
        B, M, _ = frames.shape
        if M < 1:
            raise ArgumentError("inference needs at least one frame")
        positions = np.tile(np.arange(M), (B, 1))
        with torch.no_grad():
            out = self.encode(frames, positions, mode="train")
        codes = out.video_code.to(torch.int8).numpy()
        return codes[0] if single else codes


def save_checkpoint(model: VideoHashModel, path) -> None:
    """Write config JSON plus named float32 parameter tensors to one file."""
    config_bytes = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    state = model.state_dict()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(config_bytes)))
        f.write(config_bytes)
        f.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            encoded = name.encode()
            data = tensor.detach().to(torch.float32).numpy().astype("<f4")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path) -> VideoHashModel:
    """Rebuild a model from :func:`save_checkpoint` output."""
    with open(path, "rb") as f:
        raw = f.read()
    view = memoryview(raw)
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(raw):
            raise FormatError(f"{path}: truncated while reading {what}")
        chunk = view[off : off + n]
        off += n
        return chunk

    magic = bytes(take(4, "magic"))
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    try:
        cfg_dict = json.loads(bytes(take(cfg_len, "config")))
        cfg = ModelConfig(**cfg_dict)
    except (json.JSONDecodeError, TypeError) as exc:
        raise FormatError(f"{path}: invalid config document: {exc}") from exc

    model = VideoHashModel(cfg, seed=0)
    state = model.state_dict()
    (n_tensors,) = struct.unpack("<I", take(4, "tensor count"))
    if n_tensors != len(state):
        raise FormatError(
            f"{path}: tensor count {n_tensors} does not match model ({len(state)})"
        )
    loaded = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", take(2, "tensor name length"))
        name = bytes(take(name_len, "tensor name")).decode()
        if name not in state:
            raise FormatError(f"{path}: unknown tensor {name!r}")
        (ndim,) = struct.unpack("<B", take(1, f"{name} ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} shape"))
        expected = tuple(state[name].shape)
        if shape != expected:
            raise FormatError(f"{path}: tensor {name!r} has shape {shape}, expected {expected}")
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * count, f"{name} data"), dtype="<f4").reshape(shape)
        loaded[name] = torch.from_numpy(arr.astype(np.float32))
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes after tensors")
    if set(loaded) != set(state):
        missing = sorted(set(state) - set(loaded))
        raise FormatError(f"{path}: missing tensors {missing}")
    model.load_state_dict(loaded)
    return model
