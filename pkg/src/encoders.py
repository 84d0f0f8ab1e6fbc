"""Deterministic stand-in text encoder and the reference frame encoder."""

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
from einops import rearrange

from .config import config
from .numerics import DimensionError, Tensor, as_tensor, conv2d, matmul, silu
from .plan import Box, RegionMask, full_mask

NULL_TOKEN = "<null>"


class EncodingError(ValueError):
    """Raised when an encoder receives invalid input."""
    pass


@dataclass(frozen=True, eq=False)
class TextEmbedding:
    """Per-token embedding matrix of a prompt."""
    tokens: int
    dim: int
    values: Tensor = field(repr=False)


def _token_hash(token: str) -> int:
    """Stable 64-bit hash of a token."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def token_vector(token: str, dim: int, vocab_seed: int) -> np.ndarray:
    """Unit-norm pseudo-random vector for one token."""
    key = (vocab_seed << 64) | _token_hash(token)
    rng = np.random.Generator(np.random.Philox(key=key))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


@lru_cache(maxsize=4096)
def _encode_cached(prompt: str, dim: int, vocab_seed: int) -> TextEmbedding:
    tokens = prompt.split()
    values = as_tensor(np.stack([token_vector(t, dim, vocab_seed) for t in tokens]))
    values.flags.writeable = False
    return TextEmbedding(tokens=len(tokens), dim=dim, values=values)


def encode_text(prompt: str, dim: int = None, vocab_seed: int = None) -> TextEmbedding:
    """
    Embed a prompt with whitespace tokenization and hashed token vectors.

    Args:
        prompt: Nonempty prompt text
        dim: Embedding dimension (default from config)
        vocab_seed: Seed mixed into every token hash (default from config)

    Returns:
        TextEmbedding of shape [tokens, dim]; identical prompts give identical values

    Raises:
        EncodingError: If the prompt holds no tokens
    """
    dim = config.text.dim if dim is None else dim
    vocab_seed = config.text.vocab_seed if vocab_seed is None else vocab_seed
    if not prompt or not prompt.split():
        raise EncodingError("prompt must contain at least one token")
    if dim < 1:
        raise EncodingError(f"embedding dim must be >= 1, got {dim}")
    return _encode_cached(prompt, dim, vocab_seed)


def null_embedding(dim: int = None, vocab_seed: int = None) -> TextEmbedding:
    """Single-token embedding used by the unconditional (empty prompt) branch."""
    return encode_text(NULL_TOKEN, dim, vocab_seed)


# ==================== Reference frames ====================

def _init_weight(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Tensor:
    return as_tensor(rng.standard_normal(shape) / np.sqrt(fan_in))


def _activate(x: Tensor, name: str) -> Tensor:
    if name == "silu":
        return silu(x)
    if name == "identity":
        return x
    raise EncodingError(f"unknown activation '{name}'")


@dataclass(frozen=True, eq=False)
class ReferenceEncoder:
    """Conv (4 -> 320, 3x3, padding 1) followed by a one-hidden-layer MLP (320 -> 320 -> 1024)."""
    conv_weight: Tensor = field(repr=False)
    conv_bias: Tensor = field(repr=False)
    hidden_weight: Tensor = field(repr=False)
    hidden_bias: Tensor = field(repr=False)
    out_weight: Tensor = field(repr=False)
    out_bias: Tensor = field(repr=False)
    padding: int = 1
    activation: str = "silu"
    conv_activation: str = "identity"

    @property
    def in_channels(self) -> int:
        return self.conv_weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.out_weight.shape[1]

    @classmethod
    def from_seed(cls, seed: int, activation: str = None) -> "ReferenceEncoder":
        """Seeded weights with the configured layer dimensions."""
        ref = config.reference
        rng = np.random.Generator(np.random.Philox(key=seed + 0x5EF))
        k = ref.kernel_size
        fan_conv = ref.in_channels * k * k
        return cls(
            conv_weight=_init_weight(rng, (ref.conv_channels, ref.in_channels, k, k), fan_conv),
            conv_bias=_init_weight(rng, (ref.conv_channels,), fan_conv),
            hidden_weight=_init_weight(rng, (ref.conv_channels, ref.mlp_hidden), ref.conv_channels),
            hidden_bias=_init_weight(rng, (ref.mlp_hidden,), ref.conv_channels),
            out_weight=_init_weight(rng, (ref.mlp_hidden, ref.out_dim), ref.mlp_hidden),
            out_bias=_init_weight(rng, (ref.out_dim,), ref.mlp_hidden),
            padding=ref.padding,
            activation=activation or ref.activation,
            conv_activation=ref.conv_activation,
        )

    def project(self, features: Tensor) -> Tensor:
        """Per-position MLP over [positions, 320] conv features."""
        hidden = _activate(matmul(features, self.hidden_weight) + self.hidden_bias, self.activation)
        return as_tensor(matmul(hidden, self.out_weight) + self.out_bias)


@dataclass(frozen=True, eq=False)
class RefContext:
    """Encoded reference frames together with the region the object occupies in them."""
    x_ref: Tensor = field(repr=False)
    object_mask: RegionMask
    frame_span: Tuple[int, int]  # (k, l)
    box: Optional[Box] = None  # region of the object in the frames being generated
    prompt: Optional[str] = None

    @property
    def frames(self) -> int:
        return self.frame_span[1]

    def token_mask(self) -> np.ndarray:
        """Object mask repeated for every reference frame, frame-major."""
        return np.tile(self.object_mask.flat(), self.frames)


def encode_reference(
    frames: Tensor,
    enc: ReferenceEncoder,
    object_mask: Optional[RegionMask] = None,
    frame_start: int = 0,
    box: Optional[Box] = None,
    prompt: Optional[str] = None
) -> RefContext:
    """
    Encode reference latents into ``x_ref``.

    The frames are already 4-channel latents, so the autoencoder stage is the
    identity. Each frame is convolved, flattened and projected per position;
    tokens are ordered frame-major.

    Args:
        frames: Latents of shape [l, 4, h, w]
        enc: Reference encoder weights
        object_mask: Region of the object in the reference frames (default: full frame)
        frame_start: Index k of the first reference frame
        box: Region of the object in the frames conditioned on these references
        prompt: Sub-object prompt the references belong to

    Returns:
        RefContext with x_ref of shape [l*h*w, out_dim]

    Raises:
        DimensionError: If the input is not [l, in_channels, h, w]
    """
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[1] != enc.in_channels:
        raise DimensionError(
            f"reference frames must be [l, {enc.in_channels}, h, w], got {tuple(frames.shape)}"
        )
    l, _, h, w = frames.shape
    if object_mask is None:
        object_mask = full_mask(h, w)
    elif (object_mask.height, object_mask.width) != (h, w):
        raise DimensionError(
            f"object mask {object_mask.height}x{object_mask.width} does not match reference grid {h}x{w}"
        )

    tokens = []
    for frame in frames:
        feat = conv2d(frame, enc.conv_weight, padding=enc.padding, bias=enc.conv_bias)
        feat = _activate(feat, enc.conv_activation)
        tokens.append(enc.project(rearrange(feat, "c h w -> (h w) c")))
    x_ref = as_tensor(np.concatenate(tokens, axis=0))
    return RefContext(
        x_ref=x_ref,
        object_mask=object_mask,
        frame_span=(frame_start, l),
        box=box,
        prompt=prompt,
    )
