"""Conformer encoder: stacked blocks with optional progressive down-sampling.

Each block applies, in order, a half-residual feed-forward module, full-residual
multi-head self-attention, a full-residual convolution module, a second
half-residual feed-forward module, and a closing layer norm. Down-sampling
(stride-2 temporal conv + swish) sits between designated blocks; every block's
output sequence is collected so later stages can fuse arbitrary depths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .params import ParamStore, uniform_init
from .rng import Xoshiro256StarStar
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    num_blocks: int = 12
    model_dim: int = 64
    num_heads: int = 4
    ffn_expansion: int = 4
    conv_kernel: int = 7
    downsample_after: tuple[int, ...] = (4, 8)
    num_symbols: int = 12
    input_bins: int = 40
    eps: float = 1e-5

    def validate(self) -> None:
        if self.num_blocks < 1:
            raise ConfigError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        for i in self.downsample_after:
            if not 1 <= i < self.num_blocks:
                raise ConfigError(
                    f"downsample index {i} outside [1, {self.num_blocks})")
        if len(set(self.downsample_after)) != len(self.downsample_after):
            raise ConfigError("duplicate downsample indices")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")

    @property
    def min_frames(self) -> int:
        return 2 ** len(self.downsample_after) * 2


def backbone_config(kind: int, **overrides) -> EncoderConfig:
    """Backbone 1 halves time after blocks 4 and 8; backbone 2 never does."""
    if kind == 1:
        return EncoderConfig(downsample_after=(4, 8), **overrides)
    if kind == 2:
        return EncoderConfig(downsample_after=(), **overrides)
    raise ConfigError(f"backbone must be 1 or 2, got {kind}")


@dataclass
class Spectrogram:
    """Synthetic log-energy features, one row per frame."""

    values: Tensor

    def __post_init__(self):
        if self.values.data.ndim != 2:
            raise InputError(f"spectrogram must be 2-d, got shape {self.values.shape}")
        if self.values.shape[0] < 4:
            raise InputError(f"spectrogram needs at least 4 frames, got {self.values.shape[0]}")
        if not np.isfinite(self.values.data).all():
            raise InputError("spectrogram contains non-finite values")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]


@dataclass
class BlockOutputs:
    """Every block's output sequence plus the input projection."""

    projected: Tensor
    blocks: list[Tensor] = field(default_factory=list)

    @property
    def final(self) -> Tensor:
        """The last block's features (the PPG-like sequence fed to fusion)."""
        return self.blocks[-1]

    def frame_counts(self) -> list[int]:
        return [b.shape[0] for b in self.blocks]


def temporal_schedule(config: EncoderConfig, frames: int) -> list[int]:
    """Per-block output length as a pure function of the config."""
    out, t = [], frames
    downs = set(config.downsample_after)
    for i in range(1, config.num_blocks + 1):
        out.append(t)
        if i in downs:
            t = (t + 1) // 2
    return out


def frame_index_map(config: EncoderConfig, frames: int) -> list[np.ndarray]:
    """For each block, the original frame index carried by each output position.

    Stride-2 down-sampling keeps the even positions (conv centers), so labels
    can be subsampled with exactly the same mapping as the features.
    """
    out, idx = [], np.arange(frames)
    downs = set(config.downsample_after)
    for i in range(1, config.num_blocks + 1):
        out.append(idx)
        if i in downs:
            idx = idx[::2]
    return out


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------

def _linear(store, gen, prefix, d_in, d_out):
    store.add(prefix + ".weight", Tensor(uniform_init(gen, (d_in, d_out), d_in)))
    store.add(prefix + ".bias", Tensor(np.zeros(d_out)))


def _norm(store, prefix, d):
    store.add(prefix + ".gamma", Tensor(np.ones(d)))
    store.add(prefix + ".beta", Tensor(np.zeros(d)))


def init_encoder_params(config: EncoderConfig, gen: Xoshiro256StarStar,
                        store: ParamStore | None = None) -> ParamStore:
    """Fresh encoder parameters under the "encoder." prefix."""
    config.validate()
    if store is None:
        store = ParamStore()
    d = config.model_dim
    e = config.ffn_expansion * d
    _linear(store, gen, "encoder.input_proj", config.input_bins, d)
    for i in range(1, config.num_blocks + 1):
        p = f"encoder.block_{i:02d}"
        for ffn in ("ffn1", "ffn2"):
            _norm(store, f"{p}.{ffn}.norm", d)
            _linear(store, gen, f"{p}.{ffn}.in", d, e)
            _linear(store, gen, f"{p}.{ffn}.out", e, d)
        _norm(store, f"{p}.mhsa.norm", d)
        for proj in ("q", "k", "v", "out"):
            _linear(store, gen, f"{p}.mhsa.{proj}", d, d)
        _norm(store, f"{p}.conv.norm", d)
        _linear(store, gen, f"{p}.conv.pw1", d, 2 * d)
        store.add(f"{p}.conv.dw.kernel",
                  Tensor(uniform_init(gen, (d, config.conv_kernel), config.conv_kernel)))
        _norm(store, f"{p}.conv.midnorm", d)
        _linear(store, gen, f"{p}.conv.pw2", d, d)
        _norm(store, f"{p}.final_norm", d)
    for i in sorted(config.downsample_after):
        p = f"encoder.downsample_{i:02d}"
        store.add(p + ".kernel", Tensor(uniform_init(gen, (d, d, 3), 3 * d)))
        store.add(p + ".bias", Tensor(np.zeros(d)))
    return store


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _affine(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    return T.affine(x, params[prefix + ".weight"], params[prefix + ".bias"])


def ffn_half_step(x: Tensor, params: ParamStore, prefix: str, eps: float = 1e-5) -> Tensor:
    """Half-residual feed-forward: x + FFN(x)/2 with an internal pre-norm."""
    h = T.layer_norm(x, params[prefix + ".norm.gamma"], params[prefix + ".norm.beta"], eps)
    h = _affine(h, params, prefix + ".in")
    h = T.swish(h)
    h = _affine(h, params, prefix + ".out")
    return T.add(x, T.smul(h, 0.5))


def mhsa_step(x: Tensor, params: ParamStore, prefix: str, num_heads: int,
              eps: float = 1e-5, with_attention: bool = False):
    """Full-residual multi-head self-attention with an internal pre-norm."""
    t, d = x.shape
    if d % num_heads != 0:
        raise ConfigError(f"model dim {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    h = T.layer_norm(x, params[prefix + ".norm.gamma"], params[prefix + ".norm.beta"], eps)
    q = _affine(h, params, prefix + ".q")
    k = _affine(h, params, prefix + ".k")
    v = _affine(h, params, prefix + ".v")
    heads, maps = [], []
    inv_scale = 1.0 / math.sqrt(dh)
    for i in range(num_heads):
        lo, hi = i * dh, (i + 1) * dh
        qi, ki, vi = (T.col_slice(m, lo, hi) for m in (q, k, v))
        scores = T.smul(T.matmul(qi, T.transpose(ki)), inv_scale)
        attn = T.softmax(scores)
        heads.append(T.matmul(attn, vi))
        maps.append(attn)
    out = _affine(T.concat_last(heads), params, prefix + ".out")
    result = T.add(x, out)
    if with_attention:
        return result, maps
    return result


def conv_step(x: Tensor, params: ParamStore, prefix: str, eps: float = 1e-5) -> Tensor:
    """Full-residual convolution module: pointwise expand, GLU gate, depthwise
    k-tap conv, layer norm, swish, pointwise project back."""
    h = T.layer_norm(x, params[prefix + ".norm.gamma"], params[prefix + ".norm.beta"], eps)
    h = _affine(h, params, prefix + ".pw1")
    h = T.glu(h)
    h = T.depthwise_conv1d(h, params[prefix + ".dw.kernel"])
    h = T.layer_norm(h, params[prefix + ".midnorm.gamma"], params[prefix + ".midnorm.beta"], eps)
    h = T.swish(h)
    h = _affine(h, params, prefix + ".pw2")
    return T.add(x, h)


def block_forward(x: Tensor, params: ParamStore, prefix: str, config: EncoderConfig) -> Tensor:
    """One conformer block: macaron FFN halves around MHSA and conv, then norm."""
    h = ffn_half_step(x, params, prefix + ".ffn1", config.eps)
    h = mhsa_step(h, params, prefix + ".mhsa", config.num_heads, config.eps)
    h = conv_step(h, params, prefix + ".conv", config.eps)
    h = ffn_half_step(h, params, prefix + ".ffn2", config.eps)
    return T.layer_norm(h, params[prefix + ".final_norm.gamma"],
                        params[prefix + ".final_norm.beta"], config.eps)


def downsample_step(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    """Halve the temporal length: stride-2 kernel-3 conv, then swish."""
    if x.shape[0] < 2:
        raise InputError(f"cannot downsample {x.shape[0]} frames")
    h = T.conv1d_strided(x, params[prefix + ".kernel"], params[prefix + ".bias"], stride=2)
    return T.swish(h)


def encoder_forward(spec: Spectrogram, config: EncoderConfig,
                    params: ParamStore) -> BlockOutputs:
    """Project the spectrogram and run every block, collecting each output."""
    config.validate()
    if spec.frames < config.min_frames:
        raise InputError(
            f"utterance has {spec.frames} frames; this encoder needs at least "
            f"{config.min_frames}")
    if spec.bins != config.input_bins:
        raise InputError(f"expected {config.input_bins} bins, got {spec.bins}")
    x = _affine(spec.values, params, "encoder.input_proj")
    outputs = BlockOutputs(projected=x)
    downs = set(config.downsample_after)
    for i in range(1, config.num_blocks + 1):
        x = block_forward(x, params, f"encoder.block_{i:02d}", config)
        outputs.blocks.append(x)
        if i in downs:
            x = downsample_step(x, params, f"encoder.downsample_{i:02d}")
    return outputs
