"""Fusion head: weighted multi-block fusion, two-stage cross-attention, classifier.

The fusion path turns the encoder's per-block sequences into a fixed number of
utterance-level emotion tokens (softmax-weighted channel stack of the trailing
blocks, fused by a 3x3 conv, then pooled into equal time segments), refines the
tokens with two chained scaled dot-product attentions against the final-block
features (tokens as queries, final block as keys and values), and classifies
the pooled result into the four emotion classes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import BlockOutputs
from .errors import ConfigError, DimensionError, InputError
from .params import ParamStore, uniform_init
from .rng import Xoshiro256StarStar
from .tensor import Tensor

NUM_CLASSES = 4
CLASS_NAMES = ("happy", "sad", "neutral", "angry")


@dataclass(frozen=True)
class FusionConfig:
    fuse_count: int = 6      # trailing encoder blocks fed into the fusion conv
    num_tokens: int = 8      # utterance-level emotion tokens
    model_dim: int = 64      # must match the encoder
    attention_dim: int = 64  # query/key/value projection width
    hidden_dim: int = 256    # classifier hidden layer

    def validate(self) -> None:
        if self.fuse_count < 1:
            raise ConfigError(f"fuse_count must be >= 1, got {self.fuse_count}")
        if self.num_tokens < 1:
            raise ConfigError(f"num_tokens must be >= 1, got {self.num_tokens}")
        if self.attention_dim < 1:
            raise ConfigError(f"attention_dim must be >= 1, got {self.attention_dim}")


@dataclass
class EmotionTokens:
    """Utterance-level emotional features, one row per token."""

    values: Tensor

    @property
    def count(self) -> int:
        return self.values.shape[0]


@dataclass
class CmaOutputs:
    """Both cross-attention stages plus their attention maps."""

    first_stage: Tensor    # [n, attention_dim]
    second_stage: Tensor   # [n, attention_dim]
    first_attention: Tensor   # [n, T]
    second_attention: Tensor  # [n, T]


def init_fusion_params(config: FusionConfig, gen: Xoshiro256StarStar,
                       store: ParamStore | None = None,
                       include_mmf: bool = True,
                       include_cma: bool = True) -> ParamStore:
    """Fresh fusion parameters; ablation variants skip whole sub-modules."""
    config.validate()
    if store is None:
        store = ParamStore()
    d, da = config.model_dim, config.attention_dim
    if include_mmf:
        store.add("mmf.block_logits", Tensor(np.zeros(config.fuse_count)))
        store.add("mmf.conv.kernel",
                  Tensor(uniform_init(gen, (1, config.fuse_count, 3, 3),
                                      9 * config.fuse_count)))
        store.add("mmf.conv.bias", Tensor(np.zeros(1)))
    if include_cma:
        for name in ("q", "k", "v"):
            store.add(f"cma.{name}.weight", Tensor(uniform_init(gen, (d, da), d)))
    cls_in = da if include_cma else d
    store.add("classifier.hidden.weight",
              Tensor(uniform_init(gen, (cls_in, config.hidden_dim), cls_in)))
    store.add("classifier.hidden.bias", Tensor(np.zeros(config.hidden_dim)))
    store.add("classifier.out.weight",
              Tensor(uniform_init(gen, (config.hidden_dim, NUM_CLASSES), config.hidden_dim)))
    store.add("classifier.out.bias", Tensor(np.zeros(NUM_CLASSES)))
    return store


def resample_to_length(x: Tensor, target_len: int) -> Tensor:
    """Nearest-index temporal resampling of [T, d] to [target_len, d]."""
    t = x.shape[0]
    if t == target_len:
        return x
    idx = (np.arange(target_len) * t) // target_len
    return T.take_rows(x, idx)


def mmf_forward(blocks: BlockOutputs, params: ParamStore,
                config: FusionConfig) -> EmotionTokens:
    """Fuse the trailing blocks into utterance-level emotion tokens.

    The last fuse_count block sequences are resampled to the final block's
    length, scaled by softmax-normalized learnable weights, stacked as conv
    channels, fused by a same-padded 3x3 conv down to one channel, and pooled
    over time into num_tokens equal segments.
    """
    k = config.fuse_count
    if k > len(blocks.blocks):
        raise ConfigError(
            f"cannot fuse {k} blocks; encoder only has {len(blocks.blocks)}")
    t_final = blocks.final.shape[0]
    if t_final < config.num_tokens:
        raise DimensionError(
            f"cannot pool {t_final} frames into {config.num_tokens} tokens")
    weights = T.softmax(params["mmf.block_logits"])
    scaled = []
    for i, block in enumerate(blocks.blocks[-k:]):
        resampled = resample_to_length(block, t_final)
        scaled.append(T.scale(resampled, T.index_scalar(weights, i)))
    stacked = T.stack0(scaled)  # [k, T_final, d]
    fused = T.conv2d(stacked, params["mmf.conv.kernel"], params["mmf.conv.bias"])
    fused = T.reshape(fused, (t_final, fused.shape[-1]))
    return EmotionTokens(T.segment_mean(fused, config.num_tokens))


def cma_forward(tokens: EmotionTokens, ppg: Tensor, params: ParamStore,
                config: FusionConfig) -> CmaOutputs:
    """Two chained scaled dot-product attentions: tokens query the final-block
    features twice, with a relu after each stage."""
    if ppg.shape[0] == 0:
        raise InputError("cross-attention needs at least one key frame")
    if ppg.shape[1] != config.model_dim or tokens.values.shape[1] != config.model_dim:
        raise DimensionError(
            f"feature width mismatch: tokens {tokens.values.shape}, keys {ppg.shape}, "
            f"expected dim {config.model_dim}")
    q = T.matmul(tokens.values, params["cma.q.weight"])
    k = T.matmul(ppg, params["cma.k.weight"])
    v = T.matmul(ppg, params["cma.v.weight"])
    inv_scale = 1.0 / math.sqrt(config.attention_dim)
    kt = T.transpose(k)
    attn1 = T.softmax(T.smul(T.matmul(q, kt), inv_scale))
    stage1 = T.relu(T.matmul(attn1, v))
    attn2 = T.softmax(T.smul(T.matmul(stage1, kt), inv_scale))
    stage2 = T.relu(T.matmul(attn2, v))
    return CmaOutputs(first_stage=stage1, second_stage=stage2,
                      first_attention=attn1, second_attention=attn2)


def classify_logits(features: Tensor, params: ParamStore) -> Tensor:
    """Mean-pool token features, one hidden relu layer, four logits."""
    pooled = T.reshape(T.mean_axis0(features), (1, features.shape[1]))
    hidden = T.relu(T.affine(pooled, params["classifier.hidden.weight"],
                             params["classifier.hidden.bias"]))
    logits = T.affine(hidden, params["classifier.out.weight"],
                      params["classifier.out.bias"])
    return T.reshape(logits, (NUM_CLASSES,))
