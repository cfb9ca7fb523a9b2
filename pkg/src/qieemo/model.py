"""Full-model assembly: encoder plus fusion head, with ablation variants.

Variants mirror the ablation experiments: "full" runs weighted block fusion
and both cross-attention stages; "no_cma" bypasses cross-attention (the fused
emotion tokens go straight to the classifier); "no_mmf" skips block fusion and
pools the final block's features directly into tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import tensor as T
from .encoder import (BlockOutputs, EncoderConfig, Spectrogram, backbone_config,
                      encoder_forward, init_encoder_params)
from .errors import ConfigError
from .fusion import (EmotionTokens, FusionConfig, classify_logits, cma_forward,
                     init_fusion_params, mmf_forward)
from .params import ParamStore
from .rng import stream_for
from .tensor import Tensor

VARIANTS = ("full", "no_cma", "no_mmf")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    variant: str = "full"

    def validate(self) -> None:
        self.encoder.validate()
        self.fusion.validate()
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.fusion.model_dim != self.encoder.model_dim:
            raise ConfigError(
                f"fusion model_dim {self.fusion.model_dim} != encoder model_dim "
                f"{self.encoder.model_dim}")
        if self.variant == "no_cma" and self.fusion.fuse_count > self.encoder.num_blocks:
            raise ConfigError("fuse_count exceeds encoder depth")

    def with_variant(self, variant: str) -> "ModelConfig":
        return ModelConfig(encoder=self.encoder, fusion=self.fusion, variant=variant)


def desk_config(backbone: int = 1, variant: str = "full") -> ModelConfig:
    """The default desk-scale model: d=64, 12 blocks, 4 heads."""
    return ModelConfig(encoder=backbone_config(backbone), fusion=FusionConfig(),
                       variant=variant)


def init_fusion_for_variant(config: ModelConfig, gen, store=None) -> ParamStore:
    return init_fusion_params(
        config.fusion, gen, store=store,
        include_mmf=config.variant != "no_mmf",
        include_cma=config.variant != "no_cma")


def init_model_params(config: ModelConfig, seed: int) -> ParamStore:
    """Seed-deterministic fresh parameters for encoder and fusion head."""
    config.validate()
    store = init_encoder_params(config.encoder, stream_for(seed, "init", "encoder"))
    init_fusion_for_variant(config, stream_for(seed, "init", "fusion"), store=store)
    return store


def fusion_features(blocks: BlockOutputs, params: ParamStore,
                    config: ModelConfig) -> Tensor:
    """Token-level features entering the classifier, per the active variant."""
    if config.variant == "no_mmf":
        tokens = EmotionTokens(T.segment_mean(blocks.final, config.fusion.num_tokens))
    else:
        tokens = mmf_forward(blocks, params, config.fusion)
    if config.variant == "no_cma":
        return tokens.values
    return cma_forward(tokens, blocks.final, params, config.fusion).second_stage


def emotion_logits(spec: Spectrogram, params: ParamStore, config: ModelConfig) -> Tensor:
    """Spectrogram to four emotion logits."""
    blocks = encoder_forward(spec, config.encoder, params)
    return classify_logits(fusion_features(blocks, params, config), params)
