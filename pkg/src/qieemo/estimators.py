"""Scikit-learn compatible wrappers around the training pipeline.

Two estimators cover the workflow: SymbolPretrainer fits the encoder on
frame-symbol sequences (and doubles as a feature transformer over any chosen
block), and QieemoClassifier fine-tunes the full fusion pipeline on emotion
labels, optionally warm-starting from a pretrainer or checkpoint file. Both
follow sklearn conventions: constructor arguments are stored untouched,
fitting populates trailing-underscore attributes, and get_params/set_params
come from BaseEstimator so the objects clone and grid-search cleanly.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from .checkpoint import Checkpoint, load_checkpoint
from .data import Utterance
from .encoder import EncoderConfig, Spectrogram, encoder_forward
from .errors import InputError
from .fusion import FusionConfig, NUM_CLASSES
from .model import ModelConfig, emotion_logits, init_model_params
from .params import no_grad
from .tensor import Tensor, softmax
from .training import TrainConfig, model_config_from_dict, stage1_pretrain, stage2_finetune


def _as_utterances(spectrograms, emotions=None, symbols=None) -> list[Utterance]:
    n = len(spectrograms)
    utts = []
    for i in range(n):
        utts.append(Utterance(
            id=f"sample_{i:06d}",
            spectrogram=spectrograms[i],
            frame_symbols=(symbols[i] if symbols is not None
                           else np.zeros(spectrograms[i].shape[0], dtype=np.int64)),
            emotion=int(emotions[i]) if emotions is not None else 0,
            speaker=i % 10))
    return utts


def _resolve_checkpoint(source) -> Checkpoint | None:
    if source is None:
        return None
    if isinstance(source, Checkpoint):
        return source
    if isinstance(source, SymbolPretrainer):
        return source.checkpoint_
    return load_checkpoint(source)


class SymbolPretrainer(BaseEstimator, TransformerMixin):
    """Fit the conformer encoder on per-frame symbol sequences.

    After fitting, transform(X) returns mean-pooled features from
    feature_block (default: the final block), so frozen-feature probes are a
    matter of piping into any downstream sklearn classifier.

    Parameters mirror the encoder configuration; backbone 1 halves the frame
    rate after blocks 4 and 8, backbone 2 keeps it constant.
    """

    def __init__(self, backbone=1, num_blocks=12, model_dim=64, num_heads=4,
                 ffn_expansion=4, conv_kernel=7, num_symbols=12, input_bins=40,
                 epochs=5, batch_size=16, learning_rate=None, seed=0,
                 validation_fold=None, stop_at_accuracy=None, feature_block=None):
        self.backbone = backbone
        self.num_blocks = num_blocks
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.ffn_expansion = ffn_expansion
        self.conv_kernel = conv_kernel
        self.num_symbols = num_symbols
        self.input_bins = input_bins
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.validation_fold = validation_fold
        self.stop_at_accuracy = stop_at_accuracy
        self.feature_block = feature_block

    def _encoder_config(self) -> EncoderConfig:
        downsample = (4, 8) if self.backbone == 1 else ()
        return EncoderConfig(num_blocks=self.num_blocks, model_dim=self.model_dim,
                             num_heads=self.num_heads, ffn_expansion=self.ffn_expansion,
                             conv_kernel=self.conv_kernel, downsample_after=downsample,
                             num_symbols=self.num_symbols, input_bins=self.input_bins)

    def fit(self, X, y):
        from .validation import check_spectrogram_list, check_symbol_sequences
        specs = check_spectrogram_list(X, bins=self.input_bins)
        seqs = check_symbol_sequences(y, specs, self.num_symbols)
        utts = _as_utterances(specs, symbols=seqs)
        config = TrainConfig(
            model=ModelConfig(encoder=self._encoder_config(),
                              fusion=FusionConfig(model_dim=self.model_dim,
                                                  attention_dim=self.model_dim)),
            epochs=self.epochs, batch_size=self.batch_size, lr=self.learning_rate,
            seed=self.seed, fold=self.validation_fold,
            stop_at_accuracy=self.stop_at_accuracy)
        self.checkpoint_ = stage1_pretrain(utts, config)
        self.frame_accuracy_ = self.checkpoint_.metadata["frame_symbol_accuracy"]
        self.n_features_in_ = self.input_bins
        return self

    def transform(self, X):
        """Mean-pooled features of the chosen block, shape [n_samples, model_dim]."""
        if not hasattr(self, "checkpoint_"):
            raise InputError("SymbolPretrainer is not fitted yet")
        from .validation import check_spectrogram_list
        specs = check_spectrogram_list(X, bins=self.input_bins)
        enc = self._encoder_config()
        block = self.feature_block or enc.num_blocks
        if not 1 <= block <= enc.num_blocks:
            raise InputError(f"feature_block {block} outside [1, {enc.num_blocks}]")
        params = self.checkpoint_.params
        rows = []
        with no_grad(params):
            for spec in specs:
                outs = encoder_forward(Spectrogram(Tensor(spec)), enc, params)
                rows.append(outs.blocks[block - 1].data.mean(axis=0))
        return np.stack(rows)


class QieemoClassifier(BaseEstimator, ClassifierMixin):
    """Four-class emotion classifier over spectrogram sequences.

    fit(X, y) runs the joint fine-tuning stage; pass `pretrained` (a fitted
    SymbolPretrainer, a Checkpoint, or a checkpoint path) to start from a
    pretrained encoder instead of random initialization. `variant` selects the
    ablation wiring: "full", "no_cma", or "no_mmf".
    """

    def __init__(self, backbone=1, variant="full", num_blocks=12, model_dim=64,
                 num_heads=4, ffn_expansion=4, conv_kernel=7, input_bins=40,
                 fuse_count=6, num_tokens=8, attention_dim=None, hidden_dim=256,
                 epochs=5, batch_size=16, learning_rate=None, seed=0,
                 pretrained=None, freeze=(), validation_fold=None, patience=0,
                 stop_at_accuracy=None):
        self.backbone = backbone
        self.variant = variant
        self.num_blocks = num_blocks
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.ffn_expansion = ffn_expansion
        self.conv_kernel = conv_kernel
        self.input_bins = input_bins
        self.fuse_count = fuse_count
        self.num_tokens = num_tokens
        self.attention_dim = attention_dim
        self.hidden_dim = hidden_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.pretrained = pretrained
        self.freeze = freeze
        self.validation_fold = validation_fold
        self.patience = patience
        self.stop_at_accuracy = stop_at_accuracy

    def _model_config(self) -> ModelConfig:
        downsample = (4, 8) if self.backbone == 1 else ()
        enc = EncoderConfig(num_blocks=self.num_blocks, model_dim=self.model_dim,
                            num_heads=self.num_heads, ffn_expansion=self.ffn_expansion,
                            conv_kernel=self.conv_kernel, downsample_after=downsample,
                            input_bins=self.input_bins)
        fus = FusionConfig(fuse_count=self.fuse_count, num_tokens=self.num_tokens,
                           model_dim=self.model_dim,
                           attention_dim=self.attention_dim or self.model_dim,
                           hidden_dim=self.hidden_dim)
        return ModelConfig(encoder=enc, fusion=fus, variant=self.variant)

    def fit(self, X, y):
        from .validation import check_emotion_labels, check_spectrogram_list
        specs = check_spectrogram_list(X, bins=self.input_bins)
        labels = check_emotion_labels(y, len(specs))
        utts = _as_utterances(specs, emotions=labels)
        model = self._model_config()
        model.validate()
        init = _resolve_checkpoint(self.pretrained)
        if init is None:
            # random-init encoder wrapped as a synthetic stage-0 checkpoint
            fresh = init_model_params(model, self.seed)
            enc_only = type(fresh)()
            for path, t in fresh.items():
                if path.startswith("encoder."):
                    enc_only.add(path, Tensor(t.data.copy()))
            init = Checkpoint(params=enc_only, metadata={"stage": 0, "seed": self.seed})
        config = TrainConfig(model=model, epochs=self.epochs, batch_size=self.batch_size,
                             lr=self.learning_rate, seed=self.seed,
                             fold=self.validation_fold,
                             freeze_prefixes=tuple(self.freeze), patience=self.patience,
                             stop_at_accuracy=self.stop_at_accuracy)
        self.checkpoint_ = stage2_finetune(init, utts, config)
        self.classes_ = np.arange(NUM_CLASSES)
        self.history_ = self.checkpoint_.metadata["history"]
        self.n_features_in_ = self.input_bins
        return self

    def _logits(self, X) -> np.ndarray:
        if not hasattr(self, "checkpoint_"):
            raise InputError("QieemoClassifier is not fitted yet")
        from .validation import check_spectrogram_list
        specs = check_spectrogram_list(X, bins=self.input_bins)
        model = model_config_from_dict(self.checkpoint_.metadata["model_config"])
        params = self.checkpoint_.params
        rows = []
        with no_grad(params):
            for spec in specs:
                logits = emotion_logits(Spectrogram(Tensor(spec)), params, model)
                rows.append(logits.data.copy())
        return np.stack(rows)

    def decision_function(self, X) -> np.ndarray:
        return self._logits(X)

    def predict_proba(self, X) -> np.ndarray:
        return softmax(Tensor(self._logits(X))).data

    def predict(self, X) -> np.ndarray:
        return self._logits(X).argmax(axis=1)
