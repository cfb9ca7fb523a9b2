"""Two-stage training, per-block linear probes, and checkpoint evaluation.

Stage 1 trains the encoder plus a temporary per-frame symbol head on the
frame-symbol proxy task; fusion parameters do not exist in this stage's graph.
Stage 2 starts from a stage-1 checkpoint, adds freshly initialized fusion
parameters, and trains the whole pipeline on utterance emotion labels,
honoring freeze-path prefixes and keeping the epoch with the best held-out
unweighted accuracy (ties go to the earlier epoch). Probes train a small head
on frozen features from one chosen block.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, config_hash, save_checkpoint
from .data import CorpusSpec, ManifestRow, Utterance, manifest_rows, split_folds
from .encoder import (EncoderConfig, Spectrogram, encoder_forward, frame_index_map,
                      init_encoder_params)
from .errors import CheckpointError, ConfigError, DataError, InputError
from .fusion import NUM_CLASSES, classify_logits
from .metrics import EvalReport, compute_metrics, confusion_from_pairs
from .model import (ModelConfig, emotion_logits, fusion_features, init_fusion_for_variant)
from .params import Adam, FreezeMask, ParamStore, no_grad
from .rng import stream_for
from .tensor import Tensor, backward


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 5
    batch_size: int = 16
    lr: float | None = None        # stage default when None: 1e-3 / 5e-4 / 1e-2 probe
    seed: int = 0
    fold: int | None = 0           # None trains on everything (no held-out eval)
    freeze_prefixes: tuple[str, ...] = ()
    probe_block: int = 1
    probe_steps: int = 200
    probe_batch_frames: int = 2048
    patience: int = 0              # epochs without UA improvement before stopping
    stop_at_accuracy: float | None = None  # early exit once the tracked accuracy reaches this

    def resolved_lr(self, stage: str) -> float:
        if self.lr is not None:
            return self.lr
        return {"stage1": 1e-3, "stage2": 5e-4, "probe": 1e-2}[stage]


@dataclass
class TrainLog:
    lines: list[str] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def step(self, step: int, loss: float, lr: float) -> None:
        self.losses.append(loss)
        self.lines.append(f"{step}\t{loss:.6f}\t{lr:g}")

    def note(self, text: str) -> None:
        self.lines.append(f"# {text}")

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("step\tloss\tlr\n" + "\n".join(self.lines) + "\n")


def _split_corpus(utts: list[Utterance], fold: int | None):
    if not utts:
        raise DataError("empty corpus")
    manifest = manifest_rows(utts)
    if fold is None:
        return list(utts), []
    train_ids, test_ids = split_folds(manifest, fold)
    by_id = {u.id: u for u in utts}
    return [by_id[i] for i in train_ids], [by_id[i] for i in test_ids]


def _batches(items: list, batch_size: int, gen) -> list[list]:
    order = list(range(len(items)))
    gen.shuffle(order)
    return [[items[j] for j in order[i:i + batch_size]]
            for i in range(0, len(order), batch_size)]


def _encoder_config_of(config: ModelConfig) -> EncoderConfig:
    return config.encoder


# ---------------------------------------------------------------------------
# stage 1: frame-symbol pretraining
# ---------------------------------------------------------------------------

SYMBOL_HEAD_W = "symbol_head.weight"
SYMBOL_HEAD_B = "symbol_head.bias"


def _subsampled_labels(utt: Utterance, enc: EncoderConfig) -> np.ndarray:
    idx = frame_index_map(enc, utt.frames)[-1]
    return utt.frame_symbols[idx]


def _frame_logits(utt: Utterance, params: ParamStore, enc: EncoderConfig) -> Tensor:
    blocks = encoder_forward(Spectrogram(Tensor(utt.spectrogram)), enc, params)
    return T.affine(blocks.final, params[SYMBOL_HEAD_W], params[SYMBOL_HEAD_B])


def frame_symbol_accuracy(params: ParamStore, enc: EncoderConfig,
                          utts: list[Utterance]) -> float:
    hits = total = 0
    with no_grad(params):
        for utt in utts:
            pred = _frame_logits(utt, params, enc).data.argmax(axis=1)
            labels = _subsampled_labels(utt, enc)
            hits += int((pred == labels).sum())
            total += len(labels)
    return hits / total if total else 0.0


def stage1_pretrain(utts: list[Utterance], config: TrainConfig,
                    corpus_spec: CorpusSpec | None = None,
                    log: TrainLog | None = None) -> Checkpoint:
    """Train encoder + temporary symbol head; checkpoint keeps the encoder only."""
    enc = _encoder_config_of(config.model)
    enc.validate()
    if not utts:
        raise DataError("empty corpus")
    for u in utts:
        if u.frame_symbols is None or len(u.frame_symbols) != u.frames:
            raise DataError(f"utterance {u.id} lacks frame symbols")
    train, test = _split_corpus(utts, config.fold)
    log = log if log is not None else TrainLog()

    params = init_encoder_params(enc, stream_for(config.seed, "init", "encoder"))
    gen = stream_for(config.seed, "init", "symbol_head")
    params.add(SYMBOL_HEAD_W, Tensor(
        np.reshape((gen.uniforms(enc.model_dim * enc.num_symbols) * 2 - 1)
                   / np.sqrt(enc.model_dim),
                   (enc.model_dim, enc.num_symbols))))
    params.add(SYMBOL_HEAD_B, Tensor(np.zeros(enc.num_symbols)))
    freeze = FreezeMask.from_prefixes(params, config.freeze_prefixes)
    lr = config.resolved_lr("stage1")
    opt = Adam(params, lr=lr, freeze=freeze)

    leaves = params.tensors()
    step = 0
    accuracy = 0.0
    stopped = ""
    for epoch in range(config.epochs):
        for batch in _batches(train, config.batch_size,
                              stream_for(config.seed, "stage1_shuffle", epoch)):
            losses = [T.cross_entropy(_frame_logits(u, params, enc),
                                      _subsampled_labels(u, enc)) for u in batch]
            loss = T.smul(T.add_n(losses), 1.0 / len(losses))
            params.zero_grad()
            backward(loss, leaves=leaves)
            opt.step()
            step += 1
            log.step(step, loss.item(), lr)
        accuracy = frame_symbol_accuracy(params, enc, test or train)
        log.note(f"epoch {epoch + 1}: frame accuracy {accuracy:.4f}")
        if config.stop_at_accuracy is not None and accuracy >= config.stop_at_accuracy:
            stopped = f"reached {accuracy:.4f} at epoch {epoch + 1}"
            break

    encoder_only = ParamStore()
    for path, t in params.items():
        if path.startswith("encoder."):
            encoder_only.add(path, Tensor(t.data.copy()))
    meta = {
        "stage": 1,
        "seed": config.seed,
        "epochs_run": epoch + 1,
        "frame_symbol_accuracy": accuracy,
        "encoder_config": asdict(enc),
        "config_hash": config_hash(asdict(enc)),
        "corpus_hash": config_hash(asdict(corpus_spec)) if corpus_spec else "",
        "early_stop": stopped,
        "final_loss": log.losses[-1] if log.losses else None,
    }
    return Checkpoint(params=encoder_only, metadata=meta)


# ---------------------------------------------------------------------------
# stage 2: emotion fine-tuning
# ---------------------------------------------------------------------------

def _utterance_accuracy(utts: list[Utterance], params: ParamStore,
                        model: ModelConfig) -> float:
    hits = 0
    with no_grad(params):
        for u in utts:
            logits = emotion_logits(Spectrogram(Tensor(u.spectrogram)), params, model)
            hits += int(int(logits.data.argmax()) == u.emotion)
    return hits / len(utts) if utts else 0.0


def _evaluate_utts(utts: list[Utterance], params: ParamStore,
                   model: ModelConfig) -> EvalReport:
    true_labels, pred_labels = [], []
    with no_grad(params):
        for u in utts:
            logits = emotion_logits(Spectrogram(Tensor(u.spectrogram)), params, model)
            true_labels.append(u.emotion)
            pred_labels.append(int(logits.data.argmax()))
    return compute_metrics(confusion_from_pairs(true_labels, pred_labels))


def stage2_finetune(init: Checkpoint, utts: list[Utterance], config: TrainConfig,
                    corpus_spec: CorpusSpec | None = None,
                    log: TrainLog | None = None) -> Checkpoint:
    """Joint emotion training from a pretrained encoder; returns the best-UA epoch."""
    model = config.model
    model.validate()
    init.require_prefix("encoder.")
    train, test = _split_corpus(utts, config.fold)
    log = log if log is not None else TrainLog()

    params = ParamStore()
    for path, t in init.params.items():
        if path.startswith("encoder."):
            params.add(path, Tensor(t.data.copy()))
    init_fusion_for_variant(model, stream_for(config.seed, "init", "fusion"), store=params)
    freeze = FreezeMask.from_prefixes(params, config.freeze_prefixes)
    lr = config.resolved_lr("stage2")
    opt = Adam(params, lr=lr, freeze=freeze)

    leaves = params.tensors()
    best_ua, best_epoch, best_params = -1.0, -1, params.copy()
    epochs_since_best = 0
    step = 0
    history = []
    stopped = ""
    for epoch in range(config.epochs):
        for batch in _batches(train, config.batch_size,
                              stream_for(config.seed, "stage2_shuffle", epoch)):
            losses = []
            for u in batch:
                logits = emotion_logits(Spectrogram(Tensor(u.spectrogram)), params, model)
                losses.append(T.cross_entropy(T.reshape(logits, (1, NUM_CLASSES)),
                                              np.array([u.emotion])))
            loss = T.smul(T.add_n(losses), 1.0 / len(losses))
            params.zero_grad()
            backward(loss, leaves=leaves)
            opt.step()
            step += 1
            log.step(step, loss.item(), lr)
        if test:
            report = _evaluate_utts(test, params, model)
            history.append({"epoch": epoch + 1, "ua": report.ua, "wa": report.wa,
                            "wf1": report.wf1})
            log.note(f"epoch {epoch + 1}: heldout ua {report.ua:.4f} wa {report.wa:.4f}")
            if report.ua > best_ua:
                best_ua, best_epoch, best_params = report.ua, epoch + 1, params.copy()
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if config.patience and epochs_since_best >= config.patience:
                    stopped = f"no UA improvement for {config.patience} epochs"
                    break
        else:
            best_ua, best_epoch, best_params = -1.0, epoch + 1, params
        if config.stop_at_accuracy is not None:
            train_acc = _utterance_accuracy(train, params, model)
            history.append({"epoch": epoch + 1, "train_accuracy": train_acc})
            log.note(f"epoch {epoch + 1}: train accuracy {train_acc:.4f}")
            if train_acc >= config.stop_at_accuracy:
                stopped = f"train accuracy {train_acc:.4f} at step {step}"
                break

    if best_params is params:
        best_params = params.copy()
    meta = {
        "stage": 2,
        "seed": config.seed,
        "fold": config.fold,
        "variant": model.variant,
        "best_epoch": best_epoch,
        "best_ua": best_ua if test else None,
        "steps_run": step,
        "history": history,
        "model_config": model_config_dict(model),
        "config_hash": config_hash(model_config_dict(model)),
        "corpus_hash": config_hash(asdict(corpus_spec)) if corpus_spec else "",
        "early_stop": stopped,
        "freeze_prefixes": list(config.freeze_prefixes),
    }
    return Checkpoint(params=best_params, frozen={p: freeze.frozen(p)
                                                  for p in best_params.paths()},
                      metadata=meta)


def model_config_dict(model: ModelConfig) -> dict:
    return {"encoder": asdict(model.encoder), "fusion": asdict(model.fusion),
            "variant": model.variant}


def model_config_from_dict(payload: dict) -> ModelConfig:
    from .encoder import EncoderConfig as Enc
    from .fusion import FusionConfig as Fus
    enc = dict(payload["encoder"])
    enc["downsample_after"] = tuple(enc["downsample_after"])
    return ModelConfig(encoder=Enc(**enc), fusion=Fus(**payload["fusion"]),
                       variant=payload["variant"])


# ---------------------------------------------------------------------------
# per-block linear probe
# ---------------------------------------------------------------------------

def _block_features(utts: list[Utterance], params: ParamStore, enc: EncoderConfig,
                    block: int) -> list[np.ndarray]:
    feats = []
    with no_grad(params):
        for u in utts:
            blocks = encoder_forward(Spectrogram(Tensor(u.spectrogram)), enc, params)
            feats.append(blocks.blocks[block - 1].data.copy())
    return feats


def _train_probe_head(x_train: np.ndarray, y_train: np.ndarray, num_classes: int,
                      config: TrainConfig) -> ParamStore:
    d = x_train.shape[1]
    gen = stream_for(config.seed, "probe_head")
    head = ParamStore()
    head.add("w1", Tensor(np.reshape((gen.uniforms(d * 256) * 2 - 1) / np.sqrt(d), (d, 256))))
    head.add("b1", Tensor(np.zeros(256)))
    head.add("w2", Tensor(np.reshape((gen.uniforms(256 * num_classes) * 2 - 1) / 16.0,
                                     (256, num_classes))))
    head.add("b2", Tensor(np.zeros(num_classes)))
    opt = Adam(head, lr=config.resolved_lr("probe"))
    n = x_train.shape[0]
    batch = min(config.probe_batch_frames, n)
    order_gen = stream_for(config.seed, "probe_batches")
    for _ in range(config.probe_steps):
        if batch == n:
            idx = np.arange(n)
        else:
            idx = np.array([order_gen.randint(0, n - 1) for _ in range(batch)])
        xb, yb = Tensor(x_train[idx]), y_train[idx]
        hidden = T.relu(T.affine(xb, head["w1"], head["b1"]))
        logits = T.affine(hidden, head["w2"], head["b2"])
        loss = T.cross_entropy(logits, yb)
        head.zero_grad()
        backward(loss)
        opt.step()
    return head


def _probe_predict(head: ParamStore, x: np.ndarray) -> np.ndarray:
    hidden = np.maximum(x @ head["w1"].data + head["b1"].data, 0.0)
    return (hidden @ head["w2"].data + head["b2"].data).argmax(axis=1)


def linear_probe(ckpt: Checkpoint, utts: list[Utterance], block: int,
                 target: str, config: TrainConfig) -> EvalReport:
    """Freeze the encoder, train a 256-wide head on one block's features."""
    enc_dict = ckpt.metadata.get("encoder_config")
    if enc_dict is None:
        model_dict = ckpt.metadata.get("model_config")
        if model_dict is None:
            raise CheckpointError("checkpoint metadata lacks an encoder config")
        enc_dict = model_dict["encoder"]
    enc_dict = dict(enc_dict)
    enc_dict["downsample_after"] = tuple(enc_dict["downsample_after"])
    enc = EncoderConfig(**enc_dict)
    if not 1 <= block <= enc.num_blocks:
        raise InputError(f"probe block {block} outside [1, {enc.num_blocks}]")
    if target not in ("emotion", "symbols"):
        raise InputError(f"probe target must be 'emotion' or 'symbols', got {target!r}")
    ckpt.require_prefix("encoder.")

    train, test = _split_corpus(utts, config.fold)
    if not test:
        raise InputError("probe needs a held-out fold")
    feats_train = _block_features(train, ckpt.params, enc, block)
    feats_test = _block_features(test, ckpt.params, enc, block)

    if target == "emotion":
        x_train = np.stack([f.mean(axis=0) for f in feats_train])
        y_train = np.array([u.emotion for u in train])
        x_test = np.stack([f.mean(axis=0) for f in feats_test])
        y_test = np.array([u.emotion for u in test])
        num_classes = NUM_CLASSES
    else:
        idx_of = lambda u: frame_index_map(enc, u.frames)[block - 1]
        x_train = np.concatenate(feats_train)
        y_train = np.concatenate([u.frame_symbols[idx_of(u)] for u in train])
        x_test = np.concatenate(feats_test)
        y_test = np.concatenate([u.frame_symbols[idx_of(u)] for u in test])
        num_classes = enc.num_symbols
    head = _train_probe_head(x_train, y_train, num_classes, config)
    pred = _probe_predict(head, x_test)
    cm = confusion_from_pairs(y_test.tolist(), pred.tolist(), num_classes=num_classes)
    return compute_metrics(cm)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(ckpt: Checkpoint, utts: list[Utterance], fold: int) -> EvalReport:
    """Deterministic forward pass over the fold's test set."""
    model_dict = ckpt.metadata.get("model_config")
    if model_dict is None:
        raise CheckpointError("checkpoint metadata lacks a model config")
    model = model_config_from_dict(model_dict)
    _, test = _split_corpus(utts, fold)
    if not test:
        raise InputError(f"fold {fold} has no test utterances in this corpus")
    return _evaluate_utts(test, ckpt.params, model)
