"""Deterministic synthetic corpus with disjoint frame-level and utterance-level signals.

Every utterance carries two independent ground truths planted in disjoint
frequency bands:

* frame symbols: each symbol lights up its own pair of bins among 0-23 for the
  duration of a 2-6 frame run - a frame-local signal standing in for phonetic
  content;
* emotion class: a slow temporal envelope added uniformly over bins 24-39
  (rising / falling / oscillating / flat-tilted, all zero-mean in time) - an
  utterance-global signal.

A constant per-speaker bias vector and white noise sit on top. Generation is a
pure function of (corpus seed, utterance id) via the fixed xoshiro stream, and
spectrograms are rounded to float32 so feature files round-trip bit-exactly.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, InputError
from .fusion import NUM_CLASSES
from .rng import stream_for

SPECTROGRAM_BINS = 40
SYMBOL_BINS = slice(0, 24)
EMOTION_BINS = slice(24, 40)
MIN_FRAMES, MAX_FRAMES = 24, 96
MIN_RUN, MAX_RUN = 2, 6
SYMBOL_AMPLITUDE = 2.0
EMOTION_AMPLITUDE = 2.0
SPEAKER_BIAS_STD = 0.3

FEATURE_MAGIC = b"QIEM"
FEATURE_VERSION = 1
MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ["id", "speaker", "session", "emotion", "frames"]


@dataclass(frozen=True)
class CorpusSpec:
    num_utterances: int
    seed: int = 0
    num_speakers: int = 10
    alphabet_size: int = 12
    emotion_strength: float = 1.0
    noise_sigma: float = 0.1

    def validate(self) -> None:
        if self.num_utterances < 0:
            raise ConfigError(f"num_utterances must be >= 0, got {self.num_utterances}")
        if self.num_speakers < 5:
            raise ConfigError(
                f"need at least 5 speakers for session-exclusive folds, got "
                f"{self.num_speakers}")
        if self.alphabet_size < 2:
            raise ConfigError(f"alphabet_size must be >= 2, got {self.alphabet_size}")
        if self.alphabet_size * 2 > 24:
            raise ConfigError(
                f"alphabet_size {self.alphabet_size} needs {self.alphabet_size * 2} "
                "symbol bins; only 24 available")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class Utterance:
    id: str
    spectrogram: np.ndarray      # [T, 40] float64 (float32-valued)
    frame_symbols: np.ndarray    # [T] int64
    emotion: int
    speaker: int

    @property
    def frames(self) -> int:
        return self.spectrogram.shape[0]


@dataclass(frozen=True)
class ManifestRow:
    id: str
    speaker: int
    session: int
    emotion: int
    frames: int


def utterance_id(index: int) -> str:
    return f"utt_{index:06d}"


def symbol_template(symbol: int) -> np.ndarray:
    """Fixed spectral pattern for one symbol: two adjacent hot bins."""
    tpl = np.zeros(SPECTROGRAM_BINS)
    tpl[2 * symbol] = SYMBOL_AMPLITUDE
    tpl[2 * symbol + 1] = SYMBOL_AMPLITUDE
    return tpl


def emotion_envelope(emotion: int, frames: int) -> np.ndarray:
    """Zero-mean temporal envelope for one class at a given length.

    happy rises, sad falls, neutral oscillates, angry is flat with a slight
    tilt. Equal time-means keep the classes invisible to plain time-averaged
    features; the temporal shape is the only cue.
    """
    u = np.arange(frames) / (frames - 1)
    if emotion == 0:
        env = u - 0.5
    elif emotion == 1:
        env = 0.5 - u
    elif emotion == 2:
        env = 0.5 * np.sin(2.0 * np.pi * 3.0 * u)
    elif emotion == 3:
        env = 0.2 * (u - 0.5)
    else:
        raise InputError(f"emotion {emotion} outside [0, {NUM_CLASSES})")
    return env - env.mean()


def speaker_bias(spec: CorpusSpec, speaker: int) -> np.ndarray:
    gen = stream_for(spec.seed, "speaker", speaker)
    return gen.normals((SPECTROGRAM_BINS,)) * SPEAKER_BIAS_STD


def render_utterance(spec: CorpusSpec, index: int) -> Utterance:
    """Render one utterance as a pure function of (spec.seed, utterance id)."""
    spec.validate()
    utt_id = utterance_id(index)
    gen = stream_for(spec.seed, "utt", utt_id)
    frames = gen.randint(MIN_FRAMES, MAX_FRAMES)

    symbols = np.empty(frames, dtype=np.int64)
    pos = 0
    while pos < frames:
        run = min(gen.randint(MIN_RUN, MAX_RUN), frames - pos)
        symbols[pos:pos + run] = gen.randint(0, spec.alphabet_size - 1)
        pos += run
    speaker = gen.randint(0, spec.num_speakers - 1)
    emotion = gen.randint(0, NUM_CLASSES - 1)

    spect = np.zeros((frames, SPECTROGRAM_BINS))
    for s in range(spec.alphabet_size):
        mask = symbols == s
        if mask.any():
            spect[mask] += symbol_template(s)
    envelope = emotion_envelope(emotion, frames) * EMOTION_AMPLITUDE * spec.emotion_strength
    spect[:, EMOTION_BINS] += envelope[:, None]
    spect += speaker_bias(spec, speaker)
    if spec.noise_sigma > 0:
        spect += gen.normals((frames, SPECTROGRAM_BINS)) * spec.noise_sigma
    # float32 rounding keeps feature files byte-exact round trips
    spect = spect.astype(np.float32).astype(np.float64)
    return Utterance(id=utt_id, spectrogram=spect, frame_symbols=symbols,
                     emotion=emotion, speaker=speaker)


def generate_corpus(spec: CorpusSpec) -> tuple[list[Utterance], list[ManifestRow]]:
    spec.validate()
    utts = [render_utterance(spec, i) for i in range(spec.num_utterances)]
    return utts, manifest_rows(utts)


def manifest_rows(utts: list[Utterance]) -> list[ManifestRow]:
    return [ManifestRow(id=u.id, speaker=u.speaker, session=u.speaker // 2,
                        emotion=u.emotion, frames=u.frames) for u in utts]


NUM_SESSIONS = 5


def split_folds(manifest: list[ManifestRow], fold: int) -> tuple[list[str], list[str]]:
    """Session-exclusive split: the fold's session is the test set."""
    if not 0 <= fold < NUM_SESSIONS:
        raise InputError(f"fold {fold} outside [0, {NUM_SESSIONS})")
    train = [row.id for row in manifest if row.session != fold]
    test = [row.id for row in manifest if row.session == fold]
    return train, test


# ---------------------------------------------------------------------------
# brute-force oracle classifiers (calibration references)
# ---------------------------------------------------------------------------

def oracle_symbol_predict(utt: Utterance, spec: CorpusSpec,
                          bins: slice = SYMBOL_BINS) -> np.ndarray:
    """Per-frame nearest-template classification on the chosen bins."""
    templates = np.stack([symbol_template(s)[bins] for s in range(spec.alphabet_size)])
    x = utt.spectrogram[:, bins]
    d2 = ((x[:, None, :] - templates[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def oracle_emotion_predict(utt: Utterance, spec: CorpusSpec,
                           bins: slice = EMOTION_BINS) -> int:
    """Nearest centered-envelope classification on the chosen bins."""
    est = utt.spectrogram[:, bins].mean(axis=1)
    est = est - est.mean()
    scale = EMOTION_AMPLITUDE * spec.emotion_strength
    best, best_d = 0, np.inf
    for e in range(NUM_CLASSES):
        tpl = emotion_envelope(e, utt.frames) * scale
        d = float(((est - tpl) ** 2).sum())
        if d < best_d:
            best, best_d = e, d
    return best


def oracle_symbol_accuracy(utts: list[Utterance], spec: CorpusSpec,
                           bins: slice = SYMBOL_BINS) -> float:
    hit = total = 0
    for u in utts:
        pred = oracle_symbol_predict(u, spec, bins)
        hit += int((pred == u.frame_symbols).sum())
        total += u.frames
    return hit / total


def oracle_emotion_accuracy(utts: list[Utterance], spec: CorpusSpec,
                            bins: slice = EMOTION_BINS) -> float:
    hit = sum(int(oracle_emotion_predict(u, spec, bins) == u.emotion) for u in utts)
    return hit / len(utts)


# ---------------------------------------------------------------------------
# feature files and manifest persistence
# ---------------------------------------------------------------------------

def _write_u32(fh, value: int) -> None:
    fh.write(struct.pack("<I", value))


class _Reader:
    """Tracks the byte offset so format errors can name it."""

    def __init__(self, data: bytes, name: str):
        self.data = data
        self.name = name
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(
                f"{self.name}: truncated at offset {self.offset} "
                f"(needed {n} bytes, {len(self.data) - self.offset} left)")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def save_features(utts: list[Utterance], directory: str | Path) -> None:
    """One binary file per utterance plus the manifest CSV."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for u in utts:
        with open(directory / f"{u.id}.bin", "wb") as fh:
            fh.write(FEATURE_MAGIC)
            _write_u32(fh, FEATURE_VERSION)
            raw_id = u.id.encode("utf-8")
            _write_u32(fh, len(raw_id))
            fh.write(raw_id)
            _write_u32(fh, u.frames)
            _write_u32(fh, u.spectrogram.shape[1])
            _write_u32(fh, u.speaker)
            _write_u32(fh, u.emotion)
            fh.write(u.spectrogram.astype("<f4").tobytes())
            fh.write(bytes(int(s) for s in u.frame_symbols))
    write_manifest(directory / MANIFEST_NAME, manifest_rows(utts))


def load_utterance(path: str | Path) -> Utterance:
    path = Path(path)
    reader = _Reader(path.read_bytes(), path.name)
    magic = reader.take(4)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path.name}: bad magic {magic!r} at offset 0")
    version = reader.u32()
    if version != FEATURE_VERSION:
        raise FormatError(f"{path.name}: unsupported version {version} at offset 4")
    id_len = reader.u32()
    utt_id = reader.take(id_len).decode("utf-8")
    frames = reader.u32()
    bins = reader.u32()
    speaker = reader.u32()
    emotion = reader.u32()
    payload_at = reader.offset
    spect = np.frombuffer(reader.take(frames * bins * 4), dtype="<f4")
    spect = spect.reshape(frames, bins).astype(np.float64)
    symbols = np.frombuffer(reader.take(frames), dtype=np.uint8).astype(np.int64)
    if reader.offset != len(reader.data):
        raise FormatError(
            f"{path.name}: {len(reader.data) - reader.offset} trailing bytes "
            f"after offset {reader.offset} (payload began at {payload_at})")
    return Utterance(id=utt_id, spectrogram=spect, frame_symbols=symbols,
                     emotion=emotion, speaker=speaker)


def load_features(directory: str | Path) -> list[Utterance]:
    """Load every feature file in a directory; empty directories are fine."""
    directory = Path(directory)
    if not directory.exists():
        raise DataError(f"no such corpus directory: {directory}")
    return [load_utterance(p) for p in sorted(directory.glob("*.bin"))]


def write_manifest(path: str | Path, rows: list[ManifestRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for r in rows:
            writer.writerow([r.id, r.speaker, r.session, r.emotion, r.frames])


def read_manifest(path: str | Path) -> list[ManifestRow]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing manifest: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise FormatError(f"{path.name}: bad manifest header {reader.fieldnames}")
        return [ManifestRow(id=row["id"], speaker=int(row["speaker"]),
                            session=int(row["session"]), emotion=int(row["emotion"]),
                            frames=int(row["frames"]))
                for row in reader]
