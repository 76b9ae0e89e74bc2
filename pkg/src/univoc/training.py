"""Corpus ingestion, window batching, Adam loop, checkpointing.

Training is deliberately serial and seeded: a (manifest, configs, seed)
triple fixes the loss trajectory bit-for-bit. Speaker identity is never fed
to the network: the corpus simply mixes whatever speakers the manifest
lists, and the per-speaker cap only limits how many utterances each one
contributes.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as model_mod
from .dsp import AudioBuffer, MelConfig, extract_mel, load_wav, mulaw_encode
from .errors import ConfigError, ManifestError, TrainingDiverged
from .model import ModelConfig, ModelParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    speaker_id: str
    language: str
    audio_path: Path


@dataclass(frozen=True)
class CorpusManifest:
    entries: tuple[ManifestEntry, ...]
    per_speaker_cap: int | None = None

    def __len__(self) -> int:
        return len(self.entries)


def load_manifest(path, per_speaker_cap: int | None = None) -> CorpusManifest:
    """Read and validate a JSON-lines manifest.

    Each line holds {"utterance_id", "speaker_id", "language", "audio_path"};
    audio paths resolve relative to the manifest's directory. When a cap is
    given, each speaker keeps its first `cap` utterances in lexicographic
    utterance_id order. Entries come back sorted by utterance_id.
    """
    path = Path(path)
    if per_speaker_cap is not None and per_speaker_cap < 1:
        raise ConfigError("per_speaker_cap must be at least 1 when given")
    base = path.parent
    entries: list[ManifestEntry] = []
    seen_ids: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: expected an object")
            try:
                fields = {k: obj[k] for k in
                          ("utterance_id", "speaker_id", "language", "audio_path")}
            except KeyError as exc:
                raise ManifestError(f"{path}:{lineno}: missing field {exc}") from exc
            if not all(isinstance(v, str) and v for v in fields.values()):
                raise ManifestError(
                    f"{path}:{lineno}: all fields must be non-empty strings"
                )
            if fields["utterance_id"] in seen_ids:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate utterance_id "
                    f"{fields['utterance_id']!r}"
                )
            seen_ids.add(fields["utterance_id"])
            audio = Path(fields["audio_path"])
            if not audio.is_absolute():
                audio = base / audio
            entries.append(ManifestEntry(fields["utterance_id"], fields["speaker_id"],
                                         fields["language"], audio))

    entries.sort(key=lambda e: e.utterance_id)
    if per_speaker_cap is not None:
        kept: list[ManifestEntry] = []
        counts: dict[str, int] = {}
        for e in entries:
            n = counts.get(e.speaker_id, 0)
            if n < per_speaker_cap:
                counts[e.speaker_id] = n + 1
                kept.append(e)
        entries = kept

    checked: set[Path] = set()
    missing: list[str] = []
    for e in entries:
        if e.audio_path in checked:
            continue
        checked.add(e.audio_path)
        if not e.audio_path.is_file():
            missing.append(str(e.audio_path))
    if missing:
        shown = ", ".join(missing[:10])
        more = f" (+{len(missing) - 10} more)" if len(missing) > 10 else ""
        raise ManifestError(f"{path}: {len(missing)} audio files missing: {shown}{more}")

    return CorpusManifest(tuple(entries), per_speaker_cap)


# ---------------------------------------------------------------------------
# feature preparation and batching


def align_classes_and_frames(audio: AudioBuffer, mel_frames: np.ndarray,
                             hop: int, n_classes: int):
    """Trim to whole frames: the centered STFT emits one frame beyond the
    last full hop, so the final frame is dropped and the waveform cut to
    frames * hop samples. Returns (classes, frames) with len(classes) ==
    len(frames) * hop."""
    usable = len(audio) // hop
    if usable < 1:
        raise ConfigError(f"audio shorter than one hop ({hop} samples)")
    classes = mulaw_encode(audio.samples[: usable * hop], n_classes)
    return classes, np.asarray(mel_frames[:usable], np.float64)


@dataclass(frozen=True)
class Window:
    """One TBPTT slice: classes plus the conditioning frames they span."""

    utterance_id: str
    classes: np.ndarray   # (tbptt_len,) int64
    frames: np.ndarray    # (tbptt_len // hop, n_mels)

    @property
    def targets(self) -> np.ndarray:
        return self.classes[1:]


@dataclass(frozen=True)
class TrainConfig:
    tbptt_len: int = 4800
    batch_size: int = 4
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 500
    val_fraction: float = 0.02

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.tbptt_len < 2:
            raise ConfigError("tbptt_len must be >= 2 samples")
        if self.max_steps < 0 or self.checkpoint_every < 1:
            raise ConfigError("max_steps must be >= 0 and checkpoint_every >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def _prepare_features(entries, mel_config: MelConfig, n_classes: int):
    """Load and align every utterance once; small-corpus eager cache."""
    prepared = {}
    for e in entries:
        audio = load_wav(e.audio_path)
        mel = extract_mel(audio, mel_config)
        prepared[e.utterance_id] = align_classes_and_frames(
            audio, mel.frames, mel_config.hop, n_classes
        )
    return prepared


def make_batches(manifest: CorpusManifest, mel_config: MelConfig,
                 model_config: ModelConfig, train_config: TrainConfig,
                 rng: np.random.Generator):
    """Infinite stream of training batches (lists of :class:`Window`).

    Each epoch visits every eligible utterance exactly once in a seeded
    shuffle, taking one frame-aligned window at a seeded offset; utterances
    shorter than a window are skipped (counted in a single log line).
    Batches may span epoch boundaries.
    """
    if mel_config.hop != model_config.hop:
        raise ConfigError(f"mel hop {mel_config.hop} != model hop {model_config.hop}")
    if mel_config.n_mels != model_config.n_mels:
        raise ConfigError("mel band count differs between mel and model configs")
    if train_config.tbptt_len % model_config.hop != 0:
        raise ConfigError(
            f"tbptt_len {train_config.tbptt_len} must be a multiple of "
            f"hop {model_config.hop}"
        )
    if not manifest.entries:
        raise ConfigError("manifest has no entries")

    w_frames = train_config.tbptt_len // model_config.hop
    prepared = _prepare_features(manifest.entries, mel_config, model_config.n_classes)
    eligible = [e for e in manifest.entries
                if prepared[e.utterance_id][1].shape[0] >= w_frames]
    skipped = len(manifest.entries) - len(eligible)
    if skipped:
        log.warning("skipped %d utterance(s) shorter than one %d-sample window",
                    skipped, train_config.tbptt_len)
    if not eligible:
        raise ConfigError(
            f"no utterance is at least tbptt_len = {train_config.tbptt_len} samples"
        )

    hop = model_config.hop
    batch: list[Window] = []
    while True:
        order = rng.permutation(len(eligible))
        for idx in order:
            entry = eligible[idx]
            classes, frames = prepared[entry.utterance_id]
            start = int(rng.integers(0, frames.shape[0] - w_frames + 1))
            yield_window = Window(
                entry.utterance_id,
                classes[start * hop : (start + w_frames) * hop],
                frames[start : start + w_frames],
            )
            batch.append(yield_window)
            if len(batch) == train_config.batch_size:
                yield batch
                batch = []


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Standard Adam; moments in float64, parameters updated in place."""

    def __init__(self, tensors: dict[str, np.ndarray], lr: float,
                 beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros(v.shape) for k, v in tensors.items()}
        self.v = {k: np.zeros(v.shape) for k, v in tensors.items()}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, arr in tensors.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            arr[...] = (np.asarray(arr, np.float64) - update).astype(arr.dtype)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    losses: list[float]
    checkpoint_paths: list[Path]
    final_params: ModelParams
    log_path: Path
    out_dir: Path = field(repr=False, default=None)


def _batch_loss_and_grads(batch, params):
    tensors = params.tensor_dict()
    total = {k: np.zeros(v.shape) for k, v in tensors.items()}
    losses = []
    for window in batch:
        record = model_mod.forward_teacher_forced_with_record(
            window.classes, window.frames, params
        )
        losses.append(record.loss)
        for k, g in model_mod.backward(record).items():
            total[k] += g
    scale = 1.0 / len(batch)
    for k in total:
        total[k] *= scale
    return float(np.mean(losses)), total


def train(manifest: CorpusManifest, model_config: ModelConfig,
          mel_config: MelConfig, train_config: TrainConfig, out_dir) -> TrainResult:
    """Run the Adam loop; writes checkpoints and a JSON-lines loss log.

    Emits a checkpoint at step 0, every `checkpoint_every` steps, and at the
    final step. With max_steps == 0 only the initial checkpoint is written.
    Raises :class:`TrainingDiverged` when the batch loss goes non-finite.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    seeds = np.random.SeedSequence(train_config.seed).spawn(3)
    params = ModelParams.init(model_config, seeds[0])
    batch_rng = np.random.default_rng(seeds[1])

    train_entries = list(manifest.entries)
    val_entries: list[ManifestEntry] = []
    n_val = int(round(train_config.val_fraction * len(train_entries)))
    if n_val:
        val_rng = np.random.default_rng(seeds[2])
        order = val_rng.permutation(len(train_entries))
        val_idx = set(int(i) for i in order[:n_val])
        val_entries = [e for i, e in enumerate(train_entries) if i in val_idx]
        train_entries = [e for i, e in enumerate(train_entries) if i not in val_idx]
        log.info("holding out %d utterance(s) for validation reporting", n_val)

    stream = make_batches(CorpusManifest(tuple(train_entries), manifest.per_speaker_cap),
                          mel_config, model_config, train_config, batch_rng)

    def checkpoint_path(step):
        return out_dir / f"checkpoint_{step:06d}.ckpt"

    checkpoints = []
    model_mod.save_checkpoint(checkpoint_path(0), params, 0, mel_config)
    checkpoints.append(checkpoint_path(0))

    adam = Adam(params.tensor_dict(), train_config.learning_rate,
                train_config.adam_beta1, train_config.adam_beta2,
                train_config.adam_eps)

    losses: list[float] = []
    log_path = out_dir / "train_log.jsonl"
    started = time.monotonic()
    with open(log_path, "w", encoding="utf-8") as log_file:
        for step in range(1, train_config.max_steps + 1):
            batch = next(stream)
            loss, grads = _batch_loss_and_grads(batch, params)
            if not np.isfinite(loss):
                raise TrainingDiverged(step, [w.utterance_id for w in batch])
            adam.step(params.tensor_dict(), grads)
            losses.append(loss)
            wall_ms = round((time.monotonic() - started) * 1000.0, 3)
            log_file.write(json.dumps(
                {"step": step, "loss_nats": loss, "wall_ms": wall_ms}
            ) + "\n")
            if step % 100 == 0 or step == 1:
                log.info("step %d loss %.4f nats", step, loss)
            if step % train_config.checkpoint_every == 0 or step == train_config.max_steps:
                path = checkpoint_path(step)
                model_mod.save_checkpoint(path, params, step, mel_config)
                if path not in checkpoints:
                    checkpoints.append(path)
                if val_entries:
                    _report_validation(val_entries, params, mel_config,
                                       model_config, train_config, step)

    return TrainResult(losses, checkpoints, params, log_path, out_dir)


def _report_validation(entries, params, mel_config, model_config, train_config, step):
    prepared = _prepare_features(entries, mel_config, model_config.n_classes)
    w_frames = train_config.tbptt_len // model_config.hop
    vals = []
    for uid, (classes, frames) in sorted(prepared.items()):
        if frames.shape[0] < w_frames:
            continue
        window = Window(uid, classes[: w_frames * model_config.hop], frames[:w_frames])
        record = model_mod.forward_teacher_forced_with_record(
            window.classes, window.frames, params
        )
        vals.append(record.loss)
    if vals:
        log.info("step %d validation loss %.4f nats over %d utterance(s)",
                 step, float(np.mean(vals)), len(vals))
