import json

import numpy as np
import pytest

from univoc.dsp import AudioBuffer, save_wav


def sine_wave(freq=220.0, seconds=1.0, sample_rate=24000, amp=0.5):
    t = np.arange(int(seconds * sample_rate)) / sample_rate
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t), sample_rate)


def write_corpus(root, utterances):
    """Write wavs plus a manifest; utterances is a list of
    (utterance_id, speaker_id, language, AudioBuffer)."""
    lines = []
    for uid, spk, lang, audio in utterances:
        save_wav(root / f"{uid}.wav", audio)
        lines.append(json.dumps({
            "utterance_id": uid, "speaker_id": spk,
            "language": lang, "audio_path": f"{uid}.wav",
        }))
    manifest = root / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


@pytest.fixture
def ten_utterance_manifest(tmp_path):
    utts = [(f"utt{i:02d}", f"spk{i % 3}", "en",
             sine_wave(200.0 + 10 * i, seconds=0.4 + 0.0125 * i))
            for i in range(10)]
    return write_corpus(tmp_path, utts)
