"""Sequential waveform generation from conditioning features.

Sampling uses a counter-based Philox generator keyed directly by the caller's
seed, so a (features, checkpoint, seed, temperature) tuple produces the same
waveform on any platform. One uniform draw per output sample, turned into a
class index by inverse-CDF lookup on the softmax.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .dsp import MelSpectrogram, mulaw_decode
from .errors import ConfigError, InputError
from .model import (
    ModelParams,
    ar_step,
    conditioning_forward,
    initial_ar_state,
    softmax,
    upsample_conditioning,
)


def _sample_class(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw: one uniform against the cumulative distribution."""
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(probs) - 1))


def generate(mel, params: ModelParams, seed: int = 0,
             temperature: float = 1.0, argmax: bool = False) -> np.ndarray:
    """Synthesize a waveform for a mel spectrogram.

    Returns exactly frames * hop float64 samples in [-1, 1]. `temperature`
    scales the logits before sampling; `argmax` takes the mode instead and
    ignores the seed. Raises RuntimeError naming the step if the network
    ever emits a non-finite logit.
    """
    if not argmax and not temperature > 0:
        raise ConfigError("temperature must be > 0")
    if isinstance(mel, MelSpectrogram):
        if mel.config.hop != params.config.hop:
            raise ConfigError(
                f"mel hop {mel.config.hop} != model hop {params.config.hop}"
            )
        frames = mel.frames
    else:
        frames = np.asarray(mel, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != params.config.n_mels:
        raise InputError(
            f"expected (frames, {params.config.n_mels}) conditioning input, "
            f"got {frames.shape}"
        )

    config = params.config
    up = upsample_conditioning(conditioning_forward(frames, params), config.hop)
    n_out = up.shape[0]

    rng = np.random.Generator(np.random.Philox(key=seed))
    state = initial_ar_state(config)
    out = np.empty(n_out, dtype=np.float64)
    for i in range(n_out):
        logits, state = ar_step(state, up[i], params)
        if not np.all(np.isfinite(logits)):
            raise RuntimeError(f"non-finite logits at sample {i}")
        if argmax:
            c = int(np.argmax(logits))
        else:
            c = _sample_class(softmax(logits / temperature), rng)
        out[i] = mulaw_decode(c, config.n_classes)
        state = dataclasses.replace(state, prev_class=c)
    return out


def copy_synthesis(audio, params: ModelParams, mel_config, seed: int = 0,
                   temperature: float = 1.0, argmax: bool = False) -> np.ndarray:
    """Analysis-synthesis round trip: extract mels from `audio`, then
    regenerate a waveform from them with `generate`."""
    from .dsp import extract_mel

    mel = extract_mel(audio, mel_config)
    return generate(mel, params, seed=seed, temperature=temperature, argmax=argmax)
