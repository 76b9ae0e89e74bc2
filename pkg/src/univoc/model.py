"""Conditioning stack, autoregressive sample predictor, loss, and exact gradients.

The network maps a mel spectrogram plus the previous companded sample to a
categorical distribution over the next sample class: two bi-directional GRU
layers summarize the frames, their output is held for `hop` samples, and a
single forward GRU followed by two affine layers produces the class logits.

Parameters are stored as float32 arrays (the checkpoint format is float32,
so storage and memory agree bit-for-bit); all arithmetic runs in float64.
The autoregressive section of the teacher-forced pass reuses the exact
per-step kernel behind :func:`ar_step`, keeping the two code paths
bit-identical; gradients are hand-written reverse mode over cached
activations and are checked against finite differences in the test suite.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import MelConfig, MelSpectrogram, mulaw_decode
from .errors import CheckpointError, ConfigError, InputError, ShapeError

_CKPT_MAGIC = b"UVOCCKPT"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Network dimensions. Defaults are the full-scale canonical values."""

    n_mels: int = 80
    cond_hidden: int = 128
    ar_hidden: int = 896
    n_classes: int = 1024
    hop: int = 300

    def __post_init__(self):
        for name in ("n_mels", "cond_hidden", "ar_hidden", "n_classes", "hop"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass
class GruWeights:
    """One GRU's weights: per-gate input maps W, recurrent maps U, biases b.

    Update rule (r: reset, z: update, n: candidate):
        r  = sigmoid(W_r x + U_r h + b_r)
        z  = sigmoid(W_z x + U_z h + b_z)
        n  = tanh(W_n x + r * (U_n h + b_n))
        h' = (1 - z) * n + z * h
    """

    w_r: np.ndarray
    w_z: np.ndarray
    w_n: np.ndarray
    u_r: np.ndarray
    u_z: np.ndarray
    u_n: np.ndarray
    b_r: np.ndarray
    b_z: np.ndarray
    b_n: np.ndarray

    FIELDS = ("w_r", "w_z", "w_n", "u_r", "u_z", "u_n", "b_r", "b_z", "b_n")

    @property
    def hidden(self) -> int:
        return self.w_r.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w_r.shape[1]

    @classmethod
    def init(cls, in_dim: int, hidden: int, rng: np.random.Generator,
             dtype=np.float32) -> "GruWeights":
        sw = 1.0 / np.sqrt(in_dim)
        su = 1.0 / np.sqrt(hidden)
        def w():
            return rng.uniform(-sw, sw, (hidden, in_dim)).astype(dtype)
        def u():
            return rng.uniform(-su, su, (hidden, hidden)).astype(dtype)
        def b():
            return np.zeros(hidden, dtype=dtype)
        return cls(w(), w(), w(), u(), u(), u(), b(), b(), b())

    @classmethod
    def zeros(cls, in_dim: int, hidden: int, dtype=np.float32) -> "GruWeights":
        def w():
            return np.zeros((hidden, in_dim), dtype=dtype)
        def u():
            return np.zeros((hidden, hidden), dtype=dtype)
        def b():
            return np.zeros(hidden, dtype=dtype)
        return cls(w(), w(), w(), u(), u(), u(), b(), b(), b())

    def as_f64(self) -> "GruWeights":
        return GruWeights(*(np.asarray(getattr(self, f), np.float64) for f in self.FIELDS))


_GRU_SET_NAMES = ("cond_gru_1_fwd", "cond_gru_1_bwd", "cond_gru_2_fwd",
                  "cond_gru_2_bwd", "ar_gru")


@dataclass
class ModelParams:
    """All learnable tensors plus the config that fixes their shapes.

    Tensor names (see :meth:`tensor_dict`) follow "<set>.<field>" for the five
    GRU weight sets and "affine_a.w" / "affine_a.b" / "affine_b.w" /
    "affine_b.b" for the output stack.
    """

    config: ModelConfig
    cond_gru_1_fwd: GruWeights
    cond_gru_1_bwd: GruWeights
    cond_gru_2_fwd: GruWeights
    cond_gru_2_bwd: GruWeights
    ar_gru: GruWeights
    affine_a_w: np.ndarray
    affine_a_b: np.ndarray
    affine_b_w: np.ndarray
    affine_b_b: np.ndarray

    @classmethod
    def init(cls, config: ModelConfig, seed: int, dtype=np.float32) -> "ModelParams":
        """Seeded uniform [-1/sqrt(fan_in), +1/sqrt(fan_in)] init, zero biases.

        Tensors are drawn in tensor_dict order so a seed pins every value.
        """
        rng = np.random.default_rng(seed)
        c = config
        sa = 1.0 / np.sqrt(c.ar_hidden)
        return cls(
            config=c,
            cond_gru_1_fwd=GruWeights.init(c.n_mels, c.cond_hidden, rng, dtype),
            cond_gru_1_bwd=GruWeights.init(c.n_mels, c.cond_hidden, rng, dtype),
            cond_gru_2_fwd=GruWeights.init(2 * c.cond_hidden, c.cond_hidden, rng, dtype),
            cond_gru_2_bwd=GruWeights.init(2 * c.cond_hidden, c.cond_hidden, rng, dtype),
            ar_gru=GruWeights.init(1 + 2 * c.cond_hidden, c.ar_hidden, rng, dtype),
            affine_a_w=rng.uniform(-sa, sa, (c.ar_hidden, c.ar_hidden)).astype(dtype),
            affine_a_b=np.zeros(c.ar_hidden, dtype=dtype),
            affine_b_w=rng.uniform(-sa, sa, (c.n_classes, c.ar_hidden)).astype(dtype),
            affine_b_b=np.zeros(c.n_classes, dtype=dtype),
        )

    @classmethod
    def zeros(cls, config: ModelConfig, dtype=np.float32) -> "ModelParams":
        c = config
        return cls(
            config=c,
            cond_gru_1_fwd=GruWeights.zeros(c.n_mels, c.cond_hidden, dtype),
            cond_gru_1_bwd=GruWeights.zeros(c.n_mels, c.cond_hidden, dtype),
            cond_gru_2_fwd=GruWeights.zeros(2 * c.cond_hidden, c.cond_hidden, dtype),
            cond_gru_2_bwd=GruWeights.zeros(2 * c.cond_hidden, c.cond_hidden, dtype),
            ar_gru=GruWeights.zeros(1 + 2 * c.cond_hidden, c.ar_hidden, dtype),
            affine_a_w=np.zeros((c.ar_hidden, c.ar_hidden), dtype),
            affine_a_b=np.zeros(c.ar_hidden, dtype),
            affine_b_w=np.zeros((c.n_classes, c.ar_hidden), dtype),
            affine_b_b=np.zeros(c.n_classes, dtype),
        )

    def gru_sets(self) -> dict[str, GruWeights]:
        return {name: getattr(self, name) for name in _GRU_SET_NAMES}

    def tensor_dict(self) -> dict[str, np.ndarray]:
        """Flat name -> array mapping; arrays are the live (mutable) tensors."""
        out: dict[str, np.ndarray] = {}
        for set_name, w in self.gru_sets().items():
            for f in GruWeights.FIELDS:
                out[f"{set_name}.{f}"] = getattr(w, f)
        out["affine_a.w"] = self.affine_a_w
        out["affine_a.b"] = self.affine_a_b
        out["affine_b.w"] = self.affine_b_w
        out["affine_b.b"] = self.affine_b_b
        return out

    @classmethod
    def from_tensor_dict(cls, config: ModelConfig,
                         tensors: dict[str, np.ndarray]) -> "ModelParams":
        reference = cls.zeros(config)
        expected = reference.tensor_dict()
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        if missing or extra:
            raise CheckpointError(
                f"tensor set mismatch; missing {missing}, unexpected {extra}"
            )
        for name, ref in expected.items():
            arr = np.asarray(tensors[name])
            if arr.shape != ref.shape:
                raise CheckpointError(
                    f"tensor {name} has shape {arr.shape}, expected {ref.shape}"
                )
            if not np.isfinite(arr).all():
                raise CheckpointError(f"tensor {name} contains non-finite values")
            ref[...] = arr
        return reference


@dataclass(frozen=True)
class ArState:
    """Recurrent state of the sample predictor.

    `prev_class` is the class consumed as the previous sample on the next
    step; after choosing a class from the emitted logits, the caller installs
    it with :func:`dataclasses.replace` before stepping again.
    """

    hidden: np.ndarray
    prev_class: int


def initial_ar_state(config: ModelConfig) -> ArState:
    """Zero hidden state; previous class is the encoded zero amplitude."""
    return ArState(np.zeros(config.ar_hidden, dtype=np.float64),
                   config.n_classes // 2)


# ---------------------------------------------------------------------------
# primitive steps


def _sigmoid(x):
    # evaluated via tanh for symmetric rounding on both branches
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_step(x, h, w: GruWeights) -> np.ndarray:
    """One GRU update; float64 arithmetic regardless of input dtypes."""
    x = np.asarray(x, np.float64)
    h = np.asarray(h, np.float64)
    if x.shape != (w.in_dim,) or h.shape != (w.hidden,):
        raise ShapeError(
            f"gru_step expects x{(w.in_dim,)} and h{(w.hidden,)}, "
            f"got x{x.shape} h{h.shape}"
        )
    w = w.as_f64()
    r = _sigmoid(w.w_r @ x + w.u_r @ h + w.b_r)
    z = _sigmoid(w.w_z @ x + w.u_z @ h + w.b_z)
    n = np.tanh(w.w_n @ x + r * (w.u_n @ h + w.b_n))
    return (1.0 - z) * n + z * h


def _ar_core(x, h, w: GruWeights, a_w, a_b, b_w, b_b):
    """Shared per-step AR kernel: GRU update then the two affine layers.

    Both :func:`ar_step` and the teacher-forced pass call this, so their
    logits agree bit-for-bit on identical inputs.
    """
    r = _sigmoid(w.w_r @ x + w.u_r @ h + w.b_r)
    z = _sigmoid(w.w_z @ x + w.u_z @ h + w.b_z)
    q = w.u_n @ h + w.b_n
    n = np.tanh(w.w_n @ x + r * q)
    h2 = (1.0 - z) * n + z * h
    a_pre = a_w @ h2 + a_b
    logits = b_w @ np.maximum(a_pre, 0.0) + b_b
    return logits, h2, (r, z, n, q, a_pre)


def ar_step(state: ArState, cond, params: ModelParams):
    """One autoregressive step: consume (prev_class, cond), emit class logits.

    Returns (logits, new_state); new_state carries the updated hidden vector
    and the unchanged prev_class (the caller picks the next one).
    """
    c = params.config
    cond = np.asarray(cond, np.float64)
    if cond.shape != (2 * c.cond_hidden,):
        raise ShapeError(f"cond must have shape {(2 * c.cond_hidden,)}, got {cond.shape}")
    if state.hidden.shape != (c.ar_hidden,):
        raise ShapeError(f"hidden must have shape {(c.ar_hidden,)}")
    x = np.empty(1 + 2 * c.cond_hidden, dtype=np.float64)
    x[0] = mulaw_decode(int(state.prev_class), c.n_classes)
    x[1:] = cond
    logits, h2, _ = _ar_core(
        x, np.asarray(state.hidden, np.float64), params.ar_gru.as_f64(),
        np.asarray(params.affine_a_w, np.float64),
        np.asarray(params.affine_a_b, np.float64),
        np.asarray(params.affine_b_w, np.float64),
        np.asarray(params.affine_b_b, np.float64),
    )
    return logits, ArState(h2, state.prev_class)


# ---------------------------------------------------------------------------
# batched GRU over a sequence (conditioning layers)


@dataclass
class _GruCache:
    xs: np.ndarray       # (T, in_dim) inputs
    h_prev: np.ndarray   # (T, H) state entering each step
    r: np.ndarray        # (T, H)
    z: np.ndarray        # (T, H)
    n: np.ndarray        # (T, H)
    q: np.ndarray        # (T, H) U_n h + b_n


def _gru_sequence(xs: np.ndarray, w: GruWeights):
    """Run a GRU over (T, in_dim) inputs from the zero state; returns (hs, cache)."""
    t_len = xs.shape[0]
    hdim = w.hidden
    xr = xs @ w.w_r.T + w.b_r
    xz = xs @ w.w_z.T + w.b_z
    xn = xs @ w.w_n.T
    hs = np.empty((t_len, hdim))
    cache = _GruCache(xs, np.empty((t_len, hdim)), np.empty((t_len, hdim)),
                      np.empty((t_len, hdim)), np.empty((t_len, hdim)),
                      np.empty((t_len, hdim)))
    h = np.zeros(hdim)
    for t in range(t_len):
        r = _sigmoid(xr[t] + w.u_r @ h)
        z = _sigmoid(xz[t] + w.u_z @ h)
        q = w.u_n @ h + w.b_n
        n = np.tanh(xn[t] + r * q)
        cache.h_prev[t] = h
        cache.r[t], cache.z[t], cache.n[t], cache.q[t] = r, z, n, q
        h = (1.0 - z) * n + z * h
        hs[t] = h
    return hs, cache


def _gru_sequence_backward(cache: _GruCache, w: GruWeights, dhs: np.ndarray):
    """Reverse-mode pass for :func:`_gru_sequence`.

    dhs holds the upstream gradient arriving at each step's output. Returns
    (dxs, grads) where grads maps GruWeights field names to arrays.
    """
    t_len, hdim = dhs.shape
    d_sr = np.empty((t_len, hdim))
    d_sz = np.empty((t_len, hdim))
    d_p = np.empty((t_len, hdim))
    d_q = np.empty((t_len, hdim))
    dh = np.zeros(hdim)
    for t in range(t_len - 1, -1, -1):
        g = dhs[t] + dh
        r, z, n, q, hp = cache.r[t], cache.z[t], cache.n[t], cache.q[t], cache.h_prev[t]
        dz = g * (hp - n)
        dp = g * (1.0 - z) * (1.0 - n * n)
        dq = dp * r
        dr = dp * q
        dsz = dz * z * (1.0 - z)
        dsr = dr * r * (1.0 - r)
        dh = g * z + w.u_n.T @ dq + w.u_z.T @ dsz + w.u_r.T @ dsr
        d_sr[t], d_sz[t], d_p[t], d_q[t] = dsr, dsz, dp, dq
    grads = {
        "w_r": d_sr.T @ cache.xs, "u_r": d_sr.T @ cache.h_prev, "b_r": d_sr.sum(0),
        "w_z": d_sz.T @ cache.xs, "u_z": d_sz.T @ cache.h_prev, "b_z": d_sz.sum(0),
        "w_n": d_p.T @ cache.xs, "u_n": d_q.T @ cache.h_prev, "b_n": d_q.sum(0),
    }
    dxs = d_sr @ w.w_r + d_sz @ w.w_z + d_p @ w.w_n
    return dxs, grads


def _bidi_forward(xs: np.ndarray, w_fwd: GruWeights, w_bwd: GruWeights):
    hs_f, cache_f = _gru_sequence(xs, w_fwd)
    hs_b_rev, cache_b = _gru_sequence(np.ascontiguousarray(xs[::-1]), w_bwd)
    return np.concatenate([hs_f, hs_b_rev[::-1]], axis=1), cache_f, cache_b


def _bidi_backward(cache_f, cache_b, w_fwd, w_bwd, dout):
    hdim = w_fwd.hidden
    dx_f, grads_f = _gru_sequence_backward(cache_f, w_fwd, dout[:, :hdim])
    dx_b_rev, grads_b = _gru_sequence_backward(
        cache_b, w_bwd, np.ascontiguousarray(dout[:, hdim:][::-1])
    )
    return dx_f + dx_b_rev[::-1], grads_f, grads_b


# ---------------------------------------------------------------------------
# conditioning network


def _mel_frames(mel, config: ModelConfig) -> np.ndarray:
    if isinstance(mel, MelSpectrogram):
        if mel.config.n_mels != config.n_mels:
            raise ConfigError(
                f"mel has {mel.config.n_mels} bands, model expects {config.n_mels}"
            )
        if mel.config.hop != config.hop:
            raise ConfigError(
                f"mel hop {mel.config.hop} != model hop {config.hop}"
            )
        frames = mel.frames
    else:
        frames = np.asarray(mel, np.float64)
        if frames.ndim != 2 or frames.shape[1] != config.n_mels:
            raise ShapeError(
                f"frames must be (T, {config.n_mels}), got {frames.shape}"
            )
    if frames.shape[0] == 0:
        raise InputError("conditioning requires at least one frame")
    return np.asarray(frames, np.float64)


def _conditioning_with_cache(frames: np.ndarray, params: ModelParams):
    feat1, c1f, c1b = _bidi_forward(frames, params.cond_gru_1_fwd.as_f64(),
                                    params.cond_gru_1_bwd.as_f64())
    feat2, c2f, c2b = _bidi_forward(feat1, params.cond_gru_2_fwd.as_f64(),
                                    params.cond_gru_2_bwd.as_f64())
    return feat2, (frames, feat1, c1f, c1b, c2f, c2b)


def conditioning_forward(mel, params: ModelParams) -> np.ndarray:
    """Frame features from two stacked bi-directional GRU layers.

    Each layer runs a forward and a backward pass over the frames and
    concatenates them per frame; output shape is (T, 2 * cond_hidden).
    """
    frames = _mel_frames(mel, params.config)
    feat2, _ = _conditioning_with_cache(frames, params)
    return feat2


def upsample_conditioning(frame_features: np.ndarray, hop: int) -> np.ndarray:
    """Hold each frame's features for hop samples: (T, F) -> (T*hop, F)."""
    frame_features = np.asarray(frame_features)
    if frame_features.ndim != 2 or frame_features.shape[0] < 1:
        raise ShapeError("frame_features must be (T >= 1, F)")
    return np.repeat(frame_features, hop, axis=0)


# ---------------------------------------------------------------------------
# teacher-forced pass, loss, gradients


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log softmax with max-shift stabilization."""
    logits = np.asarray(logits, np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def nll_loss(logits: np.ndarray, targets) -> float:
    """Mean negative log-likelihood (nats) of target classes under logits."""
    logits = np.asarray(logits, np.float64)
    targets = np.asarray(targets)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got {logits.shape}")
    if not np.issubdtype(targets.dtype, np.integer) or targets.ndim != 1:
        raise InputError("targets must be a 1-D integer array")
    if targets.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"{logits.shape[0]} logits rows vs {targets.shape[0]} targets"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise InputError("target class out of range")
    lsm = log_softmax(logits)
    return float(-lsm[np.arange(targets.shape[0]), targets].mean())


@dataclass
class ForwardRecord:
    """Everything backward() needs from one teacher-forced pass."""

    params: ModelParams
    frames: np.ndarray
    feat1: np.ndarray
    cond_caches: tuple          # (c1f, c1b, c2f, c2b)
    up: np.ndarray              # (N, 2*cond_hidden) per-sample conditioning
    ar_cache: _GruCache         # AR GRU activations, length N-1
    hs: np.ndarray              # (N-1, ar_hidden) AR hidden states
    a_pre: np.ndarray           # (N-1, ar_hidden) pre-ReLU affine activations
    logits: np.ndarray          # (N-1, n_classes)
    targets: np.ndarray         # (N-1,) classes being predicted
    loss: float = field(init=False)

    def __post_init__(self):
        self.loss = nll_loss(self.logits, self.targets)


def _check_classes(classes, n_classes: int) -> np.ndarray:
    classes = np.asarray(classes)
    if classes.ndim != 1 or not np.issubdtype(classes.dtype, np.integer):
        raise InputError("audio classes must be a 1-D integer array")
    if classes.size and (classes.min() < 0 or classes.max() >= n_classes):
        raise InputError(f"classes must lie in [0, {n_classes - 1}]")
    return classes.astype(np.int64)


def forward_teacher_forced_with_record(audio_classes, mel,
                                       params: ModelParams) -> ForwardRecord:
    """Teacher-forced pass that also captures the activations for backward()."""
    c = params.config
    classes = _check_classes(audio_classes, c.n_classes)
    frames = _mel_frames(mel, c)
    n = classes.shape[0]
    if n != frames.shape[0] * c.hop:
        raise InputError(
            f"got {n} samples for {frames.shape[0]} frames; expected "
            f"{frames.shape[0] * c.hop} (frames * hop) after alignment"
        )
    if n < 2:
        raise InputError("need at least 2 samples to predict anything")

    feat2, (frames64, feat1, c1f, c1b, c2f, c2b) = _conditioning_with_cache(frames, params)
    up = upsample_conditioning(feat2, c.hop)

    w = params.ar_gru.as_f64()
    a_w = np.asarray(params.affine_a_w, np.float64)
    a_b = np.asarray(params.affine_a_b, np.float64)
    b_w = np.asarray(params.affine_b_w, np.float64)
    b_b = np.asarray(params.affine_b_b, np.float64)

    decoded = mulaw_decode(classes, c.n_classes)
    steps = n - 1
    in_dim = 1 + 2 * c.cond_hidden
    xs = np.empty((steps, in_dim))
    xs[:, 0] = decoded[:-1]
    xs[:, 1:] = up[1:]

    hdim = c.ar_hidden
    cache = _GruCache(xs, np.empty((steps, hdim)), np.empty((steps, hdim)),
                      np.empty((steps, hdim)), np.empty((steps, hdim)),
                      np.empty((steps, hdim)))
    hs = np.empty((steps, hdim))
    a_pre = np.empty((steps, hdim))
    logits = np.empty((steps, c.n_classes))
    h = np.zeros(hdim)
    for t in range(steps):
        row_logits, h2, (r, z, nn, q, ap) = _ar_core(xs[t], h, w, a_w, a_b, b_w, b_b)
        cache.h_prev[t] = h
        cache.r[t], cache.z[t], cache.n[t], cache.q[t] = r, z, nn, q
        hs[t] = h2
        a_pre[t] = ap
        logits[t] = row_logits
        h = h2

    return ForwardRecord(
        params=params, frames=frames64, feat1=feat1,
        cond_caches=(c1f, c1b, c2f, c2b), up=up, ar_cache=cache,
        hs=hs, a_pre=a_pre, logits=logits, targets=classes[1:],
    )


def forward_teacher_forced(audio_classes, mel, params: ModelParams) -> np.ndarray:
    """Logits for classes [1, N) given ground-truth previous samples.

    Row t-1 of the result scores class t from (class_{t-1}, cond_t); there
    are len(audio_classes) - 1 rows.
    """
    return forward_teacher_forced_with_record(audio_classes, mel, params).logits


def backward(record: ForwardRecord) -> dict[str, np.ndarray]:
    """Exact gradients of the record's nll_loss w.r.t. every parameter tensor.

    Backpropagates through the two affine layers, the AR GRU, the upsampler
    (summing over each frame's repeats), and both conditioning layers.
    Returns a dict keyed exactly like ModelParams.tensor_dict().
    """
    params = record.params
    c = params.config
    steps, n_classes = record.logits.shape

    probs = softmax(record.logits)
    dlogits = probs
    dlogits[np.arange(steps), record.targets] -= 1.0
    dlogits /= steps

    b_w = np.asarray(params.affine_b_w, np.float64)
    a_w = np.asarray(params.affine_a_w, np.float64)
    a_relu = np.maximum(record.a_pre, 0.0)

    grads: dict[str, np.ndarray] = {}
    grads["affine_b.w"] = dlogits.T @ a_relu
    grads["affine_b.b"] = dlogits.sum(0)
    da_pre = (dlogits @ b_w) * (record.a_pre > 0.0)
    grads["affine_a.w"] = da_pre.T @ record.hs
    grads["affine_a.b"] = da_pre.sum(0)
    dhs = da_pre @ a_w

    dxs, ar_grads = _gru_sequence_backward(record.ar_cache, params.ar_gru.as_f64(), dhs)
    for f, g in ar_grads.items():
        grads[f"ar_gru.{f}"] = g

    n = steps + 1
    dup = np.zeros((n, 2 * c.cond_hidden))
    dup[1:] = dxs[:, 1:]
    dfeat2 = dup.reshape(-1, c.hop, 2 * c.cond_hidden).sum(axis=1)

    c1f, c1b, c2f, c2b = record.cond_caches
    dfeat1, g2f, g2b = _bidi_backward(c2f, c2b, params.cond_gru_2_fwd.as_f64(),
                                      params.cond_gru_2_bwd.as_f64(), dfeat2)
    _, g1f, g1b = _bidi_backward(c1f, c1b, params.cond_gru_1_fwd.as_f64(),
                                 params.cond_gru_1_bwd.as_f64(), dfeat1)
    for set_name, set_grads in (("cond_gru_2_fwd", g2f), ("cond_gru_2_bwd", g2b),
                                ("cond_gru_1_fwd", g1f), ("cond_gru_1_bwd", g1b)):
        for f, g in set_grads.items():
            grads[f"{set_name}.{f}"] = g
    return grads


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, step: int,
                    mel_config: MelConfig | None = None) -> None:
    """Write params + metadata; tensors are stored as little-endian float32."""
    meta = {
        "step": int(step),
        "model": params.config.to_dict(),
        "mel": dataclasses.asdict(mel_config) if mel_config is not None else None,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = params.tensor_dict()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (params, meta dict).

    meta carries "step" and, when the writer recorded one, "mel" (the mel
    analysis configuration the model was trained against).
    """
    path = Path(path)

    def read_exact(f, count, what):
        data = f.read(count)
        if len(data) != count:
            raise CheckpointError(f"{path}: truncated while reading {what}")
        return data

    with open(path, "rb") as f:
        if read_exact(f, len(_CKPT_MAGIC), "magic") != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", read_exact(f, 4, "version"))
        if version != _CKPT_VERSION:
            raise CheckpointError(
                f"{path}: unknown checkpoint version {version}; "
                f"this reader supports version {_CKPT_VERSION}"
            )
        (meta_len,) = struct.unpack("<I", read_exact(f, 4, "metadata length"))
        try:
            meta = json.loads(read_exact(f, meta_len, "metadata").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt metadata block: {exc}") from exc
        if "model" not in meta or "step" not in meta:
            raise CheckpointError(f"{path}: metadata missing model/step fields")
        config = ModelConfig.from_dict(meta["model"])
        (n_tensors,) = struct.unpack("<I", read_exact(f, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", read_exact(f, 4, "name length"))
            name = read_exact(f, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", read_exact(f, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", read_exact(f, 4 * rank, "dims"))
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            raw = read_exact(f, 4 * count, f"tensor {name} data")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims)
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
    params = ModelParams.from_tensor_dict(config, tensors)
    return params, meta
