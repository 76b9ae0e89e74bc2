"""Network tests: GRU cell, conditioning stack, AR step, loss, gradients, checkpoints.

Oracles here are deliberately independent of the implementation: the GRU and
affine oracles are scalar Python loops over math.exp/math.tanh, the loss
oracle is a 50-digit mpmath log-sum-exp, and gradients are checked against
central finite differences of the loss itself.
"""

import dataclasses
import math
import struct

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from univoc import model as M
from univoc.dsp import MelConfig
from univoc.errors import CheckpointError, ConfigError, InputError, ShapeError

TINY = M.ModelConfig(n_mels=5, cond_hidden=4, ar_hidden=6, n_classes=8, hop=2)


def random_params(config, seed, scale=0.4):
    """Float64 parameter set with every tensor drawn uniformly in [-scale, scale]."""
    params = M.ModelParams.zeros(config, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for arr in params.tensor_dict().values():
        arr[...] = rng.uniform(-scale, scale, arr.shape)
    return params


# ---------------------------------------------------------------------------
# gru_step


def _oracle_gru_step(x, h, w):
    """Scalar-loop evaluation of the GRU update, plain Python floats."""
    hidden, in_dim = w.w_r.shape

    def mat_vec(mat, vec, n_in):
        return [sum(float(mat[i][j]) * float(vec[j]) for j in range(n_in))
                for i in range(mat.shape[0])]

    def sigm(v):
        return 1.0 / (1.0 + math.exp(-v))

    wrx, wzx, wnx = (mat_vec(m, x, in_dim) for m in (w.w_r, w.w_z, w.w_n))
    urh, uzh, unh = (mat_vec(m, h, hidden) for m in (w.u_r, w.u_z, w.u_n))
    out = []
    for i in range(hidden):
        r = sigm(wrx[i] + urh[i] + float(w.b_r[i]))
        z = sigm(wzx[i] + uzh[i] + float(w.b_z[i]))
        n = math.tanh(wnx[i] + r * (unh[i] + float(w.b_n[i])))
        out.append((1.0 - z) * n + z * float(h[i]))
    return np.array(out)


def test_gru_step_zero_parameter_fixed_point():
    w = M.GruWeights.zeros(4, 3)
    out = M.gru_step(np.array([1.0, -0.5, 0.25, 0.9]), np.zeros(3), w)
    assert np.array_equal(out, np.zeros(3))


def test_gru_step_update_gate_saturation_preserves_state():
    rng = np.random.default_rng(5)
    w = M.GruWeights.zeros(3, 3, dtype=np.float64)
    w.b_z[...] = 40.0  # z = sigmoid(40) ~ 1 - 4e-18
    h = rng.uniform(-0.8, 0.8, 3)
    out = M.gru_step(rng.normal(size=3), h, w)
    assert np.abs(out - h).max() < 1e-12


def test_gru_step_matches_scalar_loop_oracle():
    rng = np.random.default_rng(17)
    w = M.GruWeights.zeros(3, 3, dtype=np.float64)
    for f in M.GruWeights.FIELDS:
        getattr(w, f)[...] = rng.uniform(-1.0, 1.0, getattr(w, f).shape)
    x = rng.uniform(-1.0, 1.0, 3)
    h = rng.uniform(-0.9, 0.9, 3)
    np.testing.assert_allclose(M.gru_step(x, h, w), _oracle_gru_step(x, h, w),
                               rtol=1e-12, atol=1e-14)


def test_gru_step_shape_errors():
    w = M.GruWeights.zeros(4, 3)
    with pytest.raises(ShapeError):
        M.gru_step(np.zeros(5), np.zeros(3), w)
    with pytest.raises(ShapeError):
        M.gru_step(np.zeros(4), np.zeros(2), w)


@settings(deadline=None, max_examples=60)
@given(st.integers(0, 2**32 - 1))
def test_gru_step_stays_in_open_unit_interval(seed):
    # preactivations are kept below tanh's float64 saturation point so the
    # mathematical strict bound survives rounding
    rng = np.random.default_rng(seed)
    w = M.GruWeights.zeros(3, 3, dtype=np.float64)
    for f in M.GruWeights.FIELDS:
        getattr(w, f)[...] = rng.uniform(-1.0, 1.0, getattr(w, f).shape)
    x = rng.uniform(-1.0, 1.0, 3)
    h = rng.uniform(-0.999, 0.999, 3)
    out = M.gru_step(x, h, w)
    assert (np.abs(out) < 1.0).all()


# ---------------------------------------------------------------------------
# conditioning


def test_conditioning_single_frame_matches_gru_step_composition():
    params = random_params(TINY, 2)
    frame = np.random.default_rng(3).normal(size=(1, TINY.n_mels))
    out = M.conditioning_forward(frame, params)
    assert out.shape == (1, 2 * TINY.cond_hidden)

    x = frame[0]
    zeros = np.zeros(TINY.cond_hidden)
    feat1 = np.concatenate([
        M.gru_step(x, zeros, params.cond_gru_1_fwd),
        M.gru_step(x, zeros, params.cond_gru_1_bwd),
    ])
    feat2 = np.concatenate([
        M.gru_step(feat1, zeros, params.cond_gru_2_fwd),
        M.gru_step(feat1, zeros, params.cond_gru_2_bwd),
    ])
    np.testing.assert_allclose(out[0], feat2, rtol=1e-12, atol=1e-14)


def _swap_columns(w, c):
    perm = np.concatenate([np.arange(c, 2 * c), np.arange(c)])
    out = M.GruWeights(**{f: np.array(getattr(w, f)) for f in M.GruWeights.FIELDS})
    out.w_r = out.w_r[:, perm]
    out.w_z = out.w_z[:, perm]
    out.w_n = out.w_n[:, perm]
    return out


def test_conditioning_time_reversal_with_weight_swap():
    # reversing the frames and swapping each layer's fwd/bwd weight sets
    # (layer 2 also swaps its input column halves, which ride on layer 1's
    # concatenation order) reverses the output frames and swaps its halves
    params = random_params(TINY, 9)
    c = TINY.cond_hidden
    swapped = dataclasses.replace(
        params,
        cond_gru_1_fwd=params.cond_gru_1_bwd,
        cond_gru_1_bwd=params.cond_gru_1_fwd,
        cond_gru_2_fwd=_swap_columns(params.cond_gru_2_bwd, c),
        cond_gru_2_bwd=_swap_columns(params.cond_gru_2_fwd, c),
    )
    frames = np.random.default_rng(4).normal(size=(4, TINY.n_mels))
    out = M.conditioning_forward(frames, params)
    out_rev = M.conditioning_forward(frames[::-1], swapped)
    expected = np.concatenate([out[:, c:], out[:, :c]], axis=1)[::-1]
    np.testing.assert_allclose(out_rev, expected, rtol=1e-12, atol=1e-14)


def test_conditioning_zero_weights_zero_output():
    params = M.ModelParams.zeros(TINY)
    frames = np.random.default_rng(0).normal(size=(5, TINY.n_mels))
    assert np.array_equal(M.conditioning_forward(frames, params),
                          np.zeros((5, 2 * TINY.cond_hidden)))


def test_conditioning_rejects_empty_and_mismatched():
    params = M.ModelParams.zeros(TINY)
    with pytest.raises(InputError):
        M.conditioning_forward(np.zeros((0, TINY.n_mels)), params)
    with pytest.raises(ShapeError):
        M.conditioning_forward(np.zeros((3, TINY.n_mels + 1)), params)


# ---------------------------------------------------------------------------
# upsampler


def test_upsample_definition():
    feats = np.array([[1.0], [2.0]])
    np.testing.assert_array_equal(
        M.upsample_conditioning(feats, 3),
        np.array([[1.0], [1.0], [1.0], [2.0], [2.0], [2.0]]),
    )


def test_upsample_length_and_indexing():
    rng = np.random.default_rng(8)
    for _ in range(20):
        t, hop, dim = rng.integers(1, 9), int(rng.integers(1, 9)), rng.integers(1, 5)
        feats = rng.normal(size=(t, dim))
        up = M.upsample_conditioning(feats, hop)
        assert up.shape == (t * hop, dim)
        for i in range(t * hop):
            assert np.array_equal(up[i], feats[i // hop])


# ---------------------------------------------------------------------------
# ar_step


def test_ar_step_zero_params_uniform():
    params = M.ModelParams.zeros(TINY)
    state = M.initial_ar_state(TINY)
    logits, new_state = M.ar_step(state, np.zeros(2 * TINY.cond_hidden), params)
    assert np.array_equal(logits, np.zeros(TINY.n_classes))
    probs = M.softmax(logits[None, :])[0]
    np.testing.assert_allclose(probs, np.full(TINY.n_classes, 1.0 / TINY.n_classes),
                               rtol=1e-12)
    assert new_state.prev_class == state.prev_class
    assert np.array_equal(new_state.hidden, np.zeros(TINY.ar_hidden))


def test_softmax_shift_invariance():
    logits = np.random.default_rng(1).normal(size=(3, 8))
    np.testing.assert_allclose(M.softmax(logits), M.softmax(logits + 123.0),
                               rtol=1e-9, atol=1e-12)


def test_ar_step_matches_scalar_loop_oracle():
    cfg = M.ModelConfig(n_mels=3, cond_hidden=2, ar_hidden=4, n_classes=8, hop=2)
    params = random_params(cfg, 21, scale=0.7)
    rng = np.random.default_rng(22)
    cond = rng.normal(size=2 * cfg.cond_hidden)
    hidden = rng.uniform(-0.5, 0.5, cfg.ar_hidden)
    state = M.ArState(hidden, prev_class=5)

    logits, new_state = M.ar_step(state, cond, params)

    from univoc.dsp import mulaw_decode
    x = np.concatenate([[mulaw_decode(5, cfg.n_classes)], cond])
    h2 = _oracle_gru_step(x, hidden, params.ar_gru)
    a = [max(0.0, sum(float(params.affine_a_w[i][j]) * h2[j]
                      for j in range(cfg.ar_hidden)) + float(params.affine_a_b[i]))
         for i in range(cfg.ar_hidden)]
    expected = [sum(float(params.affine_b_w[k][i]) * a[i]
                    for i in range(cfg.ar_hidden)) + float(params.affine_b_b[k])
                for k in range(cfg.n_classes)]
    np.testing.assert_allclose(logits, expected, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(new_state.hidden, h2, rtol=1e-12, atol=1e-14)


def test_initial_ar_state_is_encoded_zero():
    state = M.initial_ar_state(M.ModelConfig())
    assert state.prev_class == 512
    assert np.array_equal(state.hidden, np.zeros(896))


# ---------------------------------------------------------------------------
# teacher-forced forward


def test_forward_two_samples_one_row():
    params = random_params(TINY, 30)
    frames = np.random.default_rng(31).normal(size=(1, TINY.n_mels))
    logits = M.forward_teacher_forced(np.array([3, 4]), frames, params)
    assert logits.shape == (1, TINY.n_classes)


def test_forward_silence_zero_params_uniform_entropy():
    params = M.ModelParams.zeros(TINY)
    frames = np.zeros((3, TINY.n_mels))
    classes = np.full(6, TINY.n_classes // 2)
    logits = M.forward_teacher_forced(classes, frames, params)
    assert np.array_equal(logits, np.zeros((5, TINY.n_classes)))
    assert M.nll_loss(logits, classes[1:]) == pytest.approx(math.log(TINY.n_classes),
                                                            abs=1e-12)


def test_forward_equals_ar_step_composition_exactly():
    params = random_params(TINY, 40)
    rng = np.random.default_rng(41)
    frames = rng.normal(size=(5, TINY.n_mels))
    classes = rng.integers(0, TINY.n_classes, 10)

    logits = M.forward_teacher_forced(classes, frames, params)

    cond = M.conditioning_forward(frames, params)
    up = M.upsample_conditioning(cond, TINY.hop)
    state = M.initial_ar_state(TINY)
    rows = []
    for t in range(1, len(classes)):
        state = dataclasses.replace(state, prev_class=int(classes[t - 1]))
        row, state = M.ar_step(state, up[t], params)
        rows.append(row)
    assert np.array_equal(logits, np.array(rows))


def test_forward_deterministic():
    params = random_params(TINY, 50)
    rng = np.random.default_rng(51)
    frames = rng.normal(size=(4, TINY.n_mels))
    classes = rng.integers(0, TINY.n_classes, 8)
    a = M.forward_teacher_forced(classes, frames, params)
    b = M.forward_teacher_forced(classes, frames, params)
    assert np.array_equal(a, b)


def test_forward_length_mismatch_rejected():
    params = M.ModelParams.zeros(TINY)
    frames = np.zeros((3, TINY.n_mels))
    with pytest.raises(InputError):
        M.forward_teacher_forced(np.zeros(5, dtype=np.int64), frames, params)


# ---------------------------------------------------------------------------
# nll_loss


def test_nll_uniform_logits_canonical():
    logits = np.zeros((4, 1024))
    targets = np.array([0, 17, 512, 1023])
    assert M.nll_loss(logits, targets) == pytest.approx(math.log(1024.0), abs=1e-12)
    assert math.log(1024.0) == pytest.approx(6.9315, abs=1e-4)


def test_nll_confident_correct_approaches_zero():
    logits = np.zeros((3, 8))
    targets = np.array([2, 5, 7])
    logits[np.arange(3), targets] = 200.0
    assert M.nll_loss(logits, targets) < 1e-12


def test_nll_matches_high_precision_logsumexp_oracle():
    rng = np.random.default_rng(77)
    logits = rng.normal(scale=3.0, size=(5, 7))
    targets = rng.integers(0, 7, 5)
    mpmath.mp.dps = 50
    total = mpmath.mpf(0)
    for row, tgt in zip(logits, targets):
        lse = mpmath.log(sum(mpmath.exp(mpmath.mpf(v)) for v in row))
        total += lse - mpmath.mpf(row[tgt])
    expected = float(total / 5)
    assert M.nll_loss(logits, targets) == pytest.approx(expected, rel=1e-12)


def test_nll_validation():
    with pytest.raises(ShapeError):
        M.nll_loss(np.zeros((3, 4)), np.array([0, 1]))
    with pytest.raises(InputError):
        M.nll_loss(np.zeros((2, 4)), np.array([0, 4]))
    with pytest.raises(InputError):
        M.nll_loss(np.zeros((2, 4)), np.array([0.5, 1.0]))


@settings(deadline=None, max_examples=40)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 1e4))
def test_softmax_rows_sum_to_one(seed, scale):
    logits = np.random.default_rng(seed).normal(scale=scale, size=(3, 11))
    sums = M.softmax(logits).sum(axis=1)
    assert np.abs(sums - 1.0).max() < 1e-6


# ---------------------------------------------------------------------------
# backward


def _finite_difference(loss_fn, arr, idx, h=1e-4):
    orig = arr[idx]
    arr[idx] = orig + h
    lp = loss_fn()
    arr[idx] = orig - h
    lm = loss_fn()
    arr[idx] = orig
    return (lp - lm) / (2.0 * h)


def test_backward_matches_finite_differences():
    params = random_params(TINY, 100)
    rng = np.random.default_rng(101)
    frames = rng.normal(size=(3, TINY.n_mels))
    classes = rng.integers(0, TINY.n_classes, 3 * TINY.hop)

    record = M.forward_teacher_forced_with_record(classes, frames, params)
    grads = M.backward(record)
    tensors = params.tensor_dict()
    assert set(grads) == set(tensors)

    def loss_fn():
        return M.forward_teacher_forced_with_record(classes, frames, params).loss

    coord_rng = np.random.default_rng(102)
    names = sorted(tensors)
    for _ in range(100):
        name = names[coord_rng.integers(len(names))]
        arr = tensors[name]
        idx = tuple(coord_rng.integers(s) for s in arr.shape)
        fd = _finite_difference(loss_fn, arr, idx)
        an = grads[name][idx]
        rel = abs(fd - an) / max(1e-8, abs(fd), abs(an))
        assert rel < 1e-4, f"{name}{idx}: analytic {an} vs fd {fd}"


def test_backward_unused_path_gradients_agree_with_oracle():
    # single frame of zeros: the conditioning GRU input weights multiply a
    # zero vector, so their gradients must vanish exactly and the finite
    # difference oracle must agree
    params = random_params(TINY, 110)
    frames = np.zeros((1, TINY.n_mels))
    classes = np.random.default_rng(111).integers(0, TINY.n_classes, TINY.hop)

    record = M.forward_teacher_forced_with_record(classes, frames, params)
    grads = M.backward(record)
    tensors = params.tensor_dict()

    def loss_fn():
        return M.forward_teacher_forced_with_record(classes, frames, params).loss

    for name in ("cond_gru_1_bwd.w_r", "cond_gru_1_bwd.w_n", "cond_gru_1_fwd.w_z"):
        assert np.array_equal(grads[name], np.zeros_like(grads[name]))
        arr = tensors[name]
        fd = _finite_difference(loss_fn, arr, (0, 0))
        assert abs(fd - grads[name][0, 0]) < 1e-8
    # recurrent/bias parameters of the same sets stay on the active path
    fd = _finite_difference(loss_fn, tensors["cond_gru_1_bwd.b_n"], (1,))
    an = grads["cond_gru_1_bwd.b_n"][1]
    assert abs(fd - an) / max(1e-8, abs(fd), abs(an)) < 1e-4


def test_backward_confident_correct_gradients_vanish():
    params = M.ModelParams.zeros(TINY, dtype=np.float64)
    target_class = 3
    params.affine_b_b[target_class] = 60.0
    frames = np.zeros((2, TINY.n_mels))
    classes = np.full(2 * TINY.hop, target_class)
    record = M.forward_teacher_forced_with_record(classes, frames, params)
    assert record.loss < 1e-12
    grads = M.backward(record)
    assert max(np.abs(g).max() for g in grads.values()) < 1e-10


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bit_identical(tmp_path):
    params = M.ModelParams.init(TINY, seed=7)
    mel_cfg = MelConfig(sample_rate=8000, n_fft=64, win=32, hop=TINY.hop, n_mels=5,
                        fmin=100.0, fmax=3900.0)
    path = tmp_path / "model.ckpt"
    M.save_checkpoint(path, params, step=42, mel_config=mel_cfg)
    loaded, meta = M.load_checkpoint(path)

    assert meta["step"] == 42
    assert loaded.config == TINY
    assert meta["mel"]["hop"] == TINY.hop
    for name, arr in params.tensor_dict().items():
        assert np.array_equal(arr, loaded.tensor_dict()[name]), name

    rng = np.random.default_rng(8)
    frames = rng.normal(size=(2, TINY.n_mels))
    classes = rng.integers(0, TINY.n_classes, 2 * TINY.hop)
    assert np.array_equal(
        M.forward_teacher_forced(classes, frames, params),
        M.forward_teacher_forced(classes, frames, loaded),
    )


def test_checkpoint_rejects_unknown_version(tmp_path):
    params = M.ModelParams.init(TINY, seed=1)
    path = tmp_path / "model.ckpt"
    M.save_checkpoint(path, params, step=0)
    raw = bytearray(path.read_bytes())
    raw[8:12] = struct.pack("<I", 999)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        M.load_checkpoint(path)


def test_checkpoint_rejects_bad_magic_and_truncation(tmp_path):
    params = M.ModelParams.init(TINY, seed=1)
    path = tmp_path / "model.ckpt"
    M.save_checkpoint(path, params, step=0)
    raw = path.read_bytes()

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        M.load_checkpoint(bad)

    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        M.load_checkpoint(cut)


def test_params_from_tensor_dict_validates_names_and_shapes():
    params = M.ModelParams.init(TINY, seed=3)
    tensors = dict(params.tensor_dict())
    dropped = tensors.pop("ar_gru.w_r")
    with pytest.raises(CheckpointError, match="missing"):
        M.ModelParams.from_tensor_dict(TINY, tensors)
    tensors["ar_gru.w_r"] = dropped[:, :-1]
    with pytest.raises(CheckpointError, match="shape"):
        M.ModelParams.from_tensor_dict(TINY, tensors)


def test_init_is_seeded_and_bounded():
    a = M.ModelParams.init(TINY, seed=11)
    b = M.ModelParams.init(TINY, seed=11)
    c = M.ModelParams.init(TINY, seed=12)
    ta, tb, tc = a.tensor_dict(), b.tensor_dict(), c.tensor_dict()
    assert all(np.array_equal(ta[k], tb[k]) for k in ta)
    assert any(not np.array_equal(ta[k], tc[k]) for k in ta)
    # input weights bounded by 1/sqrt(fan_in); biases zero
    bound = 1.0 / math.sqrt(TINY.n_mels)
    assert np.abs(ta["cond_gru_1_fwd.w_r"]).max() <= bound
    assert np.array_equal(ta["ar_gru.b_r"], np.zeros(TINY.ar_hidden))


def test_model_config_validation():
    with pytest.raises(ConfigError):
        M.ModelConfig(n_classes=1)
    with pytest.raises(ConfigError):
        M.ModelConfig(hop=0)
