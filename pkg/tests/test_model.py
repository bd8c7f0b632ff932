import dataclasses
import math

import numpy as np
import pytest

from gradcheck import REL_TOL, check
from tec.grad import ShapeError, no_grad, ops
from tec.grad.optim import Adam, ExponentialDecay
from tec.model import Mode, ModelConfig, compute_loss, micro_config, toy_config, variant_factory
from tec.model.config import AttentionConfig
from tec.model.network import (AttentionMemory, EncoderInputError, Encoded, GmmAttention, TecModel,
                               length_mask, loss_terms, stop_targets, total_loss)
from tec.model.training import (Example, TrainConfig, Trainer, TrainingDivergedError, collate, load_model,
                                save_model)
from tec.grad.layers import ParamStore


def micro_batch(mode, rng, x_len=(12, 9), z_len=(6, 4), side_len=(5, 3), mel=8):
    x = rng.normal(size=(len(x_len), max(x_len), mel)) * length_mask(x_len, max(x_len))[..., None]
    z = rng.normal(size=(len(z_len), max(z_len), mel)) * length_mask(z_len, max(z_len))[..., None]
    mode = Mode.parse(mode)
    side, sl = None, None
    if mode is Mode.TEC:
        side = rng.integers(1, 30, size=(len(side_len), max(side_len)))
        sl = list(side_len)
    elif mode is Mode.AEC_SEQ2SEQ:
        sl = [n + 1 for n in x_len]
        side = rng.normal(size=(len(sl), max(sl), mel))
    return x, list(x_len), side, sl, z, list(z_len)


def random_examples(mode, rng, n=3, mel=8):
    out = []
    for i in range(n):
        tx, tz = 8 + 2 * i, 5 + i
        side = None
        if Mode.parse(mode) is Mode.TEC:
            side = rng.integers(1, 30, size=4 + i)
        elif Mode.parse(mode) is Mode.AEC_SEQ2SEQ:
            side = rng.normal(size=(tx, mel))
        out.append(Example(f"u{i}", rng.normal(size=(tx, mel)), rng.normal(size=(tz, mel)) * 0.5, side))
    return out


# -- encoders ----------------------------------------------------------------

def test_audio_encoder_length_is_quarter():
    model = TecModel(micro_config(), seed=0)
    for t in range(4, 65):
        enc = model.audio_enc(np.ones((1, t, 8)), [t], training=False)
        assert enc.values.shape[1] == math.ceil(t / 4), t
    assert model.audio_enc(np.ones((1, 40, 8)), [40], False).values.shape[1] == 10


def test_audio_encoder_lengths_in_padded_batch(rng):
    model = TecModel(micro_config(), seed=0)
    enc = model.audio_enc(rng.normal(size=(3, 17, 8)), [17, 9, 4], training=True)
    assert enc.lengths == [5, 3, 1]
    assert np.all(enc.values.data[1, 3:] == 0) and np.all(enc.values.data[2, 1:] == 0)


def test_audio_encoder_rejects_short_input():
    model = TecModel(micro_config(), seed=0)
    with pytest.raises(EncoderInputError):
        model.audio_enc(np.ones((1, 3, 8)), [3], training=False)


def test_audio_encoder_zero_input_is_finite_and_reproducible():
    model = TecModel(micro_config(), seed=0)
    a = model.audio_enc(np.zeros((1, 10, 8)), [10], training=False).values.data
    b = model.audio_enc(np.zeros((1, 10, 8)), [10], training=False).values.data
    assert np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, b)


def test_audio_encoder_padding_matches_single_in_inference(rng):
    model = TecModel(micro_config(), seed=0)
    x = rng.normal(size=(2, 13, 8))
    batch = model.audio_enc(x, [13, 7], training=False).values.data
    alone = model.audio_enc(x[1:, :7], [7], training=False).values.data
    np.testing.assert_allclose(batch[1, :2], alone[0], atol=1e-12)


def test_full_size_widths():
    model = TecModel(ModelConfig(), materialize=False)
    shapes = model.store.shapes
    assert shapes["audio_enc/conv0/kernel"] == (3, 3, 1, 32)
    assert shapes["audio_enc/conv1/kernel"] == (3, 3, 32, 32)
    assert shapes["audio_enc/clstm/fw/wx"] == (3, 32, 4 * 256)
    assert shapes["text_enc/embedding"][1] == 512
    assert shapes["text_enc/conv2/kernel"] == (5, 512, 512)
    assert shapes["decoder/mel_proj/kernel"] == (256 + 128, 128)
    assert shapes["decoder/stop_proj/kernel"] == (256 + 128, 2)
    assert shapes["decoder/postnet4/kernel"] == (5, 512, 128)
    assert shapes["attn_text/memory_proj/kernel"] == (512, 128)


def test_text_encoder_length_and_determinism():
    model = TecModel(micro_config(), seed=0)
    one = model.text_enc(np.array([[7]]), [1], training=False)
    assert one.values.shape[1] == 1
    ids = np.array([[3, 9, 12, 4, 20]])
    a = model.text_enc(ids, [5], training=False).values.data
    np.testing.assert_array_equal(a, model.text_enc(ids, [5], training=False).values.data)
    assert a.shape == (1, 5, 16)


def test_text_encoder_sees_phoneme_order():
    changed = 0
    for seed in range(20):
        model = TecModel(micro_config(), seed=seed)
        rng = np.random.default_rng(seed)
        ids = rng.choice(np.arange(1, 40), size=6, replace=False)
        swapped = ids.copy()
        swapped[[1, 2]] = swapped[[2, 1]]
        a = model.text_enc(ids[None], [6], training=False).values.data
        b = model.text_enc(swapped[None], [6], training=False).values.data
        changed += not np.allclose(a, b)
    assert changed == 20


def test_text_encoder_rejects_unknown_ids():
    model = TecModel(micro_config(), seed=0)
    vocab = model.cfg.text_enc.vocab_size
    with pytest.raises(EncoderInputError):
        model.text_enc(np.array([[1, vocab]]), [2], training=False)
    with pytest.raises(EncoderInputError):
        model.text_enc(np.array([[-1]]), [1], training=False)


# -- attention ---------------------------------------------------------------

def test_gmm_weights_match_loop_oracle(rng):
    store = ParamStore(seed=3)
    att = GmmAttention(store, "a", AttentionConfig(context_dim=4, gmm_components=3), 5, 6)
    enc = Encoded(ops.mul(rng.normal(size=(2, 9, 6)), 1.0), [9, 6])
    mem = att.prepare(enc)
    state = att.initial_state(2)
    for _ in range(4):
        _, state = att.step(rng.normal(size=(2, 5)), state, mem)
        a, b, k = state.alpha, state.beta, state.kappa.data
        for bi in range(2):
            for j in range(9):
                want = 0.0
                if j < enc.lengths[bi]:
                    for m in range(3):
                        want += a[bi, m] * math.exp(-b[bi, m] * (k[bi, m] - j) ** 2)
                assert abs(state.weights[bi, j] - want) < 1e-9


def test_near_delta_window_selects_one_position(rng):
    store = ParamStore(seed=4)
    cfg = AttentionConfig(context_dim=3, gmm_components=1)
    att = GmmAttention(store, "a", cfg, 2, 5)
    att.query.w.data[:] = 0.0
    att.query.b.data[:] = [0.0, 1e3, -40.0]   # weight, width (huge), step (~0)
    h = rng.normal(size=(1, 7, 5))
    mem = att.prepare(Encoded(ops.mul(h, 1.0), [7]))
    j0 = 4
    state = att.initial_state(1)
    state.kappa = ops.mul(np.full((1, 1), float(j0)), 1.0)
    ctx, _ = att.step(rng.normal(size=(1, 2)), state, mem)
    want = h[0, j0] @ att.proj_w.data + att.proj_b.data
    np.testing.assert_allclose(ctx.data[0], want, atol=1e-6)


def _random_decoder_run(model, rng, steps, side):
    x = rng.normal(size=(1, 16, model.cfg.decoder.mel_dim))
    enc = model.encode(x, [16], side, None if side is None else [side.shape[1]], training=False)
    memories = model.prepare_memories(enc)
    state = model.initial_state(1)
    for _ in range(steps):
        prev = rng.normal(size=(1, model.cfg.decoder.mel_dim)) * 2
        old = state
        _, _, state = model.decoder_step(state, memories, prev)
        yield old, state


def test_context_sum_and_monotone_positions_over_1000_steps(rng):
    model = TecModel(micro_config(), seed=1)
    side = rng.integers(1, 40, size=(1, 7))
    for old, new in _random_decoder_run(model, rng, 1000, side):
        c = new.last_contexts
        assert np.array_equal(new.context.data - (c["audio"].data + c["text"].data), np.zeros_like(c["audio"].data))
        for name in ("audio", "text"):
            assert np.all(new.attention[name].kappa.data >= old.attention[name].kappa.data)
            assert np.all(np.isfinite(new.attention[name].weights))
            assert np.all(new.attention[name].weights >= 0)


def test_zero_text_projection_leaves_audio_context(rng):
    model = TecModel(micro_config(), seed=2)
    model.store.params["attn_text/memory_proj/kernel"].data[:] = 0.0
    model.store.params["attn_text/memory_proj/bias"].data[:] = 0.0
    side = rng.integers(1, 40, size=(1, 5))
    for _, new in _random_decoder_run(model, rng, 5, side):
        np.testing.assert_array_equal(new.context.data, new.last_contexts["audio"].data)


def test_attend_rejects_context_mismatch(rng):
    model = TecModel(micro_config(), seed=0)
    model.attention["text"].cfg = dataclasses.replace(model.attention["text"].cfg, context_dim=4)
    model.attention["text"].proj_w.data = np.zeros((16, 4))
    model.attention["text"].proj_b.data = np.zeros(4)
    side = rng.integers(1, 40, size=(1, 5))
    enc = model.encode(rng.normal(size=(1, 8, 8)), [8], side, [5])
    mems = model.prepare_memories(enc)
    state = model.initial_state(1)
    state.attention["text"].context = ops.mul(np.zeros((1, 4)), 1.0)
    model.attention["text"].query.w.data = np.zeros((8 + 4, 6))
    with pytest.raises(ShapeError, match="context"):
        model.decoder_step(state, mems)


# -- variants ----------------------------------------------------------------

def test_vanilla_has_single_attention(rng):
    tec = variant_factory("tec", micro_config())
    vanilla = variant_factory("vanilla", micro_config())
    assert vanilla.parameter_count() < tec.parameter_count()
    names = [p.name for p in vanilla.params]
    assert not any(n.startswith(("attn_text", "text_enc", "playback_enc", "attn_playback")) for n in names)
    for _, new in _random_decoder_run(vanilla, rng, 3, None):
        assert set(new.last_contexts) == {"audio"}
        np.testing.assert_array_equal(new.context.data, new.last_contexts["audio"].data)


def test_aec_has_two_audio_encoders(rng):
    aec = variant_factory(Mode.AEC_SEQ2SEQ, micro_config())
    names = {p.name.split("/")[0] for p in aec.params}
    assert names == {"audio_enc", "playback_enc", "attn_audio", "attn_playback", "decoder"}
    assert aec.second_source == "playback"
    assert aec.parameter_count("playback_enc") == aec.parameter_count("audio_enc")
    with pytest.raises(EncoderInputError, match="playback"):
        aec.infer(rng.normal(size=(12, 8)))


def test_tec_requires_phonemes(rng):
    with pytest.raises(EncoderInputError):
        TecModel(micro_config(), seed=0).infer(rng.normal(size=(12, 8)))


def test_mismatched_encoder_widths_rejected():
    cfg = micro_config()
    cfg.text_enc.bilstm_units = 5
    with pytest.raises(ValueError, match="widths"):
        cfg.validate()


def test_config_round_trip():
    cfg = toy_config("aec")
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"bogus": 1})


# -- decoder -----------------------------------------------------------------

def test_decoder_step_needs_state():
    model = TecModel(micro_config("vanilla"), seed=0)
    with pytest.raises(RuntimeError, match="not initialized"):
        model.decoder_step(None, {})


def test_first_step_from_zero_frame_is_finite(rng):
    model = TecModel(micro_config(), seed=0)
    enc = model.encode(rng.normal(size=(1, 8, 8)), [8], rng.integers(1, 30, size=(1, 4)), [4])
    state = model.initial_state(1)
    assert np.all(state.prev_frame.data == 0)
    mel, stop, _ = model.decoder_step(state, model.prepare_memories(enc))
    assert mel.shape == (1, 8) and stop.shape == (1, 2)
    assert np.all(np.isfinite(mel.data)) and np.all(np.isfinite(stop.data))


def test_teacher_forcing_matches_manual_stepping(rng):
    model = TecModel(micro_config(), seed=5)
    x, xl, side, sl, z, zl = micro_batch("tec", rng, x_len=(10,), z_len=(5,), side_len=(4,))
    zpre, _, stops = model.teacher_forced(x, xl, side, sl, z, zl, training=False)
    mems = model.prepare_memories(model.encode(x, xl, side, sl, training=False))
    state = model.initial_state(1)
    prev = np.zeros((1, 8))
    for t in range(5):
        mel, stop, state = model.decoder_step(state, mems, prev)
        np.testing.assert_array_equal(mel.data, zpre.data[:, t])
        np.testing.assert_array_equal(stop.data, stops.data[:, t])
        prev = z[:, t]
    assert zpre.shape == (1, 5, 8)


def test_zero_postnet_is_identity(rng):
    model = TecModel(micro_config(), seed=0)
    for name, p in model.store.params.items():
        if name.startswith("decoder/postnet"):
            p.data[:] = 0.0
    for t in (1, 4, 9):
        x, xl, side, sl, z, zl = micro_batch("tec", rng, x_len=(8,), z_len=(t,), side_len=(3,))
        zpre, zpost, _ = model.teacher_forced(x, xl, side, sl, z, zl, training=False)
        assert np.array_equal(zpre.data, zpost.data)


def naive_postnet(model, zpre):
    """Inference-mode post-net residual by explicit loops."""
    h = zpre.copy()
    convs, bns = model.decoder.post_convs, model.decoder.post_bns
    for i, (conv, bn) in enumerate(zip(convs, bns)):
        w, b = conv.w.data, conv.b.data
        k = w.shape[0]
        pad = (k - 1) // 2
        out = np.zeros((h.shape[0], w.shape[2]))
        for t in range(h.shape[0]):
            for o in range(w.shape[2]):
                acc = b[o]
                for j in range(k):
                    src = t + j - pad
                    if 0 <= src < h.shape[0]:
                        acc += sum(h[src, c] * w[j, c, o] for c in range(w.shape[1]))
                out[t, o] = acc
        st = bn.stats
        out = (out - st.mean) / np.sqrt(st.var + 1e-5) * bn.gamma.data + bn.beta.data
        h = np.tanh(out) if i < len(convs) - 1 else out
    return h


def test_postnet_matches_loop_oracle(rng):
    model = TecModel(micro_config(), seed=0)
    for bn in model.decoder.post_bns:
        bn.stats.mean = rng.normal(size=bn.stats.mean.shape) * 0.1
        bn.stats.var = rng.uniform(0.5, 2.0, size=bn.stats.var.shape)
        bn.gamma.data = rng.normal(size=bn.gamma.shape)
    zpre = rng.normal(size=(7, 8))
    got = model.decoder.postnet(ops.mul(zpre[None], 1.0), np.ones((1, 7)), training=False).data[0]
    np.testing.assert_allclose(got, naive_postnet(model, zpre), atol=1e-9)


# -- loss --------------------------------------------------------------------

def test_perfect_prediction_loss():
    z = np.random.default_rng(0).normal(size=(6, 4))
    targets = stop_targets([6], 6)[0]
    logits = np.where(targets > 0.5, 50.0, -50.0)
    res = compute_loss(z, z, z, logits, targets)
    assert res.l2_pre == res.l2_post == res.l1_pre == res.l1_post == 0.0
    assert res.stop_ce < 1e-30
    assert res.total == res.stop_ce


def test_unit_deviation_loss():
    z = np.zeros((5, 3))
    zpost = z.copy()
    zpost[2, 1] = 1.0
    targets = stop_targets([5], 5)[0]
    res = compute_loss(z, zpost, z, np.where(targets > 0.5, 60.0, -60.0), targets)
    assert res.l2_post == 1.0 and res.l1_post == 1.0
    assert res.l2_pre == 0.0 and res.l1_pre == 0.0


def naive_loss(zpre, zpost, z, logits, lengths, pos_weight):
    total = 0.0
    for b in range(z.shape[0]):
        n = lengths[b]
        utt = 0.0
        for t in range(n):
            for d in range(z.shape[2]):
                e1, e2 = zpre[b, t, d] - z[b, t, d], zpost[b, t, d] - z[b, t, d]
                utt += e1 * e1 + e2 * e2 + abs(e1) + abs(e2)
        ce = 0.0
        for t in range(n):
            cls = 1 if t == n - 1 else 0
            l0, l1 = logits[b, t]
            m = max(l0, l1)
            logz = m + math.log(math.exp(l0 - m) + math.exp(l1 - m))
            ce += (pos_weight if cls else 1.0) * (logz - (l1 if cls else l0))
        total += utt + ce / n
    return total / z.shape[0]


def test_loss_matches_naive_oracle(rng):
    for trial in range(5):
        lengths = [7, 4, 1][: 1 + trial % 3]
        steps = max(lengths)
        shape = (len(lengths), steps, 3)
        zpre, zpost, z = rng.normal(size=shape), rng.normal(size=shape), rng.normal(size=shape)
        logits = rng.normal(size=(len(lengths), steps, 2)) * 3
        terms = loss_terms(ops.mul(zpre, 1.0), ops.mul(zpost, 1.0), z, ops.mul(logits, 1.0),
                           stop_targets(lengths, steps), lengths, 5.0)
        got = float(total_loss(terms).data)
        assert got == pytest.approx(naive_loss(zpre, zpost, z, logits, lengths, 5.0), abs=1e-9)
        assert all(float(v.data) >= 0 for v in terms.values())


def test_loss_length_mismatch():
    with pytest.raises(ShapeError, match="length"):
        compute_loss(np.zeros((4, 2)), np.zeros((4, 2)), np.zeros((5, 2)), np.zeros((4, 2)), np.zeros((4, 2)))


# -- full-model gradients ----------------------------------------------------

@pytest.mark.parametrize("mode, substitute", [("tec", "clstm"), ("vanilla", "clstm"), ("aec", "clstm"),
                                              ("tec", "bilstm")])
def test_micro_model_gradients(mode, substitute):
    rng = np.random.default_rng(17)
    model = TecModel(micro_config(mode, substitute), seed=3)
    # zero-initialized biases put ReLUs exactly on their kink for the zero
    # start frame; jitter everything to check at a generic point
    for p in model.params:
        p.data = p.data + rng.normal(scale=0.05, size=p.shape)
    x, xl, side, sl, z, zl = micro_batch(mode, rng, x_len=(12, 10, 8), z_len=(6, 4, 5), side_len=(5, 3, 4))
    targets = stop_targets(zl, z.shape[1])

    def build():
        zpre, zpost, stop = model.teacher_forced(x, xl, side, sl, z, zl, training=True)
        return total_loss(loss_terms(zpre, zpost, z, stop, targets, zl, model.cfg.stop_pos_weight))

    errors = check(build, model.params, max_entries=3, rng=np.random.default_rng(0))
    assert len(errors) == len(model.params)
    assert errors.skipped <= 0.1 * errors.compared
    worst = max(errors, key=errors.get)
    assert errors[worst] < REL_TOL, f"{worst}: {errors[worst]:.3g}"


# -- training ----------------------------------------------------------------

def test_training_reduces_loss_on_repeated_example():
    rng = np.random.default_rng(2)
    ex = random_examples("tec", rng, n=1)
    model = TecModel(micro_config(), seed=0)
    hist = Trainer(model, TrainConfig(lr_initial=1e-2, lr_final=1e-2, batch_size=2, log_every=0)).fit(ex * 2, 50)
    assert hist[-1].total < 0.5 * hist[0].total


def test_zero_learning_rate_keeps_params():
    rng = np.random.default_rng(3)
    model = TecModel(micro_config("aec"), seed=0)
    before = {p.name: p.data.copy() for p in model.params}
    Trainer(model, TrainConfig(lr_initial=0.0, lr_final=0.0, log_every=0)).fit(random_examples("aec", rng), 3)
    for p in model.params:
        assert np.array_equal(p.data, before[p.name])


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        rng = np.random.default_rng(4)
        model = TecModel(micro_config(), seed=7)
        hist = Trainer(model, TrainConfig(lr_initial=1e-3, batch_size=2, log_every=0)).fit(random_examples("tec", rng), 4)
        runs.append(([h.as_dict() for h in hist], [p.data.copy() for p in model.params]))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_prenet_dropout_stream_is_seeded():
    rng = np.random.default_rng(5)
    cfg = micro_config()
    cfg.decoder.prenet_dropout = 0.5
    model = TecModel(cfg, seed=0)
    batch = collate(random_examples("tec", rng, n=2))
    args = (batch.x, batch.x_lengths, batch.side, batch.side_lengths, batch.z, batch.z_lengths)
    a = model.teacher_forced(*args, training=False, dropout_seed=1)[0].data
    b = model.teacher_forced(*args, training=False, dropout_seed=1)[0].data
    c = model.teacher_forced(*args, training=False, dropout_seed=2)[0].data
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_divergence_names_step_and_parameter():
    rng = np.random.default_rng(6)
    model = TecModel(micro_config("vanilla"), seed=0)
    model.store.params["decoder/mel_proj/bias"].data[0] = np.nan
    trainer = Trainer(model, TrainConfig(log_every=0))
    with np.errstate(invalid="ignore"):
        with pytest.raises(TrainingDivergedError) as exc:
            trainer.fit(random_examples("vanilla", rng), 1)
    assert exc.value.step == 0 and exc.value.worst


def test_collate_pads_and_marks_final_frames(rng):
    batch = collate(random_examples("tec", rng, n=3))
    assert batch.z.shape == (3, 7, 8) and batch.z_lengths == [5, 6, 7]
    assert batch.side.dtype == np.int64 and batch.side_lengths == [4, 5, 6]
    assert batch.stop[0, 4, 1] == 1.0 and batch.stop[0, 5, 0] == 1.0
    assert batch.stop[:, :, 1].sum() == 3


# -- inference ---------------------------------------------------------------

def test_infer_single_step(rng):
    model = TecModel(micro_config(), seed=0)
    res = model.infer(rng.normal(size=(12, 8)), rng.integers(1, 30, size=4), max_steps=1)
    assert res.mel.shape == (1, 8) and len(res.stop_probs) == 1


class _StopAt:
    """Stand-in stop head that votes "stop" on its n-th call."""

    def __init__(self, n):
        self.n, self.calls = n, 0

    def __call__(self, x):
        self.calls += 1
        logit = 20.0 if self.calls == self.n else -20.0
        return ops.mul(np.array([[0.0, logit]]), 1.0)


def test_infer_halts_on_stop_token(rng):
    model = TecModel(micro_config(), seed=0)
    model.decoder.stop_out = _StopAt(3)
    res = model.infer(rng.normal(size=(12, 8)), rng.integers(1, 30, size=4), max_steps=50)
    assert res.mel.shape[0] == 3 and not res.truncated


def test_infer_flags_truncation(rng):
    model = TecModel(micro_config(), seed=0)
    model.decoder.stop_out = _StopAt(10 ** 6)
    res = model.infer(rng.normal(size=(12, 8)), rng.integers(1, 30, size=4))
    assert res.truncated and res.mel.shape[0] == 4 * 3


def test_checkpoint_round_trip_preserves_inference(tmp_path, rng):
    model = TecModel(micro_config(), seed=9)
    Trainer(model, TrainConfig(lr_initial=1e-3, batch_size=2, log_every=0)).fit(random_examples("tec", rng), 2)
    path = tmp_path / "micro.teck"
    save_model(model, path, {"steps": 2})
    again = load_model(path)
    x, ids = rng.normal(size=(10, 8)), rng.integers(1, 30, size=5)
    with no_grad():
        a = model.infer(x, ids, max_steps=6)
        b = again.infer(x, ids, max_steps=6)
    np.testing.assert_array_equal(a.mel, b.mel)
    assert again.cfg == model.cfg
