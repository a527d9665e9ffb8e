import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stmbr import blocks, ops
from stmbr.blocks import DecoderBlockParams, EncDecBlockParams, SaGateParams, StmBlockParams
from stmbr.gradcheck import grad_check
from stmbr.models import (
    ModelConfig,
    UntrainedAuxError,
    build_aux,
    build_sa_cb_brseg,
    build_stm_brnet,
    make_aux_channels,
)
from stmbr.ops import ConvSpec
from stmbr.tensor import Tensor, backward
from stmbr.train import Hyperparams, sgd_momentum_step

F64 = np.float64


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


# -- STM block ----------------------------------------------------------------


def test_stm_boost_channel_arithmetic():
    rng = np.random.default_rng(0)
    p = StmBlockParams.init(rng, 8, 8, 16, dtype=F64)
    x, aux = rand(rng, 1, 8, 16, 16), rng.standard_normal((1, 8, 8, 8))
    boosted = blocks.stm_boost(x, p, aux)
    assert boosted.shape == (1, 32, 8, 8)
    paths = blocks.stm_paths(x, p, aux)
    for k, part in enumerate(paths):  # order ER, RE, R, E
        np.testing.assert_array_equal(boosted.data[:, 8 * k : 8 * (k + 1)], part.data)
    assert blocks.stm_block(x, p, aux).shape == (1, 16, 8, 8)


def test_stm_zero_aux_leaves_other_paths_and_drops_out_of_transition():
    rng = np.random.default_rng(1)
    p = StmBlockParams.init(rng, 4, 4, 6, dtype=F64)
    x = rand(rng, 2, 4, 8, 8)
    with_aux = blocks.stm_paths(x, p, rng.standard_normal((2, 4, 4, 4)))
    zero_aux = blocks.stm_paths(x, p, np.zeros((2, 4, 4, 4)))
    for a, b in zip(with_aux[:3], zero_aux[:3]):
        np.testing.assert_array_equal(a.data, b.data)
    assert not zero_aux[3].data.any()
    full = blocks.stm_block(x, p, np.zeros((2, 4, 4, 4))).data
    sliced = ConvSpec(Tensor(p.transition.kernel.data[:, :12]), p.transition.bias)
    no_e = ops.conv2d(ops.concat_channels(zero_aux[:3]), sliced).data
    np.testing.assert_allclose(full, no_e, rtol=0, atol=1e-12)


def test_stm_aux_accepts_other_resolutions_and_checks_channels():
    rng = np.random.default_rng(2)
    p = StmBlockParams.init(rng, 3, 2, 4, dtype=F64)
    x = rand(rng, 1, 3, 8, 8)
    assert blocks.stm_block(x, p, rng.standard_normal((1, 2, 2, 2))).shape == (1, 4, 4, 4)
    with pytest.raises(ValueError):
        blocks.stm_block(x, p, rng.standard_normal((1, 3, 4, 4)))
    with pytest.raises(ValueError):
        blocks.stm_block(rand(rng, 1, 3, 7, 8), p)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_stm_block_gradient(seed):
    rng = np.random.default_rng(seed)
    p = StmBlockParams.init(rng, 3, 2, 4, dtype=F64)
    aux = rng.standard_normal((1, 2, 4, 4))
    x = Tensor(rng.standard_normal((1, 3, 8, 8)), requires_grad=True)
    op = lambda a, *ws: blocks.stm_block(a, p, aux)  # noqa: E731
    assert grad_check(op, [x, *p.tensors().values()], seed=seed, coords=120) < 1e-4


# -- attention gate ---------------------------------------------------------------


def _gate(rng, skip_ch=3, gate_ch=4):
    return SaGateParams.init(rng, skip_ch, gate_ch, dtype=F64)


def test_gate_saturated_is_identity_and_zero_logit_halves():
    rng = np.random.default_rng(3)
    p = _gate(rng)
    x, g = rand(rng, 2, 3, 5, 5), rand(rng, 2, 4, 5, 5)
    p.f.data[:] = 0.0
    p.b_f.data[:] = 30.0
    np.testing.assert_allclose(blocks.sa_gate(x, g, p).data, x.data, rtol=1e-13, atol=0)
    p.b_f.data[:] = 0.0
    np.testing.assert_array_equal(blocks.sa_gate(x, g, p).data, 0.5 * x.data)


def test_gate_single_channel_weights_and_shape_checks():
    rng = np.random.default_rng(4)
    p = _gate(rng)
    w = blocks.sa_weights(rand(rng, 2, 3, 5, 5), rand(rng, 2, 4, 5, 5), p)
    assert w.shape == (2, 1, 5, 5) and np.all((w.data > 0) & (w.data < 1))
    assert p.w_x.shape[0] == 4  # inter width max(4, skip // 2)
    with pytest.raises(ValueError):
        blocks.sa_gate(rand(rng, 2, 3, 5, 5), rand(rng, 2, 4, 4, 4), p)


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
@settings(max_examples=100, deadline=None)
def test_gate_never_amplifies(seed, scale):
    rng = np.random.default_rng(seed)
    p = _gate(rng)
    for t in p.tensors().values():
        t.data[...] = rng.standard_normal(t.shape) * scale
    x = Tensor(rng.standard_normal((1, 3, 4, 4)) * scale)
    out = blocks.sa_gate(x, rand(rng, 1, 4, 4, 4), p).data
    assert np.all(np.abs(out) <= np.abs(x.data))


def test_gate_gradient():
    rng = np.random.default_rng(5)
    p = _gate(rng)
    x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    g = Tensor(rng.standard_normal((2, 4, 4, 4)), requires_grad=True)
    op = lambda a, b, *ws: blocks.sa_gate(a, b, p)  # noqa: E731
    assert grad_check(op, [x, g, *p.tensors().values()], coords=150) < 1e-4


# -- encoder / decoder --------------------------------------------------------------


def test_encoder_shapes_and_constant_field():
    rng = np.random.default_rng(6)
    p = EncDecBlockParams.init(rng, 16, 16, dtype=F64)
    out, idx = blocks.encoder_block(rand(rng, 1, 16, 32, 32), p)
    assert out.shape == (1, 16, 16, 16) and idx.shape == (1, 16, 16, 16)
    # constant input with zero conv kernels: avg and max branches coincide
    q = EncDecBlockParams.init(rng, 1, 2, dtype=F64)
    for spec in (q.conv1, q.conv2):
        spec.kernel.data[:] = 0.0
        spec.bias.data[:] = 0.25
    h = blocks.encoder_features(Tensor(np.ones((1, 1, 4, 4))), q)
    avg, _ = ops.pool2d(h, 2, 2, "avg")
    mx, _ = ops.pool2d(h, 2, 2, "max")
    np.testing.assert_array_equal(avg.data, mx.data)
    with pytest.raises(ValueError):
        blocks.encoder_block(rand(rng, 1, 1, 5, 4), q)


def test_encoder_gradient():
    rng = np.random.default_rng(7)
    p = EncDecBlockParams.init(rng, 2, 3, dtype=F64)
    x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
    op = lambda a, *ws: blocks.encoder_block(a, p)[0]  # noqa: E731
    assert grad_check(op, [x, *p.tensors().values()], coords=120) < 1e-4


def _decoder_inputs(rng, c_in=3, c_s=2, c_a=2):
    _, idx = ops.pool2d(rand(rng, 1, c_in, 8, 8), 2, 2, "max")
    return rand(rng, 1, c_in, 4, 4), idx, rand(rng, 1, c_s, 8, 8), rng.standard_normal((1, c_a, 4, 4))


def test_decoder_channel_arithmetic_and_slices():
    rng = np.random.default_rng(8)
    x, idx, skip, aux = _decoder_inputs(rng)
    p = DecoderBlockParams.init(rng, 3, 2, 2, 5, dtype=F64)
    pre = blocks.decoder_boost(x, idx, skip, aux, p)
    c_d, c_s, c_a = p.fuse.out_channels, 2, 2
    assert pre.shape == (1, c_d + c_s + c_a, 8, 8)
    np.testing.assert_array_equal(pre.data[:, c_d : c_d + c_s], blocks.sa_gate(skip, ops.max_unpool2d(x, idx), p.gate).data)
    np.testing.assert_array_equal(pre.data[:, c_d + c_s :], ops.resize_nearest(aux, (8, 8)))
    assert blocks.boosted_decoder_block(x, idx, skip, aux, p).shape == (1, 5, 8, 8)


def test_decoder_zero_aux_equals_unboosted_variant():
    rng = np.random.default_rng(9)
    x, idx, skip, _ = _decoder_inputs(rng)
    p = DecoderBlockParams.init(rng, 3, 2, 2, 4, dtype=F64)
    boosted = blocks.boosted_decoder_block(x, idx, skip, np.zeros((1, 2, 4, 4)), p).data
    plain = DecoderBlockParams(p.fuse, ConvSpec(Tensor(p.out.kernel.data[:, :5]), p.out.bias, padding=p.out.padding), p.gate)
    np.testing.assert_allclose(blocks.boosted_decoder_block(x, idx, skip, None, plain).data, boosted, rtol=0, atol=1e-12)


def test_decoder_rejects_mismatched_indices():
    rng = np.random.default_rng(10)
    x, idx, skip, aux = _decoder_inputs(rng)
    p = DecoderBlockParams.init(rng, 3, 2, 2, 4, dtype=F64)
    with pytest.raises(ValueError):
        blocks.boosted_decoder_block(rand(rng, 1, 3, 3, 3), idx, skip, aux, p)
    with pytest.raises(ValueError):
        blocks.boosted_decoder_block(x, idx, rand(rng, 1, 2, 6, 6), aux, p)


def test_decoder_gradient_excludes_aux():
    rng = np.random.default_rng(11)
    x, idx, skip, aux = _decoder_inputs(rng)
    x.requires_grad = skip.requires_grad = True
    p = DecoderBlockParams.init(rng, 3, 2, 2, 3, dtype=F64)
    op = lambda a, s, *ws: blocks.boosted_decoder_block(a, idx, s, aux, p)  # noqa: E731
    assert grad_check(op, [x, skip, *p.tensors().values()], coords=150) < 1e-4
    aux_t = Tensor(aux, requires_grad=True)
    loss = ops.sum(blocks.boosted_decoder_block(x, idx, skip, aux_t, p))
    backward(loss)
    assert aux_t.grad is None


# -- models -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def frozen_aux():
    cfg = ModelConfig(dtype="float64")
    return cfg, build_aux(cfg, np.random.default_rng(0)).freeze()


def test_detector_shape_and_zero_input(frozen_aux):
    cfg, aux = frozen_aux
    m = build_stm_brnet(cfg, np.random.default_rng(1), aux)
    out = m(Tensor(np.zeros((3, 1, 64, 64))))
    assert out.shape == (3, 2)
    assert np.isfinite(out.data).all()
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)
    assert m.num_parameters() == build_stm_brnet(cfg, np.random.default_rng(9), aux).num_parameters()
    with pytest.raises(ValueError):
        build_stm_brnet(ModelConfig(input_size=6), np.random.default_rng(0))


def test_detector_gradient_spot_check(frozen_aux):
    cfg, aux = frozen_aux
    rng = np.random.default_rng(2)
    m = build_stm_brnet(cfg, rng, aux)
    m.fc2_w.data[:] = rng.standard_normal(m.fc2_w.shape) * 0.1  # leave the zero init so gradients reach fc1
    x = Tensor(rng.uniform(0, 1, (2, 1, 64, 64)))
    tensors = [t for _, t in m.trainable()]
    assert grad_check(lambda *ws: m(x), tensors, coords=20) < 1e-3


def test_detector_eval_mode_is_deterministic(frozen_aux):
    cfg, aux = frozen_aux
    m = build_stm_brnet(cfg, np.random.default_rng(3), aux)
    m.fc2_w.data[:] = np.random.default_rng(5).standard_normal(m.fc2_w.shape)
    x = Tensor(np.random.default_rng(4).uniform(0, 1, (2, 1, 64, 64)))
    np.testing.assert_array_equal(m(x).data, m(x).data)
    a = m(x, training=True, rng=np.random.default_rng(0)).data
    b = m(x, training=True, rng=np.random.default_rng(1)).data
    assert not np.array_equal(a, b)


def test_segmenter_shapes_and_trace(frozen_aux):
    cfg, aux = frozen_aux
    m = build_sa_cb_brseg(cfg, np.random.default_rng(5), aux)
    trace = {}
    out = m(Tensor(np.random.default_rng(6).uniform(0, 1, (2, 1, 64, 64))), trace=trace)
    assert out.shape == (2, 2, 64, 64)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)
    assert trace["dec2"].shape[2:] == (32, 32) and trace["dec1"].shape[2:] == (64, 64)
    with pytest.raises(ValueError):
        m(Tensor(np.zeros((1, 1, 62, 62))))


def test_segmenter_gradient_spot_check(frozen_aux):
    cfg, aux = frozen_aux
    rng = np.random.default_rng(7)
    small = ModelConfig(dtype="float64", input_size=16)
    m = build_sa_cb_brseg(small, rng, aux)
    x = Tensor(rng.uniform(0, 1, (1, 1, 16, 16)))
    assert grad_check(lambda *ws: m(x), [t for _, t in m.trainable()], coords=20) < 1e-3


def test_aux_channels_contract(frozen_aux):
    cfg, aux = frozen_aux
    x = Tensor(np.random.default_rng(8).uniform(0, 1, (2, 1, 64, 64)))
    a1 = make_aux_channels(aux, x, 1)
    assert a1.shape == (2, cfg.aux_widths[0], 32, 32)
    np.testing.assert_array_equal(a1, make_aux_channels(aux, x, 1))
    assert make_aux_channels(aux, x, 2, (64, 64)).shape[2:] == (64, 64)
    assert make_aux_channels(aux, x, 1, enabled=False).shape[1] == 0
    with pytest.raises(UntrainedAuxError):
        make_aux_channels(build_aux(cfg, np.random.default_rng(0)), x, 1)


def test_no_boost_decoder_shrinks():
    cfg = ModelConfig(channel_boost=False)
    m = build_sa_cb_brseg(cfg, np.random.default_rng(0))
    c_d, c_s = cfg.seg_widths[0], cfg.seg_widths[0]
    assert m.dec1.out.in_channels == c_d + c_s
    assert build_sa_cb_brseg(ModelConfig(), np.random.default_rng(0), build_aux(ModelConfig(), np.random.default_rng(0)).freeze()).dec1.out.in_channels == c_d + c_s + cfg.aux_widths[0]


def test_no_attention_passes_skip_ungated():
    m = build_sa_cb_brseg(ModelConfig(channel_boost=False, attention=False), np.random.default_rng(0))
    assert m.dec1.gate is None and m.dec2.gate is None


def test_frozen_aux_survives_an_sgd_step(frozen_aux):
    cfg, aux = frozen_aux
    before = {k: t.data.copy() for k, t in aux.params.items()}
    m = build_sa_cb_brseg(cfg, np.random.default_rng(9), aux)
    x = Tensor(np.random.default_rng(10).uniform(0, 1, (2, 1, 64, 64)))
    loss = ops.cross_entropy(m(x), np.random.default_rng(11).integers(0, 2, (2, 64, 64)))
    tensors = [t for _, t in m.trainable()]
    grads = backward(loss, tensors)
    sgd_momentum_step([t.data for t in tensors], grads, [np.zeros_like(t.data) for t in tensors], 0.1, 0.9)
    for k, t in aux.params.items():
        np.testing.assert_array_equal(t.data, before[k])
        assert not t.requires_grad
    assert not any(k.startswith("aux") for k, _ in m.trainable())


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(stm_widths=(30, 64))
    with pytest.raises(ValueError):
        ModelConfig(seg_widths=(16,))
    assert ModelConfig.full_scale().stm_widths == (256, 512)
    assert Hyperparams().lr == 1e-4
