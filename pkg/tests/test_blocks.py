import numpy as np
import pytest

from ms2edge import autograd as ag
from ms2edge import blocks as B
from ms2edge.autograd import Graph, Var
from ms2edge.neuron import NeuronConfig
from ms2edge.tensor import ConvSpec, conv_forward
from helpers import vjp_error
from oracles import conv2d_loops


def ctx(cfg=None, seed=0, **kw):
    return B.BlockContext(cfg or NeuronConfig.ilif(D=4, beta=0.25), np.random.default_rng(seed), **kw)


def as_float64(module, smooth=True):
    for p in module.parameters():
        p.data = p.data.astype(np.float64)
    for _, m in module.named_modules():
        if isinstance(m, B.SpikeLayer):
            m.smooth = smooth
    return module


def _input(shape, seed=0, lo=0.05, hi=3.5):
    return np.random.default_rng(seed).uniform(lo, hi, shape)


@pytest.mark.parametrize("make", [
    lambda c: B.MS2Block(c, 4, 8, stride=2, kernels=(1, 3)),
    lambda c: B.MS2Block(c, 8, 8, stride=1, kernels=(1, 3)),
    lambda c: B.MSBlock(c, 4),
    lambda c: B.MDSBlock(c, 4, 4),
    lambda c: B.SMSUB(c, 4, 2, branches=((1, 1), (3, 2))),
    lambda c: B.SkipBlock(c, 4, 2),
], ids=["MS2Block-s2", "MS2Block-s1", "MSBlock", "MDSBlock", "SMSUB", "Skip"])
@pytest.mark.parametrize("cfg", [NeuronConfig.ilif(D=4, beta=0.25), NeuronConfig.lif(v_th=0.5, beta=0.5)],
                         ids=["ILIF", "LIF"])
def test_block_input_gradients(make, cfg):
    blk = as_float64(make(ctx(cfg)))
    blk.assign_names()
    cin = blk.cin
    x = _input((2, 2, cin, 6, 6), lo=0.1, hi=0.9 if cfg.kind == "LIF" else 3.5)
    assert max(vjp_error(lambda v: blk(v[0]), [x])) < 1e-4


def test_block_weight_gradient():
    blk = as_float64(B.MS2Block(ctx(), 4, 8, stride=2, kernels=(1, 3)))
    x = _input((2, 2, 4, 6, 6))
    w0 = blk.conv1.weight.data.copy()

    def f(v):
        blk.conv1.weight = v[1]
        return blk(v[0])
    err = vjp_error(f, [x, w0], wrt={1})
    blk.conv1.weight = Var(w0, True)
    assert err[0] < 1e-4


def test_tdbn_gradients_and_scaled_target():
    bn = B.TdBN(3, lam=0.5)
    x = _input((2, 2, 3, 4, 4), lo=-2, hi=2)
    assert max(vjp_error(lambda v: bn(v[0]), [x])) < 1e-6
    y = bn(Var(x)).data
    np.testing.assert_allclose(y.std(axis=(0, 1, 3, 4)), 0.5, rtol=1e-4)


def test_tdbn_eval_needs_stats():
    bn = B.TdBN(2)
    bn.eval()
    with pytest.raises(RuntimeError, match="init_stats"):
        bn(Var(np.ones((1, 2, 3, 3))))
    bn.init_stats(1.0, 4.0)
    np.testing.assert_allclose(bn(Var(np.full((1, 2, 3, 3), 3.0))).data, (3 - 1) / np.sqrt(4 + 1e-5))
    with pytest.raises(ValueError, match="channels"):
        bn(Var(np.ones((1, 3, 3, 3))))


def test_context_lambda_multipliers():
    c = ctx(NeuronConfig.lif(v_th=0.5), merge_scale=0.6, bn_scale=2.0, residual_scale=0.8)
    assert c.bn(4).lam == pytest.approx(1.0)
    assert c.bn(4, merge=True).lam == pytest.approx(0.6)
    assert c.bn(4, residual=True).lam == pytest.approx(0.8)
    blk = B.MS2Block(c, 4, 8)
    assert blk.bn3.lam == pytest.approx(0.6) and blk.shortcut.bn.lam == pytest.approx(0.6)
    assert B.MSBlock(c, 8).bn2.lam == pytest.approx(0.8)


def test_block_shapes_and_width_checks():
    c = ctx()
    x = Var(_input((1, 2, 8, 8, 8)))
    assert B.MS2Block(c, 8, 16, stride=2)(x).shape == (1, 2, 16, 4, 4)
    assert B.MSBlock(c, 8)(x).shape == x.shape
    assert B.SMSUB(c, 8, 4)(x).shape == (1, 2, 4, 16, 16)
    with pytest.raises(ValueError):
        B.MS2Block(c, 8, 12)            # hidden width 6 does not split into 4 scales
    with pytest.raises(ValueError):
        B.Conv2d(3, 4, groups=2)
    with pytest.raises(ValueError, match="channels"):
        B.Conv2d(3, 4)(Var(np.ones((1, 2, 4, 4))))


def test_multiscale_conv_groups_have_their_own_kernels():
    msc = B.MultiScaleConv(ctx(), 8, 1, (1, 3, 5, 7))
    assert [cv.k for cv in msc.convs] == [1, 3, 5, 7]
    x = _input((1, 8, 9, 9))
    y = msc(Var(x)).data
    for i, cv in enumerate(msc.convs):
        ref = conv2d_loops(x[:, 2 * i:2 * i + 2], cv.weight.data, None, 1, cv.padding)
        np.testing.assert_allclose(y[:, 2 * i:2 * i + 2], ref, atol=1e-5)


def test_smsub_fire_before_upsample_is_equivalent():
    s = B.SMSUB(ctx(), 4, 2)
    x = _input((2, 1, 4, 5, 5), lo=-1, hi=5).astype(np.float32)
    y = s(Var(x)).data
    # reference order: upsample membranes, then fire
    up = s.n0(ag.upsample(Var(x), 2))
    acc = sum(bn(conv(up)).data for conv, bn in zip(s.convs, s.bns))
    ref = s.bn(s.fuse(s.n1(Var(acc.astype(np.float32))))).data
    np.testing.assert_allclose(y, ref, atol=1e-5)


def test_fold_bn_matches_eval_path():
    conv = B.Conv2d(3, 4, 3, bias=True, rng=np.random.default_rng(1), spike_input=False)
    conv.bias.data[...] = np.arange(4)
    bn = B.TdBN(4, lam=0.7)
    rng = np.random.default_rng(2)
    bn.gamma.data[...] = rng.uniform(0.5, 2, 4)
    bn.beta.data[...] = rng.standard_normal(4)
    bn.init_stats(rng.standard_normal(4), rng.uniform(0.5, 2, 4))
    bn.eval()
    x = rng.standard_normal((2, 3, 6, 6))
    ref = bn(conv(Var(x))).data
    spec = B.fold_bn(conv, bn)
    np.testing.assert_allclose(conv_forward(x, spec.weight, spec.bias, 1, 1), ref, atol=1e-5)


def test_compose_convs_equals_sequential_application():
    rng = np.random.default_rng(4)
    a = ConvSpec(3, 5, 3, padding=2, weight=rng.standard_normal((5, 3, 3, 3)), bias=rng.standard_normal(5))
    b = ConvSpec(5, 2, 3, padding=0, weight=rng.standard_normal((2, 5, 3, 3)), bias=rng.standard_normal(2))
    m = B.compose_convs(a, b)
    assert m.kernel == (5, 5) and m.padding == 2
    x = rng.standard_normal((2, 3, 7, 6))
    two = conv2d_loops(conv2d_loops(x, a.weight, a.bias, 1, 2), b.weight, b.bias, 1, 0)
    np.testing.assert_allclose(conv2d_loops(x, m.weight, m.bias, 1, 2), two, atol=1e-9)
    with pytest.raises(ValueError):
        B.compose_convs(a, ConvSpec(5, 2, 3, padding=1))
    with pytest.raises(ValueError):
        B.compose_convs(ConvSpec(3, 5, 3, stride=2), b)


def test_encoding_reparameterization():
    enc = B.Encoding(ctx(), 3, 8)
    img = Var(np.random.default_rng(0).random((2, 2, 3, 10, 10)).astype(np.float32))
    enc(img)                         # training pass fills running statistics
    with pytest.raises(RuntimeError):
        enc.reparameterize()
    enc.eval()
    ref, skip_ref = (v.data for v in enc(img))
    enc.reparameterize()
    got, skip = (v.data for v in enc.forward_merged(img))
    assert got.shape == ref.shape == (2, 2, 8, 10, 10) and skip.shape == skip_ref.shape
    np.testing.assert_allclose(got, ref, atol=1e-4)
    np.testing.assert_allclose(skip, skip_ref, atol=1e-4)


def test_prediction_infer_matches_training_path():
    pb = B.PredictionBlock(ctx(), 4)
    x = _input((3, 2, 4, 5, 5)).astype(np.float32)
    ref = pb(Var(x), (5, 5)).data
    np.testing.assert_allclose(pb.infer(Var(x), 3), ref, atol=1e-6)
    assert pb.conv.bias.data[0] == pytest.approx(np.log(0.05 / 0.95))


def test_spike_audit_flags_non_integer_inputs():
    conv = B.Conv2d(2, 2, 1, spike_max=4)
    conv.name = "c"
    rec = B.Recorder(audit=True)
    with B.recording(rec):
        conv(Var(np.array([0, 1, 4.0]).reshape(1, 1, 1, 3).repeat(2, axis=1)))
        with pytest.raises(B.SpikeAuditError):
            conv(Var(np.full((1, 2, 1, 3), 0.5)))
        with pytest.raises(B.SpikeAuditError):
            conv(Var(np.full((1, 2, 1, 3), 5.0)))


def test_recorder_tallies_firing_rate():
    layer = B.SpikeLayer(NeuronConfig.ilif(D=4))
    layer.name = "n"
    rec = B.Recorder()
    with B.recording(rec):
        layer(Var(np.array([[0.0, 2.0, 4.0, 9.0]])))
    assert rec.firing_rates()["n"] == pytest.approx((0 + 2 + 4 + 4) / 16)


def test_state_dict_roundtrip_and_mismatch():
    a, b = B.MSBlock(ctx(seed=1), 4), B.MSBlock(ctx(seed=2), 4)
    a.assign_names(), b.assign_names()
    b.load_state_dict(a.state_dict())
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    bad = dict(a.state_dict())
    bad.pop(next(iter(bad)))
    with pytest.raises((KeyError, ValueError)):
        b.load_state_dict(bad)
