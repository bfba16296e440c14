import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ms2edge import neuron as N
from ms2edge.autograd import Graph, Var
from ms2edge.neuron import NeuronConfig, NeuronState
from helpers import vjp_error
from oracles import neuron_scalar

CONFIGS = [NeuronConfig.lif(v_th=0.5), NeuronConfig.lif(v_th=1.0, beta=0.0), NeuronConfig.ilif(D=4),
           NeuronConfig.ilif(D=1, beta=0.9), NeuronConfig("IF", v_th=1.0)]


@pytest.mark.parametrize("cfg", CONFIGS, ids=lambda c: f"{c.kind}-b{c.beta}-D{c.D}")
def test_step_matches_scalar_oracle(cfg):
    rng = np.random.default_rng(3)
    x = rng.uniform(-2, 7, 500)
    h = rng.uniform(-1, 2, 500)
    step = N.ilif_step if cfg.kind == "ILIF" else N.lif_step
    s, nxt = step(x, NeuronState(h), cfg)
    ref = [neuron_scalar(a, b, cfg.kind, cfg.v_th, cfg.beta if cfg.kind != "IF" else 1.0, cfg.D)
           for a, b in zip(x, h)]
    np.testing.assert_array_equal(s, [r[0] for r in ref])
    np.testing.assert_allclose(nxt.h, [r[1] for r in ref], rtol=0, atol=1e-12)


def test_round_half_to_even_at_ties():
    cfg = NeuronConfig.ilif(D=4)
    u = np.array([0.5, 1.5, 2.5, 3.5, 4.5, -0.5])
    s, _ = N.ilif_step(u, NeuronState(np.zeros(6)), cfg)
    np.testing.assert_array_equal(s, [0, 2, 2, 4, 4, 0])


def test_step_kind_and_shape_checks():
    with pytest.raises(ValueError):
        N.lif_step(np.ones(2), NeuronState(np.zeros(2)), NeuronConfig.ilif())
    with pytest.raises(ValueError):
        N.ilif_step(np.ones(2), NeuronState(np.zeros(2)), NeuronConfig.lif())
    with pytest.raises(ValueError, match="shape"):
        N.lif_step(np.ones(2), NeuronState(np.zeros(3)), NeuronConfig.lif())


@pytest.mark.parametrize("kw", [dict(kind="X"), dict(v_th=0), dict(beta=1.5), dict(D=0), dict(a=0),
                                dict(kind="ILIF", v_th=0.5)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        NeuronConfig(**kw)


def test_config_properties():
    assert NeuronConfig.ilif(D=4).v_reset == 1.0 and NeuronConfig.ilif(D=4).max_spike == 4
    assert NeuronConfig.lif(v_th=0.5).v_reset == 0.5 and NeuronConfig.lif().max_spike == 1
    assert NeuronConfig("IF", beta=0.3).beta == 1.0
    assert NeuronConfig.ilif().with_beta(0.0).beta == 0.0


@pytest.mark.parametrize("cfg", CONFIGS[:4], ids=lambda c: f"{c.kind}-b{c.beta}")
def test_fire_unrolls_step(cfg):
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 3, (4, 2, 3)).astype(np.float32)
    s = N.fire(x, cfg).data
    state = NeuronState.zeros((2, 3))
    for t in range(4):
        st_, state = N._step(x[t], state, cfg)
        np.testing.assert_array_equal(s[t], st_)


def test_surrogate_windows():
    u = np.array([-0.1, 0.0, 0.2, 0.8, 1.0, 1.2, 1.5, 1.51, 4.0, 4.01])
    np.testing.assert_array_equal(N.ilif_surrogate_grad(u, NeuronConfig.ilif(D=4)),
                                  [0, 1, 1, 1, 1, 1, 1, 1, 1, 0])
    lif = NeuronConfig.lif(v_th=1.0, a=1.0)
    np.testing.assert_array_equal(N.lif_surrogate_grad(u, lif), [0, 0, 0, 1, 1, 1, 1, 0, 0, 0])
    wide = NeuronConfig.lif(v_th=1.0, a=2.0)
    np.testing.assert_allclose(N.lif_surrogate_grad(np.array([0.0, 2.0, 2.1]), wide), [0.5, 0.5, 0])


def _unrolled_backward(x, g, cfg):
    """Per-step chain rule written out with explicit partials, for comparison with fire's fused loop."""
    T = x.shape[0]
    h = np.zeros(x.shape[1:])
    us = []
    for t in range(T):
        u = h + x[t]
        us.append(u)
        s = N._spike(u, cfg)
        h = cfg.beta * (u - cfg.v_reset * s)
    gu_next = np.zeros(x.shape[1:])
    out = np.zeros_like(x)
    for t in reversed(range(T)):
        ds_du = N.surrogate_grad(us[t], cfg)
        # dL/du_t = dL/ds_t ds/du + dL/dh_{t+1} dh/du; dh_{t+1}/du_t = beta (1 - V_r ds/du); dL/dh_{t+1} = dL/du_{t+1}
        gu = g[t] * ds_du + gu_next * cfg.beta * (1 - cfg.v_reset * ds_du)
        out[t] = gu
        gu_next = gu
    return out


@pytest.mark.parametrize("cfg", [NeuronConfig.lif(v_th=0.5, beta=0.5), NeuronConfig.ilif(D=4, beta=0.5),
                                 NeuronConfig.ilif(D=2, beta=0.0)], ids=lambda c: f"{c.kind}-b{c.beta}")
def test_fire_backward_matches_unrolled_chain_rule(cfg):
    rng = np.random.default_rng(11)
    x = rng.uniform(-0.5, 3, (5, 3, 4))
    g = rng.standard_normal(x.shape)
    v = Var(x, requires_grad=True)
    with Graph() as gr:
        s = N.fire(v, cfg)
    gr.backward(s, seed=g)
    np.testing.assert_allclose(v.grad, _unrolled_backward(x, g, cfg), atol=1e-12)


@pytest.mark.parametrize("cfg", [NeuronConfig.lif(v_th=0.5, beta=0.5, a=1.0), NeuronConfig.ilif(D=4, beta=0.5)],
                         ids=lambda c: c.kind)
def test_smooth_forward_finite_differences(cfg):
    # with the surrogate's antiderivative as forward, the surrogate backward is the true gradient
    rng = np.random.default_rng(2)
    x = rng.uniform(0.05, 0.95, (3, 4)) * (cfg.D if cfg.kind == "ILIF" else 1.0)
    assert max(vjp_error(lambda v: N.fire(v[0], cfg, smooth=True), [x], eps=1e-7)) < 1e-5


def test_mad_decode_is_time_mean():
    rng = np.random.default_rng(0)
    xs = rng.standard_normal((7, 3, 2))
    np.testing.assert_allclose(N.mad_decode(list(xs)), xs.mean(axis=0), atol=1e-12)
    with pytest.raises(ValueError):
        N.mad_decode([])
    with pytest.raises(ValueError):
        N.mad_decode([np.ones(2), np.ones(3)])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10000))
def test_expand_to_binary_preserves_mass(D, seed):
    s = np.random.default_rng(seed).integers(0, D + 1, (3, 4)).astype(np.float32)
    b = N.expand_to_binary(s, D)
    assert b.shape == (D, 3, 4) and set(np.unique(b)) <= {0.0, 1.0}
    np.testing.assert_array_equal(b.sum(axis=0), s)
    # earliest first: a micro-step never fires after a silent one
    assert np.all(np.diff(b, axis=0) <= 0)


def test_expand_to_binary_rejects_non_integer():
    with pytest.raises(ValueError):
        N.expand_to_binary(np.array([0.5]), 4)
    with pytest.raises(ValueError):
        N.expand_to_binary(np.array([5.0]), 4)


def test_quantization_error_profile_shapes_and_values():
    prof = N.quantization_error_profile(NeuronConfig.ilif(D=4), (0.0, 2.0), 5)
    np.testing.assert_allclose(prof[:, 0], [0, 0.5, 1, 1.5, 2])
    np.testing.assert_allclose(prof[:, 1], [0, 0.5, 0, 0.5, 0])     # 0.5 rounds to 0, 1.5 to 2
    prof = N.quantization_error_profile(NeuronConfig.lif(v_th=1.0), (0.0, 2.0), 5)
    np.testing.assert_allclose(prof[:, 1], [0, 0.5, 0, 0.5, 1])
    # beyond D the I-LIF error grows linearly
    assert N.mean_quantization_error(NeuronConfig.ilif(D=4), [6.0]) == 2.0
    with pytest.raises(ValueError):
        N.quantization_error_profile(NeuronConfig.ilif(), (0, 1), 1)


def test_write_table(tmp_path):
    p = tmp_path / "t.tsv"
    N.write_table(p, [[0.0, 1.0], [0.5, 0.25]])
    assert p.read_text().splitlines() == ["u\terror", "0.000000\t1.000000", "0.500000\t0.250000"]
