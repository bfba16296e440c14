import numpy as np
import pytest

from ms2edge import energy as En
from ms2edge.blocks import Conv2d, Recorder, SpikeLayer, recording
from ms2edge.autograd import Var
from ms2edge.network import NetworkSpec, build
from ms2edge.neuron import NeuronConfig
from oracles import hand_energy


def test_constants():
    assert En.FLOAT32 == {"E_MAC": 4.6e-12, "E_AC": 0.9e-12}
    assert En.INT8 == {"E_MAC": 0.23e-12, "E_AC": 0.03e-12}


def test_energy_formula_reference_point():
    # one step, 10% firing, 1000 accumulates: 0.1 * 0.9 pJ * 1000 = 90 pJ
    assert En.energy_estimate(1, 0.1, 1000, 0) == pytest.approx(90e-12, rel=1e-12)
    assert En.energy_estimate(2, 0.0, 0, 10) == pytest.approx(2 * 10 * 4.6e-12)
    assert En.ann_energy(100, En.INT8) == pytest.approx(23e-12)


def test_conv_ops():
    assert En.conv_ops(3, 3, 4, 8, 10, 10) == 9 * 4 * 8 * 100
    assert En.conv_ops(3, 3, 4, 8, 10, 10, groups=2) == 9 * 2 * 8 * 100


def test_toy_two_conv_network_hand_tally():
    # real-valued encoding conv (MAC) -> I-LIF -> spike conv (AC)
    rng = np.random.default_rng(0)
    c1 = Conv2d(2, 4, 3, rng=rng, spike_input=False)
    c2 = Conv2d(4, 3, 1, rng=rng, spike_max=4)
    c1.name, c2.name = "c1", "c2"
    n = SpikeLayer(NeuronConfig.ilif(D=4))
    n.name = "n"
    x = rng.random((1, 1, 2, 5, 5)) * 4
    rec = Recorder(audit=True)
    with recording(rec):
        s = n(c1(Var(x)))
        c2(s)
    layers = En._layers_from(rec, 4)
    spikes = s.data
    fr = spikes.sum() / (4 * spikes.size)
    ops1, ops2 = 9 * 2 * 4 * 25, 1 * 4 * 3 * 25
    assert [(l.kind, l.ops, l.eta_ac, l.eta_mac) for l in layers] == [("MAC", ops1, 0, ops1),
                                                                      ("AC", ops2, 4 * ops2, 0)]
    assert layers[1].fr == pytest.approx(fr)
    rep = En.EnergyReport(1, 4, layers, fr)
    expected = hand_energy(1, [(0.0, 0, ops1), (fr, 4 * ops2, 0)])
    assert rep.snn_joules() == pytest.approx(expected, rel=1e-12)
    assert rep.snn_joules(per_layer=False) == pytest.approx(expected, rel=1e-12)  # one AC layer: same rate
    assert rep.ann_joules() == pytest.approx(4.6e-12 * (ops1 + ops2))


def test_network_profile_counts_and_rates():
    net = build(NetworkSpec())
    imgs = np.random.default_rng(1).random((2, 3, 32, 32)).astype(np.float32)
    net.calibrate(imgs)
    rep = En.profile(net, imgs)
    assert rep.images == 2 and rep.T == 1 and rep.D == 4
    kinds = {l.name: l.kind for l in rep.layers}
    assert kinds["encoding.merged"] == kinds["encoding.skip"] == kinds["preds.0.mad"] == "MAC"
    assert sum(k == "AC" for k in kinds.values()) > 20
    assert all(0 <= l.fr <= 1 for l in rep.layers)
    assert 0 < rep.global_fr < 1 and 0 < rep.layerwise_fr < 1
    # static counts agree with the measured run
    static = {l.name: l.ops for l in En.count_ops(net, (3, 32, 32))}
    assert static == {l.name: l.ops for l in rep.layers}
    t = rep.totals_mj()
    assert t["snn_per_layer_mJ"] < t["ann_mJ"]
    assert "eta_AC" in rep.summary() and rep.table().startswith("layer\tkind")
    # profiling works on a copy: the net keeps its mode and statistics
    assert net.training


def test_time_steps_scale_energy():
    r1 = En.EnergyReport(1, 4, [En.LayerCost("a", "AC", 10, 40, 0, 0.2)], 0.2)
    r2 = En.EnergyReport(3, 4, [En.LayerCost("a", "AC", 10, 40, 0, 0.2)], 0.2)
    assert r2.snn_joules() == pytest.approx(3 * r1.snn_joules())


def test_firing_rates_need_eval_mode():
    net = build(NetworkSpec())
    with pytest.raises(RuntimeError):
        En.measure_firing_rates(net, np.zeros((1, 3, 32, 32), np.float32))
