"""Operation counts, firing rates and the AC/MAC energy model.

    E_SNN = T * (fr * E_AC * eta_AC + E_MAC * eta_MAC)
    E_ANN = E_MAC * eta_total

A convolution that reads integer spikes is charged as accumulates. An
integer spike of value v costs v accumulates, which is the same as
expanding it into D binary micro-steps, so such a layer has
eta_AC = D * ops and fr = spike mass / (D * inputs). Layers reading real
values (the merged encoding convolution, the skip-path convolution and the
membrane-average accumulation) are charged as MACs.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .blocks import Recorder, TdBN

FLOAT32 = {"E_MAC": 4.6e-12, "E_AC": 0.9e-12}
INT8 = {"E_MAC": 0.23e-12, "E_AC": 0.03e-12}
CONSTANTS = {"float32": FLOAT32, "int8": INT8}


def conv_ops(k_h, k_w, c_in, c_out, h_out, w_out, groups=1):
    return k_h * k_w * (c_in // groups) * c_out * h_out * w_out


def energy_estimate(T, fr, eta_ac, eta_mac, constants=FLOAT32):
    """Joules for one inference: T * (fr * E_AC * eta_AC + E_MAC * eta_MAC)."""
    return T * (fr * constants["E_AC"] * eta_ac + constants["E_MAC"] * eta_mac)


def ann_energy(eta_total, constants=FLOAT32):
    return constants["E_MAC"] * eta_total


@dataclass
class LayerCost:
    name: str
    kind: str            # "AC" or "MAC"
    ops: int             # synaptic operations per image per step
    eta_ac: int
    eta_mac: int
    fr: float = 0.0


def _layers_from(rec: Recorder, D):
    out = []
    for name, r in rec.convs.items():
        per_image = r["ops"]
        fr = r["input_sum"] / (r["spike_max"] * r["input_count"]) if r["spike_input"] and r["input_count"] else 0.0
        if r["spike_input"]:
            out.append(LayerCost(name, "AC", per_image, r["spike_max"] * per_image, 0, fr))
        else:
            out.append(LayerCost(name, "MAC", per_image, 0, per_image))
    return out


def _mad_cost(net, hw):
    h, w = hw
    return LayerCost("preds.0.mad", "MAC", h * w, 0, h * w)


def _inference_copy(net):
    clone = copy.deepcopy(net)
    for bn in clone.tdbns():
        if not bn.stats_ready:
            bn.init_stats()
    return clone.prepare_inference()


def count_ops(net, input_shape):
    """Static per-layer operation counts for one image of shape [C,H,W]."""
    clone = _inference_copy(net)
    rec = Recorder()
    clone.forward_infer_batch(np.zeros((1,) + tuple(input_shape), np.float32), audit=False, recorder=rec)
    return _layers_from(rec, net.spec.D) + [_mad_cost(net, _padded(input_shape[-2:]))]


def _padded(hw):
    from .network import STRIDE
    return tuple(int(np.ceil(v / STRIDE) * STRIDE) for v in hw)


def measure_firing_rates(net, images, batch_size=8):
    """Per-layer input firing rates of the spike-reading convolutions, and the
    network-global neuron firing rate, over `images` [N,3,H,W]."""
    if net.training:
        raise RuntimeError("measure firing rates in inference mode (call prepare_inference())")
    rec = Recorder(audit=True)
    images = np.asarray(images, np.float32)
    for s in range(0, len(images), batch_size):
        net.forward_infer_batch(images[s:s + batch_size], audit=True, recorder=rec)
    spikes = sum(r["spike_sum"] for r in rec.neurons.values())
    cap = sum(r["spike_max"] * r["count"] for r in rec.neurons.values())
    return rec, (spikes / cap if cap else 0.0)


@dataclass
class EnergyReport:
    T: int
    D: int
    layers: list
    global_fr: float
    constants: dict = field(default_factory=lambda: dict(FLOAT32))
    images: int = 0

    @property
    def eta_ac(self):
        return sum(l.eta_ac for l in self.layers)

    @property
    def eta_mac(self):
        return sum(l.eta_mac for l in self.layers)

    @property
    def layerwise_fr(self):
        """AC-weighted mean of the per-layer rates."""
        return sum(l.fr * l.eta_ac for l in self.layers) / self.eta_ac if self.eta_ac else 0.0

    def snn_joules(self, per_layer=True):
        if per_layer:
            ac = sum(energy_estimate(self.T, l.fr, l.eta_ac, 0, self.constants) for l in self.layers)
            return ac + energy_estimate(self.T, 0.0, 0, self.eta_mac, self.constants)
        return energy_estimate(self.T, self.global_fr, self.eta_ac, self.eta_mac, self.constants)

    def ann_joules(self):
        return ann_energy(sum(l.ops for l in self.layers), self.constants)

    def totals_mj(self):
        return {"snn_per_layer_mJ": self.snn_joules(True) * 1e3,
                "snn_global_fr_mJ": self.snn_joules(False) * 1e3,
                "ann_mJ": self.ann_joules() * 1e3}

    def table(self):
        lines = ["layer\tkind\tops\teta_ac\teta_mac\tfr"]
        for l in self.layers:
            lines.append(f"{l.name}\t{l.kind}\t{l.ops}\t{l.eta_ac}\t{l.eta_mac}\t{l.fr:.6f}")
        return "\n".join(lines)

    def summary(self):
        t = self.totals_mj()
        return "\n".join([
            f"T={self.T} D={self.D} images={self.images} "
            f"E_MAC={self.constants['E_MAC'] * 1e12:g}pJ E_AC={self.constants['E_AC'] * 1e12:g}pJ",
            f"eta_AC={self.eta_ac} eta_MAC={self.eta_mac}",
            f"firing rate: per-layer (AC-weighted) {self.layerwise_fr:.4f}, network-global {self.global_fr:.4f}",
            f"SNN energy per image: {t['snn_per_layer_mJ']:.6g} mJ (per-layer fr), "
            f"{t['snn_global_fr_mJ']:.6g} mJ (global fr)",
            f"ANN-equivalent energy per image: {t['ann_mJ']:.6g} mJ"])


def profile(net, images, constants=FLOAT32, batch_size=8) -> EnergyReport:
    """Energy report of `net` averaged over images [N,3,H,W] (all the same size)."""
    images = np.asarray(images, np.float32)
    if net.training:
        net = _inference_copy(net)
    rec, gfr = measure_firing_rates(net, images, batch_size)
    layers = _layers_from(rec, net.spec.D) + [_mad_cost(net, _padded(images.shape[-2:]))]
    return EnergyReport(net.spec.T, net.spec.D, layers, gfr, dict(constants), len(images))
