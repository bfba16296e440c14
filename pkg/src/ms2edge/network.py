"""MS2ResNet backbones and the U-shaped MS2Edge detector."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from . import container
from .autograd import Var
from .blocks import (SMSUB, BlockContext, Encoding, MDSBlock, Module, MS2Block, MSBlock, PredictionBlock,
                     Recorder, SkipBlock, TdBN, recording)
from .neuron import NeuronConfig
from .tensor import bilinear_resize

STAGE_PLANS = {
    "MS2ResNet14": (("B2",), ("B2",), ("B2",), ("B2",)),
    "MS2ResNet26": (("B2", "B1"),) * 4,
    "MS2ResNet42": (("B2", "B1", "MS"),
                    ("B2", "MS", "B1", "MS"),
                    ("B2", "MS", "MS", "B1", "MS", "MS"),
                    ("B2", "B1", "MS")),
}
BASE_CHANNELS = (64, 128, 256, 512, 512)
STRIDE = 16     # total downsampling of the backbone


@dataclass
class NetworkSpec:
    backbone: str = "MS2ResNet14"
    width: float = 0.125
    T: int = 1
    neuron: NeuronConfig = field(default_factory=NeuronConfig.ilif)
    kernels: tuple = (1, 3, 5, 7)
    # tdBN target multipliers, calibrated so freshly built blocks start near phi * alpha2 = 1
    merge_scale: float = 0.58
    bn_scale: float = 1.0
    residual_scale: float = 0.82
    in_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in STAGE_PLANS:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {sorted(STAGE_PLANS)}")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if isinstance(self.neuron, dict):
            self.neuron = NeuronConfig(**self.neuron)
        self.kernels = tuple(self.kernels)
        groups = len(self.kernels)
        for c in self.channels()[1:]:
            if (c // 2) % groups:
                raise ValueError(f"stage width {c} gives hidden width {c // 2}, not divisible by "
                                 f"{groups} scale groups")

    @property
    def D(self):
        return self.neuron.max_spike

    def channels(self):
        return tuple(max(1, int(round(c * self.width))) for c in BASE_CHANNELS)

    @property
    def plan(self):
        return STAGE_PLANS[self.backbone]

    def to_dict(self):
        d = asdict(self)
        d["kernels"] = list(self.kernels)
        return d


@dataclass
class EdgeMap:
    values: np.ndarray
    provenance: str = "single-scale"

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or v.shape[0] != 1:
            raise ValueError(f"edge map must be [1,H,W], got {v.shape}")
        if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
            raise ValueError("edge map values must lie in [0, 1]")
        self.values = v


def _block(ctx, kind, cin, cout, kernels):
    if kind == "B2":
        return MS2Block(ctx, cin, cout, stride=2, kernels=kernels)
    if kind == "B1":
        return MS2Block(ctx, cin, cout, stride=1, kernels=kernels)
    if kind == "MS":
        if cin != cout:
            raise ValueError("an MS-Block cannot change width")
        return MSBlock(ctx, cout)
    raise ValueError(f"unknown block kind {kind!r}")


class MS2Edge(Module):
    """Backbone, bottleneck, skip blocks, SMSUB decoder and prediction blocks."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        ctx = BlockContext(spec.neuron, np.random.default_rng(spec.seed), spec.merge_scale, spec.bn_scale,
                           spec.residual_scale)
        ch = spec.channels()
        self.encoding = Encoding(ctx, spec.in_channels, ch[0])
        self.stages = []
        cin = ch[0]
        for s, kinds in enumerate(spec.plan):
            blocks = []
            for kind in kinds:
                blocks.append(_block(ctx, kind, cin, ch[s + 1], spec.kernels))
                cin = ch[s + 1]
            self.stages.append(_Seq(blocks))
        self.bottleneck = _Seq([MDSBlock(ctx, ch[4], ch[4]), MSBlock(ctx, ch[4])])
        dec_out = [ch[3], ch[2], ch[1], ch[0]]
        dec_in = [ch[4]] + dec_out[:-1]
        skip_src = [ch[3], ch[2], ch[1], ch[0]]
        self.decoder = [SMSUB(ctx, a, b) for a, b in zip(dec_in, dec_out)]
        self.skips = [SkipBlock(ctx, a, b) for a, b in zip(skip_src, dec_out)]
        # preds[0] reads the full-resolution decoder output; the rest are side outputs
        self.preds = [PredictionBlock(ctx, c) for c in reversed(dec_out)]
        self.assign_names()

    # structure -----------------------------------------------------------
    def blocks(self):
        """Backbone and bottleneck blocks in execution order."""
        out = [b for st in self.stages for b in st.blocks]
        return out + list(self.bottleneck.blocks)

    def tdbns(self):
        return [m for _, m in self.named_modules() if isinstance(m, TdBN)]

    # forward -------------------------------------------------------------
    def _image_seq(self, images):
        x = np.asarray(images, np.float32)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected {self.spec.in_channels} input channels, got {x.shape[1]}")
        h, w = x.shape[-2:]
        ph, pw = (-h) % STRIDE, (-w) % STRIDE
        if ph or pw:
            x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)))
        return np.ascontiguousarray(np.broadcast_to(x[None], (self.spec.T,) + x.shape)), (h, w)

    def _trunk(self, m_back, m_skip):
        feats = []
        h = m_back
        for st in self.stages:
            h = st(h)
            feats.append(h)
        h = self.bottleneck(h)
        skips = [feats[2], feats[1], feats[0], m_skip]
        dec = []
        for up, sk, src in zip(self.decoder, self.skips, skips):
            h = ag.add(up(h), sk(src))
            dec.append(h)
        return dec[::-1]        # full resolution first

    def forward_train(self, images):
        """Four side outputs [B,1,H,W] (Vars); preds[0] is the full-resolution one.

        Uses the current train/eval mode of the normalization layers.
        """
        x, (h, w) = self._image_seq(images)
        dec = self._trunk(*self.encoding(Var(x)))
        hw = x.shape[-2:]
        outs = [p(d, hw) for p, d in zip(self.preds, dec)]
        if hw != (h, w):
            outs = [ag.crop_to(o, h, w) for o in outs]
        return outs

    def prepare_inference(self):
        self.eval()
        self.encoding.reparameterize()
        return self

    def forward_infer_batch(self, images, audit=True, recorder=None, batch_size=None):
        """Spike-driven inference: merged encoding, first prediction block only,
        membrane averaging folded into the last convolution. Returns [B,1,H,W].

        With `batch_size`, images are run in chunks of that size (bounded memory).
        """
        if self.training:
            raise RuntimeError("forward_infer needs eval mode; call prepare_inference()")
        rec = recorder if recorder is not None else Recorder(audit=audit)
        if batch_size is not None and np.ndim(images) == 4 and len(images) > batch_size:
            return np.concatenate([self.forward_infer_batch(images[s:s + batch_size], audit, rec)
                                   for s in range(0, len(images), batch_size)])
        self.encoding.reparameterize()     # cheap; keeps the fold in sync with the weights
        rec.audit = audit
        x, (h, w) = self._image_seq(images)
        with recording(rec):
            m_back, m_skip = self.encoding.forward_merged(Var(x))
            dec = self._trunk(m_back, m_skip)
            p = self.preds[0].infer(dec[0], self.spec.T)
        return p[..., :h, :w]

    def forward_infer(self, image, audit=True) -> EdgeMap:
        return EdgeMap(self.forward_infer_batch(image, audit)[0])

    def multi_scale_infer(self, image, scales=(0.5, 1.0, 2.0)) -> EdgeMap:
        img = np.asarray(image, np.float32)
        h, w = img.shape[-2:]
        maps = []
        for s in scales:
            hs, ws = max(1, int(round(h * s))), max(1, int(round(w * s)))
            x = bilinear_resize(img, hs, ws) if (hs, ws) != (h, w) else img
            m = self.forward_infer_batch(x[None])[0]
            maps.append(bilinear_resize(m, h, w) if (hs, ws) != (h, w) else m)
        fused = np.clip(np.mean(maps, axis=0), 0, 1).astype(np.float32)
        return EdgeMap(fused, "pyramid-fused")

    # calibration and bookkeeping -----------------------------------------
    def calibrate(self, images):
        """Set running statistics to the batch statistics of `images`."""
        bns = self.tdbns()
        saved = [bn.momentum for bn in bns]
        for bn in bns:
            bn.momentum = 0.0
        mode = self.training
        self.train()
        try:
            self.forward_train(images)
        finally:
            for bn, m in zip(bns, saved):
                bn.momentum = m
            self.train(mode)
        return self

    def inference_param_count(self):
        enc = self.encoding
        if enc.merged is None:
            raise RuntimeError("reparameterize first")
        pruned = enc.param_count() + sum(p.param_count() for p in self.preds[1:])
        return self.param_count() - pruned + enc.merged.param_count() + enc.skip_conv.param_count()

    def summary(self, hw=(64, 64)):
        rec = Recorder()
        mode = self.training
        saved = [(b, b.copy()) for _, b in self.named_buffers()]
        ready = [(bn, bn.stats_ready) for bn in self.tdbns()]
        self.train()
        try:
            with recording(rec):
                self.forward_train(np.zeros((1, self.spec.in_channels, *hw), np.float32))
        finally:
            self.train(mode)
            for b, v in saved:
                b[...] = v
            for bn, r in ready:
                bn.stats_ready = r
        lines = [f"{self.spec.backbone} width={self.spec.width} T={self.spec.T} "
                 f"neuron={self.spec.neuron.kind} D={self.spec.D}",
                 f"parameters: {self.param_count()}",
                 f"{'layer':48s} {'out shape':>16s} {'params':>10s} {'ops/step':>12s}"]
        mods = {m.name: m for _, m in self.named_modules()}
        for name, r in rec.convs.items():
            conv = mods[name]
            n = conv.weight.data.size + (0 if conv.bias is None else conv.bias.data.size)
            lines.append(f"{name:48s} {str(tuple(r['out_shape'])):>16s} {n:>10d} {r['ops']:>12d}")
        return "\n".join(lines)


class _Seq(Module):
    def __init__(self, blocks):
        self.blocks = list(blocks)

    def __call__(self, x):
        for b in self.blocks:
            x = b(x)
        return x


def build(spec: NetworkSpec) -> MS2Edge:
    return MS2Edge(spec)


def save_checkpoint(net: MS2Edge, path, extra=None, meta=None):
    """Parameters, buffers and any `extra` named arrays in the tensor container."""
    tensors = {f"state/{k}": v for k, v in net.state_dict().items()}
    for k, v in (extra or {}).items():
        tensors[k] = v
    container.save(path, tensors, {"spec": net.spec.to_dict(), **(meta or {})})


def load_checkpoint(path):
    """Returns (net, meta, extra) with the network's state restored."""
    tensors, meta = container.load(path)
    if "spec" not in meta:
        raise ValueError(f"{path}: checkpoint metadata has no network spec")
    net = build(NetworkSpec(**meta["spec"]))
    state = {k[len("state/"):]: v for k, v in tensors.items() if k.startswith("state/")}
    net.load_state_dict(state)
    extra = {k: v for k, v in tensors.items() if not k.startswith("state/")}
    return net, meta, extra
