"""Layers and composite blocks of the spiking edge detector.

Every block consumes and produces *membrane* tensors shaped [T,B,C,H,W]:
the block's leading neuron fires its input, and its output is a
real-valued membrane sum (residual + shortcut) that the next block's
leading neuron fires in turn. Convolutions therefore only ever see spikes,
except the encoding convolutions that read the image.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Var, value
from .neuron import NeuronConfig, fire
from .tensor import ConvSpec

_local = threading.local()


class SpikeAuditError(RuntimeError):
    """A convolution that should consume spikes received a non-integer value."""


# activity recording ----------------------------------------------------------

class Recorder:
    """Per-layer activity of forward passes run inside `recording(rec)`."""

    def __init__(self, audit=False):
        self.audit = audit
        self.convs = {}
        self.neurons = {}

    def on_conv(self, conv: "Conv2d", x, y):
        lead = x.shape[:-3]
        T, B = (lead[0], lead[1]) if len(lead) == 2 else (1, lead[0] if lead else 1)
        if self.audit and conv.spike_input:
            bad = (x != np.round(x)) | (x < 0) | (x > conv.spike_max)
            if bad.any():
                raise SpikeAuditError(
                    f"{conv.name}: {int(bad.sum())} input values are not integer spikes in [0, {conv.spike_max}]")
        r = self.convs.setdefault(conv.name, dict(
            ops=conv.ops(*y.shape[-2:]), spike_input=conv.spike_input, spike_max=conv.spike_max,
            input_sum=0.0, input_count=0, images=0, T=T, out_shape=y.shape[-3:]))
        r["input_sum"] += float(x.sum(dtype=np.float64))
        r["input_count"] += int(x.size)
        r["images"] += B

    def on_neuron(self, layer: "SpikeLayer", s):
        r = self.neurons.setdefault(layer.name, dict(spike_sum=0.0, count=0, spike_max=layer.cfg.max_spike))
        r["spike_sum"] += float(s.sum(dtype=np.float64))
        r["count"] += int(s.size)

    def firing_rates(self):
        return {k: r["spike_sum"] / (r["spike_max"] * r["count"]) for k, r in self.neurons.items() if r["count"]}


def _recorder():
    return getattr(_local, "recorder", None)


@contextlib.contextmanager
def recording(rec: Recorder):
    prev = _recorder()
    _local.recorder = rec
    try:
        yield rec
    finally:
        _local.recorder = prev


# module base -----------------------------------------------------------------

class Module:
    training = True
    name = ""

    def _items(self):
        for k, v in vars(self).items():
            if isinstance(v, (list, tuple)):
                for i, m in enumerate(v):
                    yield f"{k}.{i}", m
            else:
                yield k, v

    def named_modules(self, prefix=""):
        yield prefix, self
        for k, v in self._items():
            if isinstance(v, Module):
                yield from v.named_modules(f"{prefix}{k}.")

    def named_parameters(self):
        for p, m in self.named_modules():
            for k, v in vars(m).items():
                if isinstance(v, Var) and v.requires_grad:
                    yield p + k, v

    def parameters(self):
        return [v for _, v in self.named_parameters()]

    def named_buffers(self):
        for p, m in self.named_modules():
            for k, v in getattr(m, "buffers", {}).items():
                yield p + k, v

    def state_dict(self):
        d = {k: v.data for k, v in self.named_parameters()}
        d.update(dict(self.named_buffers()))
        return d

    def load_state_dict(self, state):
        own = {k: v for k, v in self.named_parameters()}
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for k, v in own.items():
            if state[k].shape != v.data.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {v.data.shape}")
            v.data = np.array(state[k], dtype=v.data.dtype)
        for k, b in bufs.items():
            b[...] = state[k]
        for _, m in self.named_modules():
            if isinstance(m, TdBN):
                m.stats_ready = True

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def param_count(self):
        return int(sum(p.data.size for p in self.parameters()))

    def assign_names(self, prefix=""):
        for p, m in self.named_modules(prefix):
            m.name = p.rstrip(".") or type(m).__name__
        return self


# layers ----------------------------------------------------------------------

class Conv2d(Module):
    """Zero-padded convolution; 'same' padding by default for stride-1 geometry."""

    def __init__(self, cin, cout, k=3, stride=1, dilation=1, groups=1, padding=None, bias=False,
                 rng=None, spike_input=True, spike_max=4):
        if cin % groups or cout % groups:
            raise ValueError(f"channels {cin}->{cout} not divisible by groups {groups}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.dilation, self.groups = stride, dilation, groups
        self.padding = dilation * (k - 1) // 2 if padding is None else padding
        bound = 1.0 / np.sqrt(cin // groups * k * k)
        self.weight = Var(rng.uniform(-bound, bound, (cout, cin // groups, k, k)).astype(np.float32), True)
        self.bias = Var(np.zeros(cout, np.float32), True) if bias else None
        self.spike_input = spike_input
        self.spike_max = spike_max

    def ops(self, ho, wo):
        """Synaptic operations per image per time step."""
        return self.k * self.k * (self.cin // self.groups) * self.cout * ho * wo

    def spec(self) -> ConvSpec:
        return ConvSpec(self.cin, self.cout, (self.k, self.k), self.stride, self.padding, self.dilation,
                        self.groups, self.weight.data.copy(),
                        None if self.bias is None else self.bias.data.copy())

    def __call__(self, x):
        if value(x).shape[-3] != self.cin:
            raise ValueError(f"{self.name}: input has {value(x).shape[-3]} channels, expected {self.cin}")
        y = ag.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)
        rec = _recorder()
        if rec is not None:
            rec.on_conv(self, value(x), y.data)
        return y


class TdBN(Module):
    """Threshold-dependent batch norm: statistics joint over (T, B, H, W).

    y = lam * gamma * (x - mean) / sqrt(var + eps) + beta, lam = V_th.
    """

    def __init__(self, channels, lam=1.0, eps=1e-5, momentum=0.9):
        self.channels = channels
        self.lam = lam
        self.eps = eps
        self.momentum = momentum
        self.gamma = Var(np.ones(channels, np.float32), True)
        self.beta = Var(np.zeros(channels, np.float32), True)
        self.buffers = {"running_mean": np.zeros(channels, np.float32),
                        "running_var": np.ones(channels, np.float32)}
        self.stats_ready = False

    def init_stats(self, mean=0.0, var=1.0):
        self.buffers["running_mean"][...] = mean
        self.buffers["running_var"][...] = var
        self.stats_ready = True

    def __call__(self, x):
        if value(x).shape[-3] != self.channels:
            raise ValueError(f"{self.name}: input has {value(x).shape[-3]} channels, expected {self.channels}")
        if not self.training and not self.stats_ready:
            raise RuntimeError(f"{self.name}: eval-mode normalization before any training update; "
                               "run a training pass or call init_stats()")
        running = (self.buffers["running_mean"], self.buffers["running_var"])
        y = ag.batch_norm(x, self.gamma, self.beta, self.lam, self.eps, self.training, running, self.momentum)
        if self.training:
            self.stats_ready = True
        return y

    def affine(self):
        """(a, b) such that eval-mode output = a * x + b per channel."""
        rv = self.buffers["running_var"].astype(np.float64)
        a = self.lam * self.gamma.data.astype(np.float64) / np.sqrt(rv + self.eps)
        b = self.beta.data.astype(np.float64) - a * self.buffers["running_mean"]
        return a, b


def tdbn_forward(x, bn: TdBN, mode="train"):
    bn.train(mode == "train")
    return bn(x)


class SpikeLayer(Module):
    """A layer of IF/LIF/I-LIF neurons applied over the time axis."""

    def __init__(self, cfg: NeuronConfig):
        self.cfg = cfg
        self.smooth = False

    def __call__(self, x):
        s = fire(x, self.cfg, self.smooth)
        rec = _recorder()
        if rec is not None:
            rec.on_neuron(self, s.data)
        return s


def fold_bn(conv: Conv2d, bn: TdBN) -> ConvSpec:
    """Fold an eval-mode TdBN into the preceding convolution."""
    a, b = bn.affine()
    spec = conv.spec()
    w = spec.weight.astype(np.float64) * a[:, None, None, None]
    bias = b + (0.0 if spec.bias is None else a * spec.bias)
    spec.weight, spec.bias = w, bias
    return spec


# composite blocks ------------------------------------------------------------

@dataclass
class BlockContext:
    """Shared construction settings for a network's blocks."""
    cfg: NeuronConfig
    rng: np.random.Generator
    merge_scale: float = 1.0     # multiplies lambda of the tdBNs whose outputs are summed
    bn_scale: float = 1.0        # multiplies lambda = V_th of every tdBN
    residual_scale: float = 1.0  # multiplies lambda of the residual tdBN of identity-shortcut blocks

    @property
    def lam(self):
        return self.cfg.v_th * self.bn_scale

    def conv(self, cin, cout, k=1, **kw):
        return Conv2d(cin, cout, k, rng=self.rng, spike_max=self.cfg.max_spike, **kw)

    def bn(self, c, merge=False, residual=False):
        f = self.residual_scale if residual else (self.merge_scale if merge else 1.0)
        return TdBN(c, self.lam * f)

    def neuron(self):
        return SpikeLayer(self.cfg)


class MDSShortcut(Module):
    """conv -> tdBN on the block's input spikes, added at membrane level."""

    def __init__(self, ctx: BlockContext, cin, cout, stride=1):
        k = 3 if stride > 1 else 1
        self.conv = ctx.conv(cin, cout, k, stride=stride)
        self.bn = ctx.bn(cout, merge=True)

    def __call__(self, s):
        return self.bn(self.conv(s))


class MultiScaleConv(Module):
    """Equal channel groups, each convolved with its own kernel size, concatenated."""

    def __init__(self, ctx: BlockContext, channels, stride, kernels):
        if channels % len(kernels):
            raise ValueError(f"{channels} channels cannot be split into {len(kernels)} scale groups")
        self.group = channels // len(kernels)
        self.convs = [ctx.conv(self.group, self.group, k, stride=stride) for k in kernels]

    def __call__(self, s):
        if len(self.convs) == 1:
            return self.convs[0](s)
        parts = [c(ag.slice_axis(s, -3, i * self.group, (i + 1) * self.group)) for i, c in enumerate(self.convs)]
        return ag.concat(parts, axis=-3)


class MS2Block(Module):
    """Multi-scale residual block with an MDS shortcut.

    residual: fire -> 1x1 -> tdBN -> fire -> grouped {1,3,5,7} (stride) -> tdBN
              -> fire -> 1x1 -> tdBN
    output  : residual + shortcut(fired input)
    Block1 uses stride 1 and a 1x1 shortcut, Block2 stride 2 and a 3x3 one.
    """

    def __init__(self, ctx: BlockContext, cin, cout, stride=1, kernels=(1, 3, 5, 7), hidden=0.5):
        mid = int(round(cout * hidden))
        if mid % len(kernels):
            raise ValueError(f"hidden width {mid} not divisible by {len(kernels)} scales")
        self.cin, self.cout, self.stride = cin, cout, stride
        self.n0 = ctx.neuron()
        self.conv1 = ctx.conv(cin, mid, 1)
        self.bn1 = ctx.bn(mid)
        self.n1 = ctx.neuron()
        self.msconv = MultiScaleConv(ctx, mid, stride, kernels)
        self.bn2 = ctx.bn(mid)
        self.n2 = ctx.neuron()
        self.conv3 = ctx.conv(mid, cout, 1)
        self.bn3 = ctx.bn(cout, merge=True)
        self.shortcut = MDSShortcut(ctx, cin, cout, stride)

    def residual(self, s):
        r = self.n1(self.bn1(self.conv1(s)))
        r = self.n2(self.bn2(self.msconv(r)))
        return self.bn3(self.conv3(r))

    def __call__(self, x):
        s = self.n0(x)
        return ag.add(self.residual(s), self.shortcut(s))


class MSBlock(Module):
    """Membrane-shortcut basic block: x + tdBN(conv(fire(tdBN(conv(fire(x))))))."""

    def __init__(self, ctx: BlockContext, channels, hidden=0.5):
        mid = int(round(channels * hidden))
        self.cin = self.cout = channels
        self.n0 = ctx.neuron()
        self.conv1 = ctx.conv(channels, mid, 3)
        self.bn1 = ctx.bn(mid)
        self.n1 = ctx.neuron()
        self.conv2 = ctx.conv(mid, channels, 3)
        self.bn2 = ctx.bn(channels, residual=True)

    def residual(self, x):
        r = self.n1(self.bn1(self.conv1(self.n0(x))))
        return self.bn2(self.conv2(r))

    def __call__(self, x):
        return ag.add(x, self.residual(x))


class MDSBlock(Module):
    """Two full-width 3x3 conv stages with an MDS (1x1 conv + tdBN) shortcut."""

    def __init__(self, ctx: BlockContext, cin, cout):
        self.cin, self.cout = cin, cout
        self.n0 = ctx.neuron()
        self.conv1 = ctx.conv(cin, cout, 3)
        self.bn1 = ctx.bn(cout)
        self.n1 = ctx.neuron()
        self.conv2 = ctx.conv(cout, cout, 3)
        self.bn2 = ctx.bn(cout, merge=True)
        self.shortcut = MDSShortcut(ctx, cin, cout, 1)

    def residual(self, s):
        return self.bn2(self.conv2(self.n1(self.bn1(self.conv1(s)))))

    def __call__(self, x):
        s = self.n0(x)
        return ag.add(self.residual(s), self.shortcut(s))


SMSUB_BRANCHES = ((1, 1), (3, 1), (3, 2), (5, 2), (7, 3))   # (kernel, dilation)


class SMSUB(Module):
    """Spiking multi-scale upsample block.

    fire -> nearest x2 -> parallel dilated branches (each conv + tdBN) summed
    -> fire -> 1x1 -> tdBN. Firing before the upsample is identical to firing
    after it (neurons are elementwise) and four times cheaper.
    """

    def __init__(self, ctx: BlockContext, cin, cout, branches=SMSUB_BRANCHES):
        self.cin, self.cout = cin, cout
        self.n0 = ctx.neuron()
        self.convs = [ctx.conv(cin, cout, k, dilation=d) for k, d in branches]
        self.bns = [ctx.bn(cout, merge=True) for _ in branches]
        self.n1 = ctx.neuron()
        self.fuse = ctx.conv(cout, cout, 1)
        self.bn = ctx.bn(cout, merge=True)

    def __call__(self, x):
        s = ag.upsample(self.n0(x), 2)
        acc = None
        for conv, bn in zip(self.convs, self.bns):
            b = bn(conv(s))
            acc = b if acc is None else ag.add(acc, b)
        return self.bn(self.fuse(self.n1(acc)))


class SkipBlock(Module):
    """fire -> 1x1 -> tdBN; the result is added to the decoder membrane."""

    def __init__(self, ctx: BlockContext, cin, cout):
        self.cin, self.cout = cin, cout
        self.n0 = ctx.neuron()
        self.conv = ctx.conv(cin, cout, 1)
        self.bn = ctx.bn(cout, merge=True)

    def __call__(self, x):
        return self.bn(self.conv(self.n0(x)))


class Encoding(Module):
    """Two conv + tdBN layers reading the image directly.

    The first layer is evaluated on a 1-pixel-extended grid (padding 2) so the
    second 3x3 layer can read its membrane without padding; the composition is
    then exactly one 5x5 convolution with padding 2, which is what
    `reparameterize` produces. The centre crop of the first membrane is a
    padding-1 convolution and feeds the full-resolution skip path.
    """

    def __init__(self, ctx: BlockContext, cin, cout):
        self.cin, self.cout = cin, cout
        self.conv1 = ctx.conv(cin, cout, 3, padding=2, spike_input=False)
        self.bn1 = ctx.bn(cout)
        self.conv2 = ctx.conv(cout, cout, 3, padding=0, spike_input=False)
        self.bn2 = ctx.bn(cout)
        self.merged = None
        self.skip_conv = None

    def __call__(self, img):
        m1 = self.bn1(self.conv1(img))
        return self.bn2(self.conv2(m1)), ag.crop(m1, 1)

    def reparameterize(self):
        """Fold both tdBNs and compose the two convolutions into one ConvSpec."""
        if self.training:
            raise RuntimeError("reparameterization needs eval mode (running statistics)")
        s1, s2 = fold_bn(self.conv1, self.bn1), fold_bn(self.conv2, self.bn2)
        merged = compose_convs(s1, s2)
        skip = ConvSpec(s1.in_channels, s1.out_channels, s1.kernel, 1, 1, 1, 1, s1.weight, s1.bias)
        self.merged = _frozen_conv(merged, "encoding.merged")
        self.skip_conv = _frozen_conv(skip, "encoding.skip")
        return merged

    def forward_merged(self, img):
        if self.merged is None:
            raise RuntimeError("call reparameterize() first")
        return self.merged(img), self.skip_conv(img)


def compose_convs(first: ConvSpec, second: ConvSpec) -> ConvSpec:
    """One convolution equal to `second` applied to `first`'s output.

    Requires stride 1, dilation 1, no grouping and `second` unpadded; the
    merged kernel is the full 2-D convolution of the two kernels.
    """
    for s in (first, second):
        if s.stride != 1 or s.dilation != 1 or s.groups != 1:
            raise ValueError("composition needs stride 1, dilation 1, groups 1")
    if second.padding:
        raise ValueError("the second convolution must be unpadded")
    if first.out_channels != second.in_channels:
        raise ValueError("channel mismatch between composed convolutions")
    w1, w2 = first.weight.astype(np.float64), second.weight.astype(np.float64)
    kh, kw = w1.shape[2] + w2.shape[2] - 1, w1.shape[3] + w2.shape[3] - 1
    out = np.zeros((w2.shape[0], w1.shape[1], kh, kw))
    # merged[o,c,p+q] = sum_m w2[o,m,p] w1[m,c,q]
    for p in range(w2.shape[2]):
        for q in range(w2.shape[3]):
            out[:, :, p:p + w1.shape[2], q:q + w1.shape[3]] += np.einsum("om,mcij->ocij", w2[:, :, p, q], w1)
    b1 = np.zeros(w1.shape[0]) if first.bias is None else first.bias.astype(np.float64)
    b2 = np.zeros(w2.shape[0]) if second.bias is None else second.bias.astype(np.float64)
    bias = b2 + np.einsum("omij,m->o", w2, b1)
    return ConvSpec(first.in_channels, second.out_channels, (kh, kw), 1, first.padding, 1, 1, out, bias)


class FrozenConv(Module):
    """Inference-only convolution built from a ConvSpec (float32 weights)."""

    def __init__(self, spec: ConvSpec, spike_input=False, spike_max=4):
        self.cin, self.cout, self.k = spec.in_channels, spec.out_channels, spec.kernel[0]
        self.stride, self.padding, self.dilation, self.groups = spec.stride, spec.padding, spec.dilation, spec.groups
        self.weight = Var(spec.weight.astype(np.float32))
        self.bias = None if spec.bias is None else Var(spec.bias.astype(np.float32))
        self.spike_input, self.spike_max = spike_input, spike_max

    ops = Conv2d.ops

    def param_count(self):
        return self.weight.data.size + (0 if self.bias is None else self.bias.data.size)

    def __call__(self, x):
        y = ag.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)
        rec = _recorder()
        if rec is not None:
            rec.on_conv(self, value(x), y.data)
        return y


def _frozen_conv(spec, name, spike_input=False, spike_max=4):
    c = FrozenConv(spec, spike_input, spike_max)
    c.name = name
    return c


class PredictionBlock(Module):
    """fire -> 1x1 conv to one channel -> membrane average over T -> sigmoid -> resize."""

    def __init__(self, ctx: BlockContext, cin, prior=0.05):
        self.cin = cin
        self.n0 = ctx.neuron()
        self.conv = ctx.conv(cin, 1, 1, bias=True)
        self.conv.bias.data[...] = np.log(prior / (1 - prior))

    def logits(self, x):
        return ag.time_mean(self.conv(self.n0(x)))

    def infer(self, x, T):
        """Averaging folded into the convolution: weights and bias divided by T,
        then the raw per-step outputs are summed."""
        s = self.n0(x)
        w = self.conv.weight.data / np.float32(T)
        b = self.conv.bias.data / np.float32(T)
        y = ag.conv2d(s, w, b)
        rec = _recorder()
        if rec is not None:
            rec.on_conv(self.conv, value(s), y.data)
        o = y.data.sum(axis=0, dtype=np.float64)
        return (1.0 / (1.0 + np.exp(-o))).astype(np.float32)

    def __call__(self, x, out_hw):
        p = ag.sigmoid(self.logits(x))
        if p.shape[-2:] != tuple(out_hw):
            p = ag.resize(p, *out_hw)
        return p
