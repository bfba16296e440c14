"""Empirical gradient-isometry checks on blocks and networks.

For a block f with Jacobian J (output length m) the quantity of interest is
phi(JJ^T) = tr(JJ^T) / m. It is estimated by vector-Jacobian probes,
E ||J^T v||^2 = tr(JJ^T) for v ~ N(0, I), at the surrogate-gradient
semantics the optimizer sees. A block is well conditioned when
phi * alpha2 is close to 1, alpha2 being the second moment of its input.
"""
from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Graph, Var
from .blocks import Module, MS2Block, MDSBlock, MSBlock, SpikeLayer, TdBN

BAND = (0.8, 1.25)


@dataclass
class IsometryEstimate:
    block_id: str
    phi: float
    phi_se: float
    varphi: float
    alpha2: float
    probes: int

    def __post_init__(self):
        if not self.phi > 0:
            raise ValueError(f"{self.block_id}: phi estimate {self.phi} is not positive (no gradient reaches the input)")

    @property
    def product(self):
        return self.phi * self.alpha2

    def in_band(self, band=BAND):
        return band[0] <= self.product <= band[1]

    def to_dict(self):
        d = asdict(self)
        d["phi_alpha2"] = self.product
        return d


@contextlib.contextmanager
def frozen(module):
    """Parameters stop requiring gradients; normalization buffers are restored on exit."""
    if not isinstance(module, Module):
        yield module
        return
    params = module.parameters()
    bufs = [(b, b.copy()) for _, b in module.named_buffers()]
    bns = [(m, m.stats_ready) for _, m in module.named_modules() if isinstance(m, TdBN)]
    for p in params:
        p.requires_grad = False
    try:
        yield module
    finally:
        for p in params:
            p.requires_grad = True
        for b, saved in bufs:
            b[...] = saved
        for m, ready in bns:
            m.stats_ready = ready


def _sample(input_distribution, rng):
    x = input_distribution(rng) if callable(input_distribution) else input_distribution
    x = np.asarray(x, np.float32)
    if x.size < 2 or float(x.var()) == 0.0:
        raise ValueError("input has zero variance; the isometry estimate is undefined")
    return x


def _forward(block, x):
    xv = Var(x, requires_grad=True)
    g = Graph()
    with g:
        y = block(xv)
        if y is xv or y._graph is not g:
            y = ag.scale(y, 1.0)
    return g, xv, y


def _vjps(g, xv, y, probes, rng):
    for _ in range(probes):
        v = rng.standard_normal(y.shape).astype(y.data.dtype)
        g.backward(y, seed=v, accumulate=False)
        jtv = g.grad(xv)
        yield np.zeros(xv.shape) if jtv is None else jtv.astype(np.float64)


def estimate_phi(block, input_distribution, n_probes=32, seed=0, block_id=None) -> IsometryEstimate:
    """Probe estimate of phi(JJ^T) of `block` around one input sample.

    `input_distribution` is an array or a callable rng -> array. The block
    keeps its train/eval mode; its parameters are frozen and its running
    statistics left untouched.
    """
    if n_probes < 2:
        raise ValueError("need at least two probes for a standard error")
    rng = np.random.default_rng(seed)
    x = _sample(input_distribution, rng)
    with frozen(block):
        g, xv, y = _forward(block, x)
        m = y.data.size
        vecs = [j.ravel() for j in _vjps(g, xv, y, n_probes, rng)]
    sq = np.array([v @ v for v in vecs]) / m
    phi = float(sq.mean())
    # tr((JJ^T)^2)/m from cross products of independent probes
    cross = [(vecs[i] @ vecs[j]) ** 2 / m for i in range(n_probes) for j in range(i + 1, n_probes)]
    varphi = float(np.mean(cross)) - phi ** 2
    name = block_id or getattr(block, "name", "") or type(block).__name__
    return IsometryEstimate(name, phi, float(sq.std(ddof=1) / np.sqrt(n_probes)), varphi,
                            float(np.mean(x.astype(np.float64) ** 2)), n_probes)


def dense_jacobian(block, x):
    """Explicit Jacobian [len(out), len(in)], one backward per output coordinate."""
    x = np.asarray(x, np.float32)
    with frozen(block):
        g, xv, y = _forward(block, x)
        rows = []
        for k in range(y.data.size):
            e = np.zeros(y.data.size, y.data.dtype)
            e[k] = 1
            g.backward(y, seed=e.reshape(y.shape), accumulate=False)
            gx = g.grad(xv)
            rows.append(np.zeros(x.size) if gx is None else gx.ravel().astype(np.float64))
    return np.stack(rows)


def phi_of(jac):
    return float(np.sum(jac ** 2) / jac.shape[0])


# block decompositions ---------------------------------------------------------

def _parts(block):
    """(shortcut, residual) callables on the block input, or None for plain blocks."""
    if isinstance(block, (MS2Block, MDSBlock)):
        return (lambda x: block.shortcut(block.n0(x))), (lambda x: block.residual(block.n0(x)))
    if isinstance(block, MSBlock):
        return (lambda x: ag.scale(x, 1.0)), block.residual
    return None


@dataclass
class BlockReport:
    block_id: str
    estimate: IsometryEstimate
    phi_shortcut: float
    phi_residual: float
    band: tuple = BAND

    @property
    def passed(self):
        return self.estimate.in_band(self.band)

    @property
    def decomposition_gap(self):
        """Relative gap between phi and phi_sc + phi_res."""
        return abs(self.estimate.phi - self.phi_shortcut - self.phi_residual) / self.estimate.phi

    def line(self):
        e = self.estimate
        flag = "PASS" if self.passed else "FAIL"
        return (f"{self.block_id:28s} phi={e.phi:7.4f}+-{e.phi_se:.4f} alpha2={e.alpha2:7.4f} "
                f"phi*alpha2={e.product:7.4f} sc={self.phi_shortcut:7.4f} res={self.phi_residual:7.4f} "
                f"gap={self.decomposition_gap:.3f} {flag}")


def check_block(block, unit_variance_input, n_probes=32, seed=0, block_id=None):
    """phi * alpha2 band check plus the shortcut/residual split of phi."""
    est = estimate_phi(block, unit_variance_input, n_probes, seed, block_id)
    parts = _parts(block)
    sc = res = float("nan")
    if parts is not None:
        x = _sample(unit_variance_input, np.random.default_rng(seed))
        with frozen(block):
            sc, res = (estimate_phi(p, x, n_probes, seed + 1, "part").phi for p in parts)
    return BlockReport(est.block_id, est, sc, res)


# network-level helpers ----------------------------------------------------------

def block_inputs(net, images):
    """Membrane input of every backbone and bottleneck block for one training-mode forward."""
    with frozen(net):
        mode = net.training
        net.train()
        try:
            x, _ = net._image_seq(images)
            h, _ = net.encoding(Var(x))
            out = []
            for b in net.blocks():
                out.append(h.data.copy())
                h = b(h)
        finally:
            net.train(mode)
    return out


def isometry_report(net, images, n_probes=16, seed=0):
    """check_block for every block, each on its own captured input."""
    reports = []
    with frozen(net):
        for b, x in zip(net.blocks(), block_inputs(net, images)):
            reports.append(check_block(b, x, n_probes, seed, b.name))
    return reports


def composition_check(first, second, x, n_probes=32, seed=0):
    """(phi of the serial stack, product of the per-block phis) at the stack's own inputs."""
    with frozen(first), frozen(second):
        mid = first(Var(np.asarray(x, np.float32))).data
        p1 = estimate_phi(first, x, n_probes, seed).phi
        p2 = estimate_phi(second, mid, n_probes, seed + 1).phi
        total = estimate_phi(lambda v: second(first(v)), x, n_probes, seed + 2, "stack").phi
    return total, p1 * p2


def temporal_cross_gradient(block, x, seed=0):
    """Largest |d out_t / d in_t'| probe response for t != t' (zero when steps are independent).

    Normalization must be in eval mode, otherwise batch statistics couple the
    time steps; the caller chooses the mode.
    """
    x = np.asarray(x, np.float32)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with frozen(block):
        g, xv, y = _forward(block, x)
        for t in range(y.shape[0]):
            v = np.zeros(y.shape, y.data.dtype)
            v[t] = rng.standard_normal(y.shape[1:])
            g.backward(y, seed=v, accumulate=False)
            gx = g.grad(xv)
            if gx is None:
                continue
            other = np.delete(gx, t, axis=0)
            worst = max(worst, float(np.abs(other).max(initial=0.0)))
    return worst


@contextlib.contextmanager
def neuron_beta(net, beta):
    layers = [m for _, m in net.named_modules() if isinstance(m, SpikeLayer)]
    saved = [m.cfg for m in layers]
    for m in layers:
        m.cfg = m.cfg.with_beta(beta)
    try:
        yield net
    finally:
        for m, c in zip(layers, saved):
            m.cfg = c


def gradient_norm_profile(net, batch, beta_values=(0.0, 0.25, 0.5), seed=0, blocks=None):
    """Mean per-sample ||dL/d(block input)|| for every block, per beta.

    L is a fixed random linear readout of the last block's output, so the
    profile measures how gradients propagate through the serial chain.
    `blocks` defaults to the network's backbone and bottleneck blocks; a
    plain list of blocks (with `batch` their first input) is accepted too.
    Returns {beta: [norm per block]}.
    """
    out = {}
    mode = net.training
    for beta in beta_values:
        with frozen(net), neuron_beta(net, beta):
            if blocks is None:
                net.train()
                x, _ = net._image_seq(batch)
                h0 = net.encoding(Var(x))[0].data
                chain = net.blocks()
            else:
                h0, chain = np.asarray(batch, np.float32), list(blocks)
            g = Graph()
            with g:
                h = Var(h0, requires_grad=True)
                ins = []
                for b in chain:
                    ins.append(g.retain(h))
                    h = b(h)
                if h is ins[-1] or h._graph is not g:
                    h = ag.scale(h, 1.0)
            # the readout sees the time-averaged output, like membrane average decoding
            r = np.random.default_rng(seed).standard_normal(h.shape[1:]).astype(np.float32)
            r = np.broadcast_to(r / (h.shape[0] * np.sqrt(r.size)), h.shape)
            g.backward(h, seed=r, accumulate=False)
            norms = []
            for v in ins:
                gv = g.grad(v)
                gv = np.zeros(v.shape) if gv is None else gv.astype(np.float64)
                per = np.sqrt((gv ** 2).sum(axis=(0, 2, 3, 4))) if gv.ndim == 5 else np.sqrt((gv ** 2).sum())
                norms.append(float(np.mean(per)))
            g.release()
        out[beta] = norms
    net.train(mode)
    return out


def profile_table(profile, names=None):
    betas = sorted(profile)
    n = len(profile[betas[0]])
    names = names or [str(i) for i in range(n)]
    lines = ["block\t" + "\t".join(f"beta={b:g}" for b in betas)]
    for i in range(n):
        lines.append(names[i] + "\t" + "\t".join(f"{profile[b][i]:.6g}" for b in betas))
    return "\n".join(lines)
