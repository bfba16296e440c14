"""IF / LIF / I-LIF neuron dynamics, surrogate gradients and output decoding.

One time step of every kind:

    u  = h + x
    s  = fire(u)                 # LIF: 1[u >= V_th]; I-LIF: clip(round(u), 0, D)
    h' = beta * (u - V_reset * s)

I-LIF resets by V_reset = 1 so the subtraction removes exactly the fired
integer; LIF and IF reset by V_th. IF is LIF with beta = 1. round() is
numpy's round-half-to-even.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autograd import make, value

KINDS = ("IF", "LIF", "ILIF")


@dataclass(frozen=True)
class NeuronConfig:
    kind: str = "ILIF"
    v_th: float = 1.0
    beta: float = 0.25
    D: int = 4
    a: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"neuron kind must be one of {KINDS}, got {self.kind!r}")
        if self.v_th <= 0:
            raise ValueError(f"v_th must be > 0, got {self.v_th}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.kind == "ILIF" and int(self.D) < 1:
            raise ValueError(f"D must be >= 1 for I-LIF, got {self.D}")
        if self.kind == "ILIF" and self.v_th != 1.0:
            # rounding ignores the threshold, and tdBN targets are scaled by it
            raise ValueError(f"I-LIF uses a unit threshold, got v_th={self.v_th}")
        if self.a <= 0:
            raise ValueError(f"surrogate width a must be > 0, got {self.a}")
        if self.kind == "IF" and self.beta != 1.0:
            object.__setattr__(self, "beta", 1.0)

    @classmethod
    def lif(cls, v_th=0.5, beta=0.25, a=1.0):
        return cls("LIF", v_th=v_th, beta=beta, a=a, D=1)

    @classmethod
    def ilif(cls, D=4, beta=0.25):
        return cls("ILIF", v_th=1.0, beta=beta, D=D)

    @property
    def v_reset(self) -> float:
        return 1.0 if self.kind == "ILIF" else self.v_th

    @property
    def max_spike(self) -> int:
        return int(self.D) if self.kind == "ILIF" else 1

    def with_beta(self, beta):
        return replace(self, beta=beta)


@dataclass
class NeuronState:
    h: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype=np.float32):
        return cls(np.zeros(shape, dtype))


def _spike(u, cfg: NeuronConfig):
    if cfg.kind == "ILIF":
        return np.clip(np.round(u), 0, cfg.D).astype(u.dtype)
    return (u >= cfg.v_th).astype(u.dtype)


def _smooth_spike(u, cfg: NeuronConfig):
    """Antiderivative of the surrogate: the forward the surrogate actually differentiates."""
    if cfg.kind == "ILIF":
        return np.clip(u, 0, cfg.D)
    return np.clip((u - cfg.v_th) / cfg.a + 0.5, 0, 1).astype(u.dtype)


def surrogate_grad(u, cfg: NeuronConfig):
    if cfg.kind == "ILIF":
        return ilif_surrogate_grad(u, cfg)
    return lif_surrogate_grad(u, cfg)


def lif_surrogate_grad(u, cfg: NeuronConfig):
    """Rectangular window (1/a) * 1[|u - V_th| <= a/2]."""
    if cfg.a <= 0:
        raise ValueError("surrogate width a must be > 0")
    u = np.asarray(u)
    return ((np.abs(u - cfg.v_th) <= cfg.a / 2) / cfg.a).astype(u.dtype if u.dtype.kind == "f" else np.float64)


def ilif_surrogate_grad(u, cfg: NeuronConfig):
    """Indicator of u in [0, D]."""
    u = np.asarray(u)
    return ((u >= 0) & (u <= cfg.D)).astype(u.dtype if u.dtype.kind == "f" else np.float64)


def _step(x, state: NeuronState, cfg: NeuronConfig):
    x = np.asarray(x)
    if state.h.shape != x.shape:
        raise ValueError(f"input shape {x.shape} does not match neuron state shape {state.h.shape}")
    u = state.h + x
    s = _spike(u, cfg)
    return s, NeuronState(cfg.beta * (u - cfg.v_reset * s))


def lif_step(x, state: NeuronState, cfg: NeuronConfig):
    if cfg.kind not in ("IF", "LIF"):
        raise ValueError(f"lif_step needs an IF/LIF config, got {cfg.kind}")
    return _step(x, state, cfg)


def ilif_step(x, state: NeuronState, cfg: NeuronConfig):
    if cfg.kind != "ILIF":
        raise ValueError(f"ilif_step needs an ILIF config, got {cfg.kind}")
    return _step(x, state, cfg)


def fire(x, cfg: NeuronConfig, smooth=False):
    """Run a neuron layer over x[T, ...] from a zero state; returns spikes[T, ...].

    Backward unrolls every time step: the spatial path goes through the
    surrogate derivative and the temporal path through h with weight beta,

        dL/du_t = (dL/ds_t - beta*V_reset*dL/du_{t+1}) * sg(u_t) + beta*dL/du_{t+1}

    With smooth=True the forward uses the surrogate's antiderivative, so
    finite differences of the forward match the backward exactly.
    """
    xd = value(x)
    spike = _smooth_spike if smooth else _spike
    beta, vr = cfg.beta, cfg.v_reset
    h = np.zeros(xd.shape[1:], xd.dtype)
    us = np.empty_like(xd)
    ss = np.empty_like(xd)
    for t in range(xd.shape[0]):
        u = h + xd[t]
        s = spike(u, cfg)
        us[t], ss[t] = u, s
        h = beta * (u - vr * s)

    def back(g):
        gx = np.empty_like(g)
        gnext = np.zeros(g.shape[1:], g.dtype)
        for t in range(g.shape[0] - 1, -1, -1):
            sg = surrogate_grad(us[t], cfg)
            if beta:
                gu = (g[t] - beta * vr * gnext) * sg + beta * gnext
            else:
                gu = g[t] * sg
            gx[t] = gu
            gnext = gu
        return (gx,)
    return make(ss, (x,), back)


def mad_decode(xs):
    """Membrane average decoding: u_t = u_{t-1} + x_t / T, output u_T."""
    xs = list(xs)
    if not xs:
        raise ValueError("mad_decode needs at least one time step")
    T = len(xs)
    u = np.zeros_like(np.asarray(xs[0], np.float64))
    for x in xs:
        x = np.asarray(x, np.float64)
        if x.shape != u.shape:
            raise ValueError(f"time steps differ in shape: {x.shape} vs {u.shape}")
        u = u + x / T
    return u


def expand_to_binary(s, D: int):
    """Split integer spikes s in {0..D} into D binary micro-steps, earliest first."""
    s = np.asarray(s)
    if np.any(s != np.round(s)) or s.min(initial=0) < 0 or s.max(initial=0) > D:
        raise ValueError(f"spike values must be integers in [0, {D}]")
    steps = np.arange(D).reshape((D,) + (1,) * s.ndim)
    return (steps < s[None]).astype(np.float32)


def quantization_error_profile(cfg: NeuronConfig, u_range=(0.0, 4.0), n_points=401):
    """Single-step |s - u| over an evenly spaced input sweep; rows of (u, error)."""
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    u = np.linspace(u_range[0], u_range[1], n_points)
    s, _ = _step(u, NeuronState.zeros(u.shape, u.dtype), cfg)
    return np.stack([u, np.abs(s - u)], axis=1)


def mean_quantization_error(cfg: NeuronConfig, u):
    u = np.asarray(u, np.float64)
    s, _ = _step(u, NeuronState.zeros(u.shape, u.dtype), cfg)
    return float(np.abs(s - u).mean())


def write_table(path, rows, header=("u", "error")):
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(header) + "\n")
        for r in rows:
            f.write("\t".join(f"{v:.6f}" for v in r) + "\n")
