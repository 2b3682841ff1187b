"""Sinusoidal encodings and the coarse-to-fine frequency bitmask."""

import math
from dataclasses import dataclass

import numpy as np

from . import diff


@dataclass(frozen=True)
class EncodingSpec:
    n_freqs: int
    include_identity: bool = True

    def __post_init__(self):
        if self.n_freqs < 1:
            raise ValueError(f"n_freqs must be >= 1, got {self.n_freqs}")

    def out_dim(self, d):
        return d * 2 * self.n_freqs + (d if self.include_identity else 0)


@dataclass(frozen=True)
class GranularitySchedule:
    """Frequency mask schedule: ``window`` is the iteration T at which it opens fully.

    ``pair_mode`` gates sin/cos of one band together; with it off the
    threshold applies to the flat channel index.
    """

    window: int
    bias: float
    n_freqs: int
    pair_mode: bool = True

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"regularization window must be >= 1, got {self.window}")
        if not 0 <= self.bias <= self.n_freqs:
            raise ValueError(f"bias must lie in [0, {self.n_freqs}], got {self.bias}")

    @classmethod
    def for_training(cls, total_iterations, n_freqs=10, window_fraction=0.10, bias=None,
                     pair_mode=True):
        window = max(1, math.floor(window_fraction * total_iterations))
        return cls(window, n_freqs / 2 if bias is None else bias, n_freqs, pair_mode)


def granularity_mask(t, sched):
    """0/1 mask over the 2L interleaved (sin, cos) channels of one input dimension."""
    if t < 0:
        raise ValueError(f"iteration must be >= 0, got {t}")
    n = 2 * sched.n_freqs
    if t >= sched.window:
        return np.ones(n)
    threshold = 2 * (t * sched.n_freqs / sched.window + sched.bias)
    i = np.arange(n)
    if sched.pair_mode:
        return ((i // 2) * 2 < threshold).astype(np.float64)
    return (i < threshold).astype(np.float64)


def _encode(x, spec, mask):
    x = diff.as_tensor(x)
    xd = x.data
    d = xd.shape[-1]
    n = spec.n_freqs
    lead = xd.shape[:-1]
    off = d if spec.include_identity else 0
    freqs = (np.pi * 2.0 ** np.arange(n)).astype(xd.dtype)
    arg = xd[..., :, None] * freqs  # (..., d, L)
    out = np.empty(lead + (off + 2 * d * n,), xd.dtype)
    out[..., :off] = xd[..., :off]
    enc = out[..., off:].reshape(lead + (d, n, 2))
    s = np.sin(arg, out=enc[..., 0])
    c = np.cos(arg, out=enc[..., 1])
    m = None
    if mask is not None:
        m = np.asarray(mask, xd.dtype).reshape(n, 2)
        enc *= m
        s, c = np.sin(arg), np.cos(arg)

    def vjp(g):
        ge = g[..., off:].reshape(lead + (d, n, 2))
        if m is not None:
            ge = ge * m
        gx = (ge[..., 0] * c - ge[..., 1] * s) @ freqs
        if off:
            gx = gx + g[..., :d]
        return (gx,)

    return diff.make_op(out, (x,), vjp, "pos_encode")


def pos_encode(x, spec):
    """[x, sin(2^0 pi x), cos(2^0 pi x), ..., cos(2^(L-1) pi x)] per input dimension.

    Identity channels (all d of them) come first, followed by one block of 2L
    channels per input dimension.
    """
    return _encode(x, spec, None)


def masked_encode(x, spec, t, sched):
    """pos_encode with the schedule's bitmask applied; identity channels stay unmasked."""
    if sched is None:
        return _encode(x, spec, None)
    if sched.n_freqs != spec.n_freqs:
        raise ValueError("schedule and encoding disagree on the number of frequencies")
    mask = granularity_mask(t, sched)
    return _encode(x, spec, None if mask.all() else mask)
