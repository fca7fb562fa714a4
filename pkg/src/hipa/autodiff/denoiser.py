"""Toy time-conditioned U-Net-style noise predictor.

Activations are channels-last (N, H, W, C). Layout (channels, resolution)::

    down.conv1   1 -> 16   full      leaky-relu, kept as skip
    avgpool2
    down.conv2  16 -> 32   half      leaky-relu
    mid.conv1   32 -> 32   half      + time bias, leaky-relu
    mid.conv2   32 -> 32   half      leaky-relu
    upsample2, concat skip
    up.conv1    48 -> 16   full      leaky-relu
    up.conv2    16 -> 16   full      leaky-relu
    up.out      16 -> 1    full      zero-initialised head
    + g(t) * x                       zero-initialised input skip

The time bias is a sinusoidal embedding (dim 16) through ``mid.time`` (dense
16 -> 32), added per channel. ``up.gain`` (dense 16 -> 1) maps the same
embedding to a scalar gain on the input, so the near-identity part of noise
prediction at large t does not have to pass through the conv stack.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hipa.autodiff import tape as ad
from hipa.rng import SplitMix64

EMBED_DIM = 16
SLOPE = 0.1

# name: (group, shape) for weights; biases share the group of their layer
LAYERS = {
    "down.conv1": ("down", (16, 1, 3, 3)),
    "down.conv2": ("down", (32, 16, 3, 3)),
    "mid.time": ("mid", (32, EMBED_DIM)),
    "mid.conv1": ("mid", (32, 32, 3, 3)),
    "mid.conv2": ("mid", (32, 32, 3, 3)),
    "up.conv1": ("up", (16, 48, 3, 3)),
    "up.conv2": ("up", (16, 16, 3, 3)),
    "up.out": ("up", (1, 16, 3, 3)),
    "up.gain": ("up", (1, EMBED_DIM)),
}
HEAD = "up.out"
ZERO_INIT = ("up.out", "up.gain")


@dataclass
class DenoiserParams:
    tensors: dict
    groups: dict
    size: int = 32
    T: int = 100
    meta: dict = field(default_factory=dict)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams({k: v.copy() for k, v in self.tensors.items()}, dict(self.groups),
                              self.size, self.T, dict(self.meta))

    def weight_names(self):
        return [f"{layer}.weight" for layer in LAYERS]

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k], dtype="<f8").tobytes())
        return h.hexdigest()


def init_params(seed: int, size: int = 32, T: int = 100) -> DenoiserParams:
    """Uniform(+-sqrt(6/fan_in)) weights from the counter PRNG, zero biases,
    zero head and skip gain."""
    if size % 2 or size < 8:
        raise ValueError(f"image size must be even and >= 8, got {size}")
    rng = SplitMix64(seed)
    tensors, groups = {}, {}
    for i, (layer, (group, shape)) in enumerate(LAYERS.items()):
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        if layer in ZERO_INIT:
            w = np.zeros(shape)
        else:
            w = rng.spawn(i).uniform(shape, -bound, bound)
        tensors[f"{layer}.weight"] = w
        tensors[f"{layer}.bias"] = np.zeros(shape[0])
        groups[f"{layer}.weight"] = group
        groups[f"{layer}.bias"] = group
    return DenoiserParams(tensors, groups, size, T, {"seed": seed})


def time_embedding(t) -> np.ndarray:
    """Sinusoidal embedding, shape (N, EMBED_DIM)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = EMBED_DIM // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def bind(tape: ad.Tape, params: DenoiserParams, trainable: bool) -> dict:
    make = tape.variable if trainable else tape.constant
    return {k: make(v, name=k) for k, v in params.tensors.items()}


def bind_adaptors(tape: ad.Tape, adaptors) -> dict:
    """Leaf variables for each adaptor's factors: target -> (U, V)."""
    return {a.target: (tape.variable(a.U, name=f"adaptor.{a.target}.U"),
                       tape.variable(a.V, name=f"adaptor.{a.target}.V")) for a in adaptors}


def _weight(pv: dict, av: dict, name: str):
    w = pv[name]
    if name in av:
        u, v = av[name]
        w = w + ad.reshape(u @ v.T, w.shape)
    return w


def check_timestep(t, T: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t))
    if np.any(t < 1) or np.any(t > T):
        raise ValueError(f"timestep out of range 1..{T}: {t}")
    return t


def graph(pv: dict, av: dict, x, t, T: int) -> ad.Var:
    """Build the forward graph. ``x``: Var or array of shape (N, H, W)."""
    t = check_timestep(t, T)
    tape = next(iter(pv.values())).tape
    x = ad.lift(x, tape)
    n, h, w = x.shape
    if len(t) == 1 and n > 1:
        t = np.repeat(t, n)

    def conv(h_, layer):
        return ad.conv2d(h_, _weight(pv, av, f"{layer}.weight"), pv[f"{layer}.bias"])

    def act(h_):
        return ad.leaky_relu(h_, SLOPE)

    x4 = ad.reshape(x, (n, h, w, 1))
    skip = act(conv(x4, "down.conv1"))
    z = act(conv(ad.avgpool2_nhwc(skip), "down.conv2"))
    emb = tape.constant(time_embedding(t))
    temb = emb @ _weight(pv, av, "mid.time.weight").T + pv["mid.time.bias"]
    z = act(conv(z, "mid.conv1") + ad.reshape(temb, (n, 1, 1, 32)))
    z = act(conv(z, "mid.conv2"))
    z = ad.concat([ad.upsample2_nhwc(z), skip], axis=-1)
    z = act(conv(z, "up.conv1"))
    z = act(conv(z, "up.conv2"))
    out = ad.reshape(conv(z, "up.out"), (n, h, w))
    gain = emb @ _weight(pv, av, "up.gain.weight").T + pv["up.gain.bias"]
    return out + ad.reshape(gain, (n, 1, 1)) * x


def forward_denoiser(params: DenoiserParams, adaptors, x, t) -> np.ndarray:
    """Predicted noise for a single image (H, W) or a batch (N, H, W)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    xb = x[None] if single else x
    if xb.shape[1:] != (params.size, params.size):
        raise ValueError(f"input size {xb.shape[1:]} does not match configured size {params.size}")
    tape = ad.Tape()
    pv = bind(tape, params, trainable=False)
    av = {a.target: (tape.constant(a.U), tape.constant(a.V)) for a in (adaptors or [])}
    out = graph(pv, av, xb, t, params.T).value
    return out[0] if single else out


def make_denoiser(params: DenoiserParams, adaptors=None):
    """Closure eps(x, t) over frozen parameters."""
    def eps(x, t):
        return forward_denoiser(params, adaptors, x, t)

    eps.T = params.T
    return eps
