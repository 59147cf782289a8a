"""Shared neural plumbing: initializers, linear maps, timestep embeddings.

Parameters live in flat dicts mapping dotted names to Tensors; every helper
here takes an Rng so initialization is reproducible per (seed, stream).
"""

import numpy as np

from .autodiff import Tensor


def he_conv(rng, kt, kh, kw, cin, cout, gain=1.0):
    # float(): a numpy scalar would promote the float32 draw to float64
    std = float(gain * np.sqrt(2.0 / (kt * kh * kw * cin)))
    return Tensor(rng.normal((kt, kh, kw, cin, cout)) * std, requires_grad=True)


def he_linear(rng, din, dout, gain=1.0):
    std = float(gain * np.sqrt(2.0 / din))
    return Tensor(rng.normal((din, dout)) * std, requires_grad=True)


def zeros(*shape):
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def ones(*shape):
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


def linear(x, w, b=None):
    out = x @ w
    return out if b is None else out + b


def sinusoidal_embedding(t, dim, max_period=1e4):
    """Map timesteps in [0,1] to a [N, dim] sin/cos feature table.

    Frequencies are geometric from 1 to max_period; angles are computed in
    float64 and cast down so equal inputs give bit-equal rows.
    """
    if dim % 2:
        raise ValueError("embedding dim must be even")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(max_period), half))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return emb.astype(np.float32)
