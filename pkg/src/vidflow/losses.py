"""VAE training objective: pixel MSE, wavelet L1, KL, reconstruction GAN.

The GAN is the pair-discrimination kind: the discriminator receives the
original and the reconstruction of the same clip concatenated along
channels and predicts which is which. A perceptual term exists only as an
optional hook taking an externally supplied feature network.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, causal_conv3d, concatenate
from .nn import he_conv, zeros
from .vae import LOGVAR_CLAMP, vae_forward_train

INV_SQRT2 = float(1.0 / np.sqrt(2.0))

SUBBAND_ORDER = ("lll", "llh", "lhl", "lhh", "hll", "hlh", "hhl", "hhh")


@dataclass
class DwtSubbands:
    """Single-level 3D Haar analysis: 8 subbands, axis order (t, h, w).

    The first letter of each label is the temporal filter, then height,
    then width. `padded` records which axes were edge-replicated to even
    length before the transform.
    """

    lll: Tensor
    llh: Tensor
    lhl: Tensor
    lhh: Tensor
    hll: Tensor
    hlh: Tensor
    hhl: Tensor
    hhh: Tensor
    padded: tuple = (False, False, False)

    def bands(self):
        return tuple(getattr(self, name) for name in SUBBAND_ORDER)

    def detail_bands(self):
        return self.bands()[1:]


def _pad_axis_to_even(x, axis):
    if x.shape[axis] % 2 == 0:
        return x, False
    key = [slice(None)] * x.ndim
    key[axis] = slice(-1, None)
    return concatenate([x, x[tuple(key)]], axis=axis), True


def _haar_axis(x, axis):
    even = [slice(None)] * x.ndim
    odd = [slice(None)] * x.ndim
    even[axis] = slice(0, None, 2)
    odd[axis] = slice(1, None, 2)
    a, b = x[tuple(even)], x[tuple(odd)]
    return (a + b) * INV_SQRT2, (a - b) * INV_SQRT2


def dwt3d_haar(x):
    """Orthonormal Haar analysis along t, h, w of a [T,H,W,c] tensor.

    Odd extents are edge-replicated to even first. Orthonormality gives
    Parseval: total subband energy equals input energy (of the padded
    signal).
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4:
        raise ValueError(f"expected [T,H,W,c], got {x.shape}")
    padded = []
    for axis in (0, 1, 2):
        x, did = _pad_axis_to_even(x, axis)
        padded.append(did)
    lo_t, hi_t = _haar_axis(x, 0)
    ll, lh = _haar_axis(lo_t, 1)
    hl, hh = _haar_axis(hi_t, 1)
    lll, llh = _haar_axis(ll, 2)
    lhl, lhh = _haar_axis(lh, 2)
    hll, hlh = _haar_axis(hl, 2)
    hhl, hhh = _haar_axis(hh, 2)
    return DwtSubbands(lll, llh, lhl, lhh, hll, hlh, hhl, hhh, tuple(padded))


def dwt_loss(x, x_hat):
    """Sum over the 8 subbands of the mean absolute difference."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    bx = dwt3d_haar(x).bands()
    by = dwt3d_haar(x_hat).bands()
    total = None
    for a, b in zip(bx, by):
        term = (a - b).abs().mean()
        total = term if total is None else total + term
    return total


def detail_energy(x):
    """Mean squared magnitude of the 7 detail subbands; a high-frequency
    content statistic used by the decoder comparison report."""
    total = 0.0
    for band in dwt3d_haar(x).detail_bands():
        total += float((band.data ** 2).mean())
    return total / 7.0


def kl_uniform_logvar(post):
    """KL(N(mean, e^logvar · I) || N(0, I)) with the channel-shared logvar.

    Mean over every (position, channel) of 0.5 (mean² + e^lv − lv − 1);
    the single logvar per position broadcasts across channels.
    """
    lv = post.logvar.clamp(*LOGVAR_CLAMP)
    per = (post.mean * post.mean + (lv.exp() - lv - 1.0)) * 0.5
    return per.mean()


# -- reconstruction GAN --------------------------------------------------------


@dataclass
class DiscriminatorBatch:
    """Channel-concatenated (A, B) clip pairs plus which side is original."""

    pair: Tensor  # [B, T, H, W, 6]
    a_is_original: np.ndarray  # bool per clip

    def __post_init__(self):
        if self.pair.shape[-1] != 6:
            raise ValueError("pair must concatenate two RGB clips (6 channels)")


@dataclass
class VaeLossWeights:
    w_mse: float = 1.0
    w_dwt: float = 0.5
    w_kl: float = 1e-6
    w_gan: float = 0.1
    w_lpips: float = 0.0

    def __post_init__(self):
        vals = (self.w_mse, self.w_dwt, self.w_kl, self.w_gan, self.w_lpips)
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ValueError("loss weights must be finite and nonnegative")


def init_disc_params(rng, base=24):
    p = {}
    p["disc.c0.w"] = he_conv(rng, 3, 3, 3, 6, base)
    p["disc.c0.b"] = zeros(base)
    p["disc.c1.w"] = he_conv(rng, 3, 3, 3, base, base * 2)
    p["disc.c1.b"] = zeros(base * 2)
    p["disc.c2.w"] = he_conv(rng, 3, 3, 3, base * 2, base * 2)
    p["disc.c2.b"] = zeros(base * 2)
    p["disc.head.w"] = he_conv(rng, 1, 1, 1, base * 2, 1, gain=0.2)
    p["disc.head.b"] = zeros(1)
    return p


def _disc_logits(pair5, params):
    h = causal_conv3d(pair5, params["disc.c0.w"], params["disc.c0.b"],
                      stride=(1, 2, 2)).silu()
    h = causal_conv3d(h, params["disc.c1.w"], params["disc.c1.b"],
                      stride=(2, 2, 2)).silu()
    h = causal_conv3d(h, params["disc.c2.w"], params["disc.c2.b"]).silu()
    h = causal_conv3d(h, params["disc.head.w"], params["disc.head.b"])
    return h.mean(axis=(1, 2, 3, 4))


def _with_batch_axis(x):
    t = x if isinstance(x, Tensor) else Tensor(x)
    return t.reshape((1,) + t.shape) if t.ndim == 4 else t


def make_discriminator_batch(original, reconstruction, rng):
    """Pair the clips channel-wise in uniformly random order per sample."""
    a = _with_batch_axis(original)
    b = _with_batch_axis(reconstruction)
    flags = rng.uniform(shape=(a.shape[0],)) < 0.5
    rows = []
    for i, a_first in enumerate(flags):
        lhs, rhs = (a, b) if a_first else (b, a)
        rows.append(concatenate([lhs[i:i + 1], rhs[i:i + 1]], axis=-1))
    return DiscriminatorBatch(concatenate(rows, axis=0), np.asarray(flags))


def rgan_discriminator(batch, params):
    """Per-clip logit; positive means the discriminator believes the first
    3 channels hold the original."""
    return _disc_logits(_with_batch_axis(batch.pair), params)


def rgan_losses(original, reconstruction, disc_params, rng):
    """Hinge pair-discrimination losses.

    d_loss scores each clip under both orderings (the exact average over
    the uniformly random A/B placement); the reconstruction is detached so
    only the discriminator learns from it. g_loss drives the discriminator
    to prefer the reconstruction, with gradients stopped at the
    discriminator parameters; rng picks which ordering the generator term
    is estimated from.
    """
    orig = _with_batch_axis(original)
    recon = _with_batch_axis(reconstruction)
    if orig.shape != recon.shape:
        raise ValueError(f"shape mismatch: {orig.shape} vs {recon.shape}")

    recon_d = recon.detach()
    s_correct = _disc_logits(concatenate([orig, recon_d], axis=-1), disc_params)
    s_wrong = _disc_logits(concatenate([recon_d, orig], axis=-1), disc_params)
    d_loss = ((1.0 - s_correct).relu() + (1.0 + s_wrong).relu()).mean()

    frozen = {k: v.detach() for k, v in disc_params.items()}
    orig_d = orig.detach()
    recon_first = bool(rng.uniform() < 0.5)
    if recon_first:
        s_pref = _disc_logits(concatenate([recon, orig_d], axis=-1), frozen)
    else:
        s_pref = -_disc_logits(concatenate([orig_d, recon], axis=-1), frozen)
    g_loss = -s_pref.mean()
    return d_loss, g_loss


def total_vae_loss(x, t, vae_params, disc_params, weights, cfg, rng,
                   gan_enabled=True, lpips_fn=None):
    """Weighted sum of the VAE objective terms plus a per-term breakdown.

    Returns (loss Tensor, dict of float terms). The GAN term is skipped
    when disabled (warm-up) or zero-weighted; the perceptual hook runs only
    when a feature network is supplied and weighted.
    """
    recon, post = vae_forward_train(x, t, vae_params, cfg, rng)
    target = x.data
    pred = recon.data
    mse = ((pred - target) ** 2).mean()
    dwt = dwt_loss(target, pred)
    kl = kl_uniform_logvar(post)

    total = mse * weights.w_mse + dwt * weights.w_dwt + kl * weights.w_kl
    breakdown = {
        "mse": float(mse.data),
        "dwt": float(dwt.data),
        "kl": float(kl.data),
        "gan": 0.0,
    }
    if gan_enabled and weights.w_gan > 0 and disc_params is not None:
        _, g_loss = rgan_losses(target, pred, disc_params, rng)
        total = total + g_loss * weights.w_gan
        breakdown["gan"] = float(g_loss.data)
    if lpips_fn is not None and weights.w_lpips > 0:
        lp = lpips_fn(target, pred)
        total = total + lp * weights.w_lpips
        breakdown["lpips"] = float(lp.data)
    breakdown["total"] = float(total.data)
    return total, breakdown
