"""Causal video VAE with a denoising decoder.

The encoder patchifies pixels, runs strided causal convolutions down to a
Gaussian posterior whose log-variance is shared across channels, and stays
strictly causal in time. The decoder mirrors the shape algebra, is
conditioned on a diffusion timestep through adaptive group normalization,
and can inject learned-scale Gaussian noise at configurable stages; it
performs the final denoising step of the sampling pipeline.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, causal_conv3d, concatenate, upsample_nearest
from .nn import he_conv, he_linear, linear, ones, sinusoidal_embedding, zeros

MAX_DECODER_T = 0.2
LOGVAR_CLAMP = (-30.0, 20.0)


@dataclass(frozen=True)
class VaeConfig:
    spatial_factor: int = 8
    temporal_factor: int = 2
    latent_channels: int = 16
    patch: tuple = (4, 1)  # (ps, pt) applied at the encoder input
    enc_channels: tuple = (48, 64)
    dec_channels: tuple = (64, 48)
    noise_inject_stages: tuple = (0, 1)
    norm_groups: int = 8
    time_embed_dim: int = 32
    transformer_patch: tuple = (1, 1, 1)  # downstream token grouping, arithmetic only

    def __post_init__(self):
        ps, pt = self.patch
        if self.spatial_factor % ps or self.temporal_factor % pt:
            raise ValueError("patch extents must divide the compression factors")
        rs = self.spatial_factor // ps
        rt = self.temporal_factor // pt
        for r in (rs, rt):
            if r & (r - 1):
                raise ValueError("per-stage factors must be powers of two")

    @property
    def stage_strides(self):
        """Strides of the conv stages after patchify, deepest last."""
        ps, pt = self.patch
        ns = (self.spatial_factor // ps).bit_length() - 1
        nt = (self.temporal_factor // pt).bit_length() - 1
        return tuple(
            (2 if i < nt else 1, 2 if i < ns else 1, 2 if i < ns else 1)
            for i in range(max(ns, nt)))

    @property
    def patch_channels(self):
        ps, pt = self.patch
        return 3 * ps * ps * pt


def desk_config(**overrides):
    return VaeConfig(**overrides)


def full_scale_config():
    return VaeConfig(
        spatial_factor=32, temporal_factor=8, latent_channels=128,
        enc_channels=(64, 128, 256, 320), dec_channels=(320, 256, 128, 64),
        noise_inject_stages=(0, 1, 2, 3))


# Published model-family configurations used for the ratio arithmetic below.
# Only the compression factors matter here; channel stacks are left default.
REFERENCE_MODELS = {
    "movie-gen": VaeConfig(spatial_factor=8, temporal_factor=8, latent_channels=16,
                           patch=(1, 1), transformer_patch=(2, 2, 1)),
    "hunyuan-video": VaeConfig(spatial_factor=8, temporal_factor=4, latent_channels=16,
                               patch=(1, 1), transformer_patch=(2, 2, 1)),
    "pyramid-flow": VaeConfig(spatial_factor=8, temporal_factor=8, latent_channels=16,
                              patch=(1, 1), transformer_patch=(2, 2, 1)),
    "cog-video-x": VaeConfig(spatial_factor=8, temporal_factor=4, latent_channels=16,
                             patch=(1, 1), transformer_patch=(2, 2, 1)),
    "ours": full_scale_config(),
}


# -- domain types ------------------------------------------------------------


def _as_tensor(data):
    return data if isinstance(data, Tensor) else Tensor(data)


@dataclass
class VideoTensor:
    """A pixel clip [T, H, W, 3] with values in [0, 1] plus its frame rate."""

    data: Tensor
    fps: float

    def __post_init__(self):
        self.data = _as_tensor(self.data)
        if self.data.ndim != 4 or self.data.shape[-1] != 3:
            raise ValueError(f"expected [T,H,W,3] clip, got {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return np.asarray(self.data.data)

    def validate_range(self):
        lo, hi = float(self.data.data.min()), float(self.data.data.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values outside [0,1]: [{lo}, {hi}]")


@dataclass
class LatentPosterior:
    """Gaussian posterior: per-position mean over C channels, one shared logvar."""

    mean: Tensor
    logvar: Tensor
    fps: float

    def __post_init__(self):
        self.mean = _as_tensor(self.mean)
        self.logvar = _as_tensor(self.logvar)
        if self.logvar.shape[-1] != 1:
            raise ValueError("logvar must have channel extent exactly 1")
        if self.mean.shape[:-1] != self.logvar.shape[:-1]:
            raise ValueError("mean and logvar grids disagree")


@dataclass
class LatentTensor:
    """A latent clip [T', H', W', C] remembering the source frame rate."""

    data: Tensor
    fps: float

    def __post_init__(self):
        self.data = _as_tensor(self.data)

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return np.asarray(self.data.data)


# -- ratio arithmetic ---------------------------------------------------------


def compression_ratio(cfg):
    """Input reals per latent real: spatial² · temporal · 3 / C."""
    return cfg.spatial_factor ** 2 * cfg.temporal_factor * 3 / cfg.latent_channels


def pixels_per_token(cfg):
    """Pixels represented by one transformer token."""
    tp = int(np.prod(cfg.transformer_patch))
    return cfg.spatial_factor ** 2 * cfg.temporal_factor * tp


def latent_shape(cfg, t, h, w):
    if (t - 1) % cfg.temporal_factor:
        raise ValueError(f"T={t} must be 1 mod temporal_factor={cfg.temporal_factor}")
    if h % cfg.spatial_factor or w % cfg.spatial_factor:
        raise ValueError(f"H,W=({h},{w}) must divide spatial_factor={cfg.spatial_factor}")
    return (1 + (t - 1) // cfg.temporal_factor,
            h // cfg.spatial_factor,
            w // cfg.spatial_factor)


def token_count(cfg, t, h, w):
    tl, hl, wl = latent_shape(cfg, t, h, w)
    return tl * hl * wl // int(np.prod(cfg.transformer_patch))


# -- patchify ----------------------------------------------------------------


def _patchify5(x, ps, pt):
    """Space-time-to-depth on [B,T,H,W,C]; frame 0 forms its own patch."""
    b, t, h, w, c = x.shape
    if h % ps or w % ps:
        raise ValueError(f"H,W=({h},{w}) not divisible by ps={ps}")
    if (t - 1) % pt:
        raise ValueError(f"T-1={t - 1} not divisible by pt={pt}")
    if pt > 1:
        # repeat-fill the first frame so every temporal block has pt slices;
        # the inverse discards the duplicates, keeping the map invertible
        x = concatenate([x[:, 0:1]] * pt + [x[:, 1:]], axis=1)
    te = 1 + (t - 1) // pt
    y = x.reshape(b, te, pt, h // ps, ps, w // ps, ps, c)
    y = y.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return y.reshape(b, te, h // ps, w // ps, pt * ps * ps * c)


def _unpatchify5(y, ps, pt, c):
    b, te, hp, wp, k = y.shape
    if k != pt * ps * ps * c:
        raise ValueError(f"channel extent {k} does not factor as pt*ps*ps*{c}")
    x = y.reshape(b, te, hp, wp, pt, ps, ps, c)
    x = x.transpose(0, 1, 4, 2, 5, 3, 6, 7)
    x = x.reshape(b, te * pt, hp * ps, wp * ps, c)
    if pt > 1:
        # collapse the repeat-filled first block back to a single frame
        x = concatenate([x[:, pt - 1:pt], x[:, pt:]], axis=1)
    return x


def patchify(x, ps, pt):
    """Single-clip form; accepts a VideoTensor or a rank-4 Tensor."""
    t = x.data if isinstance(x, VideoTensor) else _as_tensor(x)
    return _patchify5(t.reshape((1,) + t.shape), ps, pt)[0]


def unpatchify(y, ps, pt, channels=3):
    y = _as_tensor(y)
    return _unpatchify5(y.reshape((1,) + y.shape), ps, pt, channels)[0]


# -- building blocks ----------------------------------------------------------


def _channel_rms(x, gamma, groups, eps=1e-6):
    """Per-frame RMS over the spatial extent and channel groups.

    Statistics pool within one time index only, so the op never mixes time
    and the encoder stays causal. Pooling spatially (rather than per site)
    keeps the within-frame amplitude contrast that tells an object region
    apart from empty background.
    """
    c = x.shape[-1]
    if c % groups:
        raise ValueError(f"{groups} groups do not divide {c} channels")
    g = x.reshape(x.shape[:-1] + (groups, c // groups))
    ms = (g * g).mean(axis=(-4, -3, -1), keepdims=True)
    normed = (g / (ms + eps).sqrt()).reshape(x.shape)
    return normed * gamma


def _ada_norm(x, temb, params, name, groups):
    """Group RMS followed by timestep-conditioned scale/shift."""
    normed = _channel_rms(x, params[f"{name}.g"], groups)
    c = x.shape[-1]
    mod = linear(temb, params[f"{name}.tw"], params[f"{name}.tb"])  # [B, 2C]
    scale = mod[:, :c].reshape((mod.shape[0],) + (1,) * (x.ndim - 2) + (c,))
    shift = mod[:, c:].reshape((mod.shape[0],) + (1,) * (x.ndim - 2) + (c,))
    return normed * (scale + 1.0) + shift


def _conv(x, params, name, stride=(1, 1, 1)):
    return causal_conv3d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride)


# -- parameters ----------------------------------------------------------------


def init_vae_params(cfg, rng):
    """Fresh parameter dict for encoder, decoder and timestep conditioning."""
    strides = cfg.stage_strides
    e = cfg.enc_channels
    d = cfg.dec_channels
    if len(e) != len(strides) + 1 or len(d) != len(strides) + 1:
        raise ValueError("channel stacks must list one width per stage plus the base")
    for w in d:
        if w % cfg.norm_groups:
            raise ValueError("norm_groups must divide every decoder width")
    bad = [s for s in cfg.noise_inject_stages if not 0 <= s <= len(strides)]
    if bad:
        raise ValueError(f"noise_inject_stages out of range: {bad}")

    p = {}
    pch = cfg.patch_channels
    c_lat = cfg.latent_channels
    ted = cfg.time_embed_dim

    p["enc.in.w"] = he_conv(rng, 3, 3, 3, pch, e[0])
    p["enc.in.b"] = zeros(e[0])
    for i, _ in enumerate(strides):
        p[f"enc.down{i}.w"] = he_conv(rng, 3, 3, 3, e[i], e[i + 1])
        p[f"enc.down{i}.b"] = zeros(e[i + 1])
        p[f"enc.down{i}.g"] = ones(e[i + 1])
    w = e[-1]
    p["enc.res.g1"] = ones(w)
    p["enc.res.w1"] = he_conv(rng, 3, 3, 3, w, w)
    p["enc.res.b1"] = zeros(w)
    p["enc.res.g2"] = ones(w)
    p["enc.res.w2"] = he_conv(rng, 3, 3, 3, w, w, gain=0.5)
    p["enc.res.b2"] = zeros(w)
    p["enc.head.w"] = he_conv(rng, 1, 1, 1, w, c_lat + 1, gain=0.2)
    # the trailing channel is the shared log-variance; starting it strongly
    # negative keeps early posterior samples close to the mean, otherwise
    # unit-scale sampling noise drowns the latent and the decoder learns to
    # ignore it before the encoder can object
    head_b = np.zeros(c_lat + 1, dtype=np.float32)
    head_b[-1] = -6.0
    p["enc.head.b"] = Tensor(head_b, requires_grad=True)

    p["dec.t.w1"] = he_linear(rng, ted, 2 * ted)
    p["dec.t.b1"] = zeros(2 * ted)

    def ada_head(name, c):
        p[f"{name}.g"] = ones(c)
        p[f"{name}.tw"] = zeros(2 * ted, 2 * c)
        p[f"{name}.tb"] = zeros(2 * c)

    p["dec.in.w"] = he_conv(rng, 1, 1, 1, c_lat, d[0])
    p["dec.in.b"] = zeros(d[0])
    ada_head("dec.res.n1", d[0])
    p["dec.res.w1"] = he_conv(rng, 3, 3, 3, d[0], d[0])
    p["dec.res.b1"] = zeros(d[0])
    ada_head("dec.res.n2", d[0])
    p["dec.res.w2"] = he_conv(rng, 3, 3, 3, d[0], d[0], gain=0.5)
    p["dec.res.b2"] = zeros(d[0])
    if 0 in cfg.noise_inject_stages:
        p["dec.inject0.s"] = zeros(d[0])
    for i, _ in enumerate(strides):
        p[f"dec.up{i}.w"] = he_conv(rng, 3, 3, 3, d[i], d[i + 1])
        p[f"dec.up{i}.b"] = zeros(d[i + 1])
        ada_head(f"dec.up{i}.n", d[i + 1])
        if (i + 1) in cfg.noise_inject_stages:
            p[f"dec.inject{i + 1}.s"] = zeros(d[i + 1])
    p["dec.out.w"] = he_conv(rng, 3, 3, 3, d[-1], d[-1])
    p["dec.out.b"] = zeros(d[-1])
    p["dec.out.g"] = ones(d[-1])
    # the pixel head must start nonzero: it gates every gradient flowing
    # back into the decoder and encoder, and a zero start freezes them all
    p["dec.head.w"] = he_conv(rng, 1, 1, 1, d[-1], pch, gain=0.2)
    p["dec.head.b"] = zeros(pch)
    return p


# -- encoder -------------------------------------------------------------------


def _encode_body(x5, params, cfg):
    h = _patchify5(x5, *cfg.patch)
    h = _conv(h, params, "enc.in").silu()
    for i, stride in enumerate(cfg.stage_strides):
        h = _conv(h, params, f"enc.down{i}", stride=stride)
        h = _channel_rms(h, params[f"enc.down{i}.g"], cfg.norm_groups).silu()
    r = _channel_rms(h, params["enc.res.g1"], cfg.norm_groups).silu()
    r = causal_conv3d(r, params["enc.res.w1"], params["enc.res.b1"])
    r = _channel_rms(r, params["enc.res.g2"], cfg.norm_groups).silu()
    r = causal_conv3d(r, params["enc.res.w2"], params["enc.res.b2"])
    h = h + r
    out = _conv(h, params, "enc.head")
    c = cfg.latent_channels
    return out[..., :c], out[..., c:]


def encode(x, params, cfg):
    """VideoTensor -> LatentPosterior, causal in time."""
    if not isinstance(x, VideoTensor):
        raise TypeError("encode expects a VideoTensor")
    latent_shape(cfg, *x.shape[:3])  # validates divisibility
    x5 = x.data.reshape((1,) + x.shape)
    mean5, logvar5 = _encode_body(x5, params, cfg)
    return LatentPosterior(mean5[0], logvar5[0], x.fps)


def sample_posterior(post, rng):
    """Reparameterized draw; the shared logvar broadcasts over channels."""
    logvar = post.logvar.clamp(*LOGVAR_CLAMP)
    std = (logvar * 0.5).exp()
    noise = rng.normal(post.mean.shape)
    return LatentTensor(post.mean + std * noise, post.fps)


# -- decoder -------------------------------------------------------------------


def _inject(x, params, key, t_vec, rng):
    if key not in params:
        return x
    # noise amplitude rides the conditioning timestep: a clean latent
    # (t=0) decodes deterministically, higher t synthesizes more detail
    tb = t_vec.reshape((-1,) + (1,) * (len(x.shape) - 1)).astype(np.float32)
    noise = rng.normal(x.shape) * tb
    return x + params[key] * noise


def _decode_body(z5, t_vec, params, cfg, rng):
    temb = Tensor(sinusoidal_embedding(t_vec, cfg.time_embed_dim))
    temb = linear(temb, params["dec.t.w1"], params["dec.t.b1"]).silu()

    h = _conv(z5, params, "dec.in").silu()
    r = _ada_norm(h, temb, params, "dec.res.n1", cfg.norm_groups).silu()
    r = causal_conv3d(r, params["dec.res.w1"], params["dec.res.b1"])
    r = _ada_norm(r, temb, params, "dec.res.n2", cfg.norm_groups).silu()
    r = causal_conv3d(r, params["dec.res.w2"], params["dec.res.b2"])
    h = h + r
    h = _inject(h, params, "dec.inject0.s", t_vec, rng)
    for i, stride in enumerate(reversed(cfg.stage_strides)):
        h = upsample_nearest(h, stride, first_frame_single=True)
        h = _conv(h, params, f"dec.up{i}")
        h = _ada_norm(h, temb, params, f"dec.up{i}.n", cfg.norm_groups).silu()
        h = _inject(h, params, f"dec.inject{i + 1}.s", t_vec, rng)
    h = _conv(h, params, "dec.out")
    h = _channel_rms(h, params["dec.out.g"], cfg.norm_groups).silu()
    h = _conv(h, params, "dec.head")
    # linear head: most target pixels are exactly 0.0, and a squashing
    # nonlinearity saturates against them, choking gradients for the rest
    return _unpatchify5(h, *cfg.patch, c=3)


def decode_denoise(z, t, params, cfg, rng):
    """LatentTensor + timestep in [0, 0.2] -> VideoTensor.

    The timestep conditions every decoder stage; configured stages add
    Gaussian noise scaled by learned per-channel factors (zero at init, so
    a fresh decoder is a deterministic function of (z, t)).
    """
    t = float(t)
    if not 0.0 <= t <= MAX_DECODER_T:
        raise ValueError(f"decoder timestep {t} outside [0, {MAX_DECODER_T}]")
    z5 = z.data.reshape((1,) + z.shape)
    pix = _decode_body(z5, np.array([t], dtype=np.float64), params, cfg, rng)
    return VideoTensor(pix[0].clamp(0.0, 1.0), z.fps)


def vae_forward_train(x, t, params, cfg, rng):
    """Training forward: encode, sample, noise the latent to level t, decode.

    Matches the sampling-time contract: the decoder always sees a latent at
    noise level t together with t itself.
    """
    t = float(t)
    if not 0.0 <= t <= MAX_DECODER_T:
        raise ValueError(f"training timestep {t} outside [0, {MAX_DECODER_T}]")
    post = encode(x, params, cfg)
    z0 = sample_posterior(post, rng)
    eps = rng.normal(z0.shape)
    z_t = z0.data * (1.0 - t) + Tensor(eps * t)
    # the regression losses see the raw head output; clamping here would
    # zero the gradient of any pixel that strays outside [0, 1] mid-training
    pix = _decode_body(z_t.reshape((1,) + z_t.shape),
                       np.array([t], dtype=np.float64), params, cfg, rng)
    return VideoTensor(pix[0], z0.fps), post
