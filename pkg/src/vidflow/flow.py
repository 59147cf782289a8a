"""Rectified-flow objective, timestep sampling, and the Euler sampler.

The forward process mixes clean latents linearly with Gaussian noise,
z_t = (1-t) z0 + t e, and the transformer regresses the constant velocity
v = e - z0. Sampling integrates the ODE backwards with Euler steps over a
token-count-shifted schedule and hands the final mildly-noised state to
the denoising decoder instead of integrating all the way to t=0.
"""

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .autodiff import Tensor
from .dit import TokenSequence, dit_forward, token_coordinates
from .vae import MAX_DECODER_T, LatentTensor, VideoTensor, decode_denoise, encode


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class TimestepSampler:
    """Logit-normal base law, token-count shift, quantile clamp.

    base="log-normal" swaps in exp(u) truncated to (0, 1]; kept behind a
    flag because it puts most mass near t=0 and is not the default.
    """

    loc: float = 0.0
    scale: float = 1.0
    clamp: tuple = (0.005, 0.999)
    n_ref: int = 256
    base: str = "logit-normal"

    def __post_init__(self):
        lo, hi = self.clamp
        if not 0.0 < lo < hi < 1.0:
            raise ValueError(f"clamp quantiles must satisfy 0 < lo < hi < 1, got {self.clamp}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.base not in ("logit-normal", "log-normal"):
            raise ValueError(f"unknown base law {self.base!r}")

    def shift_for(self, n_tokens):
        if n_tokens < 1:
            raise ValueError("token count must be positive")
        return max(1.0, float(np.sqrt(n_tokens / self.n_ref)))

    def base_quantile(self, p):
        """Quantile of the un-shifted base law restricted to (0, 1]."""
        if self.base == "logit-normal":
            return float(_sigmoid(self.loc + self.scale * norm.ppf(p)))
        # log-normal truncated at 1: F(x) = Phi((ln x - m)/s) / Phi(-m/s)
        cap = norm.cdf(-self.loc / self.scale)
        return float(np.exp(self.loc + self.scale * norm.ppf(p * cap)))

    def bounds(self, n_tokens):
        """The clamp interval on the shifted scale."""
        mu = self.shift_for(n_tokens)
        lo, hi = self.clamp
        return (shift_timestep(self.base_quantile(lo), mu),
                shift_timestep(self.base_quantile(hi), mu))


@dataclass
class ConditioningSpec:
    """Token indices pinned to a small timestep (image-to-video)."""

    token_mask: np.ndarray  # [N] bool, True = conditioned
    t_c: float = 0.0

    def __post_init__(self):
        self.token_mask = np.asarray(self.token_mask, dtype=bool)
        if not 0.0 <= self.t_c <= MAX_DECODER_T:
            raise ValueError(f"t_c must lie in [0, {MAX_DECODER_T}], got {self.t_c}")


@dataclass
class LatentStats:
    """Per-channel corpus statistics; the flow runs on standardized latents."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean/std must be matching rank-1 arrays")
        if np.any(self.std <= 0):
            raise ValueError("std must be strictly positive")

    def standardize(self, z):
        return (z - self.mean) / self.std

    def unstandardize(self, z):
        return z * self.std + self.mean


def shift_timestep(t, mu):
    """t' = mu*t / (1 + (mu-1)*t); identity at mu=1, pushes mass upward."""
    t = np.asarray(t, dtype=np.float64)
    out = mu * t / (1.0 + (mu - 1.0) * t)
    return float(out) if out.ndim == 0 else out


def noise_forward(z0, t, eps):
    """z_t = (1-t) z0 + t eps with per-token t broadcast over channels."""
    t = np.asarray(t, dtype=np.float32)
    if t.ndim == 1:
        t = t[:, None]
    z0 = z0 if isinstance(z0, Tensor) else Tensor(z0)
    eps = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps, dtype=np.float32))
    return z0 * (1.0 - t) + eps * t


def velocity_target(z0, eps):
    """The rectified-flow regression target e - z0."""
    eps = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps, dtype=np.float32))
    z0 = z0 if isinstance(z0, Tensor) else Tensor(z0)
    return eps - z0


def sample_timesteps(n, n_tokens, sampler, rng):
    """n draws from the shifted law, rejection-clamped to its quantile band."""
    mu = sampler.shift_for(n_tokens)
    lo, hi = sampler.bounds(n_tokens)
    out = np.empty(0, dtype=np.float64)
    while out.size < n:
        u = rng.normal((max(n, 256),), dtype=np.float64) * sampler.scale + sampler.loc
        if sampler.base == "logit-normal":
            t = _sigmoid(u)
        else:
            t = np.exp(u)
            t = t[t <= 1.0]
        t = shift_timestep(t, mu)
        out = np.concatenate([out, t[(t >= lo) & (t <= hi)]])
    return out[:n]


def flow_loss(model, z0, caption, sampler, rng, per_token_t=None):
    """MSE between predicted and true velocity at a sampled noise level.

    model(z_t: Tensor[N,C], t: [N], caption) -> Tensor[N,C]. When
    per_token_t is omitted, one global t is drawn for all tokens.
    """
    z0 = z0 if isinstance(z0, Tensor) else Tensor(np.asarray(z0, dtype=np.float32))
    n = z0.shape[0]
    if per_token_t is None:
        per_token_t = np.full(n, sample_timesteps(1, n, sampler, rng)[0])
    eps = rng.normal(z0.shape)
    z_t = noise_forward(z0.detach(), per_token_t, eps)
    v = model(z_t, per_token_t, caption)
    err = v - velocity_target(z0.detach(), eps)
    return (err * err).mean()


def euler_step(z_t, v, dt):
    """One backward ODE step z_{t-dt} = z_t - dt * v."""
    if dt <= 0:
        raise ValueError("step size must be positive")
    return z_t - dt * v


def inference_schedule(steps, n_tokens, sampler, t_final=0.05):
    """Decreasing grid, uniform on the shifted scale, ending at t_final.

    Starts at the sampler's upper clamp bound (the highest noise level seen
    in training); the state at t_final goes to the decoder.
    """
    if steps < 1:
        raise ValueError("need at least one step")
    if not 0.0 <= t_final <= MAX_DECODER_T:
        raise ValueError(f"t_final must lie in [0, {MAX_DECODER_T}]")
    _, hi = sampler.bounds(n_tokens)
    if t_final >= hi:
        raise ValueError("t_final must sit below the schedule start")
    return np.linspace(hi, t_final, steps + 1)


def apply_train_conditioning(first_frame_masks, global_t, p_cond, rng):
    """Per-sample conditioning for image-to-video training.

    With probability p_cond a sample's first-latent-frame tokens get an
    independent t ~ U[0, 0.2]; all other tokens keep that sample's global
    t. Returns (per-token t arrays, applied flags).
    """
    if not 0.0 <= p_cond <= 1.0:
        raise ValueError("p_cond must lie in [0, 1]")
    global_t = np.atleast_1d(np.asarray(global_t, dtype=np.float64))
    if len(global_t) != len(first_frame_masks):
        raise ValueError("one global t per sample required")
    applied = rng.uniform(0.0, 1.0, (len(first_frame_masks),)) < p_cond
    assignments = []
    for mask, t_g, flag in zip(first_frame_masks, global_t, applied):
        mask = np.asarray(mask, dtype=bool)
        t = np.full(mask.shape[0], t_g)
        if flag:
            t[mask] = rng.uniform(0.0, MAX_DECODER_T)
        assignments.append(t)
    return assignments, applied


def latent_to_tokens(z):
    """[T',H',W',C] -> [N,C] row-major; inverse of tokens_to_latent."""
    arr = z.data.data if isinstance(z, LatentTensor) else np.asarray(z)
    return arr.reshape(-1, arr.shape[-1])


def tokens_to_latent(tokens, latent_dims):
    arr = np.asarray(tokens)
    return arr.reshape(tuple(latent_dims) + (arr.shape[-1],))


def generate(caption, latent_dims, steps, dit_cfg, vae_cfg, dit_params,
             vae_params, rng, fps=8.0, conditioning=None, t_c=0.0,
             t_final=0.05, sampler=None, stats=None):
    """Sample a video: noise -> Euler trajectory -> denoising decode.

    conditioning is an optional [H,W,3] image (or VideoTensor with T=1);
    its encoded latent frame is noised to t_c, pinned at t_c for the model,
    and restored after every Euler step, so at t_c=0 the first latent frame
    passes through untouched. The final state at t_final is decoded by the
    noise-aware decoder rather than integrated to t=0.
    """
    sampler = sampler or TimestepSampler()
    tl, hl, wl = latent_dims
    n = tl * hl * wl
    schedule = inference_schedule(steps, n, sampler, t_final)
    coords = token_coordinates(latent_dims, vae_cfg.temporal_factor,
                               vae_cfg.spatial_factor, fps)
    z = rng.normal((n, vae_cfg.latent_channels))

    cond_mask = np.zeros(n, dtype=bool)
    cond_state = None
    if conditioning is not None:
        if not isinstance(conditioning, VideoTensor):
            conditioning = VideoTensor(
                Tensor(np.asarray(conditioning, dtype=np.float32)[None]), fps)
        if conditioning.shape[0] != 1:
            raise ValueError("conditioning must be a single frame")
        if conditioning.shape[1:3] != (hl * vae_cfg.spatial_factor,
                                       wl * vae_cfg.spatial_factor):
            raise ValueError(
                f"conditioning resolution {conditioning.shape[1:3]} does not "
                f"match latent plan {(hl, wl)}")
        spec = ConditioningSpec(np.arange(n) < hl * wl, t_c)
        if spec.t_c >= t_final:
            raise ValueError("t_c must sit below the final sampler timestep")
        cond_mask = spec.token_mask
        z_c = encode(conditioning, vae_params, vae_cfg).mean.data
        z_c = z_c.reshape(-1, vae_cfg.latent_channels)
        if stats is not None:
            z_c = stats.standardize(z_c)
        cond_state = (1.0 - t_c) * z_c + t_c * z[cond_mask]
        z[cond_mask] = cond_state

    t_vec = np.empty(n, dtype=np.float64)
    for i in range(steps):
        t_now, t_next = schedule[i], schedule[i + 1]
        t_vec[:] = t_now
        t_vec[cond_mask] = t_c
        seq = TokenSequence(Tensor(z), coords, t_vec, fps)
        v = dit_forward(seq, caption, dit_cfg, dit_params).data
        z = euler_step(z, v, float(t_now - t_next))
        if cond_state is not None:
            z[cond_mask] = cond_state

    if stats is not None:
        z = stats.unstandardize(z)
    lat = LatentTensor(Tensor(tokens_to_latent(z, latent_dims)), fps)
    return decode_denoise(lat, t_final, vae_params, vae_cfg, rng)
