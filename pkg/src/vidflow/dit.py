"""Velocity-prediction transformer over latent tokens.

Blocks follow the adaptive-norm diffusion-transformer recipe: RMS-normed
self-attention with per-head query/key normalization and three-axis rotary
embeddings on fractional coordinates, cross-attention into caption
embeddings, and a gated FFN. Timestep conditioning is per token, so a
token set can mix noise levels (the conditioning mechanism for
image-to-video).
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concatenate, gather, masked_softmax, rms_normalize, rotate_pairs
from .nn import he_linear, linear, ones, sinusoidal_embedding, zeros


def _axis_split(head_dim):
    """Split a head across (t, x, y): near-equal, even, remainder to time."""
    base = (head_dim // 3) & ~1
    rem = head_dim - 3 * base
    return (base + rem, base, base)


@dataclass(frozen=True)
class DitConfig:
    hidden_dim: int = 96
    heads: int = 4
    blocks: int = 3
    ffn_factor: int = 4
    latent_channels: int = 16
    text_dim: int = 64
    text_vocab: int = 64
    time_embed_dim: int = 32
    max_width: float = 64.0
    max_height: float = 64.0
    max_duration: float = 2.0
    rope_f_min: float = 1.0
    rope_growth: float = 0.0  # 0 means fill the largest axis to ~1e4
    rope_mode: str = "exponential"

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must divide evenly across heads")
        hd = self.hidden_dim // self.heads
        if hd % 2:
            raise ValueError("per-head dim must be even")
        if any(a % 2 for a in _axis_split(hd)):
            raise ValueError("axis shares must be even")
        if self.rope_mode not in ("exponential", "inverse-exponential"):
            raise ValueError(f"unknown rope_mode {self.rope_mode!r}")
        if self.rope_growth == 0.0:
            n = max(_axis_split(hd)) // 2
            g = float(np.exp(np.log(1e4) / max(n - 1, 1)))
            object.__setattr__(self, "rope_growth", g)
        if self.rope_growth <= 1.0:
            raise ValueError("rope growth must exceed 1")

    @property
    def head_dim(self):
        return self.hidden_dim // self.heads

    @property
    def axis_dims(self):
        return _axis_split(self.head_dim)


def full_scale_dit_config():
    """Full-size preset: 2048-wide, 28 blocks, HD coordinate maxima."""
    return DitConfig(hidden_dim=2048, heads=32, blocks=28,
                     max_width=768.0, max_height=512.0, max_duration=10.0)


@dataclass
class TokenSequence:
    """Flattened latent tokens with physical coordinates and noise levels.

    coords[i] = (t_sec, x_px, y_px) of the token's patch BEFORE
    normalization; timesteps[i] is the token's diffusion time in [0,1].
    """

    tokens: Tensor  # [N, latent_channels]
    coords: np.ndarray  # [N, 3] float64
    timesteps: np.ndarray  # [N] float64
    fps: float

    def __post_init__(self):
        self.tokens = self.tokens if isinstance(self.tokens, Tensor) else Tensor(self.tokens)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.timesteps = np.asarray(self.timesteps, dtype=np.float64)
        n = self.tokens.shape[0]
        if self.coords.shape != (n, 3):
            raise ValueError(f"coords must be [{n},3], got {self.coords.shape}")
        if self.timesteps.shape != (n,):
            raise ValueError(f"timesteps must be [{n}], got {self.timesteps.shape}")


@dataclass
class CaptionEmbedding:
    tokens: Tensor  # [M, text_dim]
    mask: np.ndarray  # [M] bool, True = attend

    def __post_init__(self):
        self.tokens = self.tokens if isinstance(self.tokens, Tensor) else Tensor(self.tokens)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.tokens.shape[0],):
            raise ValueError("mask length must match caption length")


def token_coordinates(latent_dims, temporal_factor, spatial_factor, fps):
    """Physical (t_sec, x_px, y_px) for every latent position, row-major.

    Time uses each latent frame's causal anchor pixel frame (frame 0 maps
    to itself); space uses pixel patch centers.
    """
    tl, hl, wl = latent_dims
    ti, yi, xi = np.meshgrid(np.arange(tl), np.arange(hl), np.arange(wl),
                             indexing="ij")
    t_sec = ti * temporal_factor / fps
    x_px = (xi + 0.5) * spatial_factor
    y_px = (yi + 0.5) * spatial_factor
    return np.stack([t_sec.reshape(-1), x_px.reshape(-1), y_px.reshape(-1)],
                    axis=1).astype(np.float64)


# -- rotary embeddings ---------------------------------------------------------


def rope_frequencies(axis_dim, f_min, g, mode="exponential"):
    """Per-pair rotation frequencies for one coordinate axis.

    exponential: f_j = f_min * g^j, strictly increasing geometric.
    inverse-exponential: the exponential ladder reflected about its
    endpoint midpoint, so endpoints agree but spacing clusters at the top.
    """
    if axis_dim % 2:
        raise ValueError("axis_dim must be even")
    if g <= 1.0:
        raise ValueError("growth must exceed 1")
    n = axis_dim // 2
    f = f_min * np.power(float(g), np.arange(n, dtype=np.float64))
    if mode == "exponential":
        return f
    if mode == "inverse-exponential":
        return (f_min + f[-1]) - f[::-1]
    raise ValueError(f"unknown mode {mode!r}")


def normalize_coords(coords, cfg):
    """(t, x, y) divided by the configured maxima, clamped into [0,1]."""
    coords = np.asarray(coords, dtype=np.float64)
    maxima = np.array([cfg.max_duration, cfg.max_width, cfg.max_height],
                      dtype=np.float64)
    if np.any(maxima <= 0):
        raise ValueError("coordinate maxima must be positive")
    return np.clip(coords / maxima, 0.0, 1.0)


def _rope_tables(coords_normalized, cfg):
    """cos/sin per (token, head-pair), float64 trig cast to float32."""
    cos_parts, sin_parts = [], []
    for axis, dim in enumerate(cfg.axis_dims):
        f = rope_frequencies(dim, cfg.rope_f_min, cfg.rope_growth, cfg.rope_mode)
        ang = coords_normalized[:, axis:axis + 1] * f[None, :]
        cos_parts.append(np.cos(ang))
        sin_parts.append(np.sin(ang))
    cos = np.concatenate(cos_parts, axis=1).astype(np.float32)
    sin = np.concatenate(sin_parts, axis=1).astype(np.float32)
    return cos[:, None, :], sin[:, None, :]  # broadcast over heads


def apply_rope(x, coords_normalized, cfg):
    """Rotate interleaved pairs of a [N, heads, head_dim] tensor.

    The head dim is partitioned across (t, x, y); each pair (2j, 2j+1)
    within an axis block turns by frequency_j * coordinate.
    """
    if x.shape[-1] != cfg.head_dim:
        raise ValueError(f"expected head_dim {cfg.head_dim}, got {x.shape[-1]}")
    cos, sin = _rope_tables(coords_normalized, cfg)
    return rotate_pairs(x, cos, sin)


# -- attention -----------------------------------------------------------------


def _split_heads(x, cfg):
    n, d = x.shape
    return x.reshape(n, cfg.heads, cfg.head_dim).transpose(1, 0, 2)


def _merge_heads(x, cfg):
    return x.transpose(1, 0, 2).reshape(x.shape[1], cfg.hidden_dim)


def qk_norm_attention(x, coords_normalized, params, cfg, name):
    """Full self-attention with per-head RMS-normed, rotary-embedded q/k."""
    q = linear(x, params[f"{name}.wq"], params[f"{name}.bq"])
    k = linear(x, params[f"{name}.wk"], params[f"{name}.bk"])
    v = linear(x, params[f"{name}.wv"], params[f"{name}.bv"])
    n = x.shape[0]
    q = q.reshape(n, cfg.heads, cfg.head_dim)
    k = k.reshape(n, cfg.heads, cfg.head_dim)
    q = rms_normalize(q, params[f"{name}.qs"])
    k = rms_normalize(k, params[f"{name}.ks"])
    q = apply_rope(q, coords_normalized, cfg)
    k = apply_rope(k, coords_normalized, cfg)
    qh = q.transpose(1, 0, 2)
    kh = k.transpose(1, 0, 2)
    vh = _split_heads(v, cfg)
    logits = (qh @ kh.transpose(0, 2, 1)) * (1.0 / np.sqrt(cfg.head_dim))
    attn = masked_softmax(logits)
    out = _merge_heads(attn @ vh, cfg)
    return linear(out, params[f"{name}.wo"], params[f"{name}.bo"])


def cross_attention(x, caption, params, cfg, name):
    """Queries from tokens, keys/values from the caption embedding.

    Masked caption positions receive no weight; a fully masked caption
    contributes exactly zero context.
    """
    q = linear(x, params[f"{name}.wq"], params[f"{name}.bq"])
    k = linear(caption.tokens, params[f"{name}.wk"], params[f"{name}.bk"])
    v = linear(caption.tokens, params[f"{name}.wv"], params[f"{name}.bv"])
    n = x.shape[0]
    qh = q.reshape(n, cfg.heads, cfg.head_dim).transpose(1, 0, 2)
    kh = k.reshape(k.shape[0], cfg.heads, cfg.head_dim).transpose(1, 0, 2)
    vh = v.reshape(v.shape[0], cfg.heads, cfg.head_dim).transpose(1, 0, 2)
    logits = (qh @ kh.transpose(0, 2, 1)) * (1.0 / np.sqrt(cfg.head_dim))
    attn = masked_softmax(logits, caption.mask[None, None, :])
    out = _merge_heads(attn @ vh, cfg)
    # No output bias: zero context must map to exactly zero contribution.
    return linear(out, params[f"{name}.wo"])


# -- adaptive modulation ---------------------------------------------------------


def _timestep_features(per_token_t, params, cfg):
    """Shared trunk over the unique timesteps, gathered back per token."""
    t = np.asarray(per_token_t, dtype=np.float64).reshape(-1)
    uniq, inverse = np.unique(t, return_inverse=True)
    emb = Tensor(sinusoidal_embedding(uniq, cfg.time_embed_dim))
    feat = linear(emb, params["t.trunk.w"], params["t.trunk.b"]).silu()
    return feat, inverse


def adaln_modulate(per_token_t, params, cfg, name):
    """Per-token (scale, shift, gate) pairs for the two modulated sublayers.

    Returns ((s1, b1, g1), (s2, b2, g2)), each [N, hidden]. Computing on
    unique timesteps and gathering keeps a constant-t batch bitwise equal
    to a single global modulation row broadcast over tokens.
    """
    feat, inverse = _timestep_features(per_token_t, params, cfg)
    mod = linear(feat, params[f"{name}.w"], params[f"{name}.b"])
    mod = gather(mod, inverse, axis=0)
    d = cfg.hidden_dim
    parts = tuple(mod[:, i * d:(i + 1) * d] for i in range(6))
    return parts[:3], parts[3:]


def _modulated_norm(x, gamma, scale, shift):
    return rms_normalize(x, gamma) * (scale + 1.0) + shift


# -- parameters -------------------------------------------------------------------


def init_dit_params(cfg, rng):
    d = cfg.hidden_dim
    hd = cfg.head_dim
    p = {}
    p["text.embed"] = Tensor(rng.normal((cfg.text_vocab, cfg.text_dim)) * 0.02,
                             requires_grad=True)
    p["in.w"] = he_linear(rng, cfg.latent_channels, d)
    p["in.b"] = zeros(d)
    p["t.trunk.w"] = he_linear(rng, cfg.time_embed_dim, d)
    p["t.trunk.b"] = zeros(d)
    res_gain = 1.0 / np.sqrt(2.0 * cfg.blocks)
    for i in range(cfg.blocks):
        for attn, kdim in ((f"blk{i}.sa", d), (f"blk{i}.ca", cfg.text_dim)):
            p[f"{attn}.wq"] = he_linear(rng, d, d)
            p[f"{attn}.bq"] = zeros(d)
            p[f"{attn}.wk"] = he_linear(rng, kdim, d)
            p[f"{attn}.bk"] = zeros(d)
            p[f"{attn}.wv"] = he_linear(rng, kdim, d)
            p[f"{attn}.bv"] = zeros(d)
        p[f"blk{i}.sa.bo"] = zeros(d)
        p[f"blk{i}.sa.wo"] = he_linear(rng, d, d, gain=res_gain)
        p[f"blk{i}.ca.wo"] = zeros(d, d)  # cross path silent at init
        p[f"blk{i}.sa.qs"] = ones(hd)
        p[f"blk{i}.sa.ks"] = ones(hd)
        p[f"blk{i}.n1.g"] = ones(d)
        p[f"blk{i}.nc.g"] = ones(d)
        p[f"blk{i}.n2.g"] = ones(d)
        p[f"blk{i}.ada.w"] = zeros(d, 6 * d)
        p[f"blk{i}.ada.b"] = zeros(6 * d)
        p[f"blk{i}.ffn.w1"] = he_linear(rng, d, cfg.ffn_factor * d)
        p[f"blk{i}.ffn.b1"] = zeros(cfg.ffn_factor * d)
        p[f"blk{i}.ffn.w2"] = he_linear(rng, cfg.ffn_factor * d, d, gain=res_gain)
        p[f"blk{i}.ffn.b2"] = zeros(d)
    p["out.n.g"] = ones(d)
    p["out.ada.w"] = zeros(d, 2 * d)
    p["out.ada.b"] = zeros(2 * d)
    p["out.w"] = zeros(d, cfg.latent_channels)
    p["out.b"] = zeros(cfg.latent_channels)
    return p


def embed_caption(token_ids, params, pad_to=None):
    """Look up caption token ids; optional right-padding with masked slots."""
    ids = np.asarray(token_ids, dtype=np.int64)
    m = len(ids)
    total = pad_to if pad_to is not None else m
    if total < m:
        raise ValueError("pad_to shorter than the caption")
    table = params["text.embed"]
    padded_ids = np.concatenate([ids, np.zeros(total - m, dtype=np.int64)])
    mask = np.arange(total) < m
    return CaptionEmbedding(gather(table, padded_ids, axis=0), mask)


# -- forward -----------------------------------------------------------------------


def dit_forward(seq, caption, cfg, params):
    """TokenSequence + caption -> per-token velocity [N, latent_channels]."""
    coords_n = normalize_coords(seq.coords, cfg)
    h = linear(seq.tokens, params["in.w"], params["in.b"])
    for i in range(cfg.blocks):
        (s1, b1, g1), (s2, b2, g2) = adaln_modulate(
            seq.timesteps, params, cfg, f"blk{i}.ada")
        a = _modulated_norm(h, params[f"blk{i}.n1.g"], s1, b1)
        a = qk_norm_attention(a, coords_n, params, cfg, f"blk{i}.sa")
        h = h + a * g1
        c = rms_normalize(h, params[f"blk{i}.nc.g"])
        h = h + cross_attention(c, caption, params, cfg, f"blk{i}.ca")
        f = _modulated_norm(h, params[f"blk{i}.n2.g"], s2, b2)
        f = linear(f, params[f"blk{i}.ffn.w1"], params[f"blk{i}.ffn.b1"]).silu()
        f = linear(f, params[f"blk{i}.ffn.w2"], params[f"blk{i}.ffn.b2"])
        h = h + f * g2
    feat, inverse = _timestep_features(seq.timesteps, params, cfg)
    mod = gather(linear(feat, params["out.ada.w"], params["out.ada.b"]),
                 inverse, axis=0)
    d = cfg.hidden_dim
    h = _modulated_norm(h, params["out.n.g"], mod[:, :d], mod[:, d:])
    return linear(h, params["out.w"], params["out.b"])
