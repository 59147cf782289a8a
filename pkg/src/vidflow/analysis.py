"""Latent diagnostics: channel PCA, positional-encoding ablation, and the
two-sided decoder comparison."""

import csv
import os
from dataclasses import dataclass

import numpy as np

from .autodiff import Rng, Tensor
from .checkpoint import read_checkpoint, write_rvid
from .data import caption_ids
from .dit import CaptionEmbedding, DitConfig, TokenSequence, dit_forward, \
    embed_caption, init_dit_params
from .flow import TimestepSampler, flow_loss, generate
from .losses import detail_energy
from .optim import AdamW, clip_global_norm
from .train import _load_clips, arrays_to_params, psnr
from .vae import VideoTensor, encode


@dataclass
class PcaReport:
    eigenvalues: np.ndarray  # descending, nonnegative
    explained: np.ndarray  # fraction of variance per component
    cumulative: np.ndarray  # running sum, ends at 1
    correlation: np.ndarray  # C x C, unit diagonal

    def __post_init__(self):
        ev = np.asarray(self.eigenvalues, dtype=np.float64)
        if np.any(ev < 0):
            raise ValueError("eigenvalues must be nonnegative")
        if np.any(np.diff(ev) > 1e-12):
            raise ValueError("eigenvalues must be sorted descending")
        cum = np.asarray(self.cumulative, dtype=np.float64)
        if np.any(np.diff(cum) < -1e-12):
            raise ValueError("cumulative shares must be nondecreasing")
        if abs(cum[-1] - 1.0) > 1e-6:
            raise ValueError(f"cumulative shares end at {cum[-1]}, not 1")
        corr = np.asarray(self.correlation, dtype=np.float64)
        if corr.shape[0] != corr.shape[1]:
            raise ValueError("correlation matrix must be square")
        if np.any(np.abs(np.diag(corr) - 1.0) > 1e-9):
            raise ValueError("correlation diagonal must be 1")

    @property
    def auc(self):
        """Mean of the cumulative curve: 1 when one channel carries
        everything, (C+1)/2C for a flat spectrum."""
        return float(np.mean(self.cumulative))


def pca_explained_variance(latents):
    """Channel PCA with latent positions as observations.

    Accepts one [..., C] array or a list of them; everything flattens to
    [N, C]. Rank-deficient inputs report explicit zero eigenvalues.
    """
    if isinstance(latents, (list, tuple)):
        rows = [np.asarray(z, dtype=np.float64).reshape(-1, np.asarray(z).shape[-1])
                for z in latents]
        x = np.concatenate(rows, axis=0)
    else:
        arr = np.asarray(latents, dtype=np.float64)
        x = arr.reshape(-1, arr.shape[-1])
    n, c = x.shape
    if n < 2:
        raise ValueError("need at least two observations")
    x = x - x.mean(axis=0)
    cov = x.T @ x / (n - 1)
    eig = np.linalg.eigh(cov)[0][::-1]
    eig = np.maximum(eig, 0.0)
    total = eig.sum()
    if total <= 0:
        raise ValueError("latents carry no variance")
    explained = eig / total
    std = np.sqrt(np.diag(cov))
    live = std > 0
    denom = np.outer(std, std)
    corr = np.zeros((c, c))
    corr[np.ix_(live, live)] = (cov[np.ix_(live, live)]
                                / denom[np.ix_(live, live)])
    np.fill_diagonal(corr, 1.0)
    return PcaReport(eig, explained, np.cumsum(explained), corr)


def pca_over_checkpoints(checkpoint_paths, records, vae_cfg):
    """Latent spectrum per checkpoint; training should flatten it.

    -> rows of {checkpoint, auc, top_share}, in the order given.
    """
    clips = _load_clips(records)
    rows = []
    for path in checkpoint_paths:
        arrays = read_checkpoint(path)
        params = arrays_to_params(
            {k: v for k, v in arrays.items() if not k.startswith("latent.")})
        gathered = []
        for r in records:
            data, fps = clips[r.name]
            post = encode(VideoTensor(data, fps), params, vae_cfg)
            gathered.append(np.asarray(post.mean.data))
        report = pca_explained_variance(gathered)
        rows.append({"checkpoint": str(path), "auc": report.auc,
                     "top_share": float(report.explained[0]),
                     "report": report})
    return rows


def ppm_heatmap(path, matrix, lo=None, hi=None):
    """Write a matrix as a binary grayscale image (P5, maxval 255)."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("heatmaps are 2-D")
    lo = float(m.min()) if lo is None else float(lo)
    hi = float(m.max()) if hi is None else float(hi)
    span = hi - lo
    if span <= 0:
        scaled = np.zeros_like(m)
    else:
        scaled = np.clip((m - lo) / span, 0.0, 1.0)
    payload = np.round(scaled * 255.0).astype(np.uint8)
    h, w = payload.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(payload.tobytes())
    return path


# -- positional-encoding ablation -----------------------------------------------


def _ablation_config(mode):
    # positions live on the time axis: it owns the most rotary pairs, and a
    # two-pair ladder would be its own reflection, hiding the mode switch
    return DitConfig(hidden_dim=32, heads=2, blocks=2, ffn_factor=2,
                     latent_channels=8, text_dim=16, time_embed_dim=16,
                     max_width=8.0, max_height=8.0, max_duration=512.0,
                     rope_mode=mode)


def _paired_batch(rng, pairs, channels, gap, stride):
    """Clean tokens where partners share a value and sit `gap` apart.

    A token alone cannot split its noisy state into signal and noise; its
    partner at a fixed relative offset can. Whether attention finds that
    partner is exactly what the frequency ladder controls: the gap needs
    mid-scale resolution, which one ladder has and the other lacks.
    """
    base = np.arange(pairs, dtype=np.float64) * stride
    jitter = rng.uniform(0.0, 2.0 * gap, (pairs,)).astype(np.float64)
    left = base + jitter
    positions = np.empty(2 * pairs, dtype=np.float64)
    positions[0::2] = left
    positions[1::2] = left + gap
    values = rng.normal((pairs, channels))
    z0 = np.repeat(values, 2, axis=0)
    coords = np.zeros((2 * pairs, 3), dtype=np.float64)
    coords[:, 0] = positions
    return z0, coords


def _open_attention_gates(params, cfg):
    """Unfreeze self-attention at init so the ladder matters immediately.

    Training from the stock zero gates spends most of a short run just
    discovering that attention helps; the ablation compares ladders, not
    warm-up speed.
    """
    d = cfg.hidden_dim
    for b in range(cfg.blocks):
        params[f"blk{b}.ada.b"].data[2 * d:3 * d] = 1.0


def rope_ablation(out_dir, seeds=(0, 1, 2), steps=400, *,
                  modes=("exponential", "inverse-exponential"), pairs=16,
                  gap=5.0, lr=3e-3, sampler=None):
    """Train the same tiny denoiser under both frequency ladders.

    Runs share data and initialization per seed; only the ladder differs.
    Writes one per-step loss CSV per run and returns
    {mode: [{seed, csv, losses}, ...]}.
    """
    os.makedirs(out_dir, exist_ok=True)
    sampler = sampler or TimestepSampler()
    stride = 4.0 * gap
    results = {mode: [] for mode in modes}
    for mode in modes:
        cfg = _ablation_config(mode)
        for seed in seeds:
            init_rng = Rng(seed).spawn(0)
            data_rng = Rng(seed).spawn(1)
            params = init_dit_params(cfg, init_rng)
            _open_attention_gates(params, cfg)
            opt = AdamW(params, lr=lr, weight_decay=0.01)
            silent = CaptionEmbedding(Tensor(np.zeros((1, cfg.text_dim),
                                                      dtype=np.float32)),
                                      np.array([False]))
            losses = np.empty(steps, dtype=np.float64)
            for step in range(steps):
                z0, coords = _paired_batch(data_rng, pairs,
                                           cfg.latent_channels, gap, stride)

                def model(z_t, t, cap):
                    seq = TokenSequence(z_t, coords,
                                        np.asarray(t, dtype=np.float64), 8.0)
                    return dit_forward(seq, cap, cfg, params)

                opt.zero_grad()
                loss = flow_loss(model, z0, silent, sampler, data_rng)
                loss.backward()
                clip_global_norm(params, 1.0)
                opt.step()
                losses[step] = float(loss.data)
            csv_path = os.path.join(out_dir, f"rope_{mode}_{seed}.csv")
            with open(csv_path, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f)
                writer.writerow(("step", "loss"))
                for i, v in enumerate(losses):
                    writer.writerow((i, repr(v)))
            results[mode].append({"seed": seed, "csv": csv_path,
                                  "losses": losses})
    return results


def final_quarter_mean(losses):
    losses = np.asarray(losses, dtype=np.float64)
    return float(losses[-max(len(losses) // 4, 1):].mean())


# -- decoder comparison -------------------------------------------------------------


def decoder_ab_test(captions, latent_dims, steps, dit_cfg, vae_cfg,
                    dit_params, vae_params, seeds, out_dir, *, stats=None,
                    fps=8.0, t_split=0.05, sampler=None):
    """Stop early and let the decoder denoise, versus integrating to zero.

    Variant (a) hands the decoder the state at t_split; variant (b) rides
    the ODE all the way down and decodes a clean latent. Writes both clips
    and a CSV of detail-band energies; returns the rows.
    """
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for ci, caption in enumerate(captions):
        embed = embed_caption(caption_ids(caption), dit_params)
        for seed in seeds:
            a = generate(embed, latent_dims, steps, dit_cfg, vae_cfg,
                         dit_params, vae_params, Rng(seed), fps=fps,
                         t_final=t_split, sampler=sampler, stats=stats)
            b = generate(embed, latent_dims, steps, dit_cfg, vae_cfg,
                         dit_params, vae_params, Rng(seed), fps=fps,
                         t_final=0.0, sampler=sampler, stats=stats)
            a_np, b_np = a.numpy(), b.numpy()
            path_a = os.path.join(out_dir, f"ab_{ci:02d}_{seed}_a.rvid")
            path_b = os.path.join(out_dir, f"ab_{ci:02d}_{seed}_b.rvid")
            write_rvid(path_a, a_np, fps)
            write_rvid(path_b, b_np, fps)
            rows.append({
                "caption": caption, "seed": seed,
                "energy_a": detail_energy(a_np),
                "energy_b": detail_energy(b_np),
                "psnr_ab": psnr(a_np, b_np),
                "clip_a": path_a, "clip_b": path_b,
            })
    csv_path = os.path.join(out_dir, "decoder_ab.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        cols = ("caption", "seed", "energy_a", "energy_b", "psnr_ab")
        writer.writerow(cols)
        for row in rows:
            writer.writerow([row[c] for c in cols])
    return rows
