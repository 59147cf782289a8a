"""Training loops for the autoencoder and the flow transformer.

Both trainers are deterministic given their Rng: the same seed replays the
same batches, the same noise, and therefore the same metrics CSV, byte for
byte. Non-finite losses abort the run after writing the last good
checkpoint rather than continuing to train on garbage.
"""

import csv
import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .checkpoint import write_checkpoint
from .data import bucket_token_count, caption_ids, plan_batches
from .dit import TokenSequence, dit_forward, embed_caption, init_dit_params, \
    token_coordinates
from .flow import LatentStats, TimestepSampler, apply_train_conditioning, \
    flow_loss, latent_to_tokens, sample_timesteps
from .losses import VaeLossWeights, dwt_loss, init_disc_params, \
    kl_uniform_logvar, make_discriminator_batch, rgan_discriminator, rgan_losses
from .optim import Adam, AdamW, clip_global_norm
from .vae import MAX_DECODER_T, LatentTensor, VideoTensor, decode_denoise, \
    encode, init_vae_params, vae_forward_train

VAE_METRIC_COLUMNS = ("step", "total", "mse", "dwt", "kl", "gan_g", "gan_d",
                      "disc_acc", "eval_psnr")
DIT_METRIC_COLUMNS = ("step", "loss", "eval_loss", "baseline")


def eval_split(records, eval_percent=10):
    """Hash each filename into [0,100); the low slice is held out.

    The split depends only on names, so it survives re-runs, reordering,
    and corpus growth.
    """
    train, held = [], []
    for r in records:
        h = int.from_bytes(hashlib.sha256(r.name.encode()).digest()[:4],
                           "little")
        (held if h % 100 < eval_percent else train).append(r)
    return train, held


def psnr(a, b, peak=1.0):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * float(np.log10(peak * peak / mse))


def params_to_arrays(params):
    return {k: np.asarray(v.data) for k, v in params.items()}


def arrays_to_params(arrays):
    return {k: Tensor(np.asarray(v, dtype=np.float32), requires_grad=True)
            for k, v in arrays.items()}


class MetricsWriter:
    """Append-only CSV with a fixed column order, flushed per row."""

    def __init__(self, path, columns):
        self.path = str(path)
        self.columns = tuple(columns)
        self.rows = []
        self._fh = open(self.path, "w", newline="", encoding="utf-8")
        self._csv = csv.writer(self._fh)
        self._csv.writerow(self.columns)
        self._fh.flush()

    def log(self, **values):
        unknown = set(values) - set(self.columns)
        if unknown:
            raise ValueError(f"unknown metric columns: {sorted(unknown)}")
        self._csv.writerow([values.get(c, "") for c in self.columns])
        self._fh.flush()
        self.rows.append(dict(values))

    def close(self):
        self._fh.close()


@dataclass
class TrainResult:
    params: dict
    checkpoint: str
    metrics: str
    rows: list = field(default_factory=list)
    aux: dict = field(default_factory=dict)


class _Averager:
    def __init__(self):
        self.sums = {}
        self.n = 0

    def add(self, values):
        for k, v in values.items():
            self.sums[k] = self.sums.get(k, 0.0) + float(v)
        self.n += 1

    def mean(self):
        if self.n == 0:
            return {}
        out = {k: v / self.n for k, v in self.sums.items()}
        self.sums, self.n = {}, 0
        return out


def _load_clips(records):
    from .checkpoint import read_rvid
    clips = {}
    for r in records:
        data, fps = read_rvid(r.path)
        clips[r.name] = (data, float(fps))
    return clips


def _latent_stats(records, clips, params, cfg):
    """Per-channel mean/std of posterior means over a corpus."""
    total = None
    total_sq = None
    count = 0
    for r in records:
        data, fps = clips[r.name]
        post = encode(VideoTensor(data, fps), params, cfg)
        mean = np.asarray(post.mean.data, dtype=np.float64)
        flat = mean.reshape(-1, mean.shape[-1])
        if total is None:
            total = flat.sum(axis=0)
            total_sq = (flat * flat).sum(axis=0)
        else:
            total += flat.sum(axis=0)
            total_sq += (flat * flat).sum(axis=0)
        count += flat.shape[0]
    mu = total / count
    var = np.maximum(total_sq / count - mu * mu, 1e-12)
    return LatentStats(mu.astype(np.float32), np.sqrt(var).astype(np.float32))


def _vae_eval(records, clips, params, cfg, disc_params, rng):
    """Held-out PSNR at t=0 plus pair-discrimination accuracy."""
    scores = []
    correct = 0
    total = 0
    for r in records:
        data, fps = clips[r.name]
        x = VideoTensor(data, fps)
        post = encode(x, params, cfg)
        z = LatentTensor(post.mean.data, fps)
        recon = decode_denoise(z, 0.0, params, cfg, rng)
        scores.append(psnr(recon.numpy(), data))
        batch = make_discriminator_batch(x.data, recon.data.detach(), rng)
        logits = np.asarray(rgan_discriminator(batch, disc_params).data)
        correct += int(np.sum((logits > 0) == batch.a_is_original))
        total += logits.shape[0]
    return float(np.mean(scores)), correct / max(total, 1)


def train_vae(records, cfg, steps, rng, out_dir, *, lr_g=1e-4, lr_d=2e-4,
              batch_size=2, eval_interval=50, checkpoint_interval=0,
              gan_start=0.3, weights=None, init_params=None):
    """Alternating reconstruction/adversary training for the autoencoder.

    The discriminator joins after `gan_start` of the schedule. Returns a
    TrainResult whose checkpoint also carries per-channel latent
    statistics under "latent.mean" / "latent.std".
    """
    os.makedirs(out_dir, exist_ok=True)
    weights = weights or VaeLossWeights()
    train_recs, eval_recs = eval_split(records)
    if not train_recs:
        raise ValueError("corpus too small: nothing left to train on")
    if not eval_recs:
        eval_recs = train_recs[-1:]
    clips = _load_clips(records)

    params = init_params if init_params is not None else init_vae_params(cfg, rng)
    disc = init_disc_params(rng)
    g_opt = Adam(params, lr=lr_g)
    d_opt = Adam(disc, lr=lr_d)
    gan_from = int(gan_start * steps)

    buckets = {}
    for r in train_recs:
        buckets.setdefault(tuple(r.dims), []).append(r)
    bucket_order = sorted(buckets)

    metrics = MetricsWriter(os.path.join(out_dir, "vae_metrics.csv"),
                            VAE_METRIC_COLUMNS)
    running = _Averager()
    last_good = {**params_to_arrays(params), **params_to_arrays(disc)}

    def snapshot(tag, stats=None):
        arrays = {**params_to_arrays(params), **params_to_arrays(disc)}
        if stats is not None:
            arrays["latent.mean"] = stats.mean
            arrays["latent.std"] = stats.std
        path = os.path.join(out_dir, f"vae_{tag}.ckpt")
        write_checkpoint(path, arrays)
        return path

    for step in range(steps):
        bucket = bucket_order[step % len(bucket_order)]
        pool = buckets[bucket]
        take = min(batch_size, len(pool))
        chosen = [pool[int(i)] for i in rng.choice(len(pool), take)]
        gan_on = step >= gan_from and weights.w_gan > 0

        g_opt.zero_grad()
        d_opt.zero_grad()
        g_terms = []
        d_terms = []
        step_log = _Averager()
        for rec in chosen:
            data, fps = clips[rec.name]
            x = VideoTensor(data, fps)
            t = float(rng.uniform(0.0, MAX_DECODER_T))
            recon, post = vae_forward_train(x, t, params, cfg, rng)
            err = recon.data - x.data
            mse = (err * err).mean()
            dwt = dwt_loss(x.data, recon.data)
            kl = kl_uniform_logvar(post)
            g_loss = mse * weights.w_mse + dwt * weights.w_dwt + kl * weights.w_kl
            entry = {"mse": float(mse.data), "dwt": float(dwt.data),
                     "kl": float(kl.data), "gan_g": 0.0, "gan_d": 0.0}
            if gan_on:
                d_loss, adv = rgan_losses(x.data, recon.data, disc, rng)
                g_loss = g_loss + adv * weights.w_gan
                d_terms.append(d_loss)
                entry["gan_g"] = float(adv.data)
                entry["gan_d"] = float(d_loss.data)
            entry["total"] = float(g_loss.data)
            g_terms.append(g_loss)
            step_log.add(entry)

        batch_loss = g_terms[0]
        for extra in g_terms[1:]:
            batch_loss = batch_loss + extra
        batch_loss = batch_loss * (1.0 / len(g_terms))
        if not np.isfinite(float(batch_loss.data)):
            path = os.path.join(out_dir, "vae_last_good.ckpt")
            write_checkpoint(path, last_good)
            metrics.close()
            raise RuntimeError(
                f"non-finite loss at step {step}; last good state in {path}")
        batch_loss.backward()
        clip_global_norm(params, 1.0)
        g_opt.step()
        if d_terms:
            d_batch = d_terms[0]
            for extra in d_terms[1:]:
                d_batch = d_batch + extra
            d_batch = d_batch * (1.0 / len(d_terms))
            d_batch.backward()
            clip_global_norm(disc, 1.0)
            d_opt.step()
        running.add(step_log.mean())

        at_eval = (step + 1) % eval_interval == 0 or step + 1 == steps
        if at_eval:
            eval_rng = rng.spawn(900_001)
            score, acc = _vae_eval(eval_recs, clips, params, cfg, disc,
                                   eval_rng)
            avg = running.mean()
            metrics.log(step=step + 1, total=avg.get("total", 0.0),
                        mse=avg.get("mse", 0.0), dwt=avg.get("dwt", 0.0),
                        kl=avg.get("kl", 0.0), gan_g=avg.get("gan_g", 0.0),
                        gan_d=avg.get("gan_d", 0.0), disc_acc=acc,
                        eval_psnr=score)
            last_good = {**params_to_arrays(params), **params_to_arrays(disc)}
        if checkpoint_interval and (step + 1) % checkpoint_interval == 0:
            snapshot(f"step{step + 1:06d}")

    stats = _latent_stats(train_recs, clips, params, cfg)
    final = snapshot("final", stats)
    metrics.close()
    return TrainResult(params, final, metrics.path, metrics.rows,
                       aux={"disc": disc, "stats": stats,
                            "eval_records": eval_recs})


# -- flow transformer --------------------------------------------------------------


def _encode_corpus(records, clips, vae_params, vae_cfg, stats):
    """Posterior-mean tokens, coordinates, and caption ids per record."""
    cache = {}
    for r in records:
        data, fps = clips[r.name]
        post = encode(VideoTensor(data, fps), vae_params, vae_cfg)
        z = np.asarray(post.mean.data, dtype=np.float32)
        tokens = stats.standardize(latent_to_tokens(z))
        dims = z.shape[:3]
        coords = token_coordinates(dims, vae_cfg.temporal_factor,
                                   vae_cfg.spatial_factor, fps)
        cache[r.name] = {
            "tokens": np.asarray(tokens, dtype=np.float32),
            "coords": coords,
            "ids": caption_ids(r.caption),
            "video": dims[0] > 1,
            "fps": fps,
        }
    return cache


def train_dit(records, vae_params, vae_cfg, dit_cfg, steps, rng, out_dir, *,
              stats=None, lr=3e-4, batch_size=2, budget=None,
              eval_interval=100, checkpoint_interval=0, p_cond=0.3,
              shuffle_captions=False, sampler=None, init_params=None):
    """Rectified-flow training over frozen-autoencoder latents.

    Image and video buckets interleave through the batch planner; video
    samples get first-frame conditioning with probability p_cond.
    shuffle_captions breaks the text-video pairing once at setup, for
    ablations. Latent statistics ride along in every checkpoint.
    """
    os.makedirs(out_dir, exist_ok=True)
    sampler = sampler or TimestepSampler()
    train_recs, eval_recs = eval_split(records)
    if not train_recs:
        raise ValueError("corpus too small: nothing left to train on")
    if not eval_recs:
        eval_recs = train_recs[-1:]
    clips = _load_clips(records)
    if stats is None:
        stats = _latent_stats(train_recs, clips, vae_params, vae_cfg)
    cache = _encode_corpus(records, clips, vae_params, vae_cfg, stats)

    if shuffle_captions:
        names = [r.name for r in train_recs]
        perm = rng.permutation(len(names))
        shuffled = [cache[names[int(i)]]["ids"] for i in perm]
        for name, ids in zip(names, shuffled):
            cache[name]["ids"] = ids

    params = init_params if init_params is not None else init_dit_params(
        dit_cfg, rng)
    opt = AdamW(params, lr=lr, weight_decay=0.01)
    if budget is None:
        budget = max(bucket_token_count(vae_cfg, tuple(r.dims))
                     for r in train_recs)
    stream, rejected = plan_batches(train_recs, budget, vae_cfg, rng,
                                    batch_size)

    eval_tokens = np.concatenate([cache[r.name]["tokens"] for r in eval_recs])
    baseline = 1.0 + float(np.mean(eval_tokens.astype(np.float64) ** 2))

    metrics = MetricsWriter(os.path.join(out_dir, "dit_metrics.csv"),
                            DIT_METRIC_COLUMNS)
    running = _Averager()
    last_good = params_to_arrays(params)

    def snapshot(tag):
        arrays = params_to_arrays(params)
        arrays["latent.mean"] = stats.mean
        arrays["latent.std"] = stats.std
        path = os.path.join(out_dir, f"dit_{tag}.ckpt")
        write_checkpoint(path, arrays)
        return path

    def sample_loss(rec, kept, loss_rng, train_params):
        entry = cache[rec.name]
        z0 = entry["tokens"][kept]
        coords = entry["coords"][kept]
        caption = embed_caption(entry["ids"], train_params)
        n = z0.shape[0]
        t_g = sample_timesteps(1, n, sampler, loss_rng)
        if entry["video"]:
            mask = coords[:, 0] == 0.0
            assigned, _ = apply_train_conditioning([mask], t_g, p_cond,
                                                   loss_rng)
            per_token_t = assigned[0]
        else:
            per_token_t = np.full(n, t_g[0])

        def model(z_t, t, cap):
            seq = TokenSequence(z_t, coords, np.asarray(t, dtype=np.float64),
                                entry["fps"])
            return dit_forward(seq, cap, dit_cfg, train_params)

        return flow_loss(model, z0, caption, sampler, loss_rng,
                         per_token_t=per_token_t)

    def eval_loss():
        ev = rng.spawn(700_003)
        frozen = {k: v.detach() for k, v in params.items()}
        vals = []
        for rec in eval_recs:
            entry = cache[rec.name]
            kept = np.arange(entry["tokens"].shape[0])
            vals.append(float(sample_loss(rec, kept, ev, frozen).data))
        return float(np.mean(vals))

    for step in range(steps):
        plan = next(stream)
        opt.zero_grad()
        losses = [sample_loss(rec, kept, rng, params)
                  for rec, kept in zip(plan.records, plan.kept)]
        batch_loss = losses[0]
        for extra in losses[1:]:
            batch_loss = batch_loss + extra
        batch_loss = batch_loss * (1.0 / len(losses))
        value = float(batch_loss.data)
        if not np.isfinite(value):
            path = os.path.join(out_dir, "dit_last_good.ckpt")
            write_checkpoint(path, last_good)
            metrics.close()
            raise RuntimeError(
                f"non-finite loss at step {step}; last good state in {path}")
        batch_loss.backward()
        clip_global_norm(params, 1.0)
        opt.step()
        running.add({"loss": value})

        at_eval = (step + 1) % eval_interval == 0 or step + 1 == steps
        if at_eval:
            avg = running.mean()
            metrics.log(step=step + 1, loss=avg.get("loss", 0.0),
                        eval_loss=eval_loss(), baseline=baseline)
            last_good = params_to_arrays(params)
        if checkpoint_interval and (step + 1) % checkpoint_interval == 0:
            snapshot(f"step{step + 1:06d}")

    final = snapshot("final")
    metrics.close()
    return TrainResult(params, final, metrics.path, metrics.rows,
                       aux={"stats": stats, "baseline": baseline,
                            "eval_records": eval_recs, "rejected": rejected})
