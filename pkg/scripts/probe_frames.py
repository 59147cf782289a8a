"""Per-record single-frame reconstruction probe on a trained checkpoint."""

import numpy as np

from vidflow.autodiff import Rng, Tensor
from vidflow.checkpoint import read_checkpoint, read_rvid
from vidflow.data import load_corpus
from vidflow.train import eval_split, psnr
from vidflow.vae import LatentTensor, VideoTensor, decode_denoise, desk_config, encode

cfg = desk_config()
arrays = read_checkpoint("/tmp/calib/vae/vae_final.ckpt")
params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()
          if not k.startswith("latent.")}

records = load_corpus("/tmp/calib/corpus")
_, eval_recs = eval_split(records)
for rec in eval_recs:
    clip, fps = read_rvid(rec.path)
    img = VideoTensor(clip[:1], fps)
    post = encode(img, params, cfg)
    line = [f"{rec.name} T={clip.shape[0]}"]
    for t in (0.0, 0.05):
        out = decode_denoise(LatentTensor(post.mean, fps), t, params, cfg,
                             Rng(3))
        line.append(f"1f@t={t}: {psnr(out.numpy(), clip[:1]):.1f}")
    if clip.shape[0] > 1:
        post_v = encode(VideoTensor(clip, fps), params, cfg)
        out_v = decode_denoise(LatentTensor(post_v.mean, fps), 0.05, params,
                               cfg, Rng(3))
        line.append(f"vid-frame0@0.05: {psnr(out_v.numpy()[:1], clip[:1]):.1f}")
        line.append(f"vid-all@0.05: {psnr(out_v.numpy(), clip):.1f}")
    # object size: lit pixels in frame 0
    line.append(f"lit={float((clip[0].max(axis=-1) > 0.05).mean()):.3f}")
    print("  ".join(line), flush=True)
