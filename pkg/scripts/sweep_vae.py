"""One VAE training at given knobs; prints the acceptance-relevant numbers.

Usage: sweep_vae.py <tag> <lr_g> <lr_d> <steps> [gan_start_step] [batch_size]
"""

import sys
from pathlib import Path

import numpy as np

from vidflow.analysis import pca_over_checkpoints
from vidflow.autodiff import Rng
from vidflow.checkpoint import read_rvid
from vidflow.data import load_corpus, make_dataset
from vidflow.train import eval_split, psnr, train_vae
from vidflow.vae import (LatentTensor, VideoTensor, decode_denoise,
                         desk_config, encode)

BUCKETS = [(9, 32, 32), (9, 32, 32), (9, 32, 32), (1, 32, 32)]


def main():
    tag = sys.argv[1]
    lr_g, lr_d = float(sys.argv[2]), float(sys.argv[3])
    steps = int(sys.argv[4])
    gan_step = int(sys.argv[5]) if len(sys.argv) > 5 else 600
    batch = int(sys.argv[6]) if len(sys.argv) > 6 else 2

    root = Path("/tmp/sweep")
    corpus_dir = root / "corpus"
    if not (corpus_dir / "captions.tsv").exists():
        make_dataset(64, BUCKETS, Rng(11), corpus_dir)
    records = load_corpus(corpus_dir)
    _, eval_recs = eval_split(records)

    cfg = desk_config()
    out = root / tag
    res = train_vae(records, cfg, steps, Rng(21), out, lr_g=lr_g, lr_d=lr_d,
                    gan_start=gan_step / steps, batch_size=batch,
                    checkpoint_interval=500)
    rows = res.rows

    early = np.mean([r["mse"] for r in rows if 0 < r["step"] <= 50])
    row2k = [r for r in rows if r["step"] == min(2000, steps)][0]
    late2k = np.mean([r["mse"] for r in rows
                      if min(2000, steps) - 200 < r["step"] <= min(2000, steps)])
    accs = [r["disc_acc"] for r in rows if gan_step + 200 <= r["step"] <= 2000]
    win = [float(np.mean(accs[i:i + 5])) for i in range(0, len(accs) - 4, 5)]

    # pooled single-frame recon on held-out first frames at eval cadence
    marks = sorted({min(2000, steps), steps} | {s for s in range(4000, steps + 1, 4000)})
    frame_by_step = {}
    for mark in marks:
        ck = out / (f"vae_step{mark:06d}.ckpt" if mark < steps else "vae_final.ckpt")
        if not ck.exists():
            continue
        from vidflow.checkpoint import read_checkpoint
        from vidflow.autodiff import Tensor
        arrays = read_checkpoint(ck)
        params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()
                  if not k.startswith("latent.")}
        errs = []
        r = Rng(77)
        for rec in eval_recs:
            clip, fps = read_rvid(rec.path)
            post = encode(VideoTensor(clip[:1], fps), params, cfg)
            dec = decode_denoise(LatentTensor(post.mean, fps), 0.05, params,
                                 cfg, r)
            errs.append(float(np.mean((dec.numpy() - clip[:1]) ** 2)))
        frame_by_step[mark] = 10.0 * np.log10(1.0 / max(np.mean(errs), 1e-12))

    paths = sorted(str(p) for p in out.glob("vae_step*.ckpt"))
    aucs = [round(r["auc"], 4)
            for r in pca_over_checkpoints(paths, records, cfg)]

    print(f"[{tag}] lr_g={lr_g} lr_d={lr_d} steps={steps} bs={batch} "
          f"fall2k={(1 - late2k / early) * 100:.0f}% "
          f"psnr2k={row2k['eval_psnr']:.1f} psnr_final={rows[-1]['eval_psnr']:.1f} "
          f"disc_win=[{min(win):.2f},{max(win):.2f}] "
          f"1f_psnr={ {k: round(v, 1) for k, v in frame_by_step.items()} } "
          f"auc={aucs}", flush=True)


if __name__ == "__main__":
    main()
