"""Dry run of the desk-scale trainings behind the acceptance suite.

Prints every number the acceptance thresholds depend on so the step
counts and learning rates can be calibrated before they are frozen
into tests/test_acceptance.py. Not part of the package or the tests.
"""

import sys
import time
from pathlib import Path

import numpy as np

from vidflow.analysis import pca_over_checkpoints
from vidflow.data import (COLORS, SHAPES, SPEED_WORDS, _DIRECTIONS, SceneSpec,
                          bounding_radius, caption_for_spec, caption_ids,
                          detect_motion, load_corpus, make_dataset,
                          render_scene)
from vidflow.dit import DitConfig, embed_caption
from vidflow.flow import generate
from vidflow.autodiff import Rng
from vidflow.train import eval_split, psnr, train_dit, train_vae
from vidflow.vae import LatentTensor, VideoTensor, decode_denoise, desk_config, encode

ROOT = Path("/tmp/calib")
ROOT.mkdir(exist_ok=True)
VCFG = desk_config()
BUCKETS = [(9, 32, 32), (9, 32, 32), (9, 32, 32), (1, 32, 32)]


def log(msg):
    print(msg, flush=True)


def held_out_translation_specs(records, count, rng):
    """Translation specs whose captions never appear in the corpus."""
    seen = {r.caption for r in records}
    pool = []
    for shape in SHAPES:
        for color in COLORS.values():
            for motion in _DIRECTIONS:
                for speed in SPEED_WORDS:
                    spec = SceneSpec(shape, color, motion, speed, 8.0, 8.0)
                    if caption_for_spec(spec) not in seen:
                        pool.append(spec)
    order = rng.permutation(len(pool))
    return [pool[i] for i in order[:count]]


def start_for(spec, h, w, frames, rng):
    radius = bounding_radius(spec)
    span = spec.speed * (frames - 1)
    ux, uy = _DIRECTIONS[spec.motion]
    slack_x = w / 2 - (abs(ux) * span / 2 + radius + 1.0)
    slack_y = h / 2 - (abs(uy) * span / 2 + radius + 1.0)
    jx = min(2.0, max(slack_x, 0.0))
    jy = min(2.0, max(slack_y, 0.0))
    return (w / 2 - ux * span / 2 + float(rng.uniform(-jx, jx)),
            h / 2 - uy * span / 2 + float(rng.uniform(-jy, jy)))


def main():
    corpus_dir = ROOT / "corpus"
    if not (corpus_dir / "captions.tsv").exists():
        make_dataset(64, BUCKETS, Rng(11), corpus_dir)
    records = load_corpus(corpus_dir)
    train_recs, eval_recs = eval_split(records)
    log(f"corpus: {len(records)} clips, {len(eval_recs)} held out")

    # ---- VAE, 2k steps --------------------------------------------------
    t0 = time.time()
    vae = train_vae(records, VCFG, 2000, Rng(21), ROOT / "vae",
                    checkpoint_interval=500)
    log(f"vae: {time.time() - t0:.0f}s for 2000 steps")

    rows = vae.rows
    early = np.mean([r["mse"] for r in rows if 0 < r["step"] <= 50])
    late = np.mean([r["mse"] for r in rows if r["step"] > 2000 - 200])
    log(f"vae mse: early(<=50)={early:.5f} late={late:.5f} "
        f"fall={(1 - late / early) * 100:.1f}%")
    log(f"vae eval_psnr trajectory: "
        f"{[round(r['eval_psnr'], 2) for r in rows if r['step'] % 200 == 0]}")
    accs = [r["disc_acc"] for r in rows if r["step"] > 600 + 100]
    log(f"disc_acc after warm-up: min={min(accs):.3f} max={max(accs):.3f}")

    # single-frame reconstruction at the generation decode level
    frame_psnrs = []
    rec_rng = Rng(77)
    for rec in eval_recs[:8]:
        from vidflow.checkpoint import read_rvid
        clip, fps = read_rvid(rec.path)
        img = VideoTensor(clip[:1], fps)
        post = encode(img, vae.params, VCFG)
        z = LatentTensor(post.mean, fps)
        out = decode_denoise(z, 0.05, vae.params, VCFG, rec_rng)
        frame_psnrs.append(psnr(out.numpy(), clip[:1]))
    log(f"single-frame recon psnr @t=0.05: {[round(p, 1) for p in frame_psnrs]}")

    # ---- PCA over checkpoints -------------------------------------------
    paths = sorted((ROOT / "vae").glob("vae_step*.ckpt"))
    paths.append(ROOT / "vae" / "vae_final.ckpt")
    rows_pca = pca_over_checkpoints([str(p) for p in paths], records, VCFG)
    log("pca auc: " + " ".join(f"{r['checkpoint'].rsplit('/', 1)[-1]}={r['auc']:.4f}"
                               for r in rows_pca))

    # ---- DiT, 5k steps ---------------------------------------------------
    dcfg = DitConfig()
    t0 = time.time()
    dit = train_dit(records, vae.params, VCFG, dcfg, 5000, Rng(31),
                    ROOT / "dit", stats=vae.aux["stats"])
    log(f"dit: {time.time() - t0:.0f}s for 5000 steps")
    base = dit.aux["baseline"]
    final = np.mean([r["loss"] for r in dit.rows if r["step"] > 5000 - 400])
    evals = [round(r["eval_loss"], 4) for r in dit.rows if r["step"] % 500 == 0]
    log(f"dit loss: final={final:.4f} baseline={base:.4f} "
        f"below={100 * (1 - final / base):.1f}%  evals={evals}")

    # ---- i2v: first-frame psnr + motion checker --------------------------
    t0 = time.time()
    specs = held_out_translation_specs(records, 50, Rng(41))
    hits, ff_psnrs = 0, []
    gen_rng = Rng(51)
    place_rng = Rng(61)
    for i, spec in enumerate(specs):
        clip = render_scene(spec, 9, 32, 32, start_for(spec, 32, 32, 9, place_rng))
        embed = embed_caption(caption_ids(caption_for_spec(spec)), dit.params)
        video = generate(embed, (5, 4, 4), 20, dcfg, VCFG, dit.params,
                         vae.params, Rng(1000 + i), conditioning=clip[0],
                         t_c=0.0, stats=dit.aux["stats"])
        out = video.numpy()
        ff_psnrs.append(psnr(out[0], clip[0]))
        if detect_motion(out) == spec.motion:
            hits += 1
    log(f"i2v: {time.time() - t0:.0f}s for 50 generations")
    log(f"first-frame psnr: min={min(ff_psnrs):.1f} "
        f"median={np.median(ff_psnrs):.1f} max={max(ff_psnrs):.1f}")
    log(f"motion checker: {hits}/50 = {hits * 2}%")


if __name__ == "__main__":
    sys.exit(main())
