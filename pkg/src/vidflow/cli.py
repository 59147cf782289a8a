"""Command-line front end: dataset synthesis, training, sampling, reports.

Every subcommand takes --config (flat key = value file), --seed, and --out.
Exit codes: 0 on success, 2 for usage errors, 1 for runtime failures.
"""

import argparse
import csv
import glob
import json
import os
import sys

import numpy as np

from .analysis import decoder_ab_test, final_quarter_mean, \
    pca_over_checkpoints, ppm_heatmap, rope_ablation
from .autodiff import Rng, finite_difference_check
from .checkpoint import FormatError, read_checkpoint, read_rvid, write_rvid
from .config import check_keys, load_config
from .data import caption_ids, load_corpus, make_dataset
from .dit import DitConfig, TokenSequence, dit_forward, embed_caption, \
    init_dit_params, token_coordinates
from .flow import LatentStats, TimestepSampler, flow_loss, generate
from .losses import kl_uniform_logvar
from .train import _vae_eval, arrays_to_params, eval_split, train_dit, \
    train_vae
from .vae import VideoTensor, desk_config, init_vae_params, latent_shape, \
    vae_forward_train

_VAE_ARCH_KEYS = ("latent_channels", "spatial_factor", "temporal_factor")
_DIT_ARCH_KEYS = ("hidden_dim", "heads", "blocks", "ffn_factor",
                  "time_embed_dim", "rope_mode")


def _vae_cfg(cfg):
    overrides = {k: cfg[k] for k in _VAE_ARCH_KEYS if k in cfg}
    return desk_config(**overrides)


def _dit_cfg(cfg, latent_channels):
    kwargs = {k: cfg[k] for k in _DIT_ARCH_KEYS if k in cfg}
    return DitConfig(latent_channels=latent_channels, **kwargs)


def _split_checkpoint(arrays):
    stats = None
    if "latent.mean" in arrays and "latent.std" in arrays:
        stats = LatentStats(arrays["latent.mean"], arrays["latent.std"])
    params = arrays_to_params({k: v for k, v in arrays.items()
                               if not k.startswith("latent.")})
    return params, stats


def _buckets(spec):
    out = []
    for part in str(spec).split(","):
        dims = part.strip().lower().split("x")
        if len(dims) != 3:
            raise ValueError(f"bucket {part!r} is not TxHxW")
        out.append(tuple(int(d) for d in dims))
    return out


def _int_list(spec):
    return tuple(int(s) for s in str(spec).split(",") if str(s).strip())


# -- subcommands -----------------------------------------------------------------


def _cmd_make_dataset(args, cfg):
    buckets = _buckets(cfg.get("buckets", "9x32x32,9x24x24,1x32x32"))
    records = make_dataset(int(cfg.get("count", 48)), buckets, Rng(args.seed),
                           args.out, fps=float(cfg.get("fps", 8.0)))
    print(f"wrote {len(records)} clips across {len(buckets)} buckets "
          f"to {args.out}")
    return 0


def _cmd_vae_train(args, cfg):
    records = load_corpus(cfg["data"])
    vcfg = _vae_cfg(cfg)
    result = train_vae(
        records, vcfg, int(cfg.get("steps", 2000)), Rng(args.seed), args.out,
        lr_g=float(cfg.get("lr_g", 1e-4)), lr_d=float(cfg.get("lr_d", 2e-4)),
        batch_size=int(cfg.get("batch_size", 2)),
        eval_interval=int(cfg.get("eval_interval", 50)),
        checkpoint_interval=int(cfg.get("checkpoint_interval", 0)),
        gan_start=float(cfg.get("gan_start", 0.3)))
    last = result.rows[-1] if result.rows else {}
    print(f"checkpoint: {result.checkpoint}")
    print(f"metrics: {result.metrics}")
    if last:
        print(f"final eval_psnr={last['eval_psnr']:.2f} "
              f"disc_acc={last['disc_acc']:.2f}")
    return 0


def _cmd_vae_eval(args, cfg):
    records = load_corpus(cfg["data"])
    vcfg = _vae_cfg(cfg)
    params, _ = _split_checkpoint(read_checkpoint(cfg["checkpoint"]))
    _, held = eval_split(records)
    if not held:
        held = records[-1:]
    score, acc = _vae_eval(held, _load_all(held), params, vcfg, params,
                           Rng(args.seed))
    print(f"eval_psnr={score:.3f} disc_acc={acc:.3f} clips={len(held)}")
    return 0


def _load_all(records):
    from .train import _load_clips
    return _load_clips(records)


def _cmd_dit_train(args, cfg):
    records = load_corpus(cfg["data"])
    vcfg = _vae_cfg(cfg)
    vae_params, stats = _split_checkpoint(
        read_checkpoint(cfg["vae_checkpoint"]))
    dcfg = _dit_cfg(cfg, vcfg.latent_channels)
    result = train_dit(
        records, vae_params, vcfg, dcfg, int(cfg.get("steps", 5000)),
        Rng(args.seed), args.out, stats=stats,
        lr=float(cfg.get("lr", 3e-4)),
        batch_size=int(cfg.get("batch_size", 2)),
        budget=int(cfg["budget"]) if "budget" in cfg else None,
        eval_interval=int(cfg.get("eval_interval", 100)),
        checkpoint_interval=int(cfg.get("checkpoint_interval", 0)),
        p_cond=float(cfg.get("p_cond", 0.3)),
        shuffle_captions=bool(cfg.get("shuffle_captions", False)))
    print(f"checkpoint: {result.checkpoint}")
    print(f"metrics: {result.metrics}")
    if result.rows:
        last = result.rows[-1]
        print(f"final loss={last['loss']:.4f} eval_loss={last['eval_loss']:.4f} "
              f"baseline={last['baseline']:.4f}")
    return 0


def _cmd_generate(args, cfg):
    vcfg = _vae_cfg(cfg)
    vae_params, stats_v = _split_checkpoint(
        read_checkpoint(cfg["vae_checkpoint"]))
    dit_arrays = read_checkpoint(cfg["checkpoint"])
    dit_params, stats_d = _split_checkpoint(dit_arrays)
    stats = stats_d or stats_v
    dcfg = _dit_cfg(cfg, vcfg.latent_channels)
    frames = int(cfg.get("frames", 9))
    height = int(cfg.get("height", 32))
    width = int(cfg.get("width", 32))
    fps = float(cfg.get("fps", 8.0))
    steps = int(cfg.get("steps", 20))
    t_final = float(cfg.get("t_final", 0.05))
    prompt = str(cfg["prompt"])
    dims = latent_shape(vcfg, frames, height, width)[:3]

    conditioning = None
    t_c = float(cfg.get("t_c", 0.0))
    if "conditioning" in cfg:
        first, _ = read_rvid(cfg["conditioning"])
        conditioning = first[0]

    embed = embed_caption(caption_ids(prompt), dit_params)
    video = generate(embed, dims, steps, dcfg, vcfg, dit_params, vae_params,
                     Rng(args.seed), fps=fps, conditioning=conditioning,
                     t_c=t_c, t_final=t_final, stats=stats)
    write_rvid(args.out, video.numpy(), fps)
    manifest = {"seed": args.seed, "steps": steps, "prompt": prompt,
                "t_final": t_final}
    with open(str(args.out) + ".json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {args.out} and sidecar manifest")
    return 0


def _cmd_analyze_latents(args, cfg):
    records = load_corpus(cfg["data"])
    vcfg = _vae_cfg(cfg)
    spec = str(cfg["checkpoints"])
    if os.path.isdir(spec):
        paths = sorted(glob.glob(os.path.join(spec, "vae_step*.ckpt")))
        final = os.path.join(spec, "vae_final.ckpt")
        if os.path.exists(final):
            paths.append(final)
    else:
        paths = [p.strip() for p in spec.split(",") if p.strip()]
    if not paths:
        raise ValueError(f"no checkpoints found under {spec!r}")
    rows = pca_over_checkpoints(paths, records, vcfg)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "spectrum.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(("checkpoint", "auc", "top_share"))
        for row in rows:
            writer.writerow((row["checkpoint"], repr(row["auc"]),
                             repr(row["top_share"])))
    heat = os.path.join(args.out, "correlation.pgm")
    ppm_heatmap(heat, np.abs(rows[-1]["report"].correlation), lo=0.0, hi=1.0)
    for row in rows:
        print(f"{row['checkpoint']}: auc={row['auc']:.4f} "
              f"top_share={row['top_share']:.4f}")
    print(f"wrote {csv_path} and {heat}")
    return 0


def _cmd_rope_ablation(args, cfg):
    results = rope_ablation(
        args.out, seeds=_int_list(cfg.get("seeds", "0,1,2")),
        steps=int(cfg.get("steps", 300)),
        pairs=int(cfg.get("pairs", 16)), gap=float(cfg.get("gap", 3.0)),
        lr=float(cfg.get("lr", 1e-3)))
    wins = 0
    runs = list(zip(results["exponential"], results["inverse-exponential"]))
    for exp_run, inv_run in runs:
        e = final_quarter_mean(exp_run["losses"])
        i = final_quarter_mean(inv_run["losses"])
        wins += e < i
        print(f"seed {exp_run['seed']}: exponential={e:.4f} "
              f"inverse={i:.4f} winner="
              f"{'exponential' if e < i else 'inverse'}")
    print(f"exponential wins {wins}/{len(runs)} seeds")
    return 0


def _cmd_decoder_ab(args, cfg):
    vcfg = _vae_cfg(cfg)
    vae_params, stats_v = _split_checkpoint(
        read_checkpoint(cfg["vae_checkpoint"]))
    dit_params, stats_d = _split_checkpoint(
        read_checkpoint(cfg["dit_checkpoint"]))
    dcfg = _dit_cfg(cfg, vcfg.latent_channels)
    prompts = [p.strip() for p in str(cfg["prompts"]).split(";") if p.strip()]
    dims = latent_shape(vcfg, int(cfg.get("frames", 9)),
                        int(cfg.get("height", 32)),
                        int(cfg.get("width", 32)))[:3]
    rows = decoder_ab_test(
        prompts, dims, int(cfg.get("steps", 20)), dcfg, vcfg, dit_params,
        vae_params, _int_list(cfg.get("seeds", "0,1")), args.out,
        stats=stats_d or stats_v, fps=float(cfg.get("fps", 8.0)),
        t_split=float(cfg.get("t_split", 0.05)))
    richer = sum(row["energy_a"] >= row["energy_b"] for row in rows)
    for row in rows:
        print(f"{row['caption']!r} seed={row['seed']}: "
              f"energy_a={row['energy_a']:.3e} energy_b={row['energy_b']:.3e}")
    print(f"decoder-denoised output carries >= detail energy in "
          f"{richer}/{len(rows)} runs")
    return 0


def _cmd_grad_check(args, cfg):
    tol = float(cfg.get("tolerance", 1e-3))
    max_coords = int(cfg.get("max_coords", 5))
    failures = []

    vcfg = desk_config()
    vae_params = init_vae_params(vcfg, Rng(0))
    clip = Rng(1).uniform(0.0, 1.0, (3, 16, 16, 3))
    x = VideoTensor(clip, 8.0)

    def f_vae(w):
        p = dict(vae_params)
        p["dec.out.w"] = w
        recon, post = vae_forward_train(x, 0.1, p, vcfg, Rng(7))
        err = recon.data - x.data
        return (err * err).mean() + kl_uniform_logvar(post) * 1e-6

    dcfg = DitConfig(hidden_dim=48, heads=4, blocks=2, ffn_factor=2,
                     latent_channels=16, time_embed_dim=16)
    dit_params = init_dit_params(dcfg, Rng(2))
    coords = token_coordinates((3, 2, 2), vcfg.temporal_factor,
                               vcfg.spatial_factor, 8.0)
    z0 = Rng(4).normal((coords.shape[0], 16))
    caption = embed_caption(
        caption_ids("red square moving right slowly"), dit_params)
    sampler = TimestepSampler()

    def f_dit(w):
        p = dict(dit_params)
        p["in.w"] = w

        def model(z_t, t, cap):
            seq = TokenSequence(z_t, coords, np.asarray(t, np.float64), 8.0)
            return dit_forward(seq, cap, dcfg, p)

        return flow_loss(model, z0, caption, sampler, Rng(9))

    for name, fun, param in (("autoencoder/dec.out.w", f_vae,
                              vae_params["dec.out.w"]),
                             ("transformer/in.w", f_dit,
                              dit_params["in.w"])):
        err = finite_difference_check(fun, param, max_coords=max_coords,
                                      rng=Rng(args.seed))
        status = "PASS" if err < tol else "FAIL"
        print(f"{status} {name}: max relative error {err:.3e} "
              f"(tolerance {tol:.1e})")
        if err >= tol:
            failures.append(name)
    return 1 if failures else 0


_COMMANDS = {
    "make-dataset": (_cmd_make_dataset, ("count", "buckets", "fps"), True),
    "vae-train": (_cmd_vae_train,
                  ("data", "steps", "lr_g", "lr_d", "batch_size",
                   "eval_interval", "checkpoint_interval", "gan_start")
                  + _VAE_ARCH_KEYS, True),
    "vae-eval": (_cmd_vae_eval, ("data", "checkpoint") + _VAE_ARCH_KEYS,
                 False),
    "dit-train": (_cmd_dit_train,
                  ("data", "vae_checkpoint", "steps", "lr", "batch_size",
                   "budget", "eval_interval", "checkpoint_interval", "p_cond",
                   "shuffle_captions") + _VAE_ARCH_KEYS + _DIT_ARCH_KEYS,
                  True),
    "generate": (_cmd_generate,
                 ("prompt", "checkpoint", "vae_checkpoint", "steps", "frames",
                  "height", "width", "fps", "t_final", "conditioning", "t_c")
                 + _VAE_ARCH_KEYS + _DIT_ARCH_KEYS, True),
    "analyze-latents": (_cmd_analyze_latents,
                        ("data", "checkpoints") + _VAE_ARCH_KEYS, True),
    "rope-ablation": (_cmd_rope_ablation,
                      ("steps", "seeds", "pairs", "gap", "lr"), True),
    "decoder-ab": (_cmd_decoder_ab,
                   ("prompts", "dit_checkpoint", "vae_checkpoint", "seeds",
                    "steps", "frames", "height", "width", "fps", "t_split")
                   + _VAE_ARCH_KEYS + _DIT_ARCH_KEYS, True),
    "grad-check": (_cmd_grad_check, ("tolerance", "max_coords"), False),
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vidflow",
        description="Synthetic-video flow model: data, training, analysis.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, _, out_required) in _COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=out_required,
                       help="output file or directory")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    command, allowed, _ = _COMMANDS[args.command]
    try:
        cfg = load_config(args.config) if args.config else {}
        check_keys(cfg, allowed, args.command)
        return command(args, cfg)
    except (ValueError, KeyError, RuntimeError, OSError, FormatError) as e:
        detail = f"missing config key {e}" if isinstance(e, KeyError) else e
        print(f"error: {detail}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
