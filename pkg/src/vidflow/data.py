"""Synthetic moving-shape corpus: rendering, captions, batch planning.

Each clip shows one colored shape on black, either translating at an
integer pixel speed or rotating in place. Captions come from a fixed
template over a small closed vocabulary, so caption and scene parameters
determine each other exactly. Translation frames are integer-shifted
copies of frame zero, which makes centroid motion exact by construction.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import read_rvid, write_rvid

SHAPES = ("square", "circle", "triangle")
MOTIONS = ("left", "right", "up", "down", "cw-rotate")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}
SPEED_WORDS = {1.0: "slowly", 2.0: "quickly"}

_COLOR_FROM_RGB = {rgb: name for name, rgb in COLORS.items()}
_WORD_FROM_SPEED = SPEED_WORDS
_SPEED_FROM_WORD = {w: s for s, w in SPEED_WORDS.items()}

VOCABULARY = (tuple(COLORS) + SHAPES + ("moving", "rotating")
              + ("left", "right", "up", "down", "clockwise")
              + tuple(SPEED_WORDS.values()))
WORD_IDS = {w: i for i, w in enumerate(VOCABULARY)}

# (dx, dy) per unit speed in (column, row) pixel coordinates; row 0 is the
# top of the frame, so "up" decreases the row index.
_DIRECTIONS = {"left": (-1, 0), "right": (1, 0), "up": (0, -1), "down": (0, 1)}


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: tuple
    motion: str
    speed: float
    size: float
    fps: float

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.motion not in MOTIONS:
            raise ValueError(f"unknown motion {self.motion!r}")
        if tuple(self.color) not in _COLOR_FROM_RGB:
            raise ValueError(f"color {self.color} is not in the palette")
        if self.speed not in SPEED_WORDS:
            raise ValueError(f"speed {self.speed} has no caption word")
        if self.size <= 0 or self.fps <= 0:
            raise ValueError("size and fps must be positive")


def caption_for_spec(spec):
    color = _COLOR_FROM_RGB[tuple(spec.color)]
    if spec.motion == "cw-rotate":
        verb, direction = "rotating", "clockwise"
    else:
        verb, direction = "moving", spec.motion
    return f"{color} {spec.shape} {verb} {direction} {SPEED_WORDS[spec.speed]}"


def spec_from_caption(caption, size=8.0, fps=8.0):
    words = caption.split()
    if len(words) != 5:
        raise ValueError(f"caption must have 5 words, got {caption!r}")
    color, shape, verb, direction, speed_word = words
    if color not in COLORS or shape not in SHAPES:
        raise ValueError(f"unparseable caption {caption!r}")
    if verb == "rotating" and direction == "clockwise":
        motion = "cw-rotate"
    elif verb == "moving" and direction in _DIRECTIONS:
        motion = direction
    else:
        raise ValueError(f"unparseable motion in {caption!r}")
    if speed_word not in _SPEED_FROM_WORD:
        raise ValueError(f"unknown speed word {speed_word!r}")
    return SceneSpec(shape, COLORS[color], motion, _SPEED_FROM_WORD[speed_word],
                     size, fps)


def caption_ids(caption):
    try:
        return np.array([WORD_IDS[w] for w in caption.split()], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"word {e.args[0]!r} is outside the vocabulary") from None


def caption_from_ids(ids):
    return " ".join(VOCABULARY[int(i)] for i in ids)


# -- rendering -------------------------------------------------------------------


def bounding_radius(spec):
    half = spec.size / 2.0
    if spec.shape == "square" and spec.motion == "cw-rotate":
        return half * float(np.sqrt(2.0))
    return half


def _coverage(shape, size, cx, cy, h, w, theta=0.0, samples=4):
    """Area coverage of the shape per pixel, via grid supersampling."""
    step = 1.0 / samples
    offs = (np.arange(samples) + 0.5) * step
    ys = (np.arange(h)[:, None] + offs[None, :]).reshape(-1)
    xs = (np.arange(w)[:, None] + offs[None, :]).reshape(-1)
    dy = ys[:, None] - cy
    dx = xs[None, :] - cx
    dxg = np.broadcast_to(dx, (dy.shape[0], dx.shape[1]))
    dyg = np.broadcast_to(dy, (dy.shape[0], dx.shape[1]))
    if theta:
        c, s = np.cos(theta), np.sin(theta)
        dxg, dyg = c * dxg - s * dyg, s * dxg + c * dyg
    half = size / 2.0
    if shape == "square":
        inside = (np.abs(dxg) <= half) & (np.abs(dyg) <= half)
    elif shape == "circle":
        inside = dxg * dxg + dyg * dyg <= half * half
    else:  # triangle: point-up, vertices on the radius-half circle
        angles = np.deg2rad([90.0, 210.0, 330.0])
        vx, vy = half * np.cos(angles), -half * np.sin(angles)
        inside = np.ones(dxg.shape, dtype=bool)
        for i in range(3):
            ex, ey = vx[(i + 1) % 3] - vx[i], vy[(i + 1) % 3] - vy[i]
            # this vertex order winds clockwise on screen (y grows down),
            # putting interior points on the positive side of every edge
            inside &= (dxg - vx[i]) * ey - (dyg - vy[i]) * ex >= -1e-12
    cov = inside.reshape(h, samples, w, samples).mean(axis=(1, 3))
    return cov.astype(np.float32)


def _shift_frame(frame, sx, sy):
    out = np.zeros_like(frame)
    h, w = frame.shape[:2]
    ys = slice(max(sy, 0), h + min(sy, 0))
    xs = slice(max(sx, 0), w + min(sx, 0))
    ys_src = slice(max(-sy, 0), h + min(-sy, 0))
    xs_src = slice(max(-sx, 0), w + min(-sx, 0))
    out[ys, xs] = frame[ys_src, xs_src]
    return out


def render_scene(spec, frames, h, w, start):
    """-> [T,H,W,3] float32 clip; raises if the object ever leaves the frame.

    start is the (cx, cy) center on frame zero. Translations shift the
    rendered first frame by whole pixels per frame (speeds are integers),
    so the intensity centroid moves by exactly `speed` pixels per frame.
    """
    cx, cy = float(start[0]), float(start[1])
    radius = bounding_radius(spec)
    if spec.motion == "cw-rotate":
        path = [(cx, cy)] * frames
    else:
        ux, uy = _DIRECTIONS[spec.motion]
        if float(spec.speed) != int(spec.speed):
            raise ValueError("translation speeds must be whole pixels per frame")
        path = [(cx + ux * spec.speed * t, cy + uy * spec.speed * t)
                for t in range(frames)]
    # a full pixel of clearance keeps the border ring exactly black, so an
    # integer shift can never wrap content across an edge
    for px, py in path:
        if not (radius + 1.0 <= px <= w - radius - 1.0
                and radius + 1.0 <= py <= h - radius - 1.0):
            raise ValueError(
                f"object leaves the {h}x{w} frame at center ({px}, {py})")

    color = np.asarray(spec.color, dtype=np.float32)
    out = np.empty((frames, h, w, 3), dtype=np.float32)
    if spec.motion == "cw-rotate":
        omega = spec.speed / (spec.size / 2.0)
        for t in range(frames):
            cov = _coverage(spec.shape, spec.size, cx, cy, h, w,
                            theta=omega * t)
            out[t] = cov[:, :, None] * color
    else:
        base = _coverage(spec.shape, spec.size, cx, cy, h, w)[:, :, None] * color
        ux, uy = _DIRECTIONS[spec.motion]
        for t in range(frames):
            s = int(spec.speed) * t
            out[t] = base if t == 0 else _shift_frame(base, ux * s, uy * s)
    return out


def detect_motion(video, min_px_per_frame=0.3):
    """Dominant translation direction of the intensity centroid.

    -> one of "left", "right", "up", "down", or "none" when the centroid
    barely moves (still images, in-place rotation).
    """
    video = np.asarray(video)
    lum = video.sum(axis=3).astype(np.float64)
    frames = lum.shape[0]
    if frames < 2:
        return "none"
    total = lum.sum(axis=(1, 2))
    if np.any(total <= 0):
        return "none"
    ys = np.arange(lum.shape[1])
    xs = np.arange(lum.shape[2])
    cx = (lum.sum(axis=1) * xs).sum(axis=1) / total
    cy = (lum.sum(axis=2) * ys).sum(axis=1) / total
    dx = (cx[-1] - cx[0]) / (frames - 1)
    dy = (cy[-1] - cy[0]) / (frames - 1)
    if max(abs(dx), abs(dy)) < min_px_per_frame:
        return "none"
    if abs(dx) >= abs(dy):
        return "right" if dx > 0 else "left"
    return "down" if dy > 0 else "up"


# -- dataset ---------------------------------------------------------------------


@dataclass
class ClipRecord:
    name: str
    path: str
    caption: str
    dims: tuple  # (T, H, W)
    fps: float


def _draw_spec(rng, h, w, frames, fps):
    shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
    color_name = tuple(COLORS)[int(rng.integers(0, len(COLORS)))]
    motion = MOTIONS[int(rng.integers(0, len(MOTIONS)))]
    speed = (1.0, 2.0)[int(rng.integers(0, 2))]
    size = float(min(h, w) // 4)
    spec = SceneSpec(shape, COLORS[color_name], motion, speed, size, fps)

    radius = bounding_radius(spec)
    span = 0.0 if motion == "cw-rotate" else speed * (frames - 1)
    ux, uy = (0, 0) if motion == "cw-rotate" else _DIRECTIONS[motion]
    slack_x = w / 2 - (abs(ux) * span / 2 + radius + 1.0)
    slack_y = h / 2 - (abs(uy) * span / 2 + radius + 1.0)
    jx = min(2.0, max(slack_x, 0.0))
    jy = min(2.0, max(slack_y, 0.0))
    cx = w / 2 - ux * span / 2 + float(rng.uniform(-jx, jx))
    cy = h / 2 - uy * span / 2 + float(rng.uniform(-jy, jy))
    return spec, (cx, cy)


def make_dataset(n, buckets, rng, out_dir, fps=8.0):
    """Write n RVID clips cycling through buckets, plus captions.tsv.

    Deterministic per rng seed: same seed, same bytes. Returns the records.
    """
    os.makedirs(out_dir, exist_ok=True)
    records = []
    lines = []
    for i in range(n):
        frames, h, w = buckets[i % len(buckets)]
        spec, start = _draw_spec(rng, h, w, frames, fps)
        clip = render_scene(spec, frames, h, w, start)
        name = f"clip_{i:05d}.rvid"
        path = os.path.join(out_dir, name)
        try:
            write_rvid(path, clip, fps)
        except OSError as e:
            raise RuntimeError(f"failed writing {path}: {e}") from e
        caption = caption_for_spec(spec)
        lines.append(f"{name}\t{caption}\n")
        records.append(ClipRecord(name, path, caption, (frames, h, w), fps))
    manifest = os.path.join(out_dir, "captions.tsv")
    try:
        with open(manifest, "w", encoding="utf-8") as f:
            f.writelines(lines)
    except OSError as e:
        raise RuntimeError(f"failed writing {manifest}: {e}") from e
    return records


def load_corpus(directory):
    """Read captions.tsv and RVID headers back into ClipRecords."""
    manifest = os.path.join(directory, "captions.tsv")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no captions.tsv in {directory}")
    records = []
    with open(manifest, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            name, caption = line.split("\t", 1)
            path = os.path.join(directory, name)
            data, fps = read_rvid(path)
            records.append(ClipRecord(name, path, caption, data.shape[:3], fps))
    return records


# -- batch planning -----------------------------------------------------------------


@dataclass
class BatchPlan:
    bucket: tuple  # (T, H, W)
    token_count: int  # K after dropping
    drop_rate: float
    records: tuple = field(default_factory=tuple)
    kept: tuple = field(default_factory=tuple)  # one index array per record


def bucket_token_count(vae_cfg, dims):
    frames, h, w = dims
    tl = (frames - 1) // vae_cfg.temporal_factor + 1
    return tl * (h // vae_cfg.spatial_factor) * (w // vae_cfg.spatial_factor)


def plan_batches(records, k, vae_cfg, rng, batch_size=2):
    """-> (infinite BatchPlan generator, {rejected bucket: reason}).

    k is the per-sample token budget. Buckets at or under budget pass
    through whole; larger buckets get uniformly-random token indices
    dropped down to k. A bucket that would need more than a 20% drop is
    rejected with a diagnostic instead of silently truncated. Kept index
    arrays are sorted, so slicing with them preserves token coordinates
    exactly as computed on the full grid.
    """
    by_bucket = {}
    for r in records:
        by_bucket.setdefault(tuple(r.dims), []).append(r)
    counts = {b: bucket_token_count(vae_cfg, b) for b in by_bucket}
    if not counts:
        raise ValueError("empty corpus")

    accepted, rejected = [], {}
    for bucket, count in sorted(counts.items()):
        if (count - k) / count > 0.2:
            rejected[bucket] = (f"bucket {bucket} would need dropping "
                                f"{count - k}/{count} tokens "
                                f"({100 * (count - k) / count:.1f}% > 20%)")
        else:
            accepted.append(bucket)
    if not accepted:
        raise ValueError(f"no bucket is usable at budget k={k}: {rejected}")

    def stream():
        cursor = 0
        while True:
            bucket = accepted[cursor % len(accepted)]
            cursor += 1
            pool = by_bucket[bucket]
            count = counts[bucket]
            keep = min(count, k)
            take = min(batch_size, len(pool))
            chosen = [pool[int(j)] for j in rng.choice(len(pool), take)]
            kept = tuple(
                np.sort(rng.choice(count, keep, replace=False)) if count > k
                else np.arange(count)
                for _ in chosen)
            yield BatchPlan(bucket, keep, (count - keep) / count,
                            tuple(chosen), kept)

    return stream(), rejected
