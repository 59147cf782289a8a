"""Corpus generation, caption grammar, and batch planning tests."""

import itertools

import numpy as np
import pytest
from scipy import stats

from vidflow.autodiff import Rng
from vidflow.data import (COLORS, MOTIONS, SHAPES, SPEED_WORDS, VOCABULARY,
                          BatchPlan, ClipRecord, SceneSpec, _coverage,
                          bucket_token_count, caption_for_spec, caption_from_ids,
                          caption_ids, detect_motion, load_corpus, make_dataset,
                          plan_batches, render_scene, spec_from_caption)
from vidflow.vae import desk_config


def _spec(shape="square", color="red", motion="right", speed=2.0, size=8.0,
          fps=8.0):
    return SceneSpec(shape, COLORS[color], motion, speed, size, fps)


# -- captions ------------------------------------------------------------------


def test_vocabulary_fits_text_embedding():
    assert len(VOCABULARY) <= 64
    assert len(set(VOCABULARY)) == len(VOCABULARY)


def test_caption_spec_bijection_over_all_combinations():
    for shape, color, motion, speed in itertools.product(
            SHAPES, COLORS, MOTIONS, SPEED_WORDS):
        spec = _spec(shape, color, motion, speed)
        caption = caption_for_spec(spec)
        assert spec_from_caption(caption) == spec
        assert caption_from_ids(caption_ids(caption)) == caption


def test_distinct_specs_have_distinct_captions():
    captions = {caption_for_spec(_spec(s, c, m, v))
                for s, c, m, v in itertools.product(SHAPES, COLORS, MOTIONS,
                                                    SPEED_WORDS)}
    assert len(captions) == len(SHAPES) * len(COLORS) * len(MOTIONS) * len(SPEED_WORDS)


def test_caption_ids_reject_foreign_words():
    with pytest.raises(ValueError, match="vocabulary"):
        caption_ids("purple square moving right slowly")


def test_spec_from_caption_rejects_gibberish():
    with pytest.raises(ValueError):
        spec_from_caption("red square moving clockwise slowly")
    with pytest.raises(ValueError):
        spec_from_caption("red square rotating left slowly")
    with pytest.raises(ValueError):
        spec_from_caption("too few words")


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec("hexagon", COLORS["red"], "right", 2.0, 8.0, 8.0)
    with pytest.raises(ValueError):
        SceneSpec("square", (0.5, 0.5, 0.5), "right", 2.0, 8.0, 8.0)
    with pytest.raises(ValueError):
        SceneSpec("square", COLORS["red"], "right", 3.0, 8.0, 8.0)


# -- rendering -----------------------------------------------------------------


def _centroids(video):
    lum = video.sum(axis=3).astype(np.float64)
    total = lum.sum(axis=(1, 2))
    xs = np.arange(video.shape[2])
    ys = np.arange(video.shape[1])
    cx = (lum.sum(axis=1) * xs).sum(axis=1) / total
    cy = (lum.sum(axis=2) * ys).sum(axis=1) / total
    return cx, cy


@pytest.mark.parametrize("motion,speed", [("right", 2.0), ("left", 1.0),
                                          ("down", 2.0), ("up", 1.0)])
def test_translation_centroid_moves_exactly_speed_per_frame(motion, speed):
    # center the whole path so even the 16-pixel sweep stays in frame
    ux = {"right": 1, "left": -1}.get(motion, 0)
    uy = {"down": 1, "up": -1}.get(motion, 0)
    span = speed * 8
    start = (16.0 - ux * span / 2, 16.0 - uy * span / 2)
    video = render_scene(_spec(motion=motion, speed=speed), 9, 32, 32,
                         start=start)
    cx, cy = _centroids(video)
    sx = {"right": speed, "left": -speed}.get(motion, 0.0)
    sy = {"down": speed, "up": -speed}.get(motion, 0.0)
    for t in range(9):
        assert cx[t] - cx[0] == pytest.approx(sx * t, abs=1e-9)
        assert cy[t] - cy[0] == pytest.approx(sy * t, abs=1e-9)


def test_translation_frames_are_shifted_copies():
    video = render_scene(_spec(motion="right", speed=2.0), 5, 32, 32,
                         start=(10.0, 16.0))
    assert np.array_equal(video[3][:, 6:], video[0][:, :26])


def test_rotation_keeps_centroid_still_and_frames_change():
    video = render_scene(_spec(shape="square", motion="cw-rotate", speed=1.0),
                         9, 32, 32, start=(16.0, 16.0))
    cx, cy = _centroids(video)
    assert np.all(np.abs(cx - cx[0]) < 0.05)
    assert np.all(np.abs(cy - cy[0]) < 0.05)
    assert not np.array_equal(video[1], video[0])


def test_render_rejects_escaping_object():
    with pytest.raises(ValueError, match="leaves"):
        render_scene(_spec(motion="right", speed=2.0), 9, 32, 32,
                     start=(26.0, 16.0))


def test_render_color_and_range():
    video = render_scene(_spec(color="cyan", motion="down", speed=1.0),
                         3, 32, 32, start=(16.0, 12.0))
    assert video.dtype == np.float32
    assert video.min() >= 0.0 and video.max() <= 1.0
    assert video[..., 0].max() == 0.0  # cyan has no red
    assert video[..., 1].max() > 0.9
    assert video[..., 2].max() > 0.9


def test_shapes_have_distinct_masks():
    masks = [render_scene(_spec(shape=s, motion="cw-rotate", speed=1.0),
                          1, 32, 32, start=(16.0, 16.0))[0].sum(axis=2) > 0.5
             for s in SHAPES]
    assert not np.array_equal(masks[0], masks[1])
    assert not np.array_equal(masks[1], masks[2])
    # every shape must actually put paint on the canvas
    for shape, mask in zip(SHAPES, masks):
        assert mask.sum() > 0, shape
    # inscribed areas order as triangle < circle < square
    by_name = dict(zip(SHAPES, masks))
    assert by_name["triangle"].sum() < by_name["circle"].sum()
    assert by_name["circle"].sum() < by_name["square"].sum()


def test_triangle_area_matches_formula():
    # equilateral triangle inscribed in a circle of radius r covers
    # 3*sqrt(3)/4 * r^2; supersampled coverage should land close
    size = 12.0
    cov = _coverage("triangle", size, 16.0, 16.0, 32, 32)
    want = 3.0 * np.sqrt(3.0) / 4.0 * (size / 2.0) ** 2
    assert abs(float(cov.sum()) - want) / want < 0.05


def test_triangle_rotation_moves_vertices():
    spec = _spec(shape="triangle", motion="cw-rotate", speed=1.0)
    video = render_scene(spec, 5, 32, 32, start=(16.0, 16.0))
    assert video[0].sum() > 0
    assert not np.array_equal(video[0], video[1])


# -- motion detection ----------------------------------------------------------


@pytest.mark.parametrize("motion", ["left", "right", "up", "down"])
def test_detect_motion_recovers_direction(motion):
    video = render_scene(_spec(motion=motion, speed=1.0), 9, 32, 32,
                         start=(16.0, 16.0))
    assert detect_motion(video) == motion


def test_detect_motion_none_for_rotation_and_stills():
    video = render_scene(_spec(motion="cw-rotate", speed=2.0), 9, 32, 32,
                         start=(16.0, 16.0))
    assert detect_motion(video) == "none"
    frame = render_scene(_spec(motion="right", speed=1.0), 1, 32, 32,
                         start=(16.0, 16.0))
    assert detect_motion(frame) == "none"


def test_detect_motion_blank_video():
    assert detect_motion(np.zeros((4, 8, 8, 3), np.float32)) == "none"


# -- dataset -------------------------------------------------------------------

BUCKETS = [(9, 32, 32), (9, 24, 24), (1, 32, 32)]


def test_make_dataset_deterministic_bytes(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    recs_a = make_dataset(7, BUCKETS, Rng(11), a)
    recs_b = make_dataset(7, BUCKETS, Rng(11), b)
    assert [r.caption for r in recs_a] == [r.caption for r in recs_b]
    for ra, rb in zip(recs_a, recs_b):
        assert open(ra.path, "rb").read() == open(rb.path, "rb").read()
    assert (a / "captions.tsv").read_bytes() == (b / "captions.tsv").read_bytes()


def test_make_dataset_seed_changes_content(tmp_path):
    recs_a = make_dataset(6, BUCKETS, Rng(1), tmp_path / "a")
    recs_b = make_dataset(6, BUCKETS, Rng(2), tmp_path / "b")
    assert [r.caption for r in recs_a] != [r.caption for r in recs_b]


def test_make_dataset_cycles_buckets_and_single_frame_clips(tmp_path):
    recs = make_dataset(6, BUCKETS, Rng(5), tmp_path / "d")
    assert [r.dims for r in recs] == [BUCKETS[i % 3] for i in range(6)]
    from vidflow.checkpoint import read_rvid
    still, _ = read_rvid(recs[2].path)
    assert still.shape == (1, 32, 32, 3)


def test_load_corpus_round_trip(tmp_path):
    recs = make_dataset(5, BUCKETS, Rng(3), tmp_path / "d")
    loaded = load_corpus(tmp_path / "d")
    assert [(r.name, r.caption, r.dims) for r in loaded] == \
        [(r.name, r.caption, tuple(r.dims)) for r in recs]


def test_load_corpus_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path)


def test_rendered_objects_stay_inside_all_buckets(tmp_path):
    # border pixels stay black: integer shifting can never wrap content in
    recs = make_dataset(30, BUCKETS, Rng(17), tmp_path / "d")
    from vidflow.checkpoint import read_rvid
    for r in recs:
        clip, _ = read_rvid(r.path)
        assert clip[:, 0].max() == 0.0 and clip[:, -1].max() == 0.0
        assert clip[:, :, 0].max() == 0.0 and clip[:, :, -1].max() == 0.0


# -- batch planning --------------------------------------------------------------


def _fake_records(dims, n, tag):
    return [ClipRecord(f"{tag}_{i}.rvid", f"/nowhere/{tag}_{i}.rvid",
                       "red square moving right slowly", dims, 8.0)
            for i in range(n)]


def test_bucket_token_count_desk():
    cfg = desk_config()
    assert bucket_token_count(cfg, (9, 32, 32)) == 5 * 4 * 4
    assert bucket_token_count(cfg, (1, 32, 32)) == 16
    assert bucket_token_count(cfg, (9, 24, 24)) == 5 * 3 * 3


def test_plan_batches_boundary_drop_rate_accepted():
    # 1000 tokens against a budget of 800 sits exactly on the 20% line
    cfg = desk_config()
    recs = _fake_records((19, 80, 80), 4, "big")
    assert bucket_token_count(cfg, (19, 80, 80)) == 1000
    stream, rejected = plan_batches(recs, 800, cfg, Rng(0))
    assert rejected == {}
    plan = next(stream)
    assert plan.token_count == 800
    assert plan.drop_rate == pytest.approx(0.2)
    for kept in plan.kept:
        assert kept.shape == (800,)
        assert np.all(np.diff(kept) > 0)
        assert kept[0] >= 0 and kept[-1] < 1000


def test_plan_batches_rejects_heavy_drop():
    cfg = desk_config()
    recs = _fake_records((21, 80, 80), 4, "big")  # 1100 tokens
    recs += _fake_records((9, 32, 32), 4, "ok")
    stream, rejected = plan_batches(recs, 800, cfg, Rng(0))
    assert (21, 80, 80) in rejected
    assert "20%" in rejected[(21, 80, 80)]
    assert all(p.bucket == (9, 32, 32) for p in itertools.islice(stream, 4))


def test_plan_batches_all_rejected_raises():
    cfg = desk_config()
    recs = _fake_records((21, 80, 80), 4, "big")
    with pytest.raises(ValueError, match="no bucket"):
        plan_batches(recs, 800, cfg, Rng(0))


def test_plan_batches_small_buckets_pass_whole():
    cfg = desk_config()
    recs = _fake_records((9, 32, 32), 3, "vid") + _fake_records((1, 32, 32), 3, "img")
    stream, rejected = plan_batches(recs, 80, cfg, Rng(0))
    assert rejected == {}
    plans = list(itertools.islice(stream, 4))
    assert {p.bucket for p in plans} == {(9, 32, 32), (1, 32, 32)}
    img = next(p for p in plans if p.bucket == (1, 32, 32))
    assert img.token_count == 16 and img.drop_rate == 0.0
    assert np.array_equal(img.kept[0], np.arange(16))


def test_plan_batches_interleaves_buckets():
    cfg = desk_config()
    recs = _fake_records((9, 32, 32), 3, "vid") + _fake_records((1, 32, 32), 3, "img")
    stream, _ = plan_batches(recs, 80, cfg, Rng(0))
    buckets = [p.bucket for p in itertools.islice(stream, 6)]
    assert buckets[0] != buckets[1]
    assert buckets[:2] * 3 == buckets


def test_plan_batches_empty_corpus():
    with pytest.raises(ValueError, match="empty"):
        plan_batches([], 80, desk_config(), Rng(0))


def test_plan_batches_drop_indices_uniform():
    # tally dropped token indices over many plans; uniformity survives a
    # chi-square test
    cfg = desk_config()
    recs = _fake_records((9, 56, 40), 2, "b")  # 5*7*5 = 175 tokens
    k = 150
    stream, _ = plan_batches(recs, k, cfg, Rng(99), batch_size=1)
    count = bucket_token_count(cfg, (9, 56, 40))
    tally = np.zeros(count, dtype=np.int64)
    plans = 4000
    for plan in itertools.islice(stream, plans):
        dropped = np.setdiff1d(np.arange(count), plan.kept[0])
        tally[dropped] += 1
    assert tally.sum() == plans * (count - k)
    p_value = stats.chisquare(tally).pvalue
    assert p_value > 0.01


def test_plan_batches_deterministic_per_seed():
    cfg = desk_config()
    recs = _fake_records((9, 32, 32), 5, "v")
    s1, _ = plan_batches(recs, 80, cfg, Rng(4))
    s2, _ = plan_batches(recs, 80, cfg, Rng(4))
    for p1, p2 in zip(itertools.islice(s1, 5), itertools.islice(s2, 5)):
        assert [r.name for r in p1.records] == [r.name for r in p2.records]
        assert all(np.array_equal(a, b) for a, b in zip(p1.kept, p2.kept))
