from collections import Counter

import numpy as np
import pytest
from PIL import Image

from csrtd.data import (
    JITTER_PX,
    SPLITS,
    RearrangeEvent,
    SplitSpec,
    build_dataset,
    generate_scene,
    is_target,
    load_split,
    make_sample,
    move_threshold,
    perturb_scene,
    read_manifest,
    render,
    samples_in_memory,
)

SWEEP = range(1000)


@pytest.fixture(scope="module")
def sweep():
    return [make_sample(seed, 32) for seed in SWEEP]


# ---------------------------------------------------------------- scenes
def test_scene_deterministic():
    a, b = generate_scene(42), generate_scene(42)
    assert a.objects == b.objects
    assert a.background.tobytes() == b.background.tobytes()
    s1, s2 = make_sample(7), make_sample(7)
    assert s1.goal.tobytes() == s2.goal.tobytes() and s1.mask.tobytes() == s2.mask.tobytes()


def test_scene_object_counts_and_invariants():
    counts = Counter()
    for seed in SWEEP:
        scene = generate_scene(seed, 32)
        n = len(scene.objects)
        counts[n] += 1
        assert 4 <= n <= 10
        assert sum(o.kind == "door" for o in scene.objects) <= 2
        for o in scene.objects:
            assert o.rx < o.x < scene.world - o.rx and o.ry < o.y < scene.world - o.ry
            assert all(0 <= v <= 255 for v in o.color)
            if o.kind == "door":
                assert 0.0 <= o.angle <= o.max_angle
    assert set(counts) == set(range(4, 11))


def test_target_counts_cover_one_to_four(sweep):
    per_sample = Counter(sum(e.is_target for e in s.events) for s in sweep)
    assert set(per_sample) == {1, 2, 3, 4}
    assert all(1 <= len(s.events) <= 4 for s in sweep)


def test_every_mask_nonempty(sweep):
    assert min(int(s.mask.sum()) for s in sweep) >= 1


def test_distractors_present(sweep):
    events = [e for s in sweep for e in s.events]
    frac = sum(e.is_target for e in events) / len(events)
    assert 0.7 < frac < 0.95


# ---------------------------------------------------------------- thresholds
def test_threshold_is_strict():
    thr = move_threshold(64)
    assert thr == 8.0
    assert not is_target(RearrangeEvent(0, "blob", dx=thr), thr)
    assert not is_target(RearrangeEvent(0, "blob", dx=thr * 0.6, dy=thr * 0.8), thr)
    assert is_target(RearrangeEvent(0, "blob", dx=thr + 1e-9), thr)
    assert not is_target(RearrangeEvent(0, "blob"), thr)


def test_door_rule():
    assert is_target(RearrangeEvent(0, "door", dangle=-80.0), 8.0, max_angle=80.0)
    assert not is_target(RearrangeEvent(0, "door", dangle=48.0), 8.0, max_angle=80.0)
    assert is_target(RearrangeEvent(0, "door", dangle=48.01), 8.0, max_angle=80.0)


def test_event_flags_follow_rule(sweep):
    for s in sweep[:200]:
        scene = generate_scene(s.seed, 32)
        for e in s.events:
            m = scene.objects[e.obj].max_angle
            assert e.is_target == is_target(e, move_threshold(32), m)


# ---------------------------------------------------------------- rendering
def test_jitter_is_pure_translation():
    scene = generate_scene(3)
    left, mid, right = render(scene, -JITTER_PX), render(scene, 0), render(scene, JITTER_PX)
    d = JITTER_PX
    np.testing.assert_array_equal(right[:, : -2 * d], left[:, 2 * d :])
    np.testing.assert_array_equal(mid[:, d:], right[:, :-d])
    assert not np.array_equal(left, right)
    with pytest.raises(ValueError):
        render(scene, 3)


def _inside(obj, x, y):
    if obj.shape == "ellipse":
        return ((x - obj.x) / obj.rx) ** 2 + ((y - obj.y) / obj.ry) ** 2 <= 1.0
    return abs(x - obj.x) <= obj.rx and abs(y - obj.y) <= obj.ry


@pytest.mark.parametrize("seed", [0, 5, 11, 29])
def test_mask_equals_brute_force_union(seed):
    S = 32
    sample = make_sample(seed, S)
    goal = generate_scene(seed, S)
    cur, events = perturb_scene(goal, seed)
    targets = [e.obj for e in events if e.is_target]
    m = goal.margin
    want = np.zeros((S, S), np.uint8)
    for r in range(S):
        for c in range(S):
            wx, wy = c + m + sample.jitter + 0.5, r + m + 0.5
            if any(_inside(goal.objects[i], wx, wy) or _inside(cur.objects[i], wx, wy) for i in targets):
                want[r, c] = 1
    np.testing.assert_array_equal(sample.mask, want)


# ---------------------------------------------------------------- splits and files
def test_split_seed_ranges_disjoint():
    spec = SplitSpec(500, 100, 100, seed=3)
    ranges = [set(spec.seed_range(s)) for s in SPLITS]
    for i in range(3):
        for j in range(i + 1, 3):
            assert not ranges[i] & ranges[j]
    other = SplitSpec(500, 100, 100, seed=4)
    assert not set(spec.seed_range("test")) & set(other.seed_range("train"))


def test_build_dataset_layout_and_determinism(tmp_path):
    spec = SplitSpec(4, 2, 3, seed=1)
    manifest = build_dataset(spec, 32, tmp_path / "a")
    build_dataset(spec, 32, tmp_path / "b")
    assert len(manifest) == 9
    listed = read_manifest(tmp_path / "a")
    assert {k: len(v) for k, v in listed.items()} == spec.counts()
    lines = (tmp_path / "a" / "manifest.txt").read_text().splitlines()
    assert lines[0] == "train 00000" and len(lines) == 9
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 9 * 4 + 1
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    d = tmp_path / "a" / "val"
    assert (d / "00000_goal.ppm").read_bytes()[:2] == b"P6"
    assert (d / "00000_mask.pgm").read_bytes()[:2] == b"P5"
    with Image.open(d / "00000_mask.pgm") as im:
        assert set(np.unique(np.asarray(im))) <= {0, 255}
    meta = dict(line.split("=", 1) for line in (d / "00000_meta.txt").read_text().splitlines())
    assert {"seed", "jitter", "n_events"} <= set(meta)
    assert abs(int(meta["jitter"])) == JITTER_PX


def test_disk_round_trip_matches_memory(tmp_path):
    spec = SplitSpec(2, 2, 2, seed=0)
    build_dataset(spec, 32, tmp_path)
    disk, mem = load_split(tmp_path, "test"), samples_in_memory(spec, 32, "test")
    for a, b in ((disk.goals, mem.goals), (disk.currents, mem.currents), (disk.masks, mem.masks)):
        np.testing.assert_array_equal(a, b)


def test_empty_split_and_io_errors(tmp_path):
    build_dataset(SplitSpec(1, 0, 1), 32, tmp_path / "d")
    with pytest.raises(ValueError, match="empty"):
        load_split(tmp_path / "d", "val")
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path / "missing")
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match=str(blocker)):
        build_dataset(SplitSpec(1, 1, 1), 32, blocker / "sub")
