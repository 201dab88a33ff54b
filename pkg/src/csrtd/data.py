"""Procedural two-view rearrangement scenes with ground-truth change masks.

A scene is a textured background plus axis-aligned blobs (rectangles and
ellipses) and hinged doors.  Perturbing a scene moves some blobs and swings
some doors; only moves beyond the threshold count as rearrangement targets.
The current view is rendered with a horizontal camera shift of ±2 px.

On-disk layout under ``out_dir``::

    manifest.txt                 "<split> <id>" per line
    <split>/<id>_goal.ppm        binary PPM (P6)
    <split>/<id>_cur.ppm
    <split>/<id>_mask.pgm        binary PGM (P5), 0 / 255
    <split>/<id>_meta.txt        key=value lines
"""
from __future__ import annotations

import copy
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

SPLITS = ("train", "val", "test")
JITTER_PX = 2
SEED_BLOCK = 1_000_000
DOOR_TARGET_FRACTION = 0.6


@dataclass
class SceneObject:
    kind: str  # "blob" | "door"
    shape: str  # "rect" | "ellipse"; doors are rects
    x: float  # centre, world coordinates
    y: float
    rx: float  # half extents
    ry: float
    color: Tuple[int, int, int]
    hinge: str = "left"  # doors only: "left" | "right"
    angle: float = 0.0  # degrees
    max_angle: float = 0.0
    dark: Tuple[int, int, int] = (0, 0, 0)


@dataclass
class Scene:
    size: int
    margin: int
    objects: List[SceneObject]
    background: np.ndarray  # world canvas, float32 H×W×3

    @property
    def world(self) -> int:
        return self.size + 2 * self.margin


@dataclass
class RearrangeEvent:
    obj: int
    kind: str
    dx: float = 0.0
    dy: float = 0.0
    dangle: float = 0.0
    is_target: bool = False


@dataclass
class Sample:
    goal: np.ndarray
    current: np.ndarray
    mask: np.ndarray
    jitter: int
    seed: int
    events: List[RearrangeEvent] = field(default_factory=list)


@dataclass(frozen=True)
class SplitSpec:
    train: int = 500
    val: int = 100
    test: int = 100
    seed: int = 0

    def counts(self) -> Dict[str, int]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def seed_range(self, split: str) -> range:
        idx = SPLITS.index(split)
        n = self.counts()[split]
        if n >= SEED_BLOCK:
            raise ValueError(f"split {split} too large ({n} >= {SEED_BLOCK})")
        start = (self.seed * len(SPLITS) + idx) * SEED_BLOCK
        return range(start, start + n)


def move_threshold(size: int) -> float:
    """Blob displacement (px) beyond which an object is a target; 8 px at S=64."""
    return 8.0 * size / 64.0


def is_target(event: RearrangeEvent, threshold: float, max_angle: float = 0.0) -> bool:
    if event.kind == "door":
        return abs(event.dangle) > DOOR_TARGET_FRACTION * max_angle
    return math.hypot(event.dx, event.dy) > threshold


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


# ----------------------------------------------------------------------
# scene generation
# ----------------------------------------------------------------------
def _background(rng: np.random.Generator, world: int) -> np.ndarray:
    c0 = rng.uniform(70, 190, size=3)
    c1 = rng.uniform(70, 190, size=3)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:world, 0:world].astype(np.float64) / max(world - 1, 1)
    t = (xx * np.cos(theta) + yy * np.sin(theta) - min(0, np.cos(theta)) - min(0, np.sin(theta)))
    t /= abs(np.cos(theta)) + abs(np.sin(theta))
    img = c0[None, None] * (1 - t[..., None]) + c1[None, None] * t[..., None]
    # low-frequency ripple plus per-pixel speckle
    fx, fy = rng.uniform(1.0, 3.0, size=2)
    ripple = 10.0 * np.sin(2 * np.pi * (fx * xx + rng.uniform()) ) * np.cos(2 * np.pi * (fy * yy + rng.uniform()))
    speckle = rng.normal(0.0, 30.0, size=(world, world, 1)) + rng.normal(0.0, 5.0, size=(world, world, 3))
    return np.clip(img + ripple[..., None] + speckle, 0, 255).astype(np.float32)


def _color(rng: np.random.Generator) -> Tuple[int, int, int]:
    return tuple(int(v) for v in rng.integers(0, 256, size=3))


def generate_scene(seed: int, size: int = 64) -> Scene:
    """Background plus 4–10 objects, of which 0–2 are doors; deterministic in ``seed``."""
    rng = _rng(seed, 0)
    s = size / 64.0
    margin = JITTER_PX
    world = size + 2 * margin
    n_obj = int(rng.integers(4, 11))
    n_door = int(rng.integers(0, 3))
    objects: List[SceneObject] = []
    for i in range(n_obj):
        if i < n_door:
            rx, ry = rng.uniform(4, 7) * s, rng.uniform(6, 10) * s
            max_angle = float(rng.uniform(60, 90))
            # near-closed or near-open so that both target and distractor swings fit
            if rng.random() < 0.5:
                angle = float(rng.uniform(0, 0.3)) * max_angle
            else:
                angle = float(rng.uniform(0.7, 1.0)) * max_angle
            dark = tuple(int(v) for v in rng.integers(10, 50, size=3))
            objects.append(
                SceneObject(
                    "door", "rect", 0.0, 0.0, rx, ry, _color(rng),
                    hinge="left" if rng.random() < 0.5 else "right",
                    angle=angle, max_angle=max_angle, dark=dark,
                )
            )
        else:
            shape = "rect" if rng.random() < 0.5 else "ellipse"
            rx, ry = rng.uniform(3, 7) * s, rng.uniform(3, 7) * s
            objects.append(SceneObject("blob", shape, 0.0, 0.0, rx, ry, _color(rng)))
        obj = objects[-1]
        obj.x = float(rng.uniform(margin + obj.rx + 1, margin + size - obj.rx - 1))
        obj.y = float(rng.uniform(margin + obj.ry + 1, margin + size - obj.ry - 1))
    return Scene(size, margin, objects, _background(rng, world))


def _inside(obj: SceneObject, x: float, y: float, scene: Scene) -> bool:
    lo, hi = scene.margin, scene.margin + scene.size
    return lo + obj.rx + 1 <= x <= hi - obj.rx - 1 and lo + obj.ry + 1 <= y <= hi - obj.ry - 1


def _move_blob(rng, obj: SceneObject, scene: Scene, target: bool, thr: float) -> Optional[Tuple[float, float]]:
    for _ in range(50):
        mag = rng.uniform(1.05 * thr, 2.5 * thr) if target else rng.uniform(0.0, 0.8 * thr)
        ang = rng.uniform(0, 2 * np.pi)
        dx, dy = float(mag * np.cos(ang)), float(mag * np.sin(ang))
        if _inside(obj, obj.x + dx, obj.y + dy, scene):
            return dx, dy
    return None


def _swing_door(rng, obj: SceneObject, target: bool) -> float:
    m, a = obj.max_angle, obj.angle
    closed = a <= 0.5 * m
    if target:
        new = rng.uniform(a + 0.65 * m, m) if closed else rng.uniform(0.0, a - 0.65 * m)
    else:
        step = rng.uniform(0.1, 0.4) * m
        new = min(a + step, m) if closed else max(a - step, 0.0)
    return float(new - a)


def _perturb_object(rng, out: Scene, scene: Scene, idx: int, want: bool, thr: float, strict: bool = False):
    obj, base = out.objects[idx], scene.objects[idx]
    if obj.kind == "door":
        ev = RearrangeEvent(idx, "door", dangle=_swing_door(rng, base, want))
        obj.angle = base.angle + ev.dangle
        ev.is_target = is_target(ev, thr, obj.max_angle)
        return ev
    move = _move_blob(rng, base, scene, want, thr)
    if move is None:
        if strict:
            return None
        move = _move_blob(rng, base, scene, False, thr) or (0.0, 0.0)
    ev = RearrangeEvent(idx, "blob", dx=move[0], dy=move[1])
    obj.x, obj.y = base.x + ev.dx, base.y + ev.dy
    ev.is_target = is_target(ev, thr)
    return ev


def perturb_scene(scene: Scene, seed: int) -> Tuple[Scene, List[RearrangeEvent]]:
    """Move 1–4 objects; about 80 % of the moves exceed the target threshold."""
    rng = _rng(seed, 1)
    thr = move_threshold(scene.size)
    out = copy.deepcopy(scene)
    k = int(rng.integers(1, 5))
    chosen = [int(i) for i in rng.permutation(len(scene.objects))[:k]]
    events = [_perturb_object(rng, out, scene, idx, n == 0 or rng.random() < 0.8, thr) for n, idx in enumerate(chosen)]
    if not any(e.is_target for e in events):
        # first pick could not be displaced far enough: give its slot to any object that can
        first = chosen[0]
        out.objects[first] = copy.deepcopy(scene.objects[first])
        events.pop(0)
        for idx in [first] + [i for i in range(len(scene.objects)) if i not in chosen]:
            ev = _perturb_object(rng, out, scene, idx, True, thr, strict=True)
            if ev is not None and ev.is_target:
                events.insert(0, ev)
                break
            out.objects[idx] = copy.deepcopy(scene.objects[idx])
    return out, events


# ----------------------------------------------------------------------
# rasterisation
# ----------------------------------------------------------------------
def footprint(obj: SceneObject, world: int) -> np.ndarray:
    """Boolean world-canvas silhouette; a door's footprint is its whole frame."""
    yy, xx = np.mgrid[0:world, 0:world].astype(np.float64) + 0.5
    if obj.shape == "ellipse":
        return ((xx - obj.x) / obj.rx) ** 2 + ((yy - obj.y) / obj.ry) ** 2 <= 1.0
    return (np.abs(xx - obj.x) <= obj.rx) & (np.abs(yy - obj.y) <= obj.ry)


def _door_panel(obj: SceneObject, world: int) -> np.ndarray:
    yy, xx = np.mgrid[0:world, 0:world].astype(np.float64) + 0.5
    width = 2 * obj.rx * math.cos(math.radians(obj.angle))
    left, right = obj.x - obj.rx, obj.x + obj.rx
    if obj.hinge == "left":
        inx = (xx >= left) & (xx <= left + width)
    else:
        inx = (xx <= right) & (xx >= right - width)
    return inx & (np.abs(yy - obj.y) <= obj.ry)


def _crop(canvas: np.ndarray, scene: Scene, jitter: int) -> np.ndarray:
    m, s = scene.margin, scene.size
    if abs(jitter) > m:
        raise ValueError(f"jitter {jitter} exceeds ±{m} px")
    return canvas[m : m + s, m + jitter : m + jitter + s]


def render_world(scene: Scene) -> np.ndarray:
    canvas = scene.background.copy()
    for obj in sorted(scene.objects, key=lambda o: o.kind != "door"):
        fp = footprint(obj, scene.world)
        if obj.kind == "door":
            canvas[fp] = obj.dark
            canvas[_door_panel(obj, scene.world)] = obj.color
        else:
            canvas[fp] = obj.color
    return canvas


def render(scene: Scene, jitter: int = 0) -> np.ndarray:
    """Rasterise the scene as seen by a camera shifted ``jitter`` px to the right."""
    return np.ascontiguousarray(_crop(render_world(scene), scene, jitter)).round().astype(np.uint8)


def change_mask(goal_scene: Scene, cur_scene: Scene, events: List[RearrangeEvent], jitter: int) -> np.ndarray:
    """Union of target footprints in both states, in current-frame pixels."""
    world = goal_scene.world
    acc = np.zeros((world, world), dtype=bool)
    for ev in events:
        if ev.is_target:
            acc |= footprint(goal_scene.objects[ev.obj], world)
            acc |= footprint(cur_scene.objects[ev.obj], world)
    return np.ascontiguousarray(_crop(acc, goal_scene, jitter)).astype(np.uint8)


def make_sample(seed: int, size: int = 64) -> Sample:
    scene = generate_scene(seed, size)
    cur_scene, events = perturb_scene(scene, seed)
    jitter = int(_rng(seed, 2).choice([-JITTER_PX, JITTER_PX]))
    return Sample(
        goal=render(scene, 0),
        current=render(cur_scene, jitter),
        mask=change_mask(scene, cur_scene, events, jitter),
        jitter=jitter,
        seed=seed,
        events=events,
    )


# ----------------------------------------------------------------------
# files
# ----------------------------------------------------------------------
def _meta_lines(sample: Sample, size: int) -> List[str]:
    lines = [f"seed={sample.seed}", f"size={size}", f"jitter={sample.jitter}", f"n_events={len(sample.events)}"]
    for i, ev in enumerate(sample.events):
        lines.append(
            f"event{i}=obj:{ev.obj} kind:{ev.kind} dx:{ev.dx:.4f} dy:{ev.dy:.4f} "
            f"dangle:{ev.dangle:.4f} target:{int(ev.is_target)}"
        )
    return lines


def write_sample(sample: Sample, split_dir: Path, sid: str, size: int) -> None:
    try:
        split_dir.mkdir(parents=True, exist_ok=True)
        Image.fromarray(sample.goal, "RGB").save(split_dir / f"{sid}_goal.ppm", format="PPM")
        Image.fromarray(sample.current, "RGB").save(split_dir / f"{sid}_cur.ppm", format="PPM")
        save_mask(sample.mask, split_dir / f"{sid}_mask.pgm")
        (split_dir / f"{sid}_meta.txt").write_text("\n".join(_meta_lines(sample, size)) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing sample {sid} under {split_dir}: {exc}") from exc


def save_mask(mask: np.ndarray, path) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, "L").save(path, format="PPM")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def build_dataset(spec: SplitSpec, size: int, out_dir) -> List[Tuple[str, str]]:
    """Write every split to ``out_dir`` and return the manifest entries."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    manifest: List[Tuple[str, str]] = []
    for split in SPLITS:
        for k, seed in enumerate(spec.seed_range(split)):
            sid = f"{k:05d}"
            write_sample(make_sample(seed, size), out / split, sid, size)
            manifest.append((split, sid))
    path = out / "manifest.txt"
    try:
        path.write_text("".join(f"{s} {i}\n" for s, i in manifest))
    except OSError as exc:
        raise OSError(f"cannot write manifest {path}: {exc}") from exc
    return manifest


def read_manifest(data_dir) -> Dict[str, List[str]]:
    path = Path(data_dir) / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    out: Dict[str, List[str]] = {s: [] for s in SPLITS}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        split, sid = line.split()
        out.setdefault(split, []).append(sid)
    return out


@dataclass
class SplitData:
    goals: np.ndarray  # N×S×S×3 uint8
    currents: np.ndarray
    masks: np.ndarray  # N×S×S uint8
    ids: List[str]

    def __len__(self) -> int:
        return len(self.ids)


def load_split(data_dir, split: str) -> SplitData:
    ids = read_manifest(data_dir).get(split, [])
    if not ids:
        raise ValueError(f"split {split!r} is empty in {data_dir}")
    d = Path(data_dir) / split
    goals = np.stack([load_image(d / f"{i}_goal.ppm") for i in ids])
    curs = np.stack([load_image(d / f"{i}_cur.ppm") for i in ids])
    masks = np.stack([load_mask(d / f"{i}_mask.pgm") for i in ids])
    return SplitData(goals, curs, masks, ids)


def samples_in_memory(spec: SplitSpec, size: int, split: str) -> SplitData:
    """Generate a split without touching disk (same content as :func:`build_dataset`)."""
    samples = [make_sample(seed, size) for seed in spec.seed_range(split)]
    if not samples:
        raise ValueError(f"split {split!r} is empty")
    return SplitData(
        np.stack([s.goal for s in samples]),
        np.stack([s.current for s in samples]),
        np.stack([s.mask for s in samples]),
        [f"{k:05d}" for k in range(len(samples))],
    )
