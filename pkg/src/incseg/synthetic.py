"""Deterministic synthetic driving-like scenes.

A scene is a background layout drawn from one of a few archetypes (the
horizon and the road/vegetation/sky arrangement), with small foreground
shapes placed on top. Background classes form the base task; shape classes
are grouped into the incremental tasks. Everything is a pure function of
``(spec, seed)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import TaskSchedule, build_task_schedule, write_image, write_labelmap
from .errors import ConfigError

N_ARCHETYPES = 4


@dataclass(frozen=True)
class BackgroundClass:
    name: str
    color: tuple[float, float, float]  # mean RGB in [0, 1]
    texture: float = 0.0  # amplitude of the class-specific texture pattern


@dataclass(frozen=True)
class ShapeClass:
    name: str
    kind: str  # "box" | "bar" | "disc"
    colors: tuple[tuple[float, float, float], ...]  # instance colors drawn from this palette
    size: tuple[float, float]  # (height, width) as fractions of the canvas
    size_jitter: float = 0.3
    max_count: int = 2
    presence: float = 0.7  # probability that a scene contains the class at all
    anchor: int = 0  # background class (by position) the shape stands on


@dataclass(frozen=True)
class SyntheticWorldSpec:
    height: int = 32
    width: int = 32
    backgrounds: tuple[BackgroundClass, ...] = (
        BackgroundClass("road", (0.42, 0.40, 0.42), 0.03),
        BackgroundClass("vegetation", (0.22, 0.50, 0.20), 0.12),
        BackgroundClass("sky", (0.55, 0.72, 0.92), 0.0),
    )
    shapes: tuple[ShapeClass, ...] = (
        ShapeClass("car", "box", ((0.75, 0.15, 0.12), (0.15, 0.22, 0.70), (0.85, 0.85, 0.80)),
                   (0.16, 0.26), anchor=0),
        ShapeClass("pole", "bar", ((0.80, 0.75, 0.25), (0.35, 0.33, 0.30)), (0.40, 0.06),
                   anchor=1),
    )
    n_archetypes: int = N_ARCHETYPES
    jitter: float = 0.06  # layout boundary jitter, fraction of the canvas
    illumination: float = 0.15  # per-scene brightness spread
    noise: float = 0.04  # per-pixel gaussian noise std
    task_groups: tuple[tuple[str, ...], ...] = ()  # shape names per increment; default one group

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ConfigError(f"degenerate canvas {self.height}x{self.width}")
        if not self.backgrounds:
            raise ConfigError("at least one background class is required")
        if not 1 <= self.n_archetypes <= N_ARCHETYPES:
            raise ConfigError(f"n_archetypes must be in 1..{N_ARCHETYPES}")

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(b.name for b in self.backgrounds) + tuple(s.name for s in self.shapes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticWorldSpec":
        d = dict(d)
        if "backgrounds" in d:
            d["backgrounds"] = tuple(
                BackgroundClass(b["name"], tuple(b["color"]), b.get("texture", 0.0))
                for b in d["backgrounds"])
        if "shapes" in d:
            d["shapes"] = tuple(
                ShapeClass(s["name"], s["kind"], tuple(tuple(c) for c in s["colors"]),
                           tuple(s["size"]), s.get("size_jitter", 0.3), s.get("max_count", 2),
                           s.get("presence", 0.7), s.get("anchor", 0))
                for s in d["shapes"])
        if "task_groups" in d:
            d["task_groups"] = tuple(tuple(g) for g in d["task_groups"])
        return cls(**d)


def schedule_for(spec: SyntheticWorldSpec) -> TaskSchedule:
    """Backgrounds are the base task; shapes form the increments."""
    tasks = [[b.name for b in spec.backgrounds]]
    if spec.shapes:
        groups = spec.task_groups or (tuple(s.name for s in spec.shapes),)
        named = [n for g in groups for n in g]
        if sorted(named) != sorted(s.name for s in spec.shapes):
            raise ConfigError("task_groups must partition the shape classes")
        tasks.extend(list(g) for g in groups)
    sched = build_task_schedule({"tasks": tasks})
    # label values are positions in spec.class_names; the schedule must agree
    if sched.class_names != spec.class_names:
        raise ConfigError("task_groups must list shapes in declaration order")
    return sched


def archetype_of(spec: SyntheticWorldSpec, seed: int) -> int:
    return int(np.random.default_rng([seed, 0]).integers(spec.n_archetypes))


def _layout(arch: int, H: int, W: int, rng: np.random.Generator, jitter: float, n_bg: int):
    """Background label map for one archetype; roles 0=road, 1=vegetation, 2=sky."""
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    y = (yy + 0.5) / H
    x = (xx + 0.5) / W
    j = lambda: rng.uniform(-jitter, jitter)  # noqa: E731
    role = np.zeros((H, W), dtype=np.int64)
    if arch == 0:  # open road: sky, thin tree line, wide road
        horizon = 0.42 + j()
        role[y < horizon] = 2
        role[(y >= horizon) & (y < horizon + 0.10 + j() / 2)] = 1
    elif arch == 1:  # forest: no sky, road narrowing to a vanishing point
        vx = 0.5 + 2 * j()
        top = 0.45 + j()
        half = np.clip((y - top) / (1 - top), 0, None) * (0.55 + j())
        road = (y > top) & (np.abs(x - vx) < half)
        role[:] = 1
        role[road] = 0
    elif arch == 2:  # boulevard: sky strip, tree walls left and right
        horizon = 0.28 + j()
        side = 0.27 + j()
        role[y < horizon] = 2
        role[(y >= horizon) & ((x < side) | (x > 1 - side))] = 1
    else:  # hillside: tilted horizon, slope of vegetation to the right
        a = 0.20 + j()
        b = 0.35 + j()
        role[y < a + b * x] = 2
        role[(y >= a + b * x) & (x > 0.55 + j() + 0.4 * (1 - y))] = 1
    # fold roles onto however many background classes exist
    return np.minimum(role, n_bg - 1)


def _paint_background(spec: SyntheticWorldSpec, labels: np.ndarray, rng: np.random.Generator):
    H, W = labels.shape
    img = np.zeros((H, W, 3))
    yy, xx = np.mgrid[0:H, 0:W]
    for k, bg in enumerate(spec.backgrounds):
        m = labels == k
        if not m.any():
            continue
        base = np.asarray(bg.color, dtype=np.float64)
        if bg.texture:
            phase = rng.uniform(0, 2 * np.pi, size=2)
            pattern = np.sin(1.7 * xx + phase[0]) * np.cos(1.3 * yy + phase[1])
            pattern = pattern + rng.normal(0, 1, size=(H, W))
            img[m] = base + bg.texture * pattern[m, None]
        else:
            # vertical gradient stands in for a smooth sky / road
            img[m] = base + 0.08 * ((yy[m, None] / H) - 0.5)
    return img


def _place_shapes(spec: SyntheticWorldSpec, labels: np.ndarray, img: np.ndarray,
                  rng: np.random.Generator):
    H, W = labels.shape
    n_bg = len(spec.backgrounds)
    bg_labels = labels.copy()
    for s_idx, shape in enumerate(spec.shapes):
        cls = n_bg + s_idx
        if rng.random() >= shape.presence:
            continue
        count = int(rng.integers(1, shape.max_count + 1))
        anchor = min(shape.anchor, n_bg - 1)
        ys, xs = np.nonzero(bg_labels == anchor)
        if len(ys) == 0:
            ys, xs = np.nonzero(np.ones_like(bg_labels, dtype=bool))
        for _ in range(count):
            scale = 1 + rng.uniform(-shape.size_jitter, shape.size_jitter)
            h = max(1, int(round(shape.size[0] * H * scale)))
            w = max(1, int(round(shape.size[1] * W * scale)))
            k = int(rng.integers(len(ys)))
            # anchor pixel marks the bottom centre of the shape
            y1 = min(H, int(ys[k]) + 1)
            y0 = max(0, y1 - h)
            x0 = int(np.clip(xs[k] - w // 2, 0, max(0, W - w)))
            x1 = min(W, x0 + w)
            color = np.asarray(shape.colors[int(rng.integers(len(shape.colors)))])
            color = np.clip(color + rng.normal(0, 0.05, size=3), 0, 1)
            if shape.kind == "disc":
                yy, xx = np.mgrid[y0:y1, x0:x1]
                cy, cx = (y0 + y1 - 1) / 2, (x0 + x1 - 1) / 2
                ry, rx = max((y1 - y0) / 2, 0.5), max((x1 - x0) / 2, 0.5)
                m = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            else:
                m = np.ones((y1 - y0, x1 - x0), dtype=bool)
            region_lab = labels[y0:y1, x0:x1]
            region_img = img[y0:y1, x0:x1]
            region_lab[m] = cls
            shade = color
            if shape.kind == "box":
                # darker lower band (wheels / shadow) gives boxes some structure
                rows = np.arange(y1 - y0)[:, None] >= (y1 - y0) * 0.7
                shade = np.where((rows & m)[..., None], color * 0.45, color)
                region_img[m] = shade[m]
            else:
                region_img[m] = color


def generate_synthetic_scene(spec: SyntheticWorldSpec, seed: int):
    """Return ``(image uint8 (H,W,3), labels uint8 (H,W))`` for ``seed``."""
    H, W = spec.height, spec.width
    arch = archetype_of(spec, seed)
    rng = np.random.default_rng([seed, 1])
    labels = _layout(arch, H, W, rng, spec.jitter, len(spec.backgrounds)).astype(np.uint8)
    img = _paint_background(spec, labels, rng)
    _place_shapes(spec, labels, img, rng)
    gain = 1 + rng.uniform(-spec.illumination, spec.illumination)
    tint = rng.normal(0, spec.illumination / 4, size=3)
    img = img * gain + tint + rng.normal(0, spec.noise, size=img.shape)
    image = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return image, labels


def default_split_sizes(count: int, num_tasks: int) -> dict[str, int]:
    """Share ``count`` scenes between base training, per-step labeled/unlabeled, and val."""
    weights = {"train_1": 0.4}
    for t in range(2, num_tasks + 1):
        weights[f"train_{t}"] = 0.1 / (num_tasks - 1)
        weights[f"unlabeled_{t}"] = 0.3 / (num_tasks - 1)
    weights["val"] = 0.2
    total = sum(weights.values())
    sizes = {k: int(count * w / total) for k, w in weights.items()}
    sizes["train_1"] += count - sum(sizes.values())
    return sizes


def generate_split_scenes(spec: SyntheticWorldSpec, sizes: dict[str, int], seed: int):
    """Yield ``(split, stem, scene_seed)`` in a fixed order."""
    k = 0
    for split, n in sizes.items():
        for _ in range(n):
            yield split, f"s{seed:04d}_{k:05d}", seed * 100_003 + k
            k += 1


def write_synthetic_dataset(spec: SyntheticWorldSpec, out, count: int | None = None,
                            seed: int = 0, sizes: dict[str, int] | None = None) -> dict:
    """Write images/, labels/, manifest.json and schedule.json under ``out``."""
    out = Path(out)
    schedule = schedule_for(spec)
    if sizes is None:
        if count is None:
            raise ConfigError("either count or split sizes must be given")
        sizes = default_split_sizes(count, schedule.num_tasks)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    splits: dict[str, list[str]] = {name: [] for name in sizes}
    archetypes = {}
    for split, stem, scene_seed in generate_split_scenes(spec, sizes, seed):
        image, labels = generate_synthetic_scene(spec, scene_seed)
        write_image(out / "images" / f"{stem}.png", image)
        write_labelmap(out / "labels" / f"{stem}.png", labels)
        splits[split].append(stem)
        archetypes[stem] = archetype_of(spec, scene_seed)
    manifest = {
        "version": 1,
        "splits": splits,
        "archetypes": archetypes,
        "class_names": list(schedule.class_names),
        "seed": seed,
        "world": spec.to_dict(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "schedule.json").write_text(json.dumps(schedule.to_config(), indent=2) + "\n")
    return manifest


@dataclass
class SyntheticData:
    """In-memory equivalent of a written synthetic dataset."""

    spec: SyntheticWorldSpec
    schedule: TaskSchedule
    splits: dict = field(default_factory=dict)  # name -> list[Sample]
    archetypes: dict = field(default_factory=dict)


def make_synthetic_data(spec: SyntheticWorldSpec, sizes: dict[str, int], seed: int = 0) -> SyntheticData:
    from .datamodel import Sample

    data = SyntheticData(spec, schedule_for(spec), {name: [] for name in sizes})
    for split, stem, scene_seed in generate_split_scenes(spec, sizes, seed):
        image, labels = generate_synthetic_scene(spec, scene_seed)
        data.splits[split].append(Sample(image, labels, stem))
        data.archetypes[stem] = archetype_of(spec, scene_seed)
    return data
