"""Dataset structures, the task schedule, label I/O and few-shot sampling.

Label maps are plain ``uint8`` arrays of shape ``(H, W)`` holding global
class indices; ``IGNORE`` (255) marks pixels that carry no supervision.
Global class indices are assigned in schedule order, so the classes of the
base task are ``0 .. |C_1|-1``, the first increment follows, and so on.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import LabelFormatError, LoadError, SamplingError, ScheduleError, ShapeError

IGNORE = 255


@dataclass(frozen=True)
class TaskSchedule:
    """Ordered, pairwise-disjoint class sets ``C_1 .. C_T``.

    Tasks are addressed 1-based to match the usual ``t`` notation; task 1 is
    the base task.
    """

    tasks: tuple[tuple[int, ...], ...]
    class_names: tuple[str, ...]

    def __post_init__(self):
        seen: set[int] = set()
        for task in self.tasks:
            if not task:
                raise ScheduleError("empty task class set")
            dup = seen.intersection(task)
            if dup:
                raise ScheduleError(f"class index {sorted(dup)} appears in more than one task")
            seen.update(task)
        if seen != set(range(len(self.class_names))):
            raise ScheduleError("class indices must cover 0..n-1 exactly")

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.num_tasks:
            raise ScheduleError(f"task {t} outside schedule 1..{self.num_tasks}")

    def classes(self, t: int) -> tuple[int, ...]:
        self._check(t)
        return self.tasks[t - 1]

    def previous(self, t: int) -> tuple[int, ...]:
        """Union of all class sets before task ``t`` (empty for t=1)."""
        self._check(t)
        return tuple(c for task in self.tasks[: t - 1] for c in task)

    def seen(self, t: int) -> tuple[int, ...]:
        self._check(t)
        return tuple(c for task in self.tasks[:t] for c in task)

    def class_count(self, t: int) -> int:
        """Output channels a model needs after learning task ``t``."""
        return len(self.seen(t))

    def index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise ScheduleError(f"unknown class {name!r}") from None

    def to_config(self) -> dict:
        return {"tasks": [[self.class_names[c] for c in task] for task in self.tasks]}


def build_task_schedule(config) -> TaskSchedule:
    """Build a schedule from ``{"tasks": [[name, ...], ...]}``.

    Each task entry may also be a mapping with a ``classes`` list. Class
    indices are assigned in the order names are declared.
    """
    tasks_cfg = config.get("tasks") if isinstance(config, dict) else config
    if not tasks_cfg:
        raise ScheduleError("schedule config must list at least one task")
    names: list[str] = []
    tasks = []
    for entry in tasks_cfg:
        class_list = entry.get("classes") if isinstance(entry, dict) else entry
        if isinstance(class_list, str) or not class_list:
            raise ScheduleError(f"task entry {entry!r} must be a non-empty list of class names")
        idx = []
        for name in class_list:
            if name in names:
                raise ScheduleError(f"class {name!r} declared in more than one task")
            names.append(str(name))
            idx.append(len(names) - 1)
        tasks.append(tuple(idx))
    return TaskSchedule(tuple(tasks), tuple(names))


def load_schedule(path) -> TaskSchedule:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"schedule file not found: {path}")
    if path.suffix == ".toml":
        try:
            import tomllib
        except ImportError:  # python < 3.11
            import tomli as tomllib
        config = tomllib.loads(path.read_text())
    else:
        config = json.loads(path.read_text())
    return build_task_schedule(config)


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) uint8
    labels: np.ndarray  # (H, W) uint8
    stem: str = ""


@dataclass
class FewShotSet:
    items: list[Sample]
    task_index: int
    shots: int

    def __len__(self):
        return len(self.items)


@dataclass
class UnlabeledPool:
    images: list[np.ndarray]
    ids: tuple[int, ...] = ()
    stems: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.ids:
            self.ids = tuple(range(1, len(self.images) + 1))
        if not self.stems:
            self.stems = tuple(str(i) for i in self.ids)
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("pool ids must be unique")
        if not (len(self.ids) == len(self.stems) == len(self.images)):
            raise ShapeError("pool ids, stems and images differ in length")

    def __len__(self):
        return len(self.images)

    def image(self, pool_id: int) -> np.ndarray:
        return self.images[self.ids.index(pool_id)]


def validate_labelmap(labels: np.ndarray, schedule: TaskSchedule | None = None,
                      image: np.ndarray | None = None, name: str = "label map") -> None:
    if labels.ndim != 2:
        raise LabelFormatError(f"{name}: expected a single-channel label map, got shape {labels.shape}")
    if image is not None and image.shape[:2] != labels.shape:
        raise LabelFormatError(
            f"{name}: image size {image.shape[:2]} does not match label size {labels.shape}")
    if schedule is not None:
        values = np.unique(labels)
        bad = [int(v) for v in values if v != IGNORE and v >= schedule.num_classes]
        if bad:
            raise LabelFormatError(
                f"{name}: values {bad} are not declared by the schedule (0..{schedule.num_classes - 1})")


def remask(labels: np.ndarray, class_set: Iterable[int]) -> np.ndarray:
    """Copy of ``labels`` with every class outside ``class_set`` set to IGNORE."""
    keep = np.isin(labels, list(class_set))
    return np.where(keep, labels, IGNORE).astype(np.uint8)


def encode_labelmap(labels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(labels, dtype=np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def decode_labelmap(data: bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(data))
    if img.mode not in ("L", "P"):
        raise LabelFormatError(f"label PNG must be 8-bit single channel, got mode {img.mode}")
    return np.array(img, dtype=np.uint8)


def write_image(path, image: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def read_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.array(img.convert("RGB"), dtype=np.uint8)


def write_labelmap(path, labels: np.ndarray) -> None:
    Path(path).write_bytes(encode_labelmap(labels))


def read_labelmap(path) -> np.ndarray:
    return decode_labelmap(Path(path).read_bytes())


def read_manifest(path) -> dict:
    """Read a manifest mapping split names to stem lists.

    JSON manifests hold ``{"splits": {name: [stems]}}`` plus optional
    metadata. Plain-text manifests have one ``<split> <stem>`` pair per line;
    ``#`` starts a comment.
    """
    path = Path(path)
    if not path.exists():
        raise LoadError(f"manifest not found: {path}")
    text = path.read_text()
    if path.suffix == ".json":
        data = json.loads(text)
        if "splits" not in data:
            data = {"splits": data}
        return data
    splits: dict[str, list[str]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise LabelFormatError(f"{path}:{lineno}: expected '<split> <stem>'")
        splits.setdefault(parts[0], []).append(parts[1])
    return {"splits": splits}


def _stem_paths(root: Path, stem: str):
    img = root / "images" / f"{stem}.png"
    lab = root / "labels" / f"{stem}.png"
    return img, lab


def load_labeled(root, stems: Sequence[str], schedule: TaskSchedule | None = None) -> list[Sample]:
    root = Path(root)
    out = []
    for stem in stems:
        img_path, lab_path = _stem_paths(root, stem)
        for p in (img_path, lab_path):
            if not p.exists():
                raise LoadError(f"missing file for stem {stem!r}: {p}")
        image = read_image(img_path)
        labels = read_labelmap(lab_path)
        validate_labelmap(labels, schedule, image, name=stem)
        out.append(Sample(image, labels, stem))
    return out


def load_unlabeled(root, stems: Sequence[str]) -> UnlabeledPool:
    root = Path(root)
    images = []
    for stem in stems:
        img_path, _ = _stem_paths(root, stem)
        if not img_path.exists():
            raise LoadError(f"missing file for stem {stem!r}: {img_path}")
        images.append(read_image(img_path))
    return UnlabeledPool(images, tuple(range(1, len(images) + 1)), tuple(stems))


def load_dataset(root, manifest, schedule: TaskSchedule | None = None, step: int = 2,
                 labeled: str | None = None, unlabeled: str | None = None,
                 validation: str = "val"):
    """Load ``(labeled split, unlabeled pool, validation split)`` for one step.

    ``manifest`` is a path or an already-parsed manifest dict. Split names
    default to ``train_<step>``, ``unlabeled_<step>`` and ``val``; the plain
    names ``labeled`` / ``unlabeled`` are accepted as well. Missing splits
    load as empty.
    """
    root = Path(root)
    if not isinstance(manifest, dict):
        manifest = read_manifest(manifest)
    splits = manifest["splits"]

    def pick(explicit, *candidates):
        if explicit is not None:
            if explicit not in splits:
                raise LoadError(f"manifest has no split {explicit!r}")
            return splits[explicit]
        for name in candidates:
            if name in splits:
                return splits[name]
        return []

    lab = pick(labeled, f"train_{step}", "labeled")
    unl = pick(unlabeled, f"unlabeled_{step}", "unlabeled")
    val = pick(validation, "val")
    return (load_labeled(root, lab, schedule), load_unlabeled(root, unl),
            load_labeled(root, val, schedule))


def sample_few_shot(split: Sequence[Sample], class_set: Iterable[int], shots: int, seed: int,
                    task_index: int = 2) -> FewShotSet:
    """Draw ``shots`` images that show at least one pixel of ``class_set``.

    Selected label maps keep only ``class_set`` pixels; everything else
    becomes IGNORE. The draw depends only on ``seed`` and the split order.
    """
    class_set = sorted(set(class_set))
    if shots < 1:
        raise SamplingError("shots must be >= 1")
    eligible = [i for i, s in enumerate(split) if np.isin(s.labels, class_set).any()]
    if len(eligible) < shots:
        raise SamplingError(
            f"need {shots} images containing classes {class_set}, only {len(eligible)} eligible "
            f"(short by {shots - len(eligible)})")
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(eligible), size=shots, replace=False).tolist())
    items = [Sample(split[eligible[i]].image, remask(split[eligible[i]].labels, class_set),
                    split[eligible[i]].stem) for i in chosen]
    return FewShotSet(items, task_index, shots)


def base_training_set(split: Sequence[Sample], schedule: TaskSchedule) -> list[Sample]:
    """The base-task training set: every image, labels restricted to ``C_1``."""
    c1 = schedule.classes(1)
    return [Sample(s.image, remask(s.labels, c1), s.stem) for s in split]
