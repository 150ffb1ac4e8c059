"""Synthetic multi-person gaze scenes with shared-attention ground truth.

A scene is an image surrogate: a handful of persons (head box, appearance
vector, gaze target), zero or more shared-attention groups, and an
``H x W x C`` feature grid standing in for image features.  Scenes are
generated purely from ``(config, seed, index)`` so datasets are reproducible
and generation can be split across workers.

Dataset files are UTF-8 JSON lines, one scene per line.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

#: Positive-sample rates of the VSGaze sub-datasets (positive / all frames).
VIDEOCOATT_POSITIVE_FRACTION = 0.435
CHILDPLAY_POSITIVE_FRACTION = 0.073
VAT_POSITIVE_FRACTION = 0.170

# Number of appearance dims carrying gaze information: the noisy unit gaze
# direction (ux, uy) and a noisy distance along the ray.  A head crop shows
# where someone looks far better than how far, hence the separate noise levels.
GAZE_FEATURE_DIMS = 3


class ConfigError(ValueError):
    """Raised for generator configurations that cannot be satisfied."""


class SceneParseError(ValueError):
    """Raised when a serialized scene record is malformed."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class GeneratorConfig:
    image_grid: tuple[int, int] = (32, 32)
    max_persons: int = 6
    max_groups: int = 3
    positive_fraction: float = VIDEOCOATT_POSITIVE_FRACTION
    gaussian_sigma: float = 0.05
    appearance_dim: int = 16
    seed: int = 0
    grid_channels: int = 4
    # std of the angular error (radians) on the encoded gaze direction
    gaze_noise: float = 0.1
    # std of the log-normal factor on the encoded gaze distance
    depth_noise: float = 0.25
    min_persons: int = 2
    # probability that an extra group takes a member of an existing group
    share_prob: float = 0.0
    # non-member targets keep at least this distance from every other target
    min_target_separation: float = 0.12
    out_of_frame_prob: float = 0.1
    n_distractors: int = 2
    object_sigma: float = 0.03

    def validate(self) -> None:
        H, W = self.image_grid
        if H < 8 or W < 8:
            raise ConfigError(f"image_grid must be at least 8x8, got {self.image_grid}")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ConfigError(f"positive_fraction out of [0, 1]: {self.positive_fraction}")
        if self.max_persons < 2 and self.positive_fraction > 0:
            raise ConfigError("max_persons < 2 cannot form a group with positive_fraction > 0")
        if self.max_persons < 1:
            raise ConfigError("max_persons must be >= 1")
        if self.max_groups < 1:
            raise ConfigError("max_groups must be >= 1")
        if self.gaussian_sigma <= 0:
            raise ConfigError("gaussian_sigma must be positive")
        if self.appearance_dim < GAZE_FEATURE_DIMS:
            raise ConfigError(f"appearance_dim must be >= {GAZE_FEATURE_DIMS}")
        if not 1 <= self.min_persons <= self.max_persons:
            raise ConfigError("min_persons must lie in [1, max_persons]")

    @classmethod
    def childplay_like(cls, **overrides) -> "GeneratorConfig":
        """Negative-dominated preset (7.3% positives)."""
        overrides.setdefault("positive_fraction", CHILDPLAY_POSITIVE_FRACTION)
        return cls(**overrides)


@dataclass
class Person:
    head_box: tuple[float, float, float, float]
    appearance: np.ndarray
    gaze_target: tuple[float, float] | None
    in_frame: bool

    @property
    def head_center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.head_box
        return ((x0 + x1) / 2, (y0 + y1) / 2)

    def __eq__(self, other):
        if not isinstance(other, Person):
            return NotImplemented
        return (
            self.head_box == other.head_box
            and np.array_equal(self.appearance, other.appearance)
            and self.gaze_target == other.gaze_target
            and self.in_frame == other.in_frame
        )


@dataclass
class GroupAnnotation:
    members: frozenset[int]
    sa_point: tuple[float, float]
    sa_box: tuple[float, float, float, float]


@dataclass
class Scene:
    persons: list[Person]
    groups: list[GroupAnnotation]
    grid: np.ndarray
    scene_id: str

    @property
    def is_positive(self) -> bool:
        return len(self.groups) > 0

    def membership_matrix(self) -> np.ndarray:
        """Ground-truth memberships as a ``K x N`` 0/1 matrix."""
        m = np.zeros((len(self.groups), len(self.persons)))
        for k, g in enumerate(self.groups):
            m[k, sorted(g.members)] = 1.0
        return m

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.persons == other.persons
            and self.groups == other.groups
            and self.grid.shape == other.grid.shape
            and np.array_equal(self.grid, other.grid)
        )


def render_gt_heatmap(point, sigma: float, H: int, W: int) -> np.ndarray:
    """Unnormalized Gaussian centred on the cell that contains ``point``.

    The peak value is exactly 1.0.  Distances are measured between cell
    centres in normalized units, so translating the point by whole cells
    translates the map.
    """
    x, y = float(point[0]), float(point[1])
    if not (-1e-6 <= x <= 1 + 1e-6 and -1e-6 <= y <= 1 + 1e-6):
        raise ValueError(f"point {point!r} outside [0, 1]^2")
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        log.warning("clamping heatmap point %r into [0, 1]^2", point)
        x, y = min(max(x, 0.0), 1.0), min(max(y, 0.0), 1.0)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    j = min(int(x * W), W - 1)
    i = min(int(y * H), H - 1)
    cx = (j + 0.5) / W
    cy = (i + 0.5) / H
    xs = (np.arange(W) + 0.5) / W
    ys = (np.arange(H) + 0.5) / H
    d2 = (ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2
    return np.exp(-d2 / (2 * sigma**2))


def _box_overlap(a, b) -> float:
    """Intersection area over the smaller box area."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    smaller = min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))
    return inter / smaller


def _place_heads(rng: np.random.Generator, n: int) -> list[tuple[float, float, float, float]]:
    boxes: list[tuple[float, float, float, float]] = []
    while len(boxes) < n:
        s = rng.uniform(0.06, 0.12)
        cx, cy = rng.uniform(s / 2, 1 - s / 2, size=2)
        box = (float(cx - s / 2), float(cy - s / 2), float(cx + s / 2), float(cy + s / 2))
        if all(_box_overlap(box, b) <= 0.5 for b in boxes):
            boxes.append(box)
    return boxes


def _sample_far_point(rng, taken: Sequence[tuple[float, float]], min_dist: float, tries=200):
    """Uniform point in [0.05, 0.95]^2 at least ``min_dist`` from ``taken``."""
    p = None
    for _ in range(tries):
        p = tuple(float(v) for v in rng.uniform(0.05, 0.95, size=2))
        if all(math.dist(p, q) >= min_dist for q in taken):
            return p
    return p


def _sample_out_of_frame(rng, center) -> tuple[float, float]:
    # a point beyond the image border, used only to orient the gaze vector
    while True:
        p = rng.uniform(-0.6, 1.6, size=2)
        if not (0 <= p[0] <= 1 and 0 <= p[1] <= 1):
            return float(p[0]), float(p[1])


def _sa_box(point, half: float = 0.05):
    x, y = point
    return (max(0.0, x - half), max(0.0, y - half), min(1.0, x + half), min(1.0, y + half))


def _blob_map(points, sigma, H, W) -> np.ndarray:
    xs = (np.arange(W) + 0.5) / W
    ys = (np.arange(H) + 0.5) / H
    out = np.zeros((H, W))
    for x, y in points:
        d2 = (ys[:, None] - y) ** 2 + (xs[None, :] - x) ** 2
        out = np.maximum(out, np.exp(-d2 / (2 * sigma**2)))
    return out


def _smooth_noise(rng, H, W, cells=4) -> np.ndarray:
    coarse = rng.uniform(0, 1, size=(cells, cells))
    ys = np.linspace(0, cells - 1, H)
    xs = np.linspace(0, cells - 1, W)
    iy = np.clip(ys.astype(int), 0, cells - 2)
    ix = np.clip(xs.astype(int), 0, cells - 2)
    fy = (ys - iy)[:, None]
    fx = (xs - ix)[None, :]
    c00 = coarse[iy][:, ix]
    c01 = coarse[iy][:, ix + 1]
    c10 = coarse[iy + 1][:, ix]
    c11 = coarse[iy + 1][:, ix + 1]
    return (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)


def _appearance(rng, config: GeneratorConfig, center, aim) -> np.ndarray:
    dx, dy = np.asarray(aim) - np.asarray(center)
    angle = math.atan2(dy, dx) + rng.normal(0.0, config.gaze_noise)
    unit = np.array([math.cos(angle), math.sin(angle)])
    dist = math.hypot(dx, dy) * math.exp(rng.normal(0.0, config.depth_noise))
    identity = rng.normal(0.0, 1.0, size=config.appearance_dim - GAZE_FEATURE_DIMS)
    return np.concatenate([unit, [dist], identity])


def _partition_groups(rng, config: GeneratorConfig, n: int) -> list[set[int]]:
    max_k = min(config.max_groups, n // 2)
    # fewer groups are more likely: P(k) proportional to 0.5**k
    weights = np.array([0.5**k for k in range(1, max_k + 1)])
    k = int(rng.choice(np.arange(1, max_k + 1), p=weights / weights.sum()))
    order = [int(i) for i in rng.permutation(n)]
    groups = [set(order[2 * g : 2 * g + 2]) for g in range(k)]
    for person in order[2 * k :]:
        if rng.uniform() < 0.5:
            groups[int(rng.integers(k))].add(person)
    if k > 1 and config.share_prob > 0:
        for g in range(1, k):
            if rng.uniform() < config.share_prob:
                donor = sorted(groups[int(rng.integers(g))])
                groups[g].add(donor[int(rng.integers(len(donor)))])
    return groups


def generate_scene(
    config: GeneratorConfig, rng: np.random.Generator, scene_id: str = "scene"
) -> Scene:
    """Sample one scene.

    With probability ``config.positive_fraction`` the scene holds 1 to
    ``max_groups`` groups whose members all look at the group's SA point;
    everyone else looks at an independent target (or out of frame).  The
    appearance vector carries a noisy gaze direction and distance, and grid
    channel 0 marks the looked-at objects plus a few distractors.
    """
    config.validate()
    n = int(rng.integers(config.min_persons, config.max_persons + 1))
    boxes = _place_heads(rng, n)
    positive = n >= 2 and rng.uniform() < config.positive_fraction

    groups = _partition_groups(rng, config, n) if positive else []
    targets: list[tuple[float, float] | None] = [None] * n
    aims: list[tuple[float, float]] = [(0.0, 0.0)] * n
    annotations = []
    taken: list[tuple[float, float]] = []
    for members in groups:
        point = _sample_far_point(rng, taken, 2 * config.min_target_separation)
        taken.append(point)
        annotations.append(GroupAnnotation(frozenset(members), point, _sa_box(point)))
        for m in members:
            if targets[m] is None:
                targets[m] = point
                aims[m] = point

    centers = [((b[0] + b[2]) / 2, (b[1] + b[3]) / 2) for b in boxes]
    for i in range(n):
        if targets[i] is not None:
            continue
        if rng.uniform() < config.out_of_frame_prob:
            aims[i] = _sample_out_of_frame(rng, centers[i])
        else:
            point = _sample_far_point(rng, taken, config.min_target_separation)
            taken.append(point)
            targets[i] = point
            aims[i] = point
    return compose_scene(config, rng, boxes, aims, targets, annotations, scene_id)


def compose_scene(
    config: GeneratorConfig,
    rng: np.random.Generator,
    head_boxes: Sequence[tuple[float, float, float, float]],
    aims: Sequence[tuple[float, float]],
    targets: Sequence[tuple[float, float] | None],
    groups: Sequence[GroupAnnotation],
    scene_id: str = "scene",
) -> Scene:
    """Render appearance vectors and the feature grid for a laid-out scene.

    ``aims[i]`` is where person i looks (outside the unit square for an
    out-of-frame gaze); ``targets[i]`` is the in-frame target or None.
    """
    H, W = config.image_grid
    centers = [((b[0] + b[2]) / 2, (b[1] + b[3]) / 2) for b in head_boxes]
    persons = [
        Person(
            head_box=tuple(head_boxes[i]),
            appearance=_appearance(rng, config, centers[i], aims[i]),
            gaze_target=targets[i],
            in_frame=targets[i] is not None,
        )
        for i in range(len(head_boxes))
    ]

    distractors = [tuple(rng.uniform(0.05, 0.95, size=2)) for _ in range(config.n_distractors)]
    objects = [t for t in targets if t is not None] + distractors
    channels = [_blob_map(objects, config.object_sigma, H, W), _blob_map(centers, config.object_sigma, H, W)]
    while len(channels) < config.grid_channels:
        channels.append(_smooth_noise(rng, H, W))
    grid = np.round(np.stack(channels[: config.grid_channels], axis=-1), 2)
    return Scene(persons=persons, groups=list(groups), grid=grid, scene_id=scene_id)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def generate_dataset(config: GeneratorConfig, count: int, seed: int | None = None, offset: int = 0) -> list[Scene]:
    """``count`` scenes; scene ``i`` depends only on ``(config, seed, offset + i)``."""
    seed = config.seed if seed is None else seed
    return [
        generate_scene(config, scene_rng(seed, i), scene_id=f"s{seed}-{i:06d}")
        for i in range(offset, offset + count)
    ]


# -- serialization ---------------------------------------------------------


def transform_scene(scene: Scene, flip_x: bool = False, flip_y: bool = False, transpose: bool = False) -> Scene:
    """Apply a symmetry of the unit square to a scene.

    ``transpose`` (swap x and y) is applied first, then the flips.  Head
    boxes, targets, SA points, the feature grid and the encoded gaze
    direction move together, so the result is again a valid scene.
    """
    if transpose and scene.grid.shape[0] != scene.grid.shape[1]:
        raise ConfigError("transpose needs a square grid")

    def vector(v):
        x, y = (v[1], v[0]) if transpose else (v[0], v[1])
        return (-x if flip_x else x, -y if flip_y else y)

    def point(p):
        x, y = vector((p[0] - 0.5, p[1] - 0.5))
        return (x + 0.5, y + 0.5)

    def box(b):
        (xa, ya), (xb, yb) = point(b[:2]), point(b[2:])
        return (min(xa, xb), min(ya, yb), max(xa, xb), max(ya, yb))

    persons = []
    for p in scene.persons:
        app = np.array(p.appearance, dtype=float)
        app[:2] = vector(app[:2])  # the encoded gaze direction
        target = None if p.gaze_target is None else point(p.gaze_target)
        persons.append(Person(box(p.head_box), app, target, p.in_frame))
    grid = scene.grid.transpose(1, 0, 2) if transpose else scene.grid
    if flip_x:
        grid = grid[:, ::-1]
    if flip_y:
        grid = grid[::-1]
    groups = [GroupAnnotation(g.members, point(g.sa_point), box(g.sa_box)) for g in scene.groups]
    return Scene(persons, groups, np.ascontiguousarray(grid), scene.scene_id)


def scene_to_record(scene: Scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "persons": [
            {
                "head_box": list(p.head_box),
                "appearance": [float(v) for v in p.appearance],
                "gaze_target": None if p.gaze_target is None else list(p.gaze_target),
                "in_frame": p.in_frame,
            }
            for p in scene.persons
        ],
        "groups": [
            {"members": sorted(g.members), "sa_point": list(g.sa_point), "sa_box": list(g.sa_box)}
            for g in scene.groups
        ],
        "grid": {"shape": list(scene.grid.shape), "data": [float(v) for v in scene.grid.ravel()]},
    }


def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise SceneParseError(f"{where}{key}", "missing")
    return obj[key]


def _floats(value, name: str, length: int | None = None) -> tuple[float, ...]:
    if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise SceneParseError(name, "expected a list of numbers")
    if length is not None and len(value) != length:
        raise SceneParseError(name, f"expected {length} numbers, got {len(value)}")
    return tuple(float(v) for v in value)


def record_to_scene(record: dict) -> Scene:
    scene_id = _require(record, "scene_id", "")
    if not isinstance(scene_id, str):
        raise SceneParseError("scene_id", "expected a string")
    raw_persons = _require(record, "persons", "")
    if not isinstance(raw_persons, list):
        raise SceneParseError("persons", "expected a list")
    persons = []
    for i, p in enumerate(raw_persons):
        where = f"persons[{i}]."
        box = _floats(_require(p, "head_box", where), where + "head_box", 4)
        app = np.asarray(_floats(_require(p, "appearance", where), where + "appearance"))
        target = _require(p, "gaze_target", where)
        in_frame = _require(p, "in_frame", where)
        if not isinstance(in_frame, bool):
            raise SceneParseError(where + "in_frame", "expected a boolean")
        if target is not None:
            target = _floats(target, where + "gaze_target", 2)
        if (target is not None) != in_frame:
            raise SceneParseError(where + "gaze_target", "must be present iff in_frame")
        persons.append(Person(box, app, target, in_frame))
    raw_groups = _require(record, "groups", "")
    if not isinstance(raw_groups, list):
        raise SceneParseError("groups", "expected a list")
    groups = []
    for k, g in enumerate(raw_groups):
        where = f"groups[{k}]."
        members = _require(g, "members", where)
        if not isinstance(members, list) or not all(isinstance(m, int) and 0 <= m < len(persons) for m in members):
            raise SceneParseError(where + "members", "expected valid person indices")
        groups.append(
            GroupAnnotation(
                frozenset(members),
                _floats(_require(g, "sa_point", where), where + "sa_point", 2),
                _floats(_require(g, "sa_box", where), where + "sa_box", 4),
            )
        )
    raw_grid = _require(record, "grid", "")
    shape = _require(raw_grid, "shape", "grid.")
    data = _floats(_require(raw_grid, "data", "grid."), "grid.data")
    if not isinstance(shape, list) or int(np.prod(shape)) != len(data):
        raise SceneParseError("grid.shape", "does not match data length")
    grid = np.asarray(data, dtype=np.float64).reshape(shape)
    return Scene(persons=persons, groups=groups, grid=grid, scene_id=scene_id)


def encode_scene(scene: Scene) -> bytes:
    # repr-based float formatting in json round-trips float64 exactly
    return json.dumps(scene_to_record(scene), separators=(",", ":")).encode("utf-8")


def decode_scene(data: bytes | str) -> Scene:
    try:
        record = json.loads(data)
    except json.JSONDecodeError as exc:
        raise SceneParseError("<record>", f"invalid JSON: {exc}") from exc
    if not isinstance(record, dict):
        raise SceneParseError("<record>", "expected an object")
    return record_to_scene(record)


def write_scenes(scenes: Iterable[Scene], fh: IO[bytes]) -> int:
    count = 0
    for scene in scenes:
        fh.write(encode_scene(scene) + b"\n")
        count += 1
    return count


def read_scenes(fh: IO[bytes]) -> Iterator[Scene]:
    for line in fh:
        if line.strip():
            yield decode_scene(line)


def save_dataset(scenes: Iterable[Scene], path) -> int:
    with open(path, "wb") as fh:
        return write_scenes(scenes, fh)


def load_dataset(path) -> list[Scene]:
    with open(path, "rb") as fh:
        return list(read_scenes(fh))


@dataclass
class DatasetSummary:
    count: int
    positive_fraction: float
    mean_group_size: float
    mean_persons: float
    groups_per_positive: float = field(default=0.0)

    def __str__(self) -> str:
        return (
            f"scenes={self.count} positive_fraction={self.positive_fraction:.4f} "
            f"mean_group_size={self.mean_group_size:.3f} mean_persons={self.mean_persons:.3f} "
            f"groups_per_positive={self.groups_per_positive:.3f}"
        )


def summarize(scenes: Sequence[Scene]) -> DatasetSummary:
    positives = [s for s in scenes if s.is_positive]
    sizes = [len(g.members) for s in positives for g in s.groups]
    return DatasetSummary(
        count=len(scenes),
        positive_fraction=len(positives) / len(scenes) if scenes else 0.0,
        mean_group_size=float(np.mean(sizes)) if sizes else 0.0,
        mean_persons=float(np.mean([len(s.persons) for s in scenes])) if scenes else 0.0,
        groups_per_positive=len(sizes) / len(positives) if positives else 0.0,
    )
