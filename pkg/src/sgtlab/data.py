"""Synthetic scenes, rule-based graphs, COCO ingestion and training-sample assembly."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    IMAGE_BOX,
    MASKED_BOX,
    GraphParseError,
    Layout,
    SceneGraph,
    SceneImage,
    Vocabulary,
    build_vocabulary,
    canonicalize,
    center_to_edges,
    compute_disparities,
    edges_to_center,
    graph_from_dict,
    graph_to_dict,
)
from .kernels import paint_boxes
from .runtime import ConfigError, atomic_write_text, derive_seed, seeded_rng

# canonical predicates; the opposite directions are their converse labels
PREDICATES = ("left of", "above", "inside")
PREDICATE_ALIASES = {"right of": "converse-left of", "below": "converse-above", "surrounding": "converse-inside"}

# (preferred center y, typical width, typical height) per synthetic category
CATEGORY_PRIORS: dict[str, tuple[float, float, float]] = {
    "sky": (0.15, 0.90, 0.28),
    "cloud": (0.12, 0.22, 0.10),
    "sun": (0.10, 0.10, 0.10),
    "mountain": (0.35, 0.50, 0.25),
    "tree": (0.45, 0.16, 0.40),
    "house": (0.50, 0.28, 0.28),
    "person": (0.62, 0.08, 0.25),
    "dog": (0.78, 0.12, 0.08),
    "car": (0.74, 0.24, 0.12),
    "grass": (0.88, 0.90, 0.22),
}

MIN_OBJECTS = 3
MAX_OBJECTS = 8


class DataError(ValueError):
    pass


def _prior(name: str) -> tuple[float, float, float]:
    if name in CATEGORY_PRIORS:
        return CATEGORY_PRIORS[name]
    h = hashlib.sha256(name.encode()).digest()
    return (0.1 + 0.8 * h[0] / 255, 0.08 + 0.3 * h[1] / 255, 0.08 + 0.3 * h[2] / 255)


def default_vocabulary(categories: Iterable[str] | None = None) -> Vocabulary:
    return build_vocabulary(list(categories or CATEGORY_PRIORS), list(PREDICATES), [], PREDICATE_ALIASES)


@dataclass
class GeneratorConfig:
    num_scenes: int = 64
    min_objects: int = MIN_OBJECTS
    max_objects: int = MAX_OBJECTS
    categories: dict = field(default_factory=lambda: {name: 1.0 for name in CATEGORY_PRIORS})
    raster_size: int = 64
    crop_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.categories, (list, tuple)):
            self.categories = {name: 1.0 for name in self.categories}
        if self.min_objects > self.max_objects:
            raise ConfigError(f"min_objects: {self.min_objects} exceeds max_objects {self.max_objects}")
        if self.min_objects < 1:
            raise ConfigError("min_objects: must be at least 1")
        if not self.categories or any(w < 0 for w in self.categories.values()):
            raise ConfigError("categories: need at least one category with non-negative weight")
        if sum(self.categories.values()) <= 0:
            raise ConfigError("categories: weights sum to zero")
        if self.num_scenes < 0:
            raise ConfigError("num_scenes: must be non-negative")
        if self.raster_size < 16 or self.raster_size % 8:
            raise ConfigError("raster_size: must be a multiple of 8, >= 16")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ConfigError("crop_fraction: must lie in (0, 1]")

    @classmethod
    def from_dict(cls, doc: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown generator key")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def sample_synthetic_scene(cfg: GeneratorConfig, seed: int) -> tuple[list[str], Layout]:
    """Draw category names and non-degenerate boxes inside the unit square.

    Each category has a preferred height band and size, so positions and
    relations carry information about the category.
    """
    rng = seeded_rng(seed, "scene")
    names = list(cfg.categories)
    weights = np.array([cfg.categories[n] for n in names], dtype=np.float64)
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    picks = rng.choice(len(names), size=n, p=weights / weights.sum())
    objects, boxes = [], []
    for k in picks:
        name = names[k]
        y_pref, w_pref, h_pref = _prior(name)
        w = float(np.clip(w_pref * rng.uniform(0.7, 1.3), 0.03, 0.98))
        h = float(np.clip(h_pref * rng.uniform(0.7, 1.3), 0.03, 0.98))
        x = float(rng.uniform(w / 2, 1 - w / 2))
        y = float(np.clip(y_pref + rng.normal(0.0, 0.05), h / 2, 1 - h / 2))
        objects.append(name)
        boxes.append((x, y, w, h))
    return objects[: cfg.max_objects], Layout(np.array(boxes[: cfg.max_objects]))


def _strictly_inside(a: np.ndarray, b: np.ndarray) -> bool:
    return a[0] > b[0] and a[1] > b[1] and a[2] < b[2] and a[3] < b[3]


def pair_predicate(box_a, box_b) -> tuple[str, bool]:
    """Geometric predicate for an unordered pair.

    Returns ``(predicate, a_is_subject)``. The subject is always chosen so the
    predicate is one of ``left of``, ``above`` or ``inside``; the reverse edge
    is filled later by converse closure.
    """
    ea, eb = center_to_edges(np.asarray(box_a)), center_to_edges(np.asarray(box_b))
    if _strictly_inside(ea, eb):
        return "inside", True
    if _strictly_inside(eb, ea):
        return "inside", False
    dx = box_a[0] - box_b[0]
    dy = box_a[1] - box_b[1]
    if abs(dx) >= abs(dy):
        return "left of", dx <= 0
    return "above", dy < 0


def build_rule_based_graph(objects: Sequence, layout: Layout, v: Vocabulary, add_image: bool = True) -> SceneGraph:
    """One predicate per object pair, SELF diagonal, and an IMAGE node appended last.

    ``objects`` may be category names or object indices.
    """
    labels = [v.object_index(o) if isinstance(o, str) else int(o) for o in objects]
    n = len(labels)
    if len(layout) < n:
        raise DataError("layout has fewer boxes than objects")
    rel = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        for j in range(i + 1, n):
            name, i_first = pair_predicate(layout.boxes[i], layout.boxes[j])
            s, o = (i, j) if i_first else (j, i)
            rel[s, o] = v.relation_index(name)
    return canonicalize(SceneGraph(labels, rel), v, add_image=add_image)


def with_image_box(layout: Layout, g: SceneGraph, v: Vocabulary) -> Layout:
    """Extend ``layout`` with the IMAGE node's full-canvas box when missing."""
    img = g.image_node(v)
    if img is None or len(layout) == len(g):
        return layout
    boxes = np.vstack([layout.boxes, np.array(IMAGE_BOX)[None]])
    return Layout(boxes)


# ---------------------------------------------------------------------------
# COCO-style ingestion


def _select_objects(n: int, rng: np.random.Generator, max_objects: int) -> np.ndarray:
    if n <= max_objects:
        return np.arange(n)
    return np.sort(rng.choice(n, size=max_objects, replace=False))


def ingest_coco_annotations(
    path, v: Vocabulary | None = None, seed: int = 0, min_objects: int = MIN_OBJECTS, max_objects: int = MAX_OBJECTS
) -> list[tuple[list[str], Layout]]:
    """Read a COCO-format annotation file into ``(category names, Layout)`` pairs.

    Pixel boxes become normalized center-format boxes. Images with fewer than
    ``min_objects`` annotations are dropped; larger ones keep a seeded uniform
    subset of ``max_objects``.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from None
    try:
        categories = {int(c["id"]): str(c["name"]) for c in doc["categories"]}
        images = {int(im["id"]): (float(im["width"]), float(im["height"])) for im in doc["images"]}
        annotations = doc["annotations"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed COCO document ({exc!r})") from None
    if v is not None:
        unknown = sorted(n for n in categories.values() if n not in v.object_labels)
        if unknown:
            raise DataError(f"{path}: categories not in vocabulary: {unknown[:5]}")
    per_image: dict[int, list[tuple[str, tuple]]] = {img_id: [] for img_id in images}
    for k, ann in enumerate(annotations):
        try:
            cat, img_id, bbox = int(ann["category_id"]), int(ann["image_id"]), [float(x) for x in ann["bbox"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: annotations[{k}] malformed ({exc!r})") from None
        if cat not in categories:
            raise DataError(f"{path}: annotations[{k}] has unknown category id {cat}")
        if img_id not in images:
            raise DataError(f"{path}: annotations[{k}] refers to unknown image id {img_id}")
        if len(bbox) != 4:
            raise DataError(f"{path}: annotations[{k}] bbox must have four numbers")
        if bbox[2] <= 0 or bbox[3] <= 0:
            continue
        per_image[img_id].append((categories[cat], tuple(bbox)))
    out = []
    for img_id in sorted(per_image):
        anns = per_image[img_id]
        if len(anns) < min_objects:
            continue
        width, height = images[img_id]
        keep = _select_objects(len(anns), seeded_rng(seed, f"coco/{img_id}"), max_objects)
        names, boxes = [], []
        for k in keep:
            name, (x, y, w, h) = anns[k]
            names.append(name)
            boxes.append(((x + w / 2) / width, (y + h / 2) / height, w / width, h / height))
        out.append((names, Layout(np.array(boxes))))
    return out


# ---------------------------------------------------------------------------
# scene graph expansion samples


@dataclass(frozen=True, eq=False)
class MaskedSample:
    input_graph: SceneGraph
    target_graph: SceneGraph
    object_mask: np.ndarray
    relation_mask: np.ndarray


def _structural_cells(g: SceneGraph, v: Vocabulary) -> np.ndarray:
    """Diagonal and IMAGE-node cells: fixed by construction, never masked."""
    n = len(g)
    fixed = np.eye(n, dtype=bool)
    img = g.image_node(v)
    if img is not None:
        fixed[img, :] = True
        fixed[:, img] = True
    return fixed


def make_sge_sample(g: SceneGraph, v: Vocabulary, strategy: str = "E", rate: float = 0.3, seed: int = 0) -> MaskedSample:
    """Mask a converse-closed graph for masked-graph training.

    ``E`` masks exactly one object together with its row and column of
    relations; ``M`` masks each object and each real relation independently
    with probability ``rate``. Diagonal and IMAGE-node cells stay visible.
    """
    if strategy not in ("E", "M"):
        raise ValueError(f"unknown masking strategy {strategy!r}")
    n = len(g)
    maskable = np.flatnonzero((g.objects != v.obj_image) & (g.objects != v.obj_mask))
    if len(maskable) == 0:
        raise DataError("graph has no maskable object")
    rng = seeded_rng(seed, f"mask/{strategy}")
    fixed = _structural_cells(g, v)
    obj_mask = np.zeros(n, dtype=bool)
    rel_mask = np.zeros((n, n), dtype=bool)
    if strategy == "E":
        obj_mask[maskable[rng.integers(len(maskable))]] = True
    else:
        obj_mask[maskable] = rng.random(len(maskable)) < rate
        specials = np.isin(g.relations, list(v.special_relations))
        rel_mask = (rng.random((n, n)) < rate) & ~specials & ~fixed
    rel_mask |= (obj_mask[:, None] | obj_mask[None, :]) & ~fixed
    objects = np.where(obj_mask, v.obj_mask, g.objects)
    relations = np.where(rel_mask, v.rel_mask, g.relations)
    obj_mask.setflags(write=False)
    rel_mask.setflags(write=False)
    return MaskedSample(SceneGraph(objects, relations), g, obj_mask, rel_mask)


# ---------------------------------------------------------------------------
# graph-to-layout samples


@dataclass(frozen=True)
class ImageConfig:
    raster_size: int = 64
    crop_fraction: float = 0.5
    crop_position: str = "random"


@dataclass(frozen=True, eq=False)
class G2LSample:
    graph: SceneGraph
    input_layout: Layout
    target_layout: Layout
    image: SceneImage
    novel_flags: np.ndarray
    window: tuple[float, float, float, float]


def crop_window(cfg: ImageConfig, seed: int) -> tuple[float, float, float, float]:
    side = cfg.crop_fraction
    if cfg.crop_position == "center" or side >= 1.0:
        left = top = (1.0 - side) / 2
    else:
        rng = seeded_rng(seed, "crop")
        left, top = (float(t) for t in rng.uniform(0.0, 1.0 - side, size=2))
    return (left, top, left + side, top + side)


def rasterize_boxes(labels, boxes: np.ndarray, size: int) -> np.ndarray:
    return paint_boxes(center_to_edges(boxes), labels, size, SceneImage.BACKGROUND)


def make_g2l_sample(g: SceneGraph, layout: Layout, v: Vocabulary, image_cfg: ImageConfig, seed: int) -> G2LSample:
    """Crop an observed window out of a full-canvas scene.

    Visible boxes are clipped to the window; boxes entirely outside become the
    ``(0.5, 0.5, 0, 0)`` placeholder and are flagged novel. All coordinates stay
    in the full (output) canvas frame.
    """
    if len(layout) != len(g):
        raise DataError("layout and graph differ in object count")
    window = crop_window(image_cfg, seed)
    wl, wt, wr, wb = window
    edges = center_to_edges(layout.boxes)
    clipped = np.stack(
        [np.maximum(edges[:, 0], wl), np.maximum(edges[:, 1], wt), np.minimum(edges[:, 2], wr), np.minimum(edges[:, 3], wb)],
        -1,
    )
    visible = (clipped[:, 2] > clipped[:, 0]) & (clipped[:, 3] > clipped[:, 1])
    is_image = g.objects == v.obj_image
    novel = ~visible & ~is_image
    if not np.any(visible & ~is_image):
        raise DataError("crop leaves no visible object")
    inputs = edges_to_center(clipped)
    inputs[novel] = MASKED_BOX
    inputs[is_image] = IMAGE_BOX
    target = layout.boxes.copy()
    target[is_image] = IMAGE_BOX
    paint = visible & ~is_image
    raster = rasterize_boxes(g.objects[paint], inputs[paint], image_cfg.raster_size)
    centers = (np.arange(image_cfg.raster_size) + 0.5) / image_cfg.raster_size
    mask = ((centers >= wt) & (centers < wb))[:, None] & ((centers >= wl) & (centers < wr))[None, :]
    novel.setflags(write=False)
    return G2LSample(
        graph=g,
        input_layout=Layout(inputs),
        target_layout=Layout(target),
        image=SceneImage(raster, mask.astype(np.uint8)),
        novel_flags=novel,
        window=window,
    )


def make_g2l_sample_retrying(g, layout, v, image_cfg, seed, attempts: int = 64) -> G2LSample:
    """Re-draw the crop window (deterministically) until some object is visible."""
    for k in range(attempts):
        try:
            return make_g2l_sample(g, layout, v, image_cfg, derive_seed(seed, "crop-attempt", k))
        except DataError:
            continue
    return make_g2l_sample(g, layout, v, ImageConfig(image_cfg.raster_size, image_cfg.crop_fraction, "center"), seed)


# ---------------------------------------------------------------------------
# dataset files


@dataclass
class Dataset:
    vocabulary: Vocabulary
    scenes: list[tuple[SceneGraph, Layout]]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.scenes)

    @property
    def image_config(self) -> ImageConfig:
        gen = self.meta.get("generator", {})
        return ImageConfig(int(gen.get("raster_size", 64)), float(gen.get("crop_fraction", 0.5)))


def scenes_to_dataset(scenes: Iterable[tuple[Sequence, Layout]], v: Vocabulary, meta: dict | None = None) -> Dataset:
    """Rule-based graphs (with IMAGE node) for raw ``(objects, layout)`` pairs."""
    items = []
    for objects, layout in scenes:
        g = build_rule_based_graph(objects, layout, v)
        items.append((g, with_image_box(layout, g, v)))
    return Dataset(v, items, dict(meta or {}))


def generate_dataset(cfg: GeneratorConfig, v: Vocabulary | None = None) -> Dataset:
    v = v or default_vocabulary(cfg.categories)
    scenes = (sample_synthetic_scene(cfg, derive_seed(cfg.seed, "scene", k)) for k in range(cfg.num_scenes))
    return scenes_to_dataset(scenes, v, {"generator": cfg.to_dict()})


def dataset_to_text(ds: Dataset) -> str:
    header = {"format": "sgtlab-dataset", "version": 1, "vocabulary": ds.vocabulary.to_dict(), **ds.meta}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(graph_to_dict(g, layout, ds.vocabulary), sort_keys=True) for g, layout in ds.scenes]
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path) -> None:
    atomic_write_text(path, dataset_to_text(ds))


def load_dataset(path) -> Dataset:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:1: {exc.msg}") from None
    if header.get("format") != "sgtlab-dataset":
        raise DataError(f"{path}:1: missing sgtlab-dataset header")
    v = Vocabulary.from_dict(header["vocabulary"])
    meta = {k: val for k, val in header.items() if k not in ("format", "version", "vocabulary")}
    scenes = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            g, layout = graph_from_dict(json.loads(line), v, where=f"{path}:{lineno}")
        except json.JSONDecodeError as exc:
            raise GraphParseError(f"{path}:{lineno}: {exc.msg}") from None
        if layout is None:
            raise GraphParseError(f"{path}:{lineno}: missing field 'boxes'")
        scenes.append((g, layout))
    return Dataset(v, scenes, meta)


def cached_dataset(cfg: GeneratorConfig) -> Dataset:
    """Synthetic dataset memoized under the cache directory, keyed by its config."""
    from .runtime import cache_dir

    key = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
    path = cache_dir() / f"synthetic-{key}.jsonl"
    if path.exists():
        return load_dataset(path)
    ds = generate_dataset(cfg)
    save_dataset(ds, path)
    return ds
