"""Domain types: vocabulary with converse closure, scene graphs, layouts, images.

Relation index space layout::

    0                NO_RELATION
    1 .. M           base relations, in declaration order
    M+1 ..           "converse-<name>" for every non-self-converse base relation
    last four        SELF, IN_IMAGE, MASK  (NO_RELATION is the fourth special)

Object index space: base categories, then MASK, then IMAGE.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .kernels import pairwise_disparities

CONVERSE_PREFIX = "converse-"

NO_RELATION_NAME = "__no_relation__"
SELF_NAME = "__self__"
IN_IMAGE_NAME = "__in_image__"
MASK_NAME = "__mask__"
IMAGE_NAME = "__image__"

MASKED_BOX = (0.5, 0.5, 0.0, 0.0)
IMAGE_BOX = (0.5, 0.5, 1.0, 1.0)

DOCUMENT_VERSION = 1


class VocabularyError(ValueError):
    pass


class GraphParseError(ValueError):
    """Malformed scene-graph document. The message names the offending field."""


@dataclass(frozen=True)
class Vocabulary:
    object_labels: tuple[str, ...]
    relation_labels: tuple[str, ...]
    self_converse: frozenset[str] = frozenset()
    # alternative relation names resolved by relation_index, e.g. "surrounding" -> "converse-inside"
    aliases: tuple[tuple[str, str], ...] = ()
    # derived index tables, filled in __post_init__
    object_names: tuple[str, ...] = field(init=False, repr=False)
    relation_names: tuple[str, ...] = field(init=False, repr=False)
    converse_table: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        objects = tuple(self.object_labels) + (MASK_NAME, IMAGE_NAME)
        converse_names = tuple(
            CONVERSE_PREFIX + r for r in self.relation_labels if r not in self.self_converse
        )
        relations = (
            (NO_RELATION_NAME,)
            + tuple(self.relation_labels)
            + converse_names
            + (SELF_NAME, IN_IMAGE_NAME, MASK_NAME)
        )
        for kind, names in (("object", objects), ("relation", relations)):
            if len(set(names)) != len(names):
                dupes = sorted({n for n in names if names.count(n) > 1})
                raise VocabularyError(f"duplicate {kind} label(s): {dupes}")
        index = {name: i for i, name in enumerate(relations)}
        table = list(range(len(relations)))
        for r in self.relation_labels:
            if r in self.self_converse:
                continue
            a, b = index[r], index[CONVERSE_PREFIX + r]
            table[a], table[b] = b, a
        object.__setattr__(self, "object_names", objects)
        object.__setattr__(self, "relation_names", relations)
        object.__setattr__(self, "converse_table", tuple(table))

    # -- sizes and special indices -------------------------------------------------

    @property
    def num_objects(self) -> int:
        return len(self.object_names)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    @property
    def num_base_objects(self) -> int:
        return len(self.object_labels)

    @property
    def obj_mask(self) -> int:
        return len(self.object_labels)

    @property
    def obj_image(self) -> int:
        return len(self.object_labels) + 1

    NO_RELATION = 0

    @property
    def rel_self(self) -> int:
        return self.num_relations - 3

    @property
    def rel_in_image(self) -> int:
        return self.num_relations - 2

    @property
    def rel_mask(self) -> int:
        return self.num_relations - 1

    @property
    def special_relations(self) -> frozenset[int]:
        return frozenset((0, self.rel_self, self.rel_in_image, self.rel_mask))

    @property
    def special_objects(self) -> frozenset[int]:
        return frozenset((self.obj_mask, self.obj_image))

    # -- lookups -------------------------------------------------------------------

    def converse(self, label: int) -> int:
        return self.converse_table[label]

    def converse_array(self) -> np.ndarray:
        return np.asarray(self.converse_table, dtype=np.int64)

    def is_converse_label(self, label: int) -> bool:
        return 1 + len(self.relation_labels) <= label < self.rel_self

    def base_of(self, label: int) -> int:
        """Base relation for a converse label; identity otherwise."""
        return self.converse(label) if self.is_converse_label(label) else label

    def object_index(self, name: str) -> int:
        try:
            return self.object_names.index(name)
        except ValueError:
            raise VocabularyError(f"unknown object label {name!r}") from None

    def relation_index(self, name: str) -> int:
        name = dict(self.aliases).get(name, name)
        try:
            return self.relation_names.index(name)
        except ValueError:
            raise VocabularyError(f"unknown relation label {name!r}") from None

    def relation_display_name(self, label: int) -> str:
        """Alias for ``label`` when one is declared, else its canonical name."""
        name = self.relation_names[label]
        for alias, target in self.aliases:
            if target == name:
                return alias
        return name

    # -- documents -----------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "objects": list(self.object_labels),
            "relations": list(self.relation_labels),
            "self_converse": sorted(self.self_converse),
            "aliases": {a: t for a, t in self.aliases},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Vocabulary":
        try:
            return build_vocabulary(doc["objects"], doc["relations"], doc.get("self_converse", []), doc.get("aliases", {}))
        except KeyError as exc:
            raise VocabularyError(f"vocabulary document missing field {exc.args[0]!r}") from None


def build_vocabulary(
    objects: Sequence[str],
    relations: Sequence[str],
    self_converse: Iterable[str] = (),
    aliases: dict[str, str] | None = None,
) -> Vocabulary:
    self_converse = frozenset(self_converse)
    stray = sorted(self_converse - set(relations))
    if stray:
        raise VocabularyError(f"self_converse entries not in relations: {stray}")
    for kind, names in (("object", list(objects)), ("relation", list(relations))):
        if len(set(names)) != len(names):
            raise VocabularyError(f"duplicate {kind} names")
    v = Vocabulary(tuple(objects), tuple(relations), self_converse)
    pairs = tuple(sorted((aliases or {}).items()))
    for alias, target in pairs:
        if alias in v.relation_names:
            raise VocabularyError(f"alias {alias!r} shadows a relation label")
        if target not in v.relation_names:
            raise VocabularyError(f"alias {alias!r} points to unknown relation {target!r}")
    if len({t for _, t in pairs}) != len(pairs):
        raise VocabularyError("two aliases name the same relation")
    return Vocabulary(tuple(objects), tuple(relations), self_converse, pairs) if pairs else v


def load_vocabulary(path) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        return Vocabulary.from_dict(json.load(fh))


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SceneGraph:
    """N object-label indices plus an N x N relation-label matrix."""

    objects: np.ndarray
    relations: np.ndarray

    def __post_init__(self) -> None:
        objects = _frozen(self.objects, np.int64).reshape(-1)
        relations = _frozen(self.relations, np.int64)
        if relations.size == 0:
            relations = _frozen(np.zeros((len(objects), len(objects))), np.int64)
        object.__setattr__(self, "objects", objects)
        object.__setattr__(self, "relations", relations)

    @property
    def num_nodes(self) -> int:
        return int(self.objects.shape[0])

    def __len__(self) -> int:
        return self.num_nodes

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneGraph):
            return NotImplemented
        return np.array_equal(self.objects, other.objects) and np.array_equal(
            self.relations, other.relations
        )

    def __hash__(self) -> int:
        return hash((self.objects.tobytes(), self.relations.tobytes()))

    def replace(self, objects=None, relations=None) -> "SceneGraph":
        return SceneGraph(
            self.objects if objects is None else objects,
            self.relations if relations is None else relations,
        )

    def image_node(self, v: Vocabulary) -> int | None:
        hits = np.flatnonzero(self.objects == v.obj_image)
        return int(hits[0]) if len(hits) else None


@dataclass(frozen=True, eq=False)
class Layout:
    """Center-format boxes ``(x, y, w, h)`` in normalized canvas coordinates."""

    boxes: np.ndarray
    height_disparity: str = "ratio"

    def __post_init__(self) -> None:
        boxes = _frozen(self.boxes, np.float64).reshape(-1, 4)
        if np.any(boxes[:, 2:] < 0):
            raise ValueError("box width/height must be non-negative")
        object.__setattr__(self, "boxes", boxes)

    def __len__(self) -> int:
        return int(self.boxes.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Layout):
            return NotImplemented
        return np.array_equal(self.boxes, other.boxes)

    __hash__ = None

    @property
    def disparities(self) -> np.ndarray:
        return compute_disparities(self.boxes, self.height_disparity)[0]

    @property
    def disparity_valid(self) -> np.ndarray:
        return compute_disparities(self.boxes, self.height_disparity)[1]


@dataclass(frozen=True, eq=False)
class SceneImage:
    """Category raster (``BACKGROUND`` where empty) plus the observed-region mask."""

    raster: np.ndarray
    validity_mask: np.ndarray

    BACKGROUND = -1

    def __post_init__(self) -> None:
        raster = _frozen(self.raster, np.int32)
        mask = _frozen(self.validity_mask, np.uint8)
        if raster.shape != mask.shape or raster.ndim != 2:
            raise ValueError("raster and mask must be equal-shape 2-D grids")
        object.__setattr__(self, "raster", raster)
        object.__setattr__(self, "validity_mask", mask)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneImage):
            return NotImplemented
        return np.array_equal(self.raster, other.raster) and np.array_equal(
            self.validity_mask, other.validity_mask
        )

    __hash__ = None


# ---------------------------------------------------------------------------
# geometry helpers


def center_to_edges(boxes: np.ndarray) -> np.ndarray:
    """``(x, y, w, h)`` -> ``(left, top, right, bottom)``."""
    b = np.asarray(boxes, dtype=np.float64)
    half_w, half_h = b[..., 2] / 2, b[..., 3] / 2
    return np.stack([b[..., 0] - half_w, b[..., 1] - half_h, b[..., 0] + half_w, b[..., 1] + half_h], -1)


def edges_to_center(edges: np.ndarray) -> np.ndarray:
    e = np.asarray(edges, dtype=np.float64)
    return np.stack(
        [(e[..., 0] + e[..., 2]) / 2, (e[..., 1] + e[..., 3]) / 2, e[..., 2] - e[..., 0], e[..., 3] - e[..., 1]],
        -1,
    )


def compute_disparities(boxes, height_disparity: str = "ratio") -> tuple[np.ndarray, np.ndarray]:
    """Pairwise box disparities and their validity mask.

    ``d[i, j] = (x_i - x_j, y_i - y_j, log w_i - log w_j, log h_i - log h_j)``.
    Log terms are written as differences of logs so ``d[i, j] == -d[j, i]``
    holds exactly. ``height_disparity="log_quotient"`` switches the height term to
    ``log h_i / log h_j``. Cells touching a zero-size box keep their center
    offsets, get zero log terms, and are marked invalid.
    """
    if height_disparity not in ("ratio", "log_quotient"):
        raise ValueError(f"height_disparity must be 'ratio' or 'log_quotient', got {height_disparity!r}")
    return pairwise_disparities(boxes, height_disparity == "log_quotient")


# ---------------------------------------------------------------------------
# graph operations


def close_converse(g: SceneGraph, v: Vocabulary) -> SceneGraph:
    """Fill every empty reverse cell with the converse of its non-empty partner.

    Non-empty entries and the diagonal are left as they are, so the result does
    not depend on iteration order.
    """
    rel = g.relations
    conv = v.converse_array()
    off_diag = ~np.eye(len(g), dtype=bool)
    fill = (rel.T != v.NO_RELATION) & (rel == v.NO_RELATION) & off_diag
    if not fill.any():
        return g
    out = rel.copy()
    out[fill] = conv[rel.T[fill]]
    return g.replace(relations=out)


def strip_converse(g: SceneGraph, v: Vocabulary, cells: np.ndarray | None = None) -> SceneGraph:
    """Rewrite converse labels as their base relation on the reversed edge.

    A converse label at ``(i, j)`` is cleared; if ``(j, i)`` is empty it receives
    the base label. ``cells`` restricts which positions may be rewritten.
    """
    rel = g.relations.copy()
    n = len(g)
    allowed = np.ones((n, n), dtype=bool) if cells is None else np.asarray(cells, dtype=bool)
    for i in range(n):
        for j in range(n):
            lab = int(g.relations[i, j])
            if i == j or not allowed[i, j] or not v.is_converse_label(lab):
                continue
            rel[i, j] = v.NO_RELATION
            if rel[j, i] == v.NO_RELATION and allowed[j, i]:
                rel[j, i] = v.converse(lab)
    return g.replace(relations=rel)


def canonicalize(g: SceneGraph, v: Vocabulary, add_image: bool = True) -> SceneGraph:
    """Set SELF on the diagonal and, optionally, attach a single IMAGE node."""
    objects = list(g.objects)
    rel = np.array(g.relations, dtype=np.int64)
    img = g.image_node(v)
    if img is None and add_image:
        n = len(objects)
        objects.append(v.obj_image)
        grown = np.zeros((n + 1, n + 1), dtype=np.int64)
        grown[:n, :n] = rel
        rel = grown
        img = n
    np.fill_diagonal(rel, v.rel_self)
    if img is not None:
        for i in range(len(objects)):
            if i != img:
                rel[i, img] = v.rel_in_image
                rel[img, i] = v.rel_in_image
    return SceneGraph(objects, rel)


def validate_scene_graph(g: SceneGraph, v: Vocabulary) -> list[str]:
    """Return one diagnostic string per violated invariant (empty when valid)."""
    diags: list[str] = []
    n = len(g)
    if g.relations.shape != (n, n):
        return [f"relations shape {g.relations.shape} does not match {n} objects"]
    for i, o in enumerate(g.objects):
        if not 0 <= o < v.num_objects:
            diags.append(f"object index {int(o)} out of range at {i}")
    bad = np.argwhere((g.relations < 0) | (g.relations >= v.num_relations))
    for i, j in bad:
        diags.append(f"relation index {int(g.relations[i, j])} out of range at ({i}, {j})")
    for i in range(n):
        if g.relations[i, i] != v.rel_self:
            diags.append(f"missing SELF at {i}")
    images = np.flatnonzero(g.objects == v.obj_image)
    if len(images) > 1:
        diags.append(f"multiple IMAGE nodes at {[int(k) for k in images]}")
    if len(images) >= 1:
        img = int(images[0])
        for i in range(n):
            if i != img and g.relations[i, img] != v.rel_in_image:
                diags.append(f"missing IN_IMAGE at ({i}, {img})")
    return diags


# ---------------------------------------------------------------------------
# documents


def graph_to_dict(g: SceneGraph, layout: Layout | None = None, v: Vocabulary | None = None) -> dict:
    def obj_label(o):
        return v.object_names[o] if v is not None else int(o)

    def rel_label(r):
        return v.relation_names[r] if v is not None else int(r)

    doc: dict = {
        "version": DOCUMENT_VERSION,
        "objects": [{"id": i, "category": obj_label(int(o))} for i, o in enumerate(g.objects)],
        "relations": [
            {"subject": int(i), "predicate": rel_label(int(g.relations[i, j])), "object": int(j)}
            for i, j in zip(*np.nonzero(g.relations))
        ],
    }
    if layout is not None:
        if len(layout) != len(g):
            raise ValueError("layout and graph differ in object count")
        doc["boxes"] = [
            {"id": i, "x": float(b[0]), "y": float(b[1]), "w": float(b[2]), "h": float(b[3])}
            for i, b in enumerate(layout.boxes)
        ]
    return doc


def serialize_graph(g: SceneGraph, layout: Layout | None = None, v: Vocabulary | None = None) -> str:
    """JSON scene-graph document. Labels are names when ``v`` is given, else indices."""
    return json.dumps(graph_to_dict(g, layout, v), sort_keys=True)


def _field(entry: dict, key: str, where: str):
    if not isinstance(entry, dict) or key not in entry:
        raise GraphParseError(f"{where}: missing field {key!r}")
    return entry[key]


def graph_from_dict(doc, v: Vocabulary | None = None, where: str = "document") -> tuple[SceneGraph, Layout | None]:
    if not isinstance(doc, dict):
        raise GraphParseError(f"{where}: expected an object")
    version = _field(doc, "version", where)
    if version != DOCUMENT_VERSION:
        raise GraphParseError(f"{where}: unsupported version {version!r}")
    objects = _field(doc, "objects", where)
    relations = _field(doc, "relations", where)

    def resolve(label, lookup, ctx):
        if isinstance(label, bool):
            raise GraphParseError(f"{ctx}: invalid label {label!r}")
        if isinstance(label, int):
            return label
        if isinstance(label, str) and v is not None:
            try:
                return lookup(label)
            except VocabularyError as exc:
                raise GraphParseError(f"{ctx}: {exc}") from None
        raise GraphParseError(f"{ctx}: cannot resolve label {label!r}")

    n = len(objects)
    ids = {}
    labels = [0] * n
    for k, entry in enumerate(objects):
        ctx = f"{where}: objects[{k}]"
        oid = _field(entry, "id", ctx)
        if not isinstance(oid, int) or not 0 <= oid < n or oid in ids:
            raise GraphParseError(f"{ctx}: bad id {oid!r}")
        ids[oid] = k
        labels[oid] = resolve(_field(entry, "category", ctx), v.object_index if v else None, ctx)
    rel = np.zeros((n, n), dtype=np.int64)
    for k, entry in enumerate(relations):
        ctx = f"{where}: relations[{k}]"
        s, o = _field(entry, "subject", ctx), _field(entry, "object", ctx)
        if s not in ids or o not in ids:
            raise GraphParseError(f"{ctx}: unknown node id")
        rel[s, o] = resolve(_field(entry, "predicate", ctx), v.relation_index if v else None, ctx)
    layout = None
    if "boxes" in doc:
        boxes = np.full((n, 4), np.nan)
        for k, entry in enumerate(doc["boxes"]):
            ctx = f"{where}: boxes[{k}]"
            bid = _field(entry, "id", ctx)
            if bid not in ids:
                raise GraphParseError(f"{ctx}: unknown node id {bid!r}")
            try:
                boxes[bid] = [float(_field(entry, key, ctx)) for key in "xywh"]
            except (TypeError, ValueError):
                raise GraphParseError(f"{ctx}: non-numeric coordinate") from None
        missing = np.flatnonzero(np.isnan(boxes).any(axis=1))
        if len(missing):
            raise GraphParseError(f"{where}: boxes missing for ids {[int(m) for m in missing]}")
        try:
            layout = Layout(boxes)
        except ValueError as exc:
            raise GraphParseError(f"{where}: {exc}") from None
    return SceneGraph(labels, rel), layout


def parse_graph(text: str, v: Vocabulary | None = None) -> tuple[SceneGraph, Layout | None]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphParseError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return graph_from_dict(doc, v)
