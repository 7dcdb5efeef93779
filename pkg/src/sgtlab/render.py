"""Deterministic layout rendering (SVG), rasterization, and graymap export."""

from __future__ import annotations

import colorsys
import hashlib
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from .core import Layout, SceneGraph, SceneImage, Vocabulary, center_to_edges
from .kernels import paint_boxes
from .runtime import atomic_write_bytes, atomic_write_text

PGM_OUTSIDE = 255  # graymap value for cells outside the observed region


@dataclass(frozen=True)
class SvgStyle:
    canvas: int = 512
    arrows: bool = True
    labels: bool = True
    stroke_width: float = 2.0
    font_size: int = 12
    fill_opacity: float = 0.35


def category_color(name: str) -> str:
    """Stable hex color derived from a hash of the category name."""
    h = hashlib.sha256(name.encode("utf-8")).digest()
    hue = h[0] / 255.0
    sat = 0.55 + 0.35 * h[1] / 255.0
    val = 0.65 + 0.3 * h[2] / 255.0
    r, g, b = colorsys.hsv_to_rgb(hue, sat, val)
    return "#{:02x}{:02x}{:02x}".format(round(r * 255), round(g * 255), round(b * 255))


def _num(x: float) -> str:
    s = f"{x:.3f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def render_layout_svg(g: SceneGraph, layout: Layout, v: Vocabulary, style: SvgStyle | None = None) -> str:
    """One labeled rectangle per object, painted in object-list order.

    The IMAGE node is not drawn. Relation arrows run between box centers for
    every non-special, non-converse edge.
    """
    style = style or SvgStyle()
    if len(g) != len(layout):
        raise ValueError(f"graph has {len(g)} objects but the layout has {len(layout)} boxes")
    s = style.canvas
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{s}" height="{s}" viewBox="0 0 {s} {s}">',
        "<desc>paint order: object list order (later objects drawn on top)</desc>",
        '<defs><marker id="arrow" viewBox="0 0 10 10" refX="10" refY="5" markerWidth="6" markerHeight="6" orient="auto">'
        '<path d="M0,0 L10,5 L0,10 z" fill="#333333"/></marker></defs>',
        f'<rect class="canvas" x="0" y="0" width="{s}" height="{s}" fill="#ffffff" stroke="#000000"/>',
    ]
    drawn = [i for i in range(len(g)) if g.objects[i] != v.obj_image]
    edges = center_to_edges(layout.boxes) * s
    for i in drawn:
        name = v.object_names[g.objects[i]]
        color = category_color(name)
        l, t, r, b = edges[i]
        out.append(
            f'<rect class="object" data-id="{i}" data-category={quoteattr(name)} x="{_num(l)}" y="{_num(t)}" '
            f'width="{_num(r - l)}" height="{_num(b - t)}" fill="{color}" fill-opacity="{style.fill_opacity}" '
            f'stroke="{color}" stroke-width="{style.stroke_width}"/>'
        )
        if style.labels:
            out.append(
                f'<text x="{_num(l + 3)}" y="{_num(t + style.font_size)}" font-family="monospace" '
                f'font-size="{style.font_size}" fill="#000000">{escape(f"{i}:{name}")}</text>'
            )
    if style.arrows:
        special = set(v.special_relations)
        keep = set(drawn)
        centers = layout.boxes[:, :2] * s
        for i, j in zip(*np.nonzero(g.relations)):
            r = int(g.relations[i, j])
            if i == j or i not in keep or j not in keep or r in special or v.is_converse_label(r):
                continue
            (x1, y1), (x2, y2) = centers[i], centers[j]
            out.append(
                f'<line class="relation" data-predicate={quoteattr(v.relation_names[r])} x1="{_num(x1)}" y1="{_num(y1)}" '
                f'x2="{_num(x2)}" y2="{_num(y2)}" stroke="#333333" stroke-width="1" marker-end="url(#arrow)"/>'
            )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def save_svg(path, g: SceneGraph, layout: Layout, v: Vocabulary, style: SvgStyle | None = None) -> None:
    atomic_write_text(path, render_layout_svg(g, layout, v, style))


def rasterize_layout(g: SceneGraph, layout: Layout, v: Vocabulary, size: int = 64) -> SceneImage:
    """Category raster of the layout; later objects overwrite earlier ones."""
    if size < 16:
        raise ValueError("raster size must be at least 16")
    if len(g) != len(layout):
        raise ValueError(f"graph has {len(g)} objects but the layout has {len(layout)} boxes")
    b = layout.boxes
    keep = (g.objects != v.obj_image) & (b[:, 2] > 0) & (b[:, 3] > 0)
    raster = paint_boxes(center_to_edges(b[keep]), g.objects[keep], size, SceneImage.BACKGROUND)
    return SceneImage(raster, np.ones((size, size), dtype=np.uint8))


# ---------------------------------------------------------------------------
# portable graymap


def image_to_pgm(image: SceneImage) -> bytes:
    """Binary graymap: 0 background, ``c + 1`` for category ``c``, 255 outside the observed region."""
    r = image.raster.astype(np.int64)
    if r.max(initial=-1) + 1 >= PGM_OUTSIDE:
        raise ValueError("too many categories for an 8-bit graymap")
    px = np.where(r >= 0, r + 1, 0)
    px = np.where(image.validity_mask > 0, px, PGM_OUTSIDE).astype(np.uint8)
    h, w = px.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def _pgm_tokens(data: bytes):
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated graymap header")
        tokens.append(data[start:pos].decode("ascii"))
    return tokens, pos + 1


def pgm_to_image(data: bytes) -> SceneImage:
    """Inverse of :func:`image_to_pgm`; accepts binary (P5) and plain (P2) graymaps."""
    (magic, w, h, maxval), pos = _pgm_tokens(data)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"unsupported graymap maxval {maxval}")
    if magic == "P5":
        px = np.frombuffer(data[pos : pos + w * h], dtype=np.uint8)
    elif magic == "P2":
        px = np.array(data[pos:].split()[: w * h], dtype=np.int64)
    else:
        raise ValueError(f"not a graymap (magic {magic!r})")
    if px.size != w * h:
        raise ValueError("truncated graymap data")
    px = px.reshape(h, w).astype(np.int64)
    mask = px != PGM_OUTSIDE
    raster = np.where(mask & (px > 0), px - 1, SceneImage.BACKGROUND)
    return SceneImage(raster, mask.astype(np.uint8))


def save_pgm(path, image: SceneImage) -> None:
    atomic_write_bytes(path, image_to_pgm(image))


def load_pgm(path) -> SceneImage:
    return pgm_to_image(Path(path).read_bytes())


def resize_image(image: SceneImage, size: int) -> SceneImage:
    """Nearest-neighbour resampling at cell centers."""
    h, w = image.raster.shape
    if (h, w) == (size, size):
        return image
    rows = np.minimum(((np.arange(size) + 0.5) * h / size).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * w / size).astype(np.int64), w - 1)
    return SceneImage(image.raster[np.ix_(rows, cols)], image.validity_mask[np.ix_(rows, cols)])
