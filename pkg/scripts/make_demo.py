"""Regenerate the bundled demo under src/sgtlab/demo/.

The demo is a cropped synthetic scene: the graph keeps only the objects
visible in the crop window (plus the IMAGE node), the boxes are their clipped
extents, and the image is the category raster of the window.
"""

import json
from pathlib import Path

import numpy as np

from sgtlab.core import Layout, serialize_graph
from sgtlab.data import GeneratorConfig, ImageConfig, build_rule_based_graph, default_vocabulary, make_g2l_sample, sample_synthetic_scene, with_image_box
from sgtlab.render import save_pgm
from sgtlab.runtime import atomic_write_text

OUT = Path(__file__).resolve().parents[1] / "src" / "sgtlab" / "demo"


def main(seed: int = 7) -> None:
    v = default_vocabulary()
    cfg = GeneratorConfig(min_objects=5, max_objects=6, seed=seed)
    names, layout = sample_synthetic_scene(cfg, seed)
    g = build_rule_based_graph(names, layout, v)
    sample = make_g2l_sample(g, with_image_box(layout, g, v), v, ImageConfig(64, 0.6, "center"), seed)
    keep = np.flatnonzero(~sample.novel_flags)
    part = g.replace(objects=g.objects[keep], relations=g.relations[np.ix_(keep, keep)])
    boxes = Layout(sample.input_layout.boxes[keep])
    OUT.mkdir(parents=True, exist_ok=True)
    doc = json.loads(serialize_graph(part, boxes, v))
    atomic_write_text(OUT / "graph.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")
    save_pgm(OUT / "image.pgm", sample.image)
    atomic_write_text(OUT / "vocabulary.json", json.dumps(v.to_dict(), indent=1, sort_keys=True) + "\n")
    print(f"demo: {len(part)} of {len(g)} nodes visible")


if __name__ == "__main__":
    main()
