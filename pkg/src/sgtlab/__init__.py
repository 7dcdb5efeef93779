"""Scene Graph Transformer toolkit: scene graph expansion and graph-to-layout."""

__version__ = "0.1.0"
