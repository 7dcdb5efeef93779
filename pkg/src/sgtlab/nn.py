"""Scene Graph Transformer building blocks.

Node-level attention weighs every node ``j`` for node ``i`` by an MLP of the
triplet ``h_i (+) h_j (+) e_ij``; edge-level attention weighs every edge that
shares the subject row or the object column of ``(i, j)`` by an MLP of
``e_ij (+) e_kl (+) shared node``. Attention weights are raw MLP outputs (no
softmax). Heads split the feature width into equal chunks, each with its own
score and value maps, followed by a shared linear mix.

All modules take batched tensors: node features ``(B, N, d)``, edge features
``(B, N, N, d)`` and an optional boolean node mask ``(B, N)`` for padding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F


class ShapeError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class FeatureGraph:
    """Node features ``(..., N, d)`` and edge features ``(..., N, N, d)``."""

    nodes: Tensor
    edges: Tensor

    def batched(self) -> tuple["FeatureGraph", bool]:
        if self.nodes.dim() == 2:
            return FeatureGraph(self.nodes[None], self.edges[None]), True
        return self, False

    def check(self) -> None:
        n, d = self.nodes.shape[-2:]
        if self.edges.shape[-3:] != (n, n, d):
            raise ShapeError(f"edge features {tuple(self.edges.shape)} do not match nodes {tuple(self.nodes.shape)}")


def uniform_(t: Tensor, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    with torch.no_grad():
        return t.uniform_(-bound, bound)


def init_linear_(lin: nn.Linear) -> nn.Linear:
    uniform_(lin.weight, lin.in_features)
    if lin.bias is not None:
        uniform_(lin.bias, lin.in_features)
    return lin


class MLP(nn.Sequential):
    """Two-layer perceptron with a GELU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__(init_linear_(nn.Linear(d_in, d_hidden)), nn.GELU(), init_linear_(nn.Linear(d_hidden, d_out)))


class Codebook(nn.Module):
    """Label embedding table shared by an encoder and a cosine classifier."""

    def __init__(self, num_labels: int, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_labels, dim).uniform_(-1.0, 1.0))
        self.check_not_parallel()

    @property
    def num_labels(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def check_not_parallel(self, tol: float = 1e-6) -> None:
        with torch.no_grad():
            w = F.normalize(self.weight, dim=-1)
            cos = w @ w.T
            cos.fill_diagonal_(0.0)
            if self.num_labels > 1 and cos.abs().max() > 1.0 - tol:
                raise ValueError("codebook has parallel codevectors")

    def embed(self, labels: Tensor) -> Tensor:
        return self.weight[labels]

    def classify(self, features: Tensor) -> Tensor:
        """Cosine similarity to every codevector; zero features score 0 everywhere."""
        if features.shape[-1] != self.dim:
            raise ShapeError(f"feature width {features.shape[-1]} != codebook width {self.dim}")
        fn = features.norm(dim=-1, keepdim=True)
        wn = self.weight.norm(dim=-1)
        safe = torch.where(fn > 0, fn, torch.ones_like(fn))
        cos = (features / safe) @ (self.weight / wn[:, None]).T
        return torch.where(fn > 0, cos, torch.zeros_like(cos))


def codebook_embed(cb: Codebook, label) -> Tensor:
    label = torch.as_tensor(label, dtype=torch.long)
    if (label < 0).any() or (label >= cb.num_labels).any():
        raise IndexError("label out of range")
    return cb.embed(label)


def codebook_classify(cb: Codebook, feature: Tensor) -> Tensor:
    return cb.classify(feature)


class _TripletAttention(nn.Module):
    """Per-head score MLP (3c -> hidden -> c), per-head value map (c -> c), output mix."""

    def __init__(self, d: int, n_head: int, hidden: int | None = None):
        super().__init__()
        if d % n_head:
            raise ShapeError(f"width {d} not divisible by {n_head} heads")
        c = d // n_head
        hs = hidden or c
        self.d, self.n_head, self.c = d, n_head, c
        self.score_w1 = nn.Parameter(uniform_(torch.empty(n_head, 3 * c, hs), 3 * c))
        self.score_b1 = nn.Parameter(uniform_(torch.empty(n_head, hs), 3 * c))
        self.score_w2 = nn.Parameter(uniform_(torch.empty(n_head, hs, c), hs))
        self.score_b2 = nn.Parameter(uniform_(torch.empty(n_head, c), hs))
        self.value_w = nn.Parameter(uniform_(torch.empty(n_head, c, c), c))
        self.value_b = nn.Parameter(uniform_(torch.empty(n_head, c), c))
        self.out = init_linear_(nn.Linear(d, d))

    def _split_w1(self):
        c = self.c
        w = self.score_w1
        return w[:, :c], w[:, c : 2 * c], w[:, 2 * c :]

    def _check(self, hn: Tensor, he: Tensor) -> None:
        b, n, d = hn.shape
        if d != self.d or he.shape != (b, n, n, d):
            raise ShapeError(f"expected nodes (B, N, {self.d}) and edges (B, N, N, {self.d}), got {tuple(hn.shape)} / {tuple(he.shape)}")


def _block_diag(w: Tensor) -> Tensor:
    # per-head (H, a, b) weights as one (H*a, H*b) matrix
    return torch.block_diag(*w.unbind(0))


class NodeAttention(_TripletAttention):
    def forward(self, hn: Tensor, he: Tensor, node_mask: Tensor | None = None) -> Tensor:
        self._check(hn, he)
        w_i, w_j, w_e = (_block_diag(w) for w in self._split_w1())
        pre = (hn @ w_i)[:, :, None] + (hn @ w_j)[:, None, :] + he @ w_e + self.score_b1.reshape(-1)
        s = F.gelu(pre) @ _block_diag(self.score_w2) + self.score_b2.reshape(-1)
        if node_mask is not None:
            s = s * node_mask[:, None, :, None].to(s.dtype)
        v = hn @ _block_diag(self.value_w) + self.value_b.reshape(-1)
        out = (s * v[:, None]).sum(2)
        return self.out(out)


class EdgeAttention(_TripletAttention):
    def forward(self, hn: Tensor, he: Tensor, node_mask: Tensor | None = None) -> Tensor:
        self._check(hn, he)
        b, n, _ = hn.shape
        w_ij, w_kl, w_node = (_block_diag(w) for w in self._split_w1())
        x, y, z = he @ w_ij, he @ w_kl, hn @ w_node
        v = he @ _block_diag(self.value_w) + self.value_b.reshape(-1)
        # row branch: edges (i, l), shared node i
        row = x[:, :, :, None] + y[:, :, None, :] + z[:, :, None, None]
        # column branch: edges (k, j), shared node j; k == i is masked out below
        col = x[:, :, :, None] + y.transpose(1, 2)[:, None] + z[:, None, :, None]
        pre = torch.cat([row, col], dim=3) + self.score_b1.reshape(-1)
        s = F.gelu(pre) @ _block_diag(self.score_w2) + self.score_b2.reshape(-1)
        not_self = ~torch.eye(n, dtype=torch.bool, device=hn.device)
        row_mask = torch.ones(b, n, 1, n, dtype=torch.bool, device=hn.device)
        col_mask = not_self[None, :, None, :].expand(b, n, 1, n)
        if node_mask is not None:
            row_mask = row_mask & node_mask[:, None, None, :]
            col_mask = col_mask & node_mask[:, None, None, :]
        keep = torch.cat([row_mask, col_mask], dim=3)[..., None].to(s.dtype)
        vals = torch.cat([v[:, :, None].expand(b, n, n, n, -1), v.transpose(1, 2)[:, None].expand(b, n, n, n, -1)], dim=3)
        return self.out((s * keep * vals).sum(3))


def incident_edges(i: int, j: int, n: int) -> list[tuple[int, int]]:
    """Edges sharing the subject row ``i`` or the object column ``j`` of ``(i, j)``.

    Row ``i`` first, then column ``j`` without the repeated ``(i, j)``; length ``2n - 1``.
    """
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"edge ({i}, {j}) out of range for {n} nodes")
    return [(i, l) for l in range(n)] + [(k, j) for k in range(n) if k != i]


class FeedForward(nn.Sequential):
    def __init__(self, d: int, d_ff: int):
        super().__init__(init_linear_(nn.Linear(d, d_ff)), nn.GELU(), init_linear_(nn.Linear(d_ff, d)))


class SGTLayer(nn.Module):
    """Parallel node and edge streams, each: attention, add & norm, feed-forward, add & norm."""

    def __init__(
        self,
        d: int,
        d_ff: int,
        n_head: int,
        dropout: float = 0.1,
        dropout_sites: Sequence[str] = ("attention", "ff"),
        edge_attention: bool = True,
        score_hidden: int | None = None,
    ):
        super().__init__()
        self.d = d
        self.node_attn = NodeAttention(d, n_head, score_hidden)
        self.edge_attn = EdgeAttention(d, n_head, score_hidden) if edge_attention else None
        self.node_norm1, self.node_norm2 = nn.LayerNorm(d), nn.LayerNorm(d)
        self.edge_norm1, self.edge_norm2 = nn.LayerNorm(d), nn.LayerNorm(d)
        self.node_ff, self.edge_ff = FeedForward(d, d_ff), FeedForward(d, d_ff)
        self.drop = nn.Dropout(dropout)
        self.dropout_sites = frozenset(dropout_sites)

    def _d(self, x: Tensor, site: str) -> Tensor:
        return self.drop(x) if site in self.dropout_sites else x

    def forward(self, hn: Tensor, he: Tensor, node_mask: Tensor | None = None) -> tuple[Tensor, Tensor]:
        node = self.node_norm1(hn + self._d(self.node_attn(hn, he, node_mask), "attention"))
        node = self.node_norm2(node + self._d(self.node_ff(node), "ff"))
        if self.edge_attn is not None:
            edge = self.edge_norm1(he + self._d(self.edge_attn(hn, he, node_mask), "attention"))
        else:
            edge = self.edge_norm1(he)
        edge = self.edge_norm2(edge + self._d(self.edge_ff(edge), "ff"))
        return node, edge


class SGTStack(nn.Module):
    def __init__(self, depth: int, d: int, d_ff: int, n_head: int, **layer_kwargs):
        super().__init__()
        self.layers = nn.ModuleList(SGTLayer(d, d_ff, n_head, **layer_kwargs) for _ in range(depth))

    def forward(self, hn: Tensor, he: Tensor, node_mask: Tensor | None = None) -> tuple[Tensor, Tensor]:
        for layer in self.layers:
            hn, he = layer(hn, he, node_mask)
        return hn, he


def _apply(fn, fg: FeatureGraph, node_mask):
    fg.check()
    bfg, squeeze = fg.batched()
    if node_mask is not None and node_mask.dim() == 1:
        node_mask = node_mask[None]
    return fn(bfg.nodes, bfg.edges, node_mask), squeeze


def node_attention(attn: NodeAttention, fg: FeatureGraph, node_mask: Tensor | None = None) -> Tensor:
    out, squeeze = _apply(attn, fg, node_mask)
    return out[0] if squeeze else out


def edge_attention(attn: EdgeAttention, fg: FeatureGraph, node_mask: Tensor | None = None) -> Tensor:
    out, squeeze = _apply(attn, fg, node_mask)
    return out[0] if squeeze else out


def sgt_layer(layer: SGTLayer, fg: FeatureGraph, node_mask: Tensor | None = None) -> FeatureGraph:
    (n, e), squeeze = _apply(layer, fg, node_mask)
    return FeatureGraph(n[0], e[0]) if squeeze else FeatureGraph(n, e)


def sgt_stack(layers: Sequence[SGTLayer], fg: FeatureGraph, node_mask: Tensor | None = None) -> FeatureGraph:
    if isinstance(layers, SGTStack):
        layers = list(layers.layers)
    if len(layers) == 0:
        raise ValueError("empty layer list")
    for layer in layers:
        fg = sgt_layer(layer, fg, node_mask)
    return fg


# ---------------------------------------------------------------------------
# finite-difference gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    n_checked: int
    n_total: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} max_rel_error={self.max_rel_error:.3e} (tol {self.tolerance:.0e}) "
            f"worst={self.worst} checked={self.n_checked}/{self.n_total}"
        )


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor] | Sequence[Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-4,
    max_coords: int = 10_000,
    seed: int = 0,
    abs_floor: float = 1e-6,
    stencil: int = 5,
) -> GradCheckReport:
    """Compare autograd gradients with central finite differences.

    ``stencil=5`` uses the fourth-order five-point formula, whose truncation
    error is small enough at ``step=1e-4`` that round-off stays well below the
    tolerance even for tiny gradients of large losses; ``stencil=3`` is the
    plain two-point central difference.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, abs_floor)``;
    the floor keeps coordinates with vanishing gradient from dividing by ~0.
    Above ``max_coords`` coordinates a seeded uniform subsample is checked.
    """
    if stencil not in (3, 5):
        raise ValueError("stencil must be 3 or 5")
    # (multiple of step, weight) for each symmetric pair f(x + m h) - f(x - m h)
    pairs = ((1, 0.5),) if stencil == 3 else ((1, 8 / 12), (2, -1 / 12))
    named = dict(params) if isinstance(params, dict) else {f"p{k}": p for k, p in enumerate(params)}
    tensors = list(named.values())
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {loss.item()}")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    coords = [(name, k) for name, p in named.items() for k in range(p.numel())]
    total = len(coords)
    if total > max_coords:
        rng = np.random.default_rng(seed)
        coords = [coords[k] for k in sorted(rng.choice(total, size=max_coords, replace=False))]
    grad_of = {name: (g if g is not None else torch.zeros_like(p)) for (name, p), g in zip(named.items(), grads)}
    worst, worst_name = 0.0, ""
    with torch.no_grad():
        for name, k in coords:
            flat = named[name].view(-1)
            orig = flat[k].item()
            numeric = 0.0
            for m, c in pairs:
                flat[k] = orig + m * step
                f_plus = loss_fn().item()
                flat[k] = orig - m * step
                f_minus = loss_fn().item()
                flat[k] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NonFiniteLossError(f"non-finite loss while perturbing {name}[{k}]")
                numeric += c * (f_plus - f_minus)
            numeric /= step
            analytic = grad_of[name].view(-1)[k].item()
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), abs_floor)
            if rel > worst:
                worst, worst_name = rel, f"{name}[{k}]"
    return GradCheckReport(worst, worst_name, len(coords), total, tolerance)
