"""Scene-graph-to-layout: input encoders, toy image encoder, box regressors, losses, training."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .core import IMAGE_BOX, Layout, SceneGraph, SceneImage, Vocabulary, center_to_edges, close_converse, compute_disparities
from .data import Dataset, G2LSample, ImageConfig, make_g2l_sample_retrying
from .metrics import MIoUReport, miou_report
from .nn import MLP, SGTStack, ShapeError
from .runtime import Checkpoint, MetricsLog, TrainConfig, check_param_shapes, derive_seed, seeded_rng
from .sge import DivergenceError, lr_schedule, make_checkpoint

OFFSET_SIDES = ("top", "bottom", "left", "right")


# ---------------------------------------------------------------------------
# box geometry (numpy)


def offsets_of(input_box, gt_box) -> np.ndarray:
    """Side offsets ``(top, bottom, left, right)`` taking ``input_box`` to ``gt_box``."""
    ei, eg = center_to_edges(input_box), center_to_edges(gt_box)
    d = eg - ei  # (left, top, right, bottom)
    return np.stack([d[..., 1], d[..., 3], d[..., 0], d[..., 2]], -1)


def apply_offsets(input_box, offset) -> tuple[np.ndarray, np.ndarray]:
    """Move the four sides of center-format boxes; returns ``(boxes, clamped)``.

    A side crossing its opposite collapses the extent to zero at the midpoint
    and sets the ``clamped`` flag for that box.
    """
    e = center_to_edges(input_box)
    off = np.asarray(offset, dtype=np.float64)
    left, top = e[..., 0] + off[..., 2], e[..., 1] + off[..., 0]
    right, bottom = e[..., 2] + off[..., 3], e[..., 3] + off[..., 1]
    w, h = right - left, bottom - top
    clamped = (w < 0) | (h < 0)
    out = np.stack([(left + right) / 2, (top + bottom) / 2, np.maximum(w, 0.0), np.maximum(h, 0.0)], -1)
    return out, clamped


# ---------------------------------------------------------------------------
# box geometry (torch)


def _edges(b: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    return b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2, b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2


def apply_offsets_t(input_box: Tensor, offset: Tensor) -> Tensor:
    l, t, r, b = _edges(input_box)
    l, r = l + offset[..., 2], r + offset[..., 3]
    t, b = t + offset[..., 0], b + offset[..., 1]
    return torch.stack([(l + r) / 2, (t + b) / 2, (r - l).clamp(min=0), (b - t).clamp(min=0)], -1)


def iou_t(pred: Tensor, gt: Tensor) -> Tensor:
    pl, pt, pr, pb = _edges(pred)
    gl, gt_, gr, gb = _edges(gt)
    inter = (torch.minimum(pr, gr) - torch.maximum(pl, gl)).clamp(min=0) * (torch.minimum(pb, gb) - torch.maximum(pt, gt_)).clamp(min=0)
    # areas from the same edges as the intersection, so IoU(b, b) is exactly 1
    union = (pr - pl) * (pb - pt) + (gr - gl) * (gb - gt_) - inter
    pos = union > 0
    return torch.where(pos, inter / torch.where(pos, union, torch.ones_like(union)), torch.zeros_like(union))


def _aspect_angle(w: Tensor, h: Tensor) -> Tensor:
    degenerate = (w == 0) & (h == 0)
    one = torch.ones_like(w)
    return torch.where(degenerate, torch.zeros_like(w), torch.atan2(torch.where(degenerate, one, w), torch.where(degenerate, one, h)))


def loss_ciou(pred: Tensor, gt: Tensor) -> Tensor:
    """Complete-IoU loss per box pair (no reduction).

    ``1 - IoU + rho^2 / c^2 + alpha * v`` with the adaptive trade-off
    ``alpha = v / (1 - IoU + v)``, taken as 0 when that denominator vanishes.
    Zero-area predictions give IoU 0 and finite remaining terms.
    """
    iou = iou_t(pred, gt)
    pl, pt, pr, pb = _edges(pred)
    gl, gt_, gr, gb = _edges(gt)
    cw = torch.maximum(pr, gr) - torch.minimum(pl, gl)
    ch = torch.maximum(pb, gb) - torch.minimum(pt, gt_)
    c2 = cw**2 + ch**2
    rho2 = (pred[..., 0] - gt[..., 0]) ** 2 + (pred[..., 1] - gt[..., 1]) ** 2
    dist = torch.where(c2 > 0, rho2 / torch.where(c2 > 0, c2, torch.ones_like(c2)), torch.zeros_like(c2))
    v = (4 / math.pi**2) * (_aspect_angle(gt[..., 2], gt[..., 3]) - _aspect_angle(pred[..., 2], pred[..., 3])) ** 2
    denom = 1 - iou + v
    alpha = torch.where(denom > 0, v / torch.where(denom > 0, denom, torch.ones_like(denom)), torch.zeros_like(denom))
    return 1 - iou + dist + alpha * v


def disparities_t(boxes: Tensor, height_disparity: str = "ratio") -> tuple[Tensor, Tensor]:
    """Torch twin of :func:`sgtlab.core.compute_disparities` for (B, N, 4) boxes.

    Invalid cells keep their center offsets; only the log-size terms are zeroed.
    """
    x, y, w, h = boxes.unbind(-1)
    valid_box = (w > 0) & (h > 0)
    valid = valid_box[:, :, None] & valid_box[:, None, :]
    one = torch.ones_like(w)
    lw, lh = torch.log(torch.where(valid_box, w, one)), torch.log(torch.where(valid_box, h, one))
    dh = lh[:, :, None] - lh[:, None, :]
    if height_disparity == "log_quotient":
        den = lh[:, None, :].expand_as(dh)
        ok = den != 0
        dh = torch.where(ok, lh[:, :, None] / torch.where(ok, den, torch.ones_like(den)), torch.zeros_like(dh))
        valid = valid & ok
    keep = valid.to(boxes.dtype)
    d = torch.stack([x[:, :, None] - x[:, None, :], y[:, :, None] - y[:, None, :], (lw[:, :, None] - lw[:, None, :]) * keep, dh * keep], -1)
    return d, valid


# ---------------------------------------------------------------------------
# image encoder and region pooling


def image_planes(image: SceneImage, num_categories: int) -> np.ndarray:
    """One-hot category planes, a background plane and the validity mask."""
    r = image.raster
    planes = np.zeros((num_categories + 2,) + r.shape, dtype=np.float32)
    fg = r >= 0
    rows, cols = np.nonzero(fg)
    planes[r[fg], rows, cols] = 1.0
    planes[num_categories] = ~fg
    planes[num_categories + 1] = image.validity_mask
    return planes


class ImageEncoder(nn.Module):
    """Five conv stages (3x3, BatchNorm, LeakyReLU); the first three halve the resolution."""

    def __init__(self, in_channels: int, widths: Sequence[int] = (32, 64, 64, 128, 128)):
        super().__init__()
        if len(widths) != 5:
            raise ShapeError("image encoder needs five stage widths")
        layers: list[nn.Module] = []
        c = in_channels
        for k, w in enumerate(widths):
            layers += [nn.Conv2d(c, w, 3, stride=2 if k < 3 else 1, padding=1), nn.BatchNorm2d(w), nn.LeakyReLU(0.2)]
            c = w
        self.net = nn.Sequential(*layers)
        self.out_channels = c

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] % 8 or x.shape[-2] % 8:
            raise ShapeError(f"image size {tuple(x.shape[-2:])} must be divisible by 8")
        return self.net(x)


def roi_pool_visual(feature_map: Tensor, boxes: Tensor) -> Tensor:
    """Mean of the feature cells whose centers lie inside each box.

    ``feature_map`` is (C, H, W) or (B, C, H, W); ``boxes`` is (K, 4) or
    (B, K, 4) in center format over [0, 1]^2. Boxes covering no cell center
    pool to zero.
    """
    single = feature_map.dim() == 3
    if single:
        feature_map, boxes = feature_map[None], boxes[None]
    _, _, hgt, wid = feature_map.shape
    boxes = boxes.to(feature_map.dtype)
    cy = (torch.arange(hgt, dtype=feature_map.dtype) + 0.5) / hgt
    cx = (torch.arange(wid, dtype=feature_map.dtype) + 0.5) / wid
    l, t, r, b = (e[..., None] for e in _edges(boxes))
    in_y = (cy >= t) & (cy < b)  # (B, K, H)
    in_x = (cx >= l) & (cx < r)  # (B, K, W)
    weights = (in_y[..., :, None] & in_x[..., None, :]).to(feature_map.dtype)  # (B, K, H, W)
    count = weights.sum((-2, -1))
    pooled = torch.einsum("bkhw,bchw->bkc", weights, feature_map) / count.clamp(min=1)[..., None]
    return pooled[0] if single else pooled


# ---------------------------------------------------------------------------
# model


@dataclass
class G2LPrediction:
    novel_boxes: Tensor  # (B, N, 4); zero rows for existing objects
    offsets: Tensor  # (B, N, 4) (top, bottom, left, right); zero rows for novel objects
    disparity_pred: Tensor  # (B, N, N, 4)
    novel_flags: Tensor  # (B, N) bool
    input_boxes: Tensor

    @property
    def boxes(self) -> Tensor:
        anchored = apply_offsets_t(self.input_boxes, self.offsets)
        return torch.where(self.novel_flags[..., None], self.novel_boxes, anchored)


@dataclass
class G2LBatch:
    objects: Tensor  # (B, N)
    relations: Tensor  # (B, N, N), converse-closed
    input_boxes: Tensor  # (B, N, 4)
    target_boxes: Tensor
    novel_flags: Tensor  # (B, N) bool
    image_nodes: Tensor  # (B, N) bool
    node_mask: Tensor  # (B, N) bool, False on padding
    planes: Tensor  # (B, C, R, R)

    def __len__(self) -> int:
        return self.objects.shape[0]


def collate_g2l(samples: Sequence[G2LSample], v: Vocabulary, dtype=torch.float32) -> G2LBatch:
    b = len(samples)
    n = max(len(s.graph) for s in samples)
    objects = np.zeros((b, n), dtype=np.int64)
    relations = np.zeros((b, n, n), dtype=np.int64)
    inputs = np.zeros((b, n, 4))
    targets = np.zeros((b, n, 4))
    novel = np.zeros((b, n), dtype=bool)
    image_nodes = np.zeros((b, n), dtype=bool)
    node_mask = np.zeros((b, n), dtype=bool)
    planes = []
    for k, s in enumerate(samples):
        m = len(s.graph)
        if len(s.input_layout) != m or len(s.target_layout) != m or len(s.novel_flags) != m:
            raise ShapeError("sample graph, layouts and flags disagree in length")
        if s.graph.objects.max() >= v.num_objects or s.graph.relations.max() >= v.num_relations:
            raise ValueError("label index outside the model vocabulary")
        g = close_converse(s.graph, v)
        objects[k, :m] = g.objects
        relations[k, :m, :m] = g.relations
        inputs[k, :m] = s.input_layout.boxes
        targets[k, :m] = s.target_layout.boxes
        novel[k, :m] = s.novel_flags
        image_nodes[k, :m] = g.objects == v.obj_image
        node_mask[k, :m] = True
        planes.append(image_planes(s.image, v.num_objects - 2))
    if len({p.shape for p in planes}) != 1:
        raise ShapeError("samples have different raster sizes")
    t = torch.from_numpy
    return G2LBatch(
        t(objects),
        t(relations),
        t(inputs).to(dtype),
        t(targets).to(dtype),
        t(novel),
        t(image_nodes),
        t(node_mask),
        t(np.stack(planes)).to(dtype),
    )


def node_split(d: int) -> tuple[int, int, int]:
    """Widths of (category, box, visual) parts of the node input."""
    third = d // 3
    return d - 2 * third, third, third


class G2LModel(nn.Module):
    def __init__(self, vocab: Vocabulary, cfg: TrainConfig):
        super().__init__()
        self.vocab = vocab
        self.cfg = cfg
        d = cfg.d_atten
        if d % 2:
            raise ShapeError("d_atten must be even for the edge input split")
        d_o, d_b, d_i = node_split(d)
        self.e_o = nn.Embedding(vocab.num_objects, d_o)
        self.e_b = MLP(4, d, d_b)
        self.e_i = ImageEncoder(vocab.num_objects, cfg.e_i_widths)
        self.e_i_proj = nn.Linear(self.e_i.out_channels, d_i)
        self.e_r = nn.Embedding(vocab.num_relations, d // 2)
        self.e_d = MLP(4, d, d // 2)
        self.stack = SGTStack(
            cfg.depth,
            d,
            cfg.d_ff,
            cfg.n_head,
            dropout=cfg.dropout,
            dropout_sites=cfg.dropout_sites,
            edge_attention=cfg.edge_attention,
        )
        self.r_novel = MLP(d, d, 4)
        self.r_offset = MLP(d, d, 4)
        self.r_d = MLP(d, d, 4)
        nn.init.zeros_(self.r_offset[-1].weight)
        nn.init.zeros_(self.r_offset[-1].bias)

    def visual_features(self, batch: G2LBatch, zero_image: bool = False) -> Tensor:
        b, n = batch.objects.shape
        if zero_image or not self.cfg.use_image:
            return torch.zeros(b, n, self.e_i_proj.out_features, dtype=batch.input_boxes.dtype)
        fmap = self.e_i(batch.planes)
        pooled = roi_pool_visual(fmap, batch.input_boxes)
        empty = (batch.input_boxes[..., 2] * batch.input_boxes[..., 3] == 0) | batch.image_nodes
        return self.e_i_proj(pooled) * (~empty)[..., None].to(pooled.dtype)

    def forward(self, batch: G2LBatch, zero_image: bool = False) -> G2LPrediction:
        if batch.objects.max() >= self.vocab.num_objects or batch.relations.max() >= self.vocab.num_relations:
            raise ValueError("label index outside the model vocabulary")
        hn = torch.cat([self.e_o(batch.objects), self.e_b(batch.input_boxes), self.visual_features(batch, zero_image)], -1)
        disp, _ = disparities_t(batch.input_boxes, self.cfg.height_disparity)
        he = torch.cat([self.e_r(batch.relations), self.e_d(disp)], -1)
        hn, he = self.stack(hn, he, batch.node_mask)
        novel = batch.novel_flags & batch.node_mask
        existing = ~batch.novel_flags & batch.node_mask
        novel_boxes = hn.new_zeros(hn.shape[:2] + (4,))
        offsets = hn.new_zeros(hn.shape[:2] + (4,))
        if novel.any():
            novel_boxes = novel_boxes.index_put((novel,), torch.sigmoid(self.r_novel(hn[novel])))
        if existing.any():
            offsets = offsets.index_put((existing,), self.r_offset(hn[existing]))
        return G2LPrediction(novel_boxes, offsets, self.r_d(he), batch.novel_flags, batch.input_boxes)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "G2LModel":
        cfg = TrainConfig.from_dict(ckpt.config)
        model = cls(ckpt.vocabulary, cfg)
        expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
        check_param_shapes(expected, ckpt)
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in ckpt.params.items()})
        return model.eval()


def g2l_forward(model: G2LModel, sample: G2LSample | G2LBatch, zero_image: bool = False) -> G2LPrediction:
    batch = collate_g2l([sample], model.vocab) if isinstance(sample, G2LSample) else sample
    return model(batch, zero_image)


# ---------------------------------------------------------------------------
# loss


def loss_g2l(pred: G2LPrediction, batch: G2LBatch, ciou_weight: float = 1.0, disparity_weight: float = 1.0, height_disparity: str = "ratio") -> Tensor:
    """cIoU over objects plus L1 over valid off-diagonal disparities.

    Existing objects are scored through their offset-adjusted input box, novel
    ones through the regressed box. The IMAGE node and padding are left out.
    Summed per graph, averaged over the batch.
    """
    real = batch.node_mask & ~batch.image_nodes
    box_term = (loss_ciou(pred.boxes, batch.target_boxes) * real).sum()
    d_gt, valid = disparities_t(batch.target_boxes, height_disparity)
    n = batch.objects.shape[1]
    cells = valid & real[:, :, None] & real[:, None, :] & ~torch.eye(n, dtype=torch.bool)
    disp_term = ((pred.disparity_pred - d_gt).abs().sum(-1) * cells).sum()
    return (ciou_weight * box_term + disparity_weight * disp_term) / len(batch)


# ---------------------------------------------------------------------------
# training and evaluation


def g2l_samples(dataset: Dataset, cfg: TrainConfig) -> list[G2LSample]:
    """One seeded crop per scene; the dataset is fixed for the whole run."""
    image_cfg = ImageConfig(cfg.raster_size, cfg.crop_fraction)
    return [
        make_g2l_sample_retrying(g, layout, dataset.vocabulary, image_cfg, derive_seed(cfg.seed, "g2l-sample", k))
        for k, (g, layout) in enumerate(dataset.scenes)
    ]


def predicted_layouts(model: G2LModel, samples: Sequence[G2LSample], zero_image: bool = False, batch_size: int = 64) -> list[Layout]:
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            batch = collate_g2l(chunk, model.vocab)
            boxes = model(batch, zero_image).boxes.double().numpy()
            for k, s in enumerate(chunk):
                b = boxes[k, : len(s.graph)].copy()
                b[s.graph.objects == model.vocab.obj_image] = IMAGE_BOX
                out.append(Layout(b, model.cfg.height_disparity))
    model.train(was_training)
    return out


def evaluate_g2l(model: G2LModel, samples: Sequence[G2LSample], zero_image: bool = False) -> MIoUReport:
    layouts = predicted_layouts(model, samples, zero_image)
    v = model.vocab
    pred = np.concatenate([l.boxes for l in layouts])
    gt = np.concatenate([s.target_layout.boxes for s in samples])
    novel = np.concatenate([s.novel_flags for s in samples])
    include = np.concatenate([s.graph.objects != v.obj_image for s in samples])
    return miou_report(pred, gt, novel, include)


@dataclass
class G2LTrainResult:
    model: G2LModel
    checkpoint: Checkpoint
    log: MetricsLog
    samples: list[G2LSample]


def train_g2l(cfg: TrainConfig, dataset: Dataset, log: MetricsLog | None = None) -> G2LTrainResult:
    """Adam with the shared learning-rate schedule on a fixed set of cropped samples."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if cfg.task != "g2l":
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "task": "g2l"})
    log = log or MetricsLog()
    samples = g2l_samples(dataset, cfg)
    torch.manual_seed(derive_seed(cfg.seed, "init"))
    model = G2LModel(dataset.vocabulary, cfg)
    torch.manual_seed(derive_seed(cfg.seed, "dropout"))
    rng = seeded_rng(cfg.seed, "data")
    opt = torch.optim.Adam(model.parameters(), lr=cfg.gamma)
    model.train()
    for step in range(cfg.total_steps):
        lr = lr_schedule(step, cfg.total_steps, cfg.gamma)
        for group in opt.param_groups:
            group["lr"] = lr
        picks = rng.integers(len(samples), size=cfg.batch_size)
        batch = collate_g2l([samples[k] for k in picks], model.vocab)
        loss = loss_g2l(model(batch), batch, cfg.ciou_weight, cfg.disparity_weight, cfg.height_disparity)
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise DivergenceError(f"non-finite loss {loss_value} at step {step} (lr {lr:.3g})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.total_steps:
            rep = evaluate_g2l(model, samples)
            log.write({"step": done, "loss": loss_value, "lr": lr, **rep.to_dict()})
    model.eval()
    ckpt = make_checkpoint(model, cfg, cfg.total_steps, opt, rng)
    return G2LTrainResult(model, ckpt, log, samples)


@torch.no_grad()
def predict_layout(model: G2LModel, g: SceneGraph, partial: Layout, image: SceneImage) -> Layout:
    """Complete a partial layout: offsets for observed boxes, regression for placeholders.

    An object counts as novel when its input box has zero area; the IMAGE node
    keeps the full-canvas box.
    """
    v = model.vocab
    if len(partial) != len(g):
        raise ValueError(f"graph has {len(g)} objects but the layout has {len(partial)} boxes")
    if image.raster.shape[0] != model.cfg.raster_size or image.raster.shape[1] != model.cfg.raster_size:
        raise ValueError(f"image is {image.raster.shape}, model expects {model.cfg.raster_size}x{model.cfg.raster_size}")
    is_image = g.objects == v.obj_image
    novel = (partial.boxes[:, 2] * partial.boxes[:, 3] == 0) & ~is_image
    inputs = partial.boxes.copy()
    inputs[is_image] = IMAGE_BOX
    sample = G2LSample(g, Layout(inputs), Layout(inputs), image, novel, (0.0, 0.0, 1.0, 1.0))
    return predicted_layouts(model, [sample])[0]


# ---------------------------------------------------------------------------
# finite-difference check


def gradient_suite(seed: int = 0, tolerance: float = 1e-4, n_objects: int = 3) -> dict:
    """Check ``loss_g2l`` on a tiny double-precision model (d = 8, N = n_objects + IMAGE).

    BatchNorm runs on its running statistics (eval mode) so the loss is a
    smooth function of every parameter; dropout is off.
    """
    from .data import DataError, build_rule_based_graph, default_vocabulary, make_g2l_sample, with_image_box
    from .nn import gradient_check

    v = default_vocabulary()
    rng = seeded_rng(seed, "gradcheck")
    cfg = TrainConfig(task="g2l", d_atten=8, d_ff=16, n_head=2, depth=2, dropout=0.0, raster_size=16, e_i_widths=(4, 4, 4, 4, 4), seed=seed)
    torch.manual_seed(derive_seed(seed, "gradcheck-init"))
    model = G2LModel(v, cfg).double().eval()
    # random, nonzero offset-head output so the existing-object branch is exercised away from zero
    nn.init.normal_(model.r_offset[-1].weight, std=0.1)
    nn.init.normal_(model.r_offset[-1].bias, std=0.05)
    names = [v.object_labels[k] for k in rng.integers(v.num_base_objects, size=n_objects)]
    boxes = np.column_stack([rng.uniform(0.25, 0.75, (n_objects, 2)), rng.uniform(0.1, 0.4, (n_objects, 2))])
    g = build_rule_based_graph(names, Layout(boxes), v)
    layout = with_image_box(Layout(boxes), g, v)
    for k in range(64):
        try:
            sample = make_g2l_sample(g, layout, v, ImageConfig(cfg.raster_size, 0.6), derive_seed(seed, "gradcheck-crop", k))
        except DataError:
            continue
        if sample.novel_flags.any():
            break
    batch = collate_g2l([sample], v, dtype=torch.float64)
    params = dict(model.named_parameters())
    fn = lambda: loss_g2l(model(batch), batch, cfg.ciou_weight, cfg.disparity_weight, cfg.height_disparity)
    return {"loss_g2l": gradient_check(fn, params, tolerance, seed=seed)}
