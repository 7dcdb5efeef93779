"""Scene graph expansion: model, losses, learning-rate schedule, training, inference."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .core import SceneGraph, Vocabulary, close_converse, strip_converse, validate_scene_graph
from .data import MAX_OBJECTS, Dataset, MaskedSample, make_sge_sample
from .metrics import RankReport, rank_metrics
from .nn import MLP, Codebook, NonFiniteLossError, SGTStack
from .runtime import Checkpoint, MetricsLog, TrainConfig, check_param_shapes, derive_seed, rng_state, seeded_rng

EVAL_SEED = 20240601


class DivergenceError(NonFiniteLossError):
    pass


@dataclass
class SgePrediction:
    object_scores: Tensor  # (B, N, V_O) cosine scores
    relation_scores: Tensor  # (B, N, N, V_R)
    node_features: Tensor
    edge_features: Tensor
    logit_scale: float

    @property
    def object_logits(self) -> Tensor:
        return self.logit_scale * self.object_scores

    @property
    def relation_logits(self) -> Tensor:
        return self.logit_scale * self.relation_scores


@dataclass
class SgeBatch:
    objects: Tensor  # masked input labels (B, N)
    relations: Tensor  # (B, N, N)
    target_objects: Tensor
    target_relations: Tensor
    object_mask: Tensor  # (B, N) bool, True where masked
    relation_mask: Tensor  # (B, N, N) bool
    node_mask: Tensor  # (B, N) bool, False on padding

    def __len__(self) -> int:
        return self.objects.shape[0]


def collate_sge(samples: Sequence[MaskedSample]) -> SgeBatch:
    b = len(samples)
    n = max(len(s.input_graph) for s in samples)
    objects = np.zeros((b, n), dtype=np.int64)
    relations = np.zeros((b, n, n), dtype=np.int64)
    t_objects = np.zeros((b, n), dtype=np.int64)
    t_relations = np.zeros((b, n, n), dtype=np.int64)
    obj_mask = np.zeros((b, n), dtype=bool)
    rel_mask = np.zeros((b, n, n), dtype=bool)
    node_mask = np.zeros((b, n), dtype=bool)
    for k, s in enumerate(samples):
        m = len(s.input_graph)
        objects[k, :m] = s.input_graph.objects
        relations[k, :m, :m] = s.input_graph.relations
        t_objects[k, :m] = s.target_graph.objects
        t_relations[k, :m, :m] = s.target_graph.relations
        obj_mask[k, :m] = s.object_mask
        rel_mask[k, :m, :m] = s.relation_mask
        node_mask[k, :m] = True
    t = torch.from_numpy
    return SgeBatch(t(objects), t(relations), t(t_objects), t(t_relations), t(obj_mask), t(rel_mask), t(node_mask))


class SGEModel(nn.Module):
    """Codebook encoders/classifiers, converse converter, and an SGT stack."""

    def __init__(self, vocab: Vocabulary, cfg: TrainConfig):
        super().__init__()
        self.vocab = vocab
        self.cfg = cfg
        d = cfg.d_atten
        self.obj_codebook = Codebook(vocab.num_objects, d)
        self.rel_codebook = Codebook(vocab.num_relations, d)
        self.converter = MLP(d, d, d)
        self.stack = SGTStack(
            cfg.depth,
            d,
            cfg.d_ff,
            cfg.n_head,
            dropout=cfg.dropout,
            dropout_sites=cfg.dropout_sites,
            edge_attention=cfg.edge_attention,
        )
        self.register_buffer("converse_index", torch.as_tensor(vocab.converse_table, dtype=torch.long), persistent=False)

    @property
    def logit_scale(self) -> float:
        return self.cfg.logit_scale

    def forward(self, objects: Tensor, relations: Tensor, node_mask: Tensor | None = None) -> SgePrediction:
        if objects.max() >= self.vocab.num_objects or relations.max() >= self.vocab.num_relations:
            raise ValueError("label index outside the model vocabulary")
        hn = self.obj_codebook.embed(objects)
        he = self.rel_codebook.embed(relations)
        hn, he = self.stack(hn, he, node_mask)
        return SgePrediction(self.obj_codebook.classify(hn), self.rel_codebook.classify(he), hn, he, self.logit_scale)

    def convert(self, relation_labels: Tensor) -> Tensor:
        """Converse-relation logits ``C_R(E_C(E_R(y)))`` for each label."""
        return self.logit_scale * self.rel_codebook.classify(self.converter(self.rel_codebook.embed(relation_labels)))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "SGEModel":
        cfg = TrainConfig.from_dict(ckpt.config)
        model = cls(ckpt.vocabulary, cfg)
        expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
        check_param_shapes(expected, ckpt)
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ckpt.params.items()})
        return model.eval()


def sge_forward(model: SGEModel, sample: MaskedSample | SgeBatch) -> SgePrediction:
    batch = collate_sge([sample]) if isinstance(sample, MaskedSample) else sample
    return model(batch.objects, batch.relations, batch.node_mask)


# ---------------------------------------------------------------------------
# losses


def relation_class_weights(v: Vocabulary, no_relation_weight: float = 0.05, dtype=torch.float32) -> Tensor:
    w = torch.ones(v.num_relations, dtype=dtype)
    w[v.NO_RELATION] = no_relation_weight
    return w


def loss_cells(batch: SgeBatch, policy: str = "exclude") -> Tensor:
    """Relation cells that enter the loss: real nodes, minus masked-masked pairs under ``exclude``."""
    valid = batch.node_mask[:, :, None] & batch.node_mask[:, None, :]
    if policy == "exclude":
        n = batch.objects.shape[1]
        off_diag = ~torch.eye(n, dtype=torch.bool)
        both = batch.object_mask[:, :, None] & batch.object_mask[:, None, :] & off_diag
        valid = valid & ~both
    return valid


def loss_sge(pred: SgePrediction, batch: SgeBatch, rel_weights: Tensor | None = None, policy: str = "exclude") -> Tensor:
    """Weighted cross-entropy over every object and every relation cell.

    Summed within a graph, averaged over the batch. ``rel_weights`` is the
    per-label weight vector (``None`` means all ones).
    """
    obj_ce = F.cross_entropy(pred.object_logits.flatten(0, 1), batch.target_objects.flatten(), reduction="none")
    obj_term = (obj_ce.view_as(batch.target_objects) * batch.node_mask).sum()
    if rel_weights is not None:
        rel_weights = rel_weights.to(pred.relation_logits.dtype)
    rel_ce = F.cross_entropy(
        pred.relation_logits.flatten(0, 2), batch.target_relations.flatten(), weight=rel_weights, reduction="none"
    )
    rel_term = (rel_ce.view_as(batch.target_relations) * loss_cells(batch, policy)).sum()
    return (obj_term + rel_term) / len(batch)


def loss_conv(model: SGEModel) -> Tensor:
    """Converse classification loss summed over the whole relation label space."""
    labels = torch.arange(model.vocab.num_relations)
    return F.cross_entropy(model.convert(labels), model.converse_index, reduction="sum")


def loss_sym(pred: SgePrediction, batch: SgeBatch, model: SGEModel, mode: str = "hard", policy: str = "exclude") -> Tensor:
    """Skew-symmetry loss: the converse of the prediction at (i, j) should be the target at (j, i).

    ``hard`` feeds the detached argmax label through ``E_R``; ``soft`` feeds the
    output edge feature straight into the converter.
    """
    if mode == "hard":
        predicted = pred.relation_scores.argmax(-1).detach()
        logits = model.convert(predicted)
    elif mode == "soft":
        logits = model.logit_scale * model.rel_codebook.classify(model.converter(pred.edge_features))
    else:
        raise ValueError(f"unknown sym mode {mode!r}")
    target = batch.target_relations.transpose(1, 2)
    ce = F.cross_entropy(logits.flatten(0, 2), target.flatten(), reduction="none").view_as(target)
    return (ce * loss_cells(batch, policy)).sum() / len(batch)


def total_loss(model: SGEModel, pred: SgePrediction, batch: SgeBatch, rel_weights: Tensor | None = None) -> Tensor:
    cfg = model.cfg
    loss = loss_sge(pred, batch, rel_weights, cfg.mask_pair_policy)
    if cfg.lambda_conv:
        loss = loss + cfg.lambda_conv * loss_conv(model)
    if cfg.lambda_sym:
        loss = loss + cfg.lambda_sym * loss_sym(pred, batch, model, cfg.sym_mode, cfg.mask_pair_policy)
    return loss


# ---------------------------------------------------------------------------
# schedule


WARMUP_DIVISOR = 10  # warm-up lasts total / 10 steps
HOLD_DIVISOR = 1000  # then the peak is held for total / 1000 steps
FINAL_LR_RATIO = 2.5e-5


def lr_schedule(step: float, total_steps: int, gamma: float) -> float:
    """Warm up linearly from gamma/10 to gamma over the first tenth of training,
    hold for a thousandth, then decay exponentially to 2.5e-5 * gamma at the end."""
    if total_steps < 10:
        raise ValueError("total_steps must be at least 10")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = total_steps / WARMUP_DIVISOR
    hold_end = warm + total_steps / HOLD_DIVISOR
    start = gamma / 10
    if step < warm:
        return start + (gamma - start) * (step / warm)
    if step <= hold_end:
        return gamma
    if step == total_steps:
        return FINAL_LR_RATIO * gamma
    frac = (step - hold_end) / (total_steps - hold_end)
    return gamma * FINAL_LR_RATIO**frac


# ---------------------------------------------------------------------------
# evaluation


def prepare_graphs(dataset: Dataset) -> list[SceneGraph]:
    return [close_converse(g, dataset.vocabulary) for g, _ in dataset.scenes]


def relation_exclusions(v: Vocabulary, exclude_specials: bool = True) -> set[int]:
    return set(v.special_relations) if exclude_specials else {v.NO_RELATION}


def label_candidates(v: Vocabulary, exclude_specials: bool = True) -> tuple[list[int] | None, list[int] | None]:
    """Competing labels for (objects, relations); ``None`` means every label.

    Special labels never appear as evaluation targets, so by default they do
    not compete either.
    """
    if not exclude_specials:
        return None, None
    objects = [k for k in range(v.num_objects) if k not in v.special_objects]
    relations = [k for k in range(v.num_relations) if k not in v.special_relations]
    return objects, relations


@torch.no_grad()
def evaluate_sge(
    model: SGEModel,
    graphs: Sequence[SceneGraph],
    strategy: str = "E",
    rate: float = 0.3,
    seed: int = EVAL_SEED,
    exclude_specials: bool = True,
    batch_size: int = 64,
) -> dict[str, RankReport | None]:
    """Rank metrics over masked objects and masked relation cells."""
    was_training = model.training
    model.eval()
    v = model.vocab
    obj_scores, obj_targets, rel_scores, rel_targets = [], [], [], []
    for start in range(0, len(graphs), batch_size):
        chunk = graphs[start : start + batch_size]
        samples = [make_sge_sample(g, v, strategy, rate, derive_seed(seed, "eval", start + k)) for k, g in enumerate(chunk)]
        batch = collate_sge(samples)
        pred = model(batch.objects, batch.relations, batch.node_mask)
        om = batch.object_mask & batch.node_mask
        obj_scores.append(pred.object_scores[om].double().numpy())
        obj_targets.append(batch.target_objects[om].numpy())
        rm = batch.relation_mask & batch.node_mask[:, :, None] & batch.node_mask[:, None, :]
        rel_scores.append(pred.relation_scores[rm].double().numpy())
        rel_targets.append(batch.target_relations[rm].numpy())
    model.train(was_training)
    out: dict[str, RankReport | None] = {}
    obj_cands, rel_cands = label_candidates(v, exclude_specials)
    for name, scores, targets, excl, cands in (
        ("objects", obj_scores, obj_targets, (), obj_cands),
        ("relations", rel_scores, rel_targets, relation_exclusions(v, exclude_specials), rel_cands),
    ):
        try:
            out[name] = rank_metrics(np.concatenate(scores), np.concatenate(targets), exclude=excl, ks=(1, 5), candidates=cands)
        except ValueError:
            out[name] = None
    return out


def _metrics_record(step: int, loss: float, lr: float, reports: dict) -> dict:
    obj, rel = reports.get("objects"), reports.get("relations")
    return {
        "step": step,
        "loss": float(loss),
        "obj_hit1": obj.hits[1] if obj else None,
        "rel_hit1": rel.hits[1] if rel else None,
        "ravg_obj": obj.ravg if obj else None,
        "ravg_rel": rel.ravg if rel else None,
        "lr": lr,
    }


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: nn.Module
    checkpoint: Checkpoint
    log: MetricsLog


def make_checkpoint(model: nn.Module, cfg: TrainConfig, step: int, optimizer=None, rng=None, extra=None) -> Checkpoint:
    return Checkpoint(
        task=cfg.task,
        config=cfg.to_dict(),
        vocabulary=model.vocab,
        params={k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()},
        step=step,
        optimizer=optimizer.state_dict() if optimizer is not None else None,
        rng=rng_state(rng) if rng is not None else {},
        torch_rng=torch.get_rng_state().numpy().copy(),
        extra=extra or {},
    )


def train_sge(cfg: TrainConfig, dataset: Dataset, log: MetricsLog | None = None, eval_graphs=None) -> TrainResult:
    """Adam on ``loss_sge + lambda_conv * loss_conv + lambda_sym * loss_sym``.

    Every random draw derives from ``cfg.seed``: parameter init, batch choice,
    masks and dropout. Evaluation runs every ``cfg.eval_every`` steps and at the
    end, on ``eval_graphs`` (default: the training graphs).
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if cfg.task != "sge":
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "task": "sge"})
    log = log or MetricsLog()
    v = dataset.vocabulary
    graphs = prepare_graphs(dataset)
    eval_graphs = graphs if eval_graphs is None else eval_graphs
    torch.manual_seed(derive_seed(cfg.seed, "init"))
    model = SGEModel(v, cfg)
    torch.manual_seed(derive_seed(cfg.seed, "dropout"))
    rng = seeded_rng(cfg.seed, "data")
    opt = torch.optim.Adam(model.parameters(), lr=cfg.gamma)
    weights = relation_class_weights(v, cfg.no_relation_weight)
    model.train()
    loss_value = float("nan")
    for step in range(cfg.total_steps):
        lr = lr_schedule(step, cfg.total_steps, cfg.gamma)
        for group in opt.param_groups:
            group["lr"] = lr
        picks = rng.integers(len(graphs), size=cfg.batch_size)
        samples = [make_sge_sample(graphs[k], v, cfg.strategy, cfg.mask_rate, int(rng.integers(2**62))) for k in picks]
        batch = collate_sge(samples)
        pred = model(batch.objects, batch.relations, batch.node_mask)
        loss = total_loss(model, pred, batch, weights)
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise DivergenceError(f"non-finite loss {loss_value} at step {step} (lr {lr:.3g})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.total_steps:
            log.write(_metrics_record(done, loss_value, lr, evaluate_sge(model, eval_graphs, cfg.strategy, cfg.mask_rate)))
    model.eval()
    ckpt = make_checkpoint(model, cfg, cfg.total_steps, opt, rng)
    return TrainResult(model, ckpt, log)


# ---------------------------------------------------------------------------
# inference


@torch.no_grad()
def expand_graph(model: SGEModel, g: SceneGraph, n_new: int, max_objects: int = MAX_OBJECTS) -> SceneGraph:
    """Append ``n_new`` masked nodes and fill them in with argmax predictions.

    Existing labels are copied verbatim. New cells are predicted on the
    converse-closed graph and the converse labels among them are mapped back
    to base relations on the reversed edge.
    """
    v = model.vocab
    if n_new < 0:
        raise ValueError("n_new must be non-negative")
    if n_new == 0:
        return g
    diags = validate_scene_graph(g, v)
    if diags:
        raise ValueError(f"invalid input graph: {diags[0]}")
    n_real = int(np.sum(g.objects != v.obj_image))
    if n_real + n_new > max_objects:
        raise ValueError(f"expansion to {n_real + n_new} objects exceeds the maximum of {max_objects}")
    n, m = len(g), len(g) + n_new
    closed = close_converse(g, v)
    objects = np.concatenate([closed.objects, np.full(n_new, v.obj_mask)])
    relations = np.full((m, m), v.rel_mask, dtype=np.int64)
    relations[:n, :n] = closed.relations
    np.fill_diagonal(relations, v.rel_self)
    img = g.image_node(v)
    if img is not None:
        relations[n:, img] = v.rel_in_image
        relations[img, n:] = v.rel_in_image
    model.eval()
    pred = model(torch.as_tensor(objects)[None], torch.as_tensor(relations)[None])
    obj_scores = pred.object_scores[0].clone()
    obj_scores[:, list(v.special_objects)] = -math.inf
    rel_scores = pred.relation_scores[0].clone()
    rel_scores[..., [v.rel_self, v.rel_in_image, v.rel_mask]] = -math.inf
    new_objects = objects.copy()
    new_objects[n:] = obj_scores[n:].argmax(-1).numpy()
    new_cells = relations == v.rel_mask
    out_rel = np.zeros((m, m), dtype=np.int64)
    out_rel[:n, :n] = g.relations
    out_rel[new_cells] = rel_scores.argmax(-1).numpy()[new_cells]
    np.fill_diagonal(out_rel[n:, n:], v.rel_self)
    if img is not None:
        out_rel[n:, img] = v.rel_in_image
        out_rel[img, n:] = v.rel_in_image
    return strip_converse(SceneGraph(new_objects, out_rel), v, cells=new_cells)


# ---------------------------------------------------------------------------
# finite-difference check


def gradient_suite(seed: int = 0, tolerance: float = 1e-4, n_objects: int = 3) -> dict[str, "GradCheckReport"]:
    """Check each SGE loss on a tiny double-precision model (d = 8, N = n_objects + IMAGE)."""
    from .data import default_vocabulary, pair_predicate
    from .core import Layout, canonicalize
    from .nn import gradient_check

    v = default_vocabulary()
    rng = seeded_rng(seed, "gradcheck")
    cfg = TrainConfig(d_atten=8, d_ff=16, n_head=2, depth=2, dropout=0.0, seed=seed)
    torch.manual_seed(derive_seed(seed, "gradcheck-init"))
    model = SGEModel(v, cfg).double()
    objects = rng.integers(v.num_base_objects, size=n_objects)
    boxes = np.column_stack([rng.uniform(0.2, 0.8, (n_objects, 2)), rng.uniform(0.05, 0.3, (n_objects, 2))])
    rel = np.zeros((n_objects, n_objects), dtype=np.int64)
    for i in range(n_objects):
        for j in range(i + 1, n_objects):
            name, swapped = pair_predicate(boxes[i], boxes[j])
            a, b = (j, i) if swapped else (i, j)
            rel[a, b] = v.relation_index(name)
    g = close_converse(canonicalize(SceneGraph(objects, rel), v), v)
    batch = collate_sge([make_sge_sample(g, v, "E", 0.3, derive_seed(seed, "gradcheck-mask"))])
    weights = relation_class_weights(v, cfg.no_relation_weight, dtype=torch.float64)
    params = dict(model.named_parameters())

    def pred():
        return model(batch.objects, batch.relations, batch.node_mask)

    losses = {
        "loss_sge": lambda: loss_sge(pred(), batch, weights),
        "loss_conv": lambda: loss_conv(model),
        "loss_sym_hard": lambda: loss_sym(pred(), batch, model, "hard"),
        "loss_sym_soft": lambda: loss_sym(pred(), batch, model, "soft"),
    }
    return {name: gradient_check(fn, params, tolerance, seed=seed) for name, fn in losses.items()}
