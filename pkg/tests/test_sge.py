import math

import numpy as np
import pytest
import torch
from torch.nn import functional as F

from sgtlab.core import validate_scene_graph
from sgtlab.data import make_sge_sample
from sgtlab.runtime import TrainConfig, decode_checkpoint, encode_checkpoint
from sgtlab.sge import (
    DivergenceError,
    SGEModel,
    collate_sge,
    evaluate_sge,
    expand_graph,
    label_candidates,
    loss_cells,
    loss_conv,
    loss_sge,
    loss_sym,
    prepare_graphs,
    relation_class_weights,
    sge_forward,
    train_sge,
)

TINY = dict(d_atten=8, d_ff=16, n_head=2, depth=2, dropout=0.0, batch_size=4, total_steps=20, eval_every=10)


@pytest.fixture(scope="module")
def graphs(small_dataset):
    return prepare_graphs(small_dataset)


@pytest.fixture(scope="module")
def model(vocab):
    torch.manual_seed(0)
    return SGEModel(vocab, TrainConfig(**TINY)).double().eval()


def test_collate_pads_and_masks(graphs, vocab):
    samples = [make_sge_sample(g, vocab, "E", seed=k) for k, g in enumerate(graphs[:4])]
    batch = collate_sge(samples)
    n = max(len(g) for g in graphs[:4])
    assert batch.objects.shape == (4, n) and batch.relations.shape == (4, n, n)
    for k, g in enumerate(graphs[:4]):
        assert batch.node_mask[k].sum() == len(g)
        assert batch.object_mask[k].sum() == 1


def test_loss_cells_policies(graphs, vocab):
    s = make_sge_sample(graphs[0], vocab, "M", rate=0.9, seed=1)
    batch = collate_sge([s])
    everything = loss_cells(batch, "target")
    excluded = loss_cells(batch, "exclude")
    om = batch.object_mask[0]
    both = om[:, None] & om[None, :] & ~torch.eye(len(om), dtype=torch.bool)
    assert torch.equal(everything[0] & ~both, excluded[0])
    assert om.sum() >= 2 and not torch.equal(everything, excluded)


def test_loss_sge_matches_explicit_sum(model, graphs, vocab):
    samples = [make_sge_sample(g, vocab, "E", seed=k) for k, g in enumerate(graphs[:3])]
    batch = collate_sge(samples)
    pred = sge_forward(model, batch)
    w = relation_class_weights(vocab, 0.05, torch.float64)
    total = 0.0
    for b in range(3):
        m = int(batch.node_mask[b].sum())
        for i in range(m):
            t = batch.target_objects[b, i]
            total += -F.log_softmax(pred.object_logits[b, i], -1)[t].item()
            for j in range(m):
                if i != j and batch.object_mask[b, i] and batch.object_mask[b, j]:
                    continue
                t = batch.target_relations[b, i, j]
                total += w[t].item() * -F.log_softmax(pred.relation_logits[b, i, j], -1)[t].item()
    assert loss_sge(pred, batch, w).item() == pytest.approx(total / 3, rel=1e-12)


def test_loss_conv_and_sym_definitions(model, graphs, vocab):
    labels = torch.arange(vocab.num_relations)
    logits = model.convert(labels)
    want = sum(-F.log_softmax(logits[r], -1)[vocab.converse(r)].item() for r in range(vocab.num_relations))
    assert loss_conv(model).item() == pytest.approx(want, rel=1e-12)
    batch = collate_sge([make_sge_sample(graphs[0], vocab, "E", seed=0)])
    pred = sge_forward(model, batch)
    cells = loss_cells(batch)[0]
    hard = model.convert(pred.relation_scores.argmax(-1))[0]
    want = 0.0
    for i, j in zip(*torch.nonzero(cells, as_tuple=True)):
        want += -F.log_softmax(hard[i, j], -1)[batch.target_relations[0, j, i]].item()
    assert loss_sym(pred, batch, model, "hard").item() == pytest.approx(want, rel=1e-12)
    soft = loss_sym(pred, batch, model, "soft")
    assert soft.requires_grad and math.isfinite(soft.item())
    with pytest.raises(ValueError):
        loss_sym(pred, batch, model, "medium")


def test_hard_sym_loss_does_not_backprop_into_the_stack(model, graphs, vocab):
    batch = collate_sge([make_sge_sample(graphs[0], vocab, "E", seed=0)])
    model.zero_grad()
    loss_sym(sge_forward(model, batch), batch, model, "hard").backward()
    assert all(p.grad is None or p.grad.abs().max() == 0 for p in model.stack.parameters())
    assert model.converter[0].weight.grad.abs().max() > 0
    model.zero_grad()


def test_model_rejects_out_of_vocabulary_labels(model, vocab):
    with pytest.raises(ValueError):
        model(torch.tensor([[vocab.num_objects]]), torch.zeros(1, 1, 1, dtype=torch.long))


def test_training_is_deterministic_and_checkpoints_round_trip(small_dataset):
    cfg = TrainConfig(**TINY, seed=3)
    a = train_sge(cfg, small_dataset)
    b = train_sge(cfg, small_dataset)
    assert a.log.records == b.log.records
    assert encode_checkpoint(a.checkpoint) == encode_checkpoint(b.checkpoint)
    assert [r["step"] for r in a.log.records] == [10, 20]
    restored = SGEModel.from_checkpoint(decode_checkpoint(encode_checkpoint(a.checkpoint)))
    g = prepare_graphs(small_dataset)
    ra = evaluate_sge(a.model, g)
    rb = evaluate_sge(restored, g)
    assert ra["objects"] == rb["objects"] and ra["relations"] == rb["relations"]
    c = train_sge(TrainConfig(**TINY, seed=4), small_dataset)
    assert encode_checkpoint(c.checkpoint) != encode_checkpoint(a.checkpoint)


def test_training_raises_on_divergence(small_dataset, monkeypatch):
    import sgtlab.sge as sge_mod

    monkeypatch.setattr(sge_mod, "total_loss", lambda *a, **k: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(DivergenceError, match="step 0"):
        train_sge(TrainConfig(**TINY), small_dataset)


def test_evaluate_candidates_exclude_specials(vocab):
    objects, relations = label_candidates(vocab)
    assert len(objects) == vocab.num_base_objects
    assert len(relations) == 2 * len(vocab.relation_labels)
    assert label_candidates(vocab, exclude_specials=False) == (None, None)


def test_expand_graph(model, graphs, vocab):
    from sgtlab.core import strip_converse

    g = min(graphs, key=len)
    base = strip_converse(g, vocab)
    out = expand_graph(model, base, 2)
    assert len(out) == len(base) + 2
    assert validate_scene_graph(out, vocab) == []
    assert np.array_equal(out.objects[: len(base)], base.objects)
    assert np.array_equal(out.relations[: len(base), : len(base)], base.relations)
    assert all(o < vocab.num_base_objects for o in out.objects[len(base):])
    # predicted cells carry base labels only (converse labels are flipped onto the reverse edge)
    new = out.relations[len(base):, :].ravel().tolist() + out.relations[:, len(base):].ravel().tolist()
    assert not any(vocab.is_converse_label(r) for r in new)
    assert expand_graph(model, base, 0) is base
    with pytest.raises(ValueError, match="maximum"):
        expand_graph(model, base, 20)
    with pytest.raises(ValueError):
        expand_graph(model, base, -1)
