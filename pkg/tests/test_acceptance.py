"""Acceptance criteria 1-11.

Each test carries ``@pytest.mark.criterion(n)``; the terminal summary prints one
PASS/FAIL line per criterion. Training runs are also marked ``slow``.
"""

from __future__ import annotations

import json
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import torch

from oracles import edge_attention_loop, node_attention_loop
from sgtlab import cli, g2l, sge
from sgtlab.core import (
    Layout,
    SceneGraph,
    build_vocabulary,
    close_converse,
    compute_disparities,
    parse_graph,
    validate_scene_graph,
)
from sgtlab.data import make_sge_sample
from sgtlab.g2l import G2LModel, apply_offsets, collate_g2l, iou_t, loss_ciou, offsets_of
from sgtlab.kernels import compiled_backend, python_backend
from sgtlab.metrics import iou_grid_oracle, miou_report, rank_metrics
from sgtlab.nn import EdgeAttention, NodeAttention, SGTLayer, SGTStack, incident_edges
from sgtlab.runtime import TrainConfig, load_config
from sgtlab.sge import SGEModel, label_candidates, lr_schedule

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
crit = pytest.mark.criterion


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = max(b.abs().max().item(), 1e-12)
    return (a - b).abs().max().item() / scale


def random_graph(rng, v, n):
    """Random labels (converse labels included) with SELF on the diagonal."""
    objects = rng.integers(v.num_base_objects, size=n)
    real = [k for k in range(v.num_relations) if k not in v.special_relations]
    rel = np.where(rng.random((n, n)) < 0.5, rng.choice(real, size=(n, n)), 0)
    np.fill_diagonal(rel, v.rel_self)
    return SceneGraph(objects, rel)


# ---------------------------------------------------------------------------
# 1. gradient suite


@pytest.fixture(scope="module")
def gradient_reports():
    t0 = time.perf_counter()
    reports = {**sge.gradient_suite(seed=0), **g2l.gradient_suite(seed=0)}
    return reports, time.perf_counter() - t0


@crit(1)
@pytest.mark.parametrize("loss", ["loss_sge", "loss_conv", "loss_sym_hard", "loss_sym_soft", "loss_g2l"])
def test_c01_gradient_matches_finite_differences(gradient_reports, loss):
    reports, _ = gradient_reports
    rep = reports[loss]
    print(f"{loss}: {rep}")
    assert rep.n_checked == rep.n_total  # every coordinate, not a sample
    assert rep.max_rel_error < 1e-4, str(rep)


@crit(1)
def test_c01_gradient_suite_runtime(gradient_reports):
    _, elapsed = gradient_reports
    print(f"gradient suite: {elapsed:.1f} s")
    assert elapsed < 120


# ---------------------------------------------------------------------------
# 2. attention oracles


@crit(2)
@pytest.mark.parametrize("n", range(1, 7))
def test_c02_vectorized_attention_matches_loops(n):
    worst = 0.0
    for trial in range(50):
        torch.manual_seed(1000 * n + trial)
        d, heads = 8, 2
        node, edge = NodeAttention(d, heads).double(), EdgeAttention(d, heads).double()
        hn = torch.randn(n, d, dtype=torch.float64)
        he = torch.randn(n, n, d, dtype=torch.float64)
        mask = torch.rand(n) < 0.8 if trial % 2 else None
        if mask is not None:
            mask[0] = True
        bm = None if mask is None else mask[None]
        got_n = node(hn[None], he[None], bm)[0]
        got_e = edge(hn[None], he[None], bm)[0]
        with torch.no_grad():
            want_n = node_attention_loop(node, hn, he, mask)
            want_e = edge_attention_loop(edge, hn, he, mask)
        worst = max(worst, rel_err(got_n.detach(), want_n), rel_err(got_e.detach(), want_e))
    print(f"N={n}: worst relative error {worst:.2e}")
    assert worst < 1e-6


@crit(2)
def test_c02_incident_edge_count_exhaustive():
    for n in range(1, 17):
        for i in range(n):
            for j in range(n):
                edges = incident_edges(i, j, n)
                assert len(edges) == 2 * n - 1
                assert len(set(edges)) == 2 * n - 1
                assert all(k == i or l == j for k, l in edges)
                # every edge sharing the row or the column is present
                assert set(edges) == {(k, l) for k in range(n) for l in range(n) if k == i or l == j}


# ---------------------------------------------------------------------------
# 3. receptive field


def _layer(seed, edge_attention=True):
    torch.manual_seed(seed)
    return SGTLayer(8, 16, 2, dropout=0.5, edge_attention=edge_attention).double().eval()


@crit(3)
def test_c03_node_output_ignores_foreign_edges():
    n = 5
    for seed in range(5):
        layer = _layer(seed)
        hn = torch.randn(1, n, 8, dtype=torch.float64)
        he = torch.randn(1, n, n, 8, dtype=torch.float64)
        with torch.no_grad():
            base_n, _ = layer(hn, he)
            for i in range(n):
                for k in range(n):
                    if k == i:
                        continue
                    for l in range(n):
                        he2 = he.clone()
                        he2[0, k, l] += torch.randn(8, dtype=torch.float64)
                        out_n, _ = layer(hn, he2)
                        assert torch.equal(out_n[0, i], base_n[0, i]), (i, k, l)


@crit(3)
def test_c03_edge_output_ignores_foreign_nodes_and_edges():
    n = 5
    for seed in range(5):
        layer = _layer(seed)
        hn = torch.randn(1, n, 8, dtype=torch.float64)
        he = torch.randn(1, n, n, 8, dtype=torch.float64)
        with torch.no_grad():
            _, base_e = layer(hn, he)
            for m in range(n):
                hn2 = hn.clone()
                hn2[0, m] += torch.randn(8, dtype=torch.float64)
                _, out_e = layer(hn2, he)
                for i in range(n):
                    for j in range(n):
                        if m not in (i, j):
                            assert torch.equal(out_e[0, i, j], base_e[0, i, j]), (m, i, j)
            for k in range(n):
                for l in range(n):
                    he2 = he.clone()
                    he2[0, k, l] += torch.randn(8, dtype=torch.float64)
                    _, out_e = layer(hn, he2)
                    for i in range(n):
                        for j in range(n):
                            if k != i and l != j:
                                assert torch.equal(out_e[0, i, j], base_e[0, i, j]), (k, l, i, j)


@crit(3)
def test_c03_two_layers_grow_the_receptive_field():
    n = 4
    torch.manual_seed(0)
    stack = SGTStack(2, 8, 16, 2, dropout=0.0).double().eval()
    one = stack.layers[0]
    hn = torch.randn(1, n, 8, dtype=torch.float64)
    he = torch.randn(1, n, n, 8, dtype=torch.float64)
    he2 = he.clone()
    he2[0, 2, 3] += 1.0  # not in row 0: invisible to node 0 after one layer
    with torch.no_grad():
        assert torch.equal(one(hn, he)[0][0, 0], one(hn, he2)[0][0, 0])
        assert not torch.equal(stack(hn, he)[0][0, 0], stack(hn, he2)[0][0, 0])
        # and (0, 1) cannot see node 2 after one layer, but can after two
        hn2 = hn.clone()
        hn2[0, 2] += 1.0
        assert torch.equal(one(hn, he)[1][0, 0, 1], one(hn2, he)[1][0, 0, 1])
        assert not torch.equal(stack(hn, he)[1][0, 0, 1], stack(hn2, he)[1][0, 0, 1])


# ---------------------------------------------------------------------------
# 4. permutation equivariance


@crit(4)
def test_c04_sge_model_is_permutation_equivariant(vocab):
    cfg = TrainConfig(d_atten=16, d_ff=32, n_head=2, depth=3, dropout=0.3)
    rng = np.random.default_rng(0)
    n = 6
    for trial in range(3):
        torch.manual_seed(trial)
        model = SGEModel(vocab, cfg).double().eval()
        g = random_graph(rng, vocab, n)
        objects, relations = torch.tensor(g.objects)[None], torch.tensor(g.relations)[None]
        with torch.no_grad():
            base = model(objects, relations)
            for _ in range(20):
                p = torch.as_tensor(rng.permutation(n))
                out = model(objects[:, p], relations[:, p][:, :, p])
                assert rel_err(out.node_features, base.node_features[:, p]) < 1e-6
                assert rel_err(out.edge_features, base.edge_features[:, p][:, :, p]) < 1e-6
                assert rel_err(out.object_scores, base.object_scores[:, p]) < 1e-6
                assert rel_err(out.relation_scores, base.relation_scores[:, p][:, :, p]) < 1e-6


@crit(4)
def test_c04_g2l_model_is_permutation_equivariant(small_dataset):
    v = small_dataset.vocabulary
    cfg = TrainConfig(task="g2l", d_atten=12, d_ff=24, n_head=2, depth=2, raster_size=16, e_i_widths=(4, 4, 4, 4, 4))
    samples = g2l.g2l_samples(small_dataset, cfg)
    rng = np.random.default_rng(1)
    for trial in range(3):
        torch.manual_seed(trial)
        model = G2LModel(v, cfg).double().eval()
        torch.nn.init.normal_(model.r_offset[-1].weight, std=0.1)
        batch = collate_g2l([samples[trial]], v, torch.float64)
        n = batch.objects.shape[1]
        with torch.no_grad():
            base = model(batch)
            for _ in range(20):
                p = torch.as_tensor(rng.permutation(n))
                pb = g2l.G2LBatch(
                    batch.objects[:, p],
                    batch.relations[:, p][:, :, p],
                    batch.input_boxes[:, p],
                    batch.target_boxes[:, p],
                    batch.novel_flags[:, p],
                    batch.image_nodes[:, p],
                    batch.node_mask[:, p],
                    batch.planes,
                )
                out = model(pb)
                assert rel_err(out.boxes, base.boxes[:, p]) < 1e-6
                assert rel_err(out.disparity_pred, base.disparity_pred[:, p][:, :, p]) < 1e-6


# ---------------------------------------------------------------------------
# 5. structural invariants


@crit(5)
def test_c05_converse_map_is_an_involution(vocab):
    other = build_vocabulary(["a", "b"], ["on", "near", "has", "beside"], ["near", "beside"])
    for v in (vocab, other):
        for r in range(v.num_relations):
            assert v.converse(v.converse(r)) == r
        for name in v.self_converse:
            assert v.converse(v.relation_index(name)) == v.relation_index(name)
        for r in v.special_relations:
            assert v.converse(r) == r


@crit(5)
def test_c05_close_converse_idempotent_and_non_overwriting(vocab):
    rng = np.random.default_rng(5)
    for _ in range(1000):
        g = random_graph(rng, vocab, int(rng.integers(1, 9)))
        closed = close_converse(g, vocab)
        assert close_converse(closed, vocab) == closed
        nonempty = g.relations != vocab.NO_RELATION
        assert np.array_equal(closed.relations[nonempty], g.relations[nonempty])
        # every filled cell holds the converse of its partner
        filled = ~nonempty & (closed.relations != vocab.NO_RELATION)
        for i, j in zip(*np.nonzero(filled)):
            assert closed.relations[i, j] == vocab.converse(int(g.relations[j, i]))


@crit(5)
def test_c05_strategy_e_masks_one_object_with_its_row_and_column(small_dataset):
    v = small_dataset.vocabulary
    graphs = sge.prepare_graphs(small_dataset)
    for k in range(1000):
        g = graphs[k % len(graphs)]
        s = make_sge_sample(g, v, "E", seed=k)
        assert s.object_mask.sum() == 1
        m = int(np.flatnonzero(s.object_mask)[0])
        assert g.objects[m] != v.obj_image
        n = len(g)
        expected = np.zeros((n, n), dtype=bool)
        expected[m, :] = True
        expected[:, m] = True
        # structural cells (diagonal, IMAGE links) stay visible
        np.fill_diagonal(expected, False)
        img = g.image_node(v)
        expected[img, :] = expected[:, img] = False
        assert np.array_equal(s.relation_mask, expected)
        assert s.input_graph.objects[m] == v.obj_mask
        assert np.all(s.input_graph.relations[expected] == v.rel_mask)
        assert np.array_equal(s.input_graph.relations[~expected], g.relations[~expected])


@crit(5)
def test_c05_disparity_antisymmetry_exact():
    rng = np.random.default_rng(7)
    backends = [python_backend()] + ([compiled_backend()] if compiled_backend() else [])
    for _ in range(200):
        n = int(rng.integers(1, 10))
        boxes = np.column_stack([rng.random((n, 2)), rng.uniform(0.01, 1.0, (n, 2))])
        boxes[rng.random(n) < 0.2, 2] = 0.0  # zero-width boxes: invalid cells
        for be in backends:
            d, valid = be.pairwise_disparities(np.ascontiguousarray(boxes), False)
            assert np.array_equal(d, -d.transpose(1, 0, 2))
            assert np.array_equal(valid, valid.T)
        d, _ = compute_disparities(boxes)
        assert np.array_equal(d, -d.transpose(1, 0, 2))
        dt, _ = g2l.disparities_t(torch.as_tensor(boxes)[None])
        assert torch.equal(dt[0], -dt[0].transpose(0, 1))


# ---------------------------------------------------------------------------
# 6. SGE overfit and node-only ablation


@pytest.fixture(scope="module")
def sge_overfit(overfit_dataset):
    cfg = load_config(CONFIGS / "sge_overfit.yaml")
    t0 = time.perf_counter()
    result = sge.train_sge(cfg, overfit_dataset)
    return cfg, result, time.perf_counter() - t0


@crit(6)
@pytest.mark.slow
def test_c06a_full_model_overfits(sge_overfit, overfit_dataset):
    cfg, result, elapsed = sge_overfit
    assert len(overfit_dataset) == 64 and cfg.total_steps <= 2000
    last = result.log.records[-1]
    print(f"{cfg.total_steps} steps in {elapsed:.0f} s: {json.dumps(last, sort_keys=True)}")
    assert last["step"] == cfg.total_steps
    assert last["obj_hit1"] >= 0.9
    assert last["rel_hit1"] >= 0.8
    assert elapsed < 600


ABLATION_STEPS = 600


@crit(6)
@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_c06b_node_only_ablation_is_worse_on_relations(overfit_dataset, seed):
    base = load_config(CONFIGS / "sge_overfit.yaml", total_steps=ABLATION_STEPS, eval_every=ABLATION_STEPS, seed=seed)
    scores = {}
    for edge_attention in (True, False):
        cfg = TrainConfig.from_dict({**base.to_dict(), "edge_attention": edge_attention})
        result = sge.train_sge(cfg, overfit_dataset)
        scores[edge_attention] = result.log.records[-1]["rel_hit1"]
    print(f"seed {seed}: relation Hit@1 full {scores[True]:.3f} node-only {scores[False]:.3f}")
    assert scores[False] < scores[True]


# ---------------------------------------------------------------------------
# 7. box geometry


def random_boxes(rng, n):
    return np.column_stack([rng.uniform(0.1, 0.9, (n, 2)), rng.uniform(0.02, 0.6, (n, 2))])


@crit(7)
def test_c07_ciou_of_a_box_with_itself_is_zero():
    rng = np.random.default_rng(0)
    b = torch.as_tensor(random_boxes(rng, 1000))
    assert torch.all(loss_ciou(b, b) == 0)


@crit(7)
def test_c07_iou_matches_grid_oracle():
    rng = np.random.default_rng(1)
    a, b = random_boxes(rng, 1000), random_boxes(rng, 1000)
    # shift half the pairs together so overlaps of every size show up
    b[::2, :2] = a[::2, :2] + rng.normal(0, 0.05, (500, 2))
    analytic = iou_t(torch.as_tensor(a), torch.as_tensor(b)).numpy()
    grid = np.array([iou_grid_oracle(a[k], b[k], 4096) for k in range(1000)])
    print(f"max |analytic - grid| = {np.abs(analytic - grid).max():.2e}")
    assert np.abs(analytic - grid).max() < 1e-3


@crit(7)
def test_c07_apply_offsets_closed_loop():
    rng = np.random.default_rng(2)
    # dyadic boxes: every edge and offset is exactly representable
    inp = rng.integers(1, 64, (1000, 4)) / 128.0
    gt = rng.integers(1, 64, (1000, 4)) / 128.0
    out, clamped = apply_offsets(inp, offsets_of(inp, gt))
    assert not clamped.any()
    assert np.array_equal(out, gt)
    # arbitrary floats: closed loop to rounding
    inp, gt = random_boxes(rng, 1000), random_boxes(rng, 1000)
    out, _ = apply_offsets(inp, offsets_of(inp, gt))
    assert np.abs(out - gt).max() < 1e-15
    # and the torch twin agrees
    out_t = g2l.apply_offsets_t(torch.as_tensor(inp), torch.as_tensor(offsets_of(inp, gt))).numpy()
    assert np.array_equal(out_t, out)


@crit(7)
def test_c07_one_seventh_fixture():
    a, b = np.array([0.25, 0.25, 0.5, 0.5]), np.array([0.5, 0.5, 0.5, 0.5])
    grid = iou_grid_oracle(a, b, 1024)
    analytic = iou_t(torch.as_tensor(a), torch.as_tensor(b)).item()
    # intersection 1/16, union 1/4 + 1/4 - 1/16 = 7/16
    assert Fraction(1, 16) / (Fraction(1, 4) + Fraction(1, 4) - Fraction(1, 16)) == Fraction(1, 7)
    assert abs(grid - 1 / 7) < 1e-3
    assert abs(analytic - 1 / 7) < 1e-15


# ---------------------------------------------------------------------------
# 8. metric oracles


def brute_force_ranks(scores, targets):
    ranks = []
    for row, t in zip(scores, targets):
        # stable sort that places ties ahead of the target
        order = sorted(range(len(row)), key=lambda k: (-row[k], 1 if k == t else 0))
        ranks.append(order.index(t) + 1)
    return np.array(ranks)


@crit(8)
def test_c08_rank_metrics_match_sorting():
    rng = np.random.default_rng(8)
    for trial in range(1000):
        n, v = int(rng.integers(1, 20)), int(rng.integers(2, 15))
        # coarse integer scores force plenty of ties
        scores = rng.integers(0, 5, (n, v)).astype(float) if trial % 2 else rng.normal(size=(n, v))
        targets = rng.integers(v, size=n)
        ranks = brute_force_ranks(scores, targets)
        rep = rank_metrics(scores, targets, ks=(1, 5))
        assert np.array_equal(rep.ranks, ranks)
        assert rep.ravg == pytest.approx(ranks.mean(), rel=0, abs=1e-12)
        assert rep.hits[1] == np.mean(ranks <= 1)
        assert rep.hits[5] == np.mean(ranks <= 5)


@crit(8)
@pytest.mark.parametrize("kind", ["objects", "relations"])
def test_c08_untrained_ravg_is_chance(overfit_dataset, kind):
    v = overfit_dataset.vocabulary
    graphs = sge.prepare_graphs(overfit_dataset)
    obj_c, rel_c = label_candidates(v)
    n_cand = len(obj_c if kind == "objects" else rel_c)
    chance = (n_cand + 1) / 2
    ravgs = []
    for seed in range(30):
        torch.manual_seed(seed)
        model = SGEModel(v, TrainConfig(seed=seed)).eval()
        ravgs.append(sge.evaluate_sge(model, graphs, seed=seed)[kind].ravg)
    mean = float(np.mean(ravgs))
    print(f"{kind}: mean untrained rAVG {mean:.3f} vs chance {chance} over {n_cand} labels")
    assert abs(mean - chance) <= 0.1 * chance


@crit(8)
def test_c08_miou_weighted_average_identity():
    rng = np.random.default_rng(9)
    for _ in range(200):
        n = int(rng.integers(2, 30))
        pred, gt = random_boxes(rng, n), random_boxes(rng, n)
        novel = rng.random(n) < 0.4
        novel[0], novel[1] = True, False
        rep = miou_report(pred, gt, novel)
        ious = iou_t(torch.as_tensor(pred), torch.as_tensor(gt)).numpy()
        assert rep.n_novel == novel.sum() and rep.n_existing == (~novel).sum()
        assert rep.novel == pytest.approx(math.fsum(ious[novel]) / novel.sum(), rel=1e-14)
        assert rep.existing == pytest.approx(math.fsum(ious[~novel]) / (~novel).sum(), rel=1e-14)
        assert rep.total == (rep.n_novel * rep.novel + rep.n_existing * rep.existing) / n
        assert rep.total == pytest.approx(math.fsum(ious) / n, rel=1e-14)


# ---------------------------------------------------------------------------
# 9. G2L overfit


@pytest.fixture(scope="module")
def g2l_overfit(overfit_dataset):
    cfg = load_config(CONFIGS / "g2l_overfit.yaml")
    t0 = time.perf_counter()
    result = g2l.train_g2l(cfg, overfit_dataset)
    return cfg, result, time.perf_counter() - t0


@crit(9)
@pytest.mark.slow
def test_c09_g2l_overfits(g2l_overfit):
    cfg, result, elapsed = g2l_overfit
    assert len(result.samples) == 64 and cfg.total_steps <= 5000
    rep = g2l.evaluate_g2l(result.model, result.samples)
    print(f"{cfg.total_steps} steps in {elapsed:.0f} s: {rep.to_dict()}")
    assert rep.n_novel > 0 and rep.n_existing > 0
    assert rep.total >= 0.6
    assert rep.novel >= 0.3
    assert rep.existing >= 0.8


@crit(9)
@pytest.mark.slow
def test_c09_zeroing_image_features_hurts_existing_objects(g2l_overfit):
    _, result, _ = g2l_overfit
    full = g2l.evaluate_g2l(result.model, result.samples)
    zeroed = g2l.evaluate_g2l(result.model, result.samples, zero_image=True)
    print(f"existing mIoU: with image {full.existing:.3f}, zeroed {zeroed.existing:.3f}")
    assert zeroed.existing < full.existing


# ---------------------------------------------------------------------------
# 10. pipeline smoke


@crit(10)
def test_c10_pipeline_on_demo_is_valid_and_deterministic(tiny_checkpoints, tmp_path):
    sge_ckpt, g2l_ckpt = tiny_checkpoints
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        code = cli.main(["pipeline", "--sge-ckpt", str(sge_ckpt), "--g2l-ckpt", str(g2l_ckpt), "--seed", "0", "--out-dir", str(out)])
        assert code == 0
        outs.append(out)
    names = ("expanded.json", "layout.json", "render.svg")
    for name in names:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    model = sge.SGEModel.from_checkpoint(cli._load(sge_ckpt, "sge"))
    v = model.vocab
    expanded, _ = parse_graph((outs[0] / "expanded.json").read_text(), v)
    demo, _ = parse_graph((cli.DEMO_DIR / "graph.json").read_text(), v)
    assert validate_scene_graph(expanded, v) == []
    assert len(expanded) == len(demo) + 1
    graph, layout = parse_graph((outs[0] / "layout.json").read_text(), v)
    assert graph == expanded
    assert layout is not None and len(layout) == len(expanded)
    assert np.all(layout.boxes[:, 2:] >= 0)
    svg = (outs[0] / "render.svg").read_text()
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")


# ---------------------------------------------------------------------------
# 11. learning-rate schedule


@crit(11)
@pytest.mark.parametrize("total", [10, 1000, 2000, 5000, 123_000])
@pytest.mark.parametrize("gamma", [4e-4, 1e-2, 1.0])
def test_c11_lr_schedule_fixtures(total, gamma):
    warm, hold_end = total / 10, total / 10 + total / 1000
    assert lr_schedule(0, total, gamma) == gamma / 10
    assert lr_schedule(warm, total, gamma) == gamma
    assert lr_schedule(hold_end, total, gamma) == gamma
    assert lr_schedule((warm + hold_end) / 2, total, gamma) == gamma
    assert lr_schedule(total, total, gamma) == 2.5e-5 * gamma
    # linear warm-up, then strictly decreasing decay
    assert lr_schedule(warm / 2, total, gamma) == pytest.approx(gamma / 10 + 0.45 * gamma, rel=1e-15)
    assert lr_schedule(warm * 0.999, total, gamma) < gamma
    assert lr_schedule(hold_end + 1e-6 * total, total, gamma) < gamma
    mid = (hold_end + total) / 2
    assert lr_schedule(mid, total, gamma) == pytest.approx(gamma * math.sqrt(2.5e-5), rel=1e-12)
    grid = np.linspace(hold_end, total, 50)
    values = [lr_schedule(s, total, gamma) for s in grid]
    assert all(a > b for a, b in zip(values, values[1:]))
