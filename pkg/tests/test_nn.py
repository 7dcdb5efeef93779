import pytest
import torch

from sgtlab.nn import (
    Codebook,
    FeatureGraph,
    NodeAttention,
    SGTLayer,
    SGTStack,
    ShapeError,
    codebook_classify,
    codebook_embed,
    edge_attention,
    gradient_check,
    incident_edges,
    node_attention,
    sgt_layer,
    sgt_stack,
)


def test_codebook_classify_is_cosine():
    torch.manual_seed(0)
    cb = Codebook(5, 4)
    w = cb.weight.detach()
    scores = codebook_classify(cb, w * 3.0)
    assert torch.allclose(scores.diagonal(), torch.ones(5), atol=1e-6)
    assert scores.abs().max() <= 1 + 1e-6
    assert torch.equal(codebook_classify(cb, torch.zeros(2, 4)), torch.zeros(2, 5))
    assert torch.equal(codebook_embed(cb, 2), w[2])
    with pytest.raises(IndexError):
        codebook_embed(cb, 5)
    with pytest.raises(ShapeError):
        cb.classify(torch.zeros(3))


def test_codebook_rejects_parallel_vectors():
    cb = Codebook(3, 2)
    with torch.no_grad():
        cb.weight[1] = cb.weight[0] * 2
    with pytest.raises(ValueError, match="parallel"):
        cb.check_not_parallel()


def test_attention_shape_checks():
    attn = NodeAttention(8, 2)
    with pytest.raises(ShapeError):
        attn(torch.zeros(1, 3, 8), torch.zeros(1, 3, 2, 8))
    with pytest.raises(ShapeError):
        NodeAttention(9, 2)
    with pytest.raises(ShapeError):
        FeatureGraph(torch.zeros(3, 8), torch.zeros(3, 3, 4)).check()
    with pytest.raises(IndexError):
        incident_edges(3, 0, 3)


def test_unbatched_helpers_match_batched():
    torch.manual_seed(1)
    layer = SGTLayer(8, 16, 2, dropout=0.0).eval()
    fg = FeatureGraph(torch.randn(4, 8), torch.randn(4, 4, 8))
    batched = layer(fg.nodes[None], fg.edges[None])
    single = sgt_layer(layer, fg)
    assert torch.equal(single.nodes, batched[0][0]) and torch.equal(single.edges, batched[1][0])
    assert torch.equal(node_attention(layer.node_attn, fg), layer.node_attn(fg.nodes[None], fg.edges[None])[0])
    assert torch.equal(edge_attention(layer.edge_attn, fg), layer.edge_attn(fg.nodes[None], fg.edges[None])[0])
    stack = SGTStack(2, 8, 16, 2, dropout=0.0).eval()
    out = sgt_stack(stack, fg)
    ref = stack(fg.nodes[None], fg.edges[None])
    assert torch.equal(out.nodes, ref[0][0])
    with pytest.raises(ValueError):
        sgt_stack([], fg)


def test_padding_nodes_do_not_leak():
    torch.manual_seed(2)
    stack = SGTStack(3, 8, 16, 2, dropout=0.0).double().eval()
    n, pad = 4, 2
    hn = torch.randn(1, n + pad, 8, dtype=torch.float64)
    he = torch.randn(1, n + pad, n + pad, 8, dtype=torch.float64)
    mask = torch.tensor([[True] * n + [False] * pad])
    with torch.no_grad():
        a_n, a_e = stack(hn, he, mask)
        hn2, he2 = hn.clone(), he.clone()
        hn2[0, n:] = torch.randn(pad, 8, dtype=torch.float64)
        he2[0, n:, :] = 5.0
        he2[0, :, n:] = -5.0
        b_n, b_e = stack(hn2, he2, mask)
        ref_n, ref_e = stack(hn[:, :n], he[:, :n, :n])
    assert torch.allclose(a_n[:, :n], b_n[:, :n], atol=1e-12)
    assert torch.allclose(a_e[:, :n, :n], b_e[:, :n, :n], atol=1e-12)
    assert torch.allclose(a_n[:, :n], ref_n, atol=1e-12)
    assert torch.allclose(a_e[:, :n, :n], ref_e, atol=1e-12)


def test_node_only_layer_has_no_edge_attention():
    layer = SGTLayer(8, 16, 2, edge_attention=False)
    assert layer.edge_attn is None
    assert not any("edge_attn" in name for name, _ in layer.named_parameters())
    layer.eval()
    hn, he = torch.randn(1, 3, 8), torch.randn(1, 3, 3, 8)
    hn2 = hn.clone()
    hn2[0, 0] += 1
    # edges never see nodes without edge attention
    assert torch.equal(layer(hn, he)[1], layer(hn2, he)[1])


def test_dropout_sites():
    torch.manual_seed(3)
    hn, he = torch.randn(1, 3, 8), torch.randn(1, 3, 3, 8)
    for sites in [(), ("attention",), ("ff",), ("attention", "ff")]:
        layer = SGTLayer(8, 16, 2, dropout=0.9, dropout_sites=sites).train()
        torch.manual_seed(0)
        a = layer(hn, he)[0]
        torch.manual_seed(1)
        b = layer(hn, he)[0]
        assert torch.equal(a, b) == (len(sites) == 0)


def test_gradient_check_passes_and_catches_wrong_gradients():
    torch.manual_seed(4)
    w = torch.randn(5, dtype=torch.float64, requires_grad=True)
    x = torch.randn(5, dtype=torch.float64)

    def good():
        return (torch.sin(w * x) ** 2).sum() + (w**3).sum()

    rep = gradient_check(good, {"w": w})
    assert rep.passed and rep.n_checked == 5
    assert "PASS" in str(rep)
    rep3 = gradient_check(good, [w], stencil=3, step=1e-6)
    assert rep3.passed

    class WrongGrad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, t):
            return t * 2

        @staticmethod
        def backward(ctx, g):
            return g * 2.01

    bad = gradient_check(lambda: WrongGrad.apply(w).sum(), {"w": w})
    assert not bad.passed and bad.worst.startswith("w[")
    assert "FAIL" in str(bad)
    with pytest.raises(ValueError):
        gradient_check(good, {"w": w}, stencil=7)


def test_gradient_check_subsamples_large_parameters():
    w = torch.randn(50, dtype=torch.float64, requires_grad=True)
    rep = gradient_check(lambda: (w**2).sum(), {"w": w}, max_coords=10, seed=1)
    assert rep.n_checked == 10 and rep.n_total == 50 and rep.passed
