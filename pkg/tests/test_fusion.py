import numpy as np
import pytest

from graphtext import numerics as nx
from graphtext.backbone import BOS, EOS, Backbone, BackboneConfig
from graphtext.diagnostics import MicroConfig, micro_graph, micro_model
from graphtext.encoder import EncoderConfig
from graphtext.fusion import Adapter, GraphTextModel, build_fused_sequence
from graphtext.graph import TypedGraph
from graphtext.numerics import Parameter, Tensor


def model(dim=16, **kw):
    bb = Backbone(BackboneConfig(vocab_size=64, dim=dim, num_layers=1, ffn_dim=32, context_length=32))
    enc = EncoderConfig(hidden_dim=8, num_layers=2, dropout=0.0, relation_count=3, init_dim=dim, query_dim=dim, **kw)
    return GraphTextModel(bb, enc)


def test_zero_adapter_maps_everything_to_zero(f64, rng):
    ad = Adapter(5, 7)
    for p in ad.parameters():
        p.data[...] = 0.0
    np.testing.assert_array_equal(ad(Tensor(rng.normal(size=(3, 5)))).data, 0.0)


def test_identity_adapter_on_nonnegative_input(f64, rng):
    ad = Adapter(4, 4, d_hidden=4)
    ad.mlp.first.weight.data[...] = np.eye(4)
    ad.mlp.second.weight.data[...] = np.eye(4)
    for lin in (ad.mlp.first, ad.mlp.second):
        lin.bias.data[...] = 0.0
    g = np.abs(rng.normal(size=(2, 4)))
    np.testing.assert_array_equal(ad(Tensor(g)).data, g)


def test_adapter_dimension_checked():
    with pytest.raises(nx.ShapeError):
        Adapter(4, 8)(Tensor(np.ones((1, 5))))


def test_adapter_gradients(f64, rng):
    ad = Adapter(5, 6, seed=2)
    x = Tensor(rng.normal(size=(3, 5)))
    w = Tensor(rng.normal(size=(3, 6)))
    assert nx.grad_check(lambda: nx.sum_(ad(x) * w), list(ad.named_parameters())).passed


def test_fused_sequence_layout():
    tok = Tensor(np.zeros((1, 4)))
    empty = build_fused_sequence(tok, [], 16)
    assert empty.token_ids == (BOS, EOS) and len(empty) == 3
    seq = build_fused_sequence(tok, [7, 8, 9], 16)
    assert seq.roles == ["graph-token", "bos", "text", "text", "text", "eos"]


@pytest.mark.parametrize("n_tokens", [0, 5, 13, 14, 40])
def test_fused_length_and_truncation(n_tokens):
    ctx = 16
    seq = build_fused_sequence(Tensor(np.zeros((1, 4))), list(range(10, 10 + n_tokens)), ctx)
    assert len(seq) == 3 + min(n_tokens, ctx - 3)
    assert seq.roles[0] == "graph-token" and seq.roles[1] == "bos" and seq.roles[-1] == "eos"


def test_encoder_dims_must_match_backbone():
    bb = Backbone(BackboneConfig(dim=16, vocab_size=64, context_length=32))
    with pytest.raises(ValueError):
        GraphTextModel(bb, EncoderConfig(hidden_dim=8, init_dim=8, query_dim=16))


def test_joint_embedding_is_deterministic_and_normalised(f64, rng):
    m = model()
    g = micro_graph(rng, 6)
    ctx = m.query_context("what uses node0", [0, 3])
    a = m.joint_embed(g, ctx, "what uses node0")
    b = m.joint_embed(g, ctx, "what uses node0")
    assert a.z.tobytes() == b.z.tobytes()
    assert a.z.shape == (16,)
    assert np.linalg.norm(a.z_normalized) == pytest.approx(1.0)


def test_relation_change_moves_z(f64, rng):
    m = model()
    g = micro_graph(rng, 6)
    e = g.edges[0]
    changed = TypedGraph.build(
        g.names(), [(e.src, (e.rel + 1) % 3, e.dst)] + [(x.src, x.rel, x.dst) for x in g.edges[1:]],
        g.relation_names, [n.type for n in g.nodes],
    )
    ctx = m.query_context("q", [0])
    assert not np.allclose(m.joint_embed(g, ctx, "t").z, m.joint_embed(changed, ctx, "t").z)


def test_without_graph_equals_sentence_embedding(f64, rng):
    m = model()
    g = micro_graph(rng, 6)
    text = "is node0 part of anything"
    z = m.joint_embed(g, m.query_context(text, [0]), text, use_graph=False).z
    np.testing.assert_array_equal(z, m.backbone.sentence_embedding(text, use_cache=False))


def test_graph_token_gradient_flows_through_frozen_backbone(f64, rng):
    m = model()
    g = Parameter(rng.normal(size=(1, 16)))
    z = m.backbone.embed([build_fused_sequence(g, [5, 6], 32)])
    # plain sum(z) is constant after the final layer norm, so weight it
    nx.sum_(z * Tensor(rng.normal(size=16))).backward()
    assert np.linalg.norm(g.grad) > 0


def test_micro_end_to_end_covers_every_trainable_block():
    cfg = MicroConfig()
    with nx.precision("float64"):
        m, batch = micro_model(cfg)
        names = {n for n, p in m.named_parameters() if p.trainable}
        out = m.forward_batch(batch, training=False)
        out.loss.total.backward()
    prefixes = {"joint.encoder.input_proj", "joint.encoder.layers.0.f_r", "joint.encoder.pool",
                "joint.adapter.mlp", "head_orig.mlp", "head_desc.mlp"}
    assert all(any(n.startswith(p) for n in names) for p in prefixes)
    assert not any(n.startswith("joint.backbone") for n in names)
    assert all(np.any(p.grad) for n, p in m.named_parameters() if p.trainable)
