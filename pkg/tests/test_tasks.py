import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphtext import numerics as nx
from graphtext.alignment import info_nce
from graphtext.backbone import Backbone, BackboneConfig
from graphtext.diagnostics import micro_graph
from graphtext.encoder import EncoderConfig
from graphtext.fusion import GraphTextModel
from graphtext.numerics import Parameter, Tensor
from graphtext.tasks import (
    Document,
    PairInstance,
    QaInstance,
    RetrievalInstance,
    TaskModel,
    combined_loss,
    metric_accuracy,
    ndcg_at_k,
    pair_loss,
    qa_forward,
    qa_loss,
    rank_by_cosine,
    retrieval_loss,
    retrieval_rank,
)


# scalar-loop oracles -----------------------------------------------------------

def qa_oracle(probs, gold):
    total = 0.0
    for i, row in enumerate(probs):
        for j, p in enumerate(row):
            total -= (1.0 if j == gold[i] else 0.0) * math.log(max(p, 1e-12))
    return total


def pair_oracle(probs, labels):
    total = 0.0
    for p, y in zip(probs, labels):
        total -= y * math.log(max(p, 1e-12)) + (1 - y) * math.log(max(1 - p, 1e-12))
    return total


def retrieval_oracle(q, p, tau):
    def cos(a, b):
        return sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))

    total = 0.0
    for i in range(len(q)):
        num = math.exp(cos(q[i], p[i]) / tau)
        den = num + sum(math.exp(cos(q[i], p[j]) / tau) for j in range(len(p)) if j != i)
        total -= math.log(num / den)
    return total


def ndcg_oracle(ranked, gains, k):
    dcg = 0.0
    for pos in range(1, min(k, len(ranked)) + 1):
        dcg += gains.get(ranked[pos - 1], 0.0) / math.log2(pos + 1)
    best = 0.0
    for order in itertools.permutations(sorted(gains, key=gains.get, reverse=True)[:k]):
        best = max(best, sum(gains[d] / math.log2(pos + 2) for pos, d in enumerate(order)))
    return dcg / best


# losses ------------------------------------------------------------------------

def test_qa_loss_examples(f64):
    assert qa_loss(Tensor(np.eye(4)[[1, 3]]), [1, 3]).item() == 0.0
    assert qa_loss(Tensor(np.full((2, 4), 0.25)), [0, 2]).item() == pytest.approx(2 * math.log(4))


def test_qa_loss_clamps_zero_probability(f64, caplog):
    assert qa_loss(Tensor(np.array([[1.0, 0.0]])), [1]).item() == pytest.approx(-math.log(1e-12))
    assert "clamped" in caplog.text


def test_uniform_five_way_cross_entropy(f64):
    probs = nx.softmax(Tensor(np.zeros((1, 5))))
    assert qa_loss(probs, [2]).item() == pytest.approx(math.log(5))


def test_pair_loss_examples(f64):
    assert pair_loss(Tensor(np.array([1.0])), [1]).item() == 0.0
    assert pair_loss(Tensor(np.array([0.5])), [1]).item() == pytest.approx(math.log(2))
    assert pair_loss(Tensor(np.array([0.0, 1.0])), [0, 1]).item() == 0.0


def test_retrieval_loss_examples(f64, rng):
    q = Tensor(rng.normal(size=(1, 5)))
    assert retrieval_loss(q, Tensor(rng.normal(size=(1, 5))), 0.05).item() == 0.0
    eye = Tensor(np.eye(4))
    assert abs(retrieval_loss(eye, eye, 1.0).item() - 4 * math.log(1 + 3 / math.e)) < 1e-9
    a, b = Tensor(rng.normal(size=(6, 5))), Tensor(rng.normal(size=(6, 5)))
    assert retrieval_loss(a, b, 1e6).item() / 6 == pytest.approx(math.log(6), abs=1e-4)


def test_retrieval_loss_contract():
    with pytest.raises(nx.ContractError):
        retrieval_loss(Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(nx.ContractError):
        retrieval_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))), tau=0.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(2, 6), st.integers(0, 10_000))
def test_losses_match_scalar_loops(n, c, seed):
    rng = np.random.default_rng(seed)
    with nx.precision("float64"):
        probs = rng.dirichlet(np.ones(c), size=n)
        gold = rng.integers(c, size=n).tolist()
        got = qa_loss(Tensor(probs), gold).item()
        assert got >= 0 and abs(got - qa_oracle(probs.tolist(), gold)) < 1e-9

        p = rng.uniform(0.01, 0.99, size=n)
        y = rng.integers(2, size=n).tolist()
        got = pair_loss(Tensor(p), y).item()
        assert got >= 0 and abs(got - pair_oracle(p.tolist(), y)) < 1e-9

        qs, ps = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
        tau = float(rng.uniform(0.05, 2.0))
        got = retrieval_loss(Tensor(qs), Tensor(ps), tau).item()
        assert got >= 0 and abs(got - retrieval_oracle(qs.tolist(), ps.tolist(), tau)) < 1e-9


def test_combined_loss():
    out = combined_loss(0.0, 2.0, 0.5)
    assert out.combined == 1.0 and out.task == 0.0 and out.info_nce == 2.0
    assert combined_loss(1.25, 7.0, 0.0).combined == 1.25
    with pytest.raises(ValueError):
        combined_loss(1.0, 1.0, -0.1)


def test_combined_gradient_is_task_plus_lambda_align(f64, rng):
    x = Parameter(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(3, 4)))

    def task():
        return nx.sum_(nx.sigmoid(x) * w)

    def align():
        return info_nce(nx.l2_normalize(x), nx.l2_normalize(Tensor(w.data)))

    grads = []
    for fn in (task, align, lambda: combined_loss(task(), align(), 0.05).total):
        x.zero_grad()
        fn().backward()
        grads.append(x.grad.copy())
    np.testing.assert_allclose(grads[2], grads[0] + 0.05 * grads[1], atol=1e-12)


# metrics -----------------------------------------------------------------------

def test_accuracy():
    assert metric_accuracy([1, 2], [1, 2]) == 1.0
    assert metric_accuracy([0, 0], [1, 1]) == 0.0
    assert metric_accuracy([1, 2, 3, 4], [1, 2, 3, 0]) == 0.75
    with pytest.raises(ValueError):
        metric_accuracy([], [])


def test_ndcg_examples(caplog):
    assert ndcg_at_k(["a", "b"], {"a": 1.0}) == 1.0
    assert ndcg_at_k(["b", "a"], {"a": 1.0}) == pytest.approx(1 / math.log2(3))
    ranked = [f"d{i}" for i in range(12)]
    assert ndcg_at_k(ranked, {"d11": 1.0}) == 0.0
    assert ndcg_at_k(ranked, {}) == 0.0
    assert "no relevant" in caplog.text
    with pytest.raises(ValueError):
        ndcg_at_k(ranked, {"d1": 1.0}, k=0)


def test_ndcg_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        ids = [f"d{i}" for i in range(int(rng.integers(1, 15)))]
        ranked = list(rng.permutation(ids))
        rel = rng.choice(ids, size=int(rng.integers(1, min(len(ids), 5) + 1)), replace=False)
        gains = {str(d): float(rng.integers(1, 4)) for d in rel}
        assert abs(ndcg_at_k(ranked, gains, 10) - ndcg_oracle(ranked, gains, 10)) < 1e-12


def test_rank_matches_argsort_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(1, 12))
        ids = [f"c{i:02d}" for i in range(n)]
        q, cands = rng.normal(size=4), rng.normal(size=(n, 4))
        sims = cands @ q / np.linalg.norm(cands, axis=1) / np.linalg.norm(q)
        want = [ids[i] for i in np.argsort(-sims, kind="stable")]
        assert rank_by_cosine(q, cands, ids) == want
        assert rank_by_cosine(q * 3.0, cands * 0.5, ids) == want


def test_rank_ties_and_edge_cases():
    q = np.array([1.0, 0.0])
    assert rank_by_cosine(q, np.array([[0.5, 0.5]]), ["only"]) == ["only"]
    dup = np.array([[1.0, 1.0], [1.0, 1.0], [2.0, 0.0]])
    assert rank_by_cosine(q, dup, ["z", "b", "m"]) == ["m", "b", "z"]
    with pytest.raises(ValueError):
        rank_by_cosine(q, np.zeros((0, 2)), [])


# model-level ----------------------------------------------------------------------

def task_model(kind, rng):
    bb = Backbone(BackboneConfig(vocab_size=64, dim=16, num_layers=1, ffn_dim=32, context_length=32))
    enc = EncoderConfig(hidden_dim=8, num_layers=2, dropout=0.0, relation_count=3, init_dim=16, query_dim=16)
    return TaskModel(kind, GraphTextModel(bb, enc))


def test_identical_choices_give_uniform_probabilities(f64, rng):
    m = task_model("qa", rng)
    g = micro_graph(rng, 6)
    inst = QaInstance("q0", "what uses node0", ("same",) * 5, g, (0,), (None,) * 5, 0)
    probs, pred = qa_forward(inst, m)
    np.testing.assert_allclose(probs, 0.2, atol=1e-12)
    assert pred == 0


def test_shifted_scores_keep_argmax_and_cross_entropy(f64, rng):
    s = rng.normal(size=(3, 5))
    gold = [0, 4, 2]
    for shift in (-7.0, 3.5):
        assert np.array_equal(np.argmax(s + shift, 1), np.argmax(s, 1))
        a = qa_loss(nx.softmax(Tensor(s)), gold).item()
        b = qa_loss(nx.softmax(Tensor(s + shift)), gold).item()
        assert abs(a - b) < 1e-12
    assert np.array_equal(np.argmax(np.exp(s), 1), np.argmax(s, 1))


def test_pair_model_predicts_binary(f64, rng):
    m = task_model("pair", rng)
    batch = [PairInstance(f"p{i}", micro_graph(rng, 5), "a statement", (0,), i % 2) for i in range(4)]
    assert set(m.predict(batch)) <= {0, 1}
    out = m.forward_batch(batch, training=False)
    assert out.loss.combined == pytest.approx(out.loss.task + 0.05 * out.loss.info_nce)
    assert out.z_orig.shape == out.z_new.shape == (4, 16)


def test_retrieval_rank_uses_pool(f64, rng):
    m = task_model("retrieval", rng)

    def doc(i):
        return Document(f"d{i}", f"document {i}", micro_graph(rng, 5), (0,))

    pool = tuple(doc(i) for i in range(4))
    inst = RetrievalInstance("r0", doc(9), pool[2], pool)
    ranked = retrieval_rank(inst, m)
    assert sorted(ranked) == [d.id for d in pool]
    single = RetrievalInstance("r1", doc(8), pool[0], pool[:1])
    assert retrieval_rank(single, m) == ["d0"]


def test_instance_contracts(rng):
    g = micro_graph(rng, 4)
    with pytest.raises(ValueError):
        PairInstance("x", g, "t", (0,), 2)
    with pytest.raises(ValueError):
        QaInstance("x", "q", ("a",), g, (0,), (None,), 0)
    with pytest.raises(ValueError):
        QaInstance("x", "q", ("a", "b"), g, (0,), (None, None), 2)
