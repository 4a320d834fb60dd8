import numpy as np
import pytest

from ontogcn.errors import CheckpointError, DimensionError
from ontogcn.gradcheck import check_model, tiny_problem
from ontogcn.labelgraph import build_graph, graph_from_adjacency
from ontogcn.network import (
    SINGLE_GRAPH,
    TWO_GRAPH,
    BaselineAssembly,
    GcnStack,
    ModelAssembly,
    OntologyTransfer,
    load_checkpoint,
    save_checkpoint,
    score_level,
    score_logits,
    tx_forward,
)
from ontogcn.numerics import Parameter, numerical_gradient, relative_error, sigmoid
from ontogcn.ontology import SynthSpec, generate_synthetic, preset_taxonomy


def _graph(n, m, seed=0):
    rng = np.random.default_rng(seed)
    P = rng.random((n, n))
    return graph_from_adjacency([f"n{k}" for k in range(n)], P, rng.standard_normal((n, m)))


def _bce_rows(p, t):
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return -(t * np.log(p) + (1 - t) * np.log1p(-p)).mean(axis=1)


# ---------------------------------------------------------------- GCN stack

def test_identity_propagation():
    g = graph_from_adjacency(["only"], np.ones((1, 1)), np.array([[0.3, -1.2, 2.0]]))
    assert g.A_hat.tolist() == [[1.0]]
    stack = GcnStack(g, [Parameter(np.eye(3))], final_activation="identity")
    assert np.array_equal(stack.forward(), g.X)


def test_default_widths_and_sigmoid_range():
    g = _graph(5, 300)
    stack = GcnStack.init(np.random.default_rng(0), g, [400, 512])
    assert [w.shape for w in stack.weights] == [(300, 400), (400, 512)]
    G = stack.forward()
    assert G.shape == (5, 512)
    assert np.all((G > 0) & (G < 1))


def test_gcn_width_mismatch():
    with pytest.raises(DimensionError):
        GcnStack(_graph(3, 4), [Parameter(np.ones((5, 2)))])


def test_gcn_matches_hand_propagation():
    g = _graph(4, 3, seed=2)
    rng = np.random.default_rng(3)
    W0, W1 = rng.standard_normal((3, 5)), rng.standard_normal((5, 2))
    stack = GcnStack(g, [Parameter(W0), Parameter(W1)])
    H = g.A_hat @ g.X @ W0
    H = np.where(H >= 0, H, 0.2 * H)
    expected = 1 / (1 + np.exp(-(g.A_hat @ H @ W1)))
    assert np.allclose(stack.forward(), expected, rtol=0, atol=1e-14)


# ---------------------------------------------------------------- score head and TX

def test_score_level_examples():
    G = np.eye(4, 6)
    for j in range(4):
        assert np.argmax(score_level(G[j], G)) == j
    assert np.all(score_level(np.zeros(6), G) == 0.5)
    rng = np.random.default_rng(0)
    e, G = rng.standard_normal((1, 6)), rng.standard_normal((4, 6))
    brute = [sum(e[0, k] * G[i, k] for k in range(6)) for i in range(4)]
    assert np.allclose(score_logits(e, G)[0], brute, rtol=0, atol=1e-13)
    with pytest.raises(DimensionError):
        score_level(np.ones((1, 5)), G)


def test_tx_examples():
    tx = OntologyTransfer(Parameter(np.zeros((10, 4))), Parameter(np.zeros((1, 4))))
    out = tx_forward(tx, np.full((3, 10), 0.3))
    assert out.shape == (3, 4) and np.all(out == 0.5)
    with pytest.raises(DimensionError):
        tx_forward(tx, np.ones((1, 9)))


# ---------------------------------------------------------------- assembly

def _assembly(mode, taxonomy=None, seed=0, tx_input="probs"):
    tax = taxonomy or preset_taxonomy("d19t5-shape")
    corpus = generate_synthetic(SynthSpec(tax, feature_dim=32, n_clips=50, base_rate=0.2), seed=seed)
    rng = np.random.default_rng(seed)
    if mode == SINGLE_GRAPH:
        groups = {"all": tax.all_labels}
    else:
        groups = {"fine": tax.fine_labels, "coarse": tax.coarse_labels}
    graphs = {k: build_graph(corpus, v, rng.standard_normal((len(v), 7))) for k, v in groups.items()}
    model = ModelAssembly.init(rng, tax, 32, graphs, (16,), 12, (9,), tx_input=tx_input)
    return model, corpus


@pytest.mark.parametrize("mode", [TWO_GRAPH, SINGLE_GRAPH])
def test_forward_shapes(mode):
    model, corpus = _assembly(mode)
    x = corpus.feature_matrix()[:5]
    fine, coarse_tx, _ = model.forward_step1(x)
    coarse, fine_tx, _ = model.forward_step2(x)
    assert fine.shape == fine_tx.shape == (5, 23)
    assert coarse.shape == coarse_tx.shape == (5, 8)
    one, _, _ = model.forward_step1(x[:1])
    assert one.shape == (1, 23)
    for p in (fine, coarse_tx, coarse, fine_tx):
        assert np.all((p > 0) & (p < 1))


def test_single_graph_slices_partition_nodes():
    model, corpus = _assembly(SINGLE_GRAPH)
    _, f = model._stack_for("fine")
    _, c = model._stack_for("coarse")
    idx = list(range(31))
    assert sorted(idx[f] + idx[c]) == idx and not set(idx[f]) & set(idx[c])
    G = model.gcn_all.forward()
    x = corpus.feature_matrix()[:3]
    fine, _, _ = model.forward_step1(x)
    assert np.allclose(fine, sigmoid(model.encoder.forward(x) @ G[:23].T), rtol=0, atol=1e-15)


def test_us8k_tx_shape():
    model, _ = _assembly(SINGLE_GRAPH, preset_taxonomy("us8k-shape"))
    assert model.tx1.weight.shape == (10, 4) and model.tx2.weight.shape == (4, 10)


def test_mismatched_graph_rejected():
    model, corpus = _assembly(TWO_GRAPH)
    with pytest.raises(DimensionError):
        ModelAssembly(model.taxonomy, model.encoder, model.tx1, model.tx2,
                      gcn_fine=model.gcn_coarse, gcn_coarse=model.gcn_fine)


@pytest.mark.parametrize("step, untouched", [(1, ("gcn_coarse", "tx2")), (2, ("gcn_fine", "tx1"))])
def test_step_reachability(step, untouched):
    model, corpus = _assembly(TWO_GRAPH)
    model.zero_grad()
    idx = np.arange(8)
    model.step_loss(step, corpus.feature_matrix(idx), corpus.fine_targets(idx),
                    corpus.coarse_targets(idx))
    groups = model.parameter_groups()
    for name in untouched:
        assert all(not p.grad.any() for p in groups[name])
    touched = {"gcn_fine", "tx1"} if step == 1 else {"gcn_coarse", "tx2"}
    for name in touched | {"encoder"}:
        assert any(p.grad.any() for p in groups[name])


def test_alpha_one_leaves_tx_untrained():
    model, corpus = _assembly(TWO_GRAPH)
    model.zero_grad()
    model.step_loss(1, corpus.feature_matrix(), corpus.fine_targets(), corpus.coarse_targets(),
                    alpha=1.0)
    assert not model.tx1.weight.grad.any() and not model.tx1.bias.grad.any()


def test_backward_requires_matching_forward():
    model, corpus = _assembly(TWO_GRAPH)
    x = corpus.feature_matrix()[:2]
    _, _, cache = model.forward_step1(x)
    model.forward_step2(x)
    with pytest.raises(RuntimeError):
        model.backward(cache, np.zeros((2, 23)), np.zeros((2, 8)))


@pytest.mark.parametrize("seed", range(3))
def test_label_order_equivariance(seed):
    model, corpus = _assembly(TWO_GRAPH, seed=seed)
    x, yf, yc = corpus.feature_matrix(), corpus.fine_targets(), corpus.coarse_targets()
    o = np.random.default_rng(seed).permutation(23)
    fine_g = model.gcn_fine.graph.permuted(o)
    perm = ModelAssembly(
        model.taxonomy, model.encoder,
        OntologyTransfer(Parameter(model.tx1.weight.value[o]), model.tx1.bias),
        OntologyTransfer(Parameter(model.tx2.weight.value[:, o]),
                         Parameter(model.tx2.bias.value[:, o])),
        gcn_fine=GcnStack(fine_g, model.gcn_fine.weights),
        gcn_coarse=model.gcn_coarse,
    )
    f, c_tx, _ = model.forward_step1(x)
    pf, pc_tx, _ = perm.forward_step1(x)
    loss = 0.5 * _bce_rows(f, yf) + 0.5 * _bce_rows(c_tx, yc)
    loss_p = 0.5 * _bce_rows(pf, yf[:, o]) + 0.5 * _bce_rows(pc_tx, yc)
    assert np.allclose(loss, loss_p, rtol=0, atol=1e-12)
    c, f_tx, _ = model.forward_step2(x)
    pc, pf_tx, _ = perm.forward_step2(x)
    assert np.allclose(f_tx[:, o], pf_tx, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("mode", [TWO_GRAPH, SINGLE_GRAPH])
@pytest.mark.parametrize("tx_input", ["probs", "logits"])
def test_end_to_end_gradients(mode, tx_input):
    model, batch = tiny_problem(3, mode, tx_input)
    results = check_model(model, batch)
    assert {r.step for r in results} == {1, 2}
    assert all(r.max_rel_error < 1e-5 for r in results), results


def test_gradients_with_literal_reweight():
    model, batch = tiny_problem(4, TWO_GRAPH, include_self=True)
    assert all(r.passed for r in check_model(model, batch))


def test_baseline_gradients():
    tax = preset_taxonomy("us8k-shape")
    corpus = generate_synthetic(SynthSpec(tax, feature_dim=5, n_clips=6), seed=0)
    model = BaselineAssembly.init(np.random.default_rng(0), tax, 5, (4,), 3)
    x, yf, yc = corpus.feature_matrix(), corpus.fine_targets(), corpus.coarse_targets()
    for step in (1, 2):
        model.zero_grad()
        model.step_loss(step, x, yf, yc, 0.7)
        for name, prm in model.named_parameters().items():
            num = numerical_gradient(
                lambda: model.step_loss(step, x, yf, yc, 0.7, backward=False), prm.value)
            assert relative_error(prm.grad, num) < 1e-5, name
        model.zero_grad()


# ---------------------------------------------------------------- checkpoint

@pytest.mark.parametrize("mode", [TWO_GRAPH, SINGLE_GRAPH])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, mode):
    model, corpus = _assembly(mode, tx_input="logits")
    path = tmp_path / "ck.txt"
    save_checkpoint(path, model, {"note": "x"})
    back, meta = load_checkpoint(path)
    assert meta["note"] == "x"
    assert back.mode == mode and back.tx_input == "logits"
    assert back.taxonomy == model.taxonomy
    a, b = model.named_parameters(), back.named_parameters()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k].value, b[k].value) for k in a)
    for key, g in model.graphs().items():
        h = back.graphs()[key]
        assert h.labels == g.labels and (h.tau, h.p) == (g.tau, g.p)
        assert np.array_equal(h.A_hat, g.A_hat) and np.array_equal(h.X, g.X)
    x = corpus.feature_matrix()
    for p, q in zip(model.predict(x), back.predict(x)):
        assert np.array_equal(p, q)


def test_checkpoint_parameter_names():
    model, _ = _assembly(TWO_GRAPH)
    names = set(model.named_parameters())
    assert {"encoder.0.W", "encoder.0.b", "gcn_fine.1.W", "gcn_coarse.0.W", "tx1.W", "tx2.b"} <= names


def test_checkpoint_version_mismatch(tmp_path):
    model, _ = _assembly(TWO_GRAPH)
    path = tmp_path / "ck.txt"
    save_checkpoint(path, model)
    text = path.read_text().splitlines()
    text[0] = text[0].rsplit(" ", 1)[0] + " 99"
    path.write_text("\n".join(text) + "\n")
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_missing_matrix(tmp_path):
    model, _ = _assembly(TWO_GRAPH)
    path = tmp_path / "ck.txt"
    save_checkpoint(path, model)
    lines = path.read_text().splitlines()
    start = next(i for i, l in enumerate(lines) if l.startswith("matrix tx2.b"))
    path.write_text("\n".join(lines[:start] + lines[start + 2:]) + "\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
