"""Finite-difference verification of the assembly's step-1 and step-2 gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .labelgraph import build_graph
from .network import SINGLE_GRAPH, TWO_GRAPH, ModelAssembly
from .numerics import numerical_gradient, relative_error
from .ontology import SynthSpec, default_cooccurrence_bias, generate_synthetic, grid_taxonomy

TOLERANCE = 1e-5


@dataclass
class GroupResult:
    step: int
    group: str
    max_rel_error: float
    n_entries: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def tiny_problem(seed: int = 0, mode: str = TWO_GRAPH, tx_input: str = "probs",
                 batch: int = 4, include_self: bool = False):
    """A small random assembly plus one batch ``(features, fine, coarse)``."""
    tax = grid_taxonomy(2, [2, 3])
    spec = SynthSpec(tax, feature_dim=4, n_clips=40, noise_sigma=0.5,
                     bias=default_cooccurrence_bias(tax, sibling=0.3, seed=seed), base_rate=0.3)
    corpus = generate_synthetic(spec, seed=seed)
    rng = np.random.default_rng(seed)
    node_dim = 5
    if mode == SINGLE_GRAPH:
        labels = {"all": tax.all_labels}
    else:
        labels = {"fine": tax.fine_labels, "coarse": tax.coarse_labels}
    graphs = {
        k: build_graph(corpus, v, rng.standard_normal((len(v), node_dim)), include_self=include_self)
        for k, v in labels.items()
    }
    model = ModelAssembly.init(rng, tax, 4, graphs, encoder_hidden=(6,), embed_dim=3,
                               gcn_hidden=(4,), tx_input=tx_input)
    idx = np.arange(batch)
    return model, (corpus.feature_matrix(idx), corpus.fine_targets(idx), corpus.coarse_targets(idx))


def check_model(model, batch, alpha: float = 0.5, h: float = 1e-5) -> list[GroupResult]:
    """Max relative error per (step, parameter group) between backward and central differences."""
    features, fine_t, coarse_t = batch
    results = []
    for step in (1, 2):
        model.zero_grad()
        model.step_loss(step, features, fine_t, coarse_t, alpha)
        analytic = {name: prm.grad.copy() for name, prm in model.named_parameters().items()}
        model.zero_grad()

        def loss():
            return model.step_loss(step, features, fine_t, coarse_t, alpha, backward=False)

        groups: dict[str, list[str]] = {}
        for name in analytic:
            groups.setdefault(name.split(".")[0], []).append(name)
        for group, names in groups.items():
            worst = 0.0
            count = 0
            for name in names:
                prm = model.named_parameters()[name]
                numeric = numerical_gradient(loss, prm.value, h)
                worst = max(worst, relative_error(analytic[name], numeric))
                count += prm.value.size
            results.append(GroupResult(step, group, worst, count))
    return results


def run_gradcheck(seeds=range(10), h: float = 1e-5, modes=(TWO_GRAPH, SINGLE_GRAPH),
                  corrupt: bool = False) -> list[tuple[int, str, GroupResult]]:
    """Gradient check over fresh tiny models; ``corrupt`` scales one backward (negative control)."""
    out = []
    for seed in seeds:
        for mode in modes:
            model, batch = tiny_problem(seed, mode)
            if corrupt:
                _corrupt_backward(model)
            for r in check_model(model, batch, h=h):
                out.append((seed, mode, r))
    return out


def _corrupt_backward(model: ModelAssembly) -> None:
    """Test hook: make TX layers report 1.5x their true weight gradient."""
    for tx in (model.tx1, model.tx2):
        lin = tx.linear
        original = lin.backward

        def skewed(dy, _orig=original, _lin=lin):
            before = _lin.weight.grad.copy()
            dx = _orig(dy)
            _lin.weight.grad += 0.5 * (_lin.weight.grad - before)
            return dx

        lin.backward = skewed
