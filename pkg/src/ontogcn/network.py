"""Encoder, GCN stacks, ontology transfer layers and their assembly.

Step 1 scores fine labels against the fine-level node matrix and maps the
fine probabilities through TX1 to coarse; step 2 mirrors it (coarse scored
directly, fine through TX2). In single-graph mode one GCN over fine+coarse
nodes serves both levels: fine nodes come first, then coarse nodes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CheckpointError, DimensionError
from .labelgraph import LabelGraph, binarize
from .numerics import (
    DEFAULT_SLOPE,
    LeakyReLU,
    Linear,
    Parameter,
    Sigmoid,
    as_matrix,
    bce_with_logits,
    bce_with_logits_grad,
    glorot_uniform,
    make_activation,
    sigmoid,
)
from .ontology import Taxonomy

TWO_GRAPH = "two-graph"
SINGLE_GRAPH = "single-graph"
GRAPH_MODES = (TWO_GRAPH, SINGLE_GRAPH)

CHECKPOINT_MAGIC = "ontogcn-checkpoint"
CHECKPOINT_VERSION = 1


class GcnStack:
    """``L[j+1] = act_j(A_hat @ L[j] @ W_j)`` with ``L[0] = X`` held constant."""

    def __init__(self, graph: LabelGraph, weights: Sequence[Parameter],
                 slope: float = DEFAULT_SLOPE, final_activation: str = "sigmoid"):
        self.graph = graph
        self.weights = list(weights)
        self.slope = slope
        if not self.weights:
            raise DimensionError("a GCN stack needs at least one layer")
        width = graph.embed_dim
        for j, w in enumerate(self.weights):
            if w.shape[0] != width:
                raise DimensionError(
                    f"GCN layer {j} expects input width {w.shape[0]}, got {width}"
                )
            width = w.shape[1]
        names = ["leaky_relu"] * (len(self.weights) - 1) + [final_activation]
        self.activations = [make_activation(a, slope) for a in names]
        self._inputs: list[np.ndarray] | None = None

    @classmethod
    def init(cls, rng: np.random.Generator, graph: LabelGraph, widths: Sequence[int],
             name: str = "gcn", **kw) -> "GcnStack":
        dims = [graph.embed_dim, *widths]
        weights = [
            Parameter(glorot_uniform(rng, a, b), name=f"{name}.{j}.W")
            for j, (a, b) in enumerate(zip(dims[:-1], dims[1:]))
        ]
        return cls(graph, weights, **kw)

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[Parameter]:
        return list(self.weights)

    def forward(self) -> np.ndarray:
        L = self.graph.X
        A_hat = self.graph.A_hat
        inputs = []
        for w, act in zip(self.weights, self.activations):
            AL = A_hat @ L
            inputs.append(AL)
            L = act.forward(AL @ w.value)
        self._inputs = inputs
        return L

    def backward(self, dG: np.ndarray) -> None:
        if self._inputs is None:
            raise RuntimeError("GcnStack.backward called before forward")
        inputs, self._inputs = self._inputs, None
        A_hat = self.graph.A_hat
        d = dG
        for j in reversed(range(len(self.weights))):
            dZ = self.activations[j].backward(d)
            w = self.weights[j]
            w.grad += inputs[j].T @ dZ
            if j:
                d = A_hat.T @ (dZ @ w.value.T)


def gcn_forward(stack: GcnStack) -> np.ndarray:
    return stack.forward()


class OntologyTransfer:
    """One sigmoid layer mapping one level's predictions to the other level."""

    def __init__(self, weight: Parameter, bias: Parameter):
        self.linear = Linear(weight, bias)
        self.act = Sigmoid()

    @classmethod
    def init(cls, rng: np.random.Generator, n_src: int, n_dst: int, name: str = "tx"):
        lin = Linear.init(rng, n_src, n_dst, bias=True, name=name)
        return cls(lin.weight, lin.bias)

    @property
    def weight(self) -> Parameter:
        return self.linear.weight

    @property
    def bias(self) -> Parameter:
        return self.linear.bias

    def parameters(self) -> list[Parameter]:
        return self.linear.parameters()

    def forward(self, level_pred) -> np.ndarray:
        return self.act.forward(self.linear.forward(level_pred))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return self.linear.backward(self.act.backward(dy))


def tx_forward(tx: OntologyTransfer, level_pred) -> np.ndarray:
    return tx.forward(level_pred)


class BaseEncoder:
    """Perceptron ``F -> h1 -> ... -> E``; leaky ReLU between layers, linear output."""

    def __init__(self, layers: Sequence[Linear], slope: float = DEFAULT_SLOPE):
        self.layers = list(layers)
        self.acts = [LeakyReLU(slope) for _ in self.layers[:-1]]

    @classmethod
    def init(cls, rng: np.random.Generator, widths: Sequence[int], slope: float = DEFAULT_SLOPE,
             name: str = "encoder") -> "BaseEncoder":
        if len(widths) < 2:
            raise DimensionError(f"encoder needs at least input and output widths, got {widths}")
        layers = [
            Linear.init(rng, a, b, bias=True, name=f"{name}.{j}")
            for j, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]
        return cls(layers, slope)

    @property
    def in_width(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_width(self) -> int:
        return self.layers[-1].weight.shape[1]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x) -> np.ndarray:
        h = as_matrix(x)
        if h.shape[1] != self.in_width:
            raise DimensionError(f"encoder expects {self.in_width} features, got {h.shape[1]}")
        for k, layer in enumerate(self.layers):
            h = layer.forward(h)
            if k < len(self.acts):
                h = self.acts[k].forward(h)
        return h

    def backward(self, de: np.ndarray) -> None:
        d = de
        for k in reversed(range(len(self.layers))):
            if k < len(self.acts):
                d = self.acts[k].backward(d)
            d = self.layers[k].backward(d)


def score_logits(e, G) -> np.ndarray:
    e = as_matrix(e)
    G = as_matrix(G)
    if e.shape[1] != G.shape[1]:
        raise DimensionError(
            f"embedding width {e.shape[1]} does not match node width {G.shape[1]}"
        )
    return e @ G.T


def score_level(e, G) -> np.ndarray:
    """Per-label probabilities ``sigmoid(e @ G.T)``."""
    return sigmoid(score_logits(e, G))


@dataclass
class StepCache:
    step: int
    token: int
    e: np.ndarray
    G: np.ndarray  # node matrix used for direct scoring
    logits: np.ndarray
    direct: np.ndarray
    tx_logits: np.ndarray
    via_tx: np.ndarray


class ModelAssembly:
    def __init__(self, taxonomy: Taxonomy, encoder: BaseEncoder, tx1: OntologyTransfer,
                 tx2: OntologyTransfer, gcn_fine: GcnStack | None = None,
                 gcn_coarse: GcnStack | None = None, gcn_all: GcnStack | None = None,
                 tx_input: str = "probs"):
        self.taxonomy = taxonomy
        self.encoder = encoder
        self.tx1 = tx1
        self.tx2 = tx2
        self.gcn_fine = gcn_fine
        self.gcn_coarse = gcn_coarse
        self.gcn_all = gcn_all
        if tx_input not in ("probs", "logits"):
            raise ValueError(f"tx_input must be 'probs' or 'logits', got {tx_input!r}")
        self.tx_input = tx_input
        nf, nc = taxonomy.n_fine, taxonomy.n_coarse
        if gcn_all is not None:
            if gcn_fine is not None or gcn_coarse is not None:
                raise ValueError("give either gcn_all or the gcn_fine/gcn_coarse pair")
            self.mode = SINGLE_GRAPH
            if gcn_all.graph.n_nodes != nf + nc:
                raise DimensionError(
                    f"single graph has {gcn_all.graph.n_nodes} nodes, taxonomy has {nf}+{nc}"
                )
            stacks = [gcn_all]
        else:
            if gcn_fine is None or gcn_coarse is None:
                raise ValueError("two-graph mode needs both gcn_fine and gcn_coarse")
            self.mode = TWO_GRAPH
            if gcn_fine.graph.n_nodes != nf or gcn_coarse.graph.n_nodes != nc:
                raise DimensionError(
                    f"graphs have {gcn_fine.graph.n_nodes}/{gcn_coarse.graph.n_nodes} nodes, "
                    f"taxonomy has {nf}/{nc}"
                )
            stacks = [gcn_fine, gcn_coarse]
        for s in stacks:
            if s.out_width != encoder.out_width:
                raise DimensionError(
                    f"GCN output width {s.out_width} != encoder width {encoder.out_width}"
                )
        if tx1.weight.shape != (nf, nc) or tx2.weight.shape != (nc, nf):
            raise DimensionError("TX1 must map fine->coarse and TX2 coarse->fine")
        self._token = 0

    @classmethod
    def init(cls, rng: np.random.Generator, taxonomy: Taxonomy, feature_dim: int,
             graphs: dict[str, LabelGraph], encoder_hidden: Sequence[int] = (256,),
             embed_dim: int = 512, gcn_hidden: Sequence[int] = (400,),
             tx_input: str = "probs", slope: float = DEFAULT_SLOPE) -> "ModelAssembly":
        """``graphs`` holds ``fine`` and ``coarse`` (two-graph) or ``all`` (single-graph)."""
        encoder = BaseEncoder.init(rng, [feature_dim, *encoder_hidden, embed_dim], slope)
        widths = [*gcn_hidden, embed_dim]
        kw = {}
        if "all" in graphs:
            kw["gcn_all"] = GcnStack.init(rng, graphs["all"], widths, "gcn_all", slope=slope)
        else:
            kw["gcn_fine"] = GcnStack.init(rng, graphs["fine"], widths, "gcn_fine", slope=slope)
            kw["gcn_coarse"] = GcnStack.init(rng, graphs["coarse"], widths, "gcn_coarse",
                                             slope=slope)
        tx1 = OntologyTransfer.init(rng, taxonomy.n_fine, taxonomy.n_coarse, "tx1")
        tx2 = OntologyTransfer.init(rng, taxonomy.n_coarse, taxonomy.n_fine, "tx2")
        return cls(taxonomy, encoder, tx1, tx2, tx_input=tx_input, **kw)

    # ------------------------------------------------------------ parameters

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for j, layer in enumerate(self.encoder.layers):
            out[f"encoder.{j}.W"] = layer.weight
            out[f"encoder.{j}.b"] = layer.bias
        for name in ("gcn_fine", "gcn_coarse", "gcn_all"):
            stack = getattr(self, name)
            if stack is not None:
                for j, w in enumerate(stack.weights):
                    out[f"{name}.{j}.W"] = w
        for name in ("tx1", "tx2"):
            tx = getattr(self, name)
            out[f"{name}.W"] = tx.weight
            out[f"{name}.b"] = tx.bias
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def parameter_groups(self) -> dict[str, list[Parameter]]:
        groups: dict[str, list[Parameter]] = {}
        for name, prm in self.named_parameters().items():
            groups.setdefault(name.split(".")[0], []).append(prm)
        return groups

    def graphs(self) -> dict[str, LabelGraph]:
        if self.mode == SINGLE_GRAPH:
            return {"all": self.gcn_all.graph}
        return {"fine": self.gcn_fine.graph, "coarse": self.gcn_coarse.graph}

    def zero_grad(self) -> None:
        for prm in self.parameters():
            prm.zero_grad()

    # ------------------------------------------------------------ forward

    def _stack_for(self, level: str) -> tuple[GcnStack, slice]:
        nf = self.taxonomy.n_fine
        if self.mode == SINGLE_GRAPH:
            sl = slice(0, nf) if level == "fine" else slice(nf, nf + self.taxonomy.n_coarse)
            return self.gcn_all, sl
        stack = self.gcn_fine if level == "fine" else self.gcn_coarse
        return stack, slice(0, stack.graph.n_nodes)

    def node_matrix(self, level: str) -> np.ndarray:
        stack, sl = self._stack_for(level)
        return stack.forward()[sl]

    def _forward(self, step: int, features):
        level, tx = ("fine", self.tx1) if step == 1 else ("coarse", self.tx2)
        e = self.encoder.forward(features)
        stack, sl = self._stack_for(level)
        G = stack.forward()[sl]
        logits = score_logits(e, G)
        direct = sigmoid(logits)
        tx_logits = tx.linear.forward(direct if self.tx_input == "probs" else logits)
        via_tx = sigmoid(tx_logits)
        self._token += 1
        return direct, via_tx, StepCache(step, self._token, e, G, logits, direct, tx_logits, via_tx)

    def forward_step1(self, features):
        """``(fine_pred, coarse_pred_via_tx1, cache)``."""
        return self._forward(1, features)

    def forward_step2(self, features):
        """``(coarse_pred, fine_pred_via_tx2, cache)``."""
        return self._forward(2, features)

    def backward(self, cache: StepCache, d_logits: np.ndarray, d_tx_logits: np.ndarray) -> None:
        """Accumulate parameter gradients from loss gradients w.r.t. the two logit blocks.

        ``d_logits`` is w.r.t. the directly scored level's logits, ``d_tx_logits``
        w.r.t. the TX layer's pre-sigmoid output.
        """
        if cache.token != self._token:
            raise RuntimeError("backward must follow the matching forward")
        level, tx = ("fine", self.tx1) if cache.step == 1 else ("coarse", self.tx2)
        d_in = tx.linear.backward(d_tx_logits)
        if self.tx_input == "probs":
            d_logits = d_logits + d_in * cache.direct * (1.0 - cache.direct)
        else:
            d_logits = d_logits + d_in
        de = d_logits @ cache.G
        dG = d_logits.T @ cache.e
        stack, sl = self._stack_for(level)
        if self.mode == SINGLE_GRAPH:
            full = np.zeros((stack.graph.n_nodes, dG.shape[1]))
            full[sl] = dG
            dG = full
        stack.backward(dG)
        self.encoder.backward(de)

    def step_loss(self, step: int, features, fine_targets, coarse_targets,
                  alpha: float = 0.5, backward: bool = True) -> float:
        """Weighted BCE of one training step; with ``backward`` the gradients are accumulated."""
        _, _, cache = self._forward(step, features)
        t_direct, t_tx = (fine_targets, coarse_targets) if step == 1 else (coarse_targets, fine_targets)
        loss = (alpha * bce_with_logits(cache.logits, t_direct)
                + (1.0 - alpha) * bce_with_logits(cache.tx_logits, t_tx))
        if backward:
            self.backward(cache, alpha * bce_with_logits_grad(cache.logits, t_direct),
                          (1.0 - alpha) * bce_with_logits_grad(cache.tx_logits, t_tx))
        return loss

    def predict(self, features) -> tuple[np.ndarray, np.ndarray]:
        """Directly scored probabilities ``(fine, coarse)``."""
        e = self.encoder.forward(features)
        return score_level(e, self.node_matrix("fine")), score_level(e, self.node_matrix("coarse"))

    def embed(self, features) -> np.ndarray:
        return self.encoder.forward(features)


class BaselineAssembly:
    """Encoder with independent per-level linear sigmoid heads; no graph, no TX.

    Trained with the same two-step loop: both steps score both levels directly,
    step 1 weighting fine by ``alpha`` and step 2 weighting coarse by ``alpha``.
    """

    mode = "baseline"

    def __init__(self, taxonomy: Taxonomy, encoder: BaseEncoder, head_fine: Linear,
                 head_coarse: Linear):
        self.taxonomy = taxonomy
        self.encoder = encoder
        self.head_fine = head_fine
        self.head_coarse = head_coarse

    @classmethod
    def init(cls, rng: np.random.Generator, taxonomy: Taxonomy, feature_dim: int,
             encoder_hidden: Sequence[int] = (256,), embed_dim: int = 512,
             slope: float = DEFAULT_SLOPE) -> "BaselineAssembly":
        encoder = BaseEncoder.init(rng, [feature_dim, *encoder_hidden, embed_dim], slope)
        return cls(taxonomy, encoder,
                   Linear.init(rng, embed_dim, taxonomy.n_fine, name="head_fine"),
                   Linear.init(rng, embed_dim, taxonomy.n_coarse, name="head_coarse"))

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for j, layer in enumerate(self.encoder.layers):
            out[f"encoder.{j}.W"] = layer.weight
            out[f"encoder.{j}.b"] = layer.bias
        for name in ("head_fine", "head_coarse"):
            head = getattr(self, name)
            out[f"{name}.W"] = head.weight
            out[f"{name}.b"] = head.bias
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def parameter_groups(self) -> dict[str, list[Parameter]]:
        groups: dict[str, list[Parameter]] = {}
        for name, prm in self.named_parameters().items():
            groups.setdefault(name.split(".")[0], []).append(prm)
        return groups

    def zero_grad(self) -> None:
        for prm in self.parameters():
            prm.zero_grad()

    def step_loss(self, step: int, features, fine_targets, coarse_targets,
                  alpha: float = 0.5, backward: bool = True) -> float:
        e = self.encoder.forward(features)
        sf = self.head_fine.forward(e)
        sc = self.head_coarse.forward(e)
        wf, wc = (alpha, 1.0 - alpha) if step == 1 else (1.0 - alpha, alpha)
        loss = wf * bce_with_logits(sf, fine_targets) + wc * bce_with_logits(sc, coarse_targets)
        if backward:
            de = self.head_fine.backward(wf * bce_with_logits_grad(sf, fine_targets))
            de = de + self.head_coarse.backward(wc * bce_with_logits_grad(sc, coarse_targets))
            self.encoder.backward(de)
        return loss

    def predict(self, features) -> tuple[np.ndarray, np.ndarray]:
        e = self.encoder.forward(features)
        return sigmoid(self.head_fine.forward(e)), sigmoid(self.head_coarse.forward(e))

    def embed(self, features) -> np.ndarray:
        return self.encoder.forward(features)


# ---------------------------------------------------------------- checkpoints


def _write_matrix(fh, name: str, M: np.ndarray) -> None:
    M = as_matrix(M)
    fh.write(f"matrix {name} {M.shape[0]} {M.shape[1]}\n")
    for row in M:
        fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def save_checkpoint(path, model: ModelAssembly, meta: dict | None = None) -> None:
    """Text checkpoint: ``key = json`` header, then named row-major matrices.

    Floats are written with ``repr`` so a load reproduces them bit for bit.
    """
    header = {
        "mode": model.mode,
        "tx_input": model.tx_input,
        "coarse_labels": list(model.taxonomy.coarse_labels),
        "fine_labels": list(model.taxonomy.fine_labels),
        "parent": list(model.taxonomy.parent),
        "encoder_layers": len(model.encoder.layers),
        "slope": model.encoder.acts[0].slope if model.encoder.acts else DEFAULT_SLOPE,
    }
    graphs = model.graphs()
    some = next(iter(graphs.values()))
    header["tau"] = some.tau
    header["p"] = some.p
    header["graphs"] = {k: list(g.labels) for k, g in graphs.items()}
    header["meta"] = meta or {}
    params = model.named_parameters()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n")
        for key, value in header.items():
            fh.write(f"{key} = {json.dumps(value, sort_keys=True)}\n")
        fh.write("---\n")
        for key, g in graphs.items():
            for stage, M in (("P", g.P), ("A_rw", g.A_rw), ("A_hat", g.A_hat), ("X", g.X)):
                _write_matrix(fh, f"graph.{key}.{stage}", M)
        for name, prm in params.items():
            _write_matrix(fh, name, prm.value)


def _read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().split()
        if len(first) != 2 or first[0] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        if int(first[1]) != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {first[1]}, this build reads {CHECKPOINT_VERSION}"
            )
        header = {}
        for line in fh:
            line = line.rstrip("\n")
            if line == "---":
                break
            key, _, value = line.partition(" = ")
            header[key] = json.loads(value)
        mats: dict[str, np.ndarray] = {}
        for line in fh:
            tag, name, r, c = line.split()
            if tag != "matrix":
                raise CheckpointError(f"{path}: malformed matrix header {line!r}")
            rows, cols = int(r), int(c)
            M = np.empty((rows, cols))
            for i in range(rows):
                vals = fh.readline().split()
                if len(vals) != cols:
                    raise CheckpointError(f"{path}: matrix {name} row {i} has {len(vals)} values")
                M[i] = [float(v) for v in vals]
            mats[name] = M
    return header, mats


def load_checkpoint(path) -> tuple[ModelAssembly, dict]:
    """Returns the model and the ``meta`` dict saved with it."""
    header, mats = _read_checkpoint(path)
    try:
        taxonomy = Taxonomy(header["coarse_labels"], header["fine_labels"], header["parent"])
        slope = header["slope"]
        graphs = {}
        for key, labels in header["graphs"].items():
            P = mats[f"graph.{key}.P"]
            graphs[key] = LabelGraph(
                tuple(labels), P, binarize(P, header["tau"]), mats[f"graph.{key}.A_rw"],
                mats[f"graph.{key}.A_hat"], mats[f"graph.{key}.X"], header["tau"], header["p"],
            )

        def prm(name):
            return Parameter(mats[name], name=name)

        layers = [Linear(prm(f"encoder.{j}.W"), prm(f"encoder.{j}.b"))
                  for j in range(header["encoder_layers"])]
        encoder = BaseEncoder(layers, slope)

        def stack(name, graph):
            weights = []
            j = 0
            while f"{name}.{j}.W" in mats:
                weights.append(prm(f"{name}.{j}.W"))
                j += 1
            return GcnStack(graph, weights, slope=slope)

        kw = {}
        if header["mode"] == SINGLE_GRAPH:
            kw["gcn_all"] = stack("gcn_all", graphs["all"])
        else:
            kw["gcn_fine"] = stack("gcn_fine", graphs["fine"])
            kw["gcn_coarse"] = stack("gcn_coarse", graphs["coarse"])
        tx1 = OntologyTransfer(prm("tx1.W"), prm("tx1.b"))
        tx2 = OntologyTransfer(prm("tx2.W"), prm("tx2.b"))
        model = ModelAssembly(taxonomy, encoder, tx1, tx2, tx_input=header["tx_input"], **kw)
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing entry {exc}") from None
    return model, header.get("meta", {})
