"""Two-step alternating SGD: step 1 fine-direct / coarse-via-TX1, step 2 the mirror image."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping

import numpy as np

from .errors import CheckpointError, ConfigError, TrainingError
from .labelgraph import DEFAULT_EMBED_DIM, DEFAULT_P, DEFAULT_TAU, LabelGraph, build_graph, load_embeddings
from .network import (
    SINGLE_GRAPH,
    TWO_GRAPH,
    BaselineAssembly,
    ModelAssembly,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import sgd_step
from .ontology import AnnotationCorpus

log = logging.getLogger(__name__)

EARLY_STOP_WINDOW = 200
EARLY_STOP_DELTA = 1e-4


@dataclass
class TrainConfig:
    lr: float = 0.001
    iterations: int = 8000
    batch_size: int = 32
    alpha: float = 0.5
    seed: int = 0
    mode: str = TWO_GRAPH
    tau: float = DEFAULT_TAU
    p: float = DEFAULT_P
    eval_every: int = 500
    encoder_hidden: tuple[int, ...] = (256,)
    embed_dim: int = 512
    gcn_hidden: tuple[int, ...] = (400,)
    node_dim: int = DEFAULT_EMBED_DIM
    architecture: str = "ontology"  # or "baseline"
    tx_input: str = "probs"
    include_self: bool = False
    fresh_batch: bool = False
    early_stop: bool = False

    def __post_init__(self):
        self.encoder_hidden = tuple(int(v) for v in self.encoder_hidden)
        self.gcn_hidden = tuple(int(v) for v in self.gcn_hidden)
        self.validate()

    def validate(self) -> None:
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.mode not in (TWO_GRAPH, SINGLE_GRAPH):
            raise ConfigError(f"mode must be {TWO_GRAPH!r} or {SINGLE_GRAPH!r}, got {self.mode!r}")
        if self.architecture not in ("ontology", "baseline"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.tx_input not in ("probs", "logits"):
            raise ConfigError(f"tx_input must be 'probs' or 'logits', got {self.tx_input!r}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["gcn_hidden"] = list(self.gcn_hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training keys: {unknown}")
        return cls(**d)


@dataclass
class TrainState:
    model: ModelAssembly | BaselineAssembly
    config: TrainConfig
    rng: np.random.Generator
    iteration: int = 0
    history: list[tuple[int, int, float]] = field(default_factory=list)
    order: np.ndarray | None = None
    cursor: int = 0

    def losses(self, step: int) -> list[float]:
        return [loss for _, s, loss in self.history if s == step]

    def next_batch(self, n_clips: int) -> np.ndarray:
        """Indices of the next mini-batch; reshuffles at each epoch boundary."""
        if self.order is None or self.cursor >= len(self.order):
            self.order = self.rng.permutation(n_clips)
            self.cursor = 0
        batch = self.order[self.cursor:self.cursor + self.config.batch_size]
        self.cursor += len(batch)
        return batch

    def to_meta(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "iteration": self.iteration,
            "rng": self.rng.bit_generator.state,
            "order": None if self.order is None else [int(i) for i in self.order],
            "cursor": self.cursor,
            "history": [[i, s, loss] for i, s, loss in self.history],
        }


def corpus_graphs(corpus: AnnotationCorpus, config: TrainConfig, embeddings=None,
                  embedding_path=None, fallback: bool = True) -> dict[str, LabelGraph]:
    """Label graphs for the configured mode; node features from ``embeddings`` or the embedding file."""
    tax = corpus.taxonomy
    if config.mode == SINGLE_GRAPH:
        groups = {"all": tax.all_labels}
    else:
        groups = {"fine": tax.fine_labels, "coarse": tax.coarse_labels}
    graphs = {}
    for key, labels in groups.items():
        if embeddings is None:
            X = load_embeddings(embedding_path, labels, config.node_dim, fallback=fallback,
                                seed=config.seed)
        else:
            X = embeddings
        graphs[key] = build_graph(corpus, labels, X, config.tau, config.p,
                                  include_self=config.include_self)
    return graphs


def _seeds(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_ss, data_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(data_ss)


def init_state(corpus: AnnotationCorpus, config: TrainConfig, graphs=None, **graph_kw) -> TrainState:
    init_rng, data_rng = _seeds(config.seed)
    if config.architecture == "baseline":
        model = BaselineAssembly.init(init_rng, corpus.taxonomy, corpus.feature_dim,
                                      config.encoder_hidden, config.embed_dim)
    else:
        if graphs is None:
            graphs = corpus_graphs(corpus, config, **graph_kw)
        model = ModelAssembly.init(init_rng, corpus.taxonomy, corpus.feature_dim, graphs,
                                   config.encoder_hidden, config.embed_dim, config.gcn_hidden,
                                   tx_input=config.tx_input)
    return TrainState(model, config, data_rng)


def _check_finite(loss: float, state: TrainState, step: int, batch_ids) -> None:
    if not np.isfinite(loss):
        ids = ", ".join(batch_ids[:8]) + (" ..." if len(batch_ids) > 8 else "")
        raise TrainingError(
            f"non-finite step-{step} loss {loss} at iteration {state.iteration} (batch: {ids})"
        )


def _train_step(step: int, state: TrainState, batch, batch_ids=()) -> float:
    features, fine_t, coarse_t = batch
    cfg = state.config
    model = state.model
    model.zero_grad()
    loss = model.step_loss(step, features, fine_t, coarse_t, cfg.alpha)
    _check_finite(loss, state, step, list(batch_ids))
    sgd_step(model.parameters(), cfg.lr)
    state.history.append((state.iteration, step, loss))
    return loss


def train_step1(state: TrainState, batch, batch_ids=()) -> float:
    """``alpha * BCE(fine) + (1 - alpha) * BCE(TX1(fine), coarse)``, then one SGD update."""
    return _train_step(1, state, batch, batch_ids)


def train_step2(state: TrainState, batch, batch_ids=()) -> float:
    return _train_step(2, state, batch, batch_ids)


def combined_loss(model, batch, alpha: float) -> float:
    """Step-1 loss plus step-2 loss at the current parameters, without gradients."""
    features, fine_t, coarse_t = batch
    return (model.step_loss(1, features, fine_t, coarse_t, alpha, backward=False)
            + model.step_loss(2, features, fine_t, coarse_t, alpha, backward=False))


def _plateaued(losses: list[float]) -> bool:
    w = EARLY_STOP_WINDOW
    if len(losses) < 2 * w:
        return False
    prev = float(np.mean(losses[-2 * w:-w]))
    last = float(np.mean(losses[-w:]))
    return prev - last < EARLY_STOP_DELTA


def fit(corpus: AnnotationCorpus, config: TrainConfig, state: TrainState | None = None,
        out_dir=None, val_corpus: AnnotationCorpus | None = None,
        on_eval: Callable[[TrainState], None] | None = None, **graph_kw) -> TrainState:
    """Run the alternating loop until ``config.iterations`` iterations have completed.

    Passing a restored ``state`` continues from its iteration counter. With
    ``out_dir`` a loss log, periodic checkpoints and (given ``val_corpus``)
    validation metrics are written there.
    """
    if len(corpus) == 0:
        raise TrainingError("cannot train on an empty corpus")
    if state is None:
        state = init_state(corpus, config, **graph_kw)
    else:
        state.config = config
    features = corpus.feature_matrix()
    fine_t = corpus.fine_targets()
    coarse_t = corpus.coarse_targets()
    ids = corpus.ids

    log_fh = writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.csv")
        _truncate_log(log_path, state.iteration)
        fresh = not os.path.exists(log_path)
        log_fh = open(log_path, "a", newline="", encoding="utf-8")
        writer = csv.writer(log_fh)
        if fresh:
            writer.writerow(["iteration", "step", "loss"])

    def take():
        idx = state.next_batch(len(corpus))
        return (features[idx], fine_t[idx], coarse_t[idx]), [ids[i] for i in idx]

    try:
        while state.iteration < config.iterations:
            batch, batch_ids = take()
            l1 = train_step1(state, batch, batch_ids)
            if config.fresh_batch:
                batch, batch_ids = take()
            l2 = train_step2(state, batch, batch_ids)
            if writer is not None:
                writer.writerow([state.iteration, 1, repr(l1)])
                writer.writerow([state.iteration, 2, repr(l2)])
            state.iteration += 1
            done = state.iteration >= config.iterations
            if config.early_stop and _plateaued(state.losses(1)):
                log.info("early stop at iteration %d", state.iteration)
                done = True
            if state.iteration % config.eval_every == 0 or done:
                if out_dir is not None:
                    log_fh.flush()
                    save_state(state, os.path.join(out_dir, "checkpoint.txt"))
                    if val_corpus is not None:
                        _append_val_metrics(state, val_corpus, out_dir)
                if on_eval is not None:
                    on_eval(state)
            if done:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    return state


def _truncate_log(path, iteration: int) -> None:
    """Drop log rows at or past ``iteration`` so a resumed run does not duplicate them."""
    if not os.path.exists(path):
        return
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) < iteration]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(keep)


def _append_val_metrics(state: TrainState, corpus: AnnotationCorpus, out_dir) -> None:
    from .evaluation import evaluate_model, report_rows

    reports = evaluate_model(state.model, corpus)
    path = os.path.join(out_dir, "val_metrics.csv")
    fresh = not os.path.exists(path)
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if fresh:
            w.writerow(["iteration", "level", "metric", "class", "value"])
        for row in report_rows(reports):
            w.writerow([state.iteration, *row])


def save_state(state: TrainState, path) -> None:
    if isinstance(state.model, BaselineAssembly):
        raise CheckpointError("baseline models are comparison-only and are not checkpointed")
    save_checkpoint(path, state.model, {"train": state.to_meta()})


def load_state(path) -> TrainState:
    model, meta = load_checkpoint(path)
    train = meta.get("train")
    if train is None:
        raise CheckpointError(f"{path}: checkpoint carries no training state")
    config = TrainConfig.from_dict(train["config"])
    rng = np.random.default_rng()
    rng.bit_generator.state = train["rng"]
    order = None if train["order"] is None else np.asarray(train["order"], dtype=np.int64)
    history = [(int(i), int(s), float(v)) for i, s, v in train["history"]]
    return TrainState(model, config, rng, int(train["iteration"]), history, order,
                      int(train["cursor"]))
