"""Command-line entry point: synth, build-graph, inspect-graph, train, eval, gradcheck.

Settings resolve in order: built-in defaults, then a preset, then the
``key = value`` config file, then command-line flags. Exit codes: 0 success,
1 usage or config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .errors import (
    CheckpointError,
    ConfigError,
    DimensionError,
    EmbeddingError,
    GraphError,
    IngestionError,
    MetricError,
    OntoGcnError,
    ProbeError,
    SpecError,
    TrainingError,
)
from .evaluation import evaluate_model, export_embeddings, write_report
from .gradcheck import TOLERANCE, run_gradcheck
from .labelgraph import (
    GLOVE_SCALE,
    conditional_probability,
    count_cooccurrence,
    export_graph_csv,
    fallback_vector,
    graph_from_adjacency,
    label_words,
    write_word_vectors,
)
from .network import GRAPH_MODES, SINGLE_GRAPH, TWO_GRAPH, load_checkpoint
from .ontology import (
    MODES,
    MULTI_LABEL,
    SINGLE_LABEL,
    AnnotationCorpus,
    SynthSpec,
    default_cooccurrence_bias,
    generate_synthetic,
    grid_taxonomy,
    load_corpus,
    preset_taxonomy,
    save_corpus,
)
from .training import TrainConfig, fit, load_state

log = logging.getLogger("ontogcn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

RESOLVED_NAME = "resolved_config.txt"


# ---------------------------------------------------------------- value parsing

def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(v) for v in text.split(",") if v.strip()) if text else ()


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        v = text.strip()
        if v not in options:
            raise ValueError(f"{v!r} is not one of {', '.join(options)}")
        return v
    return parse


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


PRESETS = ("none", "us8k-shape", "d19t5-shape")

KEYS: dict[str, Key] = {
    "preset": Key(_choice(*PRESETS), "none", "hyper-parameter bundle and synthetic taxonomy"),
    # data paths
    "taxonomy": Key(str, "", "taxonomy file (coarse<TAB>fine per line)"),
    "annotations": Key(str, "", "annotation file (clip_id<TAB>fine,fine)"),
    "features": Key(str, "", "feature file (clip_id<TAB>f1,f2,...)"),
    "val_annotations": Key(str, "", "validation annotations for periodic metrics"),
    "val_features": Key(str, "", "validation features"),
    "embeddings": Key(str, "", "word-vector file (word v1 v2 ...)"),
    "fallback": Key(_bool, True, "hash-derived vectors for words missing from the embedding file"),
    "checkpoint": Key(str, "", "checkpoint to evaluate, inspect or resume from"),
    "export_embeddings": Key(str, "", "also write common-space clip embeddings to this CSV"),
    # model and training
    "label_mode": Key(_choice(*MODES), MULTI_LABEL, "corpus annotation mode"),
    "mode": Key(_choice(*GRAPH_MODES), TWO_GRAPH, "one graph per level or one over all labels"),
    "tau": Key(float, 0.2, "binarization threshold"),
    "p": Key(float, 0.2, "neighbour mass after re-weighting"),
    "include_self": Key(_bool, False, "count the node itself in the re-weight degree"),
    "lr": Key(float, 0.001, "SGD learning rate"),
    "iterations": Key(int, 8000, "training iterations (each is step 1 then step 2)"),
    "batch_size": Key(int, 32, "clips per mini-batch"),
    "alpha": Key(float, 0.5, "weight of the direct loss against the transfer loss"),
    "encoder_hidden": Key(_ints, (256,), "encoder hidden widths, comma separated"),
    "embed_dim": Key(int, 512, "common embedding width"),
    "gcn_hidden": Key(_ints, (400,), "GCN hidden widths, comma separated"),
    "node_dim": Key(int, 300, "node embedding width"),
    "tx_input": Key(_choice("probs", "logits"), "probs", "what the transfer layers consume"),
    "fresh_batch": Key(_bool, False, "draw a new batch for step 2"),
    "eval_every": Key(int, 500, "checkpoint and validation interval"),
    "early_stop": Key(_bool, False, "stop when the step-1 loss plateaus"),
    "resume": Key(_bool, False, "continue from the checkpoint instead of starting fresh"),
    # synthetic data
    "n_coarse": Key(int, 8, "synthetic grid taxonomy: coarse labels"),
    "children": Key(int, 3, "synthetic grid taxonomy: fine labels per coarse label"),
    "feature_dim": Key(int, 32, "synthetic feature width"),
    "n_clips": Key(int, 1000, "synthetic clip count"),
    "val_clips": Key(int, 0, "synthetic held-out clips written alongside"),
    "noise_sigma": Key(float, 1.0, "feature noise standard deviation"),
    "base_rate": Key(float, 0.1, "independent activation rate per fine label"),
    "partner": Key(float, 0.9, "co-occurrence pull towards a label under another parent"),
    "sibling": Key(float, 0.0, "co-occurrence pull between siblings"),
    "sibling_similarity": Key(float, 0.0, "shared-parent share of each prototype"),
    "seed": Key(int, 0, "seed for data generation, initialisation and shuffling"),
    "out": Key(str, "out", "output directory"),
}

PRESET_VALUES = {
    "us8k-shape": {"label_mode": SINGLE_LABEL, "mode": SINGLE_GRAPH, "lr": 1e-4,
                   "iterations": 20000},
    "d19t5-shape": {"label_mode": MULTI_LABEL, "mode": TWO_GRAPH, "lr": 1e-3,
                    "iterations": 8000},
}
for _values in PRESET_VALUES.values():
    _values.update(tau=0.2, p=0.2, node_dim=300, gcn_hidden=(400,), embed_dim=512)


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    raw: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            raw[key] = value
    return raw


def _parse(key: str, text: str, where: str) -> Any:
    try:
        return KEYS[key].parse(text)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from None


def resolve(file_values: dict[str, str], flag_values: dict[str, str]) -> dict[str, Any]:
    """Merge defaults, preset, file and flags into one typed settings dict."""
    cfg = {k: spec.default for k, spec in KEYS.items()}
    preset = flag_values.get("preset", file_values.get("preset", "none"))
    preset = _parse("preset", preset, "preset")
    cfg.update(PRESET_VALUES.get(preset, {}))
    for where, values in (("config file", file_values), ("command line", flag_values)):
        for key, text in values.items():
            cfg[key] = _parse(key, text, where)
    cfg["preset"] = preset
    return cfg


def dump_config(cfg: dict[str, Any], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in KEYS:
            fh.write(f"{key} = {_fmt(cfg[key])}\n")


def train_config(cfg: dict[str, Any]) -> TrainConfig:
    return TrainConfig(
        lr=cfg["lr"], iterations=cfg["iterations"], batch_size=cfg["batch_size"],
        alpha=cfg["alpha"], seed=cfg["seed"], mode=cfg["mode"], tau=cfg["tau"], p=cfg["p"],
        eval_every=cfg["eval_every"], encoder_hidden=cfg["encoder_hidden"],
        embed_dim=cfg["embed_dim"], gcn_hidden=cfg["gcn_hidden"], node_dim=cfg["node_dim"],
        tx_input=cfg["tx_input"], include_self=cfg["include_self"],
        fresh_batch=cfg["fresh_batch"], early_stop=cfg["early_stop"],
    )


# ---------------------------------------------------------------- helpers

def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if not cfg[k]]
    if missing:
        raise ConfigError(f"missing setting(s): {', '.join(missing)}")


def _corpus(cfg: dict, annotations_key: str = "annotations",
            features_key: str = "features") -> AnnotationCorpus:
    _require(cfg, "taxonomy", annotations_key, features_key)
    return load_corpus(cfg[annotations_key], cfg[features_key], cfg["taxonomy"], cfg["label_mode"])


def _ensure_out(cfg: dict) -> str:
    os.makedirs(cfg["out"], exist_ok=True)
    return cfg["out"]


def _synth_taxonomy(cfg: dict):
    if cfg["preset"] != "none":
        return preset_taxonomy(cfg["preset"])
    return grid_taxonomy(cfg["n_coarse"], cfg["children"])


def _checkpoint_path(cfg: dict) -> str:
    return cfg["checkpoint"] or os.path.join(cfg["out"], "checkpoint.txt")


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: dict) -> int:
    tax = _synth_taxonomy(cfg)
    bias = default_cooccurrence_bias(tax, sibling=cfg["sibling"], partner=cfg["partner"],
                                     seed=cfg["seed"])
    if cfg["label_mode"] == SINGLE_LABEL:
        bias = None
    spec = SynthSpec(tax, feature_dim=cfg["feature_dim"], n_clips=cfg["n_clips"],
                     noise_sigma=cfg["noise_sigma"], bias=bias, base_rate=cfg["base_rate"],
                     mode=cfg["label_mode"], sibling_similarity=cfg["sibling_similarity"])
    out = _ensure_out(cfg)
    corpus = generate_synthetic(spec, seed=cfg["seed"])
    paths = save_corpus(corpus, out)
    if cfg["val_clips"] > 0:
        spec.n_clips = cfg["val_clips"]
        val = generate_synthetic(spec, seed=cfg["seed"], id_prefix="val", stream=1)
        paths.update({f"val_{k}": v for k, v in save_corpus(val, out, "val_").items()
                      if k != "taxonomy"})
    words = sorted({w for label in tax.all_labels for w in label_words(label)})
    vec_path = os.path.join(out, "embeddings.txt")
    write_word_vectors({w: fallback_vector(w, cfg["node_dim"], cfg["seed"], GLOVE_SCALE) for w in words},
                       vec_path)
    paths["embeddings"] = vec_path
    dump_config(cfg, os.path.join(out, RESOLVED_NAME))
    for key, path in paths.items():
        print(f"{key}\t{path}")
    print(f"{len(corpus)} clips, {tax.n_fine} fine / {tax.n_coarse} coarse labels")
    return EXIT_OK


def _structure_graphs(corpus: AnnotationCorpus, cfg: dict) -> dict:
    tax = corpus.taxonomy
    if cfg["mode"] == SINGLE_GRAPH:
        groups = {"all": tax.all_labels}
    else:
        groups = {"fine": tax.fine_labels, "coarse": tax.coarse_labels}
    graphs = {}
    for key, labels in groups.items():
        P = conditional_probability(count_cooccurrence(corpus, labels))
        X = np.zeros((len(labels), 0))  # node features play no part in the adjacency stages
        graphs[key] = graph_from_adjacency(labels, P, X, cfg["tau"], cfg["p"], cfg["include_self"])
    return graphs


def cmd_build_graph(cfg: dict) -> int:
    corpus = _corpus(cfg)
    if not any(c.fine_set for c in corpus.clips):
        log.warning("annotations carry no labels; every graph is the identity")
    out = _ensure_out(cfg)
    for key, graph in _structure_graphs(corpus, cfg).items():
        for path in export_graph_csv(graph, out, f"graph_{key}"):
            print(path)
    dump_config(cfg, os.path.join(out, RESOLVED_NAME))
    return EXIT_OK


def _describe(key: str, graph) -> None:
    n = graph.n_nodes
    edges = [(a, b, w) for a, b, w in graph.edges() if a != b]
    print(f"[{key}] {n} nodes, {len(edges)} directed edges, tau={graph.tau}, p={graph.p}")
    for a, b, w in sorted(edges, key=lambda e: -e[2])[:20]:
        print(f"  {a} -> {b}\t{w:.4f}")


def cmd_inspect_graph(cfg: dict) -> int:
    """Summarise the graphs stored in a checkpoint, or those built from a corpus."""
    if cfg["checkpoint"]:
        model, _ = load_checkpoint(cfg["checkpoint"])
        graphs = model.graphs()
    else:
        graphs = _structure_graphs(_corpus(cfg), cfg)
    out = _ensure_out(cfg)
    for key, graph in graphs.items():
        _describe(key, graph)
        export_graph_csv(graph, out, f"graph_{key}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    config = train_config(cfg)
    corpus = _corpus(cfg)
    val = None
    if cfg["val_annotations"] or cfg["val_features"]:
        val = _corpus(cfg, "val_annotations", "val_features")
    out = _ensure_out(cfg)
    dump_config(cfg, os.path.join(out, RESOLVED_NAME))
    state = None
    if cfg["resume"]:
        state = load_state(_checkpoint_path(cfg))
        print(f"resuming at iteration {state.iteration}")
    emb_path = cfg["embeddings"] or None
    state = fit(corpus, config, state=state, out_dir=out, val_corpus=val,
                embedding_path=emb_path, fallback=cfg["fallback"])
    l1 = state.losses(1)[-1]
    l2 = state.losses(2)[-1]
    print(f"iteration {state.iteration}: step-1 loss {l1:.6f}, step-2 loss {l2:.6f}")
    if cfg["export_embeddings"]:
        export_embeddings(state.model, corpus, cfg["export_embeddings"])
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    model, _ = load_checkpoint(_checkpoint_path(cfg))
    corpus = _corpus(cfg)
    if corpus.taxonomy != model.taxonomy:
        raise IngestionError("evaluation taxonomy does not match the checkpoint's taxonomy")
    reports = evaluate_model(model, corpus)
    out = _ensure_out(cfg)
    path = os.path.join(out, "metrics.csv")
    write_report(reports, path)
    for level, r in reports.items():
        print(f"{level}\tmicro_auprc={_fmt(r.micro_auprc)}\tmacro_auprc={_fmt(r.macro_auprc)}"
              f"\tmicro_f1={r.micro_f1!r}\tmacro_f1={r.macro_f1!r}")
    print(path)
    if cfg["export_embeddings"]:
        export_embeddings(model, corpus, cfg["export_embeddings"])
    return EXIT_OK


def cmd_gradcheck(cfg: dict, corrupt: bool = False) -> int:
    rows = run_gradcheck(seeds=[cfg["seed"]], corrupt=corrupt)
    print("seed\tmode\tstep\tgroup\tentries\tmax_rel_error\tstatus")
    ok = True
    for seed, mode, r in rows:
        ok &= r.passed
        print(f"{seed}\t{mode}\t{r.step}\t{r.group}\t{r.n_entries}\t{r.max_rel_error:.3e}\t"
              f"{'ok' if r.passed else 'FAIL'}")
    print(f"{'pass' if ok else 'FAIL'}: tolerance {TOLERANCE:g}")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "synth": cmd_synth,
    "build-graph": cmd_build_graph,
    "inspect-graph": cmd_inspect_graph,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


# ---------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_setting_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=argparse.SUPPRESS, help="key = value settings file")
    for key, spec in KEYS.items():
        flag = "--" + key.replace("_", "-")
        p.add_argument(flag, dest=key, default=argparse.SUPPRESS,
                       help=f"{spec.help} (default {_fmt(spec.default) or 'unset'})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ontogcn", description="Ontology-aware label-graph classifiers.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    _add_setting_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "synth": "write a synthetic corpus and matching word vectors",
        "build-graph": "export P, A, A_rw and A_hat for each label graph",
        "inspect-graph": "summarise label graphs from a checkpoint or corpus",
        "train": "two-step training with checkpoints and loss log",
        "eval": "fine and coarse metrics for a checkpoint",
        "gradcheck": "finite-difference check of every parameter group",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        _add_setting_flags(p)
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
        if name == "gradcheck":
            p.add_argument("--corrupt-backward", action="store_true",
                           help=argparse.SUPPRESS)  # negative-control hook for tests
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    corrupt = args.pop("corrupt_backward", False)
    verbose = args.pop("verbose", False)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        file_values = {}
        if "config" in args:
            path = args.pop("config")
            try:
                file_values = read_config_file(path)
            except OSError as exc:
                raise ConfigError(f"cannot read config file: {exc}") from None
        cfg = resolve(file_values, args)
        if command == "gradcheck":
            return cmd_gradcheck(cfg, corrupt)
        return COMMANDS[command](cfg)
    except (ConfigError, SpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, ProbeError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IngestionError, EmbeddingError, GraphError, CheckpointError, MetricError,
            DimensionError, OntoGcnError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
