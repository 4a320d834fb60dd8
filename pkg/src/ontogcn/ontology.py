"""Two-level taxonomies, annotated clips, text-file ingestion and a synthetic corpus generator."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import IngestionError, ModeError, SpecError

MULTI_LABEL = "multi-label"
SINGLE_LABEL = "single-label"
MODES = (MULTI_LABEL, SINGLE_LABEL)


@dataclass(frozen=True)
class Taxonomy:
    coarse_labels: tuple[str, ...]
    fine_labels: tuple[str, ...]
    parent: tuple[int, ...]  # fine index -> coarse index

    def __post_init__(self):
        object.__setattr__(self, "coarse_labels", tuple(self.coarse_labels))
        object.__setattr__(self, "fine_labels", tuple(self.fine_labels))
        object.__setattr__(self, "parent", tuple(int(p) for p in self.parent))
        if not self.fine_labels or not self.coarse_labels:
            raise IngestionError("taxonomy needs at least one coarse and one fine label")
        if len(self.parent) != len(self.fine_labels):
            raise IngestionError("every fine label needs exactly one parent")
        names = self.coarse_labels + self.fine_labels
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise IngestionError(f"label names must be unique across levels, duplicated: {dup}")
        for f, c in zip(self.fine_labels, self.parent):
            if not 0 <= c < len(self.coarse_labels):
                raise IngestionError(f"fine label {f!r} has no valid parent (index {c})")
        orphans = set(range(len(self.coarse_labels))) - set(self.parent)
        if orphans:
            names = [self.coarse_labels[c] for c in sorted(orphans)]
            raise IngestionError(f"coarse labels without children: {names}")

    @property
    def n_fine(self) -> int:
        return len(self.fine_labels)

    @property
    def n_coarse(self) -> int:
        return len(self.coarse_labels)

    @property
    def all_labels(self) -> tuple[str, ...]:
        """Fine labels followed by coarse labels (single-graph node order)."""
        return self.fine_labels + self.coarse_labels

    def fine_index(self, name: str) -> int:
        return self._fine_pos[name]

    def coarse_index(self, name: str) -> int:
        return self._coarse_pos[name]

    def parent_of(self, fine_name: str) -> str:
        return self.coarse_labels[self.parent[self.fine_index(fine_name)]]

    def children(self, coarse_name: str) -> list[str]:
        c = self.coarse_index(coarse_name)
        return [f for f, p in zip(self.fine_labels, self.parent) if p == c]

    @cached_property
    def _fine_pos(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.fine_labels)}

    @cached_property
    def _coarse_pos(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.coarse_labels)}

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "Taxonomy":
        """Build from ``(coarse, fine)`` pairs; coarse order of first appearance defines indices."""
        coarse: list[str] = []
        fine: list[str] = []
        parent: list[int] = []
        for c, f in pairs:
            if c not in coarse:
                coarse.append(c)
            if f in fine:
                other = coarse[parent[fine.index(f)]]
                raise IngestionError(f"fine label {f!r} listed under both {other!r} and {c!r}")
            fine.append(f)
            parent.append(coarse.index(c))
        return cls(tuple(coarse), tuple(fine), tuple(parent))


def derive_coarse(fine_set: Iterable[str], taxonomy: Taxonomy) -> frozenset[str]:
    return frozenset(taxonomy.parent_of(f) for f in fine_set)


@dataclass(frozen=True)
class Clip:
    id: str
    features: np.ndarray
    fine_set: frozenset[str]
    coarse_set: frozenset[str] = field(default=frozenset())

    def __eq__(self, other):
        if not isinstance(other, Clip):
            return NotImplemented
        return (
            self.id == other.id
            and self.fine_set == other.fine_set
            and self.coarse_set == other.coarse_set
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class AnnotationCorpus:
    taxonomy: Taxonomy
    clips: tuple[Clip, ...]
    mode: str = MULTI_LABEL

    def __post_init__(self):
        if self.mode not in MODES:
            raise ModeError(f"unknown corpus mode {self.mode!r}; expected one of {MODES}")
        object.__setattr__(self, "clips", tuple(self.clips))
        fine = set(self.taxonomy.fine_labels)
        dims = set()
        for clip in self.clips:
            unknown = sorted(set(clip.fine_set) - fine)
            if unknown:
                raise IngestionError(f"clip {clip.id!r}: unknown label {unknown[0]!r}")
            if clip.coarse_set != derive_coarse(clip.fine_set, self.taxonomy):
                raise IngestionError(f"clip {clip.id!r}: coarse labels disagree with the taxonomy")
            if self.mode == SINGLE_LABEL and len(clip.fine_set) != 1:
                raise ModeError(
                    f"clip {clip.id!r} has {len(clip.fine_set)} fine labels in single-label mode"
                )
            dims.add(clip.features.shape[0])
        if len(dims) > 1:
            raise IngestionError(f"clips disagree on feature dimension: {sorted(dims)}")

    def __eq__(self, other):
        if not isinstance(other, AnnotationCorpus):
            return NotImplemented
        return (
            self.taxonomy == other.taxonomy
            and self.mode == other.mode
            and len(self.clips) == len(other.clips)
            and all(a == b for a, b in zip(self.clips, other.clips))
        )

    def __len__(self) -> int:
        return len(self.clips)

    @property
    def feature_dim(self) -> int:
        return self.clips[0].features.shape[0] if self.clips else 0

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.clips]

    def feature_matrix(self, idx: Sequence[int] | None = None) -> np.ndarray:
        clips = self.clips if idx is None else [self.clips[i] for i in idx]
        if not clips:
            return np.zeros((0, self.feature_dim))
        return np.stack([c.features for c in clips]).astype(np.float64)

    def label_matrix(self, labels: Sequence[str], idx: Sequence[int] | None = None) -> np.ndarray:
        """0/1 indicator matrix (clips x labels) over fine and/or coarse label names."""
        clips = self.clips if idx is None else [self.clips[i] for i in idx]
        col = {name: j for j, name in enumerate(labels)}
        y = np.zeros((len(clips), len(labels)))
        for i, clip in enumerate(clips):
            for name in clip.fine_set | clip.coarse_set:
                j = col.get(name)
                if j is not None:
                    y[i, j] = 1.0
        return y

    def fine_targets(self, idx: Sequence[int] | None = None) -> np.ndarray:
        return self.label_matrix(self.taxonomy.fine_labels, idx)

    def coarse_targets(self, idx: Sequence[int] | None = None) -> np.ndarray:
        return self.label_matrix(self.taxonomy.coarse_labels, idx)

    def subset(self, idx: Sequence[int]) -> "AnnotationCorpus":
        return AnnotationCorpus(self.taxonomy, tuple(self.clips[i] for i in idx), self.mode)


def make_clip(clip_id: str, features, fine_set: Iterable[str], taxonomy: Taxonomy) -> Clip:
    fine = frozenset(fine_set)
    known = set(taxonomy.fine_labels)
    for name in sorted(fine):
        if name not in known:
            raise IngestionError(f"clip {clip_id!r}: unknown label {name!r}")
    vec = np.asarray(features, dtype=np.float64).reshape(-1)
    return Clip(clip_id, vec, fine, derive_coarse(fine, taxonomy))


# ---------------------------------------------------------------- text I/O


def _records(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line


def load_taxonomy(path) -> Taxonomy:
    pairs = []
    for lineno, line in _records(path):
        parts = line.split("\t")
        if len(parts) != 2 or not all(p.strip() for p in parts):
            raise IngestionError(f"{path}:{lineno}: expected 'coarse<TAB>fine', got {line!r}")
        pairs.append((parts[0].strip(), parts[1].strip()))
    return Taxonomy.from_pairs(pairs)


def save_taxonomy(taxonomy: Taxonomy, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c_idx, coarse in enumerate(taxonomy.coarse_labels):
            for f, p in zip(taxonomy.fine_labels, taxonomy.parent):
                if p == c_idx:
                    fh.write(f"{coarse}\t{f}\n")


def _load_annotations(path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for lineno, line in _records(path):
        clip_id, _, rest = line.partition("\t")
        clip_id = clip_id.strip()
        if not clip_id:
            raise IngestionError(f"{path}:{lineno}: missing clip id")
        if clip_id in out:
            raise IngestionError(f"{path}:{lineno}: duplicate clip {clip_id!r}")
        out[clip_id] = [s.strip() for s in rest.split(",") if s.strip()]
    return out


def _load_features(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for lineno, line in _records(path):
        clip_id, sep, rest = line.partition("\t")
        if not sep:
            raise IngestionError(f"{path}:{lineno}: expected 'clip_id<TAB>f1,f2,...'")
        try:
            vec = np.array([float(v) for v in rest.split(",")], dtype=np.float64)
        except ValueError as exc:
            raise IngestionError(f"{path}:{lineno}: bad feature value ({exc})") from None
        if not np.all(np.isfinite(vec)):
            raise IngestionError(f"{path}:{lineno}: non-finite feature value")
        out[clip_id.strip()] = vec
    return out


def load_corpus(annotation_path, feature_path, taxonomy_path, mode: str = MULTI_LABEL) -> AnnotationCorpus:
    if mode not in MODES:
        raise ModeError(f"unknown corpus mode {mode!r}; expected one of {MODES}")
    taxonomy = load_taxonomy(taxonomy_path)
    annotations = _load_annotations(annotation_path)
    features = _load_features(feature_path)
    known = set(taxonomy.fine_labels)
    dim = None
    clips = []
    for clip_id, labels in annotations.items():
        for name in labels:
            if name not in known:
                raise IngestionError(f"clip {clip_id!r}: unknown label {name!r}")
        if mode == SINGLE_LABEL and len(set(labels)) != 1:
            raise ModeError(f"clip {clip_id!r} has {len(set(labels))} labels in single-label mode")
        if clip_id not in features:
            raise IngestionError(f"clip {clip_id!r}: no feature record")
        vec = features[clip_id]
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise IngestionError(
                f"clip {clip_id!r}: feature dimension {vec.shape[0]} != expected {dim}"
            )
        clips.append(make_clip(clip_id, vec, labels, taxonomy))
    return AnnotationCorpus(taxonomy, tuple(clips), mode)


def save_corpus(corpus: AnnotationCorpus, directory, prefix: str = "") -> dict[str, str]:
    """Write taxonomy, annotation and feature files; returns their paths."""
    os.makedirs(directory, exist_ok=True)
    paths = {
        "taxonomy": os.path.join(directory, f"{prefix}taxonomy.tsv"),
        "annotations": os.path.join(directory, f"{prefix}annotations.tsv"),
        "features": os.path.join(directory, f"{prefix}features.tsv"),
    }
    save_taxonomy(corpus.taxonomy, paths["taxonomy"])
    order = {n: i for i, n in enumerate(corpus.taxonomy.fine_labels)}
    with open(paths["annotations"], "w", encoding="utf-8") as fa, \
            open(paths["features"], "w", encoding="utf-8") as ff:
        for clip in corpus.clips:
            labels = sorted(clip.fine_set, key=order.__getitem__)
            fa.write(f"{clip.id}\t{','.join(labels)}\n")
            ff.write(f"{clip.id}\t{','.join(repr(float(v)) for v in clip.features)}\n")
    return paths


# ---------------------------------------------------------------- presets

US8K_SHAPE = {
    "human": ["children_playing", "street_music", "gun_shot"],
    "animal": ["dog_bark"],
    "machinery": ["air_conditioner", "drilling", "jackhammer", "engine_idling"],
    "vehicle": ["car_horn", "siren"],
}

D19T5_SHAPE = {
    "engine": ["small_sounding_engine", "medium_sounding_engine", "large_sounding_engine"],
    "machinery_impact": ["rock_drill", "jackhammer", "hoe_ram", "pile_driver"],
    "non_machinery_impact": ["impact"],
    "powered_saw": ["chainsaw", "small_medium_rotating_saw", "large_rotating_saw"],
    "alert_signal": ["car_horn", "car_alarm", "siren", "reverse_beeper"],
    "music": ["stationary_music", "mobile_music", "ice_cream_truck"],
    "human_voice": ["person_talking", "person_shouting", "large_crowd", "amplified_speech"],
    "dog": ["dog_barking_whining"],
}

TAXONOMY_PRESETS = {"us8k-shape": US8K_SHAPE, "d19t5-shape": D19T5_SHAPE}


def preset_taxonomy(name: str) -> Taxonomy:
    try:
        tree = TAXONOMY_PRESETS[name]
    except KeyError:
        raise SpecError(f"unknown taxonomy preset {name!r}; known: {sorted(TAXONOMY_PRESETS)}") from None
    return Taxonomy.from_pairs((c, f) for c, kids in tree.items() for f in kids)


def grid_taxonomy(n_coarse: int, children: int | Sequence[int]) -> Taxonomy:
    """Generic taxonomy: coarse ``c0, c1, ...``; fine ``c0_f0, c0_f1, c1_f2, ...``.

    Fine names share their parent's word and carry a globally unique second
    word, so averaged word embeddings relate siblings and nothing else.
    """
    if isinstance(children, int):
        children = [children] * n_coarse
    if n_coarse < 1 or len(children) != n_coarse or min(children) < 1:
        raise SpecError(f"need n_coarse >= 1 and >= 1 child each, got {n_coarse}, {list(children)}")
    pairs = []
    k = 0
    for c in range(n_coarse):
        for _ in range(children[c]):
            pairs.append((f"c{c}", f"c{c}_f{k}"))
            k += 1
    return Taxonomy.from_pairs(pairs)


# ---------------------------------------------------------------- synthetic data


@dataclass
class SynthSpec:
    """Recipe for a synthetic corpus.

    ``bias[i, j]`` is the probability that fine label ``i`` is switched on when
    fine label ``j`` is active (applied transitively, each label fires once).
    ``base_rate`` is the independent activation probability per label in
    multi-label mode. With ``sibling_similarity`` rho, each prototype is
    ``sqrt(rho) * parent_centre + sqrt(1 - rho) * own_direction`` so siblings
    are correlated at rho while every entry keeps unit variance.
    """

    taxonomy: Taxonomy
    feature_dim: int = 32
    n_clips: int = 1000
    noise_sigma: float = 1.0
    bias: np.ndarray | None = None
    base_rate: float | Sequence[float] = 0.1
    mode: str = MULTI_LABEL
    prototype_scale: float = 1.0
    sibling_similarity: float = 0.0

    def validate(self) -> None:
        n = self.taxonomy.n_fine
        if n < 1:
            raise SpecError("synthetic spec needs at least one fine label")
        if self.feature_dim < 1:
            raise SpecError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.n_clips < 0:
            raise SpecError(f"n_clips must be >= 0, got {self.n_clips}")
        if not self.noise_sigma >= 0:
            raise SpecError(f"noise sigma must be >= 0, got {self.noise_sigma}")
        if self.mode not in MODES:
            raise SpecError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.sibling_similarity < 1.0:
            raise SpecError(f"sibling_similarity must lie in [0, 1), got {self.sibling_similarity}")
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float64)
            if b.shape != (n, n):
                raise SpecError(f"bias matrix must be {n}x{n}, got {b.shape}")
            if np.any((b < 0) | (b > 1)) or not np.all(np.isfinite(b)):
                raise SpecError("bias entries must be probabilities in [0, 1]")
        rates = np.broadcast_to(np.asarray(self.base_rate, dtype=np.float64), (n,))
        if np.any((rates < 0) | (rates > 1)):
            raise SpecError("base_rate must lie in [0, 1]")


def default_cooccurrence_bias(taxonomy: Taxonomy, sibling: float = 0.0,
                              partner: float = 0.9, seed: int = 0) -> np.ndarray:
    """Built-in co-occurrence structure: fine labels are paired across coarse groups.

    Each fine label gets one partner under a different coarse parent (a
    context relation with no semantic link); the partner is switched on with
    probability ``partner``. Siblings co-occur with probability ``sibling``.
    """
    n = taxonomy.n_fine
    rng = np.random.default_rng(seed)
    bias = np.zeros((n, n))
    parent = np.asarray(taxonomy.parent)
    for i in range(n):
        for j in range(n):
            if i != j and parent[i] == parent[j]:
                bias[i, j] = sibling
    order = rng.permutation(n)
    unpaired = list(order)
    while len(unpaired) >= 2:
        a = unpaired.pop(0)
        for k, b in enumerate(unpaired):
            if parent[a] != parent[b]:
                unpaired.pop(k)
                bias[a, b] = bias[b, a] = partner
                break
    return bias


def generate_synthetic(spec: SynthSpec, seed: int = 0, id_prefix: str = "clip",
                       stream: int = 0) -> AnnotationCorpus:
    """Sample a corpus. Prototypes depend on ``seed`` only; clips on ``(seed, stream)``.

    Different ``stream`` values give independent clip sets over the same
    prototypes, e.g. a held-out split.
    """
    spec.validate()
    tax = spec.taxonomy
    n = tax.n_fine
    proto_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    own = proto_rng.standard_normal((n, spec.feature_dim))
    centres = proto_rng.standard_normal((tax.n_coarse, spec.feature_dim))
    rho = spec.sibling_similarity
    prototypes = spec.prototype_scale * (
        np.sqrt(rho) * centres[list(tax.parent)] + np.sqrt(1.0 - rho) * own
    )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1, stream]))
    bias = np.zeros((n, n)) if spec.bias is None else np.asarray(spec.bias, dtype=np.float64)
    rates = np.broadcast_to(np.asarray(spec.base_rate, dtype=np.float64), (n,))
    width = len(str(max(spec.n_clips - 1, 0)))
    clips = []
    for k in range(spec.n_clips):
        if spec.mode == SINGLE_LABEL:
            active = [int(rng.integers(n))]
        else:
            on = rng.random(n) < rates
            draws = rng.random((n, n))
            active = []
            seen = np.zeros(n, dtype=bool)
            queue = list(np.flatnonzero(on))
            seen[queue] = True
            while queue:
                j = queue.pop(0)
                active.append(j)
                fire = (~seen) & (draws[:, j] < bias[:, j])
                new = list(np.flatnonzero(fire))
                seen[new] = True
                queue.extend(new)
            active.sort()
        feats = prototypes[active].sum(axis=0) if active else np.zeros(spec.feature_dim)
        if spec.noise_sigma > 0:
            feats = feats + spec.noise_sigma * rng.standard_normal(spec.feature_dim)
        else:
            rng.standard_normal(spec.feature_dim)  # keep the stream aligned across sigma
        labels = [tax.fine_labels[j] for j in active]
        clips.append(make_clip(f"{id_prefix}{k:0{width}d}", feats, labels, tax))
    return AnnotationCorpus(tax, tuple(clips), spec.mode)


def split_corpus(corpus: AnnotationCorpus, fraction: float, seed: int = 0):
    """Seeded random split into ``(first, second)`` with ``round(fraction * N)`` clips first."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(corpus))
    cut = int(round(fraction * len(corpus)))
    return corpus.subset(sorted(perm[:cut])), corpus.subset(sorted(perm[cut:]))
