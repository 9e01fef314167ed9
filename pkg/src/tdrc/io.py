"""File formats: triplet TSV, ontology tree numbers, similarity matrices,
model checkpoints and prediction exports.

All text formats are tab-separated UTF-8. Identifiers are trimmed and
matched case-insensitively; the first spelling seen is the one kept.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .similarity import DiseaseDag, SimilarityMatrix, normalize_id
from .tensor import FactorSet

logger = logging.getLogger(__name__)

__all__ = [
    "FormatError",
    "Dataset",
    "load_triplets",
    "filter_min_associations",
    "dataset_stats",
    "load_dag",
    "load_similarity",
    "save_similarity",
    "save_model",
    "load_model",
    "export_predictions",
    "MODEL_MAGIC",
    "MODEL_VERSION",
]


class FormatError(ValueError):
    """Malformed or inconsistent input file."""


_TRIPLET_HEADERS = {
    ("mirna", "disease", "type"),
    ("mirna_id", "disease_id", "type_id"),
}
_DAG_HEADERS = {
    ("disease", "tree_number"),
    ("disease_id", "tree_number"),
}


class _Vocab:
    def __init__(self):
        self.labels: list[str] = []
        self.index: dict[str, int] = {}

    def add(self, label: str) -> int:
        key = normalize_id(label)
        idx = self.index.get(key)
        if idx is None:
            idx = len(self.labels)
            self.index[key] = idx
            self.labels.append(label.strip())
        return idx


@dataclass
class Dataset:
    """Known (miRNA, disease, type) triplets over ordered vocabularies.

    ``triplets`` is an ``(N, 3)`` integer array of index triples, sorted
    lexicographically. ``disease_sets`` maps a miRNA index to the set of
    disease indices it is associated with under any type.
    """

    mirna_vocab: list[str]
    disease_vocab: list[str]
    type_vocab: list[str]
    triplets: np.ndarray
    n_duplicates: int = 0
    disease_sets: dict[int, set[int]] = field(init=False, repr=False)

    def __post_init__(self):
        trip = np.asarray(self.triplets, dtype=np.int64).reshape(-1, 3)
        for name, vocab in (("mirna", self.mirna_vocab), ("disease", self.disease_vocab),
                            ("type", self.type_vocab)):
            keys = [normalize_id(v) for v in vocab]
            if len(set(keys)) != len(keys):
                raise FormatError(f"duplicate identifiers in {name} vocabulary")
        if trip.size:
            if trip.min() < 0 or np.any(trip.max(axis=0) >= np.array(self.shape)):
                raise FormatError("triplet index out of vocabulary range")
        trip = np.unique(trip, axis=0)
        self.triplets = trip
        self.disease_sets = {}
        for i, j in trip[:, :2]:
            self.disease_sets.setdefault(int(i), set()).add(int(j))

    @property
    def shape(self) -> tuple[int, int, int]:
        return len(self.mirna_vocab), len(self.disease_vocab), len(self.type_vocab)

    def __len__(self) -> int:
        return len(self.triplets)

    def to_tensor(self, triplets=None) -> np.ndarray:
        """Binary association tensor with ones at ``triplets`` (default: all known)."""
        trip = self.triplets if triplets is None else np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
        x = np.zeros(self.shape)
        x[trip[:, 0], trip[:, 1], trip[:, 2]] = 1.0
        return x

    def pairs(self) -> np.ndarray:
        """Distinct associated (miRNA, disease) pairs, sorted."""
        return np.unique(self.triplets[:, :2], axis=0)

    def index_of(self, kind: str, label: str) -> int:
        vocab = {"mirna": self.mirna_vocab, "disease": self.disease_vocab, "type": self.type_vocab}[kind]
        key = normalize_id(label)
        for i, v in enumerate(vocab):
            if normalize_id(v) == key:
                return i
        raise KeyError(f"unknown {kind} identifier {label!r}")


def _split(line: str) -> list[str]:
    return [f.strip() for f in line.rstrip("\r\n").split("\t")]


def load_triplets(path) -> Dataset:
    """Read a 3-column TSV of ``miRNA<TAB>disease<TAB>type`` rows.

    A header row is recognised by its literal column names. Blank lines are
    skipped; duplicated rows are dropped and counted.
    """
    path = Path(path)
    mirnas, diseases, types = _Vocab(), _Vocab(), _Vocab()
    rows = []
    seen = set()
    duplicates = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = _split(line)
            if len(fields) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 tab-separated columns, got {len(fields)}")
            if not rows and not seen and tuple(f.casefold() for f in fields) in _TRIPLET_HEADERS:
                continue
            if not all(fields):
                raise FormatError(f"{path}:{lineno}: empty identifier")
            key = (mirnas.add(fields[0]), diseases.add(fields[1]), types.add(fields[2]))
            if key in seen:
                duplicates += 1
                continue
            seen.add(key)
            rows.append(key)
    if not rows:
        raise FormatError(f"{path}: no triplets found")
    if duplicates:
        logger.warning("%s: dropped %d duplicated triplet(s)", path, duplicates)
    return Dataset(mirnas.labels, diseases.labels, types.labels, np.array(rows), duplicates)


def filter_min_associations(ds: Dataset, min_count: int) -> Dataset:
    """Drop miRNAs and diseases involved in fewer than ``min_count`` triplets.

    Both filters are applied once, simultaneously, on the input counts.
    Vocabulary order of the survivors is preserved.
    """
    if min_count <= 1:
        return ds
    m, n, _ = ds.shape
    trip = ds.triplets
    keep_m = np.bincount(trip[:, 0], minlength=m) >= min_count
    keep_d = np.bincount(trip[:, 1], minlength=n) >= min_count
    trip = trip[keep_m[trip[:, 0]] & keep_d[trip[:, 1]]]
    if not len(trip):
        raise FormatError(f"no triplets left after filtering at {min_count} associations")
    used_m = np.unique(trip[:, 0])
    used_d = np.unique(trip[:, 1])
    used_t = np.unique(trip[:, 2])
    remap_m = {int(o): i for i, o in enumerate(used_m)}
    remap_d = {int(o): i for i, o in enumerate(used_d)}
    remap_t = {int(o): i for i, o in enumerate(used_t)}
    new = np.array([(remap_m[a], remap_d[b], remap_t[c]) for a, b, c in trip.tolist()])
    return Dataset(
        [ds.mirna_vocab[i] for i in used_m],
        [ds.disease_vocab[i] for i in used_d],
        [ds.type_vocab[i] for i in used_t],
        new,
        ds.n_duplicates,
    )


def dataset_stats(ds: Dataset) -> dict:
    """Sizes and density; density counts every type, ``N / (m * n * t)``."""
    m, n, t = ds.shape
    return {
        "mirnas": m,
        "diseases": n,
        "types": t,
        "triplets": len(ds),
        "density": len(ds) / (m * n * t),
    }


def load_dag(path) -> DiseaseDag:
    """Build the disease DAG from ``disease<TAB>tree_number`` rows.

    The parent of tree number ``A.B.C`` is whichever node carries ``A.B``.
    Prefixes not assigned to any disease become internal nodes named
    ``tree:<prefix>``. A disease with several tree numbers gets the union of
    the parents induced by each of them.
    """
    path = Path(path)
    tree_owner: dict[str, list[str]] = {}
    disease_trees: dict[str, list[str]] = {}
    labels: dict[str, str] = {}
    first = True
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = _split(line)
            if len(fields) != 2:
                raise FormatError(f"{path}:{lineno}: expected 2 tab-separated columns, got {len(fields)}")
            if first and tuple(f.casefold() for f in fields) in _DAG_HEADERS:
                first = False
                continue
            first = False
            disease, tree = fields
            if not disease:
                raise FormatError(f"{path}:{lineno}: empty disease identifier")
            if not tree or any(not seg for seg in tree.split(".")):
                raise FormatError(f"{path}:{lineno}: malformed tree number {tree!r}")
            key = normalize_id(disease)
            labels.setdefault(key, disease)
            disease_trees.setdefault(key, []).append(tree)
            owners = tree_owner.setdefault(tree, [])
            if key not in owners:
                owners.append(key)

    if not disease_trees:
        raise FormatError(f"{path}: no ontology rows found")

    parents: dict[str, set[str]] = {d: set() for d in disease_trees}

    def owners_of(tree: str) -> list[str]:
        owners = tree_owner.get(tree)
        if owners:
            return owners
        node = "tree:" + tree.casefold()
        if node not in parents:
            labels[node] = "tree:" + tree
            parents[node] = set()
            tree_owner[tree] = [node]
            parent_tree = tree.rpartition(".")[0]
            if parent_tree:
                parents[node].update(owners_of(parent_tree))
        return [node]

    for disease, trees in disease_trees.items():
        for tree in trees:
            parent_tree = tree.rpartition(".")[0]
            if parent_tree:
                parents[disease].update(owners_of(parent_tree))

    return DiseaseDag(parents, labels)


def save_similarity(matrix: SimilarityMatrix, path) -> None:
    """Write a labelled square TSV with 17 significant digits per value."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join([""] + list(matrix.labels)) + "\n")
        for label, row in zip(matrix.labels, matrix.values):
            fh.write("\t".join([label] + [format(float(v), ".17g") for v in row]) + "\n")


def load_similarity(path, atol: float = 1e-9) -> SimilarityMatrix:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise FormatError(f"{path}: empty similarity file")
    header = lines[0].rstrip("\r\n").split("\t")[1:]
    header = [h.strip() for h in header]
    n = len(header)
    if len(lines) - 1 != n:
        raise FormatError(f"{path}: {len(lines) - 1} data rows for {n} columns; matrix must be square")
    values = np.empty((n, n))
    for r, line in enumerate(lines[1:]):
        fields = _split(line)
        if len(fields) != n + 1:
            raise FormatError(f"{path}:{r + 2}: expected {n + 1} fields, got {len(fields)}")
        if normalize_id(fields[0]) != normalize_id(header[r]):
            raise FormatError(f"{path}:{r + 2}: row label {fields[0]!r} does not match column {header[r]!r}")
        try:
            values[r] = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise FormatError(f"{path}:{r + 2}: {exc}") from None
    if not np.all(np.isfinite(values)):
        raise FormatError(f"{path}: non-finite similarity values")
    if not np.allclose(values, values.T, rtol=0.0, atol=atol):
        raise FormatError(f"{path}: similarity matrix is not symmetric (atol={atol})")
    try:
        return SimilarityMatrix(header, values)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


MODEL_MAGIC = b"TDRCMODL"
MODEL_VERSION = 1
_HEADER = struct.Struct("<8sIIIIII")  # magic, version, m, n, t, r, has_projections


def save_model(fs: FactorSet, M1, M2, hp, path) -> None:
    """Write factors, projections and hyperparameters to one binary file.

    Layout (little-endian): magic, uint32 version, uint32 m, n, t, r,
    uint32 projection flag, then float64 row-major C, P, F and, when the
    flag is set, M1 and M2; finally a uint32 length and a UTF-8 JSON
    object of hyperparameters.
    """
    m, n, t = fs.dims
    r = fs.rank
    has_proj = M1 is not None and M2 is not None
    if has_proj:
        M1 = np.asarray(M1, dtype="<f8")
        M2 = np.asarray(M2, dtype="<f8")
        if M1.shape != (r, r) or M2.shape != (r, r):
            raise ValueError(f"projection matrices must be {r}x{r}")
    if hp is None:
        meta = {}
    elif isinstance(hp, dict):
        meta = dict(hp)
    else:
        meta = hp.to_dict()
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, m, n, t, r, int(has_proj)))
        for a in fs.as_tuple():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes(order="C"))
        if has_proj:
            fh.write(np.ascontiguousarray(M1).tobytes(order="C"))
            fh.write(np.ascontiguousarray(M2).tobytes(order="C"))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def load_model(path):
    """Inverse of :func:`save_model`; returns ``(FactorSet, M1, M2, hyperparams_dict)``.

    ``M1`` and ``M2`` are ``None`` for models saved without projections.
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated model header")
    magic, version, m, n, t, r, has_proj = _HEADER.unpack_from(data, 0)
    if magic != MODEL_MAGIC:
        raise FormatError(f"{path}: not a model file (bad magic {magic!r})")
    if version != MODEL_VERSION:
        raise FormatError(
            f"{path}: unsupported model format version {version} (this build reads version {MODEL_VERSION})"
        )
    if r < 1 or has_proj not in (0, 1):
        raise FormatError(f"{path}: inconsistent model header")
    offset = _HEADER.size
    shapes = [(m, r), (n, r), (t, r)] + ([(r, r), (r, r)] if has_proj else [])
    arrays = []
    for shape in shapes:
        nbytes = 8 * shape[0] * shape[1]
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: truncated model data")
        arrays.append(np.frombuffer(data, dtype="<f8", count=shape[0] * shape[1], offset=offset)
                      .reshape(shape).astype(np.float64))
        offset += nbytes
    if offset + 4 > len(data):
        raise FormatError(f"{path}: truncated model data")
    (blob_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if offset + blob_len != len(data):
        raise FormatError(f"{path}: model file length does not match its header")
    meta = json.loads(data[offset:].decode("utf-8"))
    fs = FactorSet(*arrays[:3])
    M1, M2 = (arrays[3], arrays[4]) if has_proj else (None, None)
    return fs, M1, M2, meta


PREDICTION_HEADER = ("disease_id", "rank", "mirna_id", "type_id", "score")


def export_predictions(rankings, path) -> None:
    """Write ranked predictions.

    ``rankings`` is an iterable of ``(disease_id, entries)`` where entries
    are ``(mirna_id, type_id, score)`` in rank order.
    """
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(PREDICTION_HEADER) + "\n")
        for disease, entries in rankings:
            for rank, (mirna, rtype, score) in enumerate(entries, start=1):
                fh.write(f"{disease}\t{rank}\t{mirna}\t{rtype}\t{score:.6f}\n")
