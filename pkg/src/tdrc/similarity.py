"""Disease semantic similarity and miRNA functional similarity.

Disease similarity follows the DAG-based semantic contribution measure of
Wang et al. (2010); miRNA similarity is the best-match average of the
disease similarities between two miRNAs' associated disease sets.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "DagError",
    "DiseaseDag",
    "SimParams",
    "SimilarityMatrix",
    "SemanticSimilarity",
    "normalize_id",
    "semantic_contribution",
    "semantic_value",
    "disease_similarity",
    "mirna_similarity",
    "build_similarity_matrices",
]


class DagError(ValueError):
    """Raised for malformed ontology graphs or queries outside a node's closure."""


def normalize_id(identifier: str) -> str:
    """Identifier key used for matching: trimmed and case-folded."""
    return identifier.strip().casefold()


@dataclass(frozen=True)
class SimParams:
    delta: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


class DiseaseDag:
    """Disease ontology as a map from node to its direct parents.

    Node identifiers are matched case-insensitively; :attr:`labels` keeps
    the first spelling seen for each node.
    """

    def __init__(self, parent_edges, labels=None):
        self.parents: dict[str, frozenset[str]] = {}
        self.labels: dict[str, str] = {}
        for node, parents in parent_edges.items():
            key = normalize_id(node)
            merged = set(self.parents.get(key, ())) | {normalize_id(p) for p in parents}
            merged.discard(key)
            self.parents[key] = frozenset(merged)
            self.labels.setdefault(key, node.strip())
        if labels:
            for key, label in labels.items():
                self.labels[normalize_id(key)] = label
        missing = {p for ps in self.parents.values() for p in ps if p not in self.parents}
        if missing:
            raise DagError(f"parents referenced but not defined as nodes: {sorted(missing)[:5]}")
        self._check_acyclic()

    def _check_acyclic(self):
        # Kahn's algorithm on child -> parent edges
        indegree = {node: 0 for node in self.parents}
        for ps in self.parents.values():
            for p in ps:
                indegree[p] += 1
        queue = deque(sorted(n for n, d in indegree.items() if d == 0))
        seen = 0
        while queue:
            node = queue.popleft()
            seen += 1
            for p in self.parents[node]:
                indegree[p] -= 1
                if indegree[p] == 0:
                    queue.append(p)
        if seen != len(self.parents):
            cyclic = sorted(n for n, d in indegree.items() if d > 0)
            raise DagError(f"ontology graph contains a cycle through {cyclic[:5]}")

    def __contains__(self, node) -> bool:
        return normalize_id(node) in self.parents

    def __len__(self) -> int:
        return len(self.parents)

    def nodes(self):
        return list(self.parents)

    def ancestors(self, node) -> set[str]:
        """Ancestor closure of ``node``, including the node itself."""
        key = self._key(node)
        closure = {key}
        stack = [key]
        while stack:
            for p in self.parents[stack.pop()]:
                if p not in closure:
                    closure.add(p)
                    stack.append(p)
        return closure

    def _key(self, node) -> str:
        key = normalize_id(node)
        if key not in self.parents:
            raise DagError(f"unknown disease {node!r}")
        return key


class SemanticSimilarity:
    """Cached semantic contributions over one DAG.

    ``contributions(d)`` is computed once per target disease and reused by
    every similarity query involving ``d``.
    """

    def __init__(self, dag: DiseaseDag, params: SimParams | None = None):
        self.dag = dag
        self.params = params or SimParams()
        self._cache: dict[str, dict[str, float]] = {}

    def contributions(self, d) -> dict[str, float]:
        key = self.dag._key(d)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        delta = self.params.delta
        # Breadth-first from d towards the roots. Every edge scales by the same
        # delta, so the max over children is attained by the first visit.
        contrib = {key: 1.0}
        frontier = [key]
        while frontier:
            nxt = []
            for child in frontier:
                value = delta * contrib[child]
                for parent in sorted(self.dag.parents[child]):
                    if parent not in contrib:
                        contrib[parent] = value
                        nxt.append(parent)
            frontier = nxt
        self._cache[key] = contrib
        return contrib

    def contribution(self, d, di) -> float:
        contrib = self.contributions(d)
        key = normalize_id(di)
        if key not in contrib:
            raise DagError(f"{di!r} is not an ancestor of {d!r}")
        return contrib[key]

    def value(self, d) -> float:
        return float(sum(self.contributions(d).values()))

    def similarity(self, di, dj) -> float:
        ci = self.contributions(di)
        cj = self.contributions(dj)
        if ci is cj:
            return 1.0
        shared = ci.keys() & cj.keys()
        if not shared:
            return 0.0
        num = sum(ci[a] + cj[a] for a in sorted(shared))
        return min(1.0, num / (self.value(di) + self.value(dj)))


def semantic_contribution(dag: DiseaseDag, d, di, params: SimParams | None = None) -> float:
    """Contribution of ancestor ``di`` to disease ``d``."""
    return SemanticSimilarity(dag, params).contribution(d, di)


def semantic_value(dag: DiseaseDag, d, params: SimParams | None = None) -> float:
    return SemanticSimilarity(dag, params).value(d)


def disease_similarity(dag: DiseaseDag, di, dj, params: SimParams | None = None) -> float:
    return SemanticSimilarity(dag, params).similarity(di, dj)


def mirna_similarity(ei, ej, disease_sets, s_disease: "SimilarityMatrix") -> float:
    """Best-match average of the disease similarities of two miRNAs.

    ``disease_sets`` maps each miRNA to the diseases it is associated with;
    ``s_disease`` supplies disease-disease similarities by label. An empty
    disease set yields 0.
    """
    di = sorted(disease_sets.get(ei, ()))
    dj = sorted(disease_sets.get(ej, ()))
    if not di or not dj:
        logger.warning("empty disease set for %r or %r; similarity set to 0", ei, ej)
        return 0.0
    sub = s_disease.submatrix(di, dj)
    total = sub.max(axis=1).sum() + sub.max(axis=0).sum()
    return float(total / (len(di) + len(dj)))


@dataclass
class SimilarityMatrix:
    """Symmetric similarity matrix with ordered labels."""

    labels: list[str]
    values: np.ndarray
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.labels = list(self.labels)
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.labels)
        if self.values.shape != (n, n):
            raise ValueError(f"similarity values have shape {self.values.shape}, expected {(n, n)}")
        self._index = {}
        for i, label in enumerate(self.labels):
            key = normalize_id(label)
            if key in self._index:
                raise ValueError(f"duplicate label {label!r}")
            self._index[key] = i

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label) -> int:
        try:
            return self._index[normalize_id(label)]
        except KeyError:
            raise KeyError(f"label {label!r} not in similarity matrix") from None

    def submatrix(self, rows, cols) -> np.ndarray:
        ri = [self.index(r) for r in rows]
        ci = [self.index(c) for c in cols]
        return self.values[np.ix_(ri, ci)]

    def reorder(self, labels) -> "SimilarityMatrix":
        """Matrix restricted and permuted to ``labels``; every label must exist."""
        idx = [self.index(label) for label in labels]
        return SimilarityMatrix(list(labels), self.values[np.ix_(idx, idx)])

    def check(self, atol: float = 1e-12):
        """Raise ``ValueError`` if symmetry, range or finiteness is violated."""
        v = self.values
        if not np.all(np.isfinite(v)):
            raise ValueError("similarity matrix contains non-finite values")
        if not np.allclose(v, v.T, rtol=0.0, atol=atol):
            raise ValueError("similarity matrix is not symmetric")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("similarity values outside [0, 1]")
        return self


def _disease_matrix(diseases, sem: SemanticSimilarity) -> np.ndarray:
    """All pairwise disease similarities, vectorised over shared ancestors."""
    n = len(diseases)
    present = [i for i, d in enumerate(diseases) if d in sem.dag]
    missing = [d for d in diseases if d not in sem.dag]
    if missing:
        logger.warning(
            "%d disease(s) not found in the ontology; similarity 0 to all others: %s",
            len(missing), ", ".join(missing[:10]),
        )
    S = np.eye(n)
    if len(present) < 2:
        return S

    contribs = [sem.contributions(diseases[i]) for i in present]
    nodes = sorted(set().union(*contribs))
    col = {node: c for c, node in enumerate(nodes)}
    W = np.zeros((len(present), len(nodes)))
    for row, contrib in enumerate(contribs):
        for node, value in contrib.items():
            W[row, col[node]] = value
    shared = (W > 0).astype(np.float64)
    half = W @ shared.T
    # half[i, j] sums C(d_i, a) over ancestors a shared with d_j
    numer = half + half.T
    sv = W.sum(axis=1)
    sub = numer / (sv[:, None] + sv[None, :])
    np.clip(sub, 0.0, 1.0, out=sub)
    np.fill_diagonal(sub, 1.0)
    S[np.ix_(present, present)] = sub
    return S


def _mirna_matrix(disease_sets, n_diseases: int, S_n: np.ndarray) -> np.ndarray:
    """Best-match averages for all miRNA pairs.

    ``disease_sets[i]`` holds disease indices (into ``S_n``) for miRNA ``i``.
    """
    m = len(disease_sets)
    A = np.zeros((m, n_diseases))
    B = np.zeros((m, n_diseases))
    for i, ds in enumerate(disease_sets):
        ds = sorted(ds)
        if ds:
            A[i, ds] = 1.0
            B[i] = S_n[ds].max(axis=0)
    sizes = A.sum(axis=1)
    # half[i, j] = sum over d in D(j) of max_{d' in D(i)} S(d, d')
    half = B @ A.T
    numer = half + half.T
    denom = sizes[:, None] + sizes[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        S = np.where(denom > 0, numer / np.where(denom > 0, denom, 1.0), 0.0)
    empty = sizes == 0
    if empty.any():
        logger.warning("%d miRNA(s) without associated diseases; similarity 0", int(empty.sum()))
        S[empty, :] = 0.0
        S[:, empty] = 0.0
    np.clip(S, 0.0, 1.0, out=S)
    np.fill_diagonal(S, 1.0)
    return S


def build_similarity_matrices(dataset, dag: DiseaseDag, params: SimParams | None = None):
    """Compute ``(S_m, S_n)`` aligned with the dataset's vocabularies."""
    sem = SemanticSimilarity(dag, params)
    S_n = _disease_matrix(dataset.disease_vocab, sem)
    disease_sets = [dataset.disease_sets.get(i, set()) for i in range(len(dataset.mirna_vocab))]
    S_m = _mirna_matrix(disease_sets, len(dataset.disease_vocab), S_n)
    return (
        SimilarityMatrix(dataset.mirna_vocab, S_m).check(),
        SimilarityMatrix(dataset.disease_vocab, S_n).check(),
    )
