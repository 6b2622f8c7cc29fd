"""Text-attributed graph container, on-disk dataset format and the planted
synthetic generator."""
from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from ._kernels import spmm

FEATURE_MAGIC = b"TAGF"


class DatasetError(ValueError):
    """Raised when a dataset directory or graph violates the format."""


@dataclass(frozen=True, eq=False)
class TagGraph:
    n_nodes: int
    adjacency: sp.csr_matrix
    features_base: np.ndarray
    task: str
    labels: np.ndarray
    label_mask: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    n_classes: int = 0
    texts: list[str] | None = None
    name: str = "graph"
    directed: bool = False

    def __post_init__(self):
        validate(self)

    @property
    def feat_dim(self) -> int:
        return self.features_base.shape[1]

    @property
    def out_dim(self) -> int:
        return self.n_classes if self.task == "classification" else 1

    def mask(self, split: str) -> np.ndarray:
        return {"train": self.train_mask, "val": self.val_mask, "test": self.test_mask}[split]

    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)


def validate(g: TagGraph) -> None:
    n = g.n_nodes
    a = g.adjacency
    if a.shape != (n, n):
        raise DatasetError(f"adjacency shape {a.shape} does not match n_nodes={n}")
    if not a.has_sorted_indices:
        raise DatasetError("adjacency column indices must be sorted per row")
    if not g.directed and (a != a.T).nnz != 0:
        raise DatasetError("adjacency is not symmetric")
    if g.features_base.shape[0] != n or g.features_base.ndim != 2:
        raise DatasetError("features_base must be N x D")
    if g.features_base.dtype != np.float32:
        raise DatasetError("features_base must be float32")
    if not np.all(np.isfinite(g.features_base)):
        raise DatasetError("features_base contains non-finite entries")
    if g.task not in ("classification", "regression"):
        raise DatasetError(f"unknown task {g.task!r}")
    if g.task == "classification":
        lab = g.labels[g.label_mask]
        if g.n_classes < 1 or (lab.size and (lab.min() < 0 or lab.max() >= g.n_classes)):
            raise DatasetError("class labels out of range")
    masks = np.stack([g.train_mask, g.val_mask, g.test_mask]).astype(np.int64)
    if np.any(masks.sum(axis=0) > 1):
        raise DatasetError("split overlap")
    in_split = masks.sum(axis=0) == 1
    if np.any(in_split & ~g.label_mask):
        raise DatasetError("split contains unlabeled nodes")
    if np.any(g.label_mask & ~in_split):
        raise DatasetError("labeled node assigned to no split")
    if g.texts is not None and len(g.texts) != n:
        raise DatasetError("texts length does not match n_nodes")


def build_adjacency(n: int, edges: np.ndarray, directed: bool = False) -> sp.csr_matrix:
    """CSR adjacency with unit weights, sorted indices, no duplicates, no self-loops."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise DatasetError("edge endpoint out of range")
    u, v = edges[:, 0], edges[:, 1]
    keep = u != v
    u, v = u[keep], v[keep]
    if not directed:
        u, v = np.concatenate([u, v]), np.concatenate([v, u])
    a = sp.coo_matrix((np.ones(u.shape[0]), (u, v)), shape=(n, n)).tocsr()
    a.sum_duplicates()
    a.data[:] = 1.0
    return _as_int64_csr(a)


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """Renormalized propagation operator D^-1/2 (A + I) D^-1/2 in CSR form.

    ``csr_t`` holds the transpose for directed graphs and is ``None`` when the
    operator is symmetric.
    """

    csr: sp.csr_matrix
    csr_t: sp.csr_matrix | None = None

    @property
    def shape(self):
        return self.csr.shape

    def apply(self, h: np.ndarray) -> np.ndarray:
        return _apply(self.csr, h)

    def apply_t(self, h: np.ndarray) -> np.ndarray:
        return _apply(self.csr if self.csr_t is None else self.csr_t, h)

    def toarray(self) -> np.ndarray:
        return self.csr.toarray()


def _apply(m: sp.csr_matrix, h: np.ndarray) -> np.ndarray:
    return spmm(m.indptr, m.indices, m.data, np.ascontiguousarray(h, dtype=np.float64))


def _as_int64_csr(m: sp.csr_matrix) -> sp.csr_matrix:
    m.sort_indices()
    m.indptr = m.indptr.astype(np.int64)
    m.indices = m.indices.astype(np.int64)
    return m


def normalize_adjacency(g: TagGraph | sp.csr_matrix) -> NormalizedAdjacency:
    a = g.adjacency if isinstance(g, TagGraph) else g
    n = a.shape[0]
    a_tilde = (a + sp.identity(n, format="csr")).tocsr()
    a_tilde.sum_duplicates()
    a_tilde.sort_indices()
    deg = np.diff(a_tilde.indptr).astype(np.float64)
    rows = np.repeat(np.arange(n), np.diff(a_tilde.indptr))
    a_tilde.data = 1.0 / np.sqrt(deg[rows] * deg[a_tilde.indices])
    a_tilde = _as_int64_csr(a_tilde)
    symmetric = (a != a.T).nnz == 0
    a_t = None if symmetric else _as_int64_csr(a_tilde.T.tocsr())
    return NormalizedAdjacency(a_tilde, a_t)


def neighborhood_mean(features: np.ndarray, g: TagGraph) -> np.ndarray:
    """Unweighted mean of neighbor rows; isolated nodes keep their own row."""
    a = g.adjacency
    deg = np.diff(a.indptr)
    rows = np.repeat(np.arange(g.n_nodes), deg)
    weights = 1.0 / deg[rows]
    out = spmm(a.indptr, a.indices, weights, np.ascontiguousarray(features, dtype=np.float64))
    iso = deg == 0
    out[iso] = features[iso]
    return out


# --- binary feature files ---------------------------------------------------


def write_feature_bin(path: str | os.PathLike, x: np.ndarray) -> None:
    x = np.ascontiguousarray(x, dtype="<f4")
    n, d = x.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", n, d))
        fh.write(x.tobytes(order="C"))


def read_feature_bin(path: str | os.PathLike, mmap: bool = False) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    with open(path, "rb") as fh:
        header = fh.read(12)
    if len(header) < 12 or header[:4] != FEATURE_MAGIC:
        raise DatasetError(f"{path.name}: bad magic bytes")
    n, d = struct.unpack("<II", header[4:])
    payload = path.stat().st_size - 12
    if payload != 4 * n * d:
        raise DatasetError(f"{path.name}: payload size mismatch (header {n}x{d}, {payload} bytes)")
    if mmap:
        return np.memmap(path, dtype="<f4", mode="r", offset=12, shape=(n, d))
    x = np.fromfile(path, dtype="<f4", offset=12).reshape(n, d)
    return x.astype(np.float32, copy=False)


# --- dataset directories ----------------------------------------------------


def _require(path: Path) -> Path:
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    return path


def load_dataset(dir_path: str | os.PathLike) -> TagGraph:
    root = Path(dir_path)
    meta = json.loads(_require(root / "meta.json").read_text())
    n = int(meta["n_nodes"])
    d = int(meta["feat_dim"])
    task = meta.get("task", "classification")
    directed = bool(meta.get("directed", False))

    edges = []
    with open(_require(root / "edges.csv"), newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip().lstrip("-").isdigit():
                continue
            edges.append((int(row[0]), int(row[1])))
    adjacency = build_adjacency(n, np.array(edges, dtype=np.int64).reshape(-1, 2), directed)

    x = read_feature_bin(_require(root / "features.bin"))
    if x.shape != (n, d):
        raise DatasetError(f"features.bin has shape {x.shape}, meta says ({n}, {d})")

    label_mask = np.zeros(n, dtype=bool)
    if task == "classification":
        labels = np.full(n, -1, dtype=np.int64)
    else:
        labels = np.zeros(n, dtype=np.float64)
    with open(_require(root / "labels.csv"), newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip().isdigit():
                continue
            nid = int(row[0])
            if not 0 <= nid < n:
                raise DatasetError(f"label for out-of-range node {nid}")
            labels[nid] = int(row[1]) if task == "classification" else float(row[1])
            label_mask[nid] = True

    splits = json.loads(_require(root / "splits.json").read_text())
    masks = {}
    for key in ("train", "val", "test"):
        m = np.zeros(n, dtype=bool)
        ids = np.asarray(splits.get(key, []), dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise DatasetError(f"split {key} has out-of-range ids")
        m[ids] = True
        masks[key] = m
    if np.any((masks["train"].astype(int) + masks["val"] + masks["test"]) > 1):
        raise DatasetError("split overlap")

    texts = None
    tpath = root / "texts.jsonl"
    if tpath.exists():
        texts = [""] * n
        with open(tpath) as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    texts[int(rec["id"])] = rec["text"]

    return TagGraph(
        n_nodes=n,
        adjacency=adjacency,
        features_base=x,
        task=task,
        labels=labels,
        label_mask=label_mask,
        train_mask=masks["train"],
        val_mask=masks["val"],
        test_mask=masks["test"],
        n_classes=int(meta.get("n_classes", 0)),
        texts=texts,
        name=meta.get("name", root.name),
        directed=directed,
    )


def load_aug_features(dir_path: str | os.PathLike, mmap: bool = True) -> np.ndarray | None:
    p = Path(dir_path) / "aug_features.bin"
    return read_feature_bin(p, mmap=mmap) if p.exists() else None


def save_dataset(g: TagGraph, dir_path: str | os.PathLike, aug_features: np.ndarray | None = None) -> None:
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "n_nodes": g.n_nodes,
        "feat_dim": g.feat_dim,
        "task": g.task,
        "directed": g.directed,
        "name": g.name,
    }
    if g.task == "classification":
        meta["n_classes"] = g.n_classes
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")

    coo = g.adjacency.tocoo()
    keep = np.ones(coo.nnz, dtype=bool) if g.directed else coo.row < coo.col
    pairs = np.stack([coo.row[keep], coo.col[keep]], axis=1)
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    with open(root / "edges.csv", "w") as fh:
        fh.writelines(f"{u},{v}\n" for u, v in pairs)

    write_feature_bin(root / "features.bin", g.features_base)

    with open(root / "labels.csv", "w") as fh:
        for nid in np.flatnonzero(g.label_mask):
            val = g.labels[nid]
            fh.write(f"{nid},{int(val)}\n" if g.task == "classification" else f"{nid},{float(val)!r}\n")

    splits = {k: np.flatnonzero(g.mask(k)).tolist() for k in ("train", "val", "test")}
    (root / "splits.json").write_text(json.dumps(splits) + "\n")

    if g.texts is not None:
        with open(root / "texts.jsonl", "w") as fh:
            for i, t in enumerate(g.texts):
                fh.write(json.dumps({"id": i, "text": t}) + "\n")
    if aug_features is not None:
        write_feature_bin(root / "aug_features.bin", aug_features)


# --- planted synthetic generator --------------------------------------------

_VOCAB = [
    "camera", "lens", "tripod", "flash", "battery", "strap", "zoom", "sensor",
    "cable", "charger", "monitor", "keyboard", "mouse", "drive", "router", "laptop",
    "bag", "case", "filter", "mount", "light", "stand", "remote", "card",
]


@dataclass
class PlantedSpec:
    """Knobs of the planted generator beyond the five size arguments."""

    p_in: float = 0.15
    p_out: float = 0.02
    signal: float = 1.5
    feat_noise: float = 0.6
    train_frac: float = 0.3
    val_frac: float = 0.3


def gen_planted_dataset(
    n: int,
    d: int,
    c: int,
    corrupt_set_size: int,
    noise: float,
    seed: int,
    spec: PlantedSpec | None = None,
) -> tuple[TagGraph, np.ndarray, np.ndarray]:
    """Class-clustered stochastic block model whose corrupted nodes carry pure
    noise in their base features.

    Returns ``(graph, ground_truth_aug, corrupted_ids)``; ``ground_truth_aug``
    holds the clean features of every node (float32).
    """
    spec = spec or PlantedSpec()
    if n < 3 or d < 1 or c < 2 or c > n:
        raise DatasetError(f"invalid sizes n={n}, d={d}, c={c}")
    if not 0 <= corrupt_set_size <= n:
        raise DatasetError("corrupt_set_size must lie in [0, n]")
    rng = np.random.default_rng(seed)

    labels = rng.permutation(np.arange(n) % c).astype(np.int64)
    means = rng.standard_normal((c, d))
    means *= spec.signal / np.linalg.norm(means, axis=1, keepdims=True)
    clean = (means[labels] + spec.feat_noise * rng.standard_normal((n, d))).astype(np.float32)

    corrupted = np.sort(rng.choice(n, size=corrupt_set_size, replace=False)).astype(np.int64)
    base = clean.copy()
    base[corrupted] = (noise * rng.standard_normal((corrupt_set_size, d))).astype(np.float32)

    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], spec.p_in, spec.p_out)
    hit = rng.random(iu.shape[0]) < prob
    adjacency = build_adjacency(n, np.stack([iu[hit], ju[hit]], axis=1))

    order = rng.permutation(n)
    n_train = max(1, int(round(spec.train_frac * n)))
    n_val = max(1, int(round(spec.val_frac * n)))
    if n_train + n_val >= n:
        raise DatasetError("split fractions leave no test nodes")
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    train[order[:n_train]] = True
    val[order[n_train:n_train + n_val]] = True
    test[order[n_train + n_val:]] = True

    class_words = [rng.choice(len(_VOCAB), size=6, replace=False) for _ in range(c)]
    bad = np.zeros(n, dtype=bool)
    bad[corrupted] = True
    texts = []
    for i in range(n):
        pool = np.arange(len(_VOCAB)) if bad[i] else class_words[labels[i]]
        texts.append(" ".join(_VOCAB[j] for j in rng.choice(pool, size=8)))

    g = TagGraph(
        n_nodes=n,
        adjacency=adjacency,
        features_base=base,
        task="classification",
        labels=labels,
        label_mask=np.ones(n, dtype=bool),
        train_mask=train,
        val_mask=val,
        test_mask=test,
        n_classes=c,
        texts=texts,
        name=f"planted-n{n}-d{d}-c{c}-k{corrupt_set_size}-s{seed}",
    )
    return g, clean, corrupted
