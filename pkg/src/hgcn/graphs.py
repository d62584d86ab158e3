"""TUDataset parsing, node featurization, adjacency normalization and folds."""

from __future__ import annotations

import enum
import io
import logging
import urllib.request
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T

logger = logging.getLogger(__name__)

TUDATASET_URL = "https://www.chrsmrrs.com/graphkerneldatasets"

# the benchmarks evaluated by the method; names as published in the archive
SUPPORTED_DATASETS = (
    "MUTAG", "NCI1", "PROTEINS", "DD", "ENZYMES", "PTC_MR", "NCI109",
    "COLLAB", "IMDB-BINARY", "IMDB-MULTI", "REDDIT-BINARY",
)


class DatasetError(ValueError):
    pass


class FeatureScheme(str, enum.Enum):
    NODE_LABEL_ONEHOT = "node-label-onehot"
    DEGREE_ONEHOT = "degree-onehot"


@dataclass
class GraphInstance:
    adjacency: np.ndarray
    label: int
    features: np.ndarray | None = None
    node_labels: np.ndarray | None = None

    @property
    def node_count(self) -> int:
        return self.adjacency.shape[0]

    def permuted(self, perm) -> "GraphInstance":
        """Relabel nodes so that new node ``i`` is old node ``perm[i]``."""
        perm = np.asarray(perm)
        return GraphInstance(
            adjacency=self.adjacency[np.ix_(perm, perm)],
            label=self.label,
            features=None if self.features is None else self.features[perm],
            node_labels=None if self.node_labels is None else self.node_labels[perm],
        )


@dataclass
class Dataset:
    graphs: list[GraphInstance]
    num_classes: int
    name: str = ""
    feature_scheme: FeatureScheme | None = None
    label_values: list[int] = field(default_factory=list)
    node_label_values: list[int] | None = None

    @property
    def feature_dim(self) -> int:
        if not self.graphs or self.graphs[0].features is None:
            return 0
        return self.graphs[0].features.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=int)

    def __len__(self) -> int:
        return len(self.graphs)

    def subset(self, indices) -> "Dataset":
        return replace(self, graphs=[self.graphs[i] for i in indices])


# ---------------------------------------------------------------------------
# parsing


def _read_ints(path: Path, width: int) -> list[tuple[int, ...]]:
    rows = []
    with open(path, newline=None) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            tokens = [t.strip() for t in line.split(",")]
            if len(tokens) != width:
                raise DatasetError(f"{path.name}:{lineno}: expected {width} value(s), got {line!r}")
            try:
                rows.append(tuple(int(t) for t in tokens))
            except ValueError:
                raise DatasetError(f"{path.name}:{lineno}: non-integer token in {line!r}") from None
    return rows


def parse_tudataset(directory, name: str) -> Dataset:
    """Load ``<name>_*.txt`` files from ``directory``.

    Edges are symmetrized and self-loops dropped; graph labels and node labels
    are remapped to contiguous ranges in sorted order of the raw values.
    """
    directory = Path(directory)
    files = {kind: directory / f"{name}_{kind}.txt"
             for kind in ("A", "graph_indicator", "graph_labels", "node_labels")}
    for kind in ("A", "graph_indicator", "graph_labels"):
        if not files[kind].is_file():
            raise DatasetError(f"missing required file {files[kind]}")

    indicator = [r[0] for r in _read_ints(files["graph_indicator"], 1)]
    raw_labels = [r[0] for r in _read_ints(files["graph_labels"], 1)]
    n_graphs = len(raw_labels)

    # node ids are 1-indexed and graphs occupy contiguous node ranges
    first = {}
    counts = np.zeros(n_graphs + 1, dtype=int)
    for node, gid in enumerate(indicator, start=1):
        if not 1 <= gid <= n_graphs:
            raise DatasetError(f"{files['graph_indicator'].name}:{node}: graph id {gid} "
                               f"outside 1..{n_graphs}")
        first.setdefault(gid, node)
        counts[gid] += 1
    for gid in range(1, n_graphs + 1):
        if counts[gid] == 0:
            raise DatasetError(f"graph {gid} has no nodes")
    adjacencies = [np.zeros((counts[g], counts[g])) for g in range(1, n_graphs + 1)]

    with open(files["A"], newline=None) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            tokens = [t.strip() for t in line.split(",")]
            try:
                i, j = (int(t) for t in tokens)
            except ValueError:
                raise DatasetError(f"{files['A'].name}:{lineno}: malformed edge {line!r}") from None
            if not (1 <= i <= len(indicator) and 1 <= j <= len(indicator)):
                raise DatasetError(f"{files['A'].name}:{lineno}: node id out of range in {line!r}")
            gid = indicator[i - 1]
            lo, hi = first[gid], first[gid] + counts[gid] - 1
            if not (lo <= j <= hi) or indicator[j - 1] != gid:
                raise DatasetError(f"{files['A'].name}:{lineno}: edge ({i}, {j}) leaves graph "
                                   f"{gid} (nodes {lo}..{hi})")
            if i == j:
                continue
            a = adjacencies[gid - 1]
            a[i - lo, j - lo] = a[j - lo, i - lo] = 1.0

    label_values = sorted(set(raw_labels))
    remap = {v: k for k, v in enumerate(label_values)}

    node_labels = None
    node_label_values = None
    if files["node_labels"].is_file():
        raw_nodes = [r[0] for r in _read_ints(files["node_labels"], 1)]
        if len(raw_nodes) != len(indicator):
            raise DatasetError(f"{files['node_labels'].name}: {len(raw_nodes)} lines for "
                               f"{len(indicator)} nodes")
        node_label_values = sorted(set(raw_nodes))
        nmap = {v: k for k, v in enumerate(node_label_values)}
        node_labels = np.array([nmap[v] for v in raw_nodes], dtype=int)

    graphs = []
    for g in range(1, n_graphs + 1):
        lo = first[g] - 1
        nl = None if node_labels is None else node_labels[lo:lo + counts[g]]
        graphs.append(GraphInstance(adjacencies[g - 1], remap[raw_labels[g - 1]], node_labels=nl))
    logger.info("parsed %s: %d graphs, %d classes", name, n_graphs, len(label_values))
    return Dataset(graphs, len(label_values), name=name, label_values=label_values,
                   node_label_values=node_label_values)


def write_tudataset(dataset: Dataset, directory, name: str) -> None:
    """Serialize in TUDataset layout; inverse of :func:`parse_tudataset`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    edges, indicator, nodes = [], [], []
    offset = 0
    for gid, g in enumerate(dataset.graphs, start=1):
        src, dst = np.nonzero(g.adjacency)
        edges += [f"{i + offset + 1}, {j + offset + 1}" for i, j in zip(src, dst)]
        indicator += [str(gid)] * g.node_count
        if g.node_labels is not None:
            nodes += [str(v) for v in g.node_labels]
        offset += g.node_count
    values = dataset.label_values or list(range(dataset.num_classes))
    (directory / f"{name}_A.txt").write_text("\n".join(edges) + "\n")
    (directory / f"{name}_graph_indicator.txt").write_text("\n".join(indicator) + "\n")
    (directory / f"{name}_graph_labels.txt").write_text(
        "\n".join(str(values[g.label]) for g in dataset.graphs) + "\n")
    if nodes:
        (directory / f"{name}_node_labels.txt").write_text("\n".join(nodes) + "\n")


def fetch_dataset(name: str, dest, base_url: str = TUDATASET_URL) -> Path:
    """Download and unpack a TUDataset archive; no-op if already parseable."""
    if name not in SUPPORTED_DATASETS:
        raise DatasetError(f"unknown dataset {name!r}; supported: {', '.join(SUPPORTED_DATASETS)}")
    target = Path(dest) / name
    if target.is_dir():
        try:
            parse_tudataset(target, name)
            logger.info("%s already present at %s", name, target)
            return target
        except DatasetError:
            logger.warning("existing %s is invalid, downloading again", target)
    url = f"{base_url.rstrip('/')}/{name}.zip"
    logger.info("downloading %s", url)
    try:
        with urllib.request.urlopen(url, timeout=60) as resp:
            payload = resp.read()
    except OSError as exc:
        raise DatasetError(f"download of {url} failed: {exc}") from exc
    try:
        archive = zipfile.ZipFile(io.BytesIO(payload))
    except zipfile.BadZipFile as exc:
        raise DatasetError(f"{url} is not a zip archive") from exc
    target.mkdir(parents=True, exist_ok=True)
    for member in archive.namelist():
        base = member.rsplit("/", 1)[-1]
        if base.startswith(f"{name}_") and base.endswith(".txt"):
            (target / base).write_bytes(archive.read(member))
    parse_tudataset(target, name)
    return target


# ---------------------------------------------------------------------------
# features


def build_features(dataset: Dataset, scheme, max_degree: int = 63) -> Dataset:
    scheme = FeatureScheme(scheme)
    graphs = []
    if scheme is FeatureScheme.NODE_LABEL_ONEHOT:
        if dataset.node_label_values is None or any(g.node_labels is None for g in dataset.graphs):
            raise DatasetError("node-label-onehot needs a _node_labels.txt file; "
                               "use the degree-onehot scheme for this dataset")
        dim = len(dataset.node_label_values)
        for g in dataset.graphs:
            x = np.zeros((g.node_count, dim))
            x[np.arange(g.node_count), g.node_labels] = 1.0
            graphs.append(replace(g, features=x))
    else:
        if max_degree < 0:
            raise ValueError("max_degree must be non-negative")
        for g in dataset.graphs:
            deg = np.minimum((g.adjacency > 0).sum(axis=1), max_degree).astype(int)
            x = np.zeros((g.node_count, max_degree + 1))
            x[np.arange(g.node_count), deg] = 1.0
            graphs.append(replace(g, features=x))
    return replace(dataset, graphs=graphs, feature_scheme=scheme)


# ---------------------------------------------------------------------------
# adjacency


def normalize_adjacency(A):
    """Symmetric GCN propagation matrix D^-1/2 (A + I) D^-1/2.

    Accepts an ndarray (returns an ndarray) or a Tensor (returns a Tensor that
    is differentiable in A, as needed for coarsened adjacencies).
    """
    if not isinstance(A, T.Tensor):
        return normalize_adjacency(T.Tensor(A)).data
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise T.ShapeError("normalize_adjacency", A.shape)
    n = A.shape[0]
    with_loops = A + np.eye(n)
    inv_sqrt = T.power(T.sum(with_loops, axis=1), -0.5)
    return with_loops * T.reshape(inv_sqrt, (n, 1)) * T.reshape(inv_sqrt, (1, n))


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: np.ndarray
    seed: int

    def split(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """(train indices, held-out indices) for one fold."""
        held = np.flatnonzero(self.assignments == fold)
        train = np.flatnonzero(self.assignments != fold)
        return train, held


def make_folds(dataset: Dataset, k: int, seed: int) -> FoldPlan:
    """Stratified assignment: shuffle each class, then deal round-robin.

    Each class's dealing starts where the previous class stopped so fold sizes
    stay within one graph of each other.
    """
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    labels = dataset.labels
    rng = np.random.default_rng(seed)
    assignments = np.full(len(labels), -1, dtype=int)
    start = 0
    for cls in range(dataset.num_classes):
        members = np.flatnonzero(labels == cls)
        if len(members) < k:
            raise ValueError(f"class {cls} has {len(members)} graphs, fewer than k={k}")
        members = rng.permutation(members)
        assignments[members] = (start + np.arange(len(members))) % k
        start = (start + len(members)) % k
    return FoldPlan(k, assignments, seed)


def stratified_subset(dataset: Dataset, n: int, seed: int) -> Dataset:
    """``n`` graphs drawn without replacement, class shares rounded by largest remainder."""
    if not 0 < n <= len(dataset):
        raise ValueError(f"subset size {n} outside 1..{len(dataset)}")
    labels = dataset.labels
    counts = np.bincount(labels, minlength=dataset.num_classes)
    exact = counts * n / counts.sum()
    take = np.floor(exact).astype(int)
    for cls in np.argsort(-(exact - take), kind="stable")[: n - take.sum()]:
        take[cls] += 1
    rng = np.random.default_rng(seed)
    chosen = []
    for cls in range(dataset.num_classes):
        members = np.flatnonzero(labels == cls)
        chosen.extend(rng.choice(members, size=take[cls], replace=False).tolist())
    return dataset.subset(sorted(chosen))
