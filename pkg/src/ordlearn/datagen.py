"""Ground-truth graph sampling and synthetic SEM data generation.

Supported structural equation families:

* ``LinearGaussian`` -- x_j = w^T parents + eps, standard Gaussian noise with
  equal variances.
* ``LiNGAM`` -- same linear mechanism, but the Gaussian noise is passed
  through a per-variable power nonlinearity sign(z)*|z|^q to make it
  non-Gaussian.
* ``GaussianProcess`` -- f_j drawn from a zero-mean GP with RBF kernel of
  bandwidth one over the parent values, plus standard Gaussian noise.

Graphs come from Erdos-Renyi or preferential-attachment (scale-free)
sampling with an average of h*d edges.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graphs import DirectedGraph, GraphError, topological_order

LINGAM_EXPONENT_RANGES = ((0.5, 0.8), (1.2, 2.0))


class DataError(ValueError):
    """Raised for invalid generation specs or degenerate data."""


@dataclass(frozen=True)
class GraphSpec:
    scheme: str  # "ER" | "SF"
    d: int
    h: float
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("ER", "SF"):
            raise DataError(f"unknown graph scheme {self.scheme!r}")
        if self.d < 2:
            raise DataError(f"need at least 2 nodes, got {self.d}")
        if self.h < 1:
            raise DataError(f"average-degree parameter must be >= 1, got {self.h}")


@dataclass(frozen=True)
class SemSpec:
    family: str  # "LinearGaussian" | "LiNGAM" | "GaussianProcess"
    m: int
    weight_range: tuple[float, float] = (0.5, 2.0)
    noise_scale: float = 1.0
    equal_variance: bool = True

    def __post_init__(self):
        if self.family not in ("LinearGaussian", "LiNGAM", "GaussianProcess"):
            raise DataError(f"unknown SEM family {self.family!r}")
        if self.m < 1:
            raise DataError(f"sample count must be >= 1, got {self.m}")
        lo, hi = self.weight_range
        if not (0 < lo <= hi):
            raise DataError(f"weight range must exclude zero, got {self.weight_range}")
        if self.noise_scale <= 0:
            raise DataError(f"noise scale must be positive, got {self.noise_scale}")


@dataclass(frozen=True)
class Dataset:
    """m x d observation matrix with its generating graph and specs."""

    data: np.ndarray
    truth: DirectedGraph
    graph_spec: GraphSpec | None = None
    sem_spec: SemSpec | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise DataError(f"data must be 2-D, got shape {arr.shape}")
        if arr.shape[1] != self.truth.d:
            raise DataError(
                f"data has {arr.shape[1]} columns but truth graph has {self.truth.d} nodes"
            )
        if not np.all(np.isfinite(arr)):
            raise DataError("data contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def m(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]


def sample_graph(spec: GraphSpec) -> DirectedGraph:
    """Sample an acyclic ground-truth graph with on average h*d edges."""
    rng = np.random.default_rng(spec.seed)
    if spec.scheme == "ER":
        adj = _sample_er(spec.d, spec.h, rng)
    else:
        adj = _sample_sf(spec.d, spec.h, rng)
    graph = DirectedGraph(spec.d, adj)
    if not graph.is_acyclic():
        raise AssertionError("sampled graph is cyclic; generator is broken")
    return graph


def _sample_er(d: int, h: float, rng: np.random.Generator) -> np.ndarray:
    # Each lower-triangular pair, under a random node relabeling, appears
    # independently with p = 2h/(d-1), giving h*d edges in expectation.
    p = min(1.0, 2.0 * h / (d - 1))
    perm = rng.permutation(d)
    adj = np.zeros((d, d), dtype=bool)
    for i in range(d):
        for j in range(i + 1, d):
            if rng.random() < p:
                adj[perm[i], perm[j]] = True
    return adj


def _sample_sf(d: int, h: float, rng: np.random.Generator) -> np.ndarray:
    # Barabasi-Albert preferential attachment: each new node attaches to
    # min(h, #existing) distinct nodes chosen proportionally to degree, and
    # every edge is then oriented from the earlier node to the later one.
    h_int = max(1, int(round(h)))
    if h_int >= d:
        raise DataError(f"SF attachment count h={h_int} must be < d={d}")
    adj = np.zeros((d, d), dtype=bool)
    targets = list(range(h_int))
    repeated: list[int] = []
    for new in range(h_int, d):
        for t in targets:
            adj[t, new] = True
        repeated.extend(targets)
        repeated.extend([new] * h_int)
        targets = _distinct_choice(repeated, h_int, rng)
    return adj


def _distinct_choice(pool: list[int], k: int, rng: np.random.Generator) -> list[int]:
    chosen: set[int] = set()
    while len(chosen) < k:
        chosen.add(pool[rng.integers(len(pool))])
    return sorted(chosen)


def _draw_weights(truth: DirectedGraph, weight_range, rng) -> np.ndarray:
    lo, hi = weight_range
    w = np.zeros((truth.d, truth.d))
    rows, cols = np.nonzero(truth.edges)
    mags = rng.uniform(lo, hi, size=rows.size)
    signs = rng.choice([-1.0, 1.0], size=rows.size)
    w[rows, cols] = mags * signs
    return w


def _draw_lingam_exponent(rng) -> float:
    lengths = [hi - lo for lo, hi in LINGAM_EXPONENT_RANGES]
    u = rng.uniform(0.0, sum(lengths))
    for (lo, hi), length in zip(LINGAM_EXPONENT_RANGES, lengths):
        if u < length:
            return lo + u
        u -= length
    return LINGAM_EXPONENT_RANGES[-1][1]


def generate_linear(
    truth: DirectedGraph, sem: SemSpec, seed: int = 0
) -> tuple[Dataset, np.ndarray]:
    """Generate linear SEM data; returns the dataset and the weight matrix."""
    if sem.family not in ("LinearGaussian", "LiNGAM"):
        raise DataError(f"generate_linear cannot handle family {sem.family!r}")
    topo = topological_order(truth)
    if topo is None:
        raise GraphError("truth graph is cyclic")
    rng = np.random.default_rng(seed)
    weights = _draw_weights(truth, sem.weight_range, rng)

    d, m = truth.d, sem.m
    exponents: dict[int, float] = {}
    noise = np.empty((m, d))
    for j in range(d):
        z = rng.standard_normal(m)
        if sem.family == "LiNGAM":
            q = _draw_lingam_exponent(rng)
            exponents[j] = q
            z = np.sign(z) * np.abs(z) ** q
        noise[:, j] = sem.noise_scale * z

    data = np.zeros((m, d))
    for j in topo:
        parents = np.nonzero(truth.edges[:, j])[0]
        data[:, j] = data[:, parents] @ weights[parents, j] + noise[:, j]

    extras = {"seed": seed}
    if exponents:
        extras["lingam_exponents"] = exponents
    dataset = Dataset(data, truth, sem_spec=sem, extras=extras)
    return dataset, weights


def generate_gp(truth: DirectedGraph, sem: SemSpec, seed: int = 0) -> Dataset:
    """Generate nonlinear SEM data with GP-sampled mechanisms."""
    if sem.family != "GaussianProcess":
        raise DataError(f"generate_gp cannot handle family {sem.family!r}")
    topo = topological_order(truth)
    if topo is None:
        raise GraphError("truth graph is cyclic")
    rng = np.random.default_rng(seed)

    d, m = truth.d, sem.m
    data = np.zeros((m, d))
    for j in topo:
        parents = np.nonzero(truth.edges[:, j])[0]
        noise = sem.noise_scale * rng.standard_normal(m)
        if parents.size == 0:
            data[:, j] = noise
            continue
        gram = rbf_gram(data[:, parents])
        chol = _cholesky_with_jitter(gram)
        data[:, j] = chol @ rng.standard_normal(m) + noise
    return Dataset(data, truth, sem_spec=sem, extras={"seed": seed})


def rbf_gram(points: np.ndarray, bandwidth: float = 1.0) -> np.ndarray:
    """RBF kernel Gram matrix k(u,v) = exp(-||u-v||^2 / (2*bandwidth^2))."""
    sq_norms = np.sum(points**2, axis=1)
    sq_dists = sq_norms[:, None] + sq_norms[None, :] - 2.0 * points @ points.T
    np.maximum(sq_dists, 0.0, out=sq_dists)
    return np.exp(-sq_dists / (2.0 * bandwidth**2))


def _cholesky_with_jitter(gram: np.ndarray, start: float = 1e-8, stop: float = 1e-2):
    jitter = start
    while jitter <= stop:
        try:
            return np.linalg.cholesky(gram + jitter * np.eye(gram.shape[0]))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise DataError(f"Cholesky failed even with jitter {stop}")


def standardize(dataset: Dataset) -> Dataset:
    """Center and scale each column to mean 0, variance 1 (truth unchanged)."""
    mu = dataset.data.mean(axis=0)
    sd = dataset.data.std(axis=0)
    if np.any(sd < 1e-12):
        bad = np.nonzero(sd < 1e-12)[0].tolist()
        raise DataError(f"cannot standardize constant column(s) {bad}")
    extras = dict(dataset.extras)
    extras["standardized"] = True
    return Dataset(
        (dataset.data - mu) / sd,
        dataset.truth,
        graph_spec=dataset.graph_spec,
        sem_spec=dataset.sem_spec,
        extras=extras,
    )


def generate(graph_spec: GraphSpec, sem_spec: SemSpec, seed: int = 0) -> Dataset:
    """Sample a graph and generate data for it in one step."""
    truth = sample_graph(graph_spec)
    if sem_spec.family == "GaussianProcess":
        dataset = generate_gp(truth, sem_spec, seed=seed)
    else:
        dataset, _ = generate_linear(truth, sem_spec, seed=seed)
    return Dataset(
        dataset.data,
        truth,
        graph_spec=graph_spec,
        sem_spec=sem_spec,
        extras=dataset.extras,
    )


# ---------------------------------------------------------------------------
# Persistence: data.csv / truth.csv / meta.json per dataset directory.

def save_dataset(dataset: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savetxt(directory / "data.csv", dataset.data, fmt="%.17g", delimiter=",")
    dataset.truth.to_csv(directory / "truth.csv")
    meta: dict = {"extras": _jsonable(dataset.extras)}
    if dataset.graph_spec is not None:
        meta["graph"] = vars(dataset.graph_spec).copy()
    if dataset.sem_spec is not None:
        meta["sem"] = vars(dataset.sem_spec).copy()
        meta["sem"]["weight_range"] = list(dataset.sem_spec.weight_range)
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    data = np.loadtxt(directory / "data.csv", delimiter=",", ndmin=2)
    truth = DirectedGraph.from_csv(directory / "truth.csv")
    graph_spec = sem_spec = None
    extras = {}
    meta_path = directory / "meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if "graph" in meta:
            graph_spec = GraphSpec(**meta["graph"])
        if "sem" in meta:
            kwargs = dict(meta["sem"])
            kwargs["weight_range"] = tuple(kwargs["weight_range"])
            sem_spec = SemSpec(**kwargs)
        extras = meta.get("extras", {})
    return Dataset(data, truth, graph_spec=graph_spec, sem_spec=sem_spec, extras=extras)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# The Sachs protein-signalling network: 11 observed variables and the 17-edge
# consensus graph.  The package ships only this column mapping and edge list;
# the observational measurements must be supplied by the user as a CSV whose
# columns follow SACHS_COLUMNS.

SACHS_COLUMNS = (
    "raf", "mek", "plc", "pip2", "pip3", "erk", "akt", "pka", "pkc", "p38", "jnk",
)

_SACHS_EDGES = (
    ("pka", "raf"), ("pkc", "raf"),
    ("raf", "mek"), ("pka", "mek"), ("pkc", "mek"),
    ("plc", "pip3"),
    ("plc", "pip2"), ("pip3", "pip2"),
    ("mek", "erk"), ("pka", "erk"),
    ("erk", "akt"), ("pka", "akt"),
    ("pkc", "pka"),
    ("pka", "p38"), ("pkc", "p38"),
    ("pka", "jnk"), ("pkc", "jnk"),
)


def sachs_truth() -> DirectedGraph:
    """The 17-edge consensus ground truth over SACHS_COLUMNS order."""
    idx = {name: i for i, name in enumerate(SACHS_COLUMNS)}
    return DirectedGraph.from_edge_list(
        len(SACHS_COLUMNS), [(idx[a], idx[b]) for a, b in _SACHS_EDGES]
    )
