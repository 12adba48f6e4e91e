"""Multi-objective genetic programming over diagnostic-function trees.

NSGA-II style loop: objectives are validation AUC (``f1``) and the tree
interpretability score (``f2``), both maximized.  Offspring come from four
tree edits (exchange, delete, replace, insert) composed pairwise over the
mating pool.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
import threading
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import ConfigError, ResponseDataset
from .genome import (
    MAX_DEPTH,
    SEED_MODELS,
    GenomeTree,
    Leaf,
    Op,
    canonical_key,
    computation_paths,
    get_node,
    interpretability,
    iter_nodes,
    metrics,
    random_leaf,
    random_tree,
    repair,
    replace_at,
    seed_tree,
    to_dict,
    to_dot,
)
from .operators import ALL_OPERATORS
from .training import TrainConfig, assemble, train

log = logging.getLogger(__name__)

RETRIES = 10


@dataclass
class Individual:
    tree: GenomeTree
    f1: float | None = None
    rank: int = -1
    crowding: float = 0.0
    key: str = field(init=False)
    f2: float = field(init=False)

    def __post_init__(self):
        self.key = canonical_key(self.tree)
        self.f2 = interpretability(self.tree)

    @property
    def evaluated(self) -> bool:
        return self.f1 is not None

    @property
    def objectives(self) -> tuple[float, float]:
        return (self.f1, self.f2)


class Archive:
    """Append-only ``canonical key -> (f1, f2)`` map shared across a run."""

    def __init__(self):
        self._items: dict[str, tuple[float, float]] = {}
        self._lock = threading.Lock()

    def __contains__(self, key):
        return key in self._items

    def __len__(self):
        return len(self._items)

    def get(self, key):
        return self._items.get(key)

    def add(self, key: str, f1: float, f2: float) -> None:
        with self._lock:
            self._items.setdefault(key, (f1, f2))

    def items(self):
        return list(self._items.items())

    def best_f1(self) -> float:
        return max((v[0] for v in self._items.values()), default=float("nan"))


@dataclass
class SearchConfig:
    pop: int = 100
    gen: int = 100
    node_range: tuple = (2, 4)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    workers: int | None = None  # None -> os.cpu_count()

    def __post_init__(self):
        self.node_range = tuple(self.node_range)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if self.pop < 4 or self.pop % 2:
            raise ConfigError(f"pop must be even and >= 4, got {self.pop}")
        if self.gen < 0:
            raise ConfigError(f"gen must be >= 0, got {self.gen}")
        lo, hi = self.node_range
        if not 1 <= lo <= hi <= MAX_DEPTH:
            raise ConfigError(f"node_range must satisfy 1 <= lo <= hi <= {MAX_DEPTH}")


@dataclass
class GenerationRecord:
    generation: int
    best_f1: float
    front_size: int
    archive_size: int
    front: list  # [(key, f1, f2)]


@dataclass
class SearchResult:
    front: list
    population: list
    history: list
    archive: Archive


def _choice(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _depth_ok(tree) -> bool:
    return metrics(tree).depth <= MAX_DEPTH


# --- sub-genetic operations ------------------------------------------------------


def exchange(p1: GenomeTree, p2: GenomeTree, rng) -> tuple[GenomeTree, GenomeTree]:
    """Swap one non-root subtree (leaves allowed) between the parents."""
    slots1 = [p for p, _ in iter_nodes(p1) if p]
    slots2 = [p for p, _ in iter_nodes(p2) if p]
    for _ in range(RETRIES):
        a, b = _choice(rng, slots1), _choice(rng, slots2)
        o1 = replace_at(p1, a, get_node(p2, b))
        o2 = replace_at(p2, b, get_node(p1, a))
        if _depth_ok(o1) and _depth_ok(o2):
            return repair(o1, rng), repair(o2, rng)
    return p1, p2


def _survivors(tree: GenomeTree, path) -> list:
    """Children that may take a deleted node's place without dropping other computation nodes."""
    node = get_node(tree, path)
    if node.kind.arity == 1:
        keep = [node.children[0]]
    else:
        keep = [c for i, c in enumerate(node.children) if isinstance(node.children[1 - i], Leaf)]
    if not path:
        keep = [c for c in keep if isinstance(c, Op)]  # the root must stay a computation node
    return keep


def delete_node(p: GenomeTree, rng) -> GenomeTree:
    """Remove one computation node, reconnecting one of its children to its parent.

    Only deletions that remove exactly one computation node are eligible: a
    binary node may only be deleted across a leaf sibling, which is dropped.
    """
    if len(computation_paths(p)) < 2:
        raise ValueError("delete needs at least two computation nodes")
    options = [(path, keep) for path in computation_paths(p) if (keep := _survivors(p, path))]
    path, keep = _choice(rng, options)
    return repair(replace_at(p, path, _choice(rng, keep)), rng)


def replace_node(p: GenomeTree, rng) -> GenomeTree:
    """Give one computation node a different operator, fixing up its child count."""
    path = _choice(rng, computation_paths(p))
    node = get_node(p, path)
    kind = _choice(rng, [k for k in ALL_OPERATORS if k is not node.kind])
    children = node.children
    if kind.arity > node.kind.arity:
        children = (children[0], random_leaf(rng))
    elif kind.arity < node.kind.arity:
        children = (children[int(rng.integers(2))],)
    return repair(replace_at(p, path, Op(kind, children)), rng)


def insert_node(p: GenomeTree, rng) -> GenomeTree:
    """Insert a new operator between a computation node and its parent."""
    for _ in range(RETRIES):
        kind = _choice(rng, ALL_OPERATORS)
        path = _choice(rng, computation_paths(p))
        sub = get_node(p, path)
        new = Op(kind, (sub,) if kind.arity == 1 else (sub, random_leaf(rng)))
        child = replace_at(p, path, new)
        if _depth_ok(child):
            return repair(child, rng)
    return p


_SINGLE_PARENT = {2: delete_node, 3: replace_node, 4: insert_node}


def genetic_operation(pool, rng) -> list[GenomeTree]:
    """Pairwise offspring generation over the mating pool (one child per parent)."""
    trees = [ind.tree if isinstance(ind, Individual) else ind for ind in pool]
    if len(trees) % 2:
        raise ValueError("mating pool size must be even")
    offspring = []
    for i in range(0, len(trees), 2):
        a, b = trees[i], trees[i + 1]
        if metrics(a).num_c >= 2 and metrics(b).num_c >= 2:
            op_id = int(rng.integers(1, 5))
        else:
            op_id = int(rng.integers(3, 5))
        if op_id == 1:
            offspring.extend(exchange(a, b, rng))
        else:
            fn = _SINGLE_PARENT[op_id]
            offspring.append(fn(a, rng))
            offspring.append(fn(b, rng))
    return [repair(t, rng) for t in offspring]


def single_parent_variation(tree: GenomeTree, rng) -> GenomeTree:
    ops = [replace_node, insert_node]
    if metrics(tree).num_c >= 2:
        ops.insert(0, delete_node)
    return _choice(rng, ops)(tree, rng)


def initialize_population(cfg: SearchConfig, rng) -> list[Individual]:
    """Half seed-derived (the four seeds first, then one-edit variants), half random."""
    seeds = [seed_tree(m) for m in SEED_MODELS]
    half = cfg.pop // 2
    trees: list[GenomeTree] = []
    seen: set[str] = set()

    def admit(make):
        for _ in range(RETRIES):
            tree = make()
            if canonical_key(tree) not in seen:
                break
        seen.add(canonical_key(tree))
        trees.append(tree)

    for i in range(half):
        if i < len(seeds):
            admit(lambda: seeds[i])
        else:
            base = seeds[i % len(seeds)]
            admit(lambda: single_parent_variation(base, rng))
    for _ in range(cfg.pop - half):
        admit(lambda: random_tree(cfg.node_range, rng))
    return [Individual(t) for t in trees]


# --- NSGA-II machinery ---------------------------------------------------------


def _dominance_matrix(points: np.ndarray) -> np.ndarray:
    ge = np.all(points[:, None, :] >= points[None, :, :], axis=2)
    gt = np.any(points[:, None, :] > points[None, :, :], axis=2)
    return ge & gt  # [i, j]: i dominates j


def fast_nondominated_sort(points) -> np.ndarray:
    """Front index per point (0 = non-dominated); all objectives maximized."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=int)
    dom = _dominance_matrix(points)
    counts = dom.sum(axis=0)  # how many points dominate each one
    ranks = np.full(n, -1, dtype=int)
    current = np.flatnonzero(counts == 0)
    r = 0
    while current.size:
        ranks[current] = r
        counts = counts - dom[current].sum(axis=0)
        counts[current] = -1
        current = np.flatnonzero(counts == 0)
        r += 1
    return ranks


def crowding_distance(points) -> np.ndarray:
    """Sum of normalized neighbour gaps per objective; boundary points get inf."""
    points = np.asarray(points, dtype=np.float64)
    n, m = points.shape if points.ndim == 2 else (len(points), 0)
    dist = np.zeros(n)
    if n <= 2:
        dist[:] = np.inf
        return dist
    for k in range(m):
        order = np.argsort(points[:, k], kind="stable")
        vals = points[order, k]
        dist[order[0]] = dist[order[-1]] = np.inf
        span = vals[-1] - vals[0]
        if span == 0:
            continue
        dist[order[1:-1]] += (vals[2:] - vals[:-2]) / span
    return dist


def assign_rank_and_crowding(inds: list[Individual]) -> None:
    pts = np.array([ind.objectives for ind in inds], dtype=np.float64)
    ranks = fast_nondominated_sort(pts)
    for ind, r in zip(inds, ranks):
        ind.rank = int(r)
    for r in np.unique(ranks):
        members = np.flatnonzero(ranks == r)
        for i, d in zip(members, crowding_distance(pts[members])):
            inds[i].crowding = float(d)


def tournament_select(pop: list[Individual], rng, size: int | None = None) -> list[Individual]:
    """Binary tournaments: lower rank wins, then larger crowding, then a coin flip."""
    pool = []
    for _ in range(size or len(pop)):
        a, b = (pop[int(i)] for i in rng.integers(len(pop), size=2))
        if a.rank != b.rank:
            pool.append(a if a.rank < b.rank else b)
        elif a.crowding != b.crowding:
            pool.append(a if a.crowding > b.crowding else b)
        else:
            pool.append(a if rng.random() < 0.5 else b)
    return pool


def environmental_selection(union: list[Individual], pop: int, rng=None) -> list[Individual]:
    """Keep whole fronts in rank order; truncate the last one by crowding distance."""
    if len(union) < pop:
        raise ValueError("union smaller than the population size")
    rng = rng if rng is not None else np.random.default_rng()
    assign_rank_and_crowding(union)
    chosen: list[Individual] = []
    for r in sorted({ind.rank for ind in union}):
        front = [ind for ind in union if ind.rank == r]
        if len(chosen) + len(front) <= pop:
            chosen.extend(front)
            if len(chosen) == pop:
                break
            continue
        shuffled = [front[i] for i in rng.permutation(len(front))]
        shuffled.sort(key=lambda ind: -ind.crowding)
        chosen.extend(shuffled[: pop - len(chosen)])
        break
    chosen = [copy.copy(ind) for ind in chosen]  # rank/crowding are recomputed below
    assign_rank_and_crowding(chosen)
    return chosen


# --- evaluation ------------------------------------------------------------------


def candidate_seed(run_seed: int, key: str) -> int:
    digest = hashlib.sha256(f"{run_seed}:{key}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def evaluate_tree(tree: GenomeTree, dataset: ResponseDataset, train_cfg: TrainConfig, run_seed: int) -> float:
    """Train from scratch and return the best validation AUC."""
    s = candidate_seed(run_seed, canonical_key(tree))
    model = assemble(tree, dataset.N, dataset.q.matrix, seed=s)
    return train(model, dataset, replace(train_cfg, seed=s)).best_val_auc


_WORKER_DATASET = None


def _init_worker(dataset):
    global _WORKER_DATASET
    _WORKER_DATASET = dataset


def _worker_eval(args):
    tree, train_cfg, run_seed = args
    return evaluate_tree(tree, _WORKER_DATASET, train_cfg, run_seed)


def evaluate_population(inds: list[Individual], dataset, cfg: SearchConfig, archive: Archive,
                        executor=None) -> int:
    """Fill ``f1`` for every individual, training only keys absent from the archive."""
    todo: dict[str, GenomeTree] = {}
    for ind in inds:
        if ind.key not in archive and ind.key not in todo:
            todo[ind.key] = ind.tree
    keys = list(todo)
    if executor is None:
        scores = [evaluate_tree(todo[k], dataset, cfg.train, cfg.seed) for k in keys]
    else:
        scores = list(executor.map(_worker_eval, [(todo[k], cfg.train, cfg.seed) for k in keys]))
    for k, f1 in zip(keys, scores):
        archive.add(k, f1, interpretability(todo[k]))
    for ind in inds:
        ind.f1 = archive.get(ind.key)[0]
    return len(keys)


def nondominated(inds: list[Individual]) -> list[Individual]:
    """Rank-0 individuals, one per canonical key, sorted by (-f1, -f2, key)."""
    ranks = fast_nondominated_sort([ind.objectives for ind in inds])
    out, seen = [], set()
    for ind, r in zip(inds, ranks):
        if r == 0 and ind.key not in seen:
            seen.add(ind.key)
            out.append(ind)
    return sorted(out, key=lambda ind: (-ind.f1, -ind.f2, ind.key))


def _record(g: int, population, archive) -> GenerationRecord:
    front = nondominated(population)
    return GenerationRecord(
        g, archive.best_f1(), len(front), len(archive), [(i.key, i.f1, i.f2) for i in front]
    )


def run_search(cfg: SearchConfig, dataset: ResponseDataset, on_generation=None) -> SearchResult:
    """Initialize, then loop selection -> variation -> evaluation -> environmental selection."""
    rng = np.random.default_rng(cfg.seed)
    archive = Archive()
    workers = cfg.workers or os.cpu_count() or 1
    executor = None
    if workers > 1:
        executor = ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(dataset,))
    try:
        population = initialize_population(cfg, rng)
        evaluate_population(population, dataset, cfg, archive, executor)
        assign_rank_and_crowding(population)
        history = [_record(0, population, archive)]
        if on_generation:
            on_generation(history[-1])
        for g in range(1, cfg.gen + 1):
            pool = tournament_select(population, rng)
            offspring = [Individual(t) for t in genetic_operation(pool, rng)]
            n_new = evaluate_population(offspring, dataset, cfg, archive, executor)
            population = environmental_selection(population + offspring, cfg.pop, rng)
            history.append(_record(g, population, archive))
            log.info("generation %d: best f1 %.4f, %d new evaluations", g, history[-1].best_f1, n_new)
            if on_generation:
                on_generation(history[-1])
    finally:
        if executor is not None:
            executor.shutdown()
    return SearchResult(nondominated(population), population, history, archive)


# --- run directory ----------------------------------------------------------------


def front_row(ind: Individual) -> dict:
    m = metrics(ind.tree)
    return {"key": ind.key, "f1": ind.f1, "f2": ind.f2, "depth": m.depth, "breadth": m.breadth, "num_c": m.num_c}


def write_results(result: SearchResult, out_dir) -> None:
    """``history.csv``, ``archive.jsonl`` and ``front/`` (tree JSON, DOT, metrics)."""
    out = Path(out_dir)
    front_dir = out / "front"
    front_dir.mkdir(parents=True, exist_ok=True)
    for old in front_dir.iterdir():
        old.unlink()
    with (out / "history.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["generation", "best_f1", "front_size", "archive_size"])
        for h in result.history:
            w.writerow([h.generation, repr(h.best_f1), h.front_size, h.archive_size])
    with (out / "archive.jsonl").open("w") as fh:
        for key, (f1, f2) in result.archive.items():
            fh.write(json.dumps({"canonical_key": key, "f1": f1, "f2": f2}) + "\n")
    for i, ind in enumerate(result.front):
        stem = front_dir / f"{i:03d}"
        stem.with_suffix(".json").write_text(json.dumps(to_dict(ind.tree), sort_keys=True) + "\n")
        stem.with_suffix(".dot").write_text(to_dot(ind.tree, name=f"front{i:03d}"))
        (front_dir / f"{i:03d}.metrics.json").write_text(json.dumps(front_row(ind), sort_keys=True) + "\n")


def config_to_dict(cfg: SearchConfig) -> dict:
    d = asdict(cfg)
    d["node_range"] = list(cfg.node_range)
    return d
