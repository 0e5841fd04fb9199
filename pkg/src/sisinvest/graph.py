"""Dependence graph ingestion, generation and structural analysis.

A dependence graph is a weakly connected digraph whose nodes carry attack,
recovery, cost and breach-model parameters, and whose directed edges carry
infection rates.  The structural side condenses the graph into maximal
strongly connected components (MSCCs), arranges them into DAG levels and
classifies each component as exposed or accessible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError, InputError, ParseError


@dataclass(frozen=True, eq=False)
class DependenceGraph:
    """Weakly connected dependence graph with per-node parameters.

    Edges are stored as (src, dst, rate) triples where ``rate`` is the rate
    at which an infection of ``src`` causes one of ``dst``.  The infection
    matrix accessor returns the transposed convention: ``B[i, j]`` is the
    rate at which node j infects node i.
    """

    n: int
    edges: tuple  # of (src, dst, rate)
    lam: np.ndarray      # external attack rates, >= 0
    delta: np.ndarray    # recovery rates, > 0
    c: np.ndarray        # infection cost rates, >= 0
    kappa: np.ndarray    # breach sensitivity, > 0
    beta_exp: np.ndarray  # breach exponent, in (0, 1]

    def __post_init__(self):
        _validate_graph(self)

    def infection_matrix(self) -> np.ndarray:
        """Dense matrix B with B[i, j] = rate at which j infects i."""
        B = getattr(self, "_B_cache", None)
        if B is None:
            B = np.zeros((self.n, self.n))
            for src, dst, rate in self.edges:
                B[dst, src] = rate
            B.setflags(write=False)
            object.__setattr__(self, "_B_cache", B)
        return B

    def adjacency(self) -> list:
        """Successor lists indexed by source node (structure only)."""
        adj = [[] for _ in range(self.n)]
        for src, dst, _ in self.edges:
            adj[src].append(dst)
        return adj

    def with_params(self, *, lam=None, delta=None, c=None, kappa=None,
                    beta_exp=None) -> "DependenceGraph":
        """Copy with some per-node parameter vectors replaced."""
        return DependenceGraph(
            n=self.n,
            edges=self.edges,
            lam=np.asarray(lam if lam is not None else self.lam, float),
            delta=np.asarray(delta if delta is not None else self.delta, float),
            c=np.asarray(c if c is not None else self.c, float),
            kappa=np.asarray(kappa if kappa is not None else self.kappa, float),
            beta_exp=np.asarray(
                beta_exp if beta_exp is not None else self.beta_exp, float),
        )

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {
                    "id": i,
                    "lambda": float(self.lam[i]),
                    "delta": float(self.delta[i]),
                    "c": float(self.c[i]),
                    "kappa": float(self.kappa[i]),
                    "beta_exp": float(self.beta_exp[i]),
                }
                for i in range(self.n)
            ],
            "edges": [
                {"src": int(s), "dst": int(d), "rate": float(r)}
                for s, d, r in self.edges
            ],
        }

    @staticmethod
    def from_dict(data: dict) -> "DependenceGraph":
        nodes = sorted(data["nodes"], key=lambda nd: nd["id"])
        n = len(nodes)
        ids = [nd["id"] for nd in nodes]
        if ids != list(range(n)):
            raise InputError(f"node ids must be 0..{n - 1}, got {ids[:5]}...")
        edges = tuple(
            (int(e["src"]), int(e["dst"]), float(e["rate"]))
            for e in data["edges"]
        )
        g = DependenceGraph(
            n=n,
            edges=edges,
            lam=np.array([nd["lambda"] for nd in nodes], float),
            delta=np.array([nd["delta"] for nd in nodes], float),
            c=np.array([nd["c"] for nd in nodes], float),
            kappa=np.array([nd["kappa"] for nd in nodes], float),
            beta_exp=np.array([nd["beta_exp"] for nd in nodes], float),
        )
        check_weakly_connected(g)
        return g

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @staticmethod
    def load(path) -> "DependenceGraph":
        with open(path) as f:
            return DependenceGraph.from_dict(json.load(f))


def build_graph(n, edges, lam, delta, c=None, kappa=None, beta_exp=None,
                require_connected=True):
    """Construct a validated DependenceGraph from loose inputs.

    Default cost is zero, default breach sensitivity is 1/delta and the
    default breach exponent is 1.  ``require_connected=False`` defers the
    weak-connectivity check, e.g. while cross edges are still pending.
    """
    delta = np.broadcast_to(np.asarray(delta, float), (n,)).copy()
    lam = np.broadcast_to(np.asarray(lam, float), (n,)).copy()
    c = np.zeros(n) if c is None else np.broadcast_to(np.asarray(c, float), (n,)).copy()
    if kappa is None:
        with np.errstate(divide="ignore"):   # delta <= 0 is rejected below
            kappa = 1.0 / delta
    else:
        kappa = np.broadcast_to(np.asarray(kappa, float), (n,)).copy()
    beta_exp = (np.ones(n) if beta_exp is None
                else np.broadcast_to(np.asarray(beta_exp, float), (n,)).copy())
    g = DependenceGraph(
        n=n, edges=tuple((int(s), int(d), float(r)) for s, d, r in edges),
        lam=lam, delta=delta, c=c, kappa=kappa, beta_exp=beta_exp)
    if require_connected:
        check_weakly_connected(g)
    return g


def _validate_graph(g: DependenceGraph):
    for name in ("lam", "delta", "c", "kappa", "beta_exp"):
        v = getattr(g, name)
        if v.shape != (g.n,):
            raise InputError(f"{name} must have shape ({g.n},), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InputError(f"{name} contains non-finite values")
    if np.any(g.lam < 0) or np.any(g.c < 0):
        raise InputError("lambda and c must be nonnegative")
    if np.any(g.delta <= 0):
        raise InputError("delta must be strictly positive")
    if np.any(g.kappa <= 0):
        raise InputError("kappa must be strictly positive")
    if np.any(g.beta_exp <= 0) or np.any(g.beta_exp > 1):
        raise InputError("breach exponent must lie in (0, 1]")
    seen = set()
    for src, dst, rate in g.edges:
        if src == dst:
            raise InputError(f"self-loop on node {src} is not allowed")
        if not (0 <= src < g.n and 0 <= dst < g.n):
            raise InputError(f"edge ({src}, {dst}) out of range")
        if not (np.isfinite(rate) and rate >= 0):
            raise InputError(f"edge ({src}, {dst}) has invalid rate {rate}")
        if (src, dst) in seen:
            raise InputError(f"duplicate edge ({src}, {dst})")
        seen.add((src, dst))


def check_weakly_connected(g: DependenceGraph):
    """Hard input check; the error carries the offending component list."""
    comps = weak_components(g.n, [(s, d) for s, d, _ in g.edges])
    if len(comps) > 1:
        err = InputError(
            f"graph is not weakly connected: {len(comps)} components "
            f"(sizes {[len(cp) for cp in comps]})")
        err.components = comps
        raise err


def weak_components(n, edges):
    """Connected components of the undirected shadow, as sorted node lists."""
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for s, d in edges:
        ra, rb = find(s), find(d)
        if ra != rb:
            parent[ra] = rb
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda cp: cp[0])


# ---------------------------------------------------------------------------
# Edge-list text ingestion
# ---------------------------------------------------------------------------

@dataclass
class EdgeListSkeleton:
    """Structure-only parse result; rates and node parameters come later."""

    n: int
    edges: list  # of (src, dst), deduplicated
    self_loops_dropped: int = 0


def parse_edge_list(text: str) -> EdgeListSkeleton:
    """Parse whitespace-separated "src dst" lines into a compact skeleton.

    Node ids are renumbered to 0..n-1 in first-appearance order; duplicate
    edges are collapsed and self-loop lines dropped (counted).  Lines
    starting with '#' are comments.
    """
    remap = {}
    edges = []
    seen = set()
    loops = 0
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(f"line {line_no}: expected two node ids, got {raw!r}",
                             line_no=line_no)
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(f"line {line_no}: non-integer node id in {raw!r}",
                             line_no=line_no) from None
        if a == b:
            loops += 1
            continue
        for v in (a, b):
            if v not in remap:
                remap[v] = len(remap)
        e = (remap[a], remap[b])
        if e not in seen:
            seen.add(e)
            edges.append(e)
    return EdgeListSkeleton(n=len(remap), edges=edges, self_loops_dropped=loops)


# ---------------------------------------------------------------------------
# Condensation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Condensation:
    """MSCC decomposition with DAG structure, levels and exposure labels.

    ``levels[v]`` is the length of the longest DAG path from any in-degree
    zero component to v.  ``exposed[v]`` is true iff v contains a node with
    positive external attack rate or has such a component as DAG ancestor.
    """

    msccs: tuple          # of frozensets of node indices
    dag: frozenset        # of (u, v) MSCC-index pairs
    levels: tuple         # per-MSCC level
    exposed: tuple        # per-MSCC bool
    order: tuple          # topological order of MSCC indices, by level
    node_mscc: tuple      # node index -> MSCC index

    @property
    def m(self) -> int:
        return len(self.msccs)

    def accessible_nodes(self):
        return [i for i in range(len(self.node_mscc))
                if not self.exposed[self.node_mscc[i]]]

    def exposed_nodes(self):
        return [i for i in range(len(self.node_mscc))
                if self.exposed[self.node_mscc[i]]]


def tarjan_scc(n, adjacency):
    """Strongly connected components via Tarjan's algorithm, explicit stack.

    Returns components as lists of node indices, in reverse topological
    order of the condensation (successors before predecessors).
    """
    index = [-1] * n
    lowlink = [0] * n
    on_stack = [False] * n
    stack = []
    sccs = []
    counter = 0
    for root in range(n):
        if index[root] != -1:
            continue
        work = [(root, 0)]
        while work:
            v, pi = work.pop()
            if pi == 0:
                index[v] = lowlink[v] = counter
                counter += 1
                stack.append(v)
                on_stack[v] = True
            recurse = False
            succs = adjacency[v]
            while pi < len(succs):
                w = succs[pi]
                pi += 1
                if index[w] == -1:
                    work.append((v, pi))
                    work.append((w, 0))
                    recurse = True
                    break
                if on_stack[w]:
                    lowlink[v] = min(lowlink[v], index[w])
            if recurse:
                continue
            if lowlink[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack[w] = False
                    comp.append(w)
                    if w == v:
                        break
                sccs.append(comp)
            if work:
                u = work[-1][0]
                lowlink[u] = min(lowlink[u], lowlink[v])
    return sccs


def condense(g: DependenceGraph) -> Condensation:
    """Condense into MSCCs with DAG levels and exposed/accessible labels."""
    sccs = tarjan_scc(g.n, g.adjacency())
    node_mscc = [0] * g.n
    for ci, comp in enumerate(sccs):
        for v in comp:
            node_mscc[v] = ci
    dag = set()
    for src, dst, _ in g.edges:
        cu, cv = node_mscc[src], node_mscc[dst]
        if cu != cv:
            dag.add((cu, cv))

    m = len(sccs)
    preds = [[] for _ in range(m)]
    succs = [[] for _ in range(m)]
    indeg = [0] * m
    for u, v in dag:
        preds[v].append(u)
        succs[u].append(v)
        indeg[v] += 1

    # Kahn topological order; levels by longest path from in-degree-0 vertices.
    levels = [0] * m
    order = []
    queue = [v for v in range(m) if indeg[v] == 0]
    remaining = indeg[:]
    while queue:
        v = queue.pop()
        order.append(v)
        for w in succs[v]:
            levels[w] = max(levels[w], levels[v] + 1)
            remaining[w] -= 1
            if remaining[w] == 0:
                queue.append(w)
    if len(order) != m:
        raise InputError("condensation is cyclic; SCC decomposition failed")
    order.sort(key=lambda v: levels[v])

    exposed = [any(g.lam[i] > 0 for i in comp) for comp in sccs]
    for v in order:
        if not exposed[v] and any(exposed[u] for u in preds[v]):
            exposed[v] = True

    return Condensation(
        msccs=tuple(frozenset(comp) for comp in sccs),
        dag=frozenset(dag),
        levels=tuple(levels),
        exposed=tuple(exposed),
        order=tuple(order),
        node_mscc=tuple(node_mscc),
    )


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def _power_law_degrees(size, power, min_deg, max_deg, rng):
    ks = np.arange(min_deg, max_deg + 1)
    weights = ks.astype(float) ** (-power)
    weights /= weights.sum()
    degs = rng.choice(ks, size=size, p=weights)
    if degs.sum() % 2 == 1:
        # make the stub count even; bump one node below the cap
        for i in range(size):
            if degs[i] < max_deg:
                degs[i] += 1
                break
        else:
            degs[0] -= 1
    return degs


def _stub_match(degs, rng, tries=20):
    """Realize a degree sequence as a simple undirected graph, or None.

    Pairs stubs uniformly, then repairs self-loops and duplicate pairs by
    swapping them against randomly chosen good edges (degree-preserving
    double edge swaps).
    """
    n = len(degs)
    for _ in range(tries):
        stubs = np.repeat(np.arange(n), degs)
        rng.shuffle(stubs)
        edges = set()
        bad = []
        for a, b in zip(stubs[0::2], stubs[1::2]):
            e = (min(a, b), max(a, b))
            if a == b or e in edges:
                bad.append((int(a), int(b)))
            else:
                edges.add(e)
        budget = 200 * (len(bad) + 1)
        while bad and budget > 0:
            budget -= 1
            a, b = bad[-1]
            pool = list(edges)
            c, d = pool[int(rng.integers(len(pool)))]
            if rng.integers(2):
                c, d = d, c
            e1 = (min(a, c), max(a, c))
            e2 = (min(b, d), max(b, d))
            if a == c or b == d or e1 in edges or e2 in edges or e1 == e2:
                continue
            edges.discard((min(c, d), max(c, d)))
            edges.add(e1)
            edges.add(e2)
            bad.pop()
        if not bad:
            return edges
    return None


def generate_scale_free(size, power, min_deg, max_deg, seed,
                        max_retries=100):
    """Bidirectional scale-free component: a strongly connected digraph.

    Draws an undirected degree sequence from a truncated power law,
    realizes it by stub matching and emits every undirected edge in both
    directions.  Regenerates until the result is connected.  Returns the
    list of directed (src, dst) pairs on nodes 0..size-1; rates are
    attached by the caller.
    """
    if size < 2:
        raise InputError("size must be at least 2")
    if min_deg < 1 or max_deg < min_deg:
        raise InputError("need 1 <= min_deg <= max_deg")
    if min_deg >= size:
        raise InputError("min_deg must be below size")
    rng = np.random.default_rng(seed)
    if size == 2:
        return [(0, 1), (1, 0)]
    for attempt in range(1, max_retries + 1):
        degs = _power_law_degrees(size, power, min_deg, min(max_deg, size - 1), rng)
        und = _stub_match(degs, rng)
        if und is None:
            continue
        if len(weak_components(size, list(und))) == 1:
            directed = []
            for a, b in sorted(und):
                directed.append((a, b))
                directed.append((b, a))
            return directed
    raise GenerationError(
        f"no connected realization in {max_retries} attempts",
        attempts=max_retries)


def add_cross_edges(g: DependenceGraph, from_nodes, to_nodes, count,
                    rate_range, seed) -> DependenceGraph:
    """Add ``count`` distinct directed edges from one node set to another.

    Pairs are sampled uniformly without replacement among those not already
    present; rates are uniform in ``rate_range``.
    """
    from_nodes = sorted(from_nodes)
    to_nodes = sorted(to_nodes)
    if set(from_nodes) & set(to_nodes):
        raise InputError("cross-edge endpoint sets must be disjoint")
    existing = {(s, d) for s, d, _ in g.edges}
    pairs = [(a, b) for a in from_nodes for b in to_nodes
             if (a, b) not in existing]
    if count > len(pairs):
        raise InputError(
            f"requested {count} cross edges but only {len(pairs)} pairs available")
    if count == 0:
        return g
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(pairs), size=count, replace=False)
    lo, hi = rate_range
    rates = rng.uniform(lo, hi, size=count)
    new_edges = list(g.edges) + [
        (pairs[k][0], pairs[k][1], float(r)) for k, r in zip(chosen, rates)]
    return DependenceGraph(
        n=g.n, edges=tuple(new_edges), lam=g.lam, delta=g.delta, c=g.c,
        kappa=g.kappa, beta_exp=g.beta_exp)
