"""Communication graphs, spectral connectivity and mixing matrices."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import cached_property
from enum import Enum
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .errors import (
    DisconnectedGraphError,
    NotRegularError,
    TargetUnreachableError,
)

GRAPH_SEARCH_BUDGET = 10_000
_TIE = 1e-12


@dataclass(frozen=True)
class CommGraph:
    """Undirected simple graph over agents ``0..n_agents-1``.

    Edges are stored as ``(i, j)`` pairs with ``i < j``; self-loops are not
    stored, but :meth:`neighborhood` includes the agent itself.
    """

    n_agents: int
    edges: frozenset[tuple[int, int]]

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("n_agents must be positive")
        normalized = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop on agent {i}")
            if not (0 <= i < self.n_agents and 0 <= j < self.n_agents):
                raise ValueError(f"edge ({i}, {j}) out of range")
            normalized.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(normalized))

    @classmethod
    def from_edges(cls, n_agents: int, edges) -> CommGraph:
        return cls(n_agents, frozenset(tuple(e) for e in edges))

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_agents, self.n_agents))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    def laplacian(self) -> np.ndarray:
        a = self.adjacency()
        return np.diag(a.sum(axis=1)) - a

    def degrees(self) -> np.ndarray:
        return self.adjacency().sum(axis=1).astype(int)

    @cached_property
    def _adjacency_lists(self) -> tuple[tuple[int, ...], ...]:
        adj = [[] for _ in range(self.n_agents)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return tuple(tuple(sorted(a)) for a in adj)

    def neighbors(self, i: int) -> list[int]:
        """Neighbors of ``i`` excluding ``i``, sorted."""
        return list(self._adjacency_lists[i])

    def neighborhood(self, i: int) -> list[int]:
        """``{i} ∪ neighbors(i)``, sorted."""
        return sorted([i, *self.neighbors(i)])

    def is_connected(self) -> bool:
        adj = self._adjacency_lists
        seen = {0}
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        return len(seen) == self.n_agents

    def is_regular(self) -> bool:
        deg = self.degrees()
        return bool(np.all(deg == deg[0]))


def complete_graph(n: int) -> CommGraph:
    return CommGraph.from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


def path_graph(n: int) -> CommGraph:
    return CommGraph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def ring_graph(n: int) -> CommGraph:
    if n < 3:
        return path_graph(n)
    return CommGraph.from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def star_graph(n: int) -> CommGraph:
    return CommGraph.from_edges(n, [(0, j) for j in range(1, n)])


@dataclass(frozen=True)
class FiedlerValue:
    fiedler: float
    normalized: float


def fiedler_value(g: CommGraph) -> FiedlerValue:
    """Second-smallest Laplacian eigenvalue and its per-agent normalization.

    Raises:
        DisconnectedGraphError: if ``g`` is not connected.
    """
    if not g.is_connected():
        raise DisconnectedGraphError("graph is disconnected; Fiedler value is 0")
    if g.n_agents == 1:
        return FiedlerValue(0.0, 0.0)
    eig = np.linalg.eigvalsh(g.laplacian())
    lam2 = max(float(eig[1]), 0.0)
    return FiedlerValue(lam2, lam2 / g.n_agents)


def _normalized_lambda2(n: int, edges: set) -> float:
    a = np.zeros((n, n))
    for i, j in edges:
        a[i, j] = a[j, i] = 1.0
    lap = np.diag(a.sum(axis=1)) - a
    return float(np.linalg.eigvalsh(lap)[1]) / n


def _random_spanning_tree(n: int, gen: np.random.Generator) -> set:
    order = gen.permutation(n)
    edges = set()
    for k in range(1, n):
        u = int(order[k])
        v = int(order[gen.integers(0, k)])
        edges.add((min(u, v), max(u, v)))
    return edges


def generate_graph(
    n: int,
    target_normalized_fiedler: float,
    tolerance: float,
    seed: int,
    budget: int = GRAPH_SEARCH_BUDGET,
) -> CommGraph:
    """Random connected graph whose normalized Fiedler value is near a target.

    Starts from a random spanning tree and proposes random single-edge
    toggles, keeping a toggle only when the graph stays connected and the
    distance to the target shrinks. A toggle that leaves the distance
    unchanged is kept only when it points the right way (an added edge while
    below the target, a removed one while above), which lets the search
    cross plateaus where single edges do not move the Fiedler value.

    Raises:
        TargetUnreachableError: if no graph within ``tolerance`` is found
            within ``budget`` proposals.
    """
    if n < 2:
        raise ValueError("need at least two agents")
    if not 0 < target_normalized_fiedler:
        raise ValueError("target must be positive")
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    if target_normalized_fiedler - tolerance > 1.0:
        raise TargetUnreachableError(
            f"normalized Fiedler value never exceeds 1 (target {target_normalized_fiedler})"
        )

    gen = rngmod.substream(seed, rngmod.GRAPH, n)
    edges = _random_spanning_tree(n, gen)
    value = _normalized_lambda2(n, edges)
    gap = abs(value - target_normalized_fiedler)
    for _ in range(budget):
        if gap <= tolerance:
            break
        i, j = sorted(int(x) for x in gen.choice(n, size=2, replace=False))
        candidate = set(edges)
        adding = (i, j) not in candidate
        if not adding:
            candidate.remove((i, j))
            if not CommGraph.from_edges(n, candidate).is_connected():
                continue
        else:
            candidate.add((i, j))
        cand_value = _normalized_lambda2(n, candidate)
        cand_gap = abs(cand_value - target_normalized_fiedler)
        toward = adding == (value < target_normalized_fiedler)
        # eigensolver round-off makes exact plateaus look like tiny moves
        if cand_gap < gap - _TIE or (abs(cand_gap - gap) <= _TIE and toward):
            edges, value, gap = candidate, cand_value, cand_gap
    if gap > tolerance:
        raise TargetUnreachableError(
            f"closest normalized Fiedler value {value:.6g} misses target "
            f"{target_normalized_fiedler} by more than {tolerance}"
        )
    return CommGraph.from_edges(n, edges)


class MixingScheme(str, Enum):
    UNIFORM_DEGREE = "uniform-degree"
    METROPOLIS = "metropolis"


@dataclass(frozen=True)
class MixingMatrix:
    weights: np.ndarray
    scheme: MixingScheme


def build_mixing_matrix(g: CommGraph, scheme: MixingScheme | str = MixingScheme.METROPOLIS) -> MixingMatrix:
    """Symmetric doubly stochastic weights supported on the graph's edges.

    ``metropolis`` works on any connected graph. ``uniform-degree`` puts
    ``1/|N_i|`` on every neighborhood entry and is only doubly stochastic
    when all degrees agree.
    """
    scheme = MixingScheme(scheme)
    if not g.is_connected():
        raise DisconnectedGraphError("mixing matrix requires a connected graph")
    n = g.n_agents
    deg = g.degrees()
    w = np.zeros((n, n))
    if scheme is MixingScheme.UNIFORM_DEGREE:
        if not g.is_regular():
            raise NotRegularError(f"degrees {sorted(set(deg.tolist()))} are not constant")
        share = 1.0 / (deg[0] + 1)
        for i, j in g.edges:
            w[i, j] = w[j, i] = share
        np.fill_diagonal(w, share)
    else:
        for i, j in g.edges:
            w[i, j] = w[j, i] = 1.0 / (1 + max(deg[i], deg[j]))
        np.fill_diagonal(w, 1.0 - w.sum(axis=1))
    w.setflags(write=False)
    return MixingMatrix(w, scheme)


def write_edge_list(g: CommGraph, path: str | Path) -> None:
    lines = [f"agents {g.n_agents}"] + [f"{i} {j}" for i, j in sorted(g.edges)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_edge_list(path: str | Path) -> CommGraph:
    lines = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or lines[0][0] != "agents":
        raise ValueError(f"{path}: missing 'agents N' header")
    n = int(lines[0][1])
    return CommGraph.from_edges(n, [(int(a), int(b)) for a, b in lines[1:]])
