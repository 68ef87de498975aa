"""Layered local DAG with causal-completeness gating.

Every stored vertex gets a dense index. Its causal history (itself plus all
ancestors) is kept as a Python int bitset, and so is its leader-path
reachability. Both are final once a vertex is inserted because ancestors never
change, so ``path`` and ``leader_path`` are single bit tests and no
invalidation is ever needed.
"""

from __future__ import annotations

import heapq
from collections import defaultdict
from typing import Callable, Iterable, Iterator, Optional

from .core import Vertex, VertexRef


class EquivocationError(RuntimeError):
    """Two different vertices for one (round, source) reached the store."""


def _bits(x: int) -> Iterator[int]:
    while x:
        low = x & -x
        yield low.bit_length() - 1
        x ^= low


class DagStore:
    def __init__(self, is_leader: Callable[[int, int], bool] = lambda r, s: False) -> None:
        self.is_leader = is_leader
        self.rounds: dict[int, dict[int, Vertex]] = defaultdict(dict)
        self.buffer: dict[bytes, Vertex] = {}
        self.delivered_vertices: set[bytes] = set()
        self.rejected: set[bytes] = set()
        self.max_round = 0
        self._index: dict[bytes, int] = {}
        self._order: list[Vertex] = []
        self._hist: list[int] = []
        self._lhist: list[int] = []
        self._round_mask: dict[int, int] = defaultdict(int)
        self._all_mask = 0
        self._delivered_mask = 0
        self._waiting: dict[bytes, list[bytes]] = defaultdict(list)
        self._need: dict[bytes, int] = {}

    # -- queries -------------------------------------------------------------

    def __contains__(self, digest: bytes) -> bool:
        return digest in self._index

    def __len__(self) -> int:
        return len(self._order)

    def vertices(self) -> list[Vertex]:
        return list(self._order)

    def by_id(self, digest: bytes) -> Optional[Vertex]:
        i = self._index.get(digest)
        return None if i is None else self._order[i]

    def get_vertex(self, source: int, r: int) -> Optional[Vertex]:
        layer = self.rounds.get(r)
        return None if layer is None else layer.get(source)

    def round_size(self, r: int) -> int:
        layer = self.rounds.get(r)
        return 0 if layer is None else len(layer)

    def path(self, v: Vertex, u: Vertex) -> bool:
        return bool(self._hist[self._index[v.id]] >> self._index[u.id] & 1)

    def leader_path(self, v: Vertex, u: Vertex) -> bool:
        return bool(self._lhist[self._index[v.id]] >> self._index[u.id] & 1)

    def history(self, v: Vertex) -> list[Vertex]:
        return [self._order[i] for i in _bits(self._hist[self._index[v.id]])]

    # -- insertion -----------------------------------------------------------

    def try_add_to_dag(self, v: Vertex) -> bool:
        self.add(v)
        return v.id in self._index

    def add(self, v: Vertex) -> list[Vertex]:
        """Insert ``v`` or buffer it; return every vertex inserted as a result."""
        vid = v.id
        if vid in self._index or vid in self.buffer or vid in self.rejected:
            return []
        missing = {e.digest for e in v.parents if e.digest not in self._index}
        if missing:
            self.buffer[vid] = v
            self._need[vid] = len(missing)
            for d in missing:
                self._waiting[d].append(vid)
            return []
        inserted: list[Vertex] = []
        ready = [(v.round, v.source, vid, v)]
        while ready:
            _, _, wid, w = heapq.heappop(ready)
            if not self._insert(w):
                continue
            inserted.append(w)
            for child_id in self._waiting.pop(wid, ()):
                self._need[child_id] -= 1
                if self._need[child_id] == 0:
                    del self._need[child_id]
                    c = self.buffer.pop(child_id)
                    heapq.heappush(ready, (c.round, c.source, child_id, c))
        return inserted

    def _insert(self, v: Vertex) -> bool:
        index = self._index
        for e in v.parents:
            p = self._order[index[e.digest]]
            if p.round != e.round or p.source != e.source:
                self.rejected.add(v.id)
                return False
        layer = self.rounds[v.round]
        other = layer.get(v.source)
        if other is not None:
            raise EquivocationError(f"round {v.round} source {v.source}: {other!r} vs {v!r}")
        idx = len(self._order)
        bit = 1 << idx
        h = bit
        hist = self._hist
        for e in v.parents:
            h |= hist[index[e.digest]]
        lh = 0
        if self.is_leader(v.round, v.source):
            lh = bit
            for e in v.strong_edges + v.leader_edges:
                if self.is_leader(e.round, e.source):
                    lh |= self._lhist[index[e.digest]]
        index[v.id] = idx
        self._order.append(v)
        hist.append(h)
        self._lhist.append(lh)
        layer[v.source] = v
        self._round_mask[v.round] |= bit
        self._all_mask |= bit
        if v.round > self.max_round:
            self.max_round = v.round
        return True

    # -- edge construction ---------------------------------------------------

    def weak_edges_for(self, edges: Iterable[VertexRef], r: int) -> tuple[VertexRef, ...]:
        """Orphans at rounds <= r-2 not reachable through ``edges``.

        Candidates are scanned from round r-2 downward (lowest source first)
        and each accepted orphan's history counts as reachable from then on.
        """
        reach = 0
        for e in edges:
            reach |= self._hist[self._index[e.digest]]
        candidates = self._all_mask
        for rr in range(max(r - 1, 1), self.max_round + 1):
            candidates &= ~self._round_mask.get(rr, 0)
        orphans = candidates & ~reach
        if not orphans:
            return ()
        found = sorted(
            (self._order[i] for i in _bits(orphans)), key=lambda u: (-u.round, u.source)
        )
        out = []
        for u in found:
            i = self._index[u.id]
            if reach >> i & 1:
                continue
            out.append(u.ref)
            reach |= self._hist[i]
        return tuple(out)

    # -- linearization -------------------------------------------------------

    def take_history(self, v: Vertex) -> list[Vertex]:
        """Undelivered causal history of ``v`` in (round, source, digest) order.

        The returned vertices are marked delivered.
        """
        fresh = self._hist[self._index[v.id]] & ~self._delivered_mask
        if not fresh:
            return []
        self._delivered_mask |= fresh
        out = sorted(
            (self._order[i] for i in _bits(fresh)), key=lambda u: (u.round, u.source, u.id)
        )
        self.delivered_vertices.update(u.id for u in out)
        return out

    # -- invariants and export -----------------------------------------------

    def is_causally_complete(self) -> bool:
        return all(e.digest in self._index for v in self._order for e in v.parents)

    def snapshot(self) -> dict[int, frozenset[bytes]]:
        return {r: frozenset(v.id for v in layer.values()) for r, layer in self.rounds.items() if layer}


def to_dot(
    store: DagStore, rounds: Optional[range] = None, name: str = "dag"
) -> str:
    """Render the store: one cluster per round, weak edges dashed, leader edges bold."""

    def node_id(r: int, s: int) -> str:
        return f'"r{r}_p{s}"'

    keep = sorted(r for r, layer in store.rounds.items() if layer and (rounds is None or r in rounds))
    lines = [f"digraph {name} {{", "  rankdir=RL;", "  node [shape=box];"]
    for r in keep:
        lines.append(f"  subgraph cluster_r{r} {{")
        lines.append(f'    label="round {r}";')
        for s in sorted(store.rounds[r]):
            attrs = ", penwidth=2" if store.is_leader(r, s) else ""
            lines.append(f'    {node_id(r, s)} [label="{r}/{s}"{attrs}];')
        lines.append("  }")
    shown = set(keep)
    for r in keep:
        for s in sorted(store.rounds[r]):
            v = store.rounds[r][s]
            for edges, style in (
                (v.strong_edges, ""),
                (v.weak_edges, " [style=dashed]"),
                (v.leader_edges, " [style=bold]"),
            ):
                for e in edges:
                    if e.round in shown:
                        lines.append(f"  {node_id(r, s)} -> {node_id(e.round, e.source)}{style};")
    lines.append("}")
    return "\n".join(lines) + "\n"
