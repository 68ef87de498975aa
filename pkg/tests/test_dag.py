import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from angelfish.core import TimeoutCertificate, Vertex, VertexRef
from angelfish.crypto import AggregateSignature
from angelfish.dag import DagStore, EquivocationError, to_dot

N = 4


def is_leader(r, s):
    return s == r % N


def _tc(r):
    return TimeoutCertificate(r, AggregateSignature(frozenset({0, 1, 2}), b"\x00" * 32))


def random_dag(seed, rounds=7):
    """Random layered DAG over N parties; leaders sometimes skip rounds via leader edges."""
    rng = random.Random(seed)
    layers: dict[int, dict[int, Vertex]] = {}
    out = []
    for r in range(1, rounds + 1):
        layers[r] = {}
        for s in range(N):
            if rng.random() < 0.2:
                continue
            prev = list(layers.get(r - 1, {}).values())
            strong = [u.ref for u in prev if rng.random() < 0.6]
            older = [u for rr in range(1, r - 1) for u in layers[rr].values()]
            weak = [u.ref for u in older if rng.random() < 0.1]
            leader_edges, tcs = (), ()
            if is_leader(r, s) and r > 2 and rng.random() < 0.4:
                lo = rng.randrange(1, r - 1)
                lv = layers[lo].get(lo % N)
                if lv is not None:
                    strong = [e for e in strong if not is_leader(e.round, e.source)]
                    leader_edges = (lv.ref,)
                    tcs = tuple(_tc(x) for x in range(lo + 1, r))
            v = Vertex(r, s, propose=bool(rng.random() < 0.5), strong_edges=tuple(strong),
                       weak_edges=tuple(weak), leader_edges=leader_edges, tcs=tcs)
            layers[r][s] = v
            out.append(v)
    return out


def closure(vs):
    """Floyd-Warshall style transitive closure by id."""
    ids = [v.id for v in vs]
    reach = {a: {a} | {e.digest for e in v.parents} for a, v in zip(ids, vs)}
    for k in ids:
        for i in ids:
            if k in reach[i]:
                reach[i] |= reach[k]
    return reach


def leader_reach(vs):
    by_id = {v.id: v for v in vs}

    def dfs(v, seen):
        seen.add(v.id)
        for e in v.strong_edges + v.leader_edges:
            if is_leader(e.round, e.source) and e.digest not in seen:
                dfs(by_id[e.digest], seen)
        return seen

    return {v.id: dfs(v, set()) for v in vs if is_leader(v.round, v.source)}


def build(vs):
    d = DagStore(is_leader)
    for v in vs:
        d.add(v)
    return d


def test_basic_examples():
    d = DagStore(is_leader)
    a = Vertex(1, 0)
    assert d.try_add_to_dag(a)
    b = Vertex(2, 1, strong_edges=(Vertex(1, 2).ref,))
    assert not d.try_add_to_dag(b)
    assert b.id in d.buffer and d.get_vertex(1, 2) is None
    d.add(Vertex(1, 2))
    assert d.get_vertex(1, 2) is not None and d.get_vertex(1, 3) is None
    assert b.id in d and not d.buffer
    assert d.path(b, b) and d.path(b, Vertex(1, 2))
    assert not d.path(b, a)


def test_duplicate_slot_is_equivocation():
    d = DagStore()
    d.add(Vertex(1, 0, propose=True))
    with pytest.raises(EquivocationError):
        d.add(Vertex(1, 0, propose=False))


def test_edge_to_wrong_slot_is_rejected():
    d = DagStore()
    u = Vertex(1, 0)
    d.add(u)
    liar = Vertex(2, 1, strong_edges=(VertexRef(1, 3, u.id),))
    assert not d.try_add_to_dag(liar)
    assert liar.id in d.rejected


@given(st.integers(0, 10**6))
def test_path_matches_closure(seed):
    vs = random_dag(seed)
    d = build(vs)
    reach = closure(vs)
    for v in vs:
        for u in vs:
            assert d.path(v, u) == (u.id in reach[v.id])


@given(st.integers(0, 10**6))
def test_leader_path_matches_dfs_and_implies_path(seed):
    vs = random_dag(seed)
    d = build(vs)
    lr = leader_reach(vs)
    leaders = [v for v in vs if is_leader(v.round, v.source)]
    for v in leaders:
        for u in leaders:
            lp = d.leader_path(v, u)
            assert lp == (u.id in lr[v.id])
            assert not lp or d.path(v, u)


def test_leader_edge_skips_rounds():
    d = DagStore(is_leader)
    l1 = Vertex(1, 1)
    d.add(l1)
    l4 = Vertex(4, 0, leader_edges=(l1.ref,), tcs=(_tc(2), _tc(3)))
    d.add(l4)
    assert d.leader_path(l4, l1)


def naive_fixpoint(order):
    """Repeated-scan oracle: retry the whole buffer until nothing changes."""
    stored: set[bytes] = set()
    buffer = []
    for v in order:
        buffer.append(v)
        changed = True
        while changed:
            changed = False
            for w in list(buffer):
                if all(e.digest in stored for e in w.parents):
                    stored.add(w.id)
                    buffer.remove(w)
                    changed = True
    return stored, {w.id for w in buffer}


@given(st.integers(0, 10**6), st.integers(0, 10**6))
def test_cascade_matches_rescan_oracle(seed, shuffle_seed):
    vs = random_dag(seed)
    order = list(vs)
    random.Random(shuffle_seed).shuffle(order)
    d = DagStore(is_leader)
    for v in order:
        d.add(v)
        assert d.is_causally_complete()
        assert not set(d.buffer) & set(d._index)
    stored, buffered = naive_fixpoint(order)
    assert {v.id for v in d.vertices()} == stored
    assert set(d.buffer) == buffered


@given(st.integers(0, 10**6), st.integers(0, 10**6))
def test_shuffled_insertion_converges(seed, shuffle_seed):
    vs = random_dag(seed)
    order = list(vs)
    random.Random(shuffle_seed).shuffle(order)
    assert build(vs).snapshot() == build(order).snapshot()


def test_buffered_chain_promotes_in_one_cascade():
    chain = [Vertex(1, 0)]
    for r in range(2, 9):
        chain.append(Vertex(r, 0, strong_edges=(chain[-1].ref,)))
    d = DagStore()
    for v in reversed(chain[1:]):
        assert not d.try_add_to_dag(v)
    assert len(d.add(chain[0])) == len(chain)
    assert not d.buffer


@given(st.integers(0, 10**6), st.integers(3, 9))
def test_weak_edges_reach_every_older_vertex(seed, r):
    vs = [v for v in random_dag(seed, rounds=r - 1)]
    d = build(vs)
    strong = [u.ref for u in d.rounds.get(r - 1, {}).values() if random.Random(seed).random() < 0.5]
    weak = d.weak_edges_for(strong, r)
    v = Vertex(r, 0, strong_edges=tuple(strong), weak_edges=weak)
    d.add(v)
    reach = closure(d.vertices())[v.id]
    for u in d.vertices():
        if u.round <= r - 2:
            assert u.id in reach
    strong_reach = set().union(*(closure(d.vertices())[e.digest] for e in strong)) if strong else set()
    for e in weak:
        assert e.digest not in strong_reach


def test_weak_edges_examples():
    d = DagStore()
    a, b = Vertex(1, 0), Vertex(1, 1)
    d.add(a)
    d.add(b)
    c = Vertex(2, 0, strong_edges=(a.ref, b.ref))
    d.add(c)
    assert d.weak_edges_for([c.ref], 3) == ()
    c2 = Vertex(2, 1, strong_edges=(a.ref,))
    d.add(c2)
    assert d.weak_edges_for([c2.ref], 3) == (b.ref,)
    assert d.weak_edges_for([], 3) == (a.ref, b.ref)


def test_take_history_is_ordered_once():
    vs = random_dag(3)
    d = build(vs)
    top = max(d.vertices(), key=lambda v: v.round)
    first = d.take_history(top)
    assert first == sorted(first, key=lambda u: (u.round, u.source, u.id))
    assert d.take_history(top) == []


def test_dot_export_styles():
    d = DagStore(is_leader)
    l1 = Vertex(1, 1)
    o = Vertex(1, 2)
    d.add(l1)
    d.add(o)
    d.add(Vertex(2, 3, strong_edges=(l1.ref,)))
    d.add(Vertex(3, 3, weak_edges=(o.ref,)))
    d.add(Vertex(4, 0, leader_edges=(l1.ref,), tcs=(_tc(2), _tc(3))))
    text = to_dot(d)
    assert "cluster_r1" in text and "cluster_r4" in text
    assert '"r4_p0" -> "r1_p1" [style=bold];' in text
    assert '"r3_p3" -> "r1_p2" [style=dashed];' in text
    assert '"r2_p3" -> "r1_p1";' in text
    assert "cluster_r4" not in to_dot(d, range(1, 3))
