import hypothesis.strategies as st
from hypothesis import settings

from angelfish.core import (
    MultiVote,
    NoVoteCertificate,
    NoVoteMessage,
    RbcEcho,
    RbcReady,
    RbcSend,
    TimeoutCertificate,
    TimeoutMessage,
    Tx,
    Vertex,
    VertexRef,
    Vote,
)
from angelfish.crypto import AggregateSignature, Signature

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

N = 7

digests = st.binary(min_size=32, max_size=32)
parties = st.integers(0, N - 1)
sigs = st.builds(Signature, parties, digests)
aggs = st.builds(AggregateSignature, st.frozensets(parties, min_size=1), digests)
txs = st.builds(Tx, st.integers(0, 2**40), st.integers(0, 10**6), st.integers(0, 4096))


def refs_at(r):
    return st.builds(VertexRef, st.just(r), parties, digests)


@st.composite
def vertices(draw, max_round=12):
    r = draw(st.integers(1, max_round))
    strong = draw(st.lists(refs_at(r - 1), max_size=4, unique_by=lambda e: e.source)) if r > 1 else []
    weak = []
    if r > 2:
        weak = draw(st.lists(st.integers(1, r - 2).flatmap(refs_at), max_size=3))
    leader_edges, tcs = [], []
    if r > 2 and draw(st.booleans()):
        lo = draw(st.integers(1, r - 2))
        leader_edges = draw(st.lists(refs_at(lo), min_size=1, max_size=2))
        tcs = [TimeoutCertificate(x, draw(aggs)) for x in range(lo + 1, r)]
    nvc = None
    if r > 1 and draw(st.booleans()):
        nvc = NoVoteCertificate(draw(st.integers(1, r - 1)), draw(parties), draw(aggs))
    return Vertex(
        round=r,
        source=draw(parties),
        block=tuple(draw(st.lists(txs, max_size=3))),
        propose=draw(st.booleans()),
        strong_edges=tuple(strong),
        weak_edges=tuple(weak),
        leader_edges=tuple(leader_edges),
        tcs=tuple(tcs),
        nvc=nvc,
    )


@st.composite
def votes(draw):
    r = draw(st.integers(1, 50))
    edge = draw(st.none() | refs_at(r - 1)) if r > 1 else None
    return Vote(r, draw(parties), draw(st.booleans()), edge, draw(sigs))


@st.composite
def multi_votes(draw):
    r = draw(st.integers(2, 50))
    edges = draw(st.lists(refs_at(r - 1), max_size=3))
    return MultiVote(r, draw(parties), draw(st.booleans()), tuple(edges), draw(sigs))


messages = st.one_of(
    vertices(),
    votes(),
    multi_votes(),
    st.builds(TimeoutMessage, st.integers(1, 99), parties, sigs),
    st.builds(TimeoutCertificate, st.integers(1, 99), aggs),
    st.builds(NoVoteMessage, st.integers(1, 99), parties, parties, sigs),
    st.builds(NoVoteCertificate, st.integers(1, 99), parties, aggs),
    vertices().map(lambda v: RbcSend(v.source, v.round, v)),
    st.builds(RbcEcho, parties, st.integers(1, 99), digests, st.none() | vertices()),
    st.builds(RbcReady, parties, st.integers(1, 99), digests),
)
