"""Angelfish with k leaders per round.

The first entry of each round's leader list is the main leader; it alone
drives timeouts and carries TCs, leader edges and no-vote certificates.

A round's list is committed as an ordered prefix. A node outputs a directly
supported prefix at once, but the rest of that round's list stays open until
either further direct support arrives or a later main leader is committed, in
which case that leader's leader paths decide the remainder. Deciding the tail
from local timing alone would let two honest nodes settle on different
prefixes of the same round.
"""

from __future__ import annotations

from collections import defaultdict
from typing import Optional

from .core import (
    MultiVote,
    MultiVoteContent,
    NoVoteCertificate,
    NoVoteMessage,
    Vertex,
    VertexRef,
    multiple_leaders_of,
)
from .crypto import AggregateSignature, aggregate
from .node import AngelfishNode
from .wire import content_digest, encode, no_vote_content


class MultiLeaderNode(AngelfishNode):
    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self._ml: dict[int, tuple[int, ...]] = {}
        self.no_vote_sent: dict[int, set[int]] = defaultdict(set)
        self.no_vote_msgs: dict[tuple[int, int], dict[int, NoVoteMessage]] = defaultdict(dict)
        self.nvc_known: dict[tuple[int, int], NoVoteCertificate] = {}
        self.forwarded_votes = 0
        # (round, number of list members committed) of the round still open
        self.open_round: Optional[tuple[int, int]] = None
        self._dispatch[MultiVote] = self._on_multi_vote
        self._dispatch[NoVoteMessage] = self._on_no_vote
        self._dispatch[NoVoteCertificate] = self._on_nvc

    # -- schedule ------------------------------------------------------------

    def ml(self, r: int) -> tuple[int, ...]:
        lst = self._ml.get(r)
        if lst is None:
            lst = self._ml[r] = multiple_leaders_of(r, self.cfg)
        return lst

    def is_leader_pos(self, r: int, source: int) -> bool:
        return r >= 1 and source in self.ml(r)

    def leaders_at(self, r: int) -> tuple[int, ...]:
        return self.ml(r)

    def intends(self, r: int) -> bool:
        return self.me in self.ml(r) or super().intends(r)

    # -- no-votes ------------------------------------------------------------

    def _on_enter(self, r: int) -> None:
        if r < 2:
            return
        prev = r - 1
        for target in self.ml(prev):
            if self.dag.get_vertex(target, prev) is None:
                self.no_vote_sent[prev].add(target)
                sig = self.keyring.sign(self.me, no_vote_content(prev, target))
                self.net.multicast(self.me, NoVoteMessage(prev, target, self.me, sig))

    def valid_nvc(self, c: NoVoteCertificate) -> bool:
        return self.keyring.verify_aggregate(
            c.agg, no_vote_content(c.round, c.target), self.quorum
        )

    def _on_no_vote(self, src: int, m: NoVoteMessage) -> None:
        key = (m.round, m.target)
        if key in self.nvc_known or m.sig.signer != m.source or m.target not in self.ml(m.round):
            return
        if not self.keyring.verify(m.sig, no_vote_content(m.round, m.target)):
            self.obs.dropped(self.me, "bad no-vote signature", m)
            return
        bucket = self.no_vote_msgs[key]
        bucket[m.source] = m
        if len(bucket) >= self.quorum:
            self.nvc_known[key] = NoVoteCertificate(
                m.round, m.target, aggregate(x.sig for x in bucket.values())
            )
            self._dirty = True

    def _on_nvc(self, src: int, c: NoVoteCertificate) -> None:
        key = (c.round, c.target)
        if key not in self.nvc_known and self.valid_nvc(c):
            self.nvc_known[key] = c
            self._dirty = True

    # -- votes ---------------------------------------------------------------

    def _on_multi_vote(self, src: int, vt: MultiVote) -> None:
        r, s = vt.round, vt.source
        if r < 1 or not 0 <= s < self.n or s in self.votes[r] or vt.sig.signer != s:
            return
        members = self.ml(r - 1) if r > 1 else ()
        if any(e.source not in members for e in vt.strong_edges):
            self.obs.dropped(self.me, "vote edge to a non-leader vertex", vt)
            return
        content = vt.content
        cd = content_digest(content)
        if not self.keyring.verify_digest(vt.sig, cd):
            self.obs.dropped(self.me, "bad vote signature", vt)
            return
        self.votes[r][s] = vt
        if s != self.me:
            self.forwarded_votes += 1
            self.net.multicast(self.me, vt)
        if vt.propose:
            self.vertex_proposers[r].add(s)
        self.voters[r].add(s)
        self.round_sources[r].add(s)
        if r > self.max_seen_round:
            self.max_seen_round = r
        agg = AggregateSignature(frozenset((s,)), cd)
        for e in vt.strong_edges:
            self._add_commit_support(e, content, agg)
        self._dirty = True

    def _send_vote_certs(self, r: int) -> None:
        pass  # votes are re-broadcast instead of aggregated

    def _delivered_members(self, r: int) -> list[VertexRef]:
        """Delivered round-r leader vertices this node did not no-vote."""
        skipped = self.no_vote_sent.get(r, ())
        out = []
        for p in self.ml(r):
            u = self.dag.get_vertex(p, r)
            if u is not None and p not in skipped:
                out.append(u.ref)
        return out

    def _create_vote(self, r: int) -> None:
        edges: tuple[VertexRef, ...] = ()
        if r >= 2 and r - 1 not in self.timeout_sent and self.lv(r - 1) is not None:
            edges = tuple(self._delivered_members(r - 1))
        content = MultiVoteContent(r, self.announce(r), edges)
        sig = self.keyring.sign(self.me, encode(content))
        self.net.multicast(self.me, MultiVote(r, self.me, content.propose, content.strong_edges, sig))

    # -- vertex creation -----------------------------------------------------

    def _skipped(self, r: int) -> set[int]:
        return super()._skipped(r) | set(self.no_vote_sent.get(r, ()))

    def _prefix(self, rr: int, usable) -> Optional[tuple[list[VertexRef], Optional[NoVoteCertificate]]]:
        """Usable prefix of ML_rr plus the NVC for the first gap, or None if missing."""
        refs: list[VertexRef] = []
        for p in self.ml(rr):
            u = self.dag.get_vertex(p, rr)
            if u is not None and usable(p):
                refs.append(u.ref)
                continue
            nvc = self.nvc_known.get((rr, p))
            return None if nvc is None else (refs, nvc)
        return refs, None

    def _leader_plan(self, r: int):
        if not self._leader_chain_ready(r - 1):
            return None
        if self.lv(r - 1) is not None and r - 1 not in self.timeout_sent:
            skipped = self.no_vote_sent.get(r - 1, ())
            found = self._prefix(r - 1, lambda p: p not in skipped)
            if found is None:
                return None
            return (), (), found[1]
        tcs = [self.tcs[r - 1]]
        for rr in range(r - 2, 0, -1):
            if self.lv(rr) is not None:
                found = self._prefix(rr, lambda p: True)
                if found is None:
                    return None
                refs, nvc = found
                return tuple(refs), tuple(tcs), nvc
            tcs.append(self.tcs[rr])
        return (), tuple(tcs), None

    # -- validity ------------------------------------------------------------

    def _prefix_ok(self, rr: int, present: set[int], nvc: Optional[NoVoteCertificate], strict: bool) -> bool:
        members = self.ml(rr)
        for x, p in enumerate(members):
            if p in present:
                continue
            if strict and present & set(members[x + 1 :]):
                return False
            return nvc is not None and nvc.round == rr and nvc.target == p and self.valid_nvc(nvc)
        return nvc is None

    def is_valid(self, v: Vertex) -> bool:
        r = v.round
        if r == 1:
            return v.nvc is None
        prev = self.leader(r - 1)
        strong = {e.source for e in v.strong_edges}
        if prev in strong:
            return self._prefix_ok(r - 1, strong, v.nvc, strict=False)
        if v.leader_edges:
            lo = v.leader_edges[0].round
            present = {e.source for e in v.leader_edges}
            if self.leader(lo) not in present or not present <= set(self.ml(lo)):
                return False
            return self._tc_chain_ok(v, lo) and self._prefix_ok(lo, present, v.nvc, strict=True)
        return v.nvc is None and self._tc_chain_ok(v, 0)

    # -- commit --------------------------------------------------------------

    def _supported(self, u: Vertex) -> bool:
        key = (u.round, u.id)
        w = self.endorsers.get(key)
        s = self.commit_signers.get(key)
        if w is None:
            return s is not None and len(s) >= self.quorum
        if s is None:
            return len(w) >= self.quorum
        return len(w) >= self.quorum or len(w | s) >= self.quorum

    def _try_commit(self, r: int) -> None:
        if self.open_round is not None and self.open_round[0] == r:
            self._extend_open()
            return
        if r <= self.committed_round:
            return
        cls = []
        for p in self.ml(r):
            u = self.dag.get_vertex(p, r)
            if u is None or not self._supported(u):
                break
            cls.append(u)
        if cls:
            self.commit_leaders(cls)

    def _extend_open(self) -> None:
        r, count = self.open_round
        members = self.ml(r)
        added = []
        for p in members[count:]:
            u = self.dag.get_vertex(p, r)
            if u is None or not self._supported(u):
                break
            added.append(u)
        if not added:
            return
        count += len(added)
        self.open_round = None if count == len(members) else (r, count)
        self._output_groups([(added, True)])

    def commit_leaders(self, cls: list[Vertex]) -> None:
        r = cls[0].round
        groups = [(cls, True)]
        cur = cls[0]
        open_ = self.open_round
        low = self.committed_round if open_ is None else open_[0] - 1
        for rr in range(r - 1, low, -1):
            cmv = []
            for p in self.ml(rr):
                u = self.dag.get_vertex(p, rr)
                if u is None or not self.dag.leader_path(cur, u):
                    break
                cmv.append(u)
            if cmv:
                cur = cmv[0]
            if open_ is not None and rr == open_[0]:
                cmv = cmv[open_[1] :]
            if cmv:
                groups.append((cmv, False))
        self.committed_round = r
        self.open_round = (r, len(cls)) if len(cls) < len(self.ml(r)) else None
        groups.reverse()
        self._output_groups(groups)

    def _output_groups(self, groups: list[tuple[list[Vertex], bool]]) -> None:
        for group, direct in groups:
            for u in group:
                self._record_commit(u, direct)
                self._output_history(u)
