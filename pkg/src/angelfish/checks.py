"""Run-level safety and liveness checkers over simulator results."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from .core import Vertex


@dataclass
class Verdict:
    ok: bool
    name: str
    detail: str = ""
    index: Optional[int] = None

    def __bool__(self) -> bool:
        return self.ok


def _key(v) -> object:
    return v.id if isinstance(v, Vertex) else v


def check_total_order(streams: dict[int, Sequence]) -> Verdict:
    """Pairwise prefix-comparability plus at-most-once output per stream.

    Items may be vertices or any hashable stand-in; vertices are compared by
    digest and checked per (round, source).
    """
    for p, s in streams.items():
        seen: set = set()
        for i, v in enumerate(s):
            slot = (v.round, v.source) if isinstance(v, Vertex) else _key(v)
            if slot in seen:
                return Verdict(False, "integrity", f"party {p} outputs {slot} twice", i)
            seen.add(slot)
    parties = sorted(streams)
    for a_i, a in enumerate(parties):
        for b in parties[a_i + 1 :]:
            sa, sb = streams[a], streams[b]
            for i in range(min(len(sa), len(sb))):
                if _key(sa[i]) != _key(sb[i]):
                    return Verdict(
                        False, "total_order", f"parties {a} and {b} diverge at index {i}", i
                    )
    return Verdict(True, "total_order")


def check_tc_exclusion(direct_commits: set[tuple[int, int, bytes]], tc_rounds: set[int], leader_of) -> Verdict:
    """No main leader vertex of round r is directly committed while a TC for r exists."""
    for r, source, _ in sorted(direct_commits):
        if source == leader_of(r) and r in tc_rounds:
            return Verdict(False, "tc_exclusion", f"round {r} leader committed and timed out")
    return Verdict(True, "tc_exclusion")


@dataclass
class SafetyReport:
    verdicts: list[Verdict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(self.verdicts)

    def failures(self) -> list[Verdict]:
        return [v for v in self.verdicts if not v]


def check_run(sim) -> SafetyReport:
    """All safety verdicts for one finished simulator run."""
    node0 = sim.nodes[0]
    report = SafetyReport()
    report.verdicts.append(check_total_order(sim.outputs()))
    report.verdicts.append(
        check_tc_exclusion(sim.obs.direct_commits, sim.known_tc_rounds(), node0.leader)
    )
    leaders = {p: [v.id for v, _ in sim.nodes[p].committed_leaders] for p in sim.honest}
    v = check_total_order(leaders)
    report.verdicts.append(Verdict(v.ok, "leader_sequence", v.detail, v.index))
    return report


def check_pacing(pacing: Sequence[tuple[int, int, int, int]]) -> Verdict:
    """Every sequential-entry honest vertex meets its strong-edge lower bound."""
    for node, r, edges, need in pacing:
        if edges < need:
            return Verdict(False, "pacing", f"party {node} round {r}: {edges} < {need}")
    return Verdict(True, "pacing")
