"""Simulated signatures and multi-signatures.

A signature is the pair (signer, digest of the signed bytes). An aggregate is
a signer set over one digest. This is enough to exercise every quorum and
aggregation rule of the protocol without pairing-based cryptography; a real
BLS backend could sit behind the same four functions.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable

DIGEST_SIZE = 32


def digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=DIGEST_SIZE).digest()


class CryptoError(ValueError):
    pass


@dataclass(frozen=True)
class Signature:
    signer: int
    content_digest: bytes


@dataclass(frozen=True)
class AggregateSignature:
    signer_set: frozenset[int]
    content_digest: bytes

    def __post_init__(self) -> None:
        if not self.signer_set:
            raise CryptoError("aggregate needs at least one signer")
        if not isinstance(self.signer_set, frozenset):
            object.__setattr__(self, "signer_set", frozenset(self.signer_set))

    def __len__(self) -> int:
        return len(self.signer_set)


class Keyring:
    """Key material for parties 0..n-1."""

    def __init__(self, n: int) -> None:
        if n <= 0:
            raise CryptoError("party count must be positive")
        self.n = n

    def _known(self, signer: int) -> bool:
        return 0 <= signer < self.n

    def sign(self, signer: int, content: bytes) -> Signature:
        if not self._known(signer):
            raise CryptoError(f"unknown signer {signer}")
        return Signature(signer, digest(content))

    def verify(self, sig: Signature, content: bytes) -> bool:
        return self._known(sig.signer) and sig.content_digest == digest(content)

    def verify_digest(self, sig: Signature, content_digest: bytes) -> bool:
        return self._known(sig.signer) and sig.content_digest == content_digest

    def verify_aggregate(
        self, agg: AggregateSignature, content: bytes, quorum: int = 1
    ) -> bool:
        return (
            len(agg.signer_set) >= quorum
            and all(self._known(s) for s in agg.signer_set)
            and agg.content_digest == digest(content)
        )

    def verify_aggregate_digest(
        self, agg: AggregateSignature, content_digest: bytes, quorum: int = 1
    ) -> bool:
        return (
            len(agg.signer_set) >= quorum
            and all(self._known(s) for s in agg.signer_set)
            and agg.content_digest == content_digest
        )


def aggregate(sigs: Iterable[Signature]) -> AggregateSignature:
    sigs = list(sigs)
    if not sigs:
        raise CryptoError("cannot aggregate an empty set")
    d = sigs[0].content_digest
    if any(s.content_digest != d for s in sigs):
        raise CryptoError("signatures over different contents")
    return AggregateSignature(frozenset(s.signer for s in sigs), d)


def merge_aggregates(a: AggregateSignature, b: AggregateSignature) -> AggregateSignature:
    if a.content_digest != b.content_digest:
        raise CryptoError("aggregates over different contents")
    return AggregateSignature(a.signer_set | b.signer_set, a.content_digest)
