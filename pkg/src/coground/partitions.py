"""Mention partitions: the unit scored by every coreference metric.

A partition is a set of disjoint clusters of mention indices covering the
whole mention universe; singletons are explicit here even though the dataset
format leaves them implicit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ContractError, SchemaError


@dataclass(frozen=True)
class Partition:
    """Disjoint, exhaustive clusters over mentions ``0 .. n_mentions-1``."""

    clusters: tuple[tuple[int, ...], ...]
    n_mentions: int = field(default=-1)

    def __post_init__(self):
        seen: set[int] = set()
        for cluster in self.clusters:
            if len(cluster) == 0:
                raise ContractError("partition contains an empty cluster")
            for m in cluster:
                if m in seen:
                    raise ContractError(f"mention {m} appears in two clusters")
                seen.add(m)
        n = self.n_mentions if self.n_mentions >= 0 else (max(seen) + 1 if seen else 0)
        if seen != set(range(n)):
            raise ContractError(
                f"partition covers {sorted(seen)} but the universe is 0..{n - 1}"
            )
        object.__setattr__(self, "n_mentions", n)

    @staticmethod
    def from_chains(chains, n_mentions: int) -> "Partition":
        """Build a partition from (possibly partial) chains.

        Mentions absent from every chain become singletons, matching the
        dataset convention of leaving singletons implicit.
        """
        covered: set[int] = set()
        clusters: list[tuple[int, ...]] = []
        for chain in chains:
            ids = sorted(int(m) for m in chain)
            for m in ids:
                if m < 0 or m >= n_mentions:
                    raise SchemaError(f"chains: mention index {m} out of range")
                if m in covered:
                    raise SchemaError(f"chains: mention index {m} in two chains")
                covered.add(m)
            if ids:
                clusters.append(tuple(ids))
        for m in range(n_mentions):
            if m not in covered:
                clusters.append((m,))
        clusters.sort(key=lambda c: c[0])
        return Partition(tuple(clusters), n_mentions)

    def as_sets(self) -> list[frozenset[int]]:
        return [frozenset(c) for c in self.clusters]

    def cluster_of(self) -> dict[int, frozenset[int]]:
        return {m: frozenset(c) for c in self.clusters for m in c}

    def non_singletons(self) -> list[tuple[int, ...]]:
        return [c for c in self.clusters if len(c) > 1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Partition):
            return NotImplemented
        return set(self.as_sets()) == set(other.as_sets())

    def __hash__(self):
        return hash(frozenset(self.as_sets()))
